import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cognilab import io
from cognilab.config import OptimConfig, RunConfig
from cognilab.corpus import STAGES, generate_synthetic, stratified_split
from cognilab.model import ModelConfig, init_params, trainable_names
from cognilab.tokenizer import train_tokenizer
from cognilab.trainer import (Example, OptimState, TrainingError, accumulate_grads, adamw_step, build_plan,
                              clip_global_norm, encode_example, global_norm, loss_and_grads, lr_at, make_batch,
                              round_robin, run_plan, stage_order, total_updates)


# -- schedule ------------------------------------------------------------------

def test_lr_examples():
    assert lr_at(200, 200, 1000, 1e-4) == pytest.approx(1e-4)
    assert lr_at(0, 200, 1000, 1e-4) == 0.0
    assert lr_at(1000, 200, 1000, 1e-4) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(600, 200, 1000, 1e-4) == pytest.approx(0.5e-4)
    assert lr_at(100, 200, 1000, 1e-4) == pytest.approx(0.5e-4)


def test_lr_errors():
    with pytest.raises(TrainingError):
        lr_at(0, 10, 10, 1.0)
    with pytest.raises(TrainingError):
        lr_at(11, 2, 10, 1.0)


@given(st.integers(1, 50), st.integers(1, 500), st.data())
def test_lr_bounded_and_decaying(warmup, extra, data):
    total = warmup + extra
    s = data.draw(st.integers(warmup, total - 1))
    lr, nxt = lr_at(s, warmup, total, 1.0), lr_at(s + 1, warmup, total, 1.0)
    assert 0 <= nxt <= lr <= 1.0 + 1e-15


# -- optimizer -----------------------------------------------------------------

def test_adamw_hand_computed_step():
    p = {"w": np.array([1.0])}
    st_ = OptimState.zeros(p)
    adamw_step(p, {"w": np.array([1.0])}, st_, 1e-4, OptimConfig(weight_decay=0.01))
    assert p["w"][0] == pytest.approx(1.0 - 1e-6 - 1e-4, abs=1e-10)
    assert round(p["w"][0], 6) == 0.999899
    assert st_.t == 1


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": np.array([0.3, -2.0])}
    st_ = OptimState.zeros(p)
    adamw_step(p, {"w": np.zeros(2)}, st_, 1e-3, OptimConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"], [0.3, -2.0])


def test_adamw_rejects_non_finite():
    p = {"w": np.array([1.0])}
    with pytest.raises(TrainingError):
        adamw_step(p, {"w": np.array([np.nan])}, OptimState.zeros(p), 1e-3, OptimConfig())


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(1, 5))
def test_adamw_second_moment_nonnegative(g, steps):
    p = {"w": np.zeros(3)}
    s = OptimState.zeros(p)
    for _ in range(steps):
        adamw_step(p, {"w": np.array(g)}, s, 1e-3, OptimConfig())
    assert np.all(s.v["w"] >= 0)


def test_clipping():
    g = {"a": np.array([2.0, 0.0])}
    clipped, norm = clip_global_norm(g, 1.0)
    assert norm == 2.0
    np.testing.assert_allclose(clipped["a"], [1.0, 0.0])
    small = {"a": np.array([0.3, 0.4])}
    same, n2 = clip_global_norm(small, 1.0)
    assert n2 == pytest.approx(0.5) and same is small
    assert global_norm({"a": np.ones(4), "b": np.ones(5)}) == 3.0


# -- batching and gradients ----------------------------------------------------

def _examples(k, rng):
    out = []
    for _ in range(k):
        n = int(rng.integers(4, 10))
        seq = [int(x) for x in rng.integers(3, 30, size=n + 1)]
        cut = int(rng.integers(1, n))
        out.append(Example(seq[:-1], seq[1:], [i >= cut for i in range(n)]))
    return out


def test_accumulation_equals_one_pass():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, vocab_size=30, max_seq_len=16)
    params = init_params(cfg)
    ex = _examples(6, np.random.default_rng(0))
    full_loss, full = loss_and_grads(params, cfg, make_batch(ex, len(ex)))
    acc_loss, acc = accumulate_grads(params, cfg, ex, 2)
    assert acc_loss == pytest.approx(full_loss, rel=1e-12)
    for k in trainable_names(params):
        np.testing.assert_allclose(acc[k], full[k], rtol=1e-9, atol=1e-15)


def test_padding_does_not_change_row_loss():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, vocab_size=30, max_seq_len=16)
    params = init_params(cfg)
    ex = _examples(2, np.random.default_rng(4))
    alone, _ = loss_and_grads(params, cfg, make_batch(ex[:1], 1))
    both, _ = loss_and_grads(params, cfg, make_batch(ex, 1))
    second, _ = loss_and_grads(params, cfg, make_batch(ex[1:], 1))
    assert both == pytest.approx(alone + second, rel=1e-12)


def test_encode_example_masks_prompt():
    tok = train_tokenizer(["What is 1 + 2? 3"], 259)
    it = generate_synthetic("simple", 1)[0]
    ex = encode_example(tok, it, 128)
    n_q = len(tok.encode(it.question))
    assert ex.mask[:n_q + 1] == [False] * (n_q + 1)
    assert all(ex.mask[n_q + 1:])
    assert encode_example(tok, it, 5) is None


# -- plans ---------------------------------------------------------------------

def test_stage_order_modes():
    assert stage_order("curriculum", 0, 4) == [0, 1, 2, 3]
    order = stage_order("shuffled", 0, 4)
    assert sorted(order) == [0, 1, 2, 3] and order != [0, 1, 2, 3]
    assert order == stage_order("shuffled", 0, 4)


def test_round_robin_balances_stages():
    groups = {s: generate_synthetic(s, 3) for s in STAGES}
    picked = round_robin(groups, 6)
    assert [it.stage for it in picked] == ["simple", "basic", "intermediate", "complex", "simple", "basic"]


@pytest.fixture(scope="module")
def mini():
    cfg = RunConfig.load("configs/smoke.json")
    cfg.data.items_per_tier = [24, 24, 24, 24]
    cfg.plan.eval_items = 0
    cfg.plan.dump_prompts = 1
    cfg.model = replace(cfg.model, max_seq_len=256)
    items = [it for s in STAGES for it in generate_synthetic(s, 24, seed=0)]
    sp = stratified_split(items, 0.1, 0)
    tok = train_tokenizer([it.question + "\n" + it.target_text() for it in items], 280)
    return cfg, sp, tok


def test_plan_parity_across_modes(mini):
    cfg, sp, _ = mini
    totals = {m: total_updates(build_plan(cfg, sp, m), cfg.optim)
              for m in ("curriculum", "baseline", "shuffled", "reset_at_boundaries")}
    assert len(set(totals.values())) == 1


def test_shuffled_plan_is_permutation_of_stages(mini):
    cfg, sp, _ = mini
    cur = build_plan(cfg, sp, "curriculum")
    shuf = build_plan(cfg, sp, "shuffled")
    assert sorted(s.stage for s in shuf.stages) == sorted(s.stage for s in cur.stages)
    assert [s.stage for s in cur.stages] == list(STAGES)
    assert sorted(it.id for s in shuf.stages for it in s.items) == sorted(it.id for s in cur.stages for it in s.items)


def _first_ckpt_after_boundary(run_dir):
    steps = io.checkpoint_steps(run_dir)
    metas = [io.load_checkpoint(run_dir / "checkpoints" / f"step_{s}") for s in steps]
    by_stage = {}
    for s, (_, optim, man) in zip(steps, metas):
        by_stage.setdefault(man["stage"], []).append((s, optim))
    return by_stage


def test_reset_vs_continuous_optimizer_state(mini, tmp_path):
    cfg, sp, tok = mini
    cur = run_plan(cfg, build_plan(cfg, sp, "curriculum"), sp, tok, tmp_path / "c")
    rst = run_plan(cfg, build_plan(cfg, sp, "reset_at_boundaries"), sp, tok, tmp_path / "r")
    assert cur.step == rst.step
    assert cur.state.t == cur.step
    assert rst.state.t < rst.step
    c_stages = _first_ckpt_after_boundary(tmp_path / "c")
    r_stages = _first_ckpt_after_boundary(tmp_path / "r")
    end_first = c_stages["simple"][-1][0]
    for s, optim in c_stages["basic"]:
        assert optim["t"] == s
    for s, optim in r_stages["basic"]:
        assert optim["t"] == s - end_first


def test_reset_zeroes_moments():
    p = {"w": np.ones(3)}
    s = OptimState.zeros(p)
    adamw_step(p, {"w": np.ones(3)}, s, 1e-3, OptimConfig())
    s.reset()
    assert s.t == 0 and not s.m["w"].any() and not s.v["w"].any()


def test_warmup_longer_than_stage_rejected(mini):
    cfg, sp, tok = mini
    bad = replace(cfg, optim=replace(cfg.optim, warmup_steps=500))
    with pytest.raises(TrainingError):
        run_plan(bad, build_plan(bad, sp, "curriculum"), sp, tok, None)
