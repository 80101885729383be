"""GPT-2-shaped decoder-only transformer on top of :mod:`cognilab.autograd`.

Pre-LayerNorm blocks, causal multi-head attention, tanh-GELU MLP, fixed
sinusoidal positions, untied unembedding. Each head's output is multiplied by
a gate scalar (1 by default) before the output projection, which gives the
saliency probe a differentiable per-head handle.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from cognilab.autograd import Tape, Tensor


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    vocab_size: int = 512
    max_seq_len: int = 128
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CaptureBundle:
    attention: np.ndarray  # [L, H, T, T] (batch of one)
    hidden_states: list[np.ndarray] = field(default_factory=list)  # L x [T, d]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v, h = cfg.d_model, cfg.vocab_size, cfg.n_heads
    shapes: dict[str, tuple[int, ...]] = {"wte": (v, d)}
    for layer in range(cfg.n_layers):
        p = f"h{layer}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, 4 * d), p + "mlp.b1": (4 * d,),
            p + "mlp.w2": (4 * d, d), p + "mlp.b2": (d,),
        })
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["w_unembed"] = (d, v)
    shapes["gates"] = (cfg.n_layers, h)
    return shapes


GATES = "gates"


def trainable_names(params: dict[str, np.ndarray]) -> list[str]:
    """All parameter names except the per-head gates, in canonical order."""
    return [k for k in params if k != GATES]


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == GATES or leaf == "g":
            params[name] = np.ones(shape)
        elif leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return params


def n_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in params.values()))


def sinusoidal_positions(n_pos: int, d_model: int) -> np.ndarray:
    """``PE[p, 2i] = sin(p / 10000^(2i/d))``, ``PE[p, 2i+1] = cos(...)``."""
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((n_pos, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : d_model // 2]
    return pe


def causal_mask(t: int) -> np.ndarray:
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = -np.inf
    return m


def forward_on_tape(
    tape: Tape,
    cfg: ModelConfig,
    P: dict[str, Tensor],
    tokens: np.ndarray,
    gates: Tensor | None = None,
    capture: bool = False,
) -> tuple[Tensor, CaptureBundle | None]:
    """Forward pass over ``tokens`` of shape [B, T]; returns logits [B, T, V].

    ``gates`` defaults to ``P["gates"]`` ([L, H]); a [L, B, H] tensor gives every
    batch row its own gates (used for per-item saliency in one pass).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ModelError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if t == 0:
        raise ModelError("empty sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ModelError("token id out of range")
    nh, dh = cfg.n_heads, cfg.d_head
    gates = P[GATES] if gates is None else gates
    per_item_gates = gates.data.ndim == 3

    x = tape.add(tape.embedding(P["wte"], tokens), tape.const(sinusoidal_positions(t, cfg.d_model)))
    mask = causal_mask(t)
    inv_sqrt = 1.0 / math.sqrt(dh)
    attn_maps, hidden = [], []
    for layer in range(cfg.n_layers):
        p = f"h{layer}."
        h = tape.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(w, bias):
            y = tape.add(tape.matmul(h, P[w]), P[bias])
            return tape.transpose(tape.reshape(y, (b, t, nh, dh)), (0, 2, 1, 3))

        q = heads(p + "attn.wq", p + "attn.bq")
        k = heads(p + "attn.wk", p + "attn.bk")
        v = heads(p + "attn.wv", p + "attn.bv")
        scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        att = tape.softmax(scores, mask)
        if capture:
            attn_maps.append(att.data[0].copy())
        o = tape.matmul(att, v)  # [B, H, T, dh]
        g_shape = (b, nh, 1, 1) if per_item_gates else (nh, 1, 1)
        g = tape.reshape(tape.select(gates, layer), g_shape)
        o = tape.mul(o, g)
        o = tape.reshape(tape.transpose(o, (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = tape.add(x, tape.add(tape.matmul(o, P[p + "attn.wo"]), P[p + "attn.bo"]))

        h2 = tape.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        m = tape.gelu(tape.add(tape.matmul(h2, P[p + "mlp.w1"]), P[p + "mlp.b1"]))
        x = tape.add(x, tape.add(tape.matmul(m, P[p + "mlp.w2"]), P[p + "mlp.b2"]))
        if capture:
            hidden.append(x.data[0].copy())

    x = tape.layer_norm(x, P["lnf.g"], P["lnf.b"])
    logits = tape.matmul(x, P["w_unembed"])
    bundle = CaptureBundle(np.stack(attn_maps), hidden) if capture else None
    return logits, bundle


def wrap_params(params: dict[str, np.ndarray], tape: Tape | None = None, trainable: bool = False) -> dict[str, Tensor]:
    """Wrap arrays as tensors; with ``trainable`` every non-gate array is watched."""
    out = {}
    for k, a in params.items():
        t = Tensor(a)
        if trainable and k != GATES and tape is not None:
            tape.watch(t)
        out[k] = t
    return out


def forward(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    tokens,
    capture: bool = False,
) -> tuple[np.ndarray, CaptureBundle | None]:
    """Inference forward for one sequence ([T]) or a batch ([B, T])."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    tape = Tape()
    logits, bundle = forward_on_tape(tape, cfg, wrap_params(params), tokens, capture=capture)
    out = logits.data[0] if single else logits.data
    return out, bundle


def generate_greedy(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    prompt,
    max_new: int,
    eos: int,
) -> list[int]:
    """Greedy continuation of ``prompt``; stops after ``eos`` or ``max_new`` tokens."""
    return generate_greedy_batch(params, cfg, [prompt], max_new, eos)[0]


def _check_prompts(cfg: ModelConfig, prompts) -> list[list[int]]:
    seqs = [list(map(int, p)) for p in prompts]
    for s in seqs:
        if not s:
            raise ModelError("prompt must be nonempty")
        if len(s) > cfg.max_seq_len:
            raise ModelError(f"prompt length {len(s)} exceeds max_seq_len {cfg.max_seq_len}")
        if min(s) < 0 or max(s) >= cfg.vocab_size:
            raise ModelError("token id out of range")
    return seqs


def generate_greedy_batch(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    prompts: list,
    max_new: int,
    eos: int,
) -> list[list[int]]:
    """Greedy decoding for several prompts with a per-layer key/value cache.

    All rows advance one position per step. A row still inside its prompt is
    fed its next prompt token; once past it, the argmax is appended. Each
    row stops after ``eos``, ``max_new`` tokens, or at ``max_seq_len``.
    """
    if not prompts:
        return []
    seqs = _check_prompts(cfg, prompts)
    n, T, L, nh, dh, d = len(seqs), cfg.max_seq_len, cfg.n_layers, cfg.n_heads, cfg.d_head, cfg.d_model
    lens = [len(s) for s in seqs]
    outs: list[list[int]] = [[] for _ in seqs]
    done = [max_new <= 0 or lens[i] >= T for i in range(n)]
    K = np.zeros((L, n, nh, T, dh))
    V = np.zeros((L, n, nh, T, dh))
    pe = sinusoidal_positions(T, d)
    tape = Tape()
    P = wrap_params(params)
    gates = params[GATES]
    inv_sqrt = 1.0 / math.sqrt(dh)
    pos = 0
    while True:
        idx = [i for i in range(n) if not done[i]]
        if not idx:
            break
        b = len(idx)
        x = params["wte"][[seqs[i][pos] for i in idx]] + pe[pos]  # [b, d]
        for layer in range(L):
            p = f"h{layer}."
            h = tape.layer_norm(Tensor(x), P[p + "ln1.g"], P[p + "ln1.b"]).data
            q = (h @ params[p + "attn.wq"] + params[p + "attn.bq"]).reshape(b, nh, 1, dh)
            K[layer, idx, :, pos] = (h @ params[p + "attn.wk"] + params[p + "attn.bk"]).reshape(b, nh, dh)
            V[layer, idx, :, pos] = (h @ params[p + "attn.wv"] + params[p + "attn.bv"]).reshape(b, nh, dh)
            keys = K[layer, idx, :, : pos + 1]
            att = tape.softmax(Tensor(q @ keys.transpose(0, 1, 3, 2) * inv_sqrt)).data
            o = (att @ V[layer, idx, :, : pos + 1]) * gates[layer][:, None, None]
            x = x + o.reshape(b, d) @ params[p + "attn.wo"] + params[p + "attn.bo"]
            h2 = tape.layer_norm(Tensor(x), P[p + "ln2.g"], P[p + "ln2.b"]).data
            m = tape.gelu(Tensor(h2 @ params[p + "mlp.w1"] + params[p + "mlp.b1"])).data
            x = x + m @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        logits = tape.layer_norm(Tensor(x), P["lnf.g"], P["lnf.b"]).data @ params["w_unembed"]
        for r, i in enumerate(idx):
            if pos < lens[i] - 1:
                continue
            nxt = int(np.argmax(logits[r]))
            seqs[i].append(nxt)
            outs[i].append(nxt)
            if nxt == eos or len(outs[i]) >= max_new or len(seqs[i]) >= T:
                done[i] = True
        pos += 1
    return outs


def generate_greedy_reference(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    prompts: list,
    max_new: int,
    eos: int,
) -> list[list[int]]:
    """Greedy decoding that recomputes the full prefix every step.

    Rows are right-padded; causality makes the padding invisible to every
    live position. Slow, but independent of the key/value cache used by
    :func:`generate_greedy_batch`, which it serves to check.
    """
    if not prompts:
        return []
    seqs = [list(map(int, p)) for p in prompts]
    for s in seqs:
        if not s:
            raise ModelError("prompt must be nonempty")
        if len(s) > cfg.max_seq_len:
            raise ModelError(f"prompt length {len(s)} exceeds max_seq_len {cfg.max_seq_len}")
    outs: list[list[int]] = [[] for _ in seqs]
    done = [False] * len(seqs)
    P = None
    for _ in range(max_new):
        live = [i for i, d in enumerate(done) if not d and len(seqs[i]) < cfg.max_seq_len]
        if not live:
            break
        width = max(len(seqs[i]) for i in live)
        batch = np.zeros((len(live), width), dtype=np.int64)
        for r, i in enumerate(live):
            batch[r, : len(seqs[i])] = seqs[i]
        if P is None:
            P = wrap_params(params)
        logits, _ = forward_on_tape(Tape(), cfg, P, batch)
        for r, i in enumerate(live):
            nxt = int(np.argmax(logits.data[r, len(seqs[i]) - 1]))
            seqs[i].append(nxt)
            outs[i].append(nxt)
            if nxt == eos:
                done[i] = True
        for i in range(len(seqs)):
            if not done[i] and len(seqs[i]) >= cfg.max_seq_len:
                done[i] = True
    return outs
