"""QA corpus: cleaning, complexity features, tier labelling, splits, synthetic tiers."""

from __future__ import annotations

import csv
import html
import json
import re
import unicodedata
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

STAGES = ("simple", "basic", "intermediate", "complex")
OPERATORS = frozenset("+−×÷*/=<>%")
MAX_TOKENS = 128


class CorpusError(ValueError):
    pass


@dataclass
class QAItem:
    question: str
    answer: str
    rationale: list[str] | None = None
    stage: str | None = None
    id: str = ""

    def target_text(self) -> str:
        """What the model is trained to emit after the question: steps, then answer."""
        return "\n".join(list(self.rationale or []) + [self.answer])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QAItem":
        known = {"question", "answer", "rationale", "stage", "id"}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class Rejection:
    id: str
    reason: str  # decode_error | empty | too_long


# -- cleaning --------------------------------------------------------------

_TAG = re.compile(r"</?[A-Za-z][^<>]*>")
_ENTITY = re.compile(r"&(?:#\d+|#x[0-9A-Fa-f]+|[A-Za-z][A-Za-z0-9]*);")


def clean_text(text: str) -> str:
    """NFKC, strip markup tags, decode entities, drop leftovers; iterated to a fixed point."""
    for _ in range(16):
        out = unicodedata.normalize("NFKC", text)
        out = _TAG.sub("", out)
        out = html.unescape(out)
        out = _ENTITY.sub("", out)
        out = unicodedata.normalize("NFKC", out).strip()
        if out == text:
            break
        text = out
    return text


def _as_text(raw) -> str:
    if isinstance(raw, bytes):
        return raw.decode("utf-8")
    return raw


def clean_item(
    question,
    answer,
    rationale=None,
    *,
    item_id: str = "",
    stage: str | None = None,
    count_tokens: Callable[[str], int] | None = None,
    max_tokens: int = MAX_TOKENS,
) -> QAItem | Rejection:
    """Clean one raw pair; returns a :class:`Rejection` instead of raising.

    ``count_tokens`` defaults to the UTF-8 byte count (a pure byte tokenizer).
    """
    count = count_tokens or (lambda s: len(s.encode("utf-8")))
    try:
        q = clean_text(_as_text(question))
        a = clean_text(_as_text(answer))
        steps = None
        if rationale is not None:
            steps = [s for s in (clean_text(_as_text(r)) for r in rationale) if s]
    except UnicodeDecodeError:
        return Rejection(item_id, "decode_error")
    if not q or not a:
        return Rejection(item_id, "empty")
    if count(q) > max_tokens or count(a) > max_tokens:
        return Rejection(item_id, "too_long")
    return QAItem(q, a, steps, stage, item_id)


# -- complexity features ---------------------------------------------------

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_DELIMITERS = re.compile(r"\n|\bStep\s+\d+\s*:|;|\b(?:therefore|so)\b", re.IGNORECASE)


@dataclass(frozen=True)
class ComplexityFeatures:
    operator_density: float
    sentence_count: int
    delimiter_count: int

    def vector(self) -> np.ndarray:
        return np.array([self.operator_density, self.sentence_count, self.delimiter_count], float)


def sentence_count(text: str) -> int:
    return sum(1 for s in _SENTENCE_END.split(text.strip()) if s.strip())


def delimiter_count(text: str) -> int:
    return len(_DELIMITERS.findall(text))


def split_steps(text: str) -> list[str]:
    """Split model output or a reference answer at step delimiters."""
    return [s.strip() for s in _DELIMITERS.split(text) if s.strip()]


def extract_features(item: QAItem) -> ComplexityFeatures:
    words = item.question.split()
    ops = sum(1 for w in words if any(ch in OPERATORS for ch in w))
    density = ops / len(words) if words else 0.0
    return ComplexityFeatures(density, sentence_count(item.question), delimiter_count(item.target_text()))


# -- logistic labelling ----------------------------------------------------

@dataclass
class ComplexityModel:
    weights: np.ndarray  # [n_classes, 4]: three feature weights then bias
    mean: np.ndarray
    scale: np.ndarray
    classes: tuple[str, ...] = STAGES
    iterations: int = 0

    def _design(self, X: np.ndarray) -> np.ndarray:
        Z = (np.atleast_2d(X) - self.mean) / self.scale
        return np.hstack([Z, np.ones((Z.shape[0], 1))])

    def predict_proba(self, X) -> np.ndarray:
        s = self._design(np.asarray(X, float)) @ self.weights.T
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> list[str]:
        return [self.classes[i] for i in self.predict_proba(X).argmax(axis=1)]

    def label(self, item: QAItem) -> str:
        return self.predict(extract_features(item).vector())[0]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "mean": self.mean.tolist(),
                "scale": self.scale.tolist(), "classes": list(self.classes),
                "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "ComplexityModel":
        return cls(np.array(d["weights"]), np.array(d["mean"]), np.array(d["scale"]),
                   tuple(d["classes"]), d.get("iterations", 0))


def train_complexity_classifier(
    labeled: Iterable[tuple[ComplexityFeatures, str]],
    lr: float = 0.5,
    max_iter: int = 10_000,
    tol: float = 1e-8,
) -> ComplexityModel:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardised with the training mean/std; iteration stops
    when the mean cross-entropy changes by less than ``tol``.
    """
    pairs = list(labeled)
    present = {s for _, s in pairs}
    if len(present) < 2:
        raise CorpusError("classifier needs at least two classes")
    classes = tuple(s for s in STAGES if s in present) + tuple(sorted(present - set(STAGES)))
    X = np.array([f.vector() for f, _ in pairs])
    y = np.array([classes.index(s) for _, s in pairs])
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    model = ComplexityModel(np.zeros((len(classes), 4)), mean, scale, classes)
    D = model._design(X)
    Y = np.eye(len(classes))[y]
    prev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        P = model.predict_proba(X)
        loss = -np.mean(np.log(np.clip((P * Y).sum(axis=1), 1e-300, None)))
        model.weights -= lr * (P - Y).T @ D / len(y)
        if abs(prev - loss) < tol:
            break
        prev = loss
    model.iterations = it
    return model


# -- splitting -------------------------------------------------------------

@dataclass
class CorpusSplit:
    train: dict[str, list[QAItem]] = field(default_factory=dict)
    val: dict[str, list[QAItem]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"train": {k: [i.to_dict() for i in v] for k, v in self.train.items()},
                "val": {k: [i.to_dict() for i in v] for k, v in self.val.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSplit":
        return cls({k: [QAItem.from_dict(i) for i in v] for k, v in d["train"].items()},
                   {k: [QAItem.from_dict(i) for i in v] for k, v in d["val"].items()})

    def all_train(self) -> list[QAItem]:
        return [i for s in self.train for i in self.train[s]]

    def all_val(self) -> list[QAItem]:
        return [i for s in self.val for i in self.val[s]]


def stratified_split(items: list[QAItem], val_frac: float = 0.10, seed: int = 0) -> CorpusSplit:
    groups: dict[str, list[QAItem]] = {}
    for it in items:
        if it.stage is None:
            raise CorpusError(f"item {it.id!r} has no stage label")
        groups.setdefault(it.stage, []).append(it)
    rng = np.random.default_rng(seed)
    split = CorpusSplit()
    order = [s for s in STAGES if s in groups] + sorted(set(groups) - set(STAGES))
    for stage in order:
        members = groups[stage]
        if len(members) < 2:
            raise CorpusError(f"stage {stage!r} has {len(members)} item(s); need >= 2")
        n_val = min(len(members) - 1, max(1, int(round(val_frac * len(members)))))
        perm = rng.permutation(len(members))
        split.val[stage] = [members[i] for i in sorted(perm[:n_val])]
        split.train[stage] = [members[i] for i in sorted(perm[n_val:])]
    return split


# -- synthetic tiers -------------------------------------------------------

MINUS = "−"


def comparison_question(a: int, b: int) -> tuple[str, str]:
    return f"Is {a} greater than {b}?", "Yes" if a > b else "No"


def _tier1(rng) -> QAItem:
    kind = rng.integers(4)
    a, b = (int(v) for v in rng.integers(1, 100, size=2))
    if kind == 0:
        q, ans = comparison_question(a, b)
    elif kind == 1:
        q, ans = f"Is {a} less than {b}?", "Yes" if a < b else "No"
    elif kind == 2:
        q, ans = f"What is {a} + {b}?", str(a + b)
    else:
        q, ans = f"Is {a} an even number?", "Yes" if a % 2 == 0 else "No"
    return QAItem(q, ans, None, "simple")


def _tier2(rng) -> QAItem:
    kind = rng.integers(4)
    if kind == 0:
        a, b, c = (int(v) for v in rng.integers(2, 20, size=3))
        r = a + b * c
        q = f"What is {a} + {b} × {c}?"
        steps = [f"{b} × {c} = {b * c}", f"{a} + {b * c} = {r}"]
    elif kind == 1:
        a, b, c = (int(v) for v in rng.integers(2, 20, size=3))
        r = (a + b) * c
        q = f"What is ({a} + {b}) × {c}?"
        steps = [f"{a} + {b} = {a + b}", f"{a + b} × {c} = {r}"]
    elif kind == 2:
        a, b = (int(v) for v in rng.integers(2, 13, size=2))
        c = int(rng.integers(1, a * b))
        r = a * b - c
        q = f"What is {a} × {b} {MINUS} {c}?"
        steps = [f"{a} × {b} = {a * b}", f"{a * b} {MINUS} {c} = {r}"]
    else:
        m, x = (int(v) for v in rng.integers(2, 10, size=2))
        c = int(rng.integers(1, 30))
        rhs = m * x + c
        q = f"If {m}x + {c} = {rhs}, what is x?"
        steps = [f"{m}x = {rhs} {MINUS} {c} = {m * x}", f"x = {m * x} ÷ {m} = {x}"]
        r = x
    return QAItem(q, str(r), steps, "basic")


_NAMES = ("Ann", "Ben", "Cara", "Dev", "Eli", "Fay", "Gus", "Hana", "Ivo", "Jon")
_ITEMS = ("pens", "apples", "books", "cups", "stamps", "shells")


def _tier3(rng) -> QAItem:
    kind = rng.integers(3)
    name = _NAMES[rng.integers(len(_NAMES))]
    if kind == 0:
        thing = _ITEMS[rng.integers(len(_ITEMS))]
        n1, unit = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        n2 = int(rng.integers(2, 9))
        cost1, total = n1 * unit, n2 * unit
        pay = total + int(rng.integers(1, 20))
        q = (f"{n1} {thing} cost {cost1} dollars. {name} buys {n2} {thing} "
             f"and pays {pay} dollars. How much change does {name} get?")
        steps = [f"One costs {cost1} ÷ {n1} = {unit}", f"{n2} cost {n2} × {unit} = {total}",
                 f"Change is {pay} {MINUS} {total} = {pay - total}"]
        ans = pay - total
    elif kind == 1:
        start, d1, d2 = int(rng.integers(1, 12)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
        q = (f"A bus leaves at {start} o'clock. It drives for {d1} hours and "
             f"then waits {d2} hours. At what hour does it leave again?")
        mid = start + d1
        steps = [f"It starts at {start}", f"{start} + {d1} = {mid}", f"{mid} + {d2} = {mid + d2}"]
        ans = mid + d2
    else:
        per, boxes = int(rng.integers(2, 10)), int(rng.integers(2, 8))
        eaten = int(rng.integers(1, per * boxes))
        q = (f"{name} has {boxes} boxes with {per} cookies in each box. "
             f"{name} eats {eaten} cookies. How many cookies are left?")
        total = per * boxes
        steps = [f"Each box has {per}", f"{boxes} × {per} = {total}", f"{total} {MINUS} {eaten} = {total - eaten}"]
        ans = total - eaten
    return QAItem(q, str(ans), steps, "intermediate")


def _tier4(rng) -> QAItem:
    kind = rng.integers(2)
    name = _NAMES[rng.integers(len(_NAMES))]
    if kind == 0:
        c, b, t = (int(v) for v in rng.integers(1, 6, size=3))
        q = (f"{name} has {c} cars. {name} also has {b} bikes. "
             f"There are {t} tricycles too. How many wheels are there in total?")
        x, y, z = 4 * c, 2 * b, 3 * t
        steps = [f"{c} cars have {c} × 4 = {x} wheels", f"{b} bikes have {b} × 2 = {y} wheels",
                 f"{t} tricycles have {t} × 3 = {z} wheels", f"{x} + {y} + {z} = {x + y + z}"]
        ans = x + y + z
    else:
        h, w, k = int(rng.integers(2, 9)), int(rng.integers(5, 20)), int(rng.integers(2, 5))
        q = (f"{name} works {h} hours every weekday. {name} rests on weekends. "
             f"{name} earns {w} dollars per hour. How much does {name} earn in {k} weeks?")
        hw = 5 * h
        pw = hw * w
        steps = ["A week has 5 weekdays", f"5 × {h} = {hw} hours per week",
                 f"{hw} × {w} = {pw} dollars per week", f"{k} × {pw} = {k * pw}"]
        ans = k * pw
    return QAItem(q, str(ans), steps, "complex")


_TIERS = {"simple": _tier1, "basic": _tier2, "intermediate": _tier3, "complex": _tier4}


def generate_synthetic(tier: str, n: int, seed: int = 0) -> list[QAItem]:
    """``n`` items of one tier; tiers 2-4 carry gold step lists."""
    if tier not in _TIERS:
        raise CorpusError(f"unknown tier {tier!r}")
    if n < 1:
        raise CorpusError("n must be >= 1")
    rng = np.random.default_rng([seed, STAGES.index(tier)])
    items = []
    for i in range(n):
        it = _TIERS[tier](rng)
        it.id = f"{tier}-{seed}-{i}"
        items.append(it)
    return items


# -- files -----------------------------------------------------------------

def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line.decode("utf-8")))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                rows.append({"_error": str(exc), "id": f"line{lineno}"})
    return rows


def write_jsonl(path: str | Path, items: Iterable[QAItem | dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            d = it.to_dict() if isinstance(it, QAItem) else it
            fh.write(json.dumps(d, ensure_ascii=False, sort_keys=True) + "\n")


def write_rejections(path: str | Path, rejections: Iterable[Rejection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "reason"])
        for r in rejections:
            w.writerow([r.id, r.reason])
