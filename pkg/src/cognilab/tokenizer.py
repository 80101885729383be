"""Byte-level BPE tokenizer.

Ids 0..255 are raw bytes, 256..258 are the special tokens (bos, eos, sep) and
learned merges start at 259. Text is first chunked with a GPT-2-like regex
(digits stay single so numbers never fuse), merges never cross chunk
boundaries, and every byte string round-trips exactly.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

BOS, EOS, SEP = 256, 257, 258
N_SPECIAL = 3
BASE_VOCAB = 256 + N_SPECIAL

_CHUNK = re.compile(rb" ?[A-Za-z]+| ?[0-9]| ?[^\sA-Za-z0-9]+|\s+")


class TokenizerError(ValueError):
    pass


def chunk_bytes(data: bytes) -> list[bytes]:
    return _CHUNK.findall(data)


def _merge(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out, i, n = [], 0, len(ids)
    while i < n:
        if i + 1 < n and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


@dataclass
class Tokenizer:
    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.ranks = {tuple(p): i for i, p in enumerate(self.merges)}
        self.vocab: dict[int, bytes] = {i: bytes([i]) for i in range(256)}
        for i, (a, b) in enumerate(self.merges):
            self.vocab[BASE_VOCAB + i] = self.vocab[a] + self.vocab[b]
        self._cache: dict[bytes, list[int]] = {}

    @property
    def vocab_size(self) -> int:
        return BASE_VOCAB + len(self.merges)

    def _encode_chunk(self, chunk: bytes) -> list[int]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        ids = list(chunk)
        while len(ids) > 1:
            best = min(zip(ids, ids[1:]), key=lambda p: self.ranks.get(p, 1 << 30))
            rank = self.ranks.get(best)
            if rank is None:
                break
            ids = _merge(ids, best, BASE_VOCAB + rank)
        self._cache[chunk] = ids
        return ids

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else text
        out: list[int] = []
        for chunk in chunk_bytes(data):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode_bytes(self, ids) -> bytes:
        return b"".join(self.vocab[i] for i in ids if i < 256 or i >= BASE_VOCAB)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def to_dict(self) -> dict:
        return {"kind": "byte_bpe", "specials": {"bos": BOS, "eos": EOS, "sep": SEP},
                "merges": [list(p) for p in self.merges]}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        d = json.loads(Path(path).read_text())
        return cls([tuple(p) for p in d["merges"]])


def train_tokenizer(corpus, target_vocab: int) -> Tokenizer:
    """Learn ``target_vocab - 259`` merges, most frequent adjacent pair first.

    Ties break toward the numerically smallest pair so training is
    deterministic. Stops early if no pair occurs at least twice.
    """
    texts = list(corpus)
    if not texts:
        raise TokenizerError("empty corpus")
    if target_vocab < BASE_VOCAB:
        raise TokenizerError(f"target_vocab must be >= {BASE_VOCAB}")
    words: Counter = Counter()
    for t in texts:
        data = t.encode("utf-8") if isinstance(t, str) else t
        words.update(chunk_bytes(data))
    seqs = [(list(w), c) for w, c in words.items()]
    merges: list[tuple[int, int]] = []
    for new_id in range(BASE_VOCAB, target_vocab):
        pairs: Counter = Counter()
        for ids, c in seqs:
            for p in zip(ids, ids[1:]):
                pairs[p] += c
        if not pairs:
            break
        top = max(pairs.values())
        if top < 2:
            break
        best = min(p for p, c in pairs.items() if c == top)
        merges.append(best)
        seqs = [(_merge(ids, best, new_id) if len(ids) > 1 else ids, c) for ids, c in seqs]
    return Tokenizer(merges)
