"""Byte-level BPE vocabularies, vocabulary overlap and embedding transplant."""

from __future__ import annotations

import base64
import heapq
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch

SPECIAL_TOKENS = {
    "PAD": "<|pad|>",
    "BOS": "<|bos|>",
    "EOS": "<|eos|>",
    "MASK": "<|mask|>",
    "UNK": "<|unk|>",
    "TRANSLATION": "<|translation|>",
}

# A leading space sticks to the following word; runs of whitespace stand alone.
PRETOKEN_RE = re.compile(rb" ?[^\s]+|\s+")


def pretokenize(data: bytes) -> list[bytes]:
    return PRETOKEN_RE.findall(data)


@dataclass
class Vocab:
    tokens: list[bytes]
    merges: list[tuple[int, int]]
    specials: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @cached_property
    def token_to_id(self) -> dict[bytes, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    @cached_property
    def merge_ranks(self) -> dict[tuple[int, int], tuple[int, int]]:
        lookup = self.token_to_id
        ranks = {}
        for rank, (a, b) in enumerate(self.merges):
            ranks.setdefault((a, b), (rank, lookup[self.tokens[a] + self.tokens[b]]))
        return ranks

    @cached_property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.specials.values())

    @cached_property
    def _special_re(self) -> re.Pattern:
        alts = sorted((re.escape(self.tokens[i]) for i in self.specials.values()), key=len, reverse=True)
        return re.compile(b"(" + b"|".join(alts) + b")")

    @cached_property
    def _chunk_cache(self) -> dict[bytes, tuple[int, ...]]:
        return {}

    def validate(self) -> None:
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("token byte sequences are not unique")
        missing = set(SPECIAL_TOKENS) - set(self.specials)
        if missing:
            raise ValueError(f"missing special tokens: {sorted(missing)}")
        if len(set(self.specials.values())) != len(self.specials):
            raise ValueError("special token ids collide")
        for sid in self.specials.values():
            if not 0 <= sid < self.size:
                raise ValueError(f"special id {sid} out of range")
        for a, b in self.merges:
            if self.tokens[a] + self.tokens[b] not in self.token_to_id:
                raise ValueError(f"merge ({a}, {b}) produces an unknown token")

    def id_of(self, name: str) -> int:
        return self.specials[name]

    def encode(self, text: str) -> list[int]:
        return encode(self, text)

    def decode(self, ids: Iterable[int]) -> str:
        return decode(self, ids)

    def to_json(self) -> dict:
        return {
            "tokens": [base64.b64encode(t).decode("ascii") for t in self.tokens],
            "merges": [[a, b] for a, b in self.merges],
            "specials": dict(self.specials),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        vocab = cls(
            tokens=[base64.b64decode(t) for t in obj["tokens"]],
            merges=[(int(a), int(b)) for a, b in obj["merges"]],
            specials={k: int(v) for k, v in obj["specials"].items()},
        )
        vocab.validate()
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _base_vocab(specials: dict[str, str]) -> tuple[list[bytes], dict[str, int]]:
    tokens = [bytes([i]) for i in range(256)]
    ids = {}
    for name, text in specials.items():
        ids[name] = len(tokens)
        tokens.append(text.encode("utf-8"))
    return tokens, ids


def _split_specials(data: bytes, pattern: re.Pattern) -> list[bytes]:
    return [piece for piece in pattern.split(data) if piece]


def train_bpe(
    corpus: Iterable[str],
    target_size: int,
    specials: Optional[dict[str, str]] = None,
) -> Vocab:
    """Train a byte-level BPE vocabulary of at most ``target_size`` tokens.

    Pairs are merged by descending corpus frequency; ties go to the pair whose
    (left bytes, right bytes) sorts first. Only pairs seen at least twice are
    merged, so training can stop short of ``target_size``.
    """
    specials = dict(SPECIAL_TOKENS if specials is None else specials)
    if set(SPECIAL_TOKENS) - set(specials):
        raise ValueError("specials must include PAD, BOS, EOS, MASK, UNK and TRANSLATION")
    if target_size < 256 + len(specials):
        raise ValueError(f"target_size {target_size} is below the byte alphabet plus specials")

    tokens, special_ids = _base_vocab(specials)
    special_re = re.compile(
        b"(" + b"|".join(re.escape(s.encode("utf-8")) for s in sorted(specials.values(), key=len, reverse=True)) + b")"
    )
    special_bytes = {tokens[i] for i in special_ids.values()}

    word_freq: Counter[bytes] = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        for piece in _split_specials(doc.encode("utf-8"), special_re):
            if piece in special_bytes:
                continue
            word_freq.update(pretokenize(piece))
    if n_docs == 0:
        raise ValueError("empty corpus")

    words = [list(w) for w in word_freq]
    freqs = list(word_freq.values())
    lookup = {tok: i for i, tok in enumerate(tokens)}

    pair_counts: dict[tuple[int, int], int] = defaultdict(int)
    pair_words: dict[tuple[int, int], set[int]] = defaultdict(set)
    for wi, (sym, f) in enumerate(zip(words, freqs)):
        for pair in zip(sym, sym[1:]):
            pair_counts[pair] += f
            pair_words[pair].add(wi)

    def heap_key(pair, count):
        return (-count, tokens[pair[0]], tokens[pair[1]], pair)

    heap = [heap_key(p, c) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[int, int]] = []
    while len(tokens) < target_size and heap:
        neg, _, _, pair = heapq.heappop(heap)
        count = pair_counts.get(pair, 0)
        if count != -neg:
            if count > 0:
                heapq.heappush(heap, heap_key(pair, count))
            continue
        if count < 2:
            break
        a, b = pair
        merged = tokens[a] + tokens[b]
        new_id = lookup.get(merged)
        if new_id is None:
            new_id = len(tokens)
            tokens.append(merged)
            lookup[merged] = new_id
        merges.append(pair)

        touched = set()
        for wi in list(pair_words[pair]):
            sym, f = words[wi], freqs[wi]
            for old in zip(sym, sym[1:]):
                pair_counts[old] -= f
                touched.add(old)
            out, i = [], 0
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == a and sym[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            words[wi] = out
            for new in zip(out, out[1:]):
                pair_counts[new] += f
                pair_words[new].add(wi)
                touched.add(new)
        for p in touched:
            c = pair_counts[p]
            if c <= 0:
                pair_counts.pop(p, None)
                pair_words.pop(p, None)
            else:
                heapq.heappush(heap, heap_key(p, c))

    vocab = Vocab(tokens=tokens, merges=merges, specials=special_ids)
    vocab.validate()
    return vocab


def _apply_merges(vocab: Vocab, data: bytes) -> list[int]:
    ranks = vocab.merge_ranks
    ids = list(data)
    while len(ids) > 1:
        best = None
        for pair in zip(ids, ids[1:]):
            hit = ranks.get(pair)
            if hit is not None and (best is None or hit[0] < best[1][0]):
                best = (pair, hit)
        if best is None:
            break
        (a, b), (_, new_id) = best
        out, i = [], 0
        while i < len(ids):
            if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
                out.append(new_id)
                i += 2
            else:
                out.append(ids[i])
                i += 1
        ids = out
    return ids


def encode_bytes(vocab: Vocab, data: bytes) -> list[int]:
    """Apply the merge list to raw bytes with no pre-tokenization or special matching."""
    return _apply_merges(vocab, data)


def encode(vocab: Vocab, text: str) -> list[int]:
    cache = vocab._chunk_cache
    lookup = vocab.token_to_id
    out: list[int] = []
    for piece in _split_specials(text.encode("utf-8"), vocab._special_re):
        sid = lookup.get(piece)
        if sid is not None and sid in vocab.special_ids:
            out.append(sid)
            continue
        for chunk in pretokenize(piece):
            ids = cache.get(chunk)
            if ids is None:
                ids = cache[chunk] = tuple(_apply_merges(vocab, chunk))
            out.extend(ids)
    return out


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    return b"".join(vocab.tokens[i] for i in ids).decode("utf-8", errors="replace")


def vocab_overlap(a: Vocab, b: Vocab) -> float:
    """Fraction of ``b``'s tokens that also appear, byte for byte, in ``a``."""
    return len(set(a.tokens) & set(b.tokens)) / b.size


@dataclass
class TransplantPlan:
    shared: list[tuple[int, int]]
    fresh: list[tuple[int, list[int]]]
    overlap: float
    dst_size: int = field(default=0)

    def to_json(self) -> dict:
        return {
            "shared": [list(p) for p in self.shared],
            "fresh": [[d, list(r)] for d, r in self.fresh],
            "overlap": self.overlap,
            "dst_size": self.dst_size,
        }


def build_transplant_plan(src: Vocab, dst: Vocab) -> TransplantPlan:
    src_ids = src.token_to_id
    shared, fresh = [], []
    for dst_id, tok in enumerate(dst.tokens):
        src_id = src_ids.get(tok)
        if src_id is not None:
            shared.append((src_id, dst_id))
        else:
            fresh.append((dst_id, encode_bytes(src, tok)))
    return TransplantPlan(shared=shared, fresh=fresh, overlap=len(shared) / dst.size, dst_size=dst.size)


def transplant_embeddings(
    plan: TransplantPlan,
    src_emb: torch.Tensor,
    src_size: Optional[int] = None,
    seed: int = 0,
) -> torch.Tensor:
    """Build the embedding table for the destination vocabulary.

    Shared rows are copied verbatim. A fresh token gets the mean of the source
    rows its bytes tokenize into; a fresh token with an empty recipe is drawn
    from N(0, s^2) where s is the mean source row norm over sqrt(d).
    """
    if src_emb.ndim != 2:
        raise ValueError("src_emb must be a matrix")
    if src_size is not None and src_emb.shape[0] != src_size:
        raise ValueError(f"src_emb has {src_emb.shape[0]} rows, source vocab has {src_size}")
    n_rows = src_emb.shape[0]
    for s, _ in plan.shared:
        if not 0 <= s < n_rows:
            raise ValueError(f"shared source id {s} outside embedding of {n_rows} rows")
    for _, recipe in plan.fresh:
        if any(not 0 <= i < n_rows for i in recipe):
            raise ValueError("fresh recipe references a row outside the embedding")

    dst_size = plan.dst_size or len(plan.shared) + len(plan.fresh)
    d = src_emb.shape[1]
    out = torch.empty(dst_size, d, dtype=src_emb.dtype)
    gen = torch.Generator().manual_seed(seed)
    sigma = float(src_emb.double().norm(dim=1).mean()) / d**0.5
    for s, t in plan.shared:
        out[t] = src_emb[s]
    for t, recipe in plan.fresh:
        if recipe:
            out[t] = src_emb[list(recipe)].sum(dim=0) / len(recipe)
        else:
            out[t] = torch.randn(d, generator=gen, dtype=torch.float64).to(src_emb.dtype) * sigma
    return out


def iter_corpus_dir(path) -> Iterable[str]:
    """Yield documents from a directory of .txt (one doc per file) or .jsonl files."""
    root = Path(path)
    files = sorted(root.rglob("*")) if root.is_dir() else [root]
    for f in files:
        if f.suffix == ".jsonl":
            with f.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        yield json.loads(line)["text"]
        elif f.suffix == ".txt":
            yield f.read_text(encoding="utf-8")


def stream_ids(vocab: Vocab, texts: Sequence[str]) -> list[list[int]]:
    return [encode(vocab, t) for t in texts]
