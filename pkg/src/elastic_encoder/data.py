"""Document curation, sequence packing, MLM masking and the packed-row file format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np

from .tokenizer import SPECIAL_TOKENS, Vocab

# Classes emitted by the multilingual domain classifier whose probabilities we consume.
DOMAIN_CLASSES = (
    "Adult",
    "Arts_and_Entertainment",
    "Autos_and_Vehicles",
    "Beauty_and_Fitness",
    "Books_and_Literature",
    "Business_and_Industrial",
    "Computers_and_Electronics",
    "Finance",
    "Food_and_Drink",
    "Games",
    "Health",
    "Hobbies_and_Leisure",
    "Home_and_Garden",
    "Internet_and_Telecom",
    "Jobs_and_Education",
    "Law_and_Government",
    "News",
    "Online_Communities",
    "People_and_Society",
    "Pets_and_Animals",
    "Real_Estate",
    "Science",
    "Sensitive_Subjects",
    "Shopping",
    "Sports",
    "Travel_and_Transportation",
)

DOMAIN_MAPPING = {"biomed": "Health", "legal": "Law_and_Government"}

QUALITY_THRESHOLD = 0.2
TRANSLATION_SEP = SPECIAL_TOKENS["TRANSLATION"]
IGNORE_INDEX = -1


@dataclass
class Document:
    id: str
    text: str
    lang: str = "und"
    quality: Optional[float] = None
    domain_probs: Optional[dict[str, float]] = None

    def __post_init__(self):
        if self.domain_probs is not None:
            vals = list(self.domain_probs.values())
            if any(v < 0 for v in vals) or abs(sum(vals) - 1.0) > 1e-6:
                raise ValueError(f"document {self.id}: domain_probs must be non-negative and sum to 1")

    @classmethod
    def from_json(cls, obj: Mapping) -> "Document":
        return cls(
            id=str(obj["id"]),
            text=obj["text"],
            lang=obj.get("lang", "und"),
            quality=obj.get("quality"),
            domain_probs=obj.get("domain_probs"),
        )

    def to_json(self) -> dict:
        out = {"id": self.id, "text": self.text, "lang": self.lang}
        if self.quality is not None:
            out["quality"] = self.quality
        if self.domain_probs is not None:
            out["domain_probs"] = self.domain_probs
        return out


def read_documents(path) -> Iterator[Document]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield Document.from_json(json.loads(line))


def write_documents(path, docs: Iterable[Document]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


def dedup_key(text: str) -> bytes:
    return hashlib.sha256(" ".join(text.split()).encode("utf-8")).digest()


def dedup_exact(docs: Iterable[Document]) -> Iterator[Document]:
    """Keep the first document of every whitespace-normalized text."""
    seen: set[bytes] = set()
    for doc in docs:
        key = dedup_key(doc.text)
        if key not in seen:
            seen.add(key)
            yield doc


def quality_filter(docs: Iterable[Document], threshold: float = QUALITY_THRESHOLD) -> Iterator[Document]:
    for doc in docs:
        if doc.quality is None or doc.quality >= threshold:
            yield doc


def domain_select(probs: Mapping[str, float], mapping: Mapping[str, str] = DOMAIN_MAPPING) -> Optional[str]:
    """Top-1 domain assignment; ties at the maximum assign nothing."""
    if not probs:
        raise ValueError("empty probability map")
    top = max(probs.values())
    winners = [c for c, p in probs.items() if p == top]
    if len(winners) != 1:
        return None
    for domain, cls in mapping.items():
        if cls == winners[0]:
            return domain
    return None


def curate(
    docs: Iterable[Document],
    threshold: float = QUALITY_THRESHOLD,
    domain: Optional[str] = None,
    mapping: Mapping[str, str] = DOMAIN_MAPPING,
) -> Iterator[Document]:
    """Dedup, quality filter and (optionally) keep only docs assigned to ``domain``.

    Documents without classifier output are dropped when a domain is requested.
    """
    stream = quality_filter(dedup_exact(docs), threshold)
    if domain is None or domain == "none":
        yield from stream
        return
    if domain not in mapping:
        raise ValueError(f"unknown domain {domain!r}")
    for doc in stream:
        if doc.domain_probs and domain_select(doc.domain_probs, mapping) == domain:
            yield doc


def format_translation_pair(src: str, tgt: str) -> str:
    if not src or not tgt:
        raise ValueError("both sides of a translation pair must be non-empty")
    return src + TRANSLATION_SEP + tgt


@dataclass
class PackedRow:
    ids: np.ndarray
    boundaries: list[int]
    mlm_labels: np.ndarray = None
    mask_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.mlm_labels is None:
            self.mlm_labels = np.full(len(self.ids), IGNORE_INDEX, dtype=np.int64)
        self.mask_positions = np.asarray(self.mask_positions, dtype=np.int64)
        self.boundaries = [int(b) for b in self.boundaries]

    @property
    def seq_len(self) -> int:
        return len(self.ids)

    def n_tokens(self) -> int:
        """Non-PAD positions, the unit of token accounting."""
        return self.boundaries[-1] if self.boundaries else 0

    def __eq__(self, other):
        return (
            isinstance(other, PackedRow)
            and np.array_equal(self.ids, other.ids)
            and self.boundaries == other.boundaries
            and np.array_equal(self.mlm_labels, other.mlm_labels)
            and np.array_equal(self.mask_positions, other.mask_positions)
        )


def pack_documents(token_streams: Iterable[Sequence[int]], seq_len: int, vocab: Vocab) -> list[PackedRow]:
    """First-fit pack documents as ``BOS doc EOS`` segments into rows of ``seq_len``.

    Documents longer than ``seq_len - 2`` are cut into chunks that are packed as
    separate documents. Rows are returned in the order they were opened.
    """
    if seq_len < 8:
        raise ValueError("seq_len must be at least 8")
    bos, eos, pad = vocab.id_of("BOS"), vocab.id_of("EOS"), vocab.id_of("PAD")
    room = seq_len - 2
    rows: list[list[int]] = []
    bounds: list[list[int]] = []
    open_rows: list[int] = []

    for stream in token_streams:
        stream = list(stream)
        if not stream:
            raise ValueError("empty token stream")
        for start in range(0, len(stream), room):
            chunk = stream[start : start + room]
            need = len(chunk) + 2
            for k, r in enumerate(open_rows):
                if seq_len - len(rows[r]) >= need:
                    break
            else:
                r = len(rows)
                rows.append([])
                bounds.append([])
                open_rows.append(r)
                k = len(open_rows) - 1
            rows[r].extend([bos, *chunk, eos])
            bounds[r].append(len(rows[r]))
            if seq_len - len(rows[r]) < 3:
                del open_rows[k]

    return [
        PackedRow(ids=np.array(row + [pad] * (seq_len - len(row)), dtype=np.int64), boundaries=b)
        for row, b in zip(rows, bounds)
    ]


def segment_ids(row: PackedRow) -> np.ndarray:
    """Segment index per position, -1 on padding."""
    seg = np.full(row.seq_len, -1, dtype=np.int64)
    start = 0
    for i, end in enumerate(row.boundaries):
        seg[start:end] = i
        start = end
    return seg


def positions(row: PackedRow) -> np.ndarray:
    """Offset of each position from the start of its segment (0 on padding)."""
    pos = np.zeros(row.seq_len, dtype=np.int64)
    start = 0
    for end in row.boundaries:
        pos[start:end] = np.arange(end - start)
        start = end
    return pos


def boundary_mask(row: PackedRow) -> np.ndarray:
    """Boolean [L, L] matrix: True where i and j share a segment and neither is PAD."""
    seg = segment_ids(row)
    return (seg[:, None] == seg[None, :]) & (seg[:, None] >= 0)


def restore_row(row: PackedRow) -> PackedRow:
    """Undo MLM corruption, returning the clean row."""
    ids = row.ids.copy()
    ids[row.mask_positions] = row.mlm_labels[row.mask_positions]
    return PackedRow(ids=ids, boundaries=list(row.boundaries))


def apply_mlm(row: PackedRow, p: float, seed, vocab: Vocab) -> PackedRow:
    """Select non-special positions with probability ``p`` and corrupt them 80/10/10."""
    if not 0 < p < 1:
        raise ValueError("masking probability must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    ids = row.ids.copy()
    special = np.array(sorted(vocab.special_ids), dtype=np.int64)
    eligible = ~np.isin(ids, special)
    selected = eligible & (rng.random(len(ids)) < p)
    pos = np.flatnonzero(selected)

    labels = np.full(len(ids), IGNORE_INDEX, dtype=np.int64)
    labels[pos] = ids[pos]

    action = rng.random(len(pos))
    to_mask = pos[action < 0.8]
    to_rand = pos[(action >= 0.8) & (action < 0.9)]
    ids[to_mask] = vocab.id_of("MASK")
    normal = np.setdiff1d(np.arange(vocab.size), special)
    ids[to_rand] = normal[rng.integers(0, len(normal), size=len(to_rand))]
    return PackedRow(ids=ids, boundaries=list(row.boundaries), mlm_labels=labels, mask_positions=pos)


# --- packed file format -------------------------------------------------------

PACK_MAGIC = b"PACK"
PACK_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


def write_packed(path, rows: Sequence[PackedRow], vocab_size: int) -> None:
    seq_len = rows[0].seq_len if rows else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PACK_MAGIC, PACK_VERSION, seq_len, vocab_size, len(rows)))
        for row in rows:
            if row.seq_len != seq_len:
                raise ValueError("all rows must share one sequence length")
            fh.write(row.ids.astype("<u4").tobytes())
            fh.write(struct.pack("<I", len(row.boundaries)))
            fh.write(np.asarray(row.boundaries, dtype="<u4").tobytes())
            fh.write(struct.pack("<I", len(row.mask_positions)))
            fh.write(row.mask_positions.astype("<u4").tobytes())
            fh.write(row.mlm_labels[row.mask_positions].astype("<i4").tobytes())


def read_packed(path) -> tuple[list[PackedRow], int, int]:
    """Return (rows, seq_len, vocab_size)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("packed file truncated")
    magic, version, seq_len, vocab_size, count = _HEADER.unpack_from(data, 0)
    if magic != PACK_MAGIC:
        raise ValueError("not a packed-row file")
    if version != PACK_VERSION:
        raise ValueError(f"unsupported packed-row version {version}")
    off = _HEADER.size

    def take(n, dtype):
        nonlocal off
        nbytes = n * np.dtype(dtype).itemsize
        if off + nbytes > len(data):
            raise ValueError("packed file truncated")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
        off += nbytes
        return arr

    rows = []
    for _ in range(count):
        ids = take(seq_len, "<u4").astype(np.int64)
        nb = int(take(1, "<u4")[0])
        bounds = take(nb, "<u4").astype(np.int64).tolist()
        nm = int(take(1, "<u4")[0])
        mpos = take(nm, "<u4").astype(np.int64)
        lab = take(nm, "<i4").astype(np.int64)
        labels = np.full(seq_len, IGNORE_INDEX, dtype=np.int64)
        labels[mpos] = lab
        rows.append(PackedRow(ids=ids, boundaries=bounds, mlm_labels=labels, mask_positions=mpos))
    if off != len(data):
        raise ValueError("trailing bytes after packed rows")
    return rows, seq_len, vocab_size


def mask_rows(rows: Iterable[PackedRow], p: float, seed: int, vocab: Vocab) -> list[PackedRow]:
    return [apply_mlm(r, p, (seed, i), vocab) for i, r in enumerate(rows)]
