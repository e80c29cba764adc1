"""Inference throughput of sliced sub-networks and speedup tables."""

from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .encoder import FULL, EncoderConfig, Granularity, forward, slice_params

# Reference samples/s at 8,192 tokens for the 308M multilingual model (H100).
REFERENCE_SAMPLES_PER_S = {0.25: 34.2, 0.5: 23.4, 0.75: 17.7, 1.0: 14.2}


@dataclass
class BenchRow:
    f_head: float
    f_mlp: float
    seq_len: int
    batch: int
    samples_per_s: float
    wall_ms_p50: float
    wall_ms_p90: float


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    environment: str = ""
    repeats: int = 0

    def to_json(self) -> dict:
        return {"environment": self.environment, "repeats": self.repeats, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_json(cls, d: dict) -> "BenchReport":
        return cls([BenchRow(**r) for r in d["rows"]], d.get("environment", ""), d.get("repeats", 0))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def environment() -> str:
    return f"{platform.platform()} | python {platform.python_version()} | torch {torch.__version__} | threads {torch.get_num_threads()}"


def _percentile(xs: Sequence[float], q: float) -> float:
    return float(np.percentile(np.asarray(xs), q))


def throughput(
    config: EncoderConfig,
    params: dict[str, torch.Tensor],
    g: Granularity = FULL,
    seq_len: int = 8192,
    batch: int = 1,
    repeats: int = 5,
    warmup_iters: int = 2,
    seed: int = 0,
    sliced: bool = False,
) -> BenchRow:
    """Time forward passes of the sub-network at ``g`` on random single-segment rows.

    Pass ``sliced=True`` when ``params``/``config`` already describe a standalone
    sliced model; the reported fractions are then taken from ``g`` as given.
    """
    if repeats < 5:
        raise ValueError("need at least 5 timed repeats")
    if sliced:
        sub_p, sub_c = params, config
    else:
        sub_p, sub_c = slice_params(params, config, g)
    gen = torch.Generator().manual_seed(seed)
    ids = torch.randint(0, config.vocab_size, (batch, seq_len), generator=gen)
    seg = torch.zeros(batch, seq_len, dtype=torch.int64)
    pos = torch.arange(seq_len).expand(batch, seq_len)
    times = []
    with torch.inference_mode():
        for i in range(warmup_iters + repeats):
            t0 = time.perf_counter()
            forward(sub_c, sub_p, ids, seg, pos)
            dt = time.perf_counter() - t0
            if i >= warmup_iters:
                times.append(dt)
    p50 = statistics.median(times)
    return BenchRow(
        f_head=g.f_head,
        f_mlp=g.f_mlp,
        seq_len=seq_len,
        batch=batch,
        samples_per_s=batch / p50,
        wall_ms_p50=p50 * 1e3,
        wall_ms_p90=_percentile(times, 90) * 1e3,
    )


def run_grid(config, params, grid: Sequence[Granularity], seq_len: int, batch: int, repeats: int, warmup_iters: int = 2) -> BenchReport:
    rows = [throughput(config, params, g, seq_len, batch, repeats, warmup_iters) for g in grid]
    return BenchReport(rows, environment(), repeats)


def speedup_report(report: BenchReport) -> list[dict]:
    """Ratio of each row's samples/s to the full-granularity row at the same shape."""
    base = {(r.seq_len, r.batch): r for r in report.rows if r.f_head == 1.0 and r.f_mlp == 1.0}
    out = []
    for r in report.rows:
        ref = base.get((r.seq_len, r.batch))
        if ref is None:
            raise ValueError(f"no full-granularity baseline for seq_len={r.seq_len}, batch={r.batch}")
        reference = None
        if r.f_mlp == 1.0 and r.f_head in REFERENCE_SAMPLES_PER_S:
            reference = REFERENCE_SAMPLES_PER_S[r.f_head] / REFERENCE_SAMPLES_PER_S[1.0]
        out.append({**asdict(r), "speedup": r.samples_per_s / ref.samples_per_s, "reference_speedup": reference})
    return out


def format_table(table: list[dict]) -> str:
    header = ("f_head", "f_mlp", "seq_len", "batch", "samples/s", "p50 ms", "p90 ms", "speedup", "ref")
    lines = [header]
    for t in table:
        ref = "-" if t["reference_speedup"] is None else f"{t['reference_speedup']:.2f}x"
        lines.append(
            (
                f"{t['f_head']:.2f}",
                f"{t['f_mlp']:.2f}",
                str(t["seq_len"]),
                str(t["batch"]),
                f"{t['samples_per_s']:.3f}",
                f"{t['wall_ms_p50']:.1f}",
                f"{t['wall_ms_p90']:.1f}",
                f"{t['speedup']:.2f}x",
                ref,
            )
        )
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines)


def write_csv(path, table: list[dict]) -> None:
    keys = ["f_head", "f_mlp", "seq_len", "batch", "samples_per_s", "wall_ms_p50", "wall_ms_p90", "speedup", "reference_speedup"]
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for t in table:
            fh.write(",".join("" if t[k] is None else str(t[k]) for k in keys) + "\n")


def sliced_granularity(meta: dict) -> Optional[Granularity]:
    g = meta.get("granularity")
    return Granularity(*g) if g else None
