"""Learning-rate schedules, StableAdamW, the granularity curriculum and the train loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import torch

from . import checkpoint
from .data import PackedRow, apply_mlm, restore_row
from .encoder import FULL, EncoderConfig, Granularity, check_params, collate, mlm_loss_and_grad
from .tokenizer import Vocab

log = logging.getLogger(__name__)

WSD = "wsd"
WARMUP_COSINE = "warmup-cosine"


@dataclass(frozen=True)
class ScheduleSpec:
    shape: str = WSD
    peak_lr: float = 1e-3
    warmup_tokens: int = 0
    stable_tokens: int = 0
    decay_tokens: int = 0
    min_lr: float = 0.0

    def validate(self) -> "ScheduleSpec":
        if self.shape not in (WSD, WARMUP_COSINE):
            raise ValueError(f"unknown schedule shape {self.shape!r}")
        if min(self.warmup_tokens, self.stable_tokens, self.decay_tokens) < 0:
            raise ValueError("token counts must be non-negative")
        if not self.peak_lr > self.min_lr >= 0:
            raise ValueError("need peak_lr > min_lr >= 0")
        if self.shape == WARMUP_COSINE and self.stable_tokens:
            raise ValueError("warmup-cosine has no stable phase")
        return self

    @property
    def decay_start(self) -> int:
        return self.warmup_tokens + self.stable_tokens

    @property
    def total_tokens(self) -> int:
        return self.decay_start + self.decay_tokens

    def scaled(self, total_tokens: int) -> "ScheduleSpec":
        """Same phase proportions compressed (or stretched) to ``total_tokens``."""
        k = total_tokens / self.total_tokens
        warm = round(self.warmup_tokens * k)
        stable = round(self.stable_tokens * k)
        return replace(self, warmup_tokens=warm, stable_tokens=stable, decay_tokens=total_tokens - warm - stable)


def lr_at(spec: ScheduleSpec, tokens_seen: float) -> float:
    if tokens_seen < spec.warmup_tokens:
        return spec.peak_lr * tokens_seen / spec.warmup_tokens
    t = tokens_seen - spec.warmup_tokens
    if spec.shape == WSD:
        if t < spec.stable_tokens:
            return spec.peak_lr
        t -= spec.stable_tokens
    if t >= spec.decay_tokens:
        return spec.min_lr
    u = t / spec.decay_tokens
    span = spec.peak_lr - spec.min_lr
    if spec.shape == WSD:
        return spec.min_lr + span * (1.0 - math.sqrt(u))
    return spec.min_lr + span * (1.0 + math.cos(math.pi * u)) / 2.0


# --- StableAdamW -----------------------------------------------------------------


@dataclass
class OptState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 1e-5
    clip: float = 1.0

    def hparams(self) -> dict:
        return {k: getattr(self, k) for k in ("beta1", "beta2", "eps", "weight_decay", "clip")}


def init_opt_state(params: dict[str, torch.Tensor], **hparams) -> OptState:
    return OptState(
        m={k: torch.zeros_like(p) for k, p in params.items()},
        v={k: torch.zeros_like(p) for k, p in params.items()},
        **hparams,
    )


def stable_adamw_step(params, grads, state: OptState, lr: float):
    """One StableAdamW update; returns new (params, state) without touching the inputs.

    The bias-corrected Adam direction of each tensor is scaled down so its RMS does
    not exceed ``state.clip``; weight decay is decoupled and applied first.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1 - b1**t, 1 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        u = (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
        rms = float(torch.sqrt(torch.mean(u * u)))
        u = u / max(1.0, rms / state.clip)
        p = p * (1 - lr * state.weight_decay)
        new_p[name] = p - lr * u
        new_m[name], new_v[name] = m, v
    return new_p, replace(state, m=new_m, v=new_v, t=t)


# --- curriculum --------------------------------------------------------------------


@dataclass(frozen=True)
class CurriculumSpec:
    grid: tuple[Granularity, ...] = (FULL,)
    enable_from_token: float = math.inf
    policy: str = "round-robin"

    def validate(self) -> "CurriculumSpec":
        if not self.grid:
            raise ValueError("curriculum grid must be non-empty")
        if self.policy != "round-robin":
            raise ValueError(f"unknown curriculum policy {self.policy!r}")
        return self

    def to_json(self) -> dict:
        return {
            "grid": [[g.f_head, g.f_mlp] for g in self.grid],
            "enable_from_token": None if math.isinf(self.enable_from_token) else self.enable_from_token,
            "policy": self.policy,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CurriculumSpec":
        enable = d.get("enable_from_token")
        return cls(
            grid=tuple(Granularity(*g) for g in d.get("grid", [[1.0, 1.0]])),
            enable_from_token=math.inf if enable is None else enable,
            policy=d.get("policy", "round-robin"),
        ).validate()


def next_granularity(cur: CurriculumSpec, step: int, tokens_seen: float) -> Granularity:
    if tokens_seen < cur.enable_from_token:
        return FULL
    return cur.grid[step % len(cur.grid)]


# --- checkpoints ---------------------------------------------------------------------


@dataclass
class TrainState:
    config: EncoderConfig
    params: dict[str, torch.Tensor]
    opt: Optional[OptState] = None
    tokens_seen: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, state: TrainState) -> None:
    tensors = {f"param.{k}": v for k, v in state.params.items()}
    meta = {"tokens_seen": state.tokens_seen, "step": state.step, **state.extra}
    if state.opt is not None:
        tensors.update({f"opt.m.{k}": v for k, v in state.opt.m.items()})
        tensors.update({f"opt.v.{k}": v for k, v in state.opt.v.items()})
        meta["opt"] = {"t": state.opt.t, **state.opt.hparams()}
    checkpoint.save_tensors(path, tensors, state.config.to_dict(), meta)


def load_checkpoint(path) -> TrainState:
    tensors, config, meta = checkpoint.load_tensors(path)
    config = EncoderConfig.from_dict(config)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
    check_params(config, params)
    opt = None
    if "opt" in meta:
        hp = dict(meta["opt"])
        t = hp.pop("t")
        opt = OptState(
            m={k[6:]: v for k, v in tensors.items() if k.startswith("opt.m.")},
            v={k[6:]: v for k, v in tensors.items() if k.startswith("opt.v.")},
            t=t,
            **hp,
        )
        if set(opt.m) != set(params) or set(opt.v) != set(params):
            raise checkpoint.CheckpointError("optimizer moments do not match parameters")
    extra = {k: v for k, v in meta.items() if k not in ("tokens_seen", "step", "opt")}
    return TrainState(config, params, opt, int(meta.get("tokens_seen", 0)), int(meta.get("step", 0)), extra)


# --- driver ----------------------------------------------------------------------------


@dataclass
class MlmPolicy:
    """Re-masks clean rows on the fly with a rate that can change at ``switch_token``."""

    vocab: Vocab
    rate: float
    rate_after: Optional[float] = None
    switch_token: float = math.inf

    def rate_at(self, tokens_seen: float) -> float:
        if self.rate_after is not None and tokens_seen >= self.switch_token:
            return self.rate_after
        return self.rate

    def __call__(self, rows: Sequence[PackedRow], tokens_seen: float, seed) -> list[PackedRow]:
        p = self.rate_at(tokens_seen)
        return [apply_mlm(restore_row(r), p, (*seed, i), self.vocab) for i, r in enumerate(rows)]


def iter_batches(rows: Sequence[PackedRow], batch_size: int, epochs: int = 1, seed: Optional[int] = None):
    """Yield row batches; shuffles row order per epoch when ``seed`` is given."""
    for epoch in range(epochs):
        order = list(range(len(rows)))
        if seed is not None:
            gen = torch.Generator().manual_seed(seed + epoch)
            order = torch.randperm(len(rows), generator=gen).tolist()
        for i in range(0, len(order), batch_size):
            yield [rows[j] for j in order[i : i + batch_size]]


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]


def train_run(
    config: EncoderConfig,
    params: dict[str, torch.Tensor],
    data: Iterable[Sequence[PackedRow]],
    schedule: ScheduleSpec,
    curriculum: CurriculumSpec = CurriculumSpec(),
    opt: Optional[OptState] = None,
    seed: int = 42,
    tokens_seen: int = 0,
    step: int = 0,
    mlm: Optional[MlmPolicy] = None,
    max_tokens: Optional[int] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Optimize ``params`` over ``data`` (an iterable of row batches).

    Each step picks a granularity from the curriculum, takes the masked-LM gradient
    of that sub-network and applies StableAdamW at ``lr_at(tokens_seen)``. Token
    accounting counts non-PAD positions. Deterministic for a fixed seed.
    """
    schedule.validate()
    curriculum.validate()
    torch.manual_seed(seed)
    opt = opt if opt is not None else init_opt_state(params)
    records = []
    seen_any = False
    for rows in data:
        seen_any = True
        if max_tokens is not None and tokens_seen >= max_tokens:
            break
        if mlm is not None:
            rows = mlm(rows, tokens_seen, (seed, step))
        batch = collate(rows)
        if batch.n_masked == 0:
            continue
        g = next_granularity(curriculum, step, tokens_seen)
        lr = lr_at(schedule, tokens_seen)
        loss, grads = mlm_loss_and_grad(config, params, batch, g)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        params, opt = stable_adamw_step(params, grads, opt, lr)
        n_tok = sum(r.n_tokens() for r in rows)
        rec = {"step": step, "tokens": tokens_seen, "lr": lr, "f_head": g.f_head, "f_mlp": g.f_mlp, "loss": loss}
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        tokens_seen += n_tok
        step += 1
    if not seen_any:
        raise ValueError("no training data")
    return TrainResult(TrainState(config, params, opt, tokens_seen, step), records)


def write_metrics(path, records: Iterable[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def schedule_to_json(spec: ScheduleSpec) -> dict:
    return asdict(spec)
