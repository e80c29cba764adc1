"""Stage presets: schedule, curriculum, masking rate and sequence length per training stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

from .encoder import EncoderConfig, granularity_grid
from .training import WARMUP_COSINE, WSD, CurriculumSpec, ScheduleSpec

B = 1_000_000_000
T = 1_000 * B

ROPE_THETA_SHORT = 10_000.0
ROPE_THETA_LONG = 160_000.0

OFF = CurriculumSpec()


@dataclass(frozen=True)
class Preset:
    name: str
    schedule: ScheduleSpec
    curriculum: CurriculumSpec = OFF
    mlm_prob: float = 0.3
    # masking rate once the schedule enters its decay phase; None keeps mlm_prob
    mlm_prob_decay: Optional[float] = None
    seq_len: int = 1024
    rope_theta_global: float = ROPE_THETA_SHORT
    epochs: int = 1
    # matryoshka for adaptation stages starts at the decay phase instead of token 0
    matryoshka_in_decay_only: bool = False
    notes: str = ""

    def validate(self) -> "Preset":
        self.schedule.validate()
        self.curriculum.validate()
        for p in (self.mlm_prob, self.mlm_prob_decay):
            if p is not None and not 0 < p < 1:
                raise ValueError(f"{self.name}: masking rate {p} outside (0, 1)")
        if self.seq_len < 8 or self.epochs < 1:
            raise ValueError(f"{self.name}: bad seq_len/epochs")
        return self

    def mlm_at(self, tokens_seen: float) -> float:
        if self.mlm_prob_decay is not None and tokens_seen >= self.schedule.decay_start:
            return self.mlm_prob_decay
        return self.mlm_prob

    def with_matryoshka(self, axis: str = "heads") -> "Preset":
        start = self.schedule.decay_start if self.matryoshka_in_decay_only else 0
        return replace(self, curriculum=CurriculumSpec(grid=tuple(granularity_grid(axis)), enable_from_token=start))

    def scaled(self, total_tokens: int, seq_len: Optional[int] = None) -> "Preset":
        """Shrink the token budget to ``total_tokens`` keeping phase proportions."""
        k = total_tokens / self.schedule.total_tokens
        enable = self.curriculum.enable_from_token
        enable = enable if math.isinf(enable) else round(enable * k)
        return replace(
            self,
            schedule=self.schedule.scaled(total_tokens),
            curriculum=replace(self.curriculum, enable_from_token=enable),
            seq_len=seq_len or self.seq_len,
        )

    def apply_to(self, config: EncoderConfig) -> EncoderConfig:
        return replace(
            config,
            rope_theta_global=self.rope_theta_global,
            max_len=max(config.max_len, self.seq_len),
        )


PRESETS: dict[str, Preset] = {
    p.name: p
    for p in [
        Preset(
            "pretrain-short",
            ScheduleSpec(WSD, peak_lr=1e-3, warmup_tokens=3 * B, stable_tokens=5_500 * B - 3 * B, decay_tokens=0),
            mlm_prob=0.3,
            seq_len=1024,
            rope_theta_global=ROPE_THETA_SHORT,
            notes="stage 1: short-context warmup+stable",
        ),
        Preset(
            "pretrain-long",
            ScheduleSpec(WSD, peak_lr=1e-3, warmup_tokens=0, stable_tokens=500 * B, decay_tokens=0),
            mlm_prob=0.3,
            seq_len=8192,
            rope_theta_global=ROPE_THETA_LONG,
            notes="stage 2: long-context adaptation at stable lr",
        ),
        Preset(
            "anneal-matryoshka",
            ScheduleSpec(WSD, peak_lr=1e-3, warmup_tokens=0, stable_tokens=0, decay_tokens=100 * B),
            curriculum=CurriculumSpec(grid=tuple(granularity_grid("heads")), enable_from_token=0),
            mlm_prob=0.1,
            seq_len=8192,
            rope_theta_global=ROPE_THETA_LONG,
            notes="stage 3: 1-sqrt decay with round-robin head granularities",
        ),
        Preset(
            "adapt-lang",
            ScheduleSpec(WSD, peak_lr=4e-4, warmup_tokens=3 * B, stable_tokens=615 * B - 103 * B, decay_tokens=100 * B),
            mlm_prob=0.3,
            mlm_prob_decay=0.1,
            seq_len=8192,
            rope_theta_global=ROPE_THETA_LONG,
            matryoshka_in_decay_only=True,
            notes="vocabulary-transplanted language adaptation (WSD)",
        ),
        Preset(
            "adapt-lang-ca",
            ScheduleSpec(WARMUP_COSINE, peak_lr=1e-3, warmup_tokens=4_700_000_000, decay_tokens=42_700_000_000),
            mlm_prob=0.1,
            seq_len=8192,
            rope_theta_global=ROPE_THETA_LONG,
            notes="lower-resource language adaptation (warmup + cosine)",
        ),
        Preset(
            "adapt-domain-legal",
            ScheduleSpec(WARMUP_COSINE, peak_lr=3e-3, warmup_tokens=9 * B, decay_tokens=81 * B),
            mlm_prob=0.3,
            seq_len=8192,
            rope_theta_global=ROPE_THETA_LONG,
            epochs=10,
            notes="legal continued pre-training",
        ),
        Preset(
            "adapt-domain-biomed",
            ScheduleSpec(WARMUP_COSINE, peak_lr=2e-3, warmup_tokens=2_400_000_000, decay_tokens=45_900_000_000),
            mlm_prob=0.1,
            seq_len=8192,
            rope_theta_global=ROPE_THETA_LONG,
            epochs=2,
            notes="biomedical continued pre-training",
        ),
    ]
}

BPE_VOCAB_SIZE = 50_000


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# Small model used by the toy runs and benchmarks.
TOY_CONFIG = EncoderConfig(
    n_layers=2, d_model=64, n_heads=4, head_dim=16, d_ff=128, vocab_size=1024, max_len=1024, local_window=32, global_period=2
)
BENCH_CONFIG = EncoderConfig(
    n_layers=2, d_model=128, n_heads=8, head_dim=16, d_ff=256, vocab_size=1024, max_len=8192, local_window=128, global_period=2
)
