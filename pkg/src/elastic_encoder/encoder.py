"""Elastic bidirectional encoder with nested head and MLP-width slicing.

Weights follow the ``x @ W`` convention: ``wq/wk/wv`` are ``[d_model, heads*head_dim]``
so head ``h`` owns columns ``h*head_dim:(h+1)*head_dim``; ``wo`` is
``[heads*head_dim, d_model]`` and head ``h`` owns the matching rows. ``w_gate`` and
``w_up`` are ``[d_model, d_ff]``, ``w_down`` is ``[d_ff, d_model]``. A granularity
keeps the leading heads and the leading MLP units.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import IGNORE_INDEX, PackedRow, positions, segment_ids

FRACTIONS = (0.25, 0.5, 0.75, 1.0)

# Upper bound on attention-score elements materialized per query block.
_SCORE_BUDGET = 1 << 24


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 8
    head_dim: int = 8
    d_ff: int = 128
    vocab_size: int = 1024
    max_len: int = 1024
    local_window: int = 128
    global_period: int = 3
    rope_theta_local: float = 10_000.0
    rope_theta_global: float = 10_000.0
    norm_eps: float = 1e-5

    @property
    def attn_dim(self) -> int:
        return self.n_heads * self.head_dim

    def is_global(self, layer: int) -> bool:
        return layer % self.global_period == 0

    def validate(self, elastic: bool = True) -> "EncoderConfig":
        """Check invariants. ``elastic`` additionally requires the full-width model shape
        (heads and d_ff divisible by 4, heads*head_dim == d_model)."""
        for name in ("n_layers", "d_model", "n_heads", "head_dim", "d_ff", "vocab_size", "max_len", "global_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.local_window > self.max_len:
            raise ValueError("local_window must not exceed max_len")
        if elastic:
            if self.n_heads % 4 or self.d_ff % 4:
                raise ValueError("n_heads and d_ff must be divisible by 4")
            if self.attn_dim != self.d_model:
                raise ValueError("n_heads * head_dim must equal d_model")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class Granularity:
    f_head: float = 1.0
    f_mlp: float = 1.0

    def __post_init__(self):
        for f in (self.f_head, self.f_mlp):
            if f not in FRACTIONS:
                raise ValueError(f"granularity fraction {f} not in {FRACTIONS}")

    @property
    def is_full(self) -> bool:
        return self.f_head == 1.0 and self.f_mlp == 1.0

    def kept_heads(self, config: EncoderConfig) -> int:
        return _kept(self.f_head, config.n_heads, "heads")

    def kept_ff(self, config: EncoderConfig) -> int:
        return _kept(self.f_mlp, config.d_ff, "d_ff")


FULL = Granularity(1.0, 1.0)


def _kept(f: float, n: int, what: str) -> int:
    k = f * n
    if k != int(k) or k < 1:
        raise ValueError(f"fraction {f} of {n} {what} is not a positive integer")
    return int(k)


def granularity_grid(axis: str) -> list[Granularity]:
    if axis == "heads":
        return [Granularity(f, 1.0) for f in FRACTIONS]
    if axis == "mlp":
        return [Granularity(1.0, f) for f in FRACTIONS]
    if axis == "both":
        return [Granularity(a, b) for a in FRACTIONS for b in FRACTIONS]
    raise ValueError(f"unknown granularity axis {axis!r}")


# --- parameters ----------------------------------------------------------------

LAYER_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, a, f = config.d_model, config.attn_dim, config.d_ff
    shapes = {"tok_emb": (config.vocab_size, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "attn_norm": (d,),
                p + "wq": (d, a),
                p + "wk": (d, a),
                p + "wv": (d, a),
                p + "wo": (a, d),
                p + "ffn_norm": (d,),
                p + "w_gate": (d, f),
                p + "w_up": (d, f),
                p + "w_down": (f, d),
            }
        )
    shapes["final_norm"] = (d,)
    return shapes


def init_params(config: EncoderConfig, seed: int = 0, std: float = 0.02, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Truncated-normal (+-3 std) weights, unit norm scales, tied output head."""
    gen = torch.Generator().manual_seed(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            params[name] = torch.ones(shape, dtype=dtype)
        else:
            t = torch.empty(shape, dtype=torch.float64)
            torch.nn.init.trunc_normal_(t, std=std, a=-3 * std, b=3 * std, generator=gen)
            params[name] = t.to(dtype)
    return params


def check_params(config: EncoderConfig, params: dict[str, torch.Tensor]) -> None:
    expected = param_shapes(config)
    if set(expected) != set(params):
        raise ValueError(f"parameter names differ: {sorted(set(expected) ^ set(params))}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: shape {tuple(params[name].shape)} != {shape}")
        if not torch.isfinite(params[name]).all():
            raise ValueError(f"{name}: non-finite values")


def count_params(params: dict[str, torch.Tensor]) -> int:
    return sum(t.numel() for t in params.values())


def slice_indices(config: EncoderConfig, g: Granularity) -> dict[str, tuple[slice, ...]]:
    """Index tuple into each full parameter selecting the weights used at ``g``."""
    a = g.kept_heads(config) * config.head_dim
    f = g.kept_ff(config)
    full = slice(None)
    idx = {}
    for name in param_shapes(config):
        key = name.rsplit(".", 1)[-1]
        if key in ("wq", "wk", "wv"):
            idx[name] = (full, slice(0, a))
        elif key == "wo":
            idx[name] = (slice(0, a), full)
        elif key in ("w_gate", "w_up"):
            idx[name] = (full, slice(0, f))
        elif key == "w_down":
            idx[name] = (slice(0, f), full)
        else:
            idx[name] = (full,) * (2 if name == "tok_emb" else 1)
    return idx


def _sliced_view(params, config, g):
    if g.is_full:
        return params, config
    idx = slice_indices(config, g)
    view = {name: t[idx[name]] for name, t in params.items()}
    return view, replace(config, n_heads=g.kept_heads(config), d_ff=g.kept_ff(config))


def slice_params(params: dict[str, torch.Tensor], config: EncoderConfig, g: Granularity):
    """Materialize the sub-network at ``g`` as a standalone (params, config) pair."""
    view, cfg = _sliced_view(params, config, g)
    return {name: t.clone().contiguous() for name, t in view.items()}, cfg


# --- building blocks -------------------------------------------------------------


def rms_norm(x: torch.Tensor, scale: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * scale


def rope_apply(x: torch.Tensor, pos: torch.Tensor, theta: float) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` [..., L, heads, head_dim] by position.

    ``pos`` has shape [..., L]. Pair ``i`` turns at frequency ``theta**(-2i/head_dim)``.
    """
    hd = x.shape[-1]
    if hd % 2:
        raise ValueError("head_dim must be even")
    inv_freq = theta ** (-torch.arange(0, hd, 2, dtype=torch.float64) / hd)
    angles = pos.to(torch.float64)[..., None] * inv_freq
    cos = torch.cos(angles).to(x.dtype)[..., None, :]
    sin = torch.sin(angles).to(x.dtype)[..., None, :]
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def _attend(q, k, v, seg, local: bool, window: int):
    """Masked softmax attention over query blocks. q/k/v: [B, H, L, hd], seg: [B, L]."""
    B, H, L, hd = q.shape
    block = max(1, min(L, _SCORE_BUDGET // max(1, B * H * L)))
    idx = torch.arange(L)
    outs = []
    for start in range(0, L, block):
        stop = min(start + block, L)
        if local:
            ks, ke = max(0, start - window), min(L, stop + window)
        else:
            ks, ke = 0, L
        scores = q[:, :, start:stop] @ k[:, :, ks:ke].transpose(-1, -2)
        sq, sk = seg[:, start:stop, None], seg[:, None, ks:ke]
        qi, kj = idx[start:stop, None], idx[None, ks:ke]
        allowed = ((sq == sk) & (sq >= 0)) | (qi == kj)
        if local:
            allowed = allowed & ((qi - kj).abs() <= window)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        outs.append(torch.softmax(scores, dim=-1) @ v[:, :, ks:ke])
    return outs[0] if len(outs) == 1 else torch.cat(outs, dim=2)


def attention_block(
    x: torch.Tensor,
    lp: dict[str, torch.Tensor],
    config: EncoderConfig,
    seg: torch.Tensor,
    pos: torch.Tensor,
    local: bool,
    g: Granularity = FULL,
) -> torch.Tensor:
    """Pre-norm multi-head attention plus residual on ``x`` [B, L, d_model].

    Padding positions attend only to themselves so every softmax row is defined.
    """
    n_heads = g.kept_heads(config)
    a = n_heads * config.head_dim
    B, L, _ = x.shape
    h = rms_norm(x, lp["attn_norm"], config.norm_eps)
    shape = (B, L, n_heads, config.head_dim)
    q = (h @ lp["wq"][:, :a]).view(shape)
    k = (h @ lp["wk"][:, :a]).view(shape)
    v = (h @ lp["wv"][:, :a]).view(shape)
    theta = config.rope_theta_local if local else config.rope_theta_global
    q = rope_apply(q, pos, theta) * config.head_dim**-0.5
    k = rope_apply(k, pos, theta)
    o = _attend(q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2), seg, local, config.local_window)
    o = o.transpose(1, 2).reshape(B, L, a)
    return x + o @ lp["wo"][:a]


def geglu_ffn(x: torch.Tensor, lp: dict[str, torch.Tensor], config: EncoderConfig, g: Granularity = FULL) -> torch.Tensor:
    f = g.kept_ff(config)
    h = rms_norm(x, lp["ffn_norm"], config.norm_eps)
    gate = F.gelu(h @ lp["w_gate"][:, :f], approximate="tanh")
    return x + (gate * (h @ lp["w_up"][:, :f])) @ lp["w_down"][:f]


def layer_params(params: dict[str, torch.Tensor], i: int) -> dict[str, torch.Tensor]:
    return {k: params[f"layers.{i}.{k}"] for k in LAYER_KEYS}


@dataclass
class ForwardTrace:
    logits: torch.Tensor
    hidden: Optional[list[torch.Tensor]] = None


def forward(
    config: EncoderConfig,
    params: dict[str, torch.Tensor],
    ids: torch.Tensor,
    seg: torch.Tensor,
    pos: torch.Tensor,
    g: Granularity = FULL,
    keep_hidden: bool = False,
) -> ForwardTrace:
    """Run the encoder on a [B, L] batch and return tied-head logits [B, L, V]."""
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= config.vocab_size):
        raise ValueError("token id out of range")
    params, config = _sliced_view(params, config, g)
    x = params["tok_emb"][ids]
    hidden = [x] if keep_hidden else None
    for i in range(config.n_layers):
        lp = layer_params(params, i)
        x = attention_block(x, lp, config, seg, pos, local=not config.is_global(i))
        x = geglu_ffn(x, lp, config)
        if keep_hidden:
            hidden.append(x)
    x = rms_norm(x, params["final_norm"], config.norm_eps)
    return ForwardTrace(logits=x @ params["tok_emb"].T, hidden=hidden)


@dataclass
class Batch:
    ids: torch.Tensor
    seg: torch.Tensor
    pos: torch.Tensor
    labels: torch.Tensor

    @property
    def n_masked(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())


def collate(rows: Sequence[PackedRow]) -> Batch:
    return Batch(
        ids=torch.from_numpy(np.stack([r.ids for r in rows])),
        seg=torch.from_numpy(np.stack([segment_ids(r) for r in rows])),
        pos=torch.from_numpy(np.stack([positions(r) for r in rows])),
        labels=torch.from_numpy(np.stack([r.mlm_labels for r in rows])),
    )


def forward_mlm(config: EncoderConfig, params: dict[str, torch.Tensor], row: PackedRow, g: Granularity = FULL) -> ForwardTrace:
    """Logits [L, V] for one packed row."""
    b = collate([row])
    with torch.no_grad():
        trace = forward(config, params, b.ids, b.seg, b.pos, g)
    return ForwardTrace(logits=trace.logits[0])


def mlm_loss(config, params, batch: Batch, g: Granularity = FULL, reduction: str = "mean") -> torch.Tensor:
    mask = batch.labels != IGNORE_INDEX
    if not bool(mask.any()):
        raise ValueError("no masked positions")
    logits = forward(config, params, batch.ids, batch.seg, batch.pos, g).logits
    return F.cross_entropy(logits[mask], batch.labels[mask], reduction=reduction)


def mlm_loss_and_grad(config, params, rows, g: Granularity = FULL) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean masked-LM cross-entropy over all masked positions and its exact gradient.

    ``rows`` is a PackedRow, a sequence of rows, or a collated Batch. Weights outside
    the slice at ``g`` receive exactly zero gradient.
    """
    if isinstance(rows, PackedRow):
        rows = [rows]
    batch = rows if isinstance(rows, Batch) else collate(rows)
    leaves = {n: t.detach().requires_grad_(True) for n, t in params.items()}
    with torch.enable_grad():
        loss = mlm_loss(config, leaves, batch, g)
        names = list(leaves)
        grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    out = {n: (gr if gr is not None else torch.zeros_like(leaves[n])) for n, gr in zip(names, grads)}
    return float(loss.detach()), out


def accumulate_grads(config, params, micro_batches: Sequence[Sequence[PackedRow]], g: Granularity = FULL):
    """Gradient of the mean loss over the union of micro-batches, accumulated in order."""
    counts = [collate(mb).n_masked for mb in micro_batches]
    total = sum(counts)
    acc = None
    loss_sum = 0.0
    for mb, n in zip(micro_batches, counts):
        loss, grads = mlm_loss_and_grad(config, params, mb, g)
        w = n / total
        loss_sum += loss * w
        if acc is None:
            acc = {k: v * w for k, v in grads.items()}
        else:
            for k, v in grads.items():
                acc[k] += v * w
    return loss_sum, acc


def eval_loss(config, params, rows: Sequence[PackedRow], g: Granularity = FULL, batch_size: int = 16) -> float:
    """Mean masked-LM loss over ``rows`` (token-weighted)."""
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(rows), batch_size):
            b = collate(rows[i : i + batch_size])
            if b.n_masked == 0:
                continue
            total += float(mlm_loss(config, params, b, g, reduction="sum"))
            n += b.n_masked
    if n == 0:
        raise ValueError("no masked positions")
    return total / n


def cast_params(params, dtype) -> dict[str, torch.Tensor]:
    return {k: v.to(dtype) for k, v in params.items()}

