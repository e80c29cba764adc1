import math
import random
from dataclasses import replace

import numpy as np
import pytest
import torch

from helpers import random_row
from elastic_encoder import toy
from elastic_encoder.checkpoint import CheckpointError
from elastic_encoder.data import pack_documents
from elastic_encoder.encoder import FULL, EncoderConfig, Granularity, accumulate_grads, granularity_grid, init_params, mlm_loss_and_grad
from elastic_encoder.presets import PRESETS, get_preset
from elastic_encoder.tokenizer import encode, train_bpe
from elastic_encoder.training import (
    WARMUP_COSINE,
    WSD,
    CurriculumSpec,
    MlmPolicy,
    ScheduleSpec,
    TrainState,
    init_opt_state,
    iter_batches,
    load_checkpoint,
    lr_at,
    next_granularity,
    save_checkpoint,
    stable_adamw_step,
    train_run,
)

WSD_SPEC = ScheduleSpec(WSD, peak_lr=1e-3, warmup_tokens=300, stable_tokens=1000, decay_tokens=400, min_lr=1e-5)
COS_SPEC = ScheduleSpec(WARMUP_COSINE, peak_lr=2e-3, warmup_tokens=200, decay_tokens=900, min_lr=0.0)


def oracle_lr(shape, peak, warm, stable, decay, lo, t):
    """Piecewise closed form written out independently of the implementation."""
    if warm > 0 and t <= warm:
        return peak * t / warm
    if shape == WSD:
        if t <= warm + stable:
            return peak
        u = (t - warm - stable) / decay
        return lo + (peak - lo) * (1 - u**0.5) if u <= 1 else lo
    u = (t - warm) / decay
    return lo + (peak - lo) * 0.5 * (1 + math.cos(math.pi * u)) if u <= 1 else lo


def spec_args(s):
    return (s.shape, s.peak_lr, s.warmup_tokens, s.stable_tokens, s.decay_tokens, s.min_lr)


def test_lr_start_and_quarter_decay():
    assert lr_at(WSD_SPEC, 0) == 0.0
    spec = ScheduleSpec(WSD, peak_lr=1e-3, warmup_tokens=0, stable_tokens=0, decay_tokens=100, min_lr=0.0)
    assert lr_at(spec, 25) == pytest.approx(0.5e-3, rel=1e-12)
    spec = replace(spec, min_lr=2e-4)
    assert lr_at(spec, 25) == pytest.approx(2e-4 + 0.5 * (1e-3 - 2e-4), rel=1e-12)


@pytest.mark.parametrize("spec", [WSD_SPEC, COS_SPEC])
def test_lr_matches_closed_form(spec):
    rng = random.Random(0)
    pts = [rng.uniform(0, spec.total_tokens * 1.2) for _ in range(1000)]
    pts += [0, spec.warmup_tokens, spec.decay_start, spec.total_tokens, spec.total_tokens + 1]
    for t in pts:
        want = oracle_lr(*spec_args(spec), t)
        assert lr_at(spec, t) == pytest.approx(want, rel=1e-12, abs=1e-18)


@pytest.mark.parametrize("spec", [WSD_SPEC, COS_SPEC])
def test_lr_continuity_and_monotone_decay(spec):
    # each boundary: the piece on its left, evaluated at the boundary, equals lr_at there
    left_of_warm_end = spec.peak_lr * spec.warmup_tokens / spec.warmup_tokens
    assert abs(left_of_warm_end - lr_at(spec, spec.warmup_tokens)) < 1e-12 * spec.peak_lr
    assert abs(spec.peak_lr - lr_at(spec, spec.decay_start)) < 1e-12 * spec.peak_lr
    # approaching from either side converges; 1-sqrt decay moves like sqrt(h)
    span = spec.peak_lr - spec.min_lr
    for h in (1e-3, 1e-6, 1e-9):
        for b in (spec.warmup_tokens, spec.decay_start):
            assert abs(lr_at(spec, b - h) - lr_at(spec, b)) <= spec.peak_lr * h / spec.warmup_tokens * 1.001
            assert abs(lr_at(spec, b + h) - lr_at(spec, b)) <= span * math.sqrt(h / spec.decay_tokens) * 1.001
    xs = np.linspace(spec.warmup_tokens, spec.total_tokens + 50, 2000)
    lrs = [lr_at(spec, x) for x in xs]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleSpec(WSD, peak_lr=1e-3, min_lr=1e-3).validate()
    with pytest.raises(ValueError):
        ScheduleSpec(WSD, warmup_tokens=-1).validate()


# --- optimizer ------------------------------------------------------------------------------


def scalar_state(**kw):
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    hp = dict(beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, clip=1.0)
    hp.update(kw)
    return p, init_opt_state(p, **hp)


def test_zero_gradient_leaves_params():
    p, st = scalar_state()
    new, st2 = stable_adamw_step(p, {"w": torch.zeros(1, dtype=torch.float64)}, st, 0.1)
    assert torch.equal(new["w"], p["w"])
    assert float(st2.m["w"]) == 0 and float(st2.v["w"]) == 0


def hand_oracle(lr, clip):
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    u = m_hat / (math.sqrt(v_hat) + 1e-8)
    u = u / max(1.0, abs(u) / clip)
    return 1.0 - lr * u


def test_scalar_step_oracle():
    p, st = scalar_state()
    new, _ = stable_adamw_step(p, {"w": torch.tensor([1.0], dtype=torch.float64)}, st, 0.1)
    assert float(new["w"]) == pytest.approx(hand_oracle(0.1, 1.0), abs=1e-12)
    assert float(new["w"]) == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_scalar_step_clipped():
    p, st = scalar_state(clip=0.5)
    new, _ = stable_adamw_step(p, {"w": torch.tensor([1.0], dtype=torch.float64)}, st, 0.1)
    assert float(new["w"]) == pytest.approx(hand_oracle(0.1, 0.5), abs=1e-12)
    assert float(new["w"]) == pytest.approx(0.95, abs=1e-12)


def plain_adamw(params, grads_seq, lr_seq, b1, b2, eps, wd):
    """Textbook decoupled-weight-decay Adam, element by element in Python floats."""
    p = [float(x) for x in params]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, (g, lr) in enumerate(zip(grads_seq, lr_seq), start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            p[i] = p[i] * (1 - lr * wd) - lr * mh / (math.sqrt(vh) + eps)
    return p


def test_infinite_clip_reduces_to_adamw():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=7)
    grads = [rng.normal(size=7) * 10 for _ in range(5)]
    lrs = [0.01, 0.02, 0.03, 0.02, 0.01]
    params = {"w": torch.tensor(p0)}
    st = init_opt_state(params, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1, clip=math.inf)
    for g, lr in zip(grads, lrs):
        params, st = stable_adamw_step(params, {"w": torch.tensor(g)}, st, lr)
    want = plain_adamw(p0, grads, lrs, 0.9, 0.95, 1e-8, 0.1)
    assert np.abs(params["w"].numpy() - np.array(want)).max() <= 1e-12


def test_rms_clipping_bounds_update():
    params = {"w": torch.zeros(1000, dtype=torch.float64)}
    st = init_opt_state(params, clip=1.0, weight_decay=0.0)
    g = torch.zeros(1000, dtype=torch.float64)
    g[0] = 1.0  # a single large coordinate gives u_rms < 1: no clipping
    new, _ = stable_adamw_step(params, {"w": g}, st, 1.0)
    assert float(new["w"].pow(2).mean().sqrt()) <= 1.0 + 1e-12


def test_nonfinite_gradient_fails_fast():
    p, st = scalar_state()
    with pytest.raises(FloatingPointError):
        stable_adamw_step(p, {"w": torch.tensor([math.nan], dtype=torch.float64)}, st, 0.1)


# --- curriculum -------------------------------------------------------------------------------


def test_curriculum_disabled():
    cur = CurriculumSpec(grid=tuple(granularity_grid("heads")))
    assert all(next_granularity(cur, s, 10**12) == FULL for s in range(10))


def test_curriculum_round_robin():
    grid = tuple(granularity_grid("heads"))
    cur = CurriculumSpec(grid=grid, enable_from_token=0)
    assert [next_granularity(cur, s, 5) for s in range(8)] == list(grid) * 2
    cur = CurriculumSpec(grid=grid, enable_from_token=100)
    assert next_granularity(cur, 1, 99) == FULL
    for start in range(0, 12):
        window = [next_granularity(cur, s, 100) for s in range(start, start + 4)]
        assert sorted(window, key=lambda g: g.f_head) == list(grid)


def test_preset_axes():
    assert all(g.f_mlp == 1.0 for g in get_preset("anneal-matryoshka").curriculum.grid)
    mat = get_preset("anneal-matryoshka").with_matryoshka("mlp")
    assert all(g.f_head == 1.0 for g in mat.curriculum.grid)
    assert {g.f_mlp for g in mat.curriculum.grid} == {0.25, 0.5, 0.75, 1.0}


def test_presets_follow_hyperparameter_table():
    p = get_preset("anneal-matryoshka")
    assert p.seq_len == 8192 and p.mlm_prob == 0.1 and p.rope_theta_global == 160_000
    assert p.schedule.decay_tokens == 100_000_000_000
    short = get_preset("pretrain-short")
    assert short.mlm_prob == 0.3 and short.seq_len == 1024 and short.schedule.warmup_tokens == 3_000_000_000
    assert short.schedule.peak_lr == 1e-3
    es = get_preset("adapt-lang")
    assert (es.mlm_at(0), es.mlm_at(es.schedule.decay_start)) == (0.3, 0.1)
    assert es.schedule.total_tokens == 615_000_000_000
    legal, bio = get_preset("adapt-domain-legal"), get_preset("adapt-domain-biomed")
    assert (legal.epochs, legal.mlm_prob, legal.schedule.peak_lr) == (10, 0.3, 3e-3)
    assert (bio.epochs, bio.mlm_prob, bio.schedule.peak_lr) == (2, 0.1, 2e-3)
    assert legal.schedule.shape == bio.schedule.shape == WARMUP_COSINE
    for preset in PRESETS.values():
        preset.validate()


def test_scaled_preset_keeps_proportions():
    p = get_preset("adapt-lang").with_matryoshka("heads").scaled(1_000_000, seq_len=128)
    assert p.schedule.total_tokens == 1_000_000
    assert p.curriculum.enable_from_token == p.schedule.decay_start
    assert p.seq_len == 128


# --- accumulation --------------------------------------------------------------------------------


def test_gradient_accumulation_equals_big_batch():
    cfg = EncoderConfig(n_layers=2, d_model=32, n_heads=4, head_dim=8, d_ff=64, vocab_size=50, max_len=32, local_window=4, global_period=2)
    params = init_params(cfg, seed=1, std=0.2)
    rng = np.random.default_rng(0)
    rows = [random_row(rng, 16, cfg.vocab_size) for _ in range(6)]
    g = Granularity(0.5, 0.75)
    big_loss, big = mlm_loss_and_grad(cfg, params, rows, g)
    acc_loss, acc = accumulate_grads(cfg, params, [rows[:1], rows[1:4], rows[4:]], g)
    assert acc_loss == pytest.approx(big_loss, abs=1e-6)
    for k in big:
        assert (acc[k] - big[k]).abs().max() <= 1e-6


# --- train loop and checkpoints -------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_setup():
    docs = toy.corpus(400, seed=3)
    vocab = train_bpe(docs, 600)
    rows = pack_documents([encode(vocab, d) for d in docs], 64, vocab)
    cfg = EncoderConfig(n_layers=2, d_model=32, n_heads=4, head_dim=8, d_ff=64, vocab_size=vocab.size, max_len=64, local_window=8, global_period=2)
    return vocab, rows, cfg


def _run(toy_setup, seed=5, **kw):
    vocab, rows, cfg = toy_setup
    preset = get_preset("anneal-matryoshka").scaled(20_000, seq_len=64)
    return train_run(
        cfg,
        init_params(cfg, seed=seed),
        iter_batches(rows, 4, seed=seed),
        preset.schedule,
        preset.curriculum,
        seed=seed,
        mlm=MlmPolicy(vocab, preset.mlm_prob),
        **kw,
    )


def test_train_run_is_bit_reproducible(toy_setup):
    a, b = _run(toy_setup), _run(toy_setup)
    assert a.log == b.log
    assert all(torch.equal(a.state.params[k], b.state.params[k]) for k in a.state.params)
    assert {(r["f_head"], r["f_mlp"]) for r in a.log} == {(f, 1.0) for f in (0.25, 0.5, 0.75, 1.0)}
    assert a.log[0]["tokens"] == 0 and a.log[1]["tokens"] > 0


def test_train_run_empty_data(toy_setup):
    _, _, cfg = toy_setup
    with pytest.raises(ValueError):
        train_run(cfg, init_params(cfg), [], ScheduleSpec(decay_tokens=10))


def test_checkpoint_roundtrip(tmp_path, toy_setup):
    res = _run(toy_setup, max_tokens=3000)
    path = tmp_path / "ck.elen"
    save_checkpoint(path, res.state)
    back = load_checkpoint(path)
    assert back.config == res.state.config
    assert back.tokens_seen == res.state.tokens_seen and back.step == res.state.step
    for k in res.state.params:
        assert torch.equal(back.params[k], res.state.params[k])
        assert torch.equal(back.opt.m[k], res.state.opt.m[k])
        assert torch.equal(back.opt.v[k], res.state.opt.v[k])
    assert back.opt.hparams() == res.state.opt.hparams() and back.opt.t == res.state.opt.t


def test_checkpoint_errors(tmp_path):
    cfg = EncoderConfig(n_layers=1, d_model=8, n_heads=4, head_dim=2, d_ff=8, vocab_size=20, max_len=16, local_window=4)
    path = tmp_path / "ck.elen"
    save_checkpoint(path, TrainState(cfg, init_params(cfg)))
    raw = path.read_bytes()
    for bad in (raw[:-5], raw[:10], b"NOPE" + raw[4:], raw[:4] + b"\x09\x00\x00\x00" + raw[8:]):
        path.write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_resume_continues_lr_curve(tmp_path, toy_setup):
    vocab, rows, cfg = toy_setup
    preset = get_preset("anneal-matryoshka").scaled(20_000, seq_len=64)
    first = _run(toy_setup, max_tokens=8000)
    save_checkpoint(tmp_path / "mid.elen", first.state)
    mid = load_checkpoint(tmp_path / "mid.elen")
    rest = train_run(
        cfg, mid.params, iter_batches(rows, 4, seed=6), preset.schedule, preset.curriculum,
        opt=mid.opt, seed=6, tokens_seen=mid.tokens_seen, step=mid.step, mlm=MlmPolicy(vocab, preset.mlm_prob),
    )
    assert rest.log[0]["step"] == first.log[-1]["step"] + 1
    assert rest.log[0]["lr"] == lr_at(preset.schedule, first.state.tokens_seen)
    lrs = [r["lr"] for r in first.log + rest.log]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert rest.log[0]["tokens"] == first.state.tokens_seen
    assert all(r["lr"] == lr_at(preset.schedule, r["tokens"]) for r in first.log + rest.log)
    # the jump across the resume point is no larger than the jump just before it
    k = len(first.log)
    assert abs(lrs[k] - lrs[k - 1]) <= abs(lrs[k - 1] - lrs[k - 2]) * 1.5
