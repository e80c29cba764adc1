"""Command-line entry point: ``elenc <tok|data|train|adapt|adapt-domain|slice|bench> ...``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import bench as benchmod
from . import data as datamod
from .checkpoint import CheckpointError
from .encoder import FULL, EncoderConfig, Granularity, eval_loss, granularity_grid, init_params, slice_params
from .plotting import plot_throughput, plot_training
from .presets import PRESETS, TOY_CONFIG, BENCH_CONFIG, Preset, get_preset
from .tokenizer import Vocab, build_transplant_plan, iter_corpus_dir, train_bpe, transplant_embeddings, vocab_overlap
from .training import (
    CurriculumSpec,
    MlmPolicy,
    ScheduleSpec,
    TrainState,
    init_opt_state,
    iter_batches,
    load_checkpoint,
    save_checkpoint,
    train_run,
    write_metrics,
)

log = logging.getLogger("elastic_encoder")

DEFAULT_SEED = 42


class UsageError(Exception):
    """Bad flags or configuration; exits with status 2."""


# --- helpers ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None


def _pack_docs(docs, vocab: Vocab, seq_len: int) -> list[datamod.PackedRow]:
    streams = [vocab.encode(d.text) for d in docs if d.text]
    if not streams:
        raise UsageError("no documents to pack")
    return datamod.pack_documents(streams, seq_len, vocab)


def _load_rows(spec: dict, vocab: Vocab, seq_len: int) -> list[datamod.PackedRow]:
    if "packed" in spec:
        rows, L, V = datamod.read_packed(spec["packed"])
        if V != vocab.size:
            raise UsageError(f"packed file built for vocab size {V}, vocab has {vocab.size}")
        return rows
    if "documents" in spec:
        return _pack_docs(datamod.read_documents(spec["documents"]), vocab, seq_len)
    raise UsageError("data section needs 'packed' or 'documents'")


def _split_heldout(rows, fraction: float, seed: int):
    if fraction <= 0 or len(rows) < 2:
        return rows, []
    order = np.random.default_rng(seed).permutation(len(rows))
    n = max(1, int(len(rows) * fraction))
    held = set(order[:n].tolist())
    return [r for i, r in enumerate(rows) if i not in held], [r for i, r in enumerate(rows) if i in held]


def _resolve_preset(stage: dict, n_data_tokens: int) -> Preset:
    try:
        preset = get_preset(stage.get("preset", "pretrain-short"))
    except ValueError as e:
        raise UsageError(str(e)) from None
    if stage.get("matryoshka"):
        preset = preset.with_matryoshka(stage["matryoshka"])
    if "epochs" in stage:
        preset = replace(preset, epochs=int(stage["epochs"]))
    total = stage.get("total_tokens") or n_data_tokens * preset.epochs
    return preset.scaled(int(total), seq_len=stage.get("seq_len")).validate()


def _train_stage(
    args,
    config: EncoderConfig,
    state: TrainState,
    rows: list[datamod.PackedRow],
    preset: Preset,
    vocab: Vocab,
    batch_size: int,
    heldout: list[datamod.PackedRow],
    opt_hparams: Optional[dict] = None,
    schedule: Optional[ScheduleSpec] = None,
    curriculum: Optional[CurriculumSpec] = None,
) -> TrainState:
    out = _out_dir(args)
    schedule = schedule or preset.schedule
    curriculum = curriculum or preset.curriculum
    opt = state.opt or init_opt_state(state.params, **(opt_hparams or {}))
    mlm = MlmPolicy(vocab, preset.mlm_prob, preset.mlm_prob_decay, schedule.decay_start)
    metrics = out / "metrics.jsonl"
    if state.step == 0 and metrics.exists():
        metrics.unlink()

    def on_step(rec):
        if rec["step"] % 50 == 0:
            log.info("step %d tokens %d lr %.3g g=(%.2f,%.2f) loss %.4f", rec["step"], rec["tokens"], rec["lr"], rec["f_head"], rec["f_mlp"], rec["loss"])

    # a resumed run skips the batches the interrupted run already consumed
    batches = itertools.islice(iter_batches(rows, batch_size, preset.epochs, seed=args.seed), state.step, None)
    if getattr(args, "max_steps", None):
        batches = itertools.islice(batches, args.max_steps)
    res = train_run(
        config,
        state.params,
        batches,
        schedule,
        curriculum,
        opt=opt,
        seed=args.seed,
        tokens_seen=state.tokens_seen,
        step=state.step,
        mlm=mlm,
        max_tokens=schedule.total_tokens,
        on_step=on_step,
    )
    write_metrics(metrics, res.log)
    new = replace(res.state, extra={**state.extra, "preset": preset.name, "seed": args.seed})
    save_checkpoint(out / "final.elen", new)
    if res.log:
        plot_training(res.log, out / "loss.png")
    if heldout:
        held = datamod.mask_rows(heldout, preset.mlm_prob, args.seed + 1, vocab)
        grid = sorted(set(curriculum.grid) | {FULL}, key=lambda g: (g.f_head, g.f_mlp))
        report = {f"{g.f_head},{g.f_mlp}": eval_loss(config, new.params, held, g) for g in grid}
        (out / "eval.json").write_text(json.dumps({"heldout_loss": report, "ln_vocab": math.log(config.vocab_size)}, indent=2))
        log.info("held-out loss: %s", report)
    log.info("wrote %s", out / "final.elen")
    return new


# --- tok -----------------------------------------------------------------------------------


def cmd_tok(args) -> int:
    if args.tok_cmd == "train":
        docs = list(iter_corpus_dir(args.corpus))
        if args.dry_run:
            print(f"would train BPE size {args.size} on {len(docs)} documents")
            return 0
        vocab = train_bpe(docs, args.size)
        vocab.save(args.out)
        print(f"vocab size {vocab.size} ({len(vocab.merges)} merges) -> {args.out}")
    elif args.tok_cmd == "overlap":
        a, b = Vocab.load(args.a), Vocab.load(args.b)
        print(f"{vocab_overlap(a, b):.6f}")
    elif args.tok_cmd == "transplant":
        src, dst = Vocab.load(args.src_vocab), Vocab.load(args.dst_vocab)
        plan = build_transplant_plan(src, dst)
        if str(args.src_emb).endswith(".npy"):
            emb = torch.from_numpy(np.load(args.src_emb))
            out = transplant_embeddings(plan, emb, src_size=src.size, seed=args.seed)
            np.save(args.out, out.numpy())
        else:
            state = load_checkpoint(args.src_emb)
            state = _transplant_state(state, src, dst, args.seed)
            save_checkpoint(args.out, state)
        print(f"overlap {plan.overlap:.6f}: {len(plan.shared)} shared, {len(plan.fresh)} fresh -> {args.out}")
    return 0


def _transplant_state(state: TrainState, src: Vocab, dst: Vocab, seed: int) -> TrainState:
    plan = build_transplant_plan(src, dst)
    params = dict(state.params)
    params["tok_emb"] = transplant_embeddings(plan, params["tok_emb"], src_size=src.size, seed=seed)
    config = replace(state.config, vocab_size=dst.size)
    return TrainState(config, params, None, 0, 0, {**state.extra, "transplant_overlap": plan.overlap})


# --- data ------------------------------------------------------------------------------------


def cmd_data(args) -> int:
    if args.data_cmd == "curate":
        domain = None if args.domain == "none" else args.domain
        docs = datamod.curate(datamod.read_documents(args.input), args.quality_threshold, domain)
        if args.dry_run:
            print(f"{sum(1 for _ in docs)} documents would be kept")
            return 0
        n = datamod.write_documents(args.out, docs)
        print(f"kept {n} documents -> {args.out}")
    elif args.data_cmd == "pairs":
        docs = []
        with open(args.input, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                line = line.rstrip("\n")
                if not line:
                    continue
                src, _, tgt = line.partition("\t")
                docs.append(datamod.Document(id=f"pair-{i}", text=datamod.format_translation_pair(src, tgt), lang=args.lang))
        datamod.write_documents(args.out, docs)
        print(f"wrote {len(docs)} translation pairs -> {args.out}")
    elif args.data_cmd == "pack":
        vocab = Vocab.load(args.vocab)
        rows = _pack_docs(datamod.read_documents(args.input), vocab, args.len)
        if args.mlm > 0:
            rows = datamod.mask_rows(rows, args.mlm, args.seed, vocab)
        if args.dry_run:
            print(f"{len(rows)} rows of length {args.len}")
            return 0
        datamod.write_packed(args.out, rows, vocab.size)
        print(f"packed {len(rows)} rows of length {args.len} -> {args.out}")
    return 0


# --- train / adapt -------------------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.preset and not args.config:
        preset = get_preset(args.preset).validate()
        print(json.dumps({"preset": preset.name, "schedule": asdict(preset.schedule), "curriculum": preset.curriculum.to_json(),
                          "mlm_prob": preset.mlm_prob, "mlm_prob_decay": preset.mlm_prob_decay, "seq_len": preset.seq_len,
                          "rope_theta_global": preset.rope_theta_global, "epochs": preset.epochs}, indent=2))
        return 0
    if not args.config:
        raise UsageError("train needs --config (or --preset to inspect a preset)")
    cfg = _load_json(args.config)
    stage = dict(cfg.get("stage", {}))
    if args.preset:
        stage["preset"] = args.preset
    data_spec = cfg.get("data", {})
    if "vocab" not in data_spec:
        raise UsageError("data.vocab is required")
    try:
        model_cfg = EncoderConfig.from_dict({**asdict(TOY_CONFIG), **cfg.get("model", {})})
        get_preset(stage.get("preset", "pretrain-short"))
        if "schedule" in cfg:
            ScheduleSpec(**cfg["schedule"])
        if "curriculum" in cfg:
            CurriculumSpec.from_json(cfg["curriculum"]).validate()
        if "optimizer" in cfg:
            init_opt_state({}, **cfg["optimizer"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid config: {e}") from None

    vocab = Vocab.load(data_spec["vocab"])
    seq_len = stage.get("seq_len") or get_preset(stage.get("preset", "pretrain-short")).seq_len
    rows = _load_rows(data_spec, vocab, seq_len)
    rows, heldout = _split_heldout(rows, float(data_spec.get("heldout_fraction", 0.0)), args.seed)
    n_tokens = sum(r.n_tokens() for r in rows)
    preset = _resolve_preset(stage, n_tokens)
    schedule = None
    if "schedule" in cfg:
        try:
            schedule = replace(preset.schedule, **cfg["schedule"]).validate()
        except ValueError as e:
            raise UsageError(f"invalid schedule: {e}") from None
    curriculum = CurriculumSpec.from_json(cfg["curriculum"]) if "curriculum" in cfg else None

    if args.resume:
        state = load_checkpoint(args.resume)
        model_cfg = state.config
    else:
        model_cfg = preset.apply_to(replace(model_cfg, vocab_size=vocab.size))
        try:
            model_cfg.validate()
        except ValueError as e:
            raise UsageError(f"invalid model config: {e}") from None
        state = TrainState(model_cfg, init_params(model_cfg, seed=args.seed))
    if model_cfg.vocab_size != vocab.size:
        raise UsageError(f"model vocab {model_cfg.vocab_size} != data vocab {vocab.size}")

    if args.dry_run:
        print(f"config ok: {len(rows)} rows, {n_tokens} tokens, preset {preset.name}, schedule {asdict(schedule or preset.schedule)}")
        return 0
    _train_stage(args, model_cfg, state, rows, preset, vocab, int(data_spec.get("batch_size", 8)), heldout,
                 cfg.get("optimizer"), schedule, curriculum)
    return 0


def _adapt_common(args, preset_name: str, state: TrainState, vocab: Vocab) -> int:
    stage = {"preset": preset_name, "seq_len": args.seq_len, "total_tokens": args.total_tokens}
    if getattr(args, "epochs", None):
        stage["epochs"] = args.epochs
    if args.matryoshka:
        stage["matryoshka"] = args.matryoshka
    docs = list(datamod.read_documents(args.data))
    preset = get_preset(preset_name)
    rows = _pack_docs(docs, vocab, args.seq_len or preset.seq_len)
    rows, heldout = _split_heldout(rows, args.heldout_fraction, args.seed)
    preset = _resolve_preset({k: v for k, v in stage.items() if v is not None}, sum(r.n_tokens() for r in rows))
    config = preset.apply_to(state.config)
    state = replace(state, config=config, opt=None, tokens_seen=0, step=0)
    if args.dry_run:
        print(f"config ok: preset {preset.name}, {len(rows)} rows, schedule {asdict(preset.schedule)}")
        return 0
    _train_stage(args, config, state, rows, preset, vocab, args.batch_size, heldout)
    return 0


def cmd_adapt(args) -> int:
    state = load_checkpoint(args.init)
    dst = Vocab.load(args.vocab)
    if args.transplant:
        if not args.src_vocab:
            raise UsageError("--transplant needs --src-vocab")
        state = _transplant_state(state, Vocab.load(args.src_vocab), dst, args.seed)
        log.info("transplanted embeddings, overlap %.4f", state.extra["transplant_overlap"])
    else:
        config = replace(state.config, vocab_size=dst.size)
        fresh = init_params(config, seed=args.seed)["tok_emb"].to(state.params["tok_emb"].dtype)
        state = TrainState(config, {**state.params, "tok_emb": fresh}, extra=state.extra)
    return _adapt_common(args, args.preset, state, dst)


def cmd_adapt_domain(args) -> int:
    state = load_checkpoint(args.init)
    vocab = Vocab.load(args.vocab)
    if vocab.size != state.config.vocab_size:
        raise UsageError("vocab does not match the checkpoint")
    return _adapt_common(args, f"adapt-domain-{args.domain}", state, vocab)


# --- slice / bench ---------------------------------------------------------------------------------


def cmd_slice(args) -> int:
    state = load_checkpoint(args.ckpt)
    try:
        g = Granularity(args.heads, args.mlp)
        params, config = slice_params(state.params, state.config, g)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.dry_run:
        print(f"would write model with {config.n_heads} heads, d_ff {config.d_ff}")
        return 0
    out = Path(args.out) if args.out else _out_dir(args) / f"sliced_h{args.heads}_m{args.mlp}.elen"
    save_checkpoint(out, TrainState(config, params, extra={**state.extra, "granularity": [g.f_head, g.f_mlp]}))
    print(f"{config.n_heads} heads, d_ff {config.d_ff} -> {out}")
    return 0


def cmd_bench(args) -> int:
    if args.ckpt:
        state = load_checkpoint(args.ckpt)
        config, params, meta = state.config, state.params, state.extra
    else:
        config = replace(BENCH_CONFIG, max_len=max(BENCH_CONFIG.max_len, args.seq))
        params, meta = init_params(config, seed=args.seed), {}
    torch.set_num_threads(args.threads)
    if args.grid == "none":
        label = benchmod.sliced_granularity(meta) or FULL
        grid = [label]
    else:
        grid = granularity_grid(args.grid)
    if args.dry_run:
        print(f"would benchmark {len(grid)} granularities at seq_len {args.seq}, batch {args.batch}")
        return 0
    if args.grid == "none":
        row = benchmod.throughput(config, params, grid[0], args.seq, args.batch, args.repeats, args.warmup, sliced=True)
        report = benchmod.BenchReport([row], benchmod.environment(), args.repeats)
    else:
        report = benchmod.run_grid(config, params, grid, args.seq, args.batch, args.repeats, args.warmup)

    out = Path(args.out) if args.out else _out_dir(args) / "bench.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = report.to_json()
    try:
        table = benchmod.speedup_report(report)
    except ValueError:
        table = None
    if table is not None:
        payload["speedup"] = table
        text = benchmod.format_table(table)
        benchmod.write_csv(out.with_suffix(".csv"), table)
        plot_throughput(table, out.with_suffix(".png"))
    else:
        text = "\n".join(f"f_head={r.f_head} f_mlp={r.f_mlp} seq={r.seq_len} batch={r.batch} samples/s={r.samples_per_s:.4f}" for r in report.rows)
    out.write_text(json.dumps(payload, indent=2))
    out.with_suffix(".txt").write_text(text + "\n")
    print(f"# {report.environment}")
    print(text)
    return 0


# --- parser ------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration JSON")
    common.add_argument("--dry-run", action="store_true", default=argparse.SUPPRESS, help="validate without executing")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="directory for written artifacts")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="elenc", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="cmd", required=True)

    tok = sub.add_parser("tok", help="tokenizer training, overlap and transplant", parents=[common])
    tsub = tok.add_subparsers(dest="tok_cmd", required=True)
    t = tsub.add_parser("train", parents=[common])
    t.add_argument("--corpus", required=True)
    t.add_argument("--size", type=int, required=True)
    t.add_argument("--out", required=True)
    t = tsub.add_parser("overlap", parents=[common])
    t.add_argument("--a", required=True)
    t.add_argument("--b", required=True)
    t = tsub.add_parser("transplant", parents=[common])
    t.add_argument("--src-vocab", required=True)
    t.add_argument("--src-emb", required=True, help="checkpoint (.elen) or embedding matrix (.npy)")
    t.add_argument("--dst-vocab", required=True)
    t.add_argument("--out", required=True)
    tok.set_defaults(func=cmd_tok)

    dat = sub.add_parser("data", help="curation and packing", parents=[common])
    dsub = dat.add_subparsers(dest="data_cmd", required=True)
    d = dsub.add_parser("curate", parents=[common])
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--quality-threshold", type=float, default=datamod.QUALITY_THRESHOLD)
    d.add_argument("--domain", choices=["biomed", "legal", "none"], default="none")
    d = dsub.add_parser("pairs", help="TSV of source<TAB>target lines to documents", parents=[common])
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--lang", default="mul")
    d = dsub.add_parser("pack", parents=[common])
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--vocab", required=True)
    d.add_argument("--len", type=int, default=1024)
    d.add_argument("--mlm", type=float, default=0.3, help="masking rate; 0 writes clean rows")
    d.add_argument("--out", required=True)
    dat.set_defaults(func=cmd_data)

    tr = sub.add_parser("train", help="staged masked-LM training", parents=[common])
    tr.add_argument("--resume")
    tr.add_argument("--max-steps", type=int, help="stop after this many optimizer steps (resume later)")
    tr.add_argument("--preset", choices=sorted(PRESETS))
    tr.set_defaults(func=cmd_train)

    def adapt_flags(a):
        a.add_argument("--init", required=True)
        a.add_argument("--data", help="documents (NDJSON)")
        a.add_argument("--seq-len", type=int)
        a.add_argument("--total-tokens", type=int)
        a.add_argument("--batch-size", type=int, default=8)
        a.add_argument("--heldout-fraction", type=float, default=0.05)
        a.add_argument("--matryoshka", choices=["heads", "mlp"])

    ad = sub.add_parser("adapt", help="vocabulary adaptation", parents=[common])
    adapt_flags(ad)
    ad.add_argument("--vocab", required=True)
    ad.add_argument("--src-vocab")
    ad.add_argument("--transplant", action="store_true")
    ad.add_argument("--preset", choices=["adapt-lang", "adapt-lang-ca"], default="adapt-lang")
    ad.set_defaults(func=cmd_adapt)

    ad = sub.add_parser("adapt-domain", help="domain continued pre-training", parents=[common])
    adapt_flags(ad)
    ad.add_argument("--vocab", required=True)
    ad.add_argument("--domain", choices=["legal", "biomed"], required=True)
    ad.add_argument("--epochs", type=int)
    ad.set_defaults(func=cmd_adapt_domain)

    sl = sub.add_parser("slice", help="export a standalone sub-network", parents=[common])
    sl.add_argument("--ckpt", required=True)
    sl.add_argument("--heads", type=float, default=1.0)
    sl.add_argument("--mlp", type=float, default=1.0)
    sl.add_argument("--out")
    sl.set_defaults(func=cmd_slice)

    be = sub.add_parser("bench", help="inference throughput across granularities", parents=[common])
    be.add_argument("--ckpt", help="checkpoint; default is a random desk-scale model")
    be.add_argument("--grid", choices=["heads", "mlp", "both", "none"], default="heads")
    be.add_argument("--seq", type=int, default=8192)
    be.add_argument("--batch", type=int, default=1)
    be.add_argument("--repeats", type=int, default=9)
    be.add_argument("--warmup", type=int, default=2)
    be.add_argument("--threads", type=int, default=1)
    be.add_argument("--out")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    for name, default in (("seed", DEFAULT_SEED), ("config", None), ("dry_run", False), ("out_dir", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.cmd == "data" and args.data_cmd == "pack" and not 0 <= args.mlm < 1:
        parser.error("--mlm must lie in [0, 1)")
    if args.cmd == "data" and args.data_cmd == "pack" and args.len < 8:
        print("error: --len must be at least 8", file=sys.stderr)
        return 2
    if args.cmd in ("adapt", "adapt-domain") and not args.data and not args.dry_run:
        print("error: --data is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    log.info("seed %d", args.seed)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CheckpointError, ValueError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
