"""Command-line entry point.

Subcommands: gen-data, pretrain-gen, pretrain-disc, advtrain, eval, sweep,
decode. Every command is deterministic given its flags and config. Exit
codes: 0 success, 1 validation/config error, 2 runtime/numeric error.

Report-producing paths write a PNG figure next to each delimited output
(training log, evaluation report, sweep CSV). ADVCAP_THREADS caps sweep
parallelism.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .advtrain import (
    GRID_KEYS,
    METRIC_COLUMNS,
    AdversarialTrainer,
    default_sweep_grid,
    sweep as run_sweep,
)
from .checkpoint import (
    discriminator_from_checkpoint,
    generator_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .config import RunConfig
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    TapeStateError,
    UnsupportedMetricError,
)
from .generator import beam_search, ensemble_decode
from .metrics import MetricId, corpus_scores
from .textdata import (
    GrammarSpec,
    Vocabulary,
    build_vocab,
    decode_to_text,
    gen_synthetic_dataset,
    load_jsonl_records,
    make_examples,
    write_jsonl_dataset,
)

CHECKPOINT_TEMPLATE = "checkpoint_{tag}.advc"
TRAIN_LOG = "train_log.jsonl"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_world(run_cfg: RunConfig, vocab: Vocabulary | None = None):
    """Load and encode train/val datasets; vocab is built from the training
    captions unless one is supplied (e.g. from a checkpoint)."""
    cfg = run_cfg.train
    train_records = load_jsonl_records(run_cfg.train_data)
    if not train_records:
        raise DataError(f"{run_cfg.train_data}: training set is empty")
    if vocab is None:
        corpus = [c for _, _, caps in train_records for c in caps]
        vocab = build_vocab(corpus, cfg.min_count)
    train = make_examples(train_records, vocab, cfg.t_max)
    val = []
    if run_cfg.val_data:
        val_records = load_jsonl_records(run_cfg.val_data)
        # keep image ids disjoint from the training set
        offset = 1 + max(r[0] for r in train_records)
        val_records = [(offset + i, f, c) for i, (_, f, c) in enumerate(val_records)]
        val = make_examples(val_records, vocab, cfg.t_max)
    return train, val, vocab


def _jsonl_logger(path):
    fh = open(path, "a", encoding="utf-8")
    records = []

    def log(rec):
        records.append(rec)
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return log, records, fh


def _checkpoint_writer(out_dir):
    def write(trainer, tag):
        meta, tensors = trainer.snapshot()
        save_checkpoint(os.path.join(out_dir, CHECKPOINT_TEMPLATE.format(tag=tag)),
                        meta, tensors)

    return write


def _prepare_run(args):
    run_cfg = RunConfig.load(args.config)
    if run_cfg.defaulted:
        print(f"config: defaults used for: {', '.join(run_cfg.defaulted)}", file=sys.stderr)
    os.makedirs(run_cfg.out_dir, exist_ok=True)
    resume = getattr(args, "resume", None)
    if resume:
        meta, tensors = load_checkpoint(resume)
        vocab = Vocabulary(list(meta["vocab"]))
        train, val, _ = _load_world(run_cfg, vocab=vocab)
        trainer = AdversarialTrainer.restore(train, val, meta, tensors)
    else:
        train, val, vocab = _load_world(run_cfg)
        trainer = AdversarialTrainer(train, val, vocab, run_cfg.train)
    return run_cfg, trainer


def _finish_training_outputs(run_cfg, records):
    from . import plots

    fig_path = os.path.join(run_cfg.out_dir, "train_curves.png")
    plots.training_curves(records, fig_path)
    print(f"log: {os.path.join(run_cfg.out_dir, TRAIN_LOG)}")
    print(f"figure: {fig_path}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    spec = GrammarSpec.from_json_file(args.spec) if args.spec else GrammarSpec()
    records = gen_synthetic_dataset(spec, args.n, args.seed)
    write_jsonl_dataset(args.out, records)
    print(f"wrote {len(records)} examples to {args.out}")
    return 0


def cmd_pretrain_gen(args):
    run_cfg, trainer = _prepare_run(args)
    if trainer.phase != "start":
        print(f"nothing to do: checkpoint is already at phase {trainer.phase!r}")
        return 0
    log, records, fh = _jsonl_logger(os.path.join(run_cfg.out_dir, TRAIN_LOG))
    try:
        trainer.pretrain_gen(log_fn=log)
    finally:
        fh.close()
    _checkpoint_writer(run_cfg.out_dir)(trainer, "gen_mle")
    _finish_training_outputs(run_cfg, records)
    return 0


def cmd_pretrain_disc(args):
    if not args.resume:
        args.resume = os.path.join(RunConfig.load(args.config).out_dir,
                                   CHECKPOINT_TEMPLATE.format(tag="gen_mle"))
    run_cfg, trainer = _prepare_run(args)
    if trainer.phase == "start":
        raise ConfigError("pretrain-disc needs a generator checkpoint (run pretrain-gen first)")
    if trainer.phase not in ("gen_done",):
        print(f"nothing to do: checkpoint is already at phase {trainer.phase!r}")
        return 0
    log, records, fh = _jsonl_logger(os.path.join(run_cfg.out_dir, TRAIN_LOG))
    try:
        trainer.pretrain_disc(log_fn=log)
    finally:
        fh.close()
    _checkpoint_writer(run_cfg.out_dir)(trainer, "disc_pre")
    _finish_training_outputs(run_cfg, records)
    return 0


def cmd_advtrain(args):
    run_cfg, trainer = _prepare_run(args)
    if trainer.phase == "done":
        print("nothing to do: checkpoint is already at phase 'done'")
        return 0
    log, records, fh = _jsonl_logger(os.path.join(run_cfg.out_dir, TRAIN_LOG))
    ckpt = _checkpoint_writer(run_cfg.out_dir)
    try:
        trainer.run(log_fn=log, checkpoint_fn=ckpt)
    finally:
        fh.close()
    ckpt(trainer, "final")
    _finish_training_outputs(run_cfg, records)
    if trainer.best_metric is not None:
        print(f"best held-out CIDEr-D: {trainer.best_metric:.4f}")
    return 0


def cmd_eval(args):
    meta, tensors = load_checkpoint(args.checkpoint)
    gen, vocab, cfg, idf = generator_from_checkpoint(meta, tensors)
    metric_ids = [MetricId.parse(m) for m in args.metrics.split(",")] if args.metrics \
        else list(MetricId)
    records = load_jsonl_records(args.data)
    examples = make_examples(records, vocab, cfg.t_max)

    decoded = [beam_search(gen, ex.feature, args.beam, cfg.t_max) for ex in examples]
    cands = [d.caption for d in decoded]
    refsets = [ex.references for ex in examples]
    scores = corpus_scores(cands, refsets, idf, metric_ids)

    lines = [{"metric": m.value, "level": "corpus", "value": scores[m.value]}
             for m in metric_ids]
    if args.disc_probs:
        disc = discriminator_from_checkpoint(meta, tensors)
        if disc is None:
            raise ConfigError("--disc-probs needs a checkpoint containing a discriminator")
        from .textdata import pad_ids

        feats = np.stack([ex.feature for ex in examples], axis=1)
        caps = np.stack([pad_ids(c, cfg.t_max) for c in cands])
        probs = disc.forward_batch(feats, caps).data
        lines.append({"metric": f"{cfg.disc_arch.upper()}_D", "level": "corpus",
                      "value": float(np.mean(probs))})
        for ex, cand, p in zip(examples, cands, probs):
            lines.append({"image_id": int(ex.image_id),
                          "caption": decode_to_text(cand.ids, vocab), "p": float(p)})

    with open(args.out, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")

    from . import plots

    fig_path = os.path.splitext(args.out)[0] + ".png"
    plots.metric_bars({m.value: scores[m.value] for m in metric_ids}, fig_path)
    for m in metric_ids:
        print(f"{m.value}: {scores[m.value]:.6f}")
    print(f"report: {args.out}")
    print(f"figure: {fig_path}")
    return 0


def cmd_decode(args):
    loaded = [load_checkpoint(p) for p in args.checkpoint]
    built = [generator_from_checkpoint(m, t) for m, t in loaded]
    gens = [b[0] for b in built]
    vocab, cfg = built[0][1], built[0][2]
    for _, v, _, _ in built[1:]:
        if v.id_to_token != vocab.id_to_token:
            raise ConfigError("ensemble checkpoints must share one vocabulary")
    records = load_jsonl_records(args.data)
    examples = make_examples(records, vocab, cfg.t_max)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for ex in examples:
            if len(gens) == 1:
                res = beam_search(gens[0], ex.feature, args.beam, cfg.t_max)
            else:
                res = ensemble_decode(gens, ex.feature, args.beam, cfg.t_max)
            out.write(decode_to_text(res.caption.ids, vocab) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


SWEEP_COLUMNS = ("cell",) + GRID_KEYS + ("status", "error") + METRIC_COLUMNS


def write_sweep_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in SWEEP_COLUMNS})


def read_sweep_csv(path):
    """Parse a sweep CSV back into row dicts (metric columns as floats)."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = dict(row)
            if row["status"] == "ok":
                for m in METRIC_COLUMNS:
                    parsed[m] = float(row[m])
                parsed["lambda"] = float(row["lambda"])
                parsed["g_steps"] = int(row["g_steps"])
                parsed["d_steps"] = int(row["d_steps"])
            out.append(parsed)
    return out


def cmd_sweep(args):
    run_cfg = RunConfig.load(args.config)
    if run_cfg.defaulted:
        print(f"config: defaults used for: {', '.join(run_cfg.defaulted)}", file=sys.stderr)
    os.makedirs(run_cfg.out_dir, exist_ok=True)
    if args.grid:
        with open(args.grid, "r", encoding="utf-8") as fh:
            grid = json.load(fh)
        if not isinstance(grid, list) or not grid:
            raise ConfigError(f"{args.grid}: grid must be a non-empty JSON list of cells")
        for cell in grid:
            if "cell" not in cell:
                raise ConfigError("every grid cell needs a 'cell' name")
    else:
        grid = default_sweep_grid()
    threads = int(os.environ.get("ADVCAP_THREADS", "1"))
    train, val, vocab = _load_world(run_cfg)
    rows = run_sweep(train, val, vocab, run_cfg.train, grid=grid, threads=threads)
    write_sweep_csv(rows, args.out)

    from . import plots

    fig_path = os.path.splitext(args.out)[0] + ".png"
    plots.sweep_chart(rows, fig_path)
    n_ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"sweep: {n_ok}/{len(rows)} cells succeeded")
    print(f"table: {args.out}")
    print(f"figure: {fig_path}")
    return 0 if n_ok >= 1 else 2


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advcap",
                                description="adversarially trained sequence captioning")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic JSONL dataset")
    g.add_argument("--spec", default=None, help="grammar spec JSON (default grammar if omitted)")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    for name, fn in (("pretrain-gen", cmd_pretrain_gen),
                     ("pretrain-disc", cmd_pretrain_disc),
                     ("advtrain", cmd_advtrain)):
        t = sub.add_parser(name, help=f"run the {name} phase")
        t.add_argument("--config", required=True)
        t.add_argument("--resume", default=None, help="checkpoint to resume from")
        t.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="decode a dataset and score corpus metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", default=None,
                   help="comma-separated subset (default: all supported)")
    e.add_argument("--beam", type=int, default=5)
    e.add_argument("--out", required=True)
    e.add_argument("--disc-probs", action="store_true",
                   help="also emit discriminator probabilities per decoded caption")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("decode", help="print one decoded caption per input example")
    d.add_argument("--checkpoint", action="append", required=True,
                   help="repeat for an ensemble")
    d.add_argument("--data", required=True)
    d.add_argument("--beam", type=int, default=5)
    d.add_argument("--out", default=None)
    d.set_defaults(fn=cmd_decode)

    s = sub.add_parser("sweep", help="run the hyperparameter grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", default=None, help="grid JSON (default: 5+4+4 grid)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataError, CheckpointError, UnsupportedMetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, TapeStateError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
