"""Command-line entry point wiring the pipeline together.

Subcommands: gen | build-db | retrieve | align | detect | train | eval.
Worker parallelism is capped by the ECD_NUM_WORKERS environment variable.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ecdf, imageio
from .aligner import GridSpec, build_multiscale
from .encoder import EncoderConfig, encode, project
from .evaluator import ConfusionCounts, accumulate, f1, precision, recall
from .pipeline import MODES, ChangeModel, PipelineConfig, database_from_world, prepare_samples
from .refdb import compute_descriptor, load_database, retrieve_topk, save_database
from .runner import run_detect, write_csv_row
from .synthworld import WorldSpec, generate_world, load_world
from .trainer import TrainConfig, train


def _add_pipeline_flags(p):
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--grids", default="1,2,4", help="comma-separated grid resolutions")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--encoder-patch", type=int, default=4)
    p.add_argument("--encoder-dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)


def parse_grids(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def read_config_file(path) -> dict:
    """key=value lines; '#' starts a comment."""
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


def pipeline_config(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "config", None):
        overrides = read_config_file(args.config)
    cfg = PipelineConfig(
        stride=int(overrides.get("stride", args.stride)),
        top_k=int(overrides.get("top_k", args.top_k)),
        grids=parse_grids(str(overrides.get("grids", args.grids))),
        threshold=float(overrides.get("threshold", args.threshold)),
        seed=int(overrides.get("seed", args.seed)),
        mode=str(overrides.get("mode", args.mode)),
        encoder_patch=int(overrides.get("encoder_patch", args.encoder_patch)),
        encoder_dim=int(overrides.get("encoder_dim", args.encoder_dim)),
        heads=int(overrides.get("heads", args.heads)),
    )
    return cfg


def cmd_gen(args):
    spec = WorldSpec(
        seed=args.seed,
        sequence_count=args.sequences,
        frames_per_sequence=args.frames,
        queries_per_sequence=args.queries,
        crop_size=args.crop_size,
        canvas_size=args.canvas_size,
    )
    generate_world(spec, args.out)
    print(f"world written to {args.out}")


def cmd_build_db(args):
    cfg = pipeline_config(args)
    world = load_world(args.world)
    enc = EncoderConfig(patch_size=cfg.encoder_patch, dim=cfg.encoder_dim, seed=cfg.seed)
    db = database_from_world(world, cfg.stride, enc)
    save_database(db, args.out)
    print(f"database with {len(db)} entries (stride {cfg.stride}) written to {args.out}")


def cmd_retrieve(args):
    cfg = pipeline_config(args)
    db = load_database(args.db)
    enc = EncoderConfig(patch_size=cfg.encoder_patch, dim=cfg.encoder_dim, seed=cfg.seed)
    img = imageio.read_ppm(args.query)
    desc = compute_descriptor(encode(img, enc))
    entries, sims = retrieve_topk(desc, db, cfg.top_k)
    for rank, (e, s) in enumerate(zip(entries, sims), start=1):
        print(f"{rank}\t{e.sequence}\t{e.index}\t{s:.6f}")


def cmd_align(args):
    cfg = pipeline_config(args)
    db = load_database(args.db)
    model = ChangeModel(cfg)
    if args.checkpoint:
        model.load(args.checkpoint)
    img = imageio.read_ppm(args.query)
    q_enc = encode(img, model.encoder_cfg)
    entries, _ = retrieve_topk(compute_descriptor(q_enc), db, cfg.top_k)
    f_q = project(q_enc, model.proj_head).detach()
    refs = [project(e.load_features(), model.proj_head).detach() for e in entries]
    views = build_multiscale(f_q, refs, GridSpec(cfg.grids))
    print("n\tcell\tk*\tz*\tsimilarity")
    for view in views:
        for m in view.provenance:
            print(
                f"{view.resolution}\t({m.cell[0]},{m.cell[1]})\t{m.ref_index + 1}"
                f"\t({m.offset[0]},{m.offset[1]})\t{m.similarity:.6f}"
            )
    if args.dump_views:
        out = Path(args.dump_views)
        out.mkdir(parents=True, exist_ok=True)
        for view in views:
            ecdf.write_tensor(
                out / f"pseudo_view_n{view.resolution}.ecdf",
                np.asarray(view.features.data, dtype=np.float32),
            )


def cmd_detect(args):
    cfg = pipeline_config(args)
    world = load_world(args.world)
    model = ChangeModel(cfg)
    if args.checkpoint:
        model.load(args.checkpoint)
    db = load_database(args.db) if args.db else None
    row = run_detect(cfg, world, args.out, model=model, db=db)
    print(",".join(str(row[k]) for k in row))


def cmd_train(args):
    cfg = pipeline_config(args)
    overrides = read_config_file(args.config) if args.config else {}
    tcfg = TrainConfig(
        learning_rate=float(overrides.get("learning_rate", 1e-4)),
        batch_size=int(overrides.get("batch_size", 4)),
        epochs=int(overrides.get("epochs", args.epochs)),
        warmup_epochs=int(overrides.get("warmup_epochs", args.warmup)),
        w_pos=float(overrides["w_pos"]) if "w_pos" in overrides else None,
        seed=cfg.seed,
    )
    world_train = load_world(args.world)
    world_val = load_world(args.val_world)
    model = ChangeModel(cfg)
    db = database_from_world(world_train, cfg.stride, model.encoder_cfg)
    train_samples = prepare_samples(world_train, db, model.encoder_cfg, cfg.top_k)
    val_db = database_from_world(world_val, cfg.stride, model.encoder_cfg)
    val_samples = prepare_samples(world_val, val_db, model.encoder_cfg, cfg.top_k)
    best, history = train(model, train_samples, val_samples, tcfg)
    out = Path(args.out)
    model.save(out / "params")
    with (out / "metrics.csv").open("w") as fh:
        fh.write("epoch,lr,train_loss,val_f1\n")
        for h in history:
            fh.write(f"{h['epoch']},{h['lr']:.8g},{h['train_loss']:.6f},{h['val_f1']:.6f}\n")
    print(f"best val F1 {best['val_f1']:.4f} at epoch {best['epoch']}")


def cmd_eval(args):
    world = load_world(args.world)
    acc = ConfusionCounts()
    masks_dir = Path(args.masks)
    for seq in world.sequences:
        for qi, q in enumerate(seq.queries):
            pred = imageio.read_pgm(masks_dir / f"{seq.sequence_id}_pred_{qi:04d}.pgm")
            acc = accumulate(pred, q.mask, acc)
    print(f"f1={f1(acc):.6f} precision={precision(acc):.6f} recall={recall(acc):.6f}")


def build_parser():
    parser = argparse.ArgumentParser(prog="ecd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic world")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sequences", type=int, default=2)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--crop-size", type=int, default=32)
    p.add_argument("--canvas-size", type=int, default=192)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("build-db", help="build the strided reference database")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("retrieve", help="top-K retrieval for one query image")
    p.add_argument("--db", required=True)
    p.add_argument("--query", required=True, help="PPM query image")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("align", help="per-cell match provenance for one query")
    p.add_argument("--db", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dump-views", help="directory for ECDF dumps of the pseudo views")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("detect", help="run the full pipeline over a world")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--db")
    p.add_argument("--checkpoint")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train", help="train projection head, aggregator, change head")
    p.add_argument("--world", required=True)
    p.add_argument("--val-world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score prediction masks against world ground truth")
    p.add_argument("--world", required=True)
    p.add_argument("--masks", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
