"""Batch detection runner: per-query mask files plus one evaluation CSV."""
from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import imageio
from .evaluator import ConfusionCounts, accumulate, f1, precision, recall, retrieval_report
from .pipeline import ChangeModel, PipelineConfig, Sample, database_from_world, prepare_samples
from .refdb import MatchCriteria, ReferenceDatabase, compute_descriptor
from .synthworld import World

CSV_FIELDS = [
    "timestamp",
    "config_hash",
    "mode",
    "stride",
    "top_k",
    "grids",
    "f1",
    "precision",
    "recall",
    "strict_at_1",
    "coarse_at_1",
]


def num_workers() -> int:
    return max(1, int(os.environ.get("ECD_NUM_WORKERS", "1")))


def _predict_chunk(args):
    cfg, blocks, samples = args
    model = ChangeModel(cfg)
    for name, p in model.all_params().items():
        p.data = np.array(blocks[name], dtype=p.data.dtype)
    return [model.predict(s.query_enc, s.ref_encs).mask[0] for s in samples]


def predict_all(model: ChangeModel, samples: list[Sample]) -> list[np.ndarray]:
    """Masks for all samples, in input order; parallel across queries when
    ECD_NUM_WORKERS allows."""
    workers = num_workers()
    if workers <= 1 or len(samples) < 2 * workers:
        return [model.predict(s.query_enc, s.ref_encs).mask[0] for s in samples]
    blocks = {k: np.array(p.data) for k, p in model.all_params().items()}
    chunks = [samples[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_predict_chunk, [(model.cfg, blocks, c) for c in chunks]))
    out: list[np.ndarray] = [None] * len(samples)  # type: ignore[list-item]
    for w, masks in enumerate(results):
        for j, mask in enumerate(masks):
            out[w + j * workers] = mask
    return out


def run_detect(cfg: PipelineConfig, world: World, out_dir,
               model: ChangeModel | None = None,
               db: ReferenceDatabase | None = None,
               criteria: MatchCriteria | None = None) -> dict:
    """Detect changes for every query in the world and write masks + CSV.

    Returns the metrics row. Fully reproducible from (cfg, world, model);
    only the CSV timestamp column varies between runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = ChangeModel(cfg)
    if db is None:
        db = database_from_world(world, cfg.stride, model.encoder_cfg)
    criteria = criteria or MatchCriteria()
    samples = prepare_samples(world, db, model.encoder_cfg, cfg.top_k)
    masks = predict_all(model, samples)

    acc = ConfusionCounts()
    for s, mask in zip(samples, masks):
        # prediction is at pixel resolution; GT mask matches the query crop
        acc = accumulate(mask, s.gt_mask, acc)
        imageio.write_pgm(out / f"{s.sequence}_pred_{s.query_index:04d}.pgm", mask)

    retrieval_queries = [
        (compute_descriptor(s.query_enc), s.pose, s.sequence) for s in samples
    ]
    strict_rate, coarse_rate = retrieval_report(retrieval_queries, db, criteria)

    row = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config_hash": cfg.config_hash(),
        "mode": cfg.mode,
        "stride": cfg.stride,
        "top_k": cfg.top_k,
        "grids": ",".join(str(n) for n in cfg.grids),
        "f1": f"{f1(acc):.6f}",
        "precision": f"{precision(acc):.6f}",
        "recall": f"{recall(acc):.6f}",
        "strict_at_1": f"{strict_rate:.6f}",
        "coarse_at_1": f"{coarse_rate:.6f}",
    }
    write_csv_row(out / "eval.csv", row)
    return row


def write_csv_row(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(row)
