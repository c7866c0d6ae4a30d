"""End-to-end pipeline wiring: encode -> project -> retrieve -> align ->
aggregate -> change head, with the ablation modes.

Modes mirror the ablation axes:
  baseline   - top-1 retrieved reference, projected, fed straight to the head
  align_only - scale-averaged pseudo-aligned views fed straight to the head
  agg_only   - aggregation with the top-1 reference feature as attention query
  full       - multi-scale alignment + aggregation
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import ecdf
from .aggregator import (
    AggregatorParams,
    aggregate_scale,
    aggregate_scale_b,
    flatten_tokens,
    reconstruct_scene,
    ref_tokens_b,
)
from .aligner import GridSpec, build_multiscale, build_pseudo_views_b
from .change_head import ChangeHeadParams, change_logits, change_logits_b, detect_change
from .encoder import EncoderConfig, ProjectionHead, encode, project
from .refdb import ReferenceDatabase, build_database, compute_descriptor, retrieve_topk
from .synthworld import World

MODES = ("baseline", "align_only", "agg_only", "full")


@dataclass
class PipelineConfig:
    stride: int = 1
    top_k: int = 3
    grids: tuple[int, ...] = (1, 2, 4)
    threshold: float = 0.5
    seed: int = 0
    mode: str = "full"
    encoder_patch: int = 4
    encoder_dim: int = 32
    heads: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")

    def config_hash(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ChangeModel:
    """Trainable bundle: shared projection head, aggregator, change head."""

    def __init__(self, cfg: PipelineConfig, dtype=np.float32):
        self.cfg = cfg
        d = cfg.encoder_dim
        self.encoder_cfg = EncoderConfig(patch_size=cfg.encoder_patch, dim=d, seed=cfg.seed)
        self.proj_head = ProjectionHead(d, seed=cfg.seed + 1, dtype=dtype)
        self.aggregator = AggregatorParams(
            d, heads=cfg.heads, dropout=cfg.dropout, seed=cfg.seed + 2, dtype=dtype
        )
        self.change_head = ChangeHeadParams(d, heads=cfg.heads, seed=cfg.seed + 3, dtype=dtype)
        self.grids = GridSpec(tuple(cfg.grids))

    def trainable_params(self) -> dict[str, ad.Tensor]:
        params = dict(self.proj_head.params)
        if self.cfg.mode in ("agg_only", "full"):
            params.update(self.aggregator.params)
        params.update(self.change_head.params)
        return params

    def all_params(self) -> dict[str, ad.Tensor]:
        params = dict(self.proj_head.params)
        params.update(self.aggregator.params)
        params.update(self.change_head.params)
        return params

    def save(self, directory) -> None:
        ecdf.write_container(directory, {k: np.array(p.data) for k, p in self.all_params().items()})

    def load(self, directory) -> None:
        blocks = ecdf.read_container(directory)
        for name, p in self.all_params().items():
            p.data = np.array(blocks[name], dtype=p.data.dtype)

    # -- forward ------------------------------------------------------------

    def scene_from_refs(self, f_q: ad.Tensor, refs_proj: list[ad.Tensor],
                        training: bool = False, rng=None) -> ad.Tensor:
        mode = self.cfg.mode
        if mode == "baseline":
            return refs_proj[0]
        if mode == "align_only":
            views = build_multiscale(f_q, refs_proj, self.grids)
            acc = views[0].features
            for v in views[1:]:
                acc = acc + v.features
            return acc / len(views)
        if mode == "agg_only":
            ref_tokens = flatten_tokens(refs_proj)
            return aggregate_scale(refs_proj[0], ref_tokens, self.aggregator,
                                   training=training, rng=rng)
        views = build_multiscale(f_q, refs_proj, self.grids)
        return reconstruct_scene(views, refs_proj, self.aggregator, training=training, rng=rng)

    def forward_logits(self, query_enc: np.ndarray, ref_encs: list[np.ndarray],
                       training: bool = False, rng=None) -> ad.Tensor:
        f_q = project(query_enc, self.proj_head)
        n_refs = 1 if self.cfg.mode == "baseline" else len(ref_encs)
        refs_proj = [project(r, self.proj_head) for r in ref_encs[:n_refs]]
        scene = self.scene_from_refs(f_q, refs_proj, training=training, rng=rng)
        return change_logits(scene, f_q, self.change_head, self.cfg.encoder_patch)

    def forward_logits_batch(self, samples, training: bool = False, rng=None) -> ad.Tensor:
        """Batched forward over a list of samples -> (B, 1, P*h, P*w) logits.

        Equivalent to stacking forward_logits over the samples (exactly so
        when dropout is off); one graph is built for the whole batch.
        """
        mode = self.cfg.mode
        n_refs = 1 if mode == "baseline" else len(samples[0].ref_encs)
        stack = np.stack(
            [np.stack([s.query_enc] + list(s.ref_encs[:n_refs])) for s in samples]
        )  # (B, 1+n, d, h, w)
        b, m, d, h, w = stack.shape
        proj = project(stack.reshape(b * m, d, h, w), self.proj_head)
        proj = proj.reshape(b, m, d, h, w)
        f_q = proj[:, 0]
        if mode == "baseline":
            scene = proj[:, 1]
        else:
            refs = proj[:, 1:]  # (B, K, d, h, w)
            if mode == "align_only":
                views = build_pseudo_views_b(f_q.data, refs, self.grids)
                acc = views[0]
                for v in views[1:]:
                    acc = acc + v
                scene = acc / len(views)
            elif mode == "agg_only":
                ref_tokens = ref_tokens_b(refs)
                scene = aggregate_scale_b(refs[:, 0], ref_tokens, self.aggregator,
                                          training=training, rng=rng)
            else:  # full
                views = build_pseudo_views_b(f_q.data, refs, self.grids)
                ref_tokens = ref_tokens_b(refs)
                outs = [
                    aggregate_scale_b(v, ref_tokens, self.aggregator, training=training, rng=rng)
                    for v in views
                ]
                acc = outs[0]
                for o in outs[1:]:
                    acc = acc + o
                scene = acc / len(outs)
        return change_logits_b(scene, f_q, self.change_head, self.cfg.encoder_patch)

    def predict_batch(self, samples) -> list[np.ndarray]:
        """Thresholded change masks for a batch, without building a graph."""
        from .ops import sigmoid

        with ad.no_grad():
            logits = self.forward_logits_batch(samples).data
        probs = sigmoid(logits)
        return [probs[i, 0] >= self.cfg.threshold for i in range(len(samples))]

    def predict(self, query_enc: np.ndarray, ref_encs: list[np.ndarray]):
        scene, f_q = self.scene_and_query(query_enc, ref_encs)
        return detect_change(
            scene.data, f_q.data, self.change_head, self.cfg.encoder_patch, self.cfg.threshold
        )

    def scene_and_query(self, query_enc, ref_encs):
        f_q = project(query_enc, self.proj_head).detach()
        n_refs = 1 if self.cfg.mode == "baseline" else len(ref_encs)
        refs_proj = [project(r, self.proj_head).detach() for r in ref_encs[:n_refs]]
        return self.scene_from_refs(f_q, refs_proj), f_q


@dataclass
class Sample:
    """One query with its frozen retrieval context."""

    query_enc: np.ndarray
    ref_encs: list[np.ndarray]
    gt_mask: np.ndarray
    sequence: str = ""
    pose: object = None
    query_index: int = 0


def database_from_world(world: World, stride: int, encoder_cfg: EncoderConfig) -> ReferenceDatabase:
    sequences = []
    for seq in world.sequences:
        frames = [(fr.pose, encode(fr.image, encoder_cfg)) for fr in seq.frames]
        sequences.append((seq.sequence_id, frames))
    return build_database(sequences, stride)


def prepare_samples(world: World, db: ReferenceDatabase, encoder_cfg: EncoderConfig,
                    top_k: int) -> list[Sample]:
    """Encode queries and resolve their frozen top-K retrievals."""
    samples = []
    for seq in world.sequences:
        for qi, q in enumerate(seq.queries):
            q_enc = encode(q.image, encoder_cfg)
            entries, _ = retrieve_topk(compute_descriptor(q_enc), db, top_k)
            samples.append(
                Sample(
                    query_enc=q_enc,
                    ref_encs=[e.load_features() for e in entries],
                    gt_mask=q.mask,
                    sequence=seq.sequence_id,
                    pose=q.pose,
                    query_index=qi,
                )
            )
    return samples
