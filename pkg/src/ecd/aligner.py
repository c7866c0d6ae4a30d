"""Spatial aligner: grid partition, sliding-window patch matching, and
assembly of multi-scale pseudo-aligned views."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kernels import best_match_raw
from .ops import ShapeError


@dataclass(frozen=True)
class GridSpec:
    resolutions: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        rs = self.resolutions
        if not rs or any(n < 1 for n in rs) or list(rs) != sorted(set(rs)):
            raise ValueError(f"resolutions must be non-empty strictly increasing, got {rs}")


@dataclass(frozen=True)
class PatchMatch:
    cell: tuple[int, int]  # (row, col) in the n x n grid
    ref_index: int  # 0-based index into the reference subset
    offset: tuple[int, int]  # (top, left) in valid-position coordinates
    similarity: float


@dataclass
class PseudoView:
    resolution: int
    features: ad.Tensor  # (d, H, W)
    provenance: list[PatchMatch]


def partition_grid(f_q: np.ndarray, n: int):
    """Split a (d, H, W) map into n*n non-overlapping tiles in raster order."""
    d, h, w = f_q.shape
    if h % n or w % n:
        raise ShapeError(f"grid {n}x{n} does not divide feature size {h}x{w}")
    ph, pw = h // n, w // n
    cells = []
    for r in range(n):
        for c in range(n):
            cells.append(((r, c), f_q[:, r * ph : (r + 1) * ph, c * pw : (c + 1) * pw]))
    return cells


def match_patch(patch: np.ndarray, refs: np.ndarray, cell=(0, 0)) -> PatchMatch:
    """Best (reference, offset) for one query patch over all K references and
    all stride-1 sliding positions. Ties break to the lowest reference
    index, then raster order of the offset."""
    if refs.ndim != 4:
        raise ShapeError("refs must be a (K, d, H, W) stack")
    if refs.shape[1] != patch.shape[0]:
        raise ShapeError(f"channel mismatch: refs d={refs.shape[1]}, patch d={patch.shape[0]}")
    if patch.shape[1] > refs.shape[2] or patch.shape[2] > refs.shape[3]:
        raise ShapeError(f"patch {patch.shape[1:]} exceeds reference extent {refs.shape[2:]}")
    k, top, left, sim = best_match_raw(refs, patch)
    return PatchMatch(cell=cell, ref_index=k, offset=(top, left), similarity=sim)


def build_pseudo_view(f_q, refs, n: int) -> PseudoView:
    """Assemble the pseudo-aligned view for an n x n grid.

    `f_q` may be a Tensor or array; `refs` is a list of K (d, H, W) feature
    maps (Tensors during training so gradients flow into the selected
    patches). Matching itself is done on detached float32 data.
    """
    q_t = f_q if isinstance(f_q, ad.Tensor) else ad.Tensor(f_q)
    ref_ts = [r if isinstance(r, ad.Tensor) else ad.Tensor(r) for r in refs]
    ref_stack = np.ascontiguousarray(
        np.stack([np.asarray(r.data, dtype=np.float32) for r in ref_ts])
    )
    d, h, w = q_t.shape
    ph, pw = h // n, w // n

    provenance = []
    rows = []
    for r in range(n):
        row_blocks = []
        for c in range(n):
            patch = np.ascontiguousarray(
                np.asarray(q_t.data[:, r * ph : (r + 1) * ph, c * pw : (c + 1) * pw], dtype=np.float32)
            )
            m = match_patch(patch, ref_stack, cell=(r, c))
            provenance.append(m)
            top, left = m.offset
            row_blocks.append(ref_ts[m.ref_index][:, top : top + ph, left : left + pw])
        rows.append(ad.concat(row_blocks, axis=2))
    view = ad.concat(rows, axis=1)
    return PseudoView(resolution=n, features=view, provenance=provenance)


def build_pseudo_views_b(q_batch: np.ndarray, refs: ad.Tensor, grids: GridSpec) -> list[ad.Tensor]:
    """Batched multi-scale pseudo-view assembly.

    `q_batch` is detached (B, d, H, W) query data used only for matching;
    `refs` is a (B, K, d, H, W) Tensor whose selected blocks carry gradients.
    Returns one (B, d, H, W) Tensor per grid resolution.
    """
    b, d, h, w = q_batch.shape
    for n in grids.resolutions:
        if h % n or w % n:
            raise ShapeError(f"grid {n}x{n} does not divide feature size {h}x{w}")
    ref_stack = np.ascontiguousarray(np.asarray(refs.data, dtype=np.float32))
    q32 = np.asarray(q_batch, dtype=np.float32)
    views = []
    for n in grids.resolutions:
        ph, pw = h // n, w // n
        idx = np.empty((b, n, n, 3), dtype=np.int64)
        for bi in range(b):
            for r in range(n):
                for c in range(n):
                    patch = np.ascontiguousarray(
                        q32[bi, :, r * ph : (r + 1) * ph, c * pw : (c + 1) * pw]
                    )
                    k, top, left, _ = best_match_raw(ref_stack[bi], patch)
                    idx[bi, r, c] = (k, top, left)
        views.append(ad.gather_blocks(refs, idx, ph, pw))
    return views


def build_multiscale(f_q, refs, grids: GridSpec) -> list[PseudoView]:
    """One pseudo-aligned view per grid resolution, in GridSpec order."""
    shape = f_q.shape if not isinstance(f_q, ad.Tensor) else f_q.data.shape
    for n in grids.resolutions:
        if shape[1] % n or shape[2] % n:
            raise ShapeError(f"grid {n}x{n} does not divide feature size {shape[1]}x{shape[2]}")
    return [build_pseudo_view(f_q, refs, n) for n in grids.resolutions]
