"""Deterministic synthetic world generator.

Each sequence gets its own canvas: a smooth textured background with
rectangles and disks painted on top. The t1 canvas applies a change budget
(insertions, deletions, recolors) to the t0 canvas. Camera paths sample
axis-aligned crops with per-frame poses; pose rotation is metadata for the
match criteria and is not applied to pixels. Ground-truth change masks are
exact pixel comparisons of the two canvases inside the query crop.

Pose coordinates are in world units (pixels_per_unit pixels each); every
sequence lives in its own pose offset block so cross-sequence poses are
never within the coarse threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import imageio
from .ops import upsample_bilinear, bilinear_matrix
from .refdb import Pose

SEQUENCE_POSE_OFFSET = 10_000.0  # units between sequence pose blocks


@dataclass(frozen=True)
class WorldSpec:
    canvas_size: int = 192
    object_count: tuple[int, int] = (8, 14)
    object_size: tuple[int, int] = (12, 36)
    sequence_count: int = 2
    frames_per_sequence: int = 30
    queries_per_sequence: int = 10
    camera_step: float = 0.5  # units per frame along the path
    camera_jitter: float = 0.25  # units, applied to query poses
    rotation_jitter: float = 3.0  # degrees, pose metadata only
    crop_size: int = 32
    pixels_per_unit: int = 8
    insert_count: int = 2
    delete_count: int = 1
    recolor_count: int = 1
    aligned_queries: bool = False  # also emit oracle t0 renders per query
    seed: int = 0

    def __post_init__(self):
        if self.crop_size > self.canvas_size:
            raise ValueError("crop must fit inside the canvas")
        if min(self.sequence_count, self.frames_per_sequence, self.queries_per_sequence) < 1:
            raise ValueError("counts must be positive")


@dataclass
class Frame:
    pose: Pose
    image: np.ndarray  # (3, crop, crop) float32


@dataclass
class Query:
    pose: Pose
    image: np.ndarray
    mask: np.ndarray  # (crop, crop) bool
    oracle_image: np.ndarray | None = None


@dataclass
class Sequence:
    sequence_id: str
    frames: list[Frame]
    queries: list[Query]
    change_records: list[dict]


@dataclass
class World:
    spec: WorldSpec
    sequences: list[Sequence]


def _draw_object(canvas, ids, obj):
    size = canvas.shape[1]
    yy, xx = np.mgrid[0:size, 0:size]
    if obj["kind"] == "disk":
        inside = (yy - obj["cy"]) ** 2 + (xx - obj["cx"]) ** 2 <= obj["radius"] ** 2
    else:
        inside = (
            (np.abs(yy - obj["cy"]) <= obj["half_h"])
            & (np.abs(xx - obj["cx"]) <= obj["half_w"])
        )
    canvas[:, inside] = np.array(obj["color"], dtype=np.float32)[:, None]
    ids[inside] = obj["id"]


def _render_canvas(background, objects):
    canvas = background.copy()
    ids = np.zeros(background.shape[1:], dtype=np.int32)
    for obj in objects:
        _draw_object(canvas, ids, obj)
    return canvas, ids


def _random_object(rng, spec: WorldSpec, obj_id: int) -> dict:
    size = spec.canvas_size
    lo, hi = spec.object_size
    kind = "disk" if rng.random() < 0.5 else "rect"
    obj = {
        "id": obj_id,
        "kind": kind,
        "cy": int(rng.integers(0, size)),
        "cx": int(rng.integers(0, size)),
        "color": [float(c) for c in rng.uniform(0.1, 1.0, size=3)],
    }
    if kind == "disk":
        obj["radius"] = int(rng.integers(lo // 2, hi // 2 + 1))
    else:
        obj["half_h"] = int(rng.integers(lo // 2, hi // 2 + 1))
        obj["half_w"] = int(rng.integers(lo // 2, hi // 2 + 1))
    return obj


def _background(rng, size: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 0.9, size=(3, 12, 12)).astype(np.float32)
    factor = -(-size // 12)  # ceil
    big = upsample_bilinear(coarse, factor)
    return np.ascontiguousarray(big[:, :size, :size])


def render_crop(canvas: np.ndarray, pose: Pose, crop_size: int,
                pixels_per_unit: int, origin: float = 0.0) -> np.ndarray:
    """Axis-aligned crop centered at the pose, resampled to crop_size.

    At scale 1 this is an exact sub-image copy; other scales read a window
    of crop_size/scale pixels and bilinearly resample it. Rotation is pose
    metadata only.
    """
    cx = (pose.x - origin) * pixels_per_unit
    cy = (pose.y - origin) * pixels_per_unit
    window = int(round(crop_size / pose.scale))
    top = int(round(cy)) - window // 2
    left = int(round(cx)) - window // 2
    size = canvas.shape[1]
    if top < 0 or left < 0 or top + window > size or left + window > size:
        raise ValueError(f"pose {pose} out of bounds for window {window} in canvas {size}")
    sub = canvas[:, top : top + window, left : left + window]
    if window == crop_size:
        return sub.copy()
    a_row = _resample_matrix(window, crop_size, canvas.dtype)
    return np.einsum("ih,dhw,jw->dij", a_row, sub, a_row, optimize=True)


def _resample_matrix(src: int, dst: int, dtype):
    if dst % src == 0:
        return bilinear_matrix(src, dst // src, dtype=np.float64).astype(dtype)
    a = np.zeros((dst, src), dtype=dtype)
    for i in range(dst):
        s = (i + 0.5) * src / dst - 0.5
        lo = int(np.floor(s))
        t = s - lo
        a[i, min(max(lo, 0), src - 1)] += 1.0 - t
        a[i, min(max(lo + 1, 0), src - 1)] += t
    return a


def _crop_window(pose: Pose, crop_size: int, pixels_per_unit: int, origin: float):
    cx = (pose.x - origin) * pixels_per_unit
    cy = (pose.y - origin) * pixels_per_unit
    top = int(round(cy)) - crop_size // 2
    left = int(round(cx)) - crop_size // 2
    return top, left


def build_world(spec: WorldSpec) -> World:
    """Render the whole world in memory, deterministically in spec.seed."""
    rng = np.random.default_rng(spec.seed)
    size = spec.canvas_size
    ppu = spec.pixels_per_unit
    margin_px = spec.crop_size // 2 + 2
    sequences = []
    next_id = 1

    for m in range(spec.sequence_count):
        seq_id = f"seq{m:02d}"
        origin = m * SEQUENCE_POSE_OFFSET
        background = _background(rng, size)
        n_obj = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
        objects_t0 = []
        for _ in range(n_obj):
            objects_t0.append(_random_object(rng, spec, next_id))
            next_id += 1

        # camera path: straight line with direction flips at the borders
        step_px = spec.camera_step * ppu
        pos = np.array(
            [
                rng.uniform(margin_px, size - margin_px),
                rng.uniform(margin_px, size - margin_px),
            ]
        )  # (y, x) pixels
        theta = rng.uniform(0, 2 * np.pi)
        vel = np.array([np.sin(theta), np.cos(theta)]) * step_px
        path_px = []
        for _ in range(spec.frames_per_sequence):
            path_px.append(pos.copy())
            nxt = pos + vel
            for axis in (0, 1):
                if nxt[axis] < margin_px or nxt[axis] > size - margin_px:
                    vel[axis] = -vel[axis]
            pos = pos + vel
        path_arr = np.array(path_px)

        def path_distance(obj):
            pt = np.array([obj["cy"], obj["cx"]], dtype=float)
            return float(np.min(np.linalg.norm(path_arr - pt, axis=1)))

        # change budget between epochs; changed objects are kept near the
        # camera path so queries actually see them
        records = []
        objects_t1 = [dict(o) for o in objects_t0]
        near_first = sorted(range(len(objects_t1)), key=lambda i: path_distance(objects_t1[i]))
        for idx in sorted(near_first[: spec.delete_count], reverse=True):
            records.append({"kind": "delete", "object": objects_t1[idx]["id"]})
            del objects_t1[idx]
        near_first = sorted(range(len(objects_t1)), key=lambda i: path_distance(objects_t1[i]))
        for idx in near_first[: spec.recolor_count]:
            old = objects_t1[idx]["color"]
            objects_t1[idx] = dict(objects_t1[idx])
            objects_t1[idx]["color"] = [float(c) for c in rng.uniform(0.1, 1.0, size=3)]
            records.append({"kind": "recolor", "object": objects_t1[idx]["id"], "from": old})
        for _ in range(spec.insert_count):
            obj = _random_object(rng, spec, next_id)
            anchor = path_arr[int(rng.integers(len(path_arr)))]
            shift = rng.uniform(-spec.crop_size / 3, spec.crop_size / 3, size=2)
            obj["cy"] = int(np.clip(anchor[0] + shift[0], 0, size - 1))
            obj["cx"] = int(np.clip(anchor[1] + shift[1], 0, size - 1))
            next_id += 1
            objects_t1.append(obj)
            records.append({"kind": "insert", "object": obj["id"]})

        canvas_t0, ids_t0 = _render_canvas(background, objects_t0)
        canvas_t1, ids_t1 = _render_canvas(background, objects_t1)
        changed = (ids_t0 != ids_t1) | np.any(canvas_t0 != canvas_t1, axis=0)

        def make_pose(py, px):
            rot = float(rng.uniform(-spec.rotation_jitter, spec.rotation_jitter))
            return Pose(x=origin + px / ppu, y=origin + py / ppu, rotation=rot, scale=1.0)

        frames = []
        for py, px in path_px:
            pose = make_pose(py, px)
            frames.append(
                Frame(pose=pose, image=render_crop(canvas_t0, pose, spec.crop_size, ppu, origin))
            )

        queries = []
        q_frame_idx = np.linspace(0, spec.frames_per_sequence - 1, spec.queries_per_sequence)
        for fi in q_frame_idx:
            base = path_px[int(round(fi))]
            jit = rng.uniform(-spec.camera_jitter, spec.camera_jitter, size=2) * ppu
            py, px = base + jit
            py = float(np.clip(py, margin_px, size - margin_px))
            px = float(np.clip(px, margin_px, size - margin_px))
            pose = make_pose(py, px)
            img = render_crop(canvas_t1, pose, spec.crop_size, ppu, origin)
            top, left = _crop_window(pose, spec.crop_size, ppu, origin)
            mask = changed[top : top + spec.crop_size, left : left + spec.crop_size].copy()
            oracle = (
                render_crop(canvas_t0, pose, spec.crop_size, ppu, origin)
                if spec.aligned_queries
                else None
            )
            queries.append(Query(pose=pose, image=img, mask=mask, oracle_image=oracle))

        sequences.append(
            Sequence(sequence_id=seq_id, frames=frames, queries=queries, change_records=records)
        )

    return World(spec=spec, sequences=sequences)


def generate_world(spec: WorldSpec, out_dir) -> dict:
    """Render the world and write images (PPM), masks (PGM), and the JSON
    manifest to out_dir. Returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(spec)
    manifest = {"spec": asdict(spec), "sequences": []}
    for seq in world.sequences:
        seq_rec = {
            "id": seq.sequence_id,
            "frames": [],
            "queries": [],
            "changes": seq.change_records,
        }
        for i, fr in enumerate(seq.frames):
            name = f"{seq.sequence_id}_t0_{i:04d}.ppm"
            imageio.write_ppm(out / name, fr.image)
            seq_rec["frames"].append({"image": name, "pose": _pose_list(fr.pose)})
        for i, q in enumerate(seq.queries):
            name = f"{seq.sequence_id}_t1_{i:04d}.ppm"
            mask_name = f"{seq.sequence_id}_gt_{i:04d}.pgm"
            imageio.write_ppm(out / name, q.image)
            imageio.write_pgm(out / mask_name, q.mask)
            rec = {"image": name, "mask": mask_name, "pose": _pose_list(q.pose)}
            if q.oracle_image is not None:
                oracle_name = f"{seq.sequence_id}_oracle_{i:04d}.ppm"
                imageio.write_ppm(out / oracle_name, q.oracle_image)
                rec["oracle_image"] = oracle_name
            seq_rec["queries"].append(rec)
        manifest["sequences"].append(seq_rec)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_world(directory) -> World:
    """Reload a generated world from its manifest and image files."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec_d = manifest["spec"]
    for key in ("object_count", "object_size"):
        spec_d[key] = tuple(spec_d[key])
    spec = WorldSpec(**spec_d)
    sequences = []
    for seq_rec in manifest["sequences"]:
        frames = [
            Frame(pose=_pose_from(r["pose"]), image=imageio.read_ppm(directory / r["image"]))
            for r in seq_rec["frames"]
        ]
        queries = []
        for r in seq_rec["queries"]:
            oracle = (
                imageio.read_ppm(directory / r["oracle_image"]) if "oracle_image" in r else None
            )
            queries.append(
                Query(
                    pose=_pose_from(r["pose"]),
                    image=imageio.read_ppm(directory / r["image"]),
                    mask=imageio.read_pgm(directory / r["mask"]),
                    oracle_image=oracle,
                )
            )
        sequences.append(
            Sequence(
                sequence_id=seq_rec["id"],
                frames=frames,
                queries=queries,
                change_records=seq_rec["changes"],
            )
        )
    return World(spec=spec, sequences=sequences)


def _pose_list(p: Pose):
    return [p.x, p.y, p.rotation, p.scale]


def _pose_from(vals) -> Pose:
    return Pose(x=vals[0], y=vals[1], rotation=vals[2], scale=vals[3])
