"""Stride-sampled reference database: build, descriptors, top-K retrieval,
and strict/coarse pose match classification."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ecdf
from .ops import l2_normalize_channels


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    rotation: float = 0.0  # degrees in [-180, 180)
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def rotation_difference(a: float, b: float) -> float:
    """Wrapped absolute angle difference in degrees, in [0, 180]."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def pose_distance(a: Pose, b: Pose) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass(frozen=True)
class MatchCriteria:
    mode: str = "threshold"  # "threshold" or "same_sequence" for the coarse rule
    strict_distance: float = 1.0
    strict_rotation: float = 10.0
    coarse_distance: float = 25.0
    coarse_rotation: float = 45.0

    def __post_init__(self):
        if self.mode not in ("threshold", "same_sequence"):
            raise ValueError(f"unknown coarse-match mode {self.mode!r}")
        if self.strict_distance > self.coarse_distance or self.strict_rotation > self.coarse_rotation:
            raise ValueError("strict thresholds must not exceed coarse thresholds")


@dataclass
class ReferenceEntry:
    sequence: str
    index: int  # 1-based position within the source sequence
    pose: Pose
    descriptor: np.ndarray  # unit d-vector
    features: np.ndarray | None = None  # (d, H, W) encoder features
    feature_path: str | None = None

    def load_features(self) -> np.ndarray:
        if self.features is None:
            self.features = ecdf.read_tensor(self.feature_path)
        return self.features


@dataclass
class ReferenceDatabase:
    entries: list[ReferenceEntry]
    stride: int
    sequence_lengths: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)


def compute_descriptor(f: np.ndarray) -> np.ndarray:
    """Mean-pool per-position vectors, then unit-normalize (zero map stays zero)."""
    if f.size == 0:
        raise ValueError("empty feature map")
    v = f.reshape(f.shape[0], -1).mean(axis=1)
    return l2_normalize_channels(v[:, None, None])[:, 0, 0]


def strided_indices(length: int, stride: int) -> list[int]:
    """1-based indices {1, 1+s, 1+2s, ...} <= length."""
    return list(range(1, length + 1, stride))


def build_database(sequences, stride: int) -> ReferenceDatabase:
    """Build the read-only database from (sequence id, ordered frames).

    Each frame is (pose, features); every stride-th frame per sequence is
    retained, starting from the first. |entries| = sum_m ceil(L_m / stride).
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    sequences = list(sequences)
    if not sequences:
        raise ValueError("no sequences given")
    entries = []
    lengths = {}
    for seq_id, frames in sequences:
        frames = list(frames)
        lengths[seq_id] = len(frames)
        for j in strided_indices(len(frames), stride):
            pose, features = frames[j - 1]
            entries.append(
                ReferenceEntry(
                    sequence=seq_id,
                    index=j,
                    pose=pose,
                    descriptor=compute_descriptor(features),
                    features=features,
                )
            )
    return ReferenceDatabase(entries=entries, stride=stride, sequence_lengths=lengths)


def retrieve_topk(query_descriptor: np.ndarray, db: ReferenceDatabase, k: int):
    """The k entries most cosine-similar to the query descriptor, descending.

    Ties break by (sequence id, index) ascending. Exhaustive scan: exact.
    """
    if k > len(db.entries):
        raise ValueError(f"top-k={k} exceeds database size {len(db.entries)}")
    sims = np.array([float(e.descriptor @ query_descriptor) for e in db.entries])
    order = sorted(
        range(len(db.entries)),
        key=lambda i: (-sims[i], db.entries[i].sequence, db.entries[i].index),
    )
    return [db.entries[i] for i in order[:k]], [float(sims[i]) for i in order[:k]]


def classify_match(
    query_pose: Pose,
    entry: ReferenceEntry,
    criteria: MatchCriteria,
    query_sequence: str | None = None,
) -> str:
    """Grade a retrieved entry against the query pose: strict, coarse, or miss.

    A strict match always also satisfies the coarse rule.
    """
    dist = pose_distance(query_pose, entry.pose)
    drot = rotation_difference(query_pose.rotation, entry.pose.rotation)
    if dist <= criteria.strict_distance and drot <= criteria.strict_rotation:
        return "strict"
    if criteria.mode == "same_sequence":
        if query_sequence is not None and entry.sequence == query_sequence:
            return "coarse"
    elif dist <= criteria.coarse_distance and drot <= criteria.coarse_rotation:
        return "coarse"
    return "miss"


# -- persistence ---------------------------------------------------------------


def save_database(db: ReferenceDatabase, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, e in enumerate(db.entries):
        feat_name = f"feat_{i:05d}.ecdf"
        ecdf.write_tensor(directory / feat_name, e.load_features().astype(np.float32))
        records.append(
            {
                "sequence": e.sequence,
                "index": e.index,
                "pose": [e.pose.x, e.pose.y, e.pose.rotation, e.pose.scale],
                "descriptor": [float(v) for v in e.descriptor],
                "feature_file": feat_name,
            }
        )
    manifest = {
        "stride": db.stride,
        "sequence_lengths": db.sequence_lengths,
        "entries": records,
    }
    (directory / "db.json").write_text(json.dumps(manifest, indent=1))


def load_database(directory) -> ReferenceDatabase:
    directory = Path(directory)
    manifest = json.loads((directory / "db.json").read_text())
    entries = []
    for rec in manifest["entries"]:
        x, y, rot, scale = rec["pose"]
        entries.append(
            ReferenceEntry(
                sequence=rec["sequence"],
                index=rec["index"],
                pose=Pose(x, y, rot, scale),
                descriptor=np.array(rec["descriptor"], dtype=np.float32),
                feature_path=str(directory / rec["feature_file"]),
            )
        )
    return ReferenceDatabase(
        entries=entries,
        stride=manifest["stride"],
        sequence_lengths={k: int(v) for k, v in manifest["sequence_lengths"].items()},
    )
