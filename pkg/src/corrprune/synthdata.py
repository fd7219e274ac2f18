"""Deterministic synthetic two-view scenes and the CPDS dataset file format."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    DEFAULT_EPS,
    CameraPose,
    essential_from_pose,
    label_correspondences,
    symmetric_epipolar_distance,
)

log = logging.getLogger(__name__)

HALF_FOV = 1.0  # normalized image half-width
DEPTH_RANGE = (1.0, 4.0)
MIN_VISIBLE = 0.3
VISIBILITY_PROBES = 1000
MAX_RESAMPLES = 100

MAGIC = b"CPDS"
VERSION = b"0001"


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncationError(DatasetFormatError):
    pass


class VisibilityError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    num_pairs: int = 100
    n: int = 512
    outlier_rate: float = 0.5
    noise: float = 1e-3
    max_angle: float = 30.0
    seed: int = 0
    eps_label: float = DEFAULT_EPS

    def check(self) -> None:
        if self.num_pairs < 1:
            raise ValueError("num_pairs must be >= 1")
        if self.n < 32:
            raise ValueError("n must be >= 32")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError("outlier_rate must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0.0 < self.max_angle <= 120.0:
            raise ValueError("max_angle must lie in (0, 120]")


@dataclass
class ScenePair:
    pose: CameraPose
    E_gt: np.ndarray
    corrs: np.ndarray  # (N, 4) float64
    labels: np.ndarray  # (N,) uint8
    noise: float = 0.0
    outlier_rate: float = 0.0
    seed: tuple = field(default=())

    @property
    def n(self) -> int:
        return len(self.corrs)


def _frustum_points(rng, n):
    xy = rng.uniform(-HALF_FOV, HALF_FOV, size=(n, 2))
    z = rng.uniform(*DEPTH_RANGE, size=n)
    return np.column_stack([xy * z[:, None], z])


def _visible(X, pose: CameraPose):
    X2 = X @ pose.R.T + pose.t
    z = X2[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = X2[:, :2] / z[:, None]
    return (z > 1e-6) & np.all(np.abs(proj) <= HALF_FOV, axis=1)


def sample_pose(rng: np.random.Generator, max_angle: float = 30.0) -> CameraPose:
    """Random rotation (uniform axis, angle in (0, max_angle]) and unit translation,
    resampled until enough of the view-1 frustum is visible from view 2."""
    if not 0.0 < max_angle <= 120.0:
        raise ValueError("max_angle must lie in (0, 120]")
    for _ in range(MAX_RESAMPLES):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = math.radians(max_angle - rng.uniform(0.0, max_angle))
        R = Rotation.from_rotvec(axis * angle).as_matrix()
        t = rng.normal(size=3)
        t /= np.linalg.norm(t)
        pose = CameraPose(R, t)
        if _visible(_frustum_points(rng, VISIBILITY_PROBES), pose).mean() >= MIN_VISIBLE:
            return pose
    raise VisibilityError(f"no pose with >= {MIN_VISIBLE:.0%} shared visibility in {MAX_RESAMPLES} draws")


def project(X: np.ndarray, pose: CameraPose) -> np.ndarray:
    X2 = X @ pose.R.T + pose.t
    return np.column_stack([X[:, :2] / X[:, 2:], X2[:, :2] / X2[:, 2:]])


def shared_frustum_points(rng: np.random.Generator, pose: CameraPose, n: int) -> np.ndarray:
    """n 3D points (view-1 frame) visible in both views, by rejection."""
    out = []
    have = 0
    for _ in range(10_000):
        X = _frustum_points(rng, max(2 * n, 64))
        X = X[_visible(X, pose)]
        out.append(X)
        have += len(X)
        if have >= n:
            return np.concatenate(out)[:n]
    raise VisibilityError("shared frustum is empty")


def sample_outliers(rng, E, n, eps_label, stats=None):
    """Independent uniform points in each view, redrawn if they happen to satisfy E."""
    rows = []
    have = 0
    drawn = rejected = 0
    while have < n:
        c = rng.uniform(-HALF_FOV, HALF_FOV, size=(n - have, 4))
        keep = symmetric_epipolar_distance(E, c) >= eps_label
        drawn += len(c)
        rejected += int(np.count_nonzero(~keep))
        rows.append(c[keep])
        have += int(keep.sum())
    if stats is not None:
        stats["drawn"] = stats.get("drawn", 0) + drawn
        stats["rejected"] = stats.get("rejected", 0) + rejected
    return np.concatenate(rows) if rows else np.zeros((0, 4))


def inlier_count(n: int, outlier_rate: float) -> int:
    return math.ceil((1.0 - outlier_rate) * n - 1e-9)


def generate_pair(spec: DatasetSpec, rng: np.random.Generator, stats=None) -> ScenePair:
    spec.check()
    pose = sample_pose(rng, spec.max_angle)
    E = essential_from_pose(pose)
    n_in = inlier_count(spec.n, spec.outlier_rate)
    inl = project(shared_frustum_points(rng, pose, n_in), pose)
    if spec.noise > 0:
        inl[:, 2:] += rng.normal(0.0, spec.noise, size=(n_in, 2))
    outl = sample_outliers(rng, E, spec.n - n_in, spec.eps_label, stats)
    corrs = np.concatenate([inl, outl])
    labels = np.concatenate([np.ones(n_in, np.uint8), np.zeros(spec.n - n_in, np.uint8)])
    perm = rng.permutation(spec.n)
    corrs, labels = corrs[perm], labels[perm]

    agree = float(np.mean(label_correspondences(E, corrs, spec.eps_label) == labels))
    if agree < 0.99 or (spec.noise == 0 and agree < 1.0):
        log.warning("label agreement %.4f below expectation (noise=%g)", agree, spec.noise)
    return ScenePair(pose, E, corrs, labels, spec.noise, spec.outlier_rate)


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(spec: DatasetSpec, start: int = 0) -> list[ScenePair]:
    """Pairs ``start .. start + num_pairs - 1``; pair i depends only on (seed, i)."""
    spec.check()
    pairs = []
    for i in range(start, start + spec.num_pairs):
        pair = generate_pair(spec, pair_rng(spec.seed, i))
        pair.seed = (spec.seed, i)
        pairs.append(pair)
    return pairs


# --- file format ------------------------------------------------------------

_PAIR_HEAD = struct.Struct("<I9d9d3ddd")


def dataset_bytes(pairs) -> bytes:
    chunks = [MAGIC + VERSION, struct.pack("<I", len(pairs))]
    for p in pairs:
        chunks.append(
            _PAIR_HEAD.pack(
                p.n,
                *np.asarray(p.E_gt, np.float64).ravel(),
                *p.pose.R.ravel(),
                *p.pose.t,
                float(p.noise),
                float(p.outlier_rate),
            )
        )
        chunks.append(np.asarray(p.corrs, dtype="<f4").tobytes())
        chunks.append(np.asarray(p.labels, dtype=np.uint8).tobytes())
    return b"".join(chunks)


def write_dataset(path, pairs) -> None:
    Path(path).write_bytes(dataset_bytes(pairs))


def parse_dataset(buf: bytes) -> list[ScenePair]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise BadMagicError("not a CPDS dataset file")
    if buf[4:8] != VERSION:
        raise VersionMismatchError(f"dataset version {buf[4:8]!r}, expected {VERSION!r}")
    if len(buf) < 12:
        raise TruncationError("missing pair count")
    (count,) = struct.unpack_from("<I", buf, 8)
    off = 12
    pairs = []
    for k in range(count):
        if off + _PAIR_HEAD.size > len(buf):
            raise TruncationError(f"pair {k} header truncated")
        vals = _PAIR_HEAD.unpack_from(buf, off)
        off += _PAIR_HEAD.size
        n = vals[0]
        E = np.array(vals[1:10]).reshape(3, 3)
        R = np.array(vals[10:19]).reshape(3, 3)
        t = np.array(vals[19:22])
        noise, rate = vals[22], vals[23]
        need = 16 * n + n
        if off + need > len(buf):
            raise TruncationError(f"pair {k} payload truncated")
        corrs = np.frombuffer(buf, dtype="<f4", count=4 * n, offset=off).reshape(n, 4).astype(np.float64)
        off += 16 * n
        labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).copy()
        off += n
        if np.any(labels > 1):
            raise DatasetFormatError(f"pair {k} has non-binary labels")
        pairs.append(ScenePair(CameraPose(R, t), E, corrs, labels, noise, rate))
    if off != len(buf):
        raise DatasetFormatError(f"{len(buf) - off} trailing bytes")
    return pairs


def read_dataset(path) -> list[ScenePair]:
    return parse_dataset(Path(path).read_bytes())


def quantize(pairs) -> list[ScenePair]:
    """Pairs as they come back from disk (coordinates rounded to float32)."""
    return parse_dataset(dataset_bytes(pairs))


def export_csv(path, pairs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "x", "y", "u", "v", "label"])
        for i, p in enumerate(pairs):
            for row, lab in zip(p.corrs, p.labels):
                w.writerow([i, *(repr(float(v)) for v in row), int(lab)])


def read_csv_pair(path, pair_id: int = 0) -> np.ndarray:
    """Correspondence rows of one pair from a CSV export (or a bare x,y,u,v CSV)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            if "pair_id" in rec and int(rec["pair_id"]) != pair_id:
                continue
            rows.append([float(rec[k]) for k in ("x", "y", "u", "v")])
    return np.array(rows, dtype=np.float64).reshape(-1, 4)
