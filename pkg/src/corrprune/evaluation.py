"""Precision/recall/F, pose mAP, a RANSAC baseline, dataset evaluation and reports."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry
from .network import LeCoT, lecot_forward


def prf(pred, labels) -> tuple[float, float, float]:
    pred = np.asarray(pred).astype(bool).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if pred.shape != labels.shape:
        raise ValueError("prediction and label lengths differ")
    tp = int(np.count_nonzero(pred & labels))
    fp = int(np.count_nonzero(pred & ~labels))
    fn = int(np.count_nonzero(~pred & labels))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def pose_map(errors, threshold: float) -> float:
    """Fraction of pairs with max(rotation error, translation error) <= threshold."""
    errs = np.asarray(errors, dtype=np.float64).reshape(-1, 2)
    if len(errs) == 0:
        raise ValueError("pose_map needs at least one pair")
    return float(np.mean(np.max(errs, axis=1) <= threshold))


def pose_map_binned(errors, threshold: float) -> float:
    """Mean over 1-degree bins up to ``threshold`` of the max-error accuracy,
    the area-under-curve flavour of pose mAP."""
    errs = np.asarray(errors, dtype=np.float64).reshape(-1, 2)
    if len(errs) == 0:
        raise ValueError("pose_map needs at least one pair")
    worst = np.max(errs, axis=1)
    edges = np.arange(1, int(np.ceil(threshold)) + 1, dtype=np.float64)
    edges[-1] = threshold
    return float(np.mean([(worst <= e).mean() for e in edges]))


@dataclass
class RansacResult:
    E: np.ndarray
    mask: np.ndarray
    failed_trials: int


def ransac_baseline(corrs, iterations: int = 1000, eps_inlier: float = geometry.DEFAULT_EPS,
                    rng=None, chunk: int = 256) -> RansacResult:
    """8-point RANSAC: uniform minimal samples, consensus by symmetric epipolar
    distance, final uniform-weight refit on the winning consensus set."""
    c = geometry.as_correspondences(corrs)
    n = len(c)
    if n < 8 or iterations < 1:
        raise ValueError("RANSAC needs N >= 8 and at least one iteration")
    rng = np.random.default_rng(0) if rng is None else rng
    Q = geometry.eight_point_rows(c)
    best_count, best_E, failed = -1, None, 0
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        samples = np.stack([rng.choice(n, 8, replace=False) for _ in range(m)])
        done += m
        Qs = Q[samples]  # m, 8, 9
        G = Qs.transpose(0, 2, 1) @ Qs
        lam, V = np.linalg.eigh(G)
        for j in range(m):
            if lam[j, 1] <= 1e-12 * max(lam[j, -1], np.finfo(float).tiny):
                failed += 1
                continue
            try:
                E = geometry.enforce_essential(V[j, :, 0].reshape(3, 3))
                d = geometry.symmetric_epipolar_distance(E, c)
            except geometry.GeometryError:
                failed += 1
                continue
            count = int(np.count_nonzero(d < eps_inlier))
            if count > best_count:
                best_count, best_E = count, E
    if best_E is None:
        raise geometry.RankDeficiencyError("every RANSAC trial was degenerate")
    mask = geometry.symmetric_epipolar_distance(best_E, c) < eps_inlier
    if mask.sum() >= 8:
        try:
            refit = geometry.weighted_eight_point(c[mask], np.ones(int(mask.sum())))
            refit_mask = geometry.symmetric_epipolar_distance(refit, c) < eps_inlier
            if refit_mask.sum() >= mask.sum():
                best_E, mask = refit, refit_mask
        except geometry.GeometryError:
            pass
    return RansacResult(geometry.canonical_sign(best_E), mask.astype(np.uint8), failed)


@dataclass
class PairRecord:
    pair: int
    rot_err: float
    trans_err: float
    precision: float
    recall: float
    f_score: float
    ms: float
    ok: bool = True
    error: str = ""


@dataclass
class MetricsReport:
    method: str = "LeCoT"
    precision: float = 0.0
    recall: float = 0.0
    f_score: float = 0.0
    map5: float = 0.0
    map20: float = 0.0
    map5_binned: float = 0.0
    map20_binned: float = 0.0
    ms_per_pair: float = 0.0
    failures: int = 0
    pairs: list = field(default_factory=list)

    def aggregate_row(self) -> dict:
        d = asdict(self)
        d.pop("pairs")
        return d


FAILED_ERR = 180.0


def _pose_errors(E_hat, support, pair) -> tuple[float, float]:
    pose = geometry.decompose_essential(E_hat, support)
    return geometry.pose_error(pose, pair.pose)


def _aggregate(method, records) -> MetricsReport:
    rep = MetricsReport(method=method, pairs=records)
    if not records:
        return rep
    rep.precision = float(np.mean([r.precision for r in records]))
    rep.recall = float(np.mean([r.recall for r in records]))
    rep.f_score = float(np.mean([r.f_score for r in records]))
    errs = [(r.rot_err, r.trans_err) for r in records]
    rep.map5, rep.map20 = pose_map(errs, 5.0), pose_map(errs, 20.0)
    rep.map5_binned, rep.map20_binned = pose_map_binned(errs, 5.0), pose_map_binned(errs, 20.0)
    rep.ms_per_pair = float(np.mean([r.ms for r in records]))
    rep.failures = sum(not r.ok for r in records)
    return rep


def evaluate(model: LeCoT, pairs, eps_verify: float = geometry.DEFAULT_EPS,
             oracle: bool = False, method: str = "LeCoT", strict: bool = False) -> MetricsReport:
    """Per pair: forward, P/R/F of the verified set, pose error of E_hat.

    The report's f_score is the mean of per-pair F values.  Failed pairs
    count as 180-degree pose errors.
    """
    model.eval()
    records = []
    for i, pair in enumerate(pairs):
        t0 = time.perf_counter()
        try:
            res = lecot_forward(pair.corrs, model, eps_verify,
                                oracle_logits=pair.labels.astype(np.float64) if oracle else None)
            ms = 1000 * (time.perf_counter() - t0)
            support = pair.corrs[res.P.astype(bool)] if res.P.any() else res.C2
            p, r, f = prf(res.P, pair.labels)
            rot, tr = _pose_errors(res.E_hat, support, pair)
            records.append(PairRecord(i, rot, tr, p, r, f, ms))
        except (geometry.GeometryError, ValueError) as exc:
            if strict:
                raise
            ms = 1000 * (time.perf_counter() - t0)
            records.append(PairRecord(i, FAILED_ERR, FAILED_ERR, 0.0, 0.0, 0.0, ms, False, str(exc)))
    return _aggregate(method, records)


def evaluate_ransac(pairs, iterations: int = 1000, eps_inlier: float = geometry.DEFAULT_EPS,
                    seed: int = 0, strict: bool = False) -> MetricsReport:
    records = []
    for i, pair in enumerate(pairs):
        t0 = time.perf_counter()
        try:
            res = ransac_baseline(pair.corrs, iterations, eps_inlier, np.random.default_rng([seed, i]))
            ms = 1000 * (time.perf_counter() - t0)
            p, r, f = prf(res.mask, pair.labels)
            support = pair.corrs[res.mask.astype(bool)]
            rot, tr = _pose_errors(res.E, support, pair)
            records.append(PairRecord(i, rot, tr, p, r, f, ms))
        except geometry.GeometryError as exc:
            if strict:
                raise
            ms = 1000 * (time.perf_counter() - t0)
            records.append(PairRecord(i, FAILED_ERR, FAILED_ERR, 0.0, 0.0, 0.0, ms, False, str(exc)))
    return _aggregate("RANSAC", records)


# --- report files ----------------------------------------------------------------

PAIR_FIELDS = ("pair", "rot_err", "trans_err", "precision", "recall", "f_score", "ms", "ok", "error")
AGG_FIELDS = ("method", "map5", "map20", "map5_binned", "map20_binned",
              "precision", "recall", "f_score", "ms_per_pair", "failures")
# one header for both row kinds; P/R/F columns are shared
CSV_FIELDS = ("kind", "method") + PAIR_FIELDS + tuple(k for k in AGG_FIELDS[1:] if k not in PAIR_FIELDS)


def _fmt(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def render_report(reports, fmt: str = "text") -> str:
    """Serialize one or more reports; every report contributes its pair rows
    and one aggregate row."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    if fmt == "text":
        head = ("method", "mAP5", "mAP20", "mAP5(bin)", "mAP20(bin)", "P", "R", "F", "ms/pair")
        lines = ["  ".join(f"{h:>10}" for h in head)]
        for r in reports:
            vals = [r.method] + [f"{100 * x:.2f}" for x in (r.map5, r.map20, r.map5_binned, r.map20_binned,
                                                             r.precision, r.recall, r.f_score)]
            vals.append(f"{r.ms_per_pair:.2f}")
            lines.append("  ".join(f"{v:>10}" for v in vals))
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in reports:
            for rec in r.pairs:
                row = {"kind": "pair", "method": r.method, **asdict(rec)}
                w.writerow([_fmt(row[k]) if k in row else "" for k in CSV_FIELDS])
            row = {"kind": "aggregate", **r.aggregate_row()}
            w.writerow([_fmt(row[k]) if k in row else "" for k in CSV_FIELDS])
        return buf.getvalue()
    if fmt in ("jsonl", "json-lines"):
        lines = []
        for r in reports:
            for rec in r.pairs:
                lines.append(json.dumps({"kind": "pair", "method": r.method, **asdict(rec)}, sort_keys=True))
            lines.append(json.dumps({"kind": "aggregate", **r.aggregate_row()}, sort_keys=True))
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(reports, path, fmt: str = "text") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(render_report(reports, fmt))


def parse_csv_report(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
