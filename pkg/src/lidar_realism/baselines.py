"""Reconstruction-error baselines: Chamfer distance, image MAE/MSE, Cov/MMD."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud, RangeImage


def _pts(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def chamfer(pred, target) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets (meters)."""
    p, t = _pts(pred), _pts(target)
    if len(p) == 0 or len(t) == 0:
        raise ValueError("chamfer distance needs two non-empty clouds")
    d_pt, _ = cKDTree(t).query(p, k=1)
    d_tp, _ = cKDTree(p).query(t, k=1)
    return float(d_pt.mean() + d_tp.mean())


def image_errors(pred: RangeImage, target: RangeImage) -> tuple[float, float]:
    """(MAE, MSE) over the cells valid in both images."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    both = pred.valid & target.valid
    n = int(np.count_nonzero(both))
    if n == 0:
        raise ValueError("no jointly valid cells")
    diff = pred.depth[both] - target.depth[both]
    return float(np.abs(diff).mean()), float((diff * diff).mean())


def paired_cov_mmd(pred_set, target_set) -> tuple[float, float]:
    """Coverage and MMD for index-paired sets.

    When each prediction's best match is its own target, coverage is 1 and
    MMD reduces to the mean paired Chamfer distance.
    """
    if len(pred_set) != len(target_set):
        raise ValueError("prediction and target lists differ in length")
    if len(pred_set) == 0:
        raise ValueError("empty set list")
    return 1.0, float(np.mean([chamfer(p, t) for p, t in zip(pred_set, target_set)]))


REPORT_COLUMNS = ["scene_id", "method", "cd_m", "mae_m", "mse_m2"]


@dataclass
class BaselineReport:
    rows: list = field(default_factory=list)  # (scene_id, method, cd, mae, mse)

    def add(self, scene_id, method, cd, mae, mse):
        self.rows.append((str(scene_id), str(method), float(cd), float(mae), float(mse)))

    def methods(self):
        return list(dict.fromkeys(r[1] for r in self.rows))

    def aggregate(self) -> dict:
        """method -> {"mean": (cd, mae, mse), "std": (...)}"""
        out = {}
        for m in self.methods():
            vals = np.array([r[2:] for r in self.rows if r[1] == m])
            out[m] = {"mean": tuple(vals.mean(axis=0)), "std": tuple(vals.std(axis=0))}
        return out

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r[0], r[1], *(repr(v) for v in r[2:])])
            for m, agg in self.aggregate().items():
                for kind in ("mean", "std"):
                    w.writerow([f"__{kind}__", m, *(repr(float(v)) for v in agg[kind])])
        tmp.replace(path)

    @classmethod
    def read(cls, path) -> "BaselineReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["scene_id"].startswith("__"):
                    continue
                rep.add(row["scene_id"], row["method"], row["cd_m"], row["mae_m"], row["mse_m2"])
        return rep


def evaluate_pairs(pairs, method="pred") -> BaselineReport:
    """``pairs`` yields (scene_id, pred RangeImage, target RangeImage)."""
    from .geom import backproject

    rep = BaselineReport()
    for sid, pred, target in pairs:
        mae, mse = image_errors(pred, target)
        rep.add(sid, method, chamfer(backproject(pred), backproject(target)), mae, mse)
    return rep
