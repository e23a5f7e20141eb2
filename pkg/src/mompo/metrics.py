"""Pareto-front extraction and hypervolume computation.

Maximization convention throughout: penalty objectives are stored as negative
returns so "larger is better" uniformly. Hypervolume is exact in 2-D (sorted
disjoint slabs) and 3-D (slicing over the third coordinate); for N >= 4 a
Monte-Carlo fallback is used.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "dominates",
    "pareto_filter",
    "hypervolume",
    "hypervolume_monte_carlo",
    "ParetoSet",
]


def dominates(a, b) -> bool:
    """True iff a >= b elementwise and a > b in at least one coordinate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_filter(points) -> list:
    """Nondominated subset of `points`; duplicates are kept once."""
    pts = [tuple(float(v) for v in p) for p in points]
    unique = list(dict.fromkeys(pts))
    arr = np.asarray(unique, dtype=np.float64)
    keep = []
    for i, p in enumerate(arr):
        others = np.delete(arr, i, axis=0)
        if others.size == 0:
            keep.append(unique[i])
            continue
        dominated = np.any(np.all(others >= p, axis=1) & np.any(others > p, axis=1))
        if not dominated:
            keep.append(unique[i])
    return keep


def _hv_2d(points: np.ndarray, ref: np.ndarray) -> float:
    # points already nondominated and strictly above ref; x descending means
    # y ascending, so the dominated region splits into disjoint slabs
    pts = points[np.argsort(-points[:, 0])]
    hv = 0.0
    for i, (x, y) in enumerate(pts):
        x_next = pts[i + 1, 0] if i + 1 < len(pts) else ref[0]
        hv += (x - x_next) * (y - ref[1])
    return hv


def _hv_3d(points: np.ndarray, ref: np.ndarray) -> float:
    zs = np.unique(points[:, 2])[::-1]  # descending
    hv = 0.0
    for i, z in enumerate(zs):
        z_next = zs[i + 1] if i + 1 < len(zs) else ref[2]
        layer = points[points[:, 2] >= z][:, :2]
        layer = np.asarray(pareto_filter(layer), dtype=np.float64)
        hv += (z - z_next) * _hv_2d(layer, ref[:2])
    return hv


def hypervolume_monte_carlo(points, reference, n_samples: int = 10**6, rng=None) -> float:
    """Monte-Carlo hypervolume estimate over the reference-to-max bounding box."""
    pts = np.asarray(points, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    upper = pts.max(axis=0)
    box = np.prod(upper - ref)
    if box <= 0:
        return 0.0
    samples = rng.uniform(ref, upper, size=(n_samples, ref.shape[0]))
    covered = np.zeros(n_samples, dtype=bool)
    for p in pts:
        covered |= np.all(samples <= p, axis=1)
    return float(box * covered.mean())


def hypervolume(points, reference, mc_samples: int = 200_000, rng=None) -> float:
    """Hypervolume of the region dominating `reference` and dominated by at
    least one point. Points that do not dominate the reference are dropped
    with a warning; if none remain the value is 0 (with a warning)."""
    ref = np.asarray(reference, dtype=np.float64)
    pts = np.asarray([tuple(p) for p in points], dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != ref.shape[0]:
        raise ValueError("points and reference dimensions disagree")
    above = np.all(pts > ref, axis=1)
    if not np.all(above):
        warnings.warn(f"dropping {int((~above).sum())} point(s) that do not dominate the reference")
        pts = pts[above]
    if pts.shape[0] == 0:
        warnings.warn("no point dominates the reference; hypervolume is 0")
        return 0.0
    pts = np.asarray(pareto_filter(pts), dtype=np.float64)
    dim = ref.shape[0]
    if dim == 1:
        return float(pts.max() - ref[0])
    if dim == 2:
        return float(_hv_2d(pts, ref))
    if dim == 3:
        return float(_hv_3d(pts, ref))
    warnings.warn(f"exact hypervolume unsupported for N={dim}; using Monte-Carlo fallback")
    return hypervolume_monte_carlo(pts, ref, n_samples=mc_samples, rng=rng)


@dataclass
class ParetoSet:
    """Labelled return vectors plus the reference point used for hypervolume."""

    entries: list = field(default_factory=list)  # [(policy_id, return vector)]
    reference: tuple[float, ...] | None = None

    def add(self, policy_id: str, returns) -> None:
        self.entries.append((str(policy_id), tuple(float(v) for v in returns)))

    def nondominated_flags(self) -> list[bool]:
        front = set(map(tuple, pareto_filter([r for _, r in self.entries]))) if self.entries else set()
        return [tuple(r) in front for _, r in self.entries]

    def front(self) -> list:
        return pareto_filter([r for _, r in self.entries])

    def hypervolume(self) -> float:
        if self.reference is None:
            raise ValueError("no reference point configured")
        if not self.entries:
            return 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return hypervolume([r for _, r in self.entries], self.reference)

    def write_csv(self, path) -> None:
        """pareto.csv: one row per policy — id, return per objective, flag."""
        flags = self.nondominated_flags()
        n = len(self.entries[0][1]) if self.entries else 0
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id"] + [f"return_{k}" for k in range(n)] + ["nondominated"])
            for (pid, ret), flag in zip(self.entries, flags):
                writer.writerow([pid] + list(ret) + [int(flag)])

    def write_summary(self, path, extra: dict | None = None) -> dict:
        summary = {
            "hypervolume": self.hypervolume() if self.reference is not None else None,
            "reference": list(self.reference) if self.reference is not None else None,
            "num_policies": len(self.entries),
            "front": [list(p) for p in self.front()],
        }
        summary.update(extra or {})
        with open(path, "w") as f:
            json.dump(summary, f, indent=2)
        return summary
