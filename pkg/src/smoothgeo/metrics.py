"""Attribution similarity metrics and log-AUC aggregation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .attribution import DegenerateAttributionError, normalize_map

METRICS = ("k_in", "cor", "cdl", "cosd")
DEFAULT_EPS_GRID = (2.0, 4.0, 8.0, 16.0)


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class GridGeometry:
    """Pixel layout of a flat attribution; ``height=None`` means a 1-D index."""

    height: int | None = None
    width: int | None = None

    @classmethod
    def flat(cls) -> GridGeometry:
        return cls()

    @classmethod
    def square(cls, d: int) -> GridGeometry:
        side = int(round(np.sqrt(d)))
        if side * side != d:
            raise ValueError(f"{d} is not a square number")
        return cls(side, side)

    def coords(self, d: int) -> np.ndarray:
        """(d, 2) array of (row, col); a flat geometry uses (0, index)."""
        if self.height is None:
            return np.stack([np.zeros(d), np.arange(d, dtype=np.float64)], axis=1)
        if self.height * self.width != d:
            raise ValueError(f"grid {self.height}x{self.width} does not match d={d}")
        rows, cols = np.divmod(np.arange(d), self.width)
        return np.stack([rows, cols], axis=1).astype(np.float64)


def _top_k(n: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values keeps the smaller index first on ties
    return np.argsort(-n, kind="stable")[:k]


def topk_intersection(z, z_adv, k: int) -> float:
    """Mass of n(z_adv) on the top-k features of n(z)."""
    n, n_adv = normalize_map(z), normalize_map(z_adv)
    if not 1 <= k <= n.size:
        raise ValueError(f"k={k} outside [1, {n.size}]")
    return float(n_adv[_top_k(n, k)].sum())


def spearman_correlation(z, z_adv, absolute: bool = True) -> float:
    """Pearson correlation of average-tie ranks.

    Ranks are taken on n(z) by default; ``absolute=False`` ranks the raw
    signed scores instead.
    """
    a = np.asarray(z, dtype=np.float64)
    b = np.asarray(z_adv, dtype=np.float64)
    if a.size < 2 or a.size != b.size:
        raise ValueError("need two maps of equal length >= 2")
    if absolute:
        a, b = normalize_map(a), normalize_map(b)
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0:
        raise UndefinedCorrelationError("undefined correlation: a map has constant ranks")
    return float(np.clip(np.sum(ra * rb) / denom, -1.0, 1.0))


def mass_center(z, geom: GridGeometry = GridGeometry()) -> np.ndarray:
    """sum_i n(z)_i coord(i), in (row, col) units."""
    n = normalize_map(z)
    return n @ geom.coords(n.size)


def center_dislocation(z, z_adv, geom: GridGeometry = GridGeometry()) -> float:
    return float(np.linalg.norm(mass_center(z, geom) - mass_center(z_adv, geom)))


def cosine_distance(z, z_adv) -> float:
    """1 - cos(z, z_adv) on raw scores."""
    a = np.asarray(z, dtype=np.float64)
    b = np.asarray(z_adv, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateAttributionError("degenerate attribution: zero vector in cosine distance")
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def log_auc(points) -> float:
    """Trapezoidal area of value against log2(eps).

    ``points`` is an iterable of (eps, value) pairs; they are sorted by eps.
    """
    pts = sorted((float(e), float(v)) for e, v in points)
    if len(pts) < 2:
        raise ValueError("log-AUC needs at least two points")
    eps = np.array([e for e, _ in pts])
    if np.any(eps <= 0):
        raise ValueError("eps values must be positive")
    if np.any(np.diff(eps) == 0):
        raise ValueError("duplicate eps in log-AUC points")
    vals = np.array([v for _, v in pts])
    x = np.log2(eps)
    return float(np.sum(np.diff(x) * (vals[1:] + vals[:-1]) / 2.0))


def compare_maps(z, z_adv, k: int, geom: GridGeometry = GridGeometry()) -> dict:
    """All four metrics for one (original, perturbed) pair."""
    return {
        "k_in": topk_intersection(z, z_adv, k),
        "cor": spearman_correlation(z, z_adv),
        "cdl": center_dislocation(z, z_adv, geom),
        "cosd": cosine_distance(z, z_adv),
    }


@dataclass
class MetricReport:
    """Per-eps mean metrics over a set of images, with log-AUC aggregates."""

    rows: list[dict]
    k: int
    image_count: int
    label: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)  # per-eps bookkeeping, JSON only

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r["eps"])

    @classmethod
    def from_pairs(cls, per_eps: dict, k: int, label: dict | None = None) -> MetricReport:
        """``per_eps`` maps eps to a list of metric dicts (one per image)."""
        rows, counts = [], set()
        for eps, items in per_eps.items():
            counts.add(len(items))
            row = {"eps": float(eps)}
            for m in METRICS:
                row[m] = float(np.mean([it[m] for it in items])) if items else float("nan")
            rows.append(row)
        return cls(rows, k, max(counts) if counts else 0, dict(label or {}))

    @property
    def auc(self) -> dict | None:
        if len(self.rows) < 2:
            return None
        return {m: log_auc((r["eps"], r[m]) for r in self.rows) for m in METRICS}

    def to_dict(self) -> dict:
        out = {"label": self.label, "k": self.k, "image_count": self.image_count, "rows": self.rows}
        if self.auc is not None:
            out["auc"] = self.auc
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_rows(self) -> list[list[str]]:
        label = [str(self.label[key]) for key in sorted(self.label)]
        out = [label + [repr(r["eps"])] + [repr(r[m]) for m in METRICS] for r in self.rows]
        auc = self.auc
        if auc is not None:
            out.append(label + ["auc"] + [repr(auc[m]) for m in METRICS])
        return out

    def csv_header(self) -> list[str]:
        return sorted(self.label) + ["eps"] + list(METRICS)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerows(self.csv_rows())
        return buf.getvalue()
