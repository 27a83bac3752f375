"""Evaluation metrics: fidelity, utilisation, redundancy, spatial analysis, recovery."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .data import ActivationStore, GridMeta
from .errors import (
    ConfigError,
    DimensionError,
    EmptyInputError,
    InvalidMapError,
    RegionError,
    UndefinedVarianceError,
)
from .model import SaeParams, decode, encode
from .spline import shape_profile

log = logging.getLogger(__name__)

REDUNDANCY_THRESHOLD = 0.3
DEFAULT_BLOCKS = None  # no grid: one series point per token


@dataclass(frozen=True)
class RegionSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not -90.0 <= self.lat_min < self.lat_max <= 90.0:
            raise RegionError(f"bad latitude range [{self.lat_min}, {self.lat_max}]")

    def contains(self, lat, lon) -> np.ndarray:
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        in_lat = (lat >= self.lat_min) & (lat <= self.lat_max)
        width = self.lon_max - self.lon_min
        if width >= 360.0:
            return in_lat & np.ones_like(lon, dtype=bool)
        width %= 360.0
        off = (lon - self.lon_min) % 360.0
        return in_lat & (off <= width + 1e-9)


# the averaging box used for the European redundancy series
EUROPE = RegionSpec(36.0, 72.0, -10.0, 30.0)


def explained_variance(X, X_hat) -> float:
    """100 * (1 - ||X - X_hat||_F^2 / ||X - mean(X)||_F^2)."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise DimensionError(f"shape mismatch {X.shape} vs {X_hat.shape}")
    if X.ndim != 2 or X.shape[0] < 2:
        raise EmptyInputError("need at least two rows")
    denom = float(np.sum((X - X.mean(axis=0)) ** 2))
    if denom == 0.0:
        raise UndefinedVarianceError("X has zero variance")
    return 100.0 * (1.0 - float(np.sum((X - X_hat) ** 2)) / denom)


def utilization(alive, M: int) -> tuple[float, float]:
    """(utilisation %, dead %) from exact integer ratios."""
    a = len(alive)
    if any(not 0 <= int(j) < M for j in alive):
        raise ConfigError("alive set contains indices outside 0..M-1")
    util = Fraction(100 * a, M)
    return float(util), float(100 - util)


def _chunks(X, size=65536):
    for i in range(0, X.shape[0], size):
        yield X[i : i + size]


def latents(params: SaeParams, store, features=None, chunk=65536) -> np.ndarray:
    """z for every token (optionally a subset of latents), computed in chunks."""
    X = store.X if isinstance(store, ActivationStore) else np.asarray(store)
    out = []
    for part in _chunks(X, chunk):
        _, z = encode(params, part)
        out.append(z if features is None else z[:, features])
    return np.concatenate(out) if out else np.zeros((0, params.M))


def mean_l1(params: SaeParams, store) -> float:
    X = store.X if isinstance(store, ActivationStore) else np.asarray(store)
    if X.shape[0] == 0:
        raise EmptyInputError("empty store")
    total = 0.0
    for part in _chunks(X):
        _, z = encode(params, part)
        total += float(np.abs(z).sum())
    return total / X.shape[0]


def reconstruction_ev(params: SaeParams, store) -> float:
    X = store.X if isinstance(store, ActivationStore) else np.asarray(store)
    X = X.astype(np.float64)
    resid = 0.0
    for part in _chunks(X):
        _, z = encode(params, part)
        resid += float(np.sum((part - decode(params, z)) ** 2))
    denom = float(np.sum((X - X.mean(axis=0)) ** 2))
    if denom == 0.0:
        raise UndefinedVarianceError("X has zero variance")
    return 100.0 * (1.0 - resid / denom)


def region_weights(meta: GridMeta, region: RegionSpec | None) -> np.ndarray:
    """cos(latitude) weights over the H*W cells, zero outside ``region``, summing to 1."""
    lat, lon = np.meshgrid(meta.lats(), meta.lons(), indexing="ij")
    w = np.cos(np.deg2rad(lat))
    w = np.where(np.abs(lat) >= 90.0, 0.0, w)
    if region is not None:
        w = np.where(region.contains(lat, lon), w, 0.0)
    total = w.sum()
    if not total > 0:
        raise RegionError("region does not intersect the grid (or has zero area weight)")
    return (w / total).ravel()


def _need_meta(store) -> GridMeta:
    meta = getattr(store, "meta", None)
    if meta is None:
        raise RegionError("store has no grid metadata")
    return meta


def region_mean_series(store: ActivationStore, z, region: RegionSpec | None) -> np.ndarray:
    """Per-day area-weighted mean of one feature's activations inside ``region``."""
    meta = _need_meta(store)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != meta.n_days * meta.cells:
        raise DimensionError("feature series length does not match the grid")
    w = region_weights(meta, region)
    return z.reshape(meta.n_days, meta.cells, *z.shape[1:]).transpose(0, *range(2, z.ndim + 1), 1) @ w


def feature_series(params: SaeParams, store: ActivationStore, features, region: RegionSpec | None = None,
                   n_blocks: int | None = DEFAULT_BLOCKS) -> np.ndarray:
    """(n_features, T) activation series used for redundancy.

    With grid metadata each series is the per-day area-weighted regional mean.
    Without it there is no time axis beyond token order: the series is the raw
    per-token activation, or ``n_blocks`` contiguous block means if given.
    """
    features = np.asarray(sorted(features), dtype=np.intp)
    X = store.X
    if store.meta is not None:
        meta = store.meta
        w = region_weights(meta, region)
        per = meta.cells
        days_per_chunk = max(1, 65536 // per)
        out = []
        for d0 in range(0, meta.n_days, days_per_chunk):
            d1 = min(meta.n_days, d0 + days_per_chunk)
            _, z = encode(params, X[d0 * per : d1 * per])
            z = z[:, features].reshape(d1 - d0, per, features.size)
            out.append(np.einsum("dcf,c->fd", z, w))
        return np.concatenate(out, axis=1)
    z = latents(params, store, features)
    if n_blocks is None:
        return np.ascontiguousarray(z.T)
    bounds = np.linspace(0, store.N, min(n_blocks, store.N) + 1).astype(int)
    return np.stack([z[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])], axis=1)


@dataclass
class Redundancy:
    median_abs_r: float
    mean_abs_r: float
    frac_abs_r_gt: float  # percent
    n_pairs: int
    n_excluded: int
    abs_r: np.ndarray  # (F, F), NaN rows for excluded series


def redundancy(series, threshold: float = REDUNDANCY_THRESHOLD) -> Redundancy:
    """Pearson |r| over all pairs of non-constant feature series (rows)."""
    S = np.asarray(series, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 2 or S.shape[1] < 3:
        raise EmptyInputError("need at least 2 series of at least 3 points")
    ok = np.ptp(S, axis=1) > 0
    n_excluded = int((~ok).sum())
    if n_excluded:
        log.info("redundancy: excluded %d zero-variance series", n_excluded)
    R = np.full((S.shape[0], S.shape[0]), np.nan)
    if ok.sum() < 2:
        return Redundancy(float("nan"), float("nan"), float("nan"), 0, n_excluded, R)
    sub = np.abs(np.corrcoef(S[ok]))
    R[np.ix_(ok, ok)] = sub
    iu = np.triu_indices(sub.shape[0], k=1)
    pairs = np.clip(sub[iu], 0.0, 1.0)
    return Redundancy(float(np.median(pairs)), float(pairs.mean()),
                      100.0 * float(np.mean(pairs > threshold)), int(pairs.size), n_excluded, R)


def cross_feature_correlation(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 3:
        raise DimensionError("series must be 1-D, equal length, and at least 3 long")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedVarianceError("correlation undefined for a constant series")
    return float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))


def day_maps(store: ActivationStore, z) -> np.ndarray:
    meta = _need_meta(store)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (meta.n_days * meta.cells,):
        raise DimensionError("feature series does not match the grid")
    return z.reshape(meta.n_days, meta.H, meta.W)


def condition_difference_map(store: ActivationStore, z, hot_days, cold_days) -> np.ndarray:
    """Mean map over ``hot_days`` minus mean map over ``cold_days``."""
    hot = sorted(set(int(d) for d in hot_days))
    cold = sorted(set(int(d) for d in cold_days))
    if not hot or not cold:
        raise ConfigError("both day sets must be non-empty")
    if set(hot) & set(cold):
        raise ConfigError("hot and cold day sets overlap")
    maps = day_maps(store, z)
    n = maps.shape[0]
    if hot[-1] >= n or cold[-1] >= n or hot[0] < 0 or cold[0] < 0:
        raise ConfigError(f"day index outside 0..{n - 1}")
    return maps[hot].mean(axis=0) - maps[cold].mean(axis=0)


def great_circle_deg(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dl = np.deg2rad(lon2 - lon1)
    num = np.hypot(np.cos(p2) * np.sin(dl), np.cos(p1) * np.sin(p2) - np.sin(p1) * np.cos(p2) * np.cos(dl))
    den = np.sin(p1) * np.sin(p2) + np.cos(p1) * np.cos(p2) * np.cos(dl)
    return float(np.rad2deg(np.arctan2(num, den)))


def peak_distance(amap, meta: GridMeta, center) -> float:
    """Great-circle degrees from the map's argmax cell centre to ``center`` (lat, lon).

    Ties go to the smallest row-major index; NaN cells are ignored.
    """
    amap = np.asarray(amap, dtype=np.float64)
    if amap.shape != (meta.H, meta.W):
        raise DimensionError(f"map shape {amap.shape} does not match grid {(meta.H, meta.W)}")
    if np.all(np.isnan(amap)):
        raise InvalidMapError("map is all NaN")
    k = int(np.nanargmax(amap))
    i, j = divmod(k, meta.W)
    return great_circle_deg(meta.lats()[i], meta.lons()[j], center[0], center[1])


def recovery_score(W_dec, D) -> tuple[float, list]:
    """Mean over true directions of the best |cosine| with any decoder column.

    Returns the mean and, per true direction, the index of its best column.
    """
    W = np.asarray(W_dec, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if W.shape[0] != D.shape[1]:
        raise DimensionError("decoder and dictionary disagree on d")
    Wn = W / np.linalg.norm(W, axis=0)
    Dn = D / np.linalg.norm(D, axis=1, keepdims=True)
    # elementwise product + axis reduction keeps each cosine independent of column order
    cos = np.abs((Dn[:, :, None] * Wn[None, :, :]).sum(axis=1))
    best = cos.argmax(axis=1)
    return float(cos.max(axis=1).mean()), best.tolist()


@dataclass
class MetricsReport:
    explained_variance: float
    feature_utilization: float
    dead_rate: float
    mean_l1: float
    median_abs_r: float | None
    mean_abs_r: float | None
    frac_abs_r_gt: float | None
    n_alive: int
    n_pairs: int
    shape_convex: int | None = None
    shape_concave: int | None = None
    shape_near_linear: int | None = None
    shape_median_score: float | None = None
    recovery_score: float | None = None

    def to_dict(self) -> dict:
        return {k: _clean(v) for k, v in asdict(self).items()}


# row labels match the feature-quality table
REPORT_ROWS = [
    ("explained_variance", "Explained Variance (%)"),
    ("feature_utilization", "Feature Utilisation (%)"),
    ("dead_rate", "Dead Feature Rate (%)"),
    ("mean_l1", "Mean l1 Norm"),
    ("median_abs_r", "Median inter-feature |r|"),
    ("frac_abs_r_gt", "Pairs |r|>0.3 (%)"),
    ("mean_abs_r", "Mean inter-feature |r|"),
    ("n_alive", "Alive features"),
    ("n_pairs", "Alive pairs"),
    ("shape_convex", "Convex shapes"),
    ("shape_concave", "Concave shapes"),
    ("shape_near_linear", "Near-linear shapes"),
    ("shape_median_score", "Median nonlinearity score"),
    ("recovery_score", "Recovery score"),
]


def _clean(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, np.generic):
        return v.item()
    return v


def evaluate(params: SaeParams, store: ActivationStore, alive, *, threshold: float = REDUNDANCY_THRESHOLD,
             region: RegionSpec | None = None, n_blocks: int | None = DEFAULT_BLOCKS, truth_D=None) -> MetricsReport:
    """All feature-quality metrics for one model on one evaluation store."""
    if store.d != params.d:
        raise DimensionError(f"store has d={store.d}, model has d={params.d}")
    util, dead = utilization(alive, params.M)
    med = mean = frac = None
    n_pairs = 0
    if len(alive) >= 2:
        red = redundancy(feature_series(params, store, alive, region, n_blocks), threshold)
        med, mean, frac, n_pairs = red.median_abs_r, red.mean_abs_r, red.frac_abs_r_gt, red.n_pairs
    report = MetricsReport(
        reconstruction_ev(params, store), util, dead, mean_l1(params, store), med, mean, frac,
        len(alive), n_pairs,
    )
    if params.mode == "kan":
        profiles = [shape_profile(params.bank, j) for j in sorted(alive)]
        classes = [pr.shape_class for pr in profiles]
        report.shape_convex = classes.count("convex")
        report.shape_concave = classes.count("concave")
        report.shape_near_linear = classes.count("near-linear")
        report.shape_median_score = float(np.median([pr.nonlinearity_score for pr in profiles])) if profiles else None
    if truth_D is not None:
        report.recovery_score = recovery_score(params.W_dec, truth_D)[0]
    return report


def reports_json(reports: dict) -> str:
    return json.dumps({name: r.to_dict() for name, r in reports.items()}, indent=2, sort_keys=True) + "\n"


def reports_csv(reports: dict) -> str:
    """Long form: one row per metric, one column per model."""
    names = list(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "label", *names])
    for key, label in REPORT_ROWS:
        row = []
        for n in names:
            v = _clean(getattr(reports[n], key))
            row.append("" if v is None else repr(v) if isinstance(v, float) else v)
        w.writerow([key, label, *row])
    return buf.getvalue()
