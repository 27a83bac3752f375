"""Feature steering by decoder-direction injection, and dose-response fits."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .data import GridMeta
from .errors import ConfigError, DimensionError, FitError, RegionError
from .model import SaeParams

DEFAULT_ALPHAS = (0.0, 0.5, 1.0, 2.0)
ZERO_RESPONSE_RTOL = 1e-12


def _column(params: SaeParams, j: int) -> np.ndarray:
    if not 0 <= int(j) < params.M:
        raise IndexError(f"feature {j} out of range for M={params.M}")
    return params.W_dec[:, int(j)]


def steer(x, params: SaeParams, j: int, alpha: float) -> np.ndarray:
    """x + alpha * W_dec[:, j]; works on one token or a batch, never in place."""
    col = _column(params, j)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise DimensionError(f"token has d={x.shape[-1]}, model has d={params.d}")
    return x + alpha * col


class DownstreamMap:
    """Deterministic stand-in for the rest of the forecast model.

    ``__call__(X, cells=None)`` maps an (n, d) batch to n scalars. Per-cell maps
    need the grid cell index of every token.
    """

    per_cell = False

    def __call__(self, X, cells=None) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


@dataclass
class LinearReadout(DownstreamMap):
    """r . x + c, with r either (d,) or (cells, d) for a per-cell readout."""

    r: np.ndarray
    c: float | np.ndarray = 0.0

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        self.per_cell = self.r.ndim == 2

    def _rows(self, X, cells):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.r.shape[-1]:
            raise DimensionError(f"readout expects d={self.r.shape[-1]}, got {X.shape[1]}")
        if not self.per_cell:
            return X, self.r, self.c
        if cells is None:
            raise ConfigError("per-cell readout needs cell indices")
        cells = np.asarray(cells, dtype=np.intp)
        c = self.c if np.ndim(self.c) == 0 else np.asarray(self.c)[cells]
        return X, self.r[cells], c

    def __call__(self, X, cells=None) -> np.ndarray:
        X, r, c = self._rows(X, cells)
        return (X * r).sum(axis=-1) + c


@dataclass
class QuadraticReadout(LinearReadout):
    """(r . x)^2 + c; a toy nonlinear downstream."""

    def __call__(self, X, cells=None) -> np.ndarray:
        X, r, c = self._rows(X, cells)
        return (X * r).sum(axis=-1) ** 2 + c


def make_downstream(spec: dict, d: int, seed: int, meta: GridMeta | None = None, region=None) -> DownstreamMap:
    """Seeded readout from a small spec: {kind: linear|quadratic, per_cell: bool, offset: float}.

    With ``region`` (a metrics.RegionSpec) a per-cell readout is zero outside it.
    """
    kind = spec.get("kind", "linear")
    classes = {"linear": LinearReadout, "quadratic": QuadraticReadout}
    if kind not in classes:
        raise ConfigError(f"unknown downstream kind {kind!r}")
    per_cell = bool(spec.get("per_cell", False)) or region is not None
    rng = rngmod.stream(seed, "downstream")
    if per_cell:
        if meta is None:
            raise RegionError("per-cell downstream needs grid metadata")
        r = rng.normal(size=(meta.cells, d)) / np.sqrt(d)
        if region is not None:
            lat, lon = np.meshgrid(meta.lats(), meta.lons(), indexing="ij")
            inside = region.contains(lat, lon).ravel()
            if not inside.any():
                raise RegionError("downstream region does not intersect the grid")
            r[~inside] = 0.0
    else:
        r = rng.normal(size=d) / np.sqrt(d)
    return classes[kind](r, float(spec.get("offset", 0.0)))


@dataclass
class DoseResponse:
    alphas: list
    responses: list
    slope: float
    intercept: float
    r_squared: float
    zero_response: bool = False
    feature: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"feature": self.feature, "alphas": list(self.alphas), "responses": list(self.responses),
                "slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "zero_response": self.zero_response, **self.extra}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "response"])
        for a, r in zip(self.alphas, self.responses):
            w.writerow([repr(float(a)), repr(float(r))])
        return buf.getvalue()


def ols_fit(x, y) -> tuple[float, float, float]:
    """Slope, intercept and r^2 of the least-squares line through (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise FitError("alphas have zero variance")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_tot = float(np.sum((y - ym) ** 2))
    ss_res = float(np.sum((y - (intercept + slope * x)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return slope, intercept, r2


def _cells_for(n_tokens: int, meta: GridMeta | None):
    if meta is None:
        return None
    return np.arange(n_tokens) % meta.cells


def dose_response(down: DownstreamMap, params: SaeParams, j: int, alphas, X_base, meta: GridMeta | None = None,
                  chunk: int = 65536) -> DoseResponse:
    """Mean downstream change vs alpha over ``X_base`` and its OLS line.

    Responses with every |delta| below 1e-12 times the baseline output scale
    are reported as a zero-response fit: slope 0, r^2 = 1, flag set.
    """
    alphas = [float(a) for a in alphas]
    if len(alphas) < 3 or len(set(alphas)) < 3:
        raise FitError("need at least 3 distinct alphas")
    if 0.0 not in alphas:
        raise FitError("alphas must include 0")
    X = np.atleast_2d(np.asarray(X_base, dtype=np.float64))
    if X.shape[0] == 0:
        raise FitError("no base tokens")
    _column(params, j)
    if down.per_cell and meta is None:
        raise RegionError("per-cell downstream needs grid metadata")
    cells = _cells_for(X.shape[0], meta if down.per_cell else None)
    sums = np.zeros(len(alphas))
    scale = 0.0
    for i in range(0, X.shape[0], chunk):
        part = X[i : i + chunk]
        cp = None if cells is None else cells[i : i + chunk]
        base = down(part, cp)
        scale += float(np.abs(base).sum())
        for k, a in enumerate(alphas):
            sums[k] += float(np.sum(down(steer(part, params, j, a), cp) - base))
    deltas = sums / X.shape[0]
    scale = max(1.0, scale / X.shape[0])
    if np.all(np.abs(deltas) <= ZERO_RESPONSE_RTOL * scale):
        return DoseResponse(alphas, deltas.tolist(), 0.0, 0.0, 1.0, True, int(j))
    slope, intercept, r2 = ols_fit(alphas, deltas)
    return DoseResponse(alphas, deltas.tolist(), slope, intercept, r2, False, int(j))


def regional_response_map(down: DownstreamMap, params: SaeParams, j: int, alpha: float, store) -> np.ndarray:
    """Per-cell mean of steered-minus-baseline downstream output, shaped (H, W)."""
    meta = getattr(store, "meta", None)
    if meta is None:
        raise RegionError("store has no grid metadata")
    X = store.X
    per = meta.cells
    acc = np.zeros(per)
    days_per_chunk = max(1, 65536 // per)
    for d0 in range(0, meta.n_days, days_per_chunk):
        d1 = min(meta.n_days, d0 + days_per_chunk)
        part = X[d0 * per : d1 * per].astype(np.float64)
        cells = np.tile(np.arange(per), d1 - d0)
        delta = down(steer(part, params, j, alpha), cells) - down(part, cells)
        acc += delta.reshape(d1 - d0, per).sum(axis=0)
    return (acc / meta.n_days).reshape(meta.H, meta.W)


def anomaly_csv(maps: dict, meta: GridMeta) -> str:
    """Long-form anomaly maps: alpha, lat, lon, value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "lat", "lon", "anomaly"])
    lats, lons = meta.lats(), meta.lons()
    for a, m in maps.items():
        for i in range(meta.H):
            for k in range(meta.W):
                w.writerow([repr(float(a)), repr(float(lats[i])), repr(float(lons[k])), repr(float(m[i, k]))])
    return buf.getvalue()
