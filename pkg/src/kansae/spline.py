"""Clamped cubic B-spline bases and the per-latent activation bank.

Everything here works on plain numpy arrays. The single-point functions
(``basis_eval``, ``basis_deriv``, ``spline_apply``) wrap the vectorised de Boor
kernel ``local_basis``; the training path in ``_kernels`` tabulates its
per-interval polynomials from the same kernel.

Inputs outside ``[t_lo, t_hi]`` are clamped to the boundary, so each activation
is constant beyond its knot span and has zero slope there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDistributionError, InvalidDomainError

DEFAULT_DEGREE = 3
DEFAULT_N_BASIS = 9
DEFAULT_TAU = 1.4021
NEAR_LINEAR_TOL = 1e-6


@dataclass(frozen=True)
class KnotVector:
    knots: np.ndarray
    degree: int = DEFAULT_DEGREE

    def __post_init__(self):
        xi = np.asarray(self.knots, dtype=np.float64)
        object.__setattr__(self, "knots", xi)
        p = self.degree
        if xi.ndim != 1 or p < 0 or xi.size < 2 * (p + 1):
            raise InvalidDomainError(f"need at least {2 * (p + 1)} knots for degree {p}")
        if not np.all(np.isfinite(xi)):
            raise InvalidDomainError("knots must be finite")
        if np.any(np.diff(xi) < 0):
            raise InvalidDomainError("knots must be non-decreasing")
        K = xi.size - p - 1
        if not (np.all(xi[: p + 1] == xi[0]) and np.all(xi[K:] == xi[-1])):
            raise InvalidDomainError("knot vector is not clamped")
        if np.any(np.diff(xi[p : K + 1]) <= 0):
            raise InvalidDomainError("interior knots must be strictly increasing inside the span")

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def t_lo(self) -> float:
        return float(self.knots[0])

    @property
    def t_hi(self) -> float:
        return float(self.knots[-1])

    def greville(self) -> np.ndarray:
        """Abscissae whose ordinates make the spline reproduce affine functions."""
        p, K = self.degree, self.n_basis
        if p == 0:
            return 0.5 * (self.knots[:K] + self.knots[1 : K + 1])
        idx = np.arange(K)[:, None] + np.arange(1, p + 1)[None, :]
        return self.knots[idx].mean(axis=1)


def build_knots(t_lo: float, t_hi: float, K: int = DEFAULT_N_BASIS, p: int = DEFAULT_DEGREE) -> KnotVector:
    """Clamped knot vector with ``K - p`` equal spans over ``[t_lo, t_hi]``."""
    if not (np.isfinite(t_lo) and np.isfinite(t_hi)) or t_lo >= t_hi:
        raise InvalidDomainError(f"degenerate knot span [{t_lo}, {t_hi}]")
    if K < p + 1:
        raise InvalidDomainError(f"K={K} basis functions is too few for degree {p}")
    breaks = np.linspace(t_lo, t_hi, K - p + 1)
    xi = np.concatenate([np.full(p, t_lo), breaks, np.full(p, t_hi)])
    return KnotVector(xi, p)


@dataclass
class SplineBank:
    """One clamped knot vector and one row of control points per latent.

    ``knots`` is ``(M, K + p + 1)``, ``control`` is ``(M, K)``. Knots are fixed
    after calibration; only ``control`` is trained.
    """

    knots: np.ndarray
    control: np.ndarray
    degree: int = DEFAULT_DEGREE
    widened: int = field(default=0, compare=False)

    def __post_init__(self):
        self.knots = np.array(self.knots, dtype=np.float64, order="C")
        self.control = np.ascontiguousarray(self.control, dtype=np.float64)
        if self.knots.ndim != 2 or self.control.ndim != 2:
            raise InvalidDomainError("knots and control must be 2-D")
        if self.knots.shape[0] != self.control.shape[0]:
            raise InvalidDomainError("knots and control disagree on the number of latents")
        if self.control.shape[1] != self.knots.shape[1] - self.degree - 1:
            raise InvalidDomainError("control rows must have K = len(knots) - p - 1 entries")
        for row in self.knots:
            KnotVector(row, self.degree)
        self.knots.flags.writeable = False
        self._poly = None

    def poly(self):
        """Cached per-interval basis polynomials (see ``_kernels.basis_poly``)."""
        if self._poly is None:
            from ._kernels import basis_poly

            self._poly = basis_poly(self.knots, self.degree)
        return self._poly

    @classmethod
    def from_spans(cls, spans, K: int = DEFAULT_N_BASIS, p: int = DEFAULT_DEGREE, control=None) -> "SplineBank":
        spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
        knots = np.stack([build_knots(lo, hi, K, p).knots for lo, hi in spans])
        if control is None:
            control = np.zeros((len(spans), K))
        return cls(knots, control, p)

    @property
    def n_features(self) -> int:
        return self.control.shape[0]

    @property
    def n_basis(self) -> int:
        return self.control.shape[1]

    @property
    def spans(self) -> np.ndarray:
        return np.stack([self.knots[:, 0], self.knots[:, -1]], axis=1)

    def knot_vector(self, j: int) -> KnotVector:
        return KnotVector(self.knots[j], self.degree)

    def copy(self) -> "SplineBank":
        return SplineBank(self.knots.copy(), self.control.copy(), self.degree, self.widened)


def local_basis(knots: np.ndarray, t: np.ndarray, p: int, deriv: bool = False):
    """Nonzero basis values (and optionally their derivatives) for many points.

    ``knots`` has shape ``(M, L)`` and ``t`` has shape ``(..., M)``: column j of
    ``t`` is evaluated against knot row j. Returns ``(span, B, dB)`` where
    ``span[...]`` is the knot-interval index and ``B[r]`` is ``B_{span-p+r}``
    for ``r = 0..p``. ``dB`` is ``None`` unless ``deriv`` is set; derivatives are
    zero outside the closed span.
    """
    knots = np.asarray(knots, dtype=np.float64)
    M, L = knots.shape
    K = L - p - 1
    t = np.asarray(t, dtype=np.float64)
    lo, hi = knots[:, p], knots[:, K]
    tc = np.minimum(np.maximum(t, lo), hi)
    if K > p + 1:
        span = p + np.sum(tc[..., None] >= knots[:, p + 1 : K], axis=-1)
    else:
        span = np.full(tc.shape, p, dtype=np.intp)
    flat = knots.ravel()
    base = np.arange(M) * L + span

    # de Boor's triangular scheme (local, no zero denominators on a valid span)
    left = [None] + [tc - flat[base + 1 - j] for j in range(1, p + 1)]
    right = [None] + [flat[base + j] - tc for j in range(1, p + 1)]
    N = [np.ones_like(tc)]
    lower = None
    for j in range(1, p + 1):
        if j == p:
            lower = N
        saved = np.zeros_like(tc)
        nxt = []
        for r in range(j):
            temp = N[r] / (right[r + 1] + left[j - r])
            nxt.append(saved + right[r + 1] * temp)
            saved = left[j - r] * temp
        nxt.append(saved)
        N = nxt

    dB = None
    if deriv:
        if p == 0:
            dB = [np.zeros_like(tc)]
        else:
            # B'_{i,p} = p (B_{i,p-1}/(xi_{i+p}-xi_i) - B_{i+1,p-1}/(xi_{i+p+1}-xi_{i+1}))
            inside = (t >= lo) & (t <= hi)
            dB = []
            for r in range(p + 1):
                d = np.zeros_like(tc)
                if r >= 1:
                    d = d + lower[r - 1] / (right[r] + left[p - r + 1])
                if r <= p - 1:
                    d = d - lower[r] / (right[r + 1] + left[p - r])
                dB.append(np.where(inside, p * d, 0.0))
    return span, N, dB


def _single(kv: KnotVector, t: float, deriv: bool):
    span, N, dB = local_basis(kv.knots[None, :], np.array([float(t)]), kv.degree, deriv)
    s = int(span[0])
    p = kv.degree
    vals = np.zeros(kv.n_basis)
    vals[s - p : s + 1] = [b[0] for b in (dB if deriv else N)]
    return s, vals


def basis_eval(kv: KnotVector, t: float) -> tuple[int, np.ndarray]:
    """Span index and all ``K`` basis values at ``clamp(t)``."""
    return _single(kv, t, deriv=False)


def basis_deriv(kv: KnotVector, t: float) -> np.ndarray:
    return _single(kv, t, deriv=True)[1]


def spline_apply(bank: SplineBank, j: int, t: float) -> float:
    if not 0 <= j < bank.n_features:
        raise IndexError(f"feature {j} out of range for M={bank.n_features}")
    _, vals = basis_eval(bank.knot_vector(j), t)
    return float(vals @ bank.control[j])


def evaluate_bank(bank: SplineBank, h: np.ndarray) -> np.ndarray:
    """phi_j(h[..., j]) for every latent at once."""
    p, K = bank.degree, bank.n_basis
    span, N, _ = local_basis(bank.knots, h, p)
    cbase = np.arange(bank.n_features) * K + span - p
    c = bank.control.ravel()
    z = c[cbase] * N[0]
    for r in range(1, p + 1):
        z += c[cbase + r] * N[r]
    return z


def alive_set(bank: SplineBank, tau: float = DEFAULT_TAU) -> set[int]:
    """Latents whose largest control-point magnitude reaches ``tau``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    row_max = np.abs(bank.control).max(axis=1)
    return set(np.flatnonzero(row_max >= tau).tolist())


def fit_tau(row_maxima) -> float:
    """Two-cluster (Otsu) split of control-point magnitudes.

    Candidate thresholds are the midpoints between consecutive distinct sorted
    values; the one minimising the pooled within-class sum of squares wins, ties
    going to the smallest threshold.
    """
    v = np.sort(np.asarray(row_maxima, dtype=np.float64).ravel())
    if v.size < 2 or v[0] == v[-1]:
        raise DegenerateDistributionError("need at least two distinct values to split")
    n = v.size
    cs = np.cumsum(v)
    cs2 = np.cumsum(v * v)
    k = np.arange(1, n)  # left class is v[:k]
    valid = v[1:] > v[:-1]
    sum_l, sq_l = cs[:-1], cs2[:-1]
    sum_r, sq_r = cs[-1] - sum_l, cs2[-1] - sq_l
    within = (sq_l - sum_l**2 / k) + (sq_r - sum_r**2 / (n - k))
    within = np.where(valid, within, np.inf)
    best = int(np.argmin(within))
    return float(0.5 * (v[best] + v[best + 1]))


@dataclass(frozen=True)
class ShapeProfile:
    feature_id: int
    nonlinearity_score: float
    shape_class: str


def shape_profile(bank: SplineBank, j: int, n_samples: int = 101) -> ShapeProfile:
    """Nonlinearity score (1 - R^2 of an affine fit) and curvature class of phi_j."""
    if n_samples < 3:
        raise ValueError("need at least 3 samples")
    kv = bank.knot_vector(j)
    t = np.linspace(kv.t_lo, kv.t_hi, n_samples)
    span, N, _ = local_basis(kv.knots[None, :], t[:, None], kv.degree)
    p = kv.degree
    idx = span[:, 0, None] - p + np.arange(p + 1)
    y = np.sum(bank.control[j][idx] * np.stack([b[:, 0] for b in N], axis=1), axis=1)
    return _profile_from_samples(j, t, y)


def _profile_from_samples(j, t, y) -> ShapeProfile:
    A = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - A @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    score = 0.0 if ss_tot == 0.0 else min(1.0, ss_res / ss_tot)
    if score < 1e-12:
        score = 0.0
    mean_d2 = float(np.mean(y[2:] - 2 * y[1:-1] + y[:-2]))
    if abs(mean_d2) < NEAR_LINEAR_TOL:
        cls = "near-linear"
    else:
        cls = "convex" if mean_d2 > 0 else "concave"
    return ShapeProfile(int(j), score, cls)
