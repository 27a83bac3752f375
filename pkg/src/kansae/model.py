"""SAE parameters, forward pass, loss and hand-written reverse-mode gradients.

Two encoder modes share everything except the activation:

* ``kan``  -- z_j = phi_j(h_j) with a per-latent clamped cubic B-spline
* ``relu`` -- z_j = max(h_j, 0)

with h = W_enc (x - b_pre) + b_enc and x_hat = W_dec z + b_pre. The loss is
averaged over the batch: mean ||x - x_hat||^2 + lambda * mean sum_j |z_j|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DimensionError, EmptyInputError, ModeError
from ._kernels import control_grad_from_poly, phi_poly, poly_forward, poly_grad
from .spline import DEFAULT_DEGREE, DEFAULT_N_BASIS, SplineBank

MODES = ("kan", "relu")
BLOCKS = ("W_enc", "W_dec", "b_pre", "b_enc", "c")


@dataclass
class SaeParams:
    W_enc: np.ndarray  # (M, d)
    W_dec: np.ndarray  # (d, M)
    b_pre: np.ndarray  # (d,)
    b_enc: np.ndarray  # (M,)
    mode: str = "kan"
    bank: SplineBank | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        M, d = self.W_enc.shape
        if self.W_dec.shape != (d, M) or self.b_pre.shape != (d,) or self.b_enc.shape != (M,):
            raise DimensionError("inconsistent parameter shapes")
        if self.mode == "relu" and self.bank is not None:
            raise ModeError("relu mode takes no spline bank")
        if self.mode == "kan" and (self.bank is None or self.bank.n_features != M):
            raise ModeError("kan mode needs a spline bank with M rows")

    @property
    def d(self) -> int:
        return self.W_enc.shape[1]

    @property
    def M(self) -> int:
        return self.W_enc.shape[0]

    def blocks(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (views, so in-place updates stick)."""
        out = {"W_enc": self.W_enc, "W_dec": self.W_dec, "b_pre": self.b_pre, "b_enc": self.b_enc}
        if self.bank is not None:
            out["c"] = self.bank.control
        return out

    def copy(self) -> "SaeParams":
        return SaeParams(
            self.W_enc.copy(), self.W_dec.copy(), self.b_pre.copy(), self.b_enc.copy(),
            self.mode, None if self.bank is None else self.bank.copy(),
        )


@dataclass
class ForwardTrace:
    h: np.ndarray
    z: np.ndarray
    x_hat: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    sparsity: float
    total: float
    lam: float


@dataclass
class Grads:
    W_enc: np.ndarray
    W_dec: np.ndarray
    b_pre: np.ndarray
    b_enc: np.ndarray
    c: np.ndarray | None = None

    def blocks(self) -> dict[str, np.ndarray]:
        out = {"W_enc": self.W_enc, "W_dec": self.W_dec, "b_pre": self.b_pre, "b_enc": self.b_enc}
        if self.c is not None:
            out["c"] = self.c
        return out


def sample_decoder(d: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-normalised N(0, 1/d) columns."""
    W = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, M))
    return W / np.linalg.norm(W, axis=0, keepdims=True)


def init_params(d: int, M: int, mode: str = "kan", x_mean=None, seed: int = 0,
                K: int = DEFAULT_N_BASIS, p: int = DEFAULT_DEGREE) -> SaeParams:
    """Fresh parameters: W_enc = W_dec^T, b_pre = data mean, zero control points.

    Knot spans start at [-1, 1] until ``calibrate_knots`` replaces them.
    """
    if d < 1 or M < 1:
        raise ConfigError("d and M must be positive")
    W_dec = sample_decoder(d, M, rngmod.stream(seed, "init/decoder"))
    b_pre = np.zeros(d) if x_mean is None else np.array(x_mean, dtype=np.float64).reshape(d)
    bank = None
    if mode == "kan":
        bank = SplineBank.from_spans(np.tile([-1.0, 1.0], (M, 1)), K, p)
    return SaeParams(np.ascontiguousarray(W_dec.T), W_dec, b_pre, np.zeros(M), mode, bank)


def pre_activations(params: SaeParams, X: np.ndarray) -> np.ndarray:
    return (X - params.b_pre) @ params.W_enc.T + params.b_enc


def calibrate_knots(params: SaeParams, X_calib, p_lo: float = 1.0, p_hi: float = 99.0,
                    chunk: int = 65536) -> SaeParams:
    """Set each latent's knot span to the [p_lo, p_hi] percentiles of its pre-activation.

    Degenerate spans (lo == hi) are widened to [lo - 1, hi + 1]; the count is kept
    on ``bank.widened``. Control points are preserved.
    """
    if params.mode != "kan":
        raise ModeError("knot calibration only applies to kan mode")
    X_calib = np.asarray(X_calib)
    if X_calib.ndim != 2 or X_calib.shape[0] == 0:
        raise EmptyInputError("calibration sample is empty")
    if X_calib.shape[1] != params.d:
        raise DimensionError(f"calibration sample has d={X_calib.shape[1]}, model has d={params.d}")
    H = np.concatenate([pre_activations(params, X_calib[i : i + chunk].astype(np.float64))
                        for i in range(0, X_calib.shape[0], chunk)])
    lo, hi = np.percentile(H, [p_lo, p_hi], axis=0)
    flat = lo >= hi
    lo = np.where(flat, lo - 1.0, lo)
    hi = np.where(flat, hi + 1.0, hi)
    bank = params.bank
    new = SplineBank.from_spans(np.stack([lo, hi], axis=1), bank.n_basis, bank.degree, bank.control.copy())
    new.widened = int(flat.sum())
    params.bank = new
    return params


def _check_x(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != params.d:
        raise DimensionError(f"input has last dimension {X.shape[-1]}, model expects d={params.d}")
    return X


def _activate(params: SaeParams, h: np.ndarray, need_grad: bool):
    """Returns z and, when ``need_grad``, dz/dh for the backward pass."""
    if params.mode == "relu":
        return np.maximum(h, 0.0), None
    bank = params.bank
    Bp, inv_w = bank.poly()
    P = phi_poly(bank.control, Bp)
    h2 = np.ascontiguousarray(h.reshape(-1, h.shape[-1]))
    z, dphi = poly_forward(bank.knots, P, inv_w, h2, bank.degree, need_grad)
    if h.ndim != 2:
        z = z.reshape(h.shape)
        dphi = dphi.reshape(h.shape) if need_grad else dphi
    return z, dphi


def encode(params: SaeParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Pre-activations and latents for one token or a batch of tokens."""
    x = _check_x(params, x)
    h = pre_activations(params, x)
    z, _ = _activate(params, h, need_grad=False)
    return h, z


def decode(params: SaeParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.M:
        raise DimensionError(f"latent has last dimension {z.shape[-1]}, model expects M={params.M}")
    return z @ params.W_dec.T + params.b_pre


def forward(params: SaeParams, x) -> ForwardTrace:
    h, z = encode(params, x)
    return ForwardTrace(h, z, decode(params, z))


def _batch(params, batch):
    X = _check_x(params, batch)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise EmptyInputError("empty batch")
    return X


def loss(params: SaeParams, batch, lam: float) -> LossBreakdown:
    X = _batch(params, batch)
    tr = forward(params, X)
    n = X.shape[0]
    recon = float(np.sum((X - tr.x_hat) ** 2) / n)
    sparsity = float(np.sum(np.abs(tr.z)) / n)
    return LossBreakdown(recon, sparsity, recon + lam * sparsity, lam)


def loss_and_grads(params: SaeParams, X: np.ndarray, lam: float, denom: int):
    """Summed loss terms over ``X`` and gradients of ``(sum of losses) / denom``.

    Shards of one batch can be processed separately with the full batch size as
    ``denom`` and their outputs added. Also returns the per-latent maximum of z.
    """
    xc = X - params.b_pre
    h = xc @ params.W_enc.T + params.b_enc
    z, cache = _activate(params, h, need_grad=True)
    r = z @ params.W_dec.T + params.b_pre - X
    recon_sum = float(np.sum(r * r))
    l1_sum = float(np.sum(np.abs(z)))

    g_xhat = (2.0 / denom) * r
    gW_dec = g_xhat.T @ z
    g_bpre = g_xhat.sum(axis=0)
    g_z = g_xhat @ params.W_dec
    if lam != 0.0:
        g_z += (lam / denom) * np.sign(z)

    gc = None
    if params.mode == "relu":
        g_h = g_z * (h > 0.0)
    else:
        bank = params.bank
        Bp, inv_w = bank.poly()
        gP = poly_grad(bank.knots, inv_w, h, g_z, bank.degree, Bp.shape[1])
        gc = control_grad_from_poly(gP, Bp, bank.n_basis)
        g_h = g_z * cache

    gW_enc = g_h.T @ xc
    gb_enc = g_h.sum(axis=0)
    g_bpre -= (g_h @ params.W_enc).sum(axis=0)
    return recon_sum, l1_sum, Grads(gW_enc, gW_dec, g_bpre, gb_enc, gc), z.max(axis=0)


def backward(params: SaeParams, batch, lam: float) -> tuple[LossBreakdown, Grads]:
    """Loss breakdown and exact gradients w.r.t. every trainable block.

    Kinks use the zero one-sided choice: ReLU'(0) = 0 and d|z|/dz at 0 = 0.
    """
    X = _batch(params, batch)
    n = X.shape[0]
    recon_sum, l1_sum, grads, _ = loss_and_grads(params, X, lam, n)
    recon, sparsity = recon_sum / n, l1_sum / n
    return LossBreakdown(recon, sparsity, recon + lam * sparsity, lam), grads


def _kink_latents(params: SaeParams, X: np.ndarray, margin: float) -> np.ndarray:
    """Boolean mask of latents whose pre-activation sits within ``margin`` of a kink."""
    h = pre_activations(params, X)
    if params.mode == "relu":
        return np.any(np.abs(h) < margin, axis=0)
    near = np.zeros(params.M, dtype=bool)
    for k in range(params.bank.knots.shape[1]):
        near |= np.any(np.abs(h - params.bank.knots[:, k]) < margin, axis=0)
    _, z = encode(params, X)
    near |= np.any((z != 0.0) & (np.abs(z) < margin), axis=0)
    return near


def grad_check(params: SaeParams, batch, lam: float, step: float = 1e-5, floor: float = 1e-3) -> float:
    """Max relative error of ``backward`` against central finite differences.

    Relative error is |a - n| / max(|a|, |n|, floor). Coordinates feeding a latent
    whose pre-activation lies within ``10 * step`` of a kink (a knot, or 0 in relu
    mode) are skipped; ``b_pre`` is skipped if any latent is near a kink.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    X = _batch(params, batch)
    _, grads = backward(params, X, lam)
    skip = _kink_latents(params, X, 10.0 * step)
    work = params.copy()
    blocks = work.blocks()
    analytic = grads.blocks()
    worst = 0.0
    for name, arr in blocks.items():
        g = analytic[name]
        for idx in np.ndindex(arr.shape):
            if name in ("W_enc", "b_enc", "c") and skip[idx[0]]:
                continue
            if name == "b_pre" and skip.any():
                continue
            old = arr[idx]
            arr[idx] = old + step
            fp = loss(work, X, lam).total
            arr[idx] = old - step
            fm = loss(work, X, lam).total
            arr[idx] = old
            num = (fp - fm) / (2.0 * step)
            err = abs(g[idx] - num) / max(abs(g[idx]), abs(num), floor)
            worst = max(worst, err)
    return worst
