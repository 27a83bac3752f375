"""End-to-end training loop: init, knot calibration, annealed lambda, Adam, renorm."""

from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .data import ActivationStore, Checkpoint, sample_calibration, save_checkpoint
from .errors import ConfigError, DegenerateDistributionError, ModeError, NonFiniteGradientError, NumericalAbort
from .model import Grads, SaeParams, calibrate_knots, encode, init_params, loss_and_grads
from .optim import AdamState, adam_step, anneal_lambda, renormalize_decoder
from .spline import DEFAULT_TAU, alive_set, fit_tau

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "kan"
    M: int = 1024
    epochs: int = 100
    batch_size: int = 4096
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lambda0: float = 5e-5
    lambdaE: float = 1e-4
    K: int = 9
    p: int = 3
    calib_n: int = 50_000
    percentiles: tuple = (1.0, 99.0)
    tau: float | str = DEFAULT_TAU
    seed: int = 0
    checkpoint_every: int = 0
    activation_eps: float = 0.0

    def validate(self) -> None:
        if self.mode not in ("kan", "relu"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.M < 1:
            raise ConfigError("epochs, batch_size and M must be positive")
        if self.lambda0 < 0 or self.lambdaE < 0:
            raise ConfigError("lambda must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (isinstance(self.tau, str) and self.tau == "auto") and not (
            isinstance(self.tau, (int, float)) and self.tau >= 0
        ):
            raise ConfigError(f"tau must be a non-negative number or 'auto', got {self.tau!r}")
        lo, hi = self.percentiles
        if not 0 <= lo < hi <= 100:
            raise ConfigError("percentiles must satisfy 0 <= lo < hi <= 100")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["percentiles"] = list(self.percentiles)
        return out


@dataclass
class EpochRecord:
    epoch: int
    lam: float
    recon: float
    sparsity: float
    total: float
    alive: int
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        rec = {k: v for k, v in asdict(self).items() if k != "wall_time"}
        return json.dumps(rec, sort_keys=True)


@dataclass
class TrainResult:
    params: SaeParams
    log: list
    alive: set
    adam: AdamState
    tau: float | None
    epochs_done: int


def resolve_threads() -> int:
    """Worker count from ``KANSAE_THREADS``; 1 selects the reference path."""
    raw = os.environ.get("KANSAE_THREADS")
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KANSAE_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("KANSAE_THREADS must be >= 1")
    return n


@contextlib.contextmanager
def _blas_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=n):
        yield


def _tree_sum(parts: list):
    """Pairwise sum in a fixed order so the result depends only on len(parts)."""
    while len(parts) > 1:
        nxt = [_add(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _add(a, b):
    ra, la, ga, za = a
    rb, lb, gb, zb = b
    c = None if ga.c is None else ga.c + gb.c
    g = Grads(ga.W_enc + gb.W_enc, ga.W_dec + gb.W_dec, ga.b_pre + gb.b_pre, ga.b_enc + gb.b_enc, c)
    return ra + rb, la + lb, g, np.maximum(za, zb)


def _step_grads(params, X, lam, pool, n_shards):
    n = X.shape[0]
    if pool is None or n_shards < 2 or n < 2 * n_shards:
        return loss_and_grads(params, X, lam, n)
    bounds = np.linspace(0, n, n_shards + 1).astype(int)
    parts = list(pool.map(lambda k: loss_and_grads(params, X[bounds[k] : bounds[k + 1]], lam, n), range(n_shards)))
    return _tree_sum(parts)


def resolve_tau(params: SaeParams, tau) -> float:
    if tau != "auto":
        return float(tau)
    try:
        return fit_tau(np.abs(params.bank.control).max(axis=1))
    except DegenerateDistributionError:
        log.warning("control-point maxima are all equal; falling back to tau=%s", DEFAULT_TAU)
        return DEFAULT_TAU


def alive_relu(params: SaeParams, store, activation_eps: float = 0.0, chunk: int = 65536) -> set[int]:
    """Latents with z_j > activation_eps on at least one token of ``store``."""
    if params.mode != "relu":
        raise ModeError("the ever-activated criterion applies to relu mode only")
    X = store.X if isinstance(store, ActivationStore) else np.asarray(store)
    ever = np.zeros(params.M, dtype=bool)
    for i in range(0, X.shape[0], chunk):
        _, z = encode(params, X[i : i + chunk])
        ever |= np.any(z > activation_eps, axis=0)
    return set(np.flatnonzero(ever).tolist())


def final_alive(params: SaeParams, cfg: TrainConfig, store, tau=None):
    if params.mode == "kan":
        tau = resolve_tau(params, cfg.tau if tau is None else tau)
        return alive_set(params.bank, tau), tau
    return alive_relu(params, store, cfg.activation_eps), None


def initial_params(cfg: TrainConfig, store: ActivationStore) -> SaeParams:
    x_mean = store.X.mean(axis=0, dtype=np.float64)
    params = init_params(store.d, cfg.M, cfg.mode, x_mean, cfg.seed, cfg.K, cfg.p)
    if cfg.mode == "kan":
        calib = sample_calibration(store, min(cfg.calib_n, store.N), cfg.seed)
        calibrate_knots(params, calib, *cfg.percentiles)
        if params.bank.widened:
            log.warning("widened %d degenerate knot span(s)", params.bank.widened)
    return params


def train(cfg: TrainConfig, store: ActivationStore, *, eval_store: ActivationStore | None = None,
          resume: Checkpoint | None = None, checkpoint_path=None, log_path=None,
          threads: int | None = None, progress=None) -> TrainResult:
    """Train one SAE on ``store``.

    Mini-batches come from a fresh seeded permutation each epoch, so resuming
    from an epoch-boundary checkpoint reproduces an uninterrupted run exactly.
    ``log_path`` receives one JSON line per epoch (appended on resume).
    Raises ``NumericalAbort`` on a non-finite loss or gradient.
    """
    cfg.validate()
    if store.N < 1:
        raise ConfigError("training store is empty")
    threads = resolve_threads() if threads is None else threads
    if resume is not None:
        params = resume.params.copy()
        adam = resume.adam.copy() if resume.adam is not None else AdamState(cfg.lr, cfg.beta1, cfg.beta2)
        start = int(resume.header.get("epochs_done", 0))
        if params.d != store.d or params.M != cfg.M or params.mode != cfg.mode:
            raise ConfigError("checkpoint does not match the config/store (mode, d or M)")
    else:
        params = initial_params(cfg, store)
        adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2)
        start = 0

    history = []
    last_good = (params.copy(), adam.copy(), start)
    mode = "w" if resume is None else "a"
    log_fh = open(log_path, mode, encoding="utf-8") if log_path is not None else None
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        with _blas_limit(1 if threads == 1 else None):
            for e in range(start + 1, cfg.epochs + 1):
                t0 = time.perf_counter()
                lam = anneal_lambda(e, cfg.epochs, cfg.lambda0, cfg.lambdaE)
                perm = rngmod.stream(cfg.seed, f"shuffle/{e}").permutation(store.N)
                renorm_rng = rngmod.stream(cfg.seed, f"renorm/{e}")
                recon_sum = l1_sum = 0.0
                zmax = np.full(params.M, -np.inf)
                for b in range(0, store.N, cfg.batch_size):
                    X = store.X[perm[b : b + cfg.batch_size]].astype(np.float64)
                    r_s, l_s, grads, zm = _step_grads(params, X, lam, pool, threads)
                    if not np.isfinite(r_s + l_s):
                        raise NumericalAbort(f"non-finite loss in epoch {e}", *last_good)
                    try:
                        adam_step(adam, params, grads)
                    except NonFiniteGradientError as exc:
                        raise NumericalAbort(f"epoch {e}: {exc}", *last_good) from exc
                    renormalize_decoder(params, renorm_rng)
                    recon_sum += r_s
                    l1_sum += l_s
                    np.maximum(zmax, zm, out=zmax)
                recon, sparsity = recon_sum / store.N, l1_sum / store.N
                if params.mode == "kan":
                    n_alive = len(alive_set(params.bank, resolve_tau(params, cfg.tau)))
                else:
                    n_alive = int(np.sum(zmax > cfg.activation_eps))
                rec = EpochRecord(e, lam, recon, sparsity, recon + lam * sparsity, n_alive,
                                  time.perf_counter() - t0)
                history.append(rec)
                last_good = (params.copy(), adam.copy(), e)
                if log_fh is not None:
                    log_fh.write(rec.to_json() + "\n")
                    log_fh.flush()
                if checkpoint_path is not None and cfg.checkpoint_every and e % cfg.checkpoint_every == 0:
                    save_checkpoint(params, adam, checkpoint_path, tau=None, config=cfg.to_dict(), epochs_done=e)
                if progress is not None:
                    progress(rec)
                log.info("epoch %d/%d lam=%.3g recon=%.5g l1=%.5g alive=%d (%.1fs)", e, cfg.epochs, lam,
                         recon, sparsity, n_alive, rec.wall_time)
    finally:
        if pool is not None:
            pool.shutdown()
        if log_fh is not None:
            log_fh.close()

    alive, tau = final_alive(params, cfg, eval_store if eval_store is not None else store)
    return TrainResult(params, history, alive, adam, tau, cfg.epochs)
