"""Adam, the linear lambda schedule, and decoder column renormalisation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NonFiniteGradientError
from .model import Grads, SaeParams, sample_decoder

log = logging.getLogger(__name__)

LR = 1e-4
BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
LAMBDA0 = 5e-5
LAMBDA_E = 1e-4


@dataclass
class AdamState:
    lr: float = LR
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(state: AdamState, params: SaeParams, grads: Grads) -> tuple[AdamState, SaeParams]:
    """One bias-corrected Adam update, applied in place; returns both for chaining.

    All gradient blocks are checked before anything is touched, so a non-finite
    gradient leaves parameters and moments unchanged.
    """
    pblocks = params.blocks()
    gblocks = grads.blocks()
    if pblocks.keys() != gblocks.keys():
        raise DimensionError(f"gradient blocks {sorted(gblocks)} do not match parameters {sorted(pblocks)}")
    for name, g in gblocks.items():
        if g.shape != pblocks[name].shape:
            raise DimensionError(f"gradient {name} has shape {g.shape}, parameter has {pblocks[name].shape}")
        bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        if bad:
            raise NonFiniteGradientError(name, bad)

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in pblocks.items():
        g = gblocks[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state, params


def anneal_lambda(e: int, E: int, lam0: float = LAMBDA0, lamE: float = LAMBDA_E) -> float:
    """lambda for epoch ``e`` (1-based) of ``E``; ``E == 1`` just returns ``lam0``."""
    if E <= 1:
        return lam0
    if not 1 <= e <= E:
        raise ValueError(f"epoch {e} outside 1..{E}")
    if e == E:
        return lamE
    return lam0 + (e - 1) / (E - 1) * (lamE - lam0)


def renormalize_decoder(params: SaeParams, rng: np.random.Generator | None = None) -> int:
    """Scale every W_dec column to unit norm in place.

    Columns with norm below 1e-12 are redrawn from the init distribution; the
    number redrawn is returned.
    """
    W = params.W_dec
    norms = np.linalg.norm(W, axis=0)
    dead = norms < 1e-12
    n_dead = int(dead.sum())
    if n_dead:
        rng = rng if rng is not None else np.random.default_rng(0)
        W[:, dead] = sample_decoder(params.d, n_dead, rng)
        norms[dead] = 1.0
        log.warning("reinitialised %d zero decoder column(s)", n_dead)
    W /= norms
    return n_dead
