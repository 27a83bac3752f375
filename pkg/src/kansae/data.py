"""Activation stores, on-disk formats and the synthetic superposition generator.

File formats (all integers and floats little-endian):

KACT v1 -- token activations
    magic b"KACT", u32 version=1, u64 N, u32 d, u32 flags (bit0: grid meta),
    [u32 n_days, u32 H, u32 W, f64 lat0, f64 dlat, f64 lon0, f64 dlon],
    N*d f32 row-major.

KSCK v1 -- model checkpoint
    magic b"KSCK", u32 version=1, u32 header_len, header_len bytes of UTF-8 JSON,
    then f64 blobs in the order listed by the header's "blobs" entry.

KCOD v1 -- sparse ground-truth codes (CSR of raw amplitudes)
    magic b"KCOD", u32 version=1, u64 N, u32 n_true, u64 nnz,
    u64[N+1] indptr, u32[nnz] indices, f64[nnz] data.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import rng as rngmod
from .errors import (
    ConfigError,
    ConsistencyError,
    DimensionError,
    FormatError,
    LengthError,
    ValidationError,
)
from .model import BLOCKS, SaeParams
from .optim import AdamState
from .spline import SplineBank, build_knots

KACT_MAGIC = b"KACT"
KSCK_MAGIC = b"KSCK"
KCOD_MAGIC = b"KCOD"
VERSION = 1
CALIB_N = 50_000

_KACT_HEAD = struct.Struct("<4sIQII")
_KACT_META = struct.Struct("<IIIdddd")
_KSCK_HEAD = struct.Struct("<4sII")
_KCOD_HEAD = struct.Struct("<4sIQIQ")


@dataclass(frozen=True)
class GridMeta:
    n_days: int
    H: int
    W: int
    lat0: float
    dlat: float
    lon0: float
    dlon: float

    @property
    def cells(self) -> int:
        return self.H * self.W

    def lats(self) -> np.ndarray:
        return self.lat0 + self.dlat * np.arange(self.H)

    def lons(self) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(self.W)


@dataclass
class ActivationStore:
    """Token matrix (N x d, float32) with optional day/lat/lon layout.

    With grid meta, rows are ordered day-major, then latitude row, then longitude.
    """

    X: np.ndarray
    meta: GridMeta | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        if self.X.ndim != 2:
            raise DimensionError("activation matrix must be 2-D")
        if self.meta is not None and self.meta.n_days * self.meta.cells != self.X.shape[0]:
            raise ConsistencyError(
                f"grid {self.meta.n_days}x{self.meta.H}x{self.meta.W} does not match N={self.X.shape[0]}"
            )

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _atomic_write(path, chunks) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_activations(store: ActivationStore, path) -> None:
    X = store.X
    if not np.all(np.isfinite(X)):
        raise ValidationError("activations contain NaN or Inf")
    flags = 1 if store.meta is not None else 0
    head = _KACT_HEAD.pack(KACT_MAGIC, VERSION, X.shape[0], X.shape[1], flags)
    chunks = [head]
    if store.meta is not None:
        m = store.meta
        chunks.append(_KACT_META.pack(m.n_days, m.H, m.W, m.lat0, m.dlat, m.lon0, m.dlon))
    chunks.append(np.ascontiguousarray(X, dtype="<f4").tobytes())
    _atomic_write(path, chunks)


def read_activations(path) -> ActivationStore:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        raw = fh.read(_KACT_HEAD.size)
        if len(raw) < _KACT_HEAD.size:
            raise LengthError("file too short for a KACT header")
        magic, version, N, d, flags = _KACT_HEAD.unpack(raw)
        if magic != KACT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {KACT_MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported KACT version {version}")
        if flags & ~1:
            raise FormatError(f"unknown flag bits 0x{flags:x}")
        offset = _KACT_HEAD.size
        meta = None
        if flags & 1:
            raw = fh.read(_KACT_META.size)
            if len(raw) < _KACT_META.size:
                raise LengthError("file too short for the grid meta block")
            meta = GridMeta(*_KACT_META.unpack(raw))
            offset += _KACT_META.size
            if meta.n_days * meta.H * meta.W != N:
                raise ConsistencyError("grid meta does not multiply out to N")
    payload = N * d * 4
    if size - offset < payload:
        raise LengthError(f"payload truncated: need {payload} bytes, have {size - offset}")
    if size - offset > payload:
        raise LengthError(f"{size - offset - payload} trailing bytes after payload")
    X = np.fromfile(path, dtype="<f4", count=N * d, offset=offset).reshape(N, d)
    return ActivationStore(X.astype(np.float32, copy=False), meta)


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    params: SaeParams
    adam: AdamState | None = None
    header: dict = field(default_factory=dict)

    @property
    def tau(self):
        return self.header.get("tau")


def _blob_layout(mode, d, M, K, with_adam):
    shapes = {"W_enc": [M, d], "W_dec": [d, M], "b_pre": [d], "b_enc": [M], "c": [M, K]}
    names = [b for b in BLOCKS if mode == "kan" or b != "c"]
    layout = [(n, shapes[n]) for n in names]
    if with_adam:
        layout += [(f"adam_m/{n}", shapes[n]) for n in names]
        layout += [(f"adam_v/{n}", shapes[n]) for n in names]
    return layout


def save_checkpoint(params: SaeParams, adam: AdamState | None, path, *, tau=None, config=None,
                    epochs_done: int = 0) -> None:
    kan = params.mode == "kan"
    K = params.bank.n_basis if kan else None
    p = params.bank.degree if kan else None
    layout = _blob_layout(params.mode, params.d, params.M, K, adam is not None)
    arrays = dict(params.blocks())
    adam_head = None
    if adam is not None:
        adam_head = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
        for name, _ in layout:
            if name.startswith("adam_"):
                kind, block = name.split("/")
                moments = adam.m if kind == "adam_m" else adam.v
                arrays[name] = moments.get(block, np.zeros_like(arrays[block]))
    header = {
        "mode": params.mode,
        "d": params.d,
        "M": params.M,
        "K": K,
        "p": p,
        "tau": tau,
        "config": config or {},
        "epochs_done": int(epochs_done),
        "knot_spans": params.bank.spans.tolist() if kan else None,
        "widened": params.bank.widened if kan else 0,
        "adam": adam_head,
        "blobs": [[n, s] for n, s in layout],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_KSCK_HEAD.pack(KSCK_MAGIC, VERSION, len(hb)), hb]
    chunks += [np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n, _ in layout]
    _atomic_write(path, chunks)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _KSCK_HEAD.size:
        raise LengthError("file too short for a KSCK header")
    magic, version, hlen = _KSCK_HEAD.unpack_from(buf)
    if magic != KSCK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {KSCK_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported KSCK version {version}")
    start = _KSCK_HEAD.size
    if len(buf) - start < hlen:
        raise LengthError("header truncated")
    try:
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
        mode, d, M = header["mode"], int(header["d"]), int(header["M"])
        K = None if header.get("K") is None else int(header["K"])
        p = None if header.get("p") is None else int(header["p"])
        blobs = [(str(n), [int(s) for s in shape]) for n, shape in header["blobs"]]
        adam_head = header.get("adam")
        spans = header.get("knot_spans")
    except (ValueError, KeyError, TypeError, AttributeError, OverflowError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}") from None
    if mode not in ("kan", "relu") or d < 1 or M < 1:
        raise ConsistencyError("header mode/dimensions are invalid")
    if mode == "kan" and (K is None or p is None or not 0 <= p <= 32 or not p + 1 <= K <= 4096):
        raise ConsistencyError("header spline degree/size are invalid")
    if any(x < 0 for _, s in blobs for x in s):
        raise ConsistencyError("negative blob dimension")
    expected = _blob_layout(mode, d, M, K, adam_head is not None)
    if blobs != [(n, list(s)) for n, s in expected]:
        raise ConsistencyError("blob list does not match header dimensions")
    need = sum(8 * math.prod(s) for _, s in blobs)
    off = start + hlen
    if len(buf) - off < need:
        raise LengthError(f"blob payload truncated: need {need} bytes, have {len(buf) - off}")
    if len(buf) - off > need:
        raise ConsistencyError(f"{len(buf) - off - need} bytes beyond the declared blobs")
    arrays = {}
    for name, shape in blobs:
        n = math.prod(shape)
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    try:
        bank = None
        if mode == "kan":
            if spans is None or len(spans) != M:
                raise ConsistencyError("knot spans missing or of wrong length")
            bank = SplineBank(np.stack([build_knots(lo, hi, K, p).knots for lo, hi in spans]),
                              arrays["c"], p, int(header.get("widened", 0)))
        params = SaeParams(arrays["W_enc"], arrays["W_dec"], arrays["b_pre"], arrays["b_enc"], mode, bank)
        adam = None
        if adam_head is not None:
            adam = AdamState(float(adam_head["lr"]), float(adam_head["beta1"]), float(adam_head["beta2"]),
                             float(adam_head["eps"]), int(adam_head["t"]))
            for name in params.blocks():
                adam.m[name] = arrays[f"adam_m/{name}"]
                adam.v[name] = arrays[f"adam_v/{name}"]
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError, OverflowError) as exc:
        raise ConsistencyError(f"checkpoint contents are inconsistent: {exc}") from None
    return Checkpoint(params, adam, header)


# -- synthetic superposition -----------------------------------------------

GATE_KINDS = ("none", "threshold", "saturate", "both")


@dataclass
class SynthConfig:
    n_true: int = 64
    d: int = 32
    N: int = 200_000
    p_active: float = 0.03
    gates: dict = field(default_factory=lambda: {"threshold": 0.5, "saturate": 0.5})
    theta: float = 0.5
    saturation: float = 1.5
    noise_sigma: float = 0.01
    bias_scale: float = 0.1
    seed: int = 0
    grid: dict | None = None  # {H, W, lat0, dlat, lon0, dlon}; n_days = N / (H*W)

    def validate(self) -> None:
        if self.n_true < 1 or self.d < 2 or self.N < 1:
            raise ConfigError("need n_true >= 1, d >= 2, N >= 1")
        if not 0.0 <= self.p_active <= 1.0:
            raise ConfigError(f"p_active={self.p_active} is not a probability")
        if self.noise_sigma < 0 or self.bias_scale < 0:
            raise ConfigError("noise_sigma and bias_scale must be non-negative")
        fr = self.gates or {}
        if any(k not in GATE_KINDS for k in fr):
            raise ConfigError(f"unknown gate kinds {sorted(set(fr) - set(GATE_KINDS))}")
        if any(v < 0 for v in fr.values()) or sum(fr.values()) > 1.0 + 1e-12:
            raise ConfigError("gate fractions must be non-negative and sum to at most 1")
        if self.grid is not None:
            cells = int(self.grid["H"]) * int(self.grid["W"])
            if cells < 1 or self.N % cells:
                raise ConfigError(f"N={self.N} is not a whole number of {cells}-cell days")


@dataclass
class SynthGroundTruth:
    D: np.ndarray  # (n_true, d) unit rows
    gates: list
    raw: sp.csr_matrix  # raw Exp(1) amplitudes, structure = firing pattern
    bias: np.ndarray
    noise_sigma: float
    p_active: float

    def codes(self) -> sp.csr_matrix:
        """Gated amplitudes alpha with the same sparsity structure as ``raw``."""
        A = self.raw.copy()
        cols = A.indices
        out = A.data.copy()
        for j, g in enumerate(self.gates):
            sel = cols == j
            if np.any(sel):
                out[sel] = apply_gate(g, out[sel])
        A.data = out
        return A

    def clean(self) -> np.ndarray:
        return np.asarray(self.codes() @ self.D) + self.bias


def apply_gate(gate: dict, a: np.ndarray) -> np.ndarray:
    kind = gate["kind"]
    if kind == "none":
        return a
    if kind == "threshold":
        return np.maximum(a - gate["theta"], 0.0)
    if kind == "saturate":
        return np.minimum(a, gate["saturation"])
    if kind == "both":
        return np.minimum(np.maximum(a - gate["theta"], 0.0), gate["saturation"])
    raise ConfigError(f"unknown gate {kind!r}")


def _assign_gates(cfg: SynthConfig, rng) -> list:
    order = rng.permutation(cfg.n_true)
    kinds = ["none"] * cfg.n_true
    bound = 0
    acc = 0.0
    for kind in GATE_KINDS[1:]:
        acc += float((cfg.gates or {}).get(kind, 0.0))
        nxt = min(cfg.n_true, int(round(acc * cfg.n_true)))
        for j in order[bound:nxt]:
            kinds[j] = kind
        bound = max(bound, nxt)
    out = []
    for kind in kinds:
        g = {"kind": kind}
        if kind in ("threshold", "both"):
            g["theta"] = cfg.theta
        if kind in ("saturate", "both"):
            g["saturation"] = cfg.saturation
        out.append(g)
    return out


def synth_generate(cfg: SynthConfig, split: str = "train", chunk: int = 65536):
    """Sparse gated superposition x = sum_j g_j(a_j) d_j + b + noise.

    Dictionary, gates and bias depend only on ``cfg.seed``; tokens come from a
    stream named after ``split`` so train and held-out sets share ground truth.
    """
    cfg.validate()
    D = rngmod.stream(cfg.seed, "synth/dictionary").normal(size=(cfg.n_true, cfg.d))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    gates = _assign_gates(cfg, rngmod.stream(cfg.seed, "synth/gates"))
    bias = rngmod.stream(cfg.seed, "synth/bias").normal(0.0, cfg.bias_scale, size=cfg.d)

    rng = rngmod.stream(cfg.seed, f"synth/tokens/{split}")
    gate_idx = {k: np.array([j for j, g in enumerate(gates) if g["kind"] == k], dtype=np.intp) for k in GATE_KINDS}
    X = np.empty((cfg.N, cfg.d), dtype=np.float32)
    pieces = []
    for start in range(0, cfg.N, chunk):
        n = min(chunk, cfg.N - start)
        fire = rng.random((n, cfg.n_true)) < cfg.p_active
        a = np.zeros((n, cfg.n_true))
        a[fire] = rng.exponential(1.0, size=int(fire.sum()))
        alpha = a.copy()
        for kind, cols in gate_idx.items():
            if kind != "none" and cols.size:
                g = gates[cols[0]]
                alpha[:, cols] = np.where(fire[:, cols], apply_gate(g, a[:, cols]), 0.0)
        x = alpha @ D + bias
        if cfg.noise_sigma > 0:
            x += rng.normal(0.0, cfg.noise_sigma, size=(n, cfg.d))
        X[start : start + n] = x
        pieces.append(sp.csr_matrix(np.where(fire, a, 0.0)))
    raw = sp.vstack(pieces, format="csr") if pieces else sp.csr_matrix((0, cfg.n_true))
    meta = None
    if cfg.grid is not None:
        g = cfg.grid
        meta = GridMeta(cfg.N // (int(g["H"]) * int(g["W"])), int(g["H"]), int(g["W"]),
                        float(g.get("lat0", 0.0)), float(g.get("dlat", 1.0)),
                        float(g.get("lon0", 0.0)), float(g.get("dlon", 1.0)))
    truth = SynthGroundTruth(D, gates, raw, bias, cfg.noise_sigma, cfg.p_active)
    return ActivationStore(X, meta), truth


def write_ground_truth(truth: SynthGroundTruth, json_path, codes_path, extra=None) -> None:
    doc = {
        "dictionary": truth.D.tolist(),
        "gates": truth.gates,
        "bias": truth.bias.tolist(),
        "noise_sigma": truth.noise_sigma,
        "p_active": truth.p_active,
    }
    if extra:
        doc.update(extra)
    _atomic_write(json_path, [json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")])
    raw = truth.raw.tocsr()
    raw.sort_indices()
    head = _KCOD_HEAD.pack(KCOD_MAGIC, VERSION, raw.shape[0], raw.shape[1], raw.nnz)
    _atomic_write(codes_path, [
        head,
        raw.indptr.astype("<u8").tobytes(),
        raw.indices.astype("<u4").tobytes(),
        raw.data.astype("<f8").tobytes(),
    ])


def read_ground_truth(json_path, codes_path) -> SynthGroundTruth:
    with open(json_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    with open(codes_path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _KCOD_HEAD.size:
        raise LengthError("file too short for a KCOD header")
    magic, version, N, n_true, nnz = _KCOD_HEAD.unpack_from(buf)
    if magic != KCOD_MAGIC or version != VERSION:
        raise FormatError("not a KCOD v1 file")
    need = _KCOD_HEAD.size + 8 * (N + 1) + 4 * nnz + 8 * nnz
    if len(buf) != need:
        raise LengthError(f"KCOD payload is {len(buf)} bytes, expected {need}")
    off = _KCOD_HEAD.size
    indptr = np.frombuffer(buf, "<u8", N + 1, off).astype(np.int64)
    off += 8 * (N + 1)
    indices = np.frombuffer(buf, "<u4", nnz, off).astype(np.int32)
    off += 4 * nnz
    data = np.frombuffer(buf, "<f8", nnz, off).astype(np.float64)
    raw = sp.csr_matrix((data, indices, indptr), shape=(N, n_true))
    return SynthGroundTruth(np.array(doc["dictionary"]), doc["gates"], raw, np.array(doc["bias"]),
                            float(doc["noise_sigma"]), float(doc["p_active"]))


def sample_calibration(store: ActivationStore, n: int = CALIB_N, seed: int = 0) -> np.ndarray:
    """Uniform sample of ``n`` rows without replacement."""
    if n > store.N:
        raise ConfigError(f"calibration sample of {n} exceeds N={store.N}")
    if n < 1:
        raise ConfigError("calibration sample must be non-empty")
    idx = rngmod.stream(seed, "calibration").choice(store.N, size=n, replace=False)
    return store.X[idx]


def grid_meta_dict(meta: GridMeta | None):
    return None if meta is None else asdict(meta)
