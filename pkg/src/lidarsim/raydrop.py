"""Per-ray return probability on the polar grid, trained against real sweeps.

The baseline learner is (windowed) logistic regression on standardised grid
channels, fitted with Adam on binary cross-entropy restricted to cells the
simulator actually returned. A plug-in kind accepts probability grids from an
external predictor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, InputError
from .io import _read, atomic_write, read_grid
from .polar import CH_OCCUPANCY, N_CHANNELS
from .rng import STREAM_RAYDROP, bernoulli_grid

KINDS = ("constant", "logistic", "windowed-logistic", "plug-in")
_EPS = 1e-12
_HEADER = struct.Struct("<4sHI")


@dataclass(frozen=True)
class FeatureSpec:
    channels: tuple[int, ...] = tuple(range(N_CHANNELS))
    window: int = 2

    @property
    def offsets(self) -> list[tuple[int, int]]:
        """Window offsets, centre first, then row-major neighbours."""
        w = self.window
        rest = [(dr, dc) for dr in range(-w, w + 1) for dc in range(-w, w + 1) if (dr, dc) != (0, 0)]
        return [(0, 0)] + rest

    @property
    def dim(self) -> int:
        return len(self.channels) * (2 * self.window + 1) ** 2


@dataclass
class RaydropModel:
    kind: str
    params: np.ndarray
    spec: FeatureSpec = field(default_factory=FeatureSpec)
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_CHANNELS))
    std: np.ndarray = field(default_factory=lambda: np.ones(N_CHANNELS))
    final_loss: Optional[float] = None
    plugin_path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown model kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if np.any(self.std <= 0):
            raise InputError("normalisation stds must be positive")
        expected = {"constant": 1, "plug-in": 0}.get(self.kind, self.spec.dim + 1)
        if len(self.params) != expected:
            raise InputError(f"{self.kind} model needs {expected} parameters, got {len(self.params)}")

    @classmethod
    def constant(cls, p: float) -> "RaydropModel":
        return cls("constant", [p], FeatureSpec(window=0))

    @classmethod
    def logistic(cls, weights, bias: float, spec: Optional[FeatureSpec] = None, mean=None, std=None) -> "RaydropModel":
        spec = spec or FeatureSpec(window=0)
        kind = "logistic" if spec.window == 0 else "windowed-logistic"
        nch = len(spec.channels)
        return cls(kind, np.append(np.asarray(weights, dtype=np.float64), bias), spec,
                   np.zeros(nch) if mean is None else mean, np.ones(nch) if std is None else std)

    @classmethod
    def plugin(cls, path) -> "RaydropModel":
        return cls("plug-in", [], FeatureSpec(window=0), plugin_path=str(path))

    @property
    def weights(self) -> np.ndarray:
        return self.params[:-1]

    @property
    def bias(self) -> float:
        return float(self.params[-1])

    # file format: "LRDM" | u16 version | u32 header length | JSON header | f32 params
    def to_bytes(self) -> bytes:
        header = {
            "kind": self.kind,
            "feature_spec": {"channels": list(self.spec.channels), "window": self.spec.window},
            "normalization": {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]},
            "n_params": len(self.params),
            "final_loss": self.final_loss,
            "plugin_path": self.plugin_path,
        }
        h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return _HEADER.pack(b"LRDM", 1, len(h)) + h + self.params.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, path="<bytes>") -> "RaydropModel":
        if len(buf) < _HEADER.size:
            raise FormatError(f"{path}: truncated model header")
        magic, version, hlen = _HEADER.unpack_from(buf)
        if magic != b"LRDM":
            raise FormatError(f"{path}: bad magic {magic!r}, expected b'LRDM'")
        if version != 1:
            raise FormatError(f"{path}: unsupported version {version}")
        try:
            h = json.loads(buf[_HEADER.size:_HEADER.size + hlen])
            n = int(h["n_params"])
            if len(buf) != _HEADER.size + hlen + 4 * n:
                raise FormatError(f"{path}: parameter block length mismatch")
            params = np.frombuffer(buf, "<f4", n, _HEADER.size + hlen).astype(np.float64)
            fs = h["feature_spec"]
            return cls(h["kind"], params, FeatureSpec(tuple(fs["channels"]), int(fs["window"])),
                       h["normalization"]["mean"], h["normalization"]["std"],
                       h.get("final_loss"), h.get("plugin_path"))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: bad model header: {e}") from e

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "RaydropModel":
        return cls.from_bytes(_read(path), path)


def _cell_coords(grid: np.ndarray, cells) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = grid.shape[1:]
    if cells is None:
        r, c = np.divmod(np.arange(rows * cols), cols)
        return r, c
    r, c = cells
    return np.asarray(r, dtype=np.int64), np.asarray(c, dtype=np.int64)


def extract_features(grid: np.ndarray, spec: FeatureSpec, mean=None, std=None, cells=None) -> np.ndarray:
    """Per-cell window features, shape (n_cells, spec.dim).

    Azimuth wraps around; rows are clamped at the top and bottom beams. When
    `mean`/`std` (one entry per selected channel) are given the values are
    standardised. `cells` is an optional (rows, cols) pair of index arrays;
    by default every cell is returned in row-major order.
    """
    if grid.ndim != 3:
        raise InputError(f"grid must be (channels, rows, cols), got {grid.shape}")
    R, C = grid.shape[1:]
    r, c = _cell_coords(grid, cells)
    ch = np.asarray(spec.channels)
    base = grid[ch]
    out = np.empty((len(r), spec.dim))
    k = len(ch)
    for i, (dr, dc) in enumerate(spec.offsets):
        rr = np.clip(r + dr, 0, R - 1)
        cc = (c + dc) % C
        out[:, i * k:(i + 1) * k] = base[:, rr, cc].T
    if mean is not None:
        m = np.tile(np.asarray(mean, dtype=np.float64), len(spec.offsets))
        s = np.tile(np.asarray(std, dtype=np.float64), len(spec.offsets))
        out -= m
        out /= s
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logits(X: np.ndarray, params: np.ndarray) -> np.ndarray:
    # explicit reductions keep results independent of BLAS threading
    return (X * params[:-1]).sum(axis=1) + params[-1]


def bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, _EPS, 1.0 - _EPS)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def loss_and_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of a logistic model and its gradient."""
    z = _logits(X, params)
    # stable form: log(1 + e^z) - y z
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    r = _sigmoid(z) - y
    g = np.empty_like(params)
    g[:-1] = (X * r[:, None]).sum(axis=0) / len(y)
    g[-1] = r.sum() / len(y)
    return loss, g


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 1e-4
    epochs: int = 10
    batch_cells: int = 4096
    seed: int = 0
    window: int = 2
    kind: str = "windowed-logistic"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.step_size > 0:
            raise InputError("step_size must be positive")
        if self.kind not in ("constant", "logistic", "windowed-logistic"):
            raise InputError(f"cannot train a {self.kind!r} model")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        allowed = cls.__dataclass_fields__.keys()
        unknown = set(doc) - set(allowed)
        if unknown:
            raise FormatError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainResult:
    model: RaydropModel
    initial_loss: float
    loss_history: list[float]  # full-data loss after each epoch


class _Dataset:
    """Sim-occupied cells of all training pairs, with lazily built features."""

    def __init__(self, pairs, spec: FeatureSpec):
        self.grids = []
        self.cells = []
        labels = []
        for k, (grid, real) in enumerate(pairs):
            grid = np.asarray(grid, dtype=np.float64)
            real = np.asarray(real)
            if grid.shape[0] != N_CHANNELS or real.shape != grid.shape[1:]:
                raise InputError(f"pair {k}: grid {grid.shape} vs labels {real.shape}")
            r, c = np.nonzero(grid[CH_OCCUPANCY])
            self.grids.append(grid)
            self.cells.append(np.stack([np.full(len(r), k), r, c], axis=1))
            labels.append((real[r, c] != 0).astype(np.float64))
        self.cells = np.concatenate(self.cells) if self.cells else np.zeros((0, 3), np.int64)
        self.y = np.concatenate(labels) if labels else np.zeros(0)
        self.spec = spec
        if len(self.y) == 0:
            raise InputError("no simulated returns to train on")
        centre = np.concatenate([g[np.asarray(spec.channels)][:, g[CH_OCCUPANCY] != 0] for g in self.grids], axis=1)
        self.mean = centre.mean(axis=1)
        std = centre.std(axis=1)
        self.std = np.where(std > 1e-12, std, 1.0)

    def __len__(self):
        return len(self.y)

    def features(self, idx: np.ndarray) -> np.ndarray:
        cells = self.cells[idx]
        X = np.empty((len(idx), self.spec.dim))
        for k in np.unique(cells[:, 0]):
            m = cells[:, 0] == k
            X[m] = extract_features(self.grids[k], self.spec, self.mean, self.std, (cells[m, 1], cells[m, 2]))
        return X

    def full_loss(self, params: np.ndarray, chunk: int = 65536) -> float:
        total = 0.0
        for s in range(0, len(self), chunk):
            idx = np.arange(s, min(s + chunk, len(self)))
            z = _logits(self.features(idx), params)
            total += float(np.sum(np.logaddexp(0.0, z) - self.y[idx] * z))
        return total / len(self)


def train(pairs: Sequence[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit a raydrop model on (simulated feature grid, real occupancy) pairs.

    Only cells with simulated occupancy contribute to the loss. The result is
    a deterministic function of the inputs and `cfg.seed`; parameters are
    rounded to float32 so the in-memory model equals its saved form.
    """
    if not pairs:
        raise InputError("no training pairs")
    window = 0 if cfg.kind in ("constant", "logistic") else cfg.window
    spec = FeatureSpec(window=window)
    data = _Dataset(pairs, spec)

    if cfg.kind == "constant":
        p = float(np.float32(data.y.mean()))
        loss = bce(np.full(len(data), p), data.y)
        base = bce(np.full(len(data), 0.5), data.y)
        model = RaydropModel("constant", [p], spec, final_loss=loss)
        return TrainResult(model, base, [loss])

    params = np.zeros(spec.dim + 1)
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    initial = data.full_loss(params)
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for s in range(0, len(order), cfg.batch_cells):
            idx = np.sort(order[s:s + cfg.batch_cells])
            _, g = loss_and_grad(params, data.features(idx), data.y[idx])
            step += 1
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            mhat = m / (1.0 - cfg.beta1 ** step)
            vhat = v / (1.0 - cfg.beta2 ** step)
            params = params - cfg.step_size * mhat / (np.sqrt(vhat) + cfg.eps)
        history.append(data.full_loss(params))
    params = params.astype(np.float32).astype(np.float64)
    final = data.full_loss(params)
    kind = "logistic" if window == 0 else "windowed-logistic"
    model = RaydropModel(kind, params, spec, data.mean, data.std, final_loss=final)
    return TrainResult(model, initial, history)


def predict(model: RaydropModel, grid: np.ndarray) -> np.ndarray:
    """Return probability per cell; zero wherever nothing was cast."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[0] != N_CHANNELS:
        raise InputError(f"expected an (8, rows, cols) feature grid, got {grid.shape}")
    occ = grid[CH_OCCUPANCY] != 0
    if model.kind == "constant":
        p = np.full(occ.shape, model.params[0])
    elif model.kind == "plug-in":
        if model.plugin_path is None:
            raise InputError("plug-in model has no probability grid")
        pg = read_grid(model.plugin_path)
        if pg.shape[0] != 1 or pg.shape[1:] != occ.shape:
            raise InputError(f"plug-in grid shape {pg.shape} does not match {occ.shape}")
        p = pg[0].astype(np.float64)
    else:
        if model.spec.dim + 1 != len(model.params) or len(model.mean) != len(model.spec.channels):
            raise InputError("model parameters do not match its feature spec")
        p = np.zeros(occ.shape)
        r, c = np.nonzero(occ)
        if len(r):
            X = extract_features(grid, model.spec, model.mean, model.std, (r, c))
            p[r, c] = _sigmoid(_logits(X, model.params))
    return np.where(occ, np.clip(p, 0.0, 1.0), 0.0)


def sample_mask(probabilities: np.ndarray, seed: int, threads: int = 1) -> np.ndarray:
    """Independent Bernoulli draw per cell from a counter-based generator."""
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise InputError("probabilities must lie in [0, 1]")
    return bernoulli_grid(p, seed, STREAM_RAYDROP, threads)
