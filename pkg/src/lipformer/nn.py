"""Differentiable building blocks, the optimizer, and the gradient checker.

All trainable state lives in a `ParamStore`; initialization is a pure
function of (seed, parameter name, shape), so rebuilding a model from the
same seed reproduces it exactly. Training runs in float32; gradient checks
require a float64 store so central differences stay meaningful.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import (
    CheckpointError,
    ConfigError,
    NumericError,
    OptimizerError,
    PreconditionError,
    ShapeError,
)

CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


def _name_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class ParamStore:
    """Named trainable tensors plus their Adam moments.

    Parameters are created on first request and returned verbatim after
    that; asking for an existing name with a different shape is an error.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def param(self, name: str, shape: tuple[int, ...], init: str = "uniform", fan_in: int | None = None) -> Tensor:
        """Create or fetch a parameter.

        init: "uniform" draws from ±sqrt(1/fan_in) (fan_in defaults to the
        last dimension), "zeros"/"ones" for biases and norm gains.
        """
        shape = tuple(int(s) for s in shape)
        if name in self.params:
            t = self.params[name]
            if t.data.shape != shape:
                raise ShapeError(f"parameter '{name}' exists with shape {t.data.shape}, requested {shape}")
            return t
        if init == "uniform":
            n_in = fan_in if fan_in is not None else shape[-1]
            scale = float(np.sqrt(1.0 / n_in))
            rng = np.random.default_rng(_name_seed(self.seed, name))
            data = rng.uniform(-scale, scale, size=shape).astype(self.dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=self.dtype)
        else:
            raise ConfigError(f"unknown init '{init}'")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def scale_grads(self, factor: float) -> None:
        for t in self.params.values():
            if t.grad is not None:
                t.grad *= factor

    def names(self) -> list[str]:
        return list(self.params.keys())

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def clone_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if k not in self.params:
                raise CheckpointError(f"unknown parameter '{k}'")
            t = self.params[k]
            if t.data.shape != v.shape:
                raise CheckpointError(f"parameter '{k}' shape {v.shape} does not match model shape {t.data.shape}")
            t.data = v.astype(self.dtype)


# -- core ops -------------------------------------------------------------------


def linear(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """weights·x + bias for a vector x, or x@weightsᵀ + bias row-wise."""
    w = weights.data
    if w.ndim != 2:
        raise ShapeError(f"linear: weights must be 2-D, got {w.shape}")
    if x.data.ndim == 1:
        if x.data.shape[0] != w.shape[1]:
            raise ShapeError(f"linear: x{x.data.shape} does not conform with weights{w.shape}")
        out = ag.matmul(ag.reshape(x, (1, -1)), ag.transpose(weights))
        out = ag.reshape(out, (-1,))
    elif x.data.ndim == 2:
        if x.data.shape[1] != w.shape[1]:
            raise ShapeError(f"linear: x{x.data.shape} does not conform with weights{w.shape}")
        out = ag.matmul(x, ag.transpose(weights))
    else:
        raise ShapeError(f"linear: x must be 1-D or 2-D, got {x.data.shape}")
    if bias is not None:
        if bias.data.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias{bias.data.shape} does not conform with weights{w.shape}")
        out = ag.add(out, bias)
    return out


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    if v.data.size == 0:
        raise PreconditionError("softmax: empty input")
    if not np.all(np.isfinite(v.data)):
        raise NumericError("softmax: input contains NaN or inf")
    return ag.softmax(v, axis=axis)


@dataclass
class GruParams:
    """Gate weights for one GRU direction.

    Update/reset/candidate gates each carry an input-to-hidden map, a
    hidden-to-hidden map, and both biases. Convention used throughout:

        z = sigmoid(x Wz' + bz_i + h Uz' + bz_h)
        r = sigmoid(x Wr' + br_i + h Ur' + br_h)
        n = tanh(x Wn' + bn_i + r * (h Un' + bn_h))
        h' = (1 - z) * h + z * n

    i.e. the update gate interpolates toward the candidate state.
    """

    input_size: int
    hidden_size: int
    w_iz: Tensor
    w_ir: Tensor
    w_in: Tensor
    w_hz: Tensor
    w_hr: Tensor
    w_hn: Tensor
    b_iz: Tensor
    b_ir: Tensor
    b_in: Tensor
    b_hz: Tensor
    b_hr: Tensor
    b_hn: Tensor


def gru_params(store: ParamStore, prefix: str, input_size: int, hidden_size: int) -> GruParams:
    """Create (or fetch) the parameter set for one GRU direction."""
    h, d = hidden_size, input_size
    return GruParams(
        input_size=d,
        hidden_size=h,
        w_iz=store.param(f"{prefix}.w_iz", (h, d)),
        w_ir=store.param(f"{prefix}.w_ir", (h, d)),
        w_in=store.param(f"{prefix}.w_in", (h, d)),
        w_hz=store.param(f"{prefix}.w_hz", (h, h)),
        w_hr=store.param(f"{prefix}.w_hr", (h, h)),
        w_hn=store.param(f"{prefix}.w_hn", (h, h)),
        b_iz=store.param(f"{prefix}.b_iz", (h,), init="zeros"),
        b_ir=store.param(f"{prefix}.b_ir", (h,), init="zeros"),
        b_in=store.param(f"{prefix}.b_in", (h,), init="zeros"),
        b_hz=store.param(f"{prefix}.b_hz", (h,), init="zeros"),
        b_hr=store.param(f"{prefix}.b_hr", (h,), init="zeros"),
        b_hn=store.param(f"{prefix}.b_hn", (h,), init="zeros"),
    )


def _gru_step(xz: Tensor, xr: Tensor, xn: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU update given precomputed input-side projections (1, H rows)."""
    z = ag.sigmoid(ag.add(xz, linear(h_prev, p.w_hz, p.b_hz)))
    r = ag.sigmoid(ag.add(xr, linear(h_prev, p.w_hr, p.b_hr)))
    n = ag.tanh(ag.add(xn, ag.mul(r, linear(h_prev, p.w_hn, p.b_hn))))
    one_minus_z = ag.add(ag.mul(z, -1.0), 1.0)
    return ag.add(ag.mul(one_minus_z, h_prev), ag.mul(z, n))


def gru_cell(x: Tensor, h_prev: Tensor, params: GruParams) -> Tensor:
    """Single gated recurrent update; x is (1, D), h_prev is (1, H)."""
    if x.data.shape[-1] != params.input_size:
        raise ShapeError(f"gru_cell: input width {x.data.shape[-1]} != param input size {params.input_size}")
    if h_prev.data.shape[-1] != params.hidden_size:
        raise ShapeError(f"gru_cell: state width {h_prev.data.shape[-1]} != hidden size {params.hidden_size}")
    xz = linear(x, params.w_iz, params.b_iz)
    xr = linear(x, params.w_ir, params.b_ir)
    xn = linear(x, params.w_in, params.b_in)
    return _gru_step(xz, xr, xn, h_prev, params)


def gru_sequence(seq: Tensor, params: GruParams, reverse: bool = False) -> list[Tensor]:
    """All hidden states of a unidirectional GRU over (T, D) rows, zero init.

    Input-side projections are hoisted out of the time loop as one matmul.
    """
    t_len = seq.data.shape[0]
    if t_len < 1:
        raise PreconditionError("gru_sequence: empty sequence")
    xz_all = linear(seq, params.w_iz, params.b_iz)
    xr_all = linear(seq, params.w_ir, params.b_ir)
    xn_all = linear(seq, params.w_in, params.b_in)
    h = Tensor(np.zeros((1, params.hidden_size), dtype=seq.data.dtype))
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    out: list[Tensor | None] = [None] * t_len
    for t in steps:
        h = _gru_step(xz_all[t : t + 1], xr_all[t : t + 1], xn_all[t : t + 1], h, params)
        out[t] = h
    return out  # type: ignore[return-value]


def bigru(seq: Tensor, fwd: GruParams, bwd: GruParams) -> Tensor:
    """Bidirectional GRU: row t is [forward state at t, backward state at t]."""
    if seq.data.ndim != 2:
        raise ShapeError(f"bigru: expected (T, D) sequence, got {seq.data.shape}")
    if seq.data.shape[0] < 1:
        raise PreconditionError("bigru: empty sequence")
    f_states = gru_sequence(seq, fwd, reverse=False)
    b_states = gru_sequence(seq, bwd, reverse=True)
    return ag.concat([ag.concat(f_states, axis=0), ag.concat(b_states, axis=0)], axis=1)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-rate); identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode requires an rng")
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return ag.mul(x, Tensor(mask.astype(x.data.dtype)))


# -- optimizer ---------------------------------------------------------------------


def adam_step(store: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    for name, p in store.params.items():
        if p.grad is None:
            raise OptimizerError(f"parameter '{name}' has no gradient")
        g = p.grad
        m = _moment(store._m, name, p.data)
        v = _moment(store._v, name, p.data)
        m[:] = b1 * m + (1.0 - b1) * g
        v[:] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - np.asarray(lr * m_hat / (np.sqrt(v_hat) + eps), dtype=p.data.dtype)


def _moment(table: dict[str, np.ndarray], name: str, like: np.ndarray) -> np.ndarray:
    if name not in table:
        table[name] = np.zeros_like(like)
    return table[name]


# -- gradient checking ------------------------------------------------------------


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    entries_checked: int
    max_rel_err: float
    worst: list[GradCheckEntry] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"grad_check: {'PASS' if self.passed else 'FAIL'} "
            f"(checked {self.entries_checked} entries, max rel err {self.max_rel_err:.3e}, tol {self.tol:.1e})"
        ]
        for e in self.worst[:10]:
            lines.append(
                f"  {e.param}[{e.index}]: analytic={e.analytic:+.6e} numeric={e.numeric:+.6e} rel={e.rel_err:.3e}"
            )
        return "\n".join(lines)


def grad_check(
    model_fn,
    store: ParamStore,
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_entries: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    model_fn() must rebuild the scalar loss from the store's current values
    each call. The store must be float64 and the loss path deterministic
    (dropout off). Checks every entry when the store is small, otherwise a
    seeded sample of max_entries with at least one entry per parameter.
    """
    if store.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 ParamStore")
    store.zero_grad()
    loss = model_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in store.params.items()}

    entries: list[tuple[str, int]] = []
    total = sum(p.data.size for p in store.params.values())
    rng = np.random.default_rng(seed)
    if total <= max_entries:
        for name, p in store.params.items():
            entries.extend((name, i) for i in range(p.data.size))
    else:
        for name, p in store.params.items():
            entries.append((name, int(rng.integers(p.data.size))))
        names = list(store.params.keys())
        sizes = np.array([store.params[n].data.size for n in names], dtype=np.float64)
        probs = sizes / sizes.sum()
        while len(entries) < max_entries:
            name = names[int(rng.choice(len(names), p=probs))]
            entries.append((name, int(rng.integers(store.params[name].data.size))))

    def loss_value() -> float:
        with ag.no_grad():
            return float(model_fn().data)

    results: list[GradCheckEntry] = []
    for name, idx in entries:
        flat = store.params[name].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        up = loss_value()
        flat[idx] = orig - eps
        down = loss_value()
        flat[idx] = orig
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        denom = max(abs(a), abs(numeric))
        rel = abs(a - numeric) if denom < 1e-8 else abs(a - numeric) / denom
        results.append(GradCheckEntry(name, idx, a, numeric, rel))

    results.sort(key=lambda e: e.rel_err, reverse=True)
    max_err = results[0].rel_err if results else 0.0
    return GradCheckReport(
        passed=max_err <= tol,
        tol=tol,
        entries_checked=len(results),
        max_rel_err=max_err,
        worst=results[:20],
    )


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(store: ParamStore, path, config_hash: str) -> None:
    """Write every parameter as little-endian float32 under a versioned header."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        h = config_hash.encode()
        f.write(struct.pack("<I", len(h)))
        f.write(h)
        f.write(struct.pack("<I", len(store.params)))
        for name, p in store.params.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(store: ParamStore, path, config_hash: str) -> None:
    """Load parameters into an already-built store, validating header and shapes."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        stored_hash = f.read(hlen).decode()
        if stored_hash != config_hash:
            raise CheckpointError(
                f"{path}: config hash mismatch (checkpoint {stored_hash[:12]}…, expected {config_hash[:12]}…)"
            )
        (count,) = struct.unpack("<I", f.read(4))
        values: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            values[name] = data
    missing = set(store.params) - set(values)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    store.load_values(values)
