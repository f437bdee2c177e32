"""Differentiable base forecasters over flat parameter vectors.

Three families, all mapping a lag window x (length w) to a scalar forecast:

  linear     y = w.x + b
  mlp        y = v.tanh(W1 x + b1) + b2           (one hidden layer)
  recurrent  gated recurrent cell fed x as a scalar sequence, affine readout
             of the final hidden state

Parameters live in a single flat float64 vector with a fixed layout per
LearnerSpec, so the meta-level code can treat every family identically.
Gradients are exact analytic reverse-mode derivatives of the summed squared
error, written out by hand (no autodiff framework).

The five optimizers act on (theta, grad) pairs and are pure: they return an
updated vector and an advanced state instead of mutating anything.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import WindowPair, pairs_to_arrays
from .rng import spawn

FAMILIES = ("linear", "mlp", "recurrent")
OPTIMIZERS = ("sgd", "adam", "rmsprop", "adadelta", "adagrad")
PARAMS_FORMAT_VERSION = 1

# Fixed optimizer constants (only the learning rate is ever searched).
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
RMSPROP_RHO, RMSPROP_EPS = 0.9, 1e-8
ADADELTA_RHO, ADADELTA_EPS = 0.95, 1e-6
ADAGRAD_EPS = 1e-10


class NumericError(ArithmeticError):
    """Non-finite values encountered during optimization."""


class CheckpointError(ValueError):
    """Parameter file does not match the expected format or spec."""


@dataclass(frozen=True)
class LearnerSpec:
    """Family plus shape information; fixes the flat parameter layout."""

    family: str
    input_dim: int
    width: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")


def n_params(spec: LearnerSpec) -> int:
    d, h = spec.input_dim, spec.width
    if spec.family == "linear":
        return d + 1
    if spec.family == "mlp":
        return h * d + h + h + 1
    return 3 * (h + h * h + h) + h + 1  # recurrent: three gates + readout


def init_params(spec: LearnerSpec, seed: int) -> np.ndarray:
    """Weights uniform in +-1/sqrt(fan_in), biases zero; deterministic per seed."""
    rng = spawn(seed, "init", spec.family, spec.input_dim, spec.width)
    chunks = []
    for size, fan_in in _init_plan(spec):
        if fan_in is None:
            chunks.append(np.zeros(size))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size))
    return np.concatenate(chunks)


def _init_plan(spec: LearnerSpec) -> list[tuple[int, int | None]]:
    # (size, fan_in) per layout chunk; fan_in None marks a zero-initialized bias.
    d, h = spec.input_dim, spec.width
    if spec.family == "linear":
        return [(d, d), (1, None)]
    if spec.family == "mlp":
        return [(h * d, d), (h, None), (h, h), (1, None)]
    gate = [(h, h + 1), (h * h, h + 1), (h, None)]  # input weights, recurrent weights, bias
    return gate * 3 + [(h, h), (1, None)]


def _unpack_linear(spec, theta):
    d = spec.input_dim
    return theta[:d], theta[d]


def _unpack_mlp(spec, theta):
    d, h = spec.input_dim, spec.width
    i = 0
    W1 = theta[i : i + h * d].reshape(h, d)
    i += h * d
    b1 = theta[i : i + h]
    i += h
    v = theta[i : i + h]
    i += h
    return W1, b1, v, theta[i]


def _unpack_recurrent(spec, theta):
    h = spec.width
    out, i = [], 0
    for _ in range(3):  # update gate, reset gate, candidate
        out.append(theta[i : i + h])
        i += h
        out.append(theta[i : i + h * h].reshape(h, h))
        i += h * h
        out.append(theta[i : i + h])
        i += h
    out.append(theta[i : i + h])
    i += h
    out.append(theta[i])
    return out  # wz, Uz, bz, wr, Ur, br, wh, Uh, bh, v, c


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _check_theta(spec, theta):
    if theta.shape != (n_params(spec),):
        raise ValueError(f"parameter vector has shape {theta.shape}; spec requires ({n_params(spec)},)")


def _forward_linear(spec, theta, X):
    w, b = _unpack_linear(spec, theta)
    return X @ w + b


def _forward_mlp(spec, theta, X, want_cache=False):
    W1, b1, v, b2 = _unpack_mlp(spec, theta)
    hidden = np.tanh(X @ W1.T + b1)
    yhat = hidden @ v + b2
    return (yhat, hidden) if want_cache else yhat


def _forward_recurrent(spec, theta, X, want_cache=False):
    wz, Uz, bz, wr, Ur, br, wh, Uh, bh, v, c = _unpack_recurrent(spec, theta)
    batch, w = X.shape
    h = np.zeros((batch, spec.width))
    steps = []
    for t in range(w):
        x_t = X[:, t][:, None]
        z = _sigmoid(x_t * wz + h @ Uz + bz)
        r = _sigmoid(x_t * wr + h @ Ur + br)
        hbar = np.tanh(x_t * wh + (r * h) @ Uh + bh)
        h_new = (1.0 - z) * h + z * hbar
        if want_cache:
            steps.append((h, z, r, hbar))
        h = h_new
    yhat = h @ v + c
    return (yhat, h, steps) if want_cache else yhat


def forward(spec: LearnerSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Batched forecasts for X of shape (n, input_dim)."""
    _check_theta(spec, theta)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"inputs have shape {X.shape}; spec requires (n, {spec.input_dim})")
    if spec.family == "linear":
        return _forward_linear(spec, theta, X)
    if spec.family == "mlp":
        return _forward_mlp(spec, theta, X)
    return _forward_recurrent(spec, theta, X)


def predict(spec: LearnerSpec, theta: np.ndarray, x: np.ndarray) -> float:
    """Forecast for a single lag window."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.input_dim,):
        raise ValueError(f"input has shape {x.shape}; spec requires ({spec.input_dim},)")
    return float(forward(spec, theta, x[None, :])[0])


def loss(spec: LearnerSpec, theta: np.ndarray, data: list[WindowPair], average: bool = False) -> float:
    """Squared-error loss: summed by default, averaged when ``average`` is set.

    The summed form feeds meta-training; the averaged form is the reported
    empirical risk.
    """
    X, y = pairs_to_arrays(data)
    residuals = forward(spec, theta, X) - y
    total = float(residuals @ residuals)
    return total / len(data) if average else total


def gradient(spec: LearnerSpec, theta: np.ndarray, data: list[WindowPair], average: bool = False) -> np.ndarray:
    """Exact gradient of :func:`loss` with respect to the flat parameters."""
    X, y = pairs_to_arrays(data)
    _check_theta(spec, theta)
    if spec.family == "linear":
        grad = _grad_linear(spec, theta, X, y)
    elif spec.family == "mlp":
        grad = _grad_mlp(spec, theta, X, y)
    else:
        grad = _grad_recurrent(spec, theta, X, y)
    return grad / len(data) if average else grad


def _grad_linear(spec, theta, X, y):
    dy = 2.0 * (_forward_linear(spec, theta, X) - y)
    return np.concatenate([X.T @ dy, [dy.sum()]])


def _grad_mlp(spec, theta, X, y):
    _, _, v, _ = _unpack_mlp(spec, theta)
    yhat, hidden = _forward_mlp(spec, theta, X, want_cache=True)
    dy = 2.0 * (yhat - y)
    dv = hidden.T @ dy
    db2 = dy.sum()
    da = np.outer(dy, v) * (1.0 - hidden**2)
    dW1 = da.T @ X
    db1 = da.sum(axis=0)
    return np.concatenate([dW1.ravel(), db1, dv, [db2]])


def _grad_recurrent(spec, theta, X, y):
    wz, Uz, bz, wr, Ur, br, wh, Uh, bh, v, c = _unpack_recurrent(spec, theta)
    yhat, h_final, steps = _forward_recurrent(spec, theta, X, want_cache=True)
    dy = 2.0 * (yhat - y)

    g_wz, g_Uz, g_bz = np.zeros_like(wz), np.zeros_like(Uz), np.zeros_like(bz)
    g_wr, g_Ur, g_br = np.zeros_like(wr), np.zeros_like(Ur), np.zeros_like(br)
    g_wh, g_Uh, g_bh = np.zeros_like(wh), np.zeros_like(Uh), np.zeros_like(bh)
    g_v = h_final.T @ dy
    g_c = dy.sum()

    dh = np.outer(dy, v)
    for t in range(X.shape[1] - 1, -1, -1):
        h_prev, z, r, hbar = steps[t]
        x_t = X[:, t][:, None]

        dz = dh * (hbar - h_prev)
        dhbar = dh * z
        dh_prev = dh * (1.0 - z)

        dpre_h = dhbar * (1.0 - hbar**2)
        g_wh += (dpre_h * x_t).sum(axis=0)
        g_Uh += (r * h_prev).T @ dpre_h
        g_bh += dpre_h.sum(axis=0)
        drh = dpre_h @ Uh.T
        dh_prev += drh * r

        dpre_r = (drh * h_prev) * r * (1.0 - r)
        g_wr += (dpre_r * x_t).sum(axis=0)
        g_Ur += h_prev.T @ dpre_r
        g_br += dpre_r.sum(axis=0)
        dh_prev += dpre_r @ Ur.T

        dpre_z = dz * z * (1.0 - z)
        g_wz += (dpre_z * x_t).sum(axis=0)
        g_Uz += h_prev.T @ dpre_z
        g_bz += dpre_z.sum(axis=0)
        dh_prev += dpre_z @ Uz.T

        dh = dh_prev

    return np.concatenate(
        [g_wz, g_Uz.ravel(), g_bz, g_wr, g_Ur.ravel(), g_br, g_wh, g_Uh.ravel(), g_bh, g_v, [g_c]]
    )


# --- optimizers -----------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    """Per-kind accumulator vectors plus a step counter; never mutated in place."""

    kind: str
    step: int
    acc: tuple[np.ndarray, ...]


_N_ACCUMULATORS = {"sgd": 0, "adam": 2, "rmsprop": 1, "adadelta": 2, "adagrad": 1}


def init_optimizer(kind: str, size: int) -> OptimizerState:
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")
    return OptimizerState(kind=kind, step=0, acc=tuple(np.zeros(size) for _ in range(_N_ACCUMULATORS[kind])))


def optimizer_step(
    state: OptimizerState, theta: np.ndarray, grad: np.ndarray, lr: float
) -> tuple[np.ndarray, OptimizerState]:
    """One update of ``theta`` along ``grad``; returns the new vector and state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if theta.shape != grad.shape:
        raise ValueError(f"theta shape {theta.shape} != grad shape {grad.shape}")
    for a in state.acc:
        if a.shape != theta.shape:
            raise ValueError(f"optimizer state shape {a.shape} != theta shape {theta.shape}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise NumericError(f"non-finite gradient at coordinate {int(bad[0])}")

    t = state.step + 1
    if state.kind == "sgd":
        return theta - lr * grad, OptimizerState("sgd", t, ())
    if state.kind == "adam":
        m, s = state.acc
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        s = ADAM_BETA2 * s + (1.0 - ADAM_BETA2) * grad**2
        m_hat = m / (1.0 - ADAM_BETA1**t)
        s_hat = s / (1.0 - ADAM_BETA2**t)
        return theta - lr * m_hat / (np.sqrt(s_hat) + ADAM_EPS), OptimizerState("adam", t, (m, s))
    if state.kind == "rmsprop":
        (s,) = state.acc
        s = RMSPROP_RHO * s + (1.0 - RMSPROP_RHO) * grad**2
        return theta - lr * grad / (np.sqrt(s) + RMSPROP_EPS), OptimizerState("rmsprop", t, (s,))
    if state.kind == "adadelta":
        s, d = state.acc
        s = ADADELTA_RHO * s + (1.0 - ADADELTA_RHO) * grad**2
        delta = -np.sqrt(d + ADADELTA_EPS) / np.sqrt(s + ADADELTA_EPS) * grad
        d = ADADELTA_RHO * d + (1.0 - ADADELTA_RHO) * delta**2
        return theta + lr * delta, OptimizerState("adadelta", t, (s, d))
    (s,) = state.acc
    s = s + grad**2
    return theta - lr * grad / (np.sqrt(s) + ADAGRAD_EPS), OptimizerState("adagrad", t, (s,))


# --- checkpoint serialization ---------------------------------------------


def save_params(path, spec: LearnerSpec, theta: np.ndarray, extra: dict | None = None) -> None:
    """Flat little-endian float64 blob behind a one-line JSON header."""
    header = {
        "format_version": PARAMS_FORMAT_VERSION,
        "family": spec.family,
        "input_dim": spec.input_dim,
        "width": spec.width,
        "n_params": int(theta.size),
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(theta, dtype="<f8").tobytes())


def load_params(path) -> tuple[LearnerSpec, np.ndarray, dict]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != PARAMS_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')!r} != {PARAMS_FORMAT_VERSION}"
        )
    spec = LearnerSpec(family=header["family"], input_dim=header["input_dim"], width=header["width"])
    theta = np.frombuffer(raw[newline + 1 :], dtype="<f8").astype(np.float64)
    if theta.size != header["n_params"] or theta.size != n_params(spec):
        raise CheckpointError(
            f"{path}: payload holds {theta.size} values; header/spec require {n_params(spec)}"
        )
    return spec, theta, header.get("extra", {})
