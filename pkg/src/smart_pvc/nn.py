"""Small feed-forward networks with hand-written backprop, Adam, and
finite-difference gradient checking. Everything runs in float64."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from smart_pvc.errors import DataError, NumericError

ACTIVATIONS = ("relu", "tanh", "identity")
NORM_EPS = 1e-12


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _act_grad(name: str, a: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (a > 0)
    if name == "tanh":
        return g * (1.0 - out * out)
    return g


class MlpNetwork:
    """Fully connected network ``y = act(x W + b)`` per layer.

    ``activations`` has one entry per weight layer. By default hidden layers
    use relu and the output layer is linear.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        activations: Sequence[str] | None = None,
        seed: int | None = None,
        rng: np.random.Generator | None = None,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ):
        dims = [int(x) for x in layer_dims]
        if len(dims) < 2 or any(x < 1 for x in dims):
            raise ValueError(f"invalid layer dims {layer_dims}")
        n_layers = len(dims) - 1
        if activations is None:
            activations = [hidden_activation] * (n_layers - 1) + [output_activation]
        activations = list(activations)
        if len(activations) != n_layers:
            raise ValueError(f"need {n_layers} activations, got {len(activations)}")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if rng is None:
            rng = np.random.default_rng(seed)
        self.layer_dims = dims
        self.activations = activations
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._cache: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None

    def __repr__(self):
        return f"MlpNetwork({self.layer_dims}, {self.activations})"

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names.extend((f"W{i}", f"b{i}"))
        return names

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise ValueError(
                f"input shape {x.shape} does not match input width {self.layer_dims[0]}"
            )
        cache = []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = h @ w + b
            out = _act(act, a)
            cache.append((h, a, out))
            h = out
        self._cache = cache
        return h

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Backpropagate ``grad_out``; return ``(param_grads, grad_in)``.

        ``param_grads`` follows the order of :meth:`params`. The forward cache
        is consumed, so a second backward needs a fresh forward.
        """
        if self._cache is None:
            raise RuntimeError("backward called without a preceding forward pass")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        last_out = self._cache[-1][2]
        if grad_out.shape != last_out.shape:
            raise RuntimeError(
                f"stale cache: grad_out {grad_out.shape} vs forward output {last_out.shape}"
            )
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        g = grad_out
        for i in reversed(range(len(self.weights))):
            h_in, a, out = self._cache[i]
            g = _act_grad(self.activations[i], a, out, g)
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        self._cache = None
        return grads, g

    def state_arrays(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.params(), arrays, strict=True):
            if dst.shape != src.shape:
                raise ValueError(f"parameter shape {src.shape} != {dst.shape}")
            dst[...] = src


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    state: AdamState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    names: Sequence[str] | None = None,
) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    for p, g, name in zip(params, grads, names):
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError("optimizer state does not match the parameter shapes")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return list(params)


def l2_normalize_rows(h, return_norms: bool = False):
    h = np.asarray(h, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", h, h))
    ok = norms >= NORM_EPS
    out = np.zeros_like(h)
    out[ok] = h[ok] / norms[ok, None]
    if return_norms:
        return out, np.where(ok, norms, 0.0)
    return out


def l2_normalize_rows_backward(n: np.ndarray, norms: np.ndarray, dn: np.ndarray) -> np.ndarray:
    proj = np.einsum("ij,ij->i", n, dn)
    ok = norms > 0
    dh = np.zeros_like(dn)
    dh[ok] = (dn[ok] - n[ok] * proj[ok, None]) / norms[ok, None]
    return dh


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tol: float
    n_checked: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def rel_err(a, f) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def grad_check(
    loss_fn: Callable[[MlpNetwork], tuple[float, list[np.ndarray]]],
    net: MlpNetwork,
    tol: float = 1e-4,
    h: float = 1e-5,
    max_params: int = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic parameter gradients with central differences.

    ``loss_fn(net)`` returns ``(loss, grads)`` with grads ordered like
    ``net.params()``. Networks above ``max_params`` are checked on a random
    subsample of entries.
    """
    _, analytic = loss_fn(net)
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    params = net.params()
    total = sum(p.size for p in params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport({}, tol)
    for name, p, g in zip(net.param_names(), params, analytic):
        if total > max_params:
            k = max(1, int(round(p.size * max_params / total)))
            index = np.sort(rng.choice(p.size, size=min(k, p.size), replace=False))
        else:
            index = np.arange(p.size)
        fd = numerical_grad(lambda: float(loss_fn(net)[0]), p, h=h, index=index)
        err = rel_err(g.reshape(-1)[index], fd.reshape(-1)[index])
        report.max_rel_err[name] = float(err.max()) if err.size else 0.0
        report.n_checked += int(index.size)
    return report


CHECKPOINT_MAGIC = b"SMPV"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, networks: dict[str, MlpNetwork], config: dict | None = None) -> None:
    """Write networks to one binary file.

    Layout: magic, version byte, little-endian uint32 header length, JSON
    header (config echo plus per-network dims/activations), then every
    parameter as little-endian float64 in header order.
    """
    header = {
        "config": config or {},
        "networks": [
            {"name": name, "layer_dims": net.layer_dims, "activations": net.activations}
            for name, net in networks.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for net in networks.values():
            for p in net.params():
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, MlpNetwork], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<BI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<BI")
    header = json.loads(raw[start : start + hlen])
    offset = start + hlen
    networks = {}
    for spec in header["networks"]:
        net = MlpNetwork(spec["layer_dims"], spec["activations"], seed=0)
        for p in net.params():
            nbytes = p.size * 8
            if offset + nbytes > len(raw):
                raise DataError(f"{path}: truncated checkpoint")
            p[...] = np.frombuffer(raw, dtype="<f8", count=p.size, offset=offset).reshape(p.shape)
            offset += nbytes
        networks[spec["name"]] = net
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return networks, header["config"]
