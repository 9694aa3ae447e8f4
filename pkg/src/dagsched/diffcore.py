"""A small reverse-mode differentiation kernel for dense networks.

Operations run eagerly on float64 numpy arrays and are recorded on a
:class:`Tape`; ``Tape.backward`` replays the records in reverse and returns
gradients for every network parameter the forward pass touched. Values are
row-batched: a vector input is a ``(1, d)`` or ``(d,)`` array, a batch of
``n`` inputs is ``(n, d)``.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
CHECKPOINT_FORMAT = "dagsched-checkpoint"
CHECKPOINT_VERSION = 1


class StaleTapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _segment_max(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    out = np.full((n,) + values.shape[1:], -np.inf)
    np.maximum.at(out, seg, values)
    return out


def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, seg, values)
    return out


class Tape:
    """Records operations for one forward pass.

    With ``enabled=False`` the same operations run without recording, which
    is what rollouts use for action selection.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._ops: list = []
        self._params: dict[tuple[int, int], Var] = {}
        self._nets: dict[int, tuple["DenseNet", int]] = {}
        self.output: Optional[Var] = None
        self._used = False

    # -- leaves
    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64))

    def param(self, net: "DenseNet", index: int) -> Var:
        key = (id(net), index)
        v = self._params.get(key)
        if v is None:
            v = Var(net.params[index], requires_grad=self.enabled)
            self._params[key] = v
            if self.enabled:
                self._nets.setdefault(id(net), (net, net.version))
        return v

    def _rec(self, out: Var, fn) -> Var:
        if self.enabled and out.requires_grad:
            self._ops.append((out, fn))
        return out

    @staticmethod
    def _needs(*vs: Var) -> bool:
        return any(v.requires_grad for v in vs)

    # -- operations
    def matmul(self, x: Var, w: Var) -> Var:
        out = Var(x.value @ w.value, self._needs(x, w))

        def back(g):
            if x.requires_grad:
                x._accum(g @ w.value.T)
            if w.requires_grad:
                w._accum(x.value.T @ g)
        return self._rec(out, back)

    def add(self, a: Var, b: Var) -> Var:
        out = Var(a.value + b.value, self._needs(a, b))

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))
        return self._rec(out, back)

    def mul(self, a: Var, b: Var) -> Var:
        out = Var(a.value * b.value, self._needs(a, b))

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.value, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.value, b.shape))
        return self._rec(out, back)

    def leaky_relu(self, x: Var) -> Var:
        slope = np.where(x.value > 0, 1.0, LEAKY_SLOPE)
        out = Var(x.value * slope, x.requires_grad)
        return self._rec(out, lambda g: x._accum(g * slope))

    def tanh(self, x: Var) -> Var:
        y = np.tanh(x.value)
        out = Var(y, x.requires_grad)
        return self._rec(out, lambda g: x._accum(g * (1.0 - y * y)))

    def concat(self, parts: Sequence[Var]) -> Var:
        out = Var(np.concatenate([p.value for p in parts], axis=1), self._needs(*parts))
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def back(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.requires_grad:
                    p._accum(g[:, lo:hi])
        return self._rec(out, back)

    def gather(self, x: Var, idx: np.ndarray) -> Var:
        """Rows ``x[idx]``."""
        out = Var(x.value[idx], x.requires_grad)

        def back(g):
            x._accum(_segment_sum(g, idx, x.shape[0]))
        return self._rec(out, back)

    def segment_sum(self, x: Var, seg: np.ndarray, n: int) -> Var:
        out = Var(_segment_sum(x.value, seg, n), x.requires_grad)
        return self._rec(out, lambda g: x._accum(g[seg]))

    def segment_softmax(self, s: Var, seg: np.ndarray, n: int) -> Var:
        """Softmax of the rows of `s` within each segment (columns independent)."""
        m = _segment_max(s.value, seg, n)
        e = np.exp(s.value - m[seg])
        p = e / _segment_sum(e, seg, n)[seg]
        out = Var(p, s.requires_grad)

        def back(g):
            pg = p * g
            s._accum(pg - p * _segment_sum(pg, seg, n)[seg])
        return self._rec(out, back)

    def segment_log_softmax(self, s: Var, seg: np.ndarray, n: int) -> Var:
        m = _segment_max(s.value, seg, n)
        shifted = s.value - m[seg]
        lse = np.log(_segment_sum(np.exp(shifted), seg, n))
        lp = shifted - lse[seg]
        out = Var(lp, s.requires_grad)

        def back(g):
            s._accum(g - np.exp(lp) * _segment_sum(g, seg, n)[seg])
        return self._rec(out, back)

    def weighted_sum(self, x: Var, coef) -> Var:
        """Scalar ``sum(x * coef)`` for a constant `coef`."""
        coef = np.broadcast_to(np.asarray(coef, dtype=np.float64), x.shape)
        out = Var(np.array(float(np.sum(x.value * coef))), x.requires_grad)
        return self._rec(out, lambda g: x._accum(g * coef))

    def squared_error(self, x: Var, target) -> Var:
        """Scalar ``sum((x - target)**2)``."""
        diff = x.value - np.asarray(target, dtype=np.float64)
        out = Var(np.array(float(np.sum(diff * diff))), x.requires_grad)
        return self._rec(out, lambda g: x._accum(2.0 * g * diff))

    # -- gradients
    def backward(self, output: Var, output_grad=1.0) -> dict["DenseNet", list[np.ndarray]]:
        """Gradients of ``sum(output * output_grad)`` for each touched network."""
        if not self.enabled:
            raise RuntimeError("tape was not recording")
        if self._used:
            raise StaleTapeError("tape already consumed by a backward pass")
        for net, version in self._nets.values():
            if net.version != version:
                raise StaleTapeError("network parameters changed after the forward pass")
        self._used = True
        if output.requires_grad:
            output._accum(np.broadcast_to(np.asarray(output_grad, dtype=np.float64), output.shape))
            for out, fn in reversed(self._ops):
                if out.grad is not None:
                    fn(out.grad)
        grads = {}
        for net, _ in self._nets.values():
            grads[net] = [
                np.zeros_like(p) if (v := self._params.get((id(net), i))) is None or v.grad is None
                else v.grad
                for i, p in enumerate(net.params)
            ]
        return grads


class DenseNet:
    """Affine layers with leaky-rectifier hidden activations and a linear output.

    ``layer_dims`` lists input width, hidden widths and output width, so
    ``(8, 32, 16, 8, 1)`` is an 8-input scorer with the (32, 16, 8, 1) stack.
    ``params`` alternates weight matrices ``(d_in, d_out)`` and bias vectors.
    """

    def __init__(self, layer_dims: Sequence[int], params: Sequence[np.ndarray], activation: str = "leaky_relu"):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"bad layer_dims {layer_dims}")
        if activation not in ("leaky_relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        if len(params) != 2 * (len(dims) - 1):
            raise ValueError("params do not match layer_dims")
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if params[2 * i].shape != (a, b) or params[2 * i + 1].shape != (b,):
                raise ValueError(f"layer {i}: expected shapes {(a, b)} and {(b,)}")
        self.layer_dims = dims
        self.activation = activation
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self.version = 0

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator,
             activation: str = "leaky_relu", scale: float = 1.0) -> "DenseNet":
        """Uniform fan-in initialization with zero biases."""
        params = []
        for a, b in zip(layer_dims[:-1], layer_dims[1:]):
            bound = scale / math.sqrt(a)
            params.append(rng.uniform(-bound, bound, size=(a, b)))
            params.append(np.zeros(b))
        return cls(layer_dims, params, activation)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int], activation: str = "leaky_relu") -> "DenseNet":
        params = []
        for a, b in zip(layer_dims[:-1], layer_dims[1:]):
            params += [np.zeros((a, b)), np.zeros(b)]
        return cls(layer_dims, params, activation)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "DenseNet":
        return DenseNet(self.layer_dims, [p.copy() for p in self.params], self.activation)

    def __call__(self, x: Var, tape: Tape) -> Var:
        if x.value.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.value.shape[-1]} != {self.in_dim}")
        h = x
        last = len(self.layer_dims) - 2
        for i in range(last + 1):
            h = tape.add(tape.matmul(h, tape.param(self, 2 * i)), tape.param(self, 2 * i + 1))
            if i < last:
                h = tape.leaky_relu(h) if self.activation == "leaky_relu" else tape.tanh(h)
        return h

    def predict(self, x) -> np.ndarray:
        """Plain forward pass on an array, nothing recorded."""
        tape = Tape(enabled=False)
        return self(tape.constant(np.atleast_2d(x)), tape).value


def forward(net: DenseNet, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != {net.in_dim}")
    vector = x.ndim == 1
    tape = Tape()
    out = net(tape.constant(np.atleast_2d(x)), tape)
    tape.output = out
    return (out.value[0] if vector else out.value), tape


def backward(tape: Tape, output_grad) -> dict[DenseNet, list[np.ndarray]]:
    if tape.output is None:
        raise RuntimeError("tape has no recorded output")
    g = np.asarray(output_grad, dtype=np.float64).reshape(tape.output.shape)
    return tape.backward(tape.output, g)


def masked_softmax(scores, mask) -> np.ndarray:
    """Softmax over the unmasked entries (``mask`` True = allowed); masked entries get exactly 0."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape:
        raise ValueError("scores and mask differ in shape")
    if not mask.any():
        raise ValueError("masked_softmax: every entry is masked")
    out = np.zeros_like(scores)
    s = scores[mask]
    e = np.exp(s - s.max())
    out[mask] = e / e.sum()
    return out


# ---------------------------------------------------------------------------
# parameter updates and checkpoints


def _check_finite(grads: Mapping[str, Sequence[np.ndarray]]) -> None:
    for name, gs in grads.items():
        for i, g in enumerate(gs):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}[{i}]; update refused")


def sgd_step(params: Mapping[str, DenseNet], gradients: Mapping[str, Sequence[np.ndarray]],
             learning_rate: float, *, ascent: bool = True) -> Mapping[str, DenseNet]:
    """In-place ``θ ← θ ± lr·Δθ`` over the named networks; returns `params`."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    _check_finite(gradients)
    sign = 1.0 if ascent else -1.0
    for name, gs in gradients.items():
        net = params[name]
        if len(gs) != len(net.params):
            raise ValueError(f"{name}: gradient count mismatch")
        for p, g in zip(net.params, gs):
            if p.shape != np.shape(g):
                raise ValueError(f"{name}: gradient shape {np.shape(g)} != {p.shape}")
        if learning_rate == 0:
            continue
        for p, g in zip(net.params, gs):
            p += sign * learning_rate * g
            if not np.all(np.isfinite(p)):
                raise FloatingPointError(f"{name}: parameters became non-finite")
        net.version += 1
    return params


def net_to_dict(net: DenseNet) -> dict:
    return {
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "params": [p.tolist() for p in net.params],
    }


def net_from_dict(d: dict) -> DenseNet:
    return DenseNet(d["layer_dims"], [np.array(p, dtype=np.float64) for p in d["params"]], d["activation"])


def save_checkpoint(path, nets: Mapping[str, DenseNet], meta: Optional[dict] = None) -> None:
    """JSON checkpoint; float64 values are written as shortest round-trip reprs."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "nets": {name: net_to_dict(net) for name, net in sorted(nets.items())},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, DenseNet], dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    nets = {name: net_from_dict(d) for name, d in payload["nets"].items()}
    return nets, payload.get("meta", {})


def global_norm(grads: Mapping[str, Iterable[np.ndarray]]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for gs in grads.values() for g in gs))


class Adam:
    """Adam moments over named networks; ``step`` moves θ by ±lr·m̂/(√v̂+eps)."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        self.lr, self.beta1, self.beta2, self.eps = float(learning_rate), beta1, beta2, eps
        self.t = 0
        self.m: dict[str, list[np.ndarray]] = {}
        self.v: dict[str, list[np.ndarray]] = {}

    def step(self, params: Mapping[str, DenseNet], gradients: Mapping[str, Sequence[np.ndarray]], *,
             ascent: bool = True) -> None:
        _check_finite(gradients)
        self.t += 1
        if self.lr == 0:
            return
        sign = 1.0 if ascent else -1.0
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, gs in gradients.items():
            net = params[name]
            m = self.m.setdefault(name, [np.zeros_like(p) for p in net.params])
            v = self.v.setdefault(name, [np.zeros_like(p) for p in net.params])
            for p, g, mi, vi in zip(net.params, gs, m, v):
                mi *= self.beta1
                mi += (1 - self.beta1) * g
                vi *= self.beta2
                vi += (1 - self.beta2) * g * g
                p += sign * self.lr * (mi / c1) / (np.sqrt(vi / c2) + self.eps)
                if not np.all(np.isfinite(p)):
                    raise FloatingPointError(f"{name}: parameters became non-finite")
            net.version += 1

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t,
            "m": {k: [a.tolist() for a in v] for k, v in sorted(self.m.items())},
            "v": {k: [a.tolist() for a in v] for k, v in sorted(self.v.items())},
        }

    @classmethod
    def from_state(cls, d: dict) -> "Adam":
        opt = cls(d["lr"], d["beta1"], d["beta2"], d["eps"])
        opt.t = int(d["t"])
        opt.m = {k: [np.asarray(a, dtype=np.float64) for a in v] for k, v in d["m"].items()}
        opt.v = {k: [np.asarray(a, dtype=np.float64) for a in v] for k, v in d["v"].items()}
        return opt
