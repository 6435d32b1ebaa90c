"""Dense layers with exact backprop, the three-head BC loss, SGD/Adam, checkpoints."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import InvalidArgument

ACTIVATIONS = ("identity", "relu", "tanh")
NET_MAGIC = b"LMNV1"
N_HEADS = 3
N_CLASSES = 3


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise InvalidArgument("layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class NetSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgument("empty network")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.output_dim != b.input_dim:
                raise InvalidArgument(f"layer dims do not chain: {a.output_dim} -> {b.input_dim}")

    @classmethod
    def mlp(cls, dims, hidden_activation: str = "relu", out_activation: str = "identity") -> "NetSpec":
        dims = list(dims)
        acts = [hidden_activation] * (len(dims) - 2) + [out_activation]
        return cls(tuple(LayerSpec(i, o, a) for i, o, a in zip(dims, dims[1:], acts)))

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].output_dim


# A ParameterSet is a flat, ordered dict of named float64 arrays. Each network
# owns the keys "<prefix>.<layer>.W" (out x in) and "<prefix>.<layer>.b" (out).
ParameterSet = dict


def init_params(spec: NetSpec, rng: np.random.Generator, prefix: str = "net") -> ParameterSet:
    params = {}
    for i, layer in enumerate(spec.layers):
        bound = math.sqrt(6.0 / (layer.input_dim + layer.output_dim))
        params[f"{prefix}.{i}.W"] = rng.uniform(-bound, bound, size=(layer.output_dim, layer.input_dim))
        params[f"{prefix}.{i}.b"] = np.zeros(layer.output_dim)
    return params


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    if name == "relu":
        return da * (z > 0.0)
    if name == "tanh":
        return da * (1.0 - a * a)
    return da


def mlp_forward(params: ParameterSet, spec: NetSpec, x: np.ndarray, prefix: str = "net"):
    """Batched forward pass; ``x`` is (B, in). Returns output and the tape for backprop."""
    if x.shape[-1] != spec.input_dim:
        raise InvalidArgument(f"input dim {x.shape[-1]} != {spec.input_dim}")
    tape = [x]
    a = x
    for i, layer in enumerate(spec.layers):
        z = a @ params[f"{prefix}.{i}.W"].T + params[f"{prefix}.{i}.b"]
        a = _act(layer.activation, z)
        tape.append((z, a))
    return a, tape


def mlp_backward(params: ParameterSet, spec: NetSpec, tape, dout: np.ndarray,
                 prefix: str = "net", need_input_grad: bool = False):
    grads = {}
    da = dout
    for i in range(len(spec.layers) - 1, -1, -1):
        z, a = tape[i + 1]
        dz = _act_grad(spec.layers[i].activation, z, a, da)
        a_prev = tape[0] if i == 0 else tape[i][1]
        grads[f"{prefix}.{i}.W"] = dz.T @ a_prev
        grads[f"{prefix}.{i}.b"] = dz.sum(axis=0)
        if i > 0 or need_input_grad:
            da = dz @ params[f"{prefix}.{i}.W"]
    return grads, (da if need_input_grad else None)


def forward(params: ParameterSet, spec: NetSpec, x: np.ndarray, prefix: str = "net"):
    """Single-vector forward pass."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidArgument("forward expects a single input vector")
    out, tape = mlp_forward(params, spec, x[None, :], prefix)
    return out[0], tape


def head_probabilities(logits: np.ndarray) -> np.ndarray:
    """Softmax per 3-class head; logits (..., 9) -> probabilities (..., 3, 3)."""
    z = logits.reshape(*logits.shape[:-1], N_HEADS, N_CLASSES)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bc_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the batch of the summed per-head negative log-likelihood.

    ``labels`` holds class indices (B, 3) in {0, 1, 2}. Returns the loss and
    d loss / d logits with shape (B, 9).
    """
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    b = logits.shape[0]
    z = logits.reshape(b, N_HEADS, N_CLASSES)
    z = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - log_norm
    picked = np.take_along_axis(logp, labels[:, :, None], axis=-1)[..., 0]
    loss = float(-picked.sum() / b)
    dz = np.exp(logp)
    np.put_along_axis(dz, labels[:, :, None], np.take_along_axis(dz, labels[:, :, None], -1) - 1.0, -1)
    return loss, dz.reshape(b, N_HEADS * N_CLASSES) / b


def bc_loss_and_grad(params: ParameterSet, spec: NetSpec, x: np.ndarray, label, prefix: str = "net"):
    """Loss and exact parameter gradients for one sample of a plain MLP policy."""
    if spec.output_dim != N_HEADS * N_CLASSES:
        raise InvalidArgument("policy network must output 9 logits")
    idx = np.asarray(label.class_indices() if hasattr(label, "class_indices") else label)
    logits, tape = mlp_forward(params, spec, np.atleast_2d(np.asarray(x, dtype=float)), prefix)
    loss, dlogits = bc_loss(logits, idx.reshape(1, N_HEADS))
    grads, _ = mlp_backward(params, spec, tape, dlogits, prefix)
    return loss, grads


@dataclass
class OptState:
    algorithm: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise InvalidArgument(f"unknown optimizer {self.algorithm!r}")


def opt_step(params: ParameterSet, grads: ParameterSet, opt: OptState) -> tuple[ParameterSet, OptState]:
    """Update ``params`` in place and return them with the advanced state."""
    opt.step_count += 1
    if opt.algorithm == "sgd":
        for k, g in grads.items():
            params[k] -= opt.learning_rate * g
        return params, opt
    t = opt.step_count
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for k, g in grads.items():
        if k not in opt.m:
            opt.m[k] = np.zeros_like(params[k])
            opt.v[k] = np.zeros_like(params[k])
        m, v = opt.m[k], opt.v[k]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        params[k] -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.epsilon)
    return params, opt


@dataclass(frozen=True)
class TrainHyper:
    batch_size: int = 64
    epochs: int = 30
    learning_rate: float = 1e-3
    seed: int = 0
    algorithm: str = "adam"


def train_epochs(
    params: ParameterSet,
    n_samples: int,
    loss_and_grad: Callable[[ParameterSet, np.ndarray], tuple[float, ParameterSet]],
    hyper: TrainHyper,
    log: Callable[[int, float], None] | None = None,
) -> tuple[ParameterSet, list[float]]:
    """Mini-batch training over sample indices.

    ``loss_and_grad(params, idx)`` returns the batch-mean loss and gradients for
    the samples ``idx``. Batches are reshuffled every epoch from ``hyper.seed``.
    """
    if n_samples < 1:
        raise InvalidArgument("empty dataset")
    rng = np.random.default_rng(hyper.seed)
    opt = OptState(hyper.algorithm, hyper.learning_rate)
    curve = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, grads = loss_and_grad(params, idx)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch starting {start}")
            opt_step(params, grads, opt)
            total += loss * len(idx)
        curve.append(total / n_samples)
        if log is not None:
            log(epoch + 1, curve[-1])
    return params, curve


def write_net(fh: io.BufferedIOBase, spec: NetSpec, params: ParameterSet, prefix: str = "net") -> None:
    fh.write(NET_MAGIC)
    fh.write(struct.pack("<I", len(spec.layers)))
    for layer in spec.layers:
        fh.write(struct.pack("<IIB", layer.input_dim, layer.output_dim, ACTIVATIONS.index(layer.activation)))
    for i in range(len(spec.layers)):
        fh.write(np.ascontiguousarray(params[f"{prefix}.{i}.W"], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(params[f"{prefix}.{i}.b"], dtype="<f4").tobytes())


def read_net(fh: io.BufferedIOBase, prefix: str = "net") -> tuple[NetSpec, ParameterSet]:
    magic = fh.read(len(NET_MAGIC))
    if magic != NET_MAGIC:
        raise ValueError(f"bad network magic {magic!r}")
    (n,) = struct.unpack("<I", fh.read(4))
    layers = []
    for _ in range(n):
        i, o, a = struct.unpack("<IIB", fh.read(9))
        layers.append(LayerSpec(i, o, ACTIVATIONS[a]))
    spec = NetSpec(tuple(layers))
    params = {}
    for i, layer in enumerate(layers):
        w = np.frombuffer(fh.read(4 * layer.input_dim * layer.output_dim), dtype="<f4")
        b = np.frombuffer(fh.read(4 * layer.output_dim), dtype="<f4")
        params[f"{prefix}.{i}.W"] = w.reshape(layer.output_dim, layer.input_dim).astype(np.float64)
        params[f"{prefix}.{i}.b"] = b.astype(np.float64)
    return spec, params


def round_to_f32(params: ParameterSet) -> ParameterSet:
    """Parameters as they come back from a checkpoint."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def numeric_gradient(f: Callable[[], float], params: ParameterSet, h: float = 1e-5) -> ParameterSet:
    """Central differences of ``f`` with respect to every entry of ``params`` (perturbed in place)."""
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat, gf = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gf[i] = (up - down) / (2.0 * h)
        out[k] = g
    return out


def gradient_relative_error(analytic: ParameterSet, numeric: ParameterSet, floor: float = 1e-8) -> float:
    """Largest per-tensor ``|a - n| / max(|a|, |n|)`` in the L2 norm.

    Tensors whose gradients are both below ``floor`` in norm are skipped: their
    true gradient is zero (e.g. attention key biases, which softmax cancels) and
    the central difference holds only roundoff.
    """
    worst = 0.0
    for k, n in numeric.items():
        a = analytic[k]
        scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
        if scale > floor:
            worst = max(worst, float(np.linalg.norm(a - n)) / scale)
    return worst
