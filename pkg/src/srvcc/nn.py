"""Dense MLPs with hand-written backward passes, a central-difference
gradient checker and a functional Adam optimizer.

All arrays are float64. Weights are stored ``(fan_in, fan_out)`` so a layer
computes ``act(x @ W + b)`` for a single vector or a batch of row vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .errors import DimensionError, NumericalError

ACTIVATIONS = ("tanh", "relu", "identity", "softplus")


def softplus(x):
    return np.logaddexp(0.0, x)


def logsumexp(a, axis=None, keepdims=False):
    """Max-shifted log-sum-exp; scipy's version costs ~5x more on small arrays."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.item())


def softmax(a, axis=-1):
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name, pre):
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "softplus":
        return softplus(pre)
    return pre


def _activation_grad(name, pre, post):
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        return (pre > 0).astype(np.float64)
    if name == "softplus":
        return sigmoid(pre)
    return np.ones_like(pre)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise NumericalError("layer parameters must be finite")

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]


@dataclass
class MlpParams:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("an MLP needs at least one layer")
        for k in range(len(self.layers) - 1):
            if self.layers[k].n_out != self.layers[k + 1].n_in:
                raise DimensionError(
                    f"layer {k} outputs {self.layers[k].n_out} but layer {k + 1} "
                    f"expects {self.layers[k + 1].n_in}")

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def parameters(self, prefix: str) -> Dict[str, np.ndarray]:
        """Live references to the weight and bias arrays, keyed by name."""
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}.{k}.weight"] = layer.weight
            out[f"{prefix}.{k}.bias"] = layer.bias
        return out

    def squared_norm(self) -> float:
        return float(sum(np.sum(l.weight ** 2) + np.sum(l.bias ** 2) for l in self.layers))

    def zeros_like(self) -> "MlpParams":
        return MlpParams([Layer(np.zeros_like(l.weight), np.zeros_like(l.bias), l.activation)
                          for l in self.layers])

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                          for l in self.layers])


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng) -> MlpParams:
    """Uniform(-a, a) weights with a = sqrt(3 / fan_in), zero biases."""
    if len(activations) != len(sizes) - 1:
        raise DimensionError("need one activation per layer")
    layers = []
    for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = np.sqrt(3.0 / n_in)
        layers.append(Layer(rng.uniform(-bound, bound, size=(n_in, n_out)),
                            np.zeros(n_out), act))
    return MlpParams(layers)


@dataclass
class Trace:
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)


def mlp_forward(params: MlpParams, x) -> Tuple[np.ndarray, Trace]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.n_in:
        raise DimensionError(
            f"layer 0 expects input dimension {params.n_in}, got {x.shape[-1]}")
    trace = Trace()
    h = x
    for layer in params.layers:
        trace.inputs.append(h)
        pre = h @ layer.weight + layer.bias
        h = _activate(layer.activation, pre)
        trace.pre.append(pre)
        trace.post.append(h)
    return h, trace


def mlp_backward(params: MlpParams, trace: Trace, output_grad,
                 sample_weights=None) -> Tuple[MlpParams, np.ndarray]:
    """Backpropagate ``output_grad`` (same shape as the forward output).

    Parameter gradients are summed over any leading batch axes. With
    ``sample_weights`` (one per batch row) the parameter gradients use
    ``sample_weights * output_grad`` while ``input_grad`` stays unweighted.
    """
    if len(trace.pre) != len(params.layers):
        raise DimensionError("trace was recorded for a different network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.post[-1].shape:
        raise DimensionError(
            f"output gradient shape {g.shape} != output shape {trace.post[-1].shape}")
    sw = None if sample_weights is None else np.reshape(sample_weights, (-1, 1))
    grads = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        g = g * _activation_grad(layer.activation, trace.pre[k], trace.post[k])
        h = trace.inputs[k]
        h2 = h.reshape(-1, layer.n_in)
        g2 = g.reshape(-1, layer.n_out)
        if sw is not None:
            g2 = g2 * sw
        grads[k] = Layer(h2.T @ g2, g2.sum(axis=0), layer.activation)
        g = g @ layer.weight.T
    return MlpParams(grads), g


def mlp_grad_dict(grads: MlpParams, prefix: str) -> Dict[str, np.ndarray]:
    return grads.parameters(prefix)


def finite_diff_gradient(loss: Callable[[np.ndarray], float], params, step: float = 1e-5):
    """Central differences of ``loss`` around the flat vector ``params``."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.array(params, dtype=np.float64).ravel()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + step
        up = loss(theta.copy())
        theta[i] = orig - step
        down = loss(theta.copy())
        theta[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (up - down) / (2.0 * step)
    return grad


def flatten(params: Dict[str, np.ndarray], keys=None) -> np.ndarray:
    keys = sorted(params) if keys is None else keys
    if not keys:
        return np.zeros(0)
    return np.concatenate([np.ravel(params[k]) for k in keys])


def assign_flat(params: Dict[str, np.ndarray], flat, keys=None) -> None:
    """Write ``flat`` into the live arrays of ``params`` (in ``flatten`` order)."""
    keys = sorted(params) if keys is None else keys
    pos = 0
    for k in keys:
        arr = params[k]
        arr[...] = np.reshape(flat[pos:pos + arr.size], arr.shape)
        pos += arr.size


def add_grads(total: Dict[str, np.ndarray], extra: Dict[str, np.ndarray], scale=1.0):
    for k, v in extra.items():
        if k in total:
            total[k] = total[k] + scale * v
        else:
            total[k] = scale * np.asarray(v, dtype=np.float64)
    return total


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.t.values(), default=0)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: OptimizerState) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected Adam update of every parameter that has a gradient.

    Step counters are kept per parameter so groups updated at different rates
    get their own bias correction. Inputs are not modified.
    """
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise DimensionError(f"gradient for {k} has shape {np.shape(g)}, "
                                 f"parameter has {np.shape(params[k])}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}; step aborted")
    new_params = dict(params)
    new_state = OptimizerState(state.lr, state.beta1, state.beta2, state.eps,
                               dict(state.m), dict(state.v), dict(state.t))
    b1, b2 = state.beta1, state.beta2
    for k in sorted(grads):
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        t = state.t.get(k, 0) + 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[k] = params[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_state.m[k], new_state.v[k], new_state.t[k] = m, v, t
    return new_params, new_state
