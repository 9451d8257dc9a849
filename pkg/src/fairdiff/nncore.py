"""Dense MLP substrate: forward/backward passes, Adam, and gradient checking.

Everything runs in float64 on numpy. Randomness always flows through named
Philox streams so that training runs are bit-reproducible and parallel-safe.
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError

ACTIVATIONS = ("tanh", "relu", "identity")


def named_stream(seed: int, *labels) -> np.random.Generator:
    """Return a counter-based RNG keyed by (seed, labels).

    Distinct labels give statistically independent streams; the same
    (seed, labels) pair always yields the same stream.
    """
    tag = "/".join(str(x) for x in labels)
    digest = hashlib.sha256(
        tag.encode("utf-8") + int(seed).to_bytes(16, "little", signed=True)
    ).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    raise ConfigError(f"unknown activation {name!r}")


def _act_deriv_from_output(name: str, h: np.ndarray) -> np.ndarray:
    # tanh and relu derivatives are recoverable from the post-activation value
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (h > 0.0).astype(float)
    if name == "identity":
        return np.ones_like(h)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass
class Layer:
    """One dense layer: y = act(x @ weight + bias)."""

    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ConfigError("layer weight/bias shapes do not chain")


@dataclass
class Mlp:
    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def dims(self) -> list[int]:
        return [self.in_dim] + [l.weight.shape[1] for l in self.layers]


def build_mlp(dims: list[int], activations: list[str], rng: np.random.Generator) -> Mlp:
    """Glorot-uniform initialized MLP with the given layer widths."""
    if len(activations) != len(dims) - 1:
        raise ConfigError("need one activation per layer")
    layers = []
    for d_in, d_out, act in zip(dims[:-1], dims[1:], activations):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_in, d_out))
        b = np.zeros(d_out)
        layers.append(Layer(w, b, act))
    return Mlp(layers)


@dataclass
class ForwardCache:
    """Per-layer activations kept for the exact backward pass."""

    acts: list[np.ndarray]  # acts[0] is the input, acts[-1] the output
    dims: list[int]
    single: bool  # input was 1-D


@dataclass
class MlpGrads:
    """Parameter gradients plus the gradient w.r.t. the network input."""

    layers: list[tuple[np.ndarray, np.ndarray]]  # (d_weight, d_bias) per layer
    d_input: np.ndarray


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != mlp.in_dim:
        raise ValueError(f"input has dim {a.shape[1]}, network expects {mlp.in_dim}")
    acts = [a]
    for layer in mlp.layers:
        z = a @ layer.weight + layer.bias
        a = _act(layer.activation, z)
        acts.append(a)
    cache = ForwardCache(acts, mlp.dims(), single)
    out = acts[-1][0] if single else acts[-1]
    return out, cache


def mlp_backward(mlp: Mlp, cache: ForwardCache, d_output: np.ndarray) -> MlpGrads:
    """Exact reverse-mode gradients of mlp_forward.

    d_output is the loss gradient at the network output; batch rows are
    summed into the parameter gradients.
    """
    if cache.dims != mlp.dims():
        raise ValueError("forward cache does not match this network")
    g = np.atleast_2d(np.asarray(d_output, dtype=float))
    if g.shape != cache.acts[-1].shape:
        raise ValueError("d_output shape does not match cached forward output")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(mlp.layers)
    for idx in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[idx]
        h = cache.acts[idx + 1]
        g = g * _act_deriv_from_output(layer.activation, h)
        a_in = cache.acts[idx]
        grads[idx] = (a_in.T @ g, g.sum(axis=0))
        g = g @ layer.weight.T
    d_input = g[0] if cache.single else g
    return MlpGrads(grads, d_input)


def mlp_params(mlp: Mlp) -> list[np.ndarray]:
    """Flat parameter list [W0, b0, W1, b1, ...]; arrays are live views."""
    out = []
    for layer in mlp.layers:
        out.append(layer.weight)
        out.append(layer.bias)
    return out


def grads_as_list(grads: MlpGrads) -> list[np.ndarray]:
    out = []
    for dw, db in grads.layers:
        out.append(dw)
        out.append(db)
    return out


def zero_grads_like(params: list[np.ndarray]) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in params]


def accumulate(target: list[np.ndarray], grads: list[np.ndarray]) -> None:
    for t, g in zip(target, grads):
        t += g


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, one slot per parameter array."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: list[np.ndarray], lr: float) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        t=0,
        lr=lr,
    )


def adam_update(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One in-place Adam step; returns the updated (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def grad_check(
    loss_fn,
    params: list[np.ndarray],
    h: float = 1e-5,
    max_full_coords: int = 600,
    sample_size: int = 300,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn(params) must return (loss, grads) with grads aligned to params.
    All coordinates are checked when there are at most max_full_coords of
    them; otherwise a deterministic sample of at least 200 is used.
    """
    _, analytic = loss_fn(params)
    sizes = [p.size for p in params]
    total = sum(sizes)
    if total <= max_full_coords:
        coords = np.arange(total)
    else:
        rng = named_stream(seed, "grad-check")
        coords = rng.choice(total, size=max(200, min(sample_size, total)), replace=False)
        coords.sort()
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for flat_idx in coords:
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = int(flat_idx - offsets[k])
        p = params[k].reshape(-1)
        saved = p[local]
        p[local] = saved + h
        plus, _ = loss_fn(params)
        p[local] = saved - h
        minus, _ = loss_fn(params)
        p[local] = saved
        numeric = (plus - minus) / (2.0 * h)
        a = analytic[k].reshape(-1)[local]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
        worst = max(worst, rel)
    return worst


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").astype(float).reshape(shape)


def mlp_to_dict(mlp: Mlp) -> dict:
    """Portable container: layer dims, activations, raw float64 parameters."""
    return {
        "dims": mlp.dims(),
        "activations": [l.activation for l in mlp.layers],
        "weights": [_encode_array(l.weight) for l in mlp.layers],
        "biases": [_encode_array(l.bias) for l in mlp.layers],
    }


def mlp_from_dict(d: dict) -> Mlp:
    dims = d["dims"]
    layers = []
    for i, act in enumerate(d["activations"]):
        w = _decode_array(d["weights"][i], (dims[i], dims[i + 1]))
        b = _decode_array(d["biases"][i], (dims[i + 1],))
        layers.append(Layer(w, b, act))
    return Mlp(layers)
