"""Gaussian MLP policy and value network with hand-written backprop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
ACTIVATIONS = ("tanh", "linear")

# e in deg/s, delta_e in deg/s per step
DEFAULT_OBS_SCALE = (0.01, 0.01, 0.01, 0.1, 0.1, 0.1)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy(), self.activation)


def _check_chain(layers: list[Layer], in_dim: int):
    d = in_dim
    for i, layer in enumerate(layers):
        if layer.weight.shape[1] != d:
            raise ValueError(f"layer {i} expects {layer.weight.shape[1]} inputs, chain gives {d}")
        d = layer.weight.shape[0]
    if layers[-1].activation != "linear":
        raise ValueError("output layer must be affine")
    return d


@dataclass
class PolicyParams:
    layers: list[Layer]
    log_std: np.ndarray
    obs_scale: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_OBS_SCALE))

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=float)
        self.obs_scale = np.asarray(self.obs_scale, dtype=float)
        out = _check_chain(self.layers, self.obs_scale.shape[0])
        if self.log_std.shape != (out,):
            raise ValueError(f"log_std must have length {out}")

    @property
    def obs_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def act_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Trainable arrays, in a fixed order (weights, biases, log_std)."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out + [self.log_std]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "PolicyParams":
        return PolicyParams([l.copy() for l in self.layers], self.log_std.copy(),
                            self.obs_scale.copy())


@dataclass
class ValueParams:
    layers: list[Layer]
    obs_scale: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_OBS_SCALE))

    def __post_init__(self):
        self.obs_scale = np.asarray(self.obs_scale, dtype=float)
        if _check_chain(self.layers, self.obs_scale.shape[0]) != 1:
            raise ValueError("value network must have a scalar output")

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "ValueParams":
        return ValueParams([l.copy() for l in self.layers], self.obs_scale.copy())


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(rng, sizes, out_gain: float, out_bias: float = 0.0,
             hidden_gain: float = 1.0) -> list[Layer]:
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        w = _orthogonal(rng, n_out, n_in, out_gain if last else hidden_gain)
        b = np.full(n_out, out_bias if last else 0.0)
        layers.append(Layer(w, b, "linear" if last else "tanh"))
    return layers


def init_policy(rng: np.random.Generator, obs_dim: int = 6, act_dim: int = 4,
                hidden=(32, 32), obs_scale=None, log_std: float = 0.0,
                out_bias: float = 0.5) -> PolicyParams:
    if obs_scale is None:
        obs_scale = _default_scale(obs_dim)
    layers = init_mlp(rng, (obs_dim, *hidden, act_dim), out_gain=0.01, out_bias=out_bias)
    return PolicyParams(layers, np.full(act_dim, float(log_std)), obs_scale)


def init_value(rng: np.random.Generator, obs_dim: int = 6, hidden=(32, 32),
               obs_scale=None) -> ValueParams:
    if obs_scale is None:
        obs_scale = _default_scale(obs_dim)
    return ValueParams(init_mlp(rng, (obs_dim, *hidden, 1), out_gain=1.0), obs_scale)


def _default_scale(obs_dim: int) -> np.ndarray:
    if obs_dim == 6:
        return np.asarray(DEFAULT_OBS_SCALE)
    # error plus normalised rotor speeds
    return np.asarray(DEFAULT_OBS_SCALE[:3] + (1.0,) * (obs_dim - 3))


def mlp_forward(layers: list[Layer], obs_scale: np.ndarray, obs):
    """Evaluate the chain; returns ``(output, activations)`` for backprop."""
    x = np.asarray(obs, dtype=float)
    if x.shape[-1] != obs_scale.shape[0]:
        raise ValueError(f"observation has {x.shape[-1]} entries, expected {obs_scale.shape[0]}")
    x = x * obs_scale
    acts = [x]
    for layer in layers:
        x = x @ layer.weight.T + layer.bias
        if layer.activation == "tanh":
            x = np.tanh(x)
        acts.append(x)
    return x, acts


def mlp_backward(layers: list[Layer], acts: list[np.ndarray], grad_out: np.ndarray):
    """Gradients ``[dW0, db0, dW1, db1, ...]`` summed over the batch axis."""
    grads = []
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if layer.activation == "tanh":
            g = g * (1.0 - acts[i + 1] ** 2)
        x_in = acts[i]
        if g.ndim == 1:
            grads.append((np.outer(g, x_in), g.copy()))
        else:
            grads.append((g.T @ x_in, g.sum(axis=0)))
        g = g @ layer.weight
    out = []
    for dw, db in reversed(grads):
        out += [dw, db]
    return out


def forward_mean(params: PolicyParams, obs) -> np.ndarray:
    return mlp_forward(params.layers, params.obs_scale, obs)[0]


def value(vparams: ValueParams, obs) -> np.ndarray:
    return mlp_forward(vparams.layers, vparams.obs_scale, obs)[0][..., 0]


def log_prob(params: PolicyParams, obs, raw) -> np.ndarray:
    mean = forward_mean(params, obs)
    return gaussian_log_prob(mean, params.log_std, raw)


def gaussian_log_prob(mean, log_std, raw) -> np.ndarray:
    z = (np.asarray(raw) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def sample_action(params: PolicyParams, obs, rng: np.random.Generator):
    """Draw ``(raw, clipped, log_prob)``; the log-probability is of ``raw``."""
    mean = forward_mean(params, obs)
    raw = mean + np.exp(params.log_std) * rng.standard_normal(mean.shape)
    return raw, np.clip(raw, 0.0, 1.0), gaussian_log_prob(mean, params.log_std, raw)


def act_deterministic(params: PolicyParams, obs) -> np.ndarray:
    return np.clip(forward_mean(params, obs), 0.0, 1.0)


def log_prob_grad(params: PolicyParams, obs, raw, weights):
    """Gradient of ``sum_t weights[t] * log_prob(obs[t], raw[t])``.

    Returns ``(log_probs, grads)`` with grads ordered as ``params.arrays()``.
    """
    mean, acts = mlp_forward(params.layers, params.obs_scale, obs)
    inv_var = np.exp(-2.0 * params.log_std)
    diff = np.asarray(raw) - mean
    lp = gaussian_log_prob(mean, params.log_std, raw)
    w = np.asarray(weights, dtype=float)[..., None]
    g_mean = w * diff * inv_var
    g_log_std = np.sum(w * (diff * diff * inv_var - 1.0), axis=tuple(range(diff.ndim - 1)))
    return lp, mlp_backward(params.layers, acts, g_mean) + [g_log_std]


def mean_grad(params: PolicyParams, obs, grad_out):
    """Gradient of ``sum(grad_out * forward_mean(obs))`` w.r.t. every mean-network array."""
    _, acts = mlp_forward(params.layers, params.obs_scale, obs)
    return mlp_backward(params.layers, acts, np.asarray(grad_out, dtype=float))


def value_loss_grad(vparams: ValueParams, obs, returns):
    """Mean squared error to ``returns`` and its gradient."""
    out, acts = mlp_forward(vparams.layers, vparams.obs_scale, obs)
    v = out[..., 0]
    err = v - returns
    n = err.size
    loss = float(err @ err / n)
    g = (2.0 / n) * err[..., None]
    return loss, mlp_backward(vparams.layers, acts, g)


def _layers_to_dict(layers):
    return [
        {
            "rows": int(l.weight.shape[0]),
            "cols": int(l.weight.shape[1]),
            "weights": l.weight.ravel().tolist(),
            "bias": l.bias.tolist(),
            "activation": l.activation,
        }
        for l in layers
    ]


def _layers_from_dict(items):
    layers = []
    for i, d in enumerate(items):
        for key in ("rows", "cols", "weights", "bias", "activation"):
            if key not in d:
                raise KeyError(f"layers[{i}].{key}")
        w = np.asarray(d["weights"], dtype=float).reshape(d["rows"], d["cols"])
        layers.append(Layer(w, np.asarray(d["bias"], dtype=float), d["activation"]))
    return layers


def checkpoint_dict(params: PolicyParams, vparams: ValueParams | None = None,
                    metadata: dict | None = None) -> dict:
    d = {
        "obs_dim": params.obs_dim,
        "act_dim": params.act_dim,
        "obs_scale": params.obs_scale.tolist(),
        "layers": _layers_to_dict(params.layers),
        "log_std": params.log_std.tolist(),
        "metadata": dict(metadata or {}),
    }
    if vparams is not None:
        d["value_layers"] = _layers_to_dict(vparams.layers)
    return d


class CheckpointError(ValueError):
    pass


def params_from_checkpoint(d: dict) -> tuple[PolicyParams, ValueParams | None]:
    for key in ("obs_dim", "act_dim", "layers", "log_std"):
        if key not in d:
            raise CheckpointError(f"checkpoint is missing field {key!r}")
    try:
        layers = _layers_from_dict(d["layers"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing field {exc.args[0]!r}") from None
    scale = d.get("obs_scale")
    if scale is None:
        scale = _default_scale(int(d["obs_dim"]))
    params = PolicyParams(layers, d["log_std"], scale)
    if params.obs_dim != d["obs_dim"] or params.act_dim != d["act_dim"]:
        raise CheckpointError("declared obs_dim/act_dim disagree with the layer shapes")
    vparams = None
    if "value_layers" in d:
        vparams = ValueParams(_layers_from_dict(d["value_layers"]), scale)
    return params, vparams
