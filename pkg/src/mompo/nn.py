"""Minimal feedforward networks with reverse-mode gradients and Adam.

The architecture family is deliberately closed: linear layers with ELU hidden
activations, optionally layer normalization of the first layer followed by a
hyperbolic tangent, and a linear output layer. Gradients are computed by an
explicit backward pass over this fixed layer graph — there is no general tape.
All parameters live in one flat float64 vector so policies and critics can be
snapshotted, interpolated, and optimized uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["FeedForwardNet", "AdamState", "grad", "adam_step", "elu", "softplus", "sigmoid"]

_LN_EPS = 1e-5


def elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, z, np.expm1(z))


def elu_deriv(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


def softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z), stable for large |z|
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class FeedForwardNet:
    """MLP over a flat parameter vector.

    layer_sizes = (in_dim, h1, ..., out_dim). Weights are initialized uniform
    scaled by 1/sqrt(fan_in), biases zero. With layer_norm_first=True the first
    hidden pre-activation is layer-normalized (learned gain/bias) and passed
    through tanh instead of ELU.
    """

    def __init__(self, layer_sizes, *, layer_norm_first: bool = False, rng=None):
        layer_sizes = tuple(int(s) for s in layer_sizes)
        if len(layer_sizes) < 2:
            raise ValueError("need at least (in_dim, out_dim)")
        if layer_norm_first and len(layer_sizes) < 3:
            raise ValueError("layer_norm_first requires at least one hidden layer")
        self.layer_sizes = layer_sizes
        self.layer_norm_first = layer_norm_first

        self._slices = []  # [(w_slice, b_slice, fan_in, fan_out)]
        off = 0
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            w = slice(off, off + fan_in * fan_out)
            off += fan_in * fan_out
            b = slice(off, off + fan_out)
            off += fan_out
            self._slices.append((w, b, fan_in, fan_out))
        if layer_norm_first:
            h1 = layer_sizes[1]
            self._ln_gain = slice(off, off + h1)
            off += h1
            self._ln_bias = slice(off, off + h1)
            off += h1
        self.n_params = off

        self.params = np.zeros(self.n_params, dtype=np.float64)
        if rng is not None:
            for w, b, fan_in, fan_out in self._slices:
                scale = 1.0 / np.sqrt(fan_in)
                self.params[w] = rng.uniform(-scale, scale, size=fan_in * fan_out)
        if layer_norm_first:
            self.params[self._ln_gain] = 1.0

    # -- parameter access -------------------------------------------------

    def weight(self, layer: int) -> np.ndarray:
        w, _, fan_in, fan_out = self._slices[layer]
        return self.params[w].reshape(fan_out, fan_in)

    def bias(self, layer: int) -> np.ndarray:
        return self.params[self._slices[layer][1]]

    def get_params(self) -> np.ndarray:
        return self.params.copy()

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params.copy()

    def clone(self) -> "FeedForwardNet":
        other = FeedForwardNet(self.layer_sizes, layer_norm_first=self.layer_norm_first)
        other.params = self.params.copy()
        return other

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward_cached(self, x: np.ndarray):
        """Returns (output, cache) with cache holding what backward needs."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input dim {h.shape[1]} != {self.layer_sizes[0]}")

        cache = {"inputs": [], "pre": [], "ln": None, "single": single}
        n_layers = len(self._slices)
        for l in range(n_layers):
            cache["inputs"].append(h)
            z = h @ self.weight(l).T + self.bias(l)
            cache["pre"].append(z)
            if l == n_layers - 1:
                h = z  # linear output
            elif l == 0 and self.layer_norm_first:
                mu = z.mean(axis=1, keepdims=True)
                d = z - mu
                var = (d * d).mean(axis=1, keepdims=True)
                inv = 1.0 / np.sqrt(var + _LN_EPS)
                u = d * inv
                t = u * self.params[self._ln_gain] + self.params[self._ln_bias]
                h = np.tanh(t)
                cache["ln"] = (d, inv, u, h)
            else:
                h = elu(z)
        y = h
        return (y[0] if single else y), cache

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: gradient of sum(grad_out * output) w.r.t.
        the flat parameter vector."""
        grad_out = np.asarray(grad_out, dtype=np.float64)
        g = grad_out[None, :] if cache["single"] else grad_out
        grads = np.zeros_like(self.params)
        n_layers = len(self._slices)
        for l in reversed(range(n_layers)):
            if l == n_layers - 1:
                dz = g
            elif l == 0 and self.layer_norm_first:
                d, inv, u, h = cache["ln"]
                dt = g * (1.0 - h * h)  # through tanh
                gain = self.params[self._ln_gain]
                grads[self._ln_gain] = (dt * u).sum(axis=0)
                grads[self._ln_bias] = dt.sum(axis=0)
                du = dt * gain
                H = d.shape[1]
                dvar = (du * d).sum(axis=1, keepdims=True) * (-0.5) * inv**3
                dmu = (-du * inv).sum(axis=1, keepdims=True)
                dz = du * inv + dvar * (2.0 * d / H) + dmu / H
            else:
                dz = g * elu_deriv(cache["pre"][l])
            h_in = cache["inputs"][l]
            w_sl, b_sl, fan_in, fan_out = self._slices[l]
            grads[w_sl] = (dz.T @ h_in).ravel()
            grads[b_sl] = dz.sum(axis=0)
            g = dz @ self.weight(l)
        return grads


def grad(net: FeedForwardNet, inputs: np.ndarray, loss_fn) -> tuple[float, np.ndarray]:
    """Reverse-mode gradient of a scalar loss w.r.t. all net parameters.

    loss_fn maps the net output to (loss, dloss/doutput). Returns (loss, grad).
    Raises on a non-finite loss.
    """
    y, cache = net.forward_cached(inputs)
    loss, grad_out = loss_fn(y)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss: {loss}")
    return float(loss), net.backward(cache, grad_out)


@dataclass
class AdamState:
    """Adam moments and step counter for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    eps: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def for_params(cls, n: int, lr: float = 3e-4, eps: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr, eps=eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float | None = None) -> np.ndarray:
    """One Adam update with bias correction. Mutates params in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    if lr is None:
        lr = state.lr
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = state.m / (1.0 - state.beta1**state.step)
    vhat = state.v / (1.0 - state.beta2**state.step)
    params -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params
