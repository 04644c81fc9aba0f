"""Small fully connected networks with hand-written reverse mode.

A network may carry a leading ensemble axis so that one array operation
evaluates an independent network per agent: weights then have shape
``(E, in, out)``, biases ``(E, 1, out)`` and inputs ``(E, B, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np


@dataclass
class MLP:
    sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    ensemble: Optional[int] = None

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> List[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        self.weights = [np.array(p, dtype=float) for p in params[0::2]]
        self.biases = [np.array(p, dtype=float) for p in params[1::2]]

    def copy(self) -> "MLP":
        return MLP(list(self.sizes), [W.copy() for W in self.weights], [b.copy() for b in self.biases], self.ensemble)

    def n_params(self) -> int:
        return sum(p[0].size if self.ensemble else p.size for p in self.params())


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, ensemble: Optional[int] = None, out_scale: float = 1.0) -> MLP:
    """Uniform fan-in initialization; the output layer is scaled by ``out_scale``."""
    sizes = [int(s) for s in sizes]
    lead = () if ensemble is None else (ensemble,)
    Ws, bs = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = 1.0 / np.sqrt(fan_in)
        if k == len(sizes) - 2:
            lim *= out_scale
        Ws.append(rng.uniform(-lim, lim, lead + (fan_in, fan_out)))
        bshape = (fan_out,) if ensemble is None else (ensemble, 1, fan_out)
        bs.append(rng.uniform(-lim, lim, bshape))
    return MLP(sizes, Ws, bs, ensemble)


def zeros_like_mlp(net: MLP) -> MLP:
    return MLP(list(net.sizes), [np.zeros_like(W) for W in net.weights], [np.zeros_like(b) for b in net.biases], net.ensemble)


def _check_input(net: MLP, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {net.sizes[0]}")
    if net.ensemble is not None and (x.ndim != 3 or x.shape[0] != net.ensemble):
        raise ValueError(f"ensemble input must have shape ({net.ensemble}, B, {net.sizes[0]}), got {x.shape}")
    return x


def mlp_forward(net: MLP, x, cache: bool = False):
    """Rectifier hidden layers, identity output.

    With ``cache=True`` returns ``(y, cache)`` for :func:`mlp_backward`.
    Layer outputs are built in place: fresh large temporaries are costly.
    """
    h = _check_input(net, x)
    inputs = []
    last = net.n_layers - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ W
        z += b
        if k != last:
            np.maximum(z, 0.0, out=z)
        h = z
    if cache:
        return h, inputs
    return h


def mlp_backward(net: MLP, cache, grad_out):
    """Reverse-mode gradients of ``sum(grad_out * y)``.

    Returns ``(param_grads, grad_x)`` with ``param_grads`` ordered like
    :meth:`MLP.params`.  A hidden unit is active where its rectified output
    is positive, which is where its pre-activation is.
    """
    inputs = cache
    g = np.asarray(grad_out, dtype=float)
    grads: List[np.ndarray] = [None] * (2 * net.n_layers)
    for k in range(net.n_layers - 1, -1, -1):
        if k != net.n_layers - 1:
            g *= inputs[k + 1] > 0.0  # g is our own array here
        x = inputs[k]
        if x.ndim == 1:
            dW = np.outer(x, g)
            db = g.copy()
        else:
            x2 = x.reshape(-1, x.shape[-1]) if net.ensemble is None else x
            g2 = g.reshape(-1, g.shape[-1]) if net.ensemble is None else g
            dW = np.swapaxes(x2, -1, -2) @ g2
            db = g2.sum(axis=-2, keepdims=net.ensemble is not None)
        grads[2 * k] = dW
        grads[2 * k + 1] = db
        g = g @ np.swapaxes(net.weights[k], -1, -2)
    return grads, g


def global_norm(grads: Sequence[np.ndarray], ensemble: Optional[int] = None) -> np.ndarray:
    """Euclidean norm over all gradient arrays, per ensemble member if present."""
    if ensemble is None:
        return np.sqrt(sum(float((g * g).sum()) for g in grads))
    return np.sqrt(sum((g * g).reshape(ensemble, -1).sum(axis=1) for g in grads))


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float, ensemble: Optional[int] = None):
    norm = global_norm(grads, ensemble)
    scale = np.minimum(1.0, max_norm / np.maximum(norm, 1e-300))
    if ensemble is None:
        return [g * scale for g in grads], norm
    out = []
    for g in grads:
        out.append(g * scale.reshape((ensemble,) + (1,) * (g.ndim - 1)))
    return out, norm


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float, ascend: bool = False) -> None:
    sign = lr if ascend else -lr
    for p, g in zip(params, grads):
        p += sign * g
