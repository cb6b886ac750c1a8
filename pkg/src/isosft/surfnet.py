"""Neural parametric surface: an MLP from the unit square to R^3.

The forward pass optionally carries the two input tangents through the
network alongside the values, which gives the exact 3x2 input Jacobian.
The reverse pass walks the same stacked blocks backwards, so a loss that
depends on the Jacobian (e.g. through J^T J) gets its parameter gradient
without finite differences.

Parameters live in one flat float64 vector ``theta``; ``weights`` and
``biases`` are views into it. Weight matrices have shape (out, in).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (ArchitectureMismatch, NonFiniteGradient, OutOfDomain,
                     ParseError)
from .geom import DOMAIN_TOL, read_json

DEFAULT_LAYER_DIMS = (2, 128, 256, 128, 3)
SOFTPLUS_LINEAR_ABOVE = 30.0


def softplus(x):
    x = np.asarray(x, dtype=float)
    safe = np.minimum(x, SOFTPLUS_LINEAR_ABOVE)
    return np.where(x > SOFTPLUS_LINEAR_ABOVE, x, np.log1p(np.exp(safe)))


def sigmoid(x):
    # first derivative of softplus; tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def softplus_second(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def _param_shapes(layer_dims):
    return [((o, i), (o,)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]


def n_params(layer_dims):
    return sum(o * i + o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass
class EvalBundle:
    value: np.ndarray          # (3,) or (B, 3)
    jacobian: np.ndarray       # (3, 2) or (B, 3, 2)
    cache: Optional["ForwardCache"] = None


@dataclass
class ForwardCache:
    n_points: int
    n_tangents: int
    inputs: list               # stacked layer inputs, one per layer
    preacts: list              # stacked pre-activations of hidden layers
    output: np.ndarray


class SurfNet:
    """Softplus MLP ``phi_theta: [0,1]^2 -> R^3``."""

    def __init__(self, layer_dims=DEFAULT_LAYER_DIMS, theta=None, seed=0):
        layer_dims = tuple(int(d) for d in layer_dims)
        if len(layer_dims) < 2 or layer_dims[0] != 2 or layer_dims[-1] != 3:
            raise ValueError("layer_dims must start with 2 and end with 3")
        self.layer_dims = layer_dims
        self.seed = int(seed)
        size = n_params(layer_dims)
        if theta is None:
            theta = self._glorot(layer_dims, self.seed)
        theta = np.array(theta, dtype=float).reshape(-1)
        if theta.shape[0] != size:
            raise ArchitectureMismatch(
                f"theta has {theta.shape[0]} entries, expected {size}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite parameters")
        self.theta = theta
        self._bind_views()

    @staticmethod
    def _glorot(layer_dims, seed):
        rng = np.random.default_rng(seed)
        parts = []
        for (wshape, bshape) in _param_shapes(layer_dims):
            bound = np.sqrt(6.0 / (wshape[0] + wshape[1]))
            parts.append(rng.uniform(-bound, bound, size=wshape).ravel())
            parts.append(np.zeros(bshape))
        return np.concatenate(parts)

    def _bind_views(self):
        self.weights, self.biases = [], []
        k = 0
        for wshape, bshape in _param_shapes(self.layer_dims):
            nw = wshape[0] * wshape[1]
            self.weights.append(self.theta[k:k + nw].reshape(wshape))
            k += nw
            self.biases.append(self.theta[k:k + bshape[0]])
            k += bshape[0]

    @classmethod
    def zeros(cls, layer_dims=DEFAULT_LAYER_DIMS):
        return cls(layer_dims, theta=np.zeros(n_params(layer_dims)))

    def copy(self):
        return SurfNet(self.layer_dims, self.theta.copy(), self.seed)

    def with_theta(self, theta):
        return SurfNet(self.layer_dims, theta, self.seed)

    def same_architecture(self, other):
        return self.layer_dims == other.layer_dims

    # -- evaluation -------------------------------------------------------

    def forward(self, P, jacobian=False) -> ForwardCache:
        """Batched forward pass over an (B, 2) array of domain points."""
        P = np.asarray(P, dtype=float).reshape(-1, 2)
        check_domain(P)
        B = P.shape[0]
        nt = 2 if jacobian else 0
        if jacobian:
            tang = np.zeros((2 * B, 2))
            tang[:B, 0] = 1.0
            tang[B:, 1] = 1.0
            H = np.vstack([P, tang])
        else:
            H = P
        inputs, preacts = [], []
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(H)
            Z = H @ W.T
            Z[:B] += b
            if l == last:
                break
            preacts.append(Z)
            A = softplus(Z[:B])
            if nt:
                s = sigmoid(Z[:B])
                dA = (Z[B:].reshape(nt, B, -1) * s).reshape(nt * B, -1)
                H = np.vstack([A, dA])
            else:
                H = A
        return ForwardCache(B, nt, inputs, preacts, Z)

    def values(self, cache: ForwardCache):
        return cache.output[:cache.n_points]

    def jacobians(self, cache: ForwardCache):
        B = cache.n_points
        if not cache.n_tangents:
            raise ValueError("forward pass was run without tangents")
        out = cache.output
        return np.stack([out[B:2 * B], out[2 * B:3 * B]], axis=2)

    def eval(self, p):
        """phi_theta(p) for one point (2,) or a batch (B, 2)."""
        p = np.asarray(p, dtype=float)
        y = self.values(self.forward(p.reshape(-1, 2)))
        return y[0].copy() if p.ndim == 1 else y.copy()

    def eval_with_jacobian(self, p) -> EvalBundle:
        p = np.asarray(p, dtype=float)
        cache = self.forward(p.reshape(-1, 2), jacobian=True)
        y, J = self.values(cache).copy(), self.jacobians(cache)
        if p.ndim == 1:
            return EvalBundle(y[0], J[0], cache)
        return EvalBundle(y, J, cache)

    # -- reverse pass -----------------------------------------------------

    def backward(self, cache: ForwardCache, g_value, g_jacobian=None):
        """Gradient of a scalar loss w.r.t. ``theta``.

        ``g_value`` (B, 3) and ``g_jacobian`` (B, 3, 2) are the loss's
        partial derivatives with respect to the outputs and the input
        Jacobians of the cached forward pass.
        """
        B, nt = cache.n_points, cache.n_tangents
        g_value = np.asarray(g_value, dtype=float).reshape(B, 3)
        if nt:
            if g_jacobian is None:
                g_jacobian = np.zeros((B, 3, 2))
            g_jacobian = np.asarray(g_jacobian, dtype=float)
            G = np.vstack([g_value, g_jacobian[:, :, 0], g_jacobian[:, :, 1]])
        elif g_jacobian is not None:
            raise ValueError("Jacobian gradient needs a forward pass with "
                             "tangents")
        else:
            G = g_value
        grad = np.empty_like(self.theta)
        views_w, views_b = [], []
        k = 0
        for wshape, bshape in _param_shapes(self.layer_dims):
            nw = wshape[0] * wshape[1]
            views_w.append(grad[k:k + nw].reshape(wshape))
            k += nw
            views_b.append(grad[k:k + bshape[0]])
            k += bshape[0]

        L = len(self.weights)
        for l in range(L - 1, -1, -1):
            if l < L - 1:
                # G holds d loss / d (stacked layer output); pass it through
                # the Softplus of hidden layer l
                Z = cache.preacts[l]
                Zv = Z[:B]
                s = sigmoid(Zv)
                Gv = G[:B]
                if nt:
                    Gt = G[B:].reshape(nt, B, -1)
                    Zt = Z[B:].reshape(nt, B, -1)
                    gZv = Gv * s + (Gt * Zt).sum(axis=0) * (s * (1.0 - s))
                    G = np.vstack([gZv, (Gt * s).reshape(nt * B, -1)])
                else:
                    G = Gv * s
            np.matmul(G.T, cache.inputs[l], out=views_w[l])
            views_b[l][:] = G[:B].sum(axis=0)
            if l:
                G = G @ self.weights[l]
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient("non-finite entries in parameter gradient")
        return grad

    # -- persistence ------------------------------------------------------

    def to_dict(self):
        return {"layer_dims": list(self.layer_dims),
                "seed": self.seed,
                "weights": [W.tolist() for W in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, data):
        try:
            dims = tuple(data["layer_dims"])
            parts = []
            for W, b in zip(data["weights"], data["biases"]):
                parts.append(np.asarray(W, dtype=float).ravel())
                parts.append(np.asarray(b, dtype=float).ravel())
            theta = np.concatenate(parts) if parts else np.zeros(0)
            return cls(dims, theta, data.get("seed", 0))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ArchitectureMismatch):
                raise
            raise ParseError(f"bad checkpoint: {exc}") from exc


def check_domain(P):
    if P.size and (P.min() < -DOMAIN_TOL or P.max() > 1.0 + DOMAIN_TOL):
        raise OutOfDomain("domain points must lie in [0, 1]^2")


def backprop_scalar(net: SurfNet, terms):
    """Sum parameter gradients of several loss terms.

    ``terms`` is an iterable of ``(cache, g_value, g_jacobian)`` triples;
    gradients are accumulated in the given order.
    """
    total = np.zeros_like(net.theta)
    for cache, g_value, g_jac in terms:
        total += net.backward(cache, g_value, g_jac)
    return total


def save_checkpoint(path, net: SurfNet, template_metrics=None, extra=None):
    data = net.to_dict()
    if template_metrics is not None:
        data["template_metrics"] = np.asarray(template_metrics).tolist()
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_checkpoint(path):
    """Return ``(net, template_metrics or None, raw dict)``."""
    data = read_json(path)
    net = SurfNet.from_dict(data)
    metrics = data.get("template_metrics")
    if metrics is not None:
        metrics = np.asarray(metrics, dtype=float)
    return net, metrics, data
