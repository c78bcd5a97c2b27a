"""Dense networks with hand-written reverse-mode gradients, plus SGD/Adam."""

from __future__ import annotations

import hashlib
import itertools
import json

import numpy as np

ACTIVATIONS = ("relu", "identity")
_net_ids = itertools.count()


class ShapeError(ValueError):
    pass


class PoisonedUpdateError(FloatingPointError):
    """Raised when an optimizer step would write non-finite values."""


class ForwardMismatchError(RuntimeError):
    pass


class Cache:
    __slots__ = ("net_id", "version", "inputs", "pre")

    def __init__(self, net_id, version, inputs, pre):
        self.net_id = net_id
        self.version = version
        self.inputs = inputs
        self.pre = pre


class DenseNet:
    """Stack of affine layers; ``activations[i]`` is applied after layer ``i``.

    Parameters live in ``self.params`` as ``[W0, b0, W1, b1, ...]`` with
    ``W`` of shape ``(fan_in, fan_out)``.  Inputs are batches ``(n, fan_in)``.
    """

    def __init__(self, widths, activations=None, rng=None, params=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ShapeError("need at least input and output widths")
        if activations is None:
            activations = ["relu"] * (len(widths) - 2) + ["identity"]
        if len(activations) != len(widths) - 1 or any(a not in ACTIVATIONS for a in activations):
            raise ShapeError(f"bad activation list {activations!r}")
        self.widths = widths
        self.activations = list(activations)
        self.id = next(_net_ids)
        self.version = 0
        if params is not None:
            self.params = [np.array(p, dtype=np.float64) for p in params]
            for k, (fi, fo) in enumerate(zip(widths, widths[1:])):
                if self.params[2 * k].shape != (fi, fo) or self.params[2 * k + 1].shape != (fo,):
                    raise ShapeError("parameter shapes do not match widths")
        else:
            rng = np.random.default_rng() if rng is None else rng
            self.params = []
            for fi, fo in zip(widths, widths[1:]):
                lim = np.sqrt(6.0 / (fi + fo))
                self.params.append(rng.uniform(-lim, lim, size=(fi, fo)))
                self.params.append(np.zeros(fo))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def forward(self, x):
        """Returns ``(y, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ShapeError(f"expected input (n, {self.widths[0]}), got {x.shape}")
        inputs, pre = [], []
        h = x
        for k in range(self.n_layers):
            inputs.append(h)
            a = h @ self.params[2 * k] + self.params[2 * k + 1]
            pre.append(a)
            h = np.maximum(a, 0.0) if self.activations[k] == "relu" else a
        return h, Cache(self.id, self.version, inputs, pre)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: Cache, grad_out):
        """Parameter gradients and input gradient for upstream ``grad_out``."""
        if cache.net_id != self.id or cache.version != self.version:
            raise ForwardMismatchError("cache does not belong to this network's current parameters")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != cache.pre[-1].shape:
            raise ShapeError(f"upstream gradient shape {g.shape} != output {cache.pre[-1].shape}")
        grads = [None] * len(self.params)
        for k in reversed(range(self.n_layers)):
            if self.activations[k] == "relu":
                g = g * (cache.pre[k] > 0)
            grads[2 * k] = cache.inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
        return grads, g

    def bump(self):
        """Mark parameters as changed so stale caches are rejected."""
        self.version += 1

    def copy(self) -> "DenseNet":
        return DenseNet(self.widths, self.activations, params=[p.copy() for p in self.params])

    def load_from(self, other: "DenseNet"):
        for p, q in zip(self.params, other.params):
            p[...] = q
        self.bump()

    def to_dict(self) -> dict:
        return {"widths": self.widths, "activations": self.activations,
                "params": [p.tolist() for p in self.params]}

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNet":
        return cls(doc["widths"], doc["activations"], params=doc["params"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DenseNet":
        return cls.from_dict(json.loads(text))


def forward(net: DenseNet, x):
    return net.forward(x)[0]


def backward(net: DenseNet, cache: Cache, upstream):
    return net.backward(cache, upstream)


def stop_gradient(x):
    """Identity in the forward pass; its backward is :func:`stop_gradient_backward`."""
    return np.array(x, dtype=np.float64, copy=True)


def stop_gradient_backward(upstream):
    return np.zeros_like(np.asarray(upstream, dtype=np.float64))


class SGD:
    def __init__(self, lr=1e-2):
        self.method = "sgd"
        self.lr = lr

    def step(self, params, grads):
        _check_finite(params, grads)
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.method = "adam"
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        _check_finite(params, grads)
        if any(m.shape != p.shape for m, p in zip(self.m, params)):
            raise ShapeError("moment buffers do not match parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_finite(params, grads):
    if len(params) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedUpdateError("non-finite gradient; update refused")


def optimize_step(optimizer, nets, grads):
    """Apply one optimizer step to the concatenated parameters of ``nets``."""
    params = [p for net in nets for p in net.params]
    flat = [g for gs in grads for g in gs]
    optimizer.step(params, flat)
    for net in nets:
        net.bump()


def parameter_checksum(*nets) -> str:
    h = hashlib.sha256()
    for net in nets:
        h.update(json.dumps([net.widths, net.activations]).encode())
        for p in net.params:
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()
