"""Minimal multilayer perceptron with explicit backpropagation."""

from __future__ import annotations

import copy

import numpy as np


class MLP:
    """Affine layers with tanh between them; the output layer is linear.

    Parameters are stored as ``[W1, b1, W2, b2, ...]`` with ``W`` of shape
    (fan_in, fan_out), so a forward pass is ``X @ W + b``.
    """

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None, params=None):
        self.sizes = list(sizes)
        if params is not None:
            self.params = [np.array(p, dtype=float) for p in params]
            return
        rng = rng or np.random.default_rng(0)
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, list]:
        acts = [X]
        h = X
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ W + b
            if i < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, acts: list, dout: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of a scalar loss w.r.t. parameters and input, given dL/d(output)."""
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = dout
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g

    def copy(self) -> "MLP":
        return MLP(self.sizes, params=copy.deepcopy(self.params))

    def to_dict(self) -> dict:
        layers = []
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            layers.append({"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()})
        return {"sizes": self.sizes, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        params = []
        for layer in d["layers"]:
            params.append(np.array(layer["weights"], dtype=float).reshape(layer["shape"]))
            params.append(np.array(layer["bias"], dtype=float))
        return cls(d["sizes"], params=params)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def load_flat(self, v: np.ndarray) -> None:
        pos = 0
        for i, p in enumerate(self.params):
            self.params[i] = np.asarray(v[pos : pos + p.size], dtype=float).reshape(p.shape).copy()
            pos += p.size


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class AdamW:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
