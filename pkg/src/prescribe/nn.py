"""Minimal dense networks with hand-written backpropagation and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Mlp:
    """Stack of affine layers. ``activations[i]`` follows layer ``i``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]

    @classmethod
    def init(cls, sizes, activations, rng: np.random.Generator, out_scale: float = 1.0) -> "Mlp":
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = np.sqrt(2.0) if activations[i] == "relu" else 1.0
            W = rng.normal(0.0, gain / np.sqrt(fan_in), (fan_in, fan_out))
            if i == len(sizes) - 2:
                W *= out_scale
            weights.append(W)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, tuple(activations))

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, list]:
        cache = []
        a = X
        for W, b, name in zip(self.weights, self.biases, self.activations):
            z = a @ W + b
            out = _act(name, z)
            cache.append((a, z, out))
            a = out
        return a, cache

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, cache: list, d_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients ordered like :attr:`params`, plus the gradient w.r.t. the input."""
        grads = [None] * (2 * len(self.weights))
        d = d_out
        for i in reversed(range(len(self.weights))):
            a_in, z, out = cache[i]
            dz = d * _act_grad(self.activations[i], z, out)
            grads[2 * i] = a_in.T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            d = dz @ self.weights[i].T
        return grads, d

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.activations)

    def to_dict(self) -> dict:
        return {
            "activations": list(self.activations),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        return cls(
            [np.asarray(W, dtype=float) for W in doc["weights"]],
            [np.asarray(b, dtype=float) for b in doc["biases"]],
            tuple(doc["activations"]),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def numeric_gradient(loss_fn, params: list[np.ndarray], eps: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. each array in ``params`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            up = loss_fn()
            p[i] = old - eps
            down = loss_fn()
            p[i] = old
            g[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / (|a| + |b|)`` in Euclidean norm."""
    return float(np.linalg.norm(a - b) / max(1e-12, np.linalg.norm(a) + np.linalg.norm(b)))
