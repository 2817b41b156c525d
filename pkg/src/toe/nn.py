"""Layers with explicit forward/backward passes over numpy arrays.

Every layer keeps the activations it needs from its last ``forward`` call and
accumulates parameter gradients into a shared :class:`ParameterStore` during
``backward``.  Weights are stored ``[in, out]``.
"""

from __future__ import annotations

import math

import numpy as np


class ParameterStore:
    """Named parameters with one gradient buffer each."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, value in self.params.items():
            out.add(name, value.copy())
        return out

    def load(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(values)
        unexpected = set(values) - set(self.params)
        if missing or unexpected:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in values.items():
            if value.shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {self.params[name].shape}")
            self.params[name][...] = value


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``bound`` stds."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


class Layer:
    def __init__(self, store: ParameterStore, name: str):
        self.store = store
        self.name = name
        self._cache = None

    def p(self, key: str) -> np.ndarray:
        return self.store.params[f"{self.name}.{key}"]

    def g(self, key: str) -> np.ndarray:
        return self.store.grads[f"{self.name}.{key}"]

    def _take_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache


class Linear(Layer):
    def __init__(self, store, name, fan_in, fan_out, rng, dtype=np.float64):
        super().__init__(store, name)
        store.add(f"{name}.weight", trunc_normal(rng, (fan_in, fan_out)).astype(dtype))
        store.add(f"{name}.bias", np.zeros(fan_out, dtype=dtype))

    def forward(self, x):
        self._cache = x
        return x @ self.p("weight") + self.p("bias")

    def backward(self, dy):
        x = self._take_cache()
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.g("weight")[...] += x2.T @ dy2
        self.g("bias")[...] += dy2.sum(axis=0)
        return dy @ self.p("weight").T


class LayerNorm(Layer):
    def __init__(self, store, name, dim, eps=1e-6, dtype=np.float64):
        super().__init__(store, name)
        self.eps = eps
        store.add(f"{name}.weight", np.ones(dim, dtype=dtype))
        store.add(f"{name}.bias", np.zeros(dim, dtype=dtype))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.p("weight") + self.p("bias")

    def backward(self, dy):
        xhat, inv = self._take_cache()
        n = xhat.shape[-1]
        self.g("weight")[...] += (dy * xhat).reshape(-1, n).sum(axis=0)
        self.g("bias")[...] += dy.reshape(-1, n).sum(axis=0)
        dxhat = dy * self.p("weight")
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Layer):
    """tanh approximation of GELU."""

    def __init__(self, name="gelu"):
        super().__init__(None, name)

    def forward(self, x):
        u = _GELU_C * (x + 0.044715 * (x * x * x))
        t = np.tanh(u)
        self._cache = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, dy):
        x, t = self._take_cache()
        du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    labels = np.asarray(labels)
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


class Attention(Layer):
    def __init__(self, store, name, dim, heads, rng, dtype=np.float64):
        super().__init__(store, name)
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(store, f"{name}.qkv", dim, 3 * dim, rng, dtype)
        self.proj = Linear(store, f"{name}.proj", dim, dim, rng, dtype)
        self.last_probs = None

    def forward(self, x):
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv.forward(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # [b, h, n, dh]
        probs = softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale)
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        self._cache = (q, k, v, probs)
        self.last_probs = probs
        return self.proj.forward(out)

    def backward(self, dy):
        q, k, v, probs = self._take_cache()
        b, h, n, dh = q.shape
        dout = self.proj.backward(dy).reshape(b, n, h, dh).transpose(0, 2, 1, 3)
        dprobs = dout @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dout
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * self.scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(b, n, 3 * h * dh)
        return self.qkv.backward(dqkv)


class MLP(Layer):
    def __init__(self, store, name, dim, hidden, rng, dtype=np.float64):
        super().__init__(store, name)
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden, rng, dtype)
        self.act = GELU(f"{name}.act")
        self.fc2 = Linear(store, f"{name}.fc2", hidden, dim, rng, dtype)

    def forward(self, x):
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class Block(Layer):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, store, name, dim, heads, mlp_ratio, rng, dtype=np.float64):
        super().__init__(store, name)
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim, dtype=dtype)
        self.attn = Attention(store, f"{name}.attn", dim, heads, rng, dtype)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim, dtype=dtype)
        self.mlp = MLP(store, f"{name}.mlp", dim, int(round(dim * mlp_ratio)), rng, dtype)

    def forward(self, x):
        x = x + self.attn.forward(self.norm1.forward(x))
        return x + self.mlp.forward(self.norm2.forward(x))

    def backward(self, dy):
        dy = dy + self.norm2.backward(self.mlp.backward(dy))
        return dy + self.norm1.backward(self.attn.backward(dy))
