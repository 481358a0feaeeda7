"""Dense-tensor numerics with a fixed op set and hand-written backward passes.

All math is float64. There is no autodiff graph: each layer caches what its
own backward pass needs, and composite models call backwards in reverse
order by hand. Gradients accumulate into ``Parameter.grad`` and are zeroed
explicitly between optimizer steps.

``grad_check`` verifies any forward/backward pair against central finite
differences and is the workhorse oracle for the whole model stack.
"""

import math

import numpy as np

from . import kernels

Tensor = np.ndarray  # float64, C-order, row-major


class ShapeError(ValueError):
    pass


def tensor(data, shape=None) -> Tensor:
    """Coerce to a float64 C-contiguous array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"cannot view {arr.size} values as shape {tuple(shape)}")
        arr = arr.reshape(shape)
    return arr


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


class Parameter:
    """A trainable array with a same-shaped gradient accumulator."""

    def __init__(self, value, name: str = ""):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.value.shape})"


class Module:
    """Base class: recursive parameter discovery over attributes and lists."""

    def named_parameters(self, prefix: str = ""):
        items = []
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = prefix + key
            if isinstance(val, Parameter):
                items.append((path, val))
            elif isinstance(val, Module):
                items.extend(val.named_parameters(path + "."))
            elif isinstance(val, (list, tuple)):
                for i, elt in enumerate(val):
                    if isinstance(elt, Parameter):
                        items.append((f"{path}.{i}", elt))
                    elif isinstance(elt, Module):
                        items.extend(elt.named_parameters(f"{path}.{i}."))
        return items

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


# ---------------------------------------------------------------------------
# stateless math


def fourier_features(x, n_bands: int) -> Tensor:
    """Per-element [sin(2^j pi x), cos(2^j pi x)] pairs, j = 0..n_bands-1.

    Output shape is x.shape + (2*n_bands,). Periodic with period 2 in x.
    """
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape + (2 * n_bands,), dtype=np.float64)
    for j in range(n_bands):
        arg = (2.0**j) * np.pi * x
        out[..., 2 * j] = np.sin(arg)
        out[..., 2 * j + 1] = np.cos(arg)
    return out


def fourier_features_vjp(x, n_bands: int, d_out) -> Tensor:
    """d(fourier_features)/dx contracted with d_out (last axis 2*n_bands)."""
    x = np.asarray(x, dtype=np.float64)
    dx = np.zeros_like(x)
    for j in range(n_bands):
        w = (2.0**j) * np.pi
        arg = w * x
        dx += w * (np.cos(arg) * d_out[..., 2 * j] - np.sin(arg) * d_out[..., 2 * j + 1])
    return dx


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _value(p):
    return p.value if isinstance(p, Parameter) else np.asarray(p, dtype=np.float64)


def linear(x, weight, bias) -> Tensor:
    """y = x @ W + b over the last axis (pure function; Linear is the trainable op)."""
    x = np.asarray(x, dtype=np.float64)
    w, b = _value(weight), _value(bias)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with W {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: b {b.shape} incompatible with W {w.shape}")
    return x @ w + b


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    x = np.asarray(x, dtype=np.float64)
    g, b = _value(gamma), _value(beta)
    if g.shape != (x.shape[-1],) or b.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma {g.shape} / beta {b.shape} vs x {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def attention_core(q, k, v) -> Tensor:
    """softmax(Q Kᵀ / sqrt(d)) V for single sequences Q [n,d], K,V [m,d]."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention_core expects 2-d inputs, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention_core: Q {q.shape}, K {k.shape}, V {v.shape}")
    if q.shape[1] < 1:
        raise ShapeError("attention_core: feature dim must be positive")
    out, _ = kernels.attention_forward(q[None], k[None], v[None], 1.0 / math.sqrt(q.shape[1]))
    return out[0]


# ---------------------------------------------------------------------------
# trainable layers


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, zero: bool = False):
        if zero or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out))
        self._x = None

    def forward(self, x) -> Tensor:
        self._x = x = np.asarray(x, dtype=np.float64)
        return linear(x, self.weight, self.bias)

    def backward(self, d_out) -> Tensor:
        x = self._x
        x2 = x.reshape(-1, x.shape[-1])
        d2 = d_out.reshape(-1, d_out.shape[-1])
        self.weight.grad += x2.T @ d2
        self.bias.grad += d2.sum(axis=0)
        return d_out @ self.weight.value.T


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps
        self._cache = None

    def forward(self, x) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, d_out) -> Tensor:
        xhat, inv_std = self._cache
        axes = tuple(range(d_out.ndim - 1))
        self.gamma.grad += (d_out * xhat).sum(axis=axes)
        self.beta.grad += d_out.sum(axis=axes)
        dxhat = d_out * self.gamma.value
        # dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv_std * (dxhat - m1 - xhat * m2)


class Embedding(Module):
    def __init__(self, n_rows: int, d: int, rng=None, zero: bool = False):
        if zero or rng is None:
            table = np.zeros((n_rows, d))
        else:
            table = rng.normal(0.0, 1.0, size=(n_rows, d))
        self.table = Parameter(table)
        self._idx = None

    def forward(self, idx) -> Tensor:
        self._idx = idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.table.value.shape[0]):
            raise IndexError(f"embedding index out of range for table {self.table.shape}")
        return self.table.value[idx]

    def backward(self, d_out):
        np.add.at(self.table.grad, self._idx, d_out)
        return None


class Gelu(Module):
    def __init__(self):
        self._x = None

    def forward(self, x) -> Tensor:
        self._x = x
        return gelu(x)

    def backward(self, d_out) -> Tensor:
        return d_out * gelu_grad(self._x)


class Mlp(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, zero_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.act = Gelu()
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def forward(self, x) -> Tensor:
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, d_out) -> Tensor:
        return self.fc1.backward(self.act.backward(self.fc2.backward(d_out)))


class MultiHeadAttention(Module):
    """Multi-head attention over batched sequences [B, n, d_model].

    Self-attention when ctx is omitted; cross-attention when ctx [B, m,
    d_model] is given. backward returns dx for self-attention and (dx, dctx)
    for cross-attention.
    """

    def __init__(self, d_model: int, n_heads: int, rng, zero_out: bool = False):
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng, zero=zero_out)
        self._cache = None

    def _split(self, x):
        b, n, d = x.shape
        h, dh = self.n_heads, self.d_head
        return np.ascontiguousarray(x.reshape(b, n, h, dh).transpose(0, 2, 1, 3)).reshape(b * h, n, dh)

    def _merge(self, x, b, n):
        h, dh = self.n_heads, self.d_head
        return np.ascontiguousarray(x.reshape(b, h, n, dh).transpose(0, 2, 1, 3)).reshape(b, n, h * dh)

    def forward(self, x, ctx=None) -> Tensor:
        is_self = ctx is None
        src = x if is_self else ctx
        if src.shape[-1] != x.shape[-1]:
            raise ShapeError(f"attention: ctx dim {src.shape} vs x dim {x.shape}")
        q = self.q_proj.forward(x)
        k = self.k_proj.forward(src)
        v = self.v_proj.forward(src)
        b, n, _ = q.shape
        m = k.shape[1]
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / math.sqrt(self.d_head)
        out_h, probs = kernels.attention_forward(qh, kh, vh, scale)
        self._cache = (qh, kh, vh, probs, scale, b, n, m, is_self)
        return self.out_proj.forward(self._merge(out_h, b, n))

    def backward(self, d_out):
        qh, kh, vh, probs, scale, b, n, m, is_self = self._cache
        d_merged = self.out_proj.backward(d_out)
        d_out_h = self._split(d_merged)
        dqh, dkh, dvh = kernels.attention_backward(qh, kh, vh, probs, d_out_h, scale)
        dx = self.q_proj.backward(self._merge(dqh, b, n))
        dctx = self.k_proj.backward(self._merge(dkh, b, m))
        dctx = dctx + self.v_proj.backward(self._merge(dvh, b, m))
        if is_self:
            return dx + dctx
        return dx, dctx


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(op, inputs, h: float = 1e-5, check_inputs: bool = True, check_params: bool = True) -> float:
    """Max relative error between analytic and central-FD gradients.

    ``op`` exposes forward(*inputs) -> array, backward(d_out) -> grad(s) of
    the array inputs, and parameters(). The scalar objective is sum(output).
    Relative error per coordinate is |a - fd| / max(|a|, |fd|, 1e-12).
    """
    inputs = [np.asarray(x, dtype=np.float64) if isinstance(x, np.ndarray) else x for x in inputs]

    def objective() -> float:
        out = op.forward(*inputs)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite output in grad_check objective")
        return float(out.sum())

    for p in op.parameters():
        p.zero_grad()
    out = op.forward(*inputs)
    check_finite(out, "grad_check forward output")
    d_ins = op.backward(np.ones_like(out))
    if not isinstance(d_ins, tuple):
        d_ins = (d_ins,)

    worst = 0.0

    def compare(analytic_flat, value_flat):
        nonlocal worst
        for i in range(value_flat.size):
            orig = value_flat[i]
            value_flat[i] = orig + h
            f_plus = objective()
            value_flat[i] = orig - h
            f_minus = objective()
            value_flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            if not math.isfinite(fd):
                raise FloatingPointError("non-finite finite-difference value")
            a = analytic_flat[i]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-12))

    if check_params:
        for p in op.parameters():
            compare(p.grad.ravel(), p.value.ravel())
    if check_inputs:
        for x, dx in zip(inputs, d_ins):
            if isinstance(x, np.ndarray) and dx is not None:
                compare(np.ascontiguousarray(dx).ravel(), x.ravel())
    return worst
