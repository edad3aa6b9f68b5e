"""Parameter containers, layers, and the Adam update rule.

Layers are thin wrappers over :mod:`imgdial.autodiff` ops.  Parameters live in
named registries so checkpoints, freezing, and checksum audits can address
every tensor by a stable dotted path.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

class Module:
    """Base class with a recursive named-parameter registry."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self.frozen = False

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor.param(data)
        self._params[name] = t
        return t

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for cname, child in self._children.items():
            out.update(child.named_params(prefix + cname + "."))
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def freeze(self):
        """Mark every parameter constant; gradients stop flowing into them."""
        self.frozen = True
        for child in self._children.values():
            child.freeze()
        for p in self._params.values():
            p.requires_grad = False

    def unfreeze(self):
        self.frozen = False
        for child in self._children.values():
            child.unfreeze()
        for p in self._params.values():
            p.requires_grad = True

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_params().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        own = self.named_params()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ValueError(
                f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, p in own.items():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {src.shape} vs model {p.data.shape}"
                )
            p.data = src.astype(ad.DTYPE).copy()

    def checksum(self) -> str:
        """sha256 over parameter bytes in sorted name order."""
        h = hashlib.sha256()
        for name in sorted(self.named_params()):
            p = self.named_params()[name]
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------


def uniform_init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def xavier_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.w = self.add_param("w", xavier_init(rng, d_in, d_out, (d_in, d_out)))
        self.b = self.add_param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


class Embedding(Module):
    def __init__(self, rng, vocab: int, dim: int, scale: float | None = None):
        super().__init__()
        if scale is None:
            scale = 1.0 / np.sqrt(dim)
        self.table = self.add_param("table", uniform_init(rng, (vocab, dim), scale))

    def __call__(self, ids) -> Tensor:
        return ad.gather_rows(self.table, ids)


class GRUCell(Module):
    """Reset/update-gate GRU: sigmoid gates, tanh candidate.

    h' = (1 - z) * h + z * tanh(W_n x + U_n (r * h) + b_n)

    Weights use fan-based uniform init.  A fixed +-0.08 range (the classic
    large-model choice) starves the recurrent path at the small widths used
    here: hidden states stay near zero, recurrent gradients vanish, and the
    encoder degenerates into a bias-driven constant.
    """

    def __init__(self, rng, d_in: int, d_hidden: int):
        super().__init__()
        self.d_hidden = d_hidden
        self.w = self.add_param(
            "w", xavier_init(rng, d_in, d_hidden, (d_in, 3 * d_hidden))
        )
        self.u_rz = self.add_param(
            "u_rz", xavier_init(rng, d_hidden, d_hidden, (d_hidden, 2 * d_hidden))
        )
        self.u_n = self.add_param(
            "u_n", xavier_init(rng, d_hidden, d_hidden, (d_hidden, d_hidden))
        )
        self.b = self.add_param("b", np.zeros(3 * d_hidden))

    def __call__(self, x, h) -> Tensor:
        dh = self.d_hidden
        gx = ad.matmul(x, self.w) + self.b
        grz = ad.matmul(h, self.u_rz)
        r = ad.sigmoid(gx[..., 0:dh] + grz[..., 0:dh])
        z = ad.sigmoid(gx[..., dh : 2 * dh] + grz[..., dh : 2 * dh])
        n = ad.tanh(gx[..., 2 * dh : 3 * dh] + ad.matmul(r * h, self.u_n))
        return (1.0 - z) * h + z * n


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 pad: int = 0, bias: bool = True):
        super().__init__()
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        self.w = self.add_param(
            "w", xavier_init(rng, fan_in, fan_out, (c_out, c_in, kernel, kernel))
        )
        self.b = self.add_param("b", np.zeros(c_out)) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class FeatureNorm2d(Module):
    """Single-group normalization of each sample's feature volume, with a
    per-channel affine.

    Batch-independent, so tiny GAN batches stay stable; unlike per-channel
    instance norm it does not erase relative channel offsets, which is where
    conditioning content such as color lives.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones((1, channels, 1, 1)))
        self.beta = self.add_param("beta", np.zeros((1, channels, 1, 1)))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ad.sample_norm(x, self.gamma, self.beta, (1, 2, 3), self.eps)


def dot_attention(query, items, mask: np.ndarray | None = None):
    """query (B, d), items (B, K, d) -> (context (B, d), weights (B, K)).

    Scores are plain dot products; masked positions get zero weight.
    """
    b, d = query.shape
    k = items.shape[1]
    scores = ad.matmul(items, ad.reshape(query, (b, d, 1)))
    weights = ad.softmax(ad.reshape(scores, (b, k)), axis=-1, mask=mask)
    ctx = ad.matmul(ad.reshape(weights, (b, 1, k)), items)
    return ad.reshape(ctx, (b, d)), weights


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is <= max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
