"""Mixed-mode differentiation.

Input derivatives (d/dt, d/dr, d2/dr2) are carried forward through the
network as :class:`Jet2` values; gradients with respect to the flat
parameter vector are taken in reverse mode with ``torch.autograd``, which
also differentiates through the jet components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

DTYPE = torch.float64


def _ns(x):
    return torch if isinstance(x, torch.Tensor) else np


def _asinh(x):
    return torch.asinh(x) if isinstance(x, torch.Tensor) else np.arcsinh(x)


class Jet2:
    """Value with first derivatives in t and r and the second derivative in r.

    Components may be floats, numpy arrays or torch tensors. Arithmetic follows
    the product and chain rules truncated at ``d_rr``; mixed or higher
    derivatives are not tracked.
    """

    __slots__ = ("v", "d_t", "d_r", "d_rr")

    def __init__(self, v, d_t=0.0, d_r=0.0, d_rr=0.0):
        self.v = v
        self.d_t = d_t
        self.d_r = d_r
        self.d_rr = d_rr

    @classmethod
    def const(cls, v) -> "Jet2":
        z = 0.0 * v
        return cls(v, z, z, z)

    @classmethod
    def var_t(cls, t) -> "Jet2":
        z = 0.0 * t
        return cls(t, z + 1.0, z, z)

    @classmethod
    def var_r(cls, r) -> "Jet2":
        z = 0.0 * r
        return cls(r, z, z + 1.0, z)

    def _lift(self, other) -> "Jet2":
        return other if isinstance(other, Jet2) else Jet2(other, 0.0, 0.0, 0.0)

    def __add__(self, other):
        o = self._lift(other)
        return Jet2(self.v + o.v, self.d_t + o.d_t, self.d_r + o.d_r, self.d_rr + o.d_rr)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.v, -self.d_t, -self.d_r, -self.d_rr)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        if not isinstance(other, Jet2):
            return Jet2(self.v * other, self.d_t * other, self.d_r * other, self.d_rr * other)
        return Jet2(
            self.v * other.v,
            self.d_t * other.v + self.v * other.d_t,
            self.d_r * other.v + self.v * other.d_r,
            self.d_rr * other.v + 2.0 * self.d_r * other.d_r + self.v * other.d_rr,
        )

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet2":
        inv = 1.0 / self.v
        return self._unary(inv, -inv * inv, 2.0 * inv * inv * inv)

    def __truediv__(self, other):
        if not isinstance(other, Jet2):
            return self * (1.0 / other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self._lift(other) * self.reciprocal()

    def _unary(self, f, f1, f2) -> "Jet2":
        """Apply a scalar function given its value and first two derivatives at ``v``."""
        return Jet2(f, f1 * self.d_t, f1 * self.d_r, f2 * self.d_r * self.d_r + f1 * self.d_rr)

    def exp(self):
        e = _ns(self.v).exp(self.v)
        return self._unary(e, e, e)

    def tanh(self):
        s = _ns(self.v).tanh(self.v)
        s1 = 1.0 - s * s
        return self._unary(s, s1, -2.0 * s * s1)

    def sin(self):
        ns = _ns(self.v)
        s = ns.sin(self.v)
        return self._unary(s, ns.cos(self.v), -s)

    def sqrt(self):
        s = _ns(self.v).sqrt(self.v)
        return self._unary(s, 0.5 / s, -0.25 / (s * s * s))

    def asinh(self):
        ns = _ns(self.v)
        q = 1.0 + self.v * self.v
        sq = ns.sqrt(q)
        return self._unary(_asinh(self.v), 1.0 / sq, -self.v / (q * sq))

    def linear(self, weight: torch.Tensor, bias: torch.Tensor | None = None) -> "Jet2":
        """Affine map ``x @ weight.T + bias`` applied row-wise; one stacked matmul."""
        n = self.v.shape[0]
        stacked = torch.cat([self.v, self.d_t, self.d_r, self.d_rr], dim=0) @ weight.T
        v, d_t, d_r, d_rr = stacked.split(n, dim=0)
        if bias is not None:
            v = v + bias
        return Jet2(v, d_t, d_r, d_rr)

    def columns(self, idx) -> "Jet2":
        return Jet2(self.v[..., idx], self.d_t[..., idx], self.d_r[..., idx], self.d_rr[..., idx])

    def detach(self) -> "Jet2":
        return Jet2(*(x.detach() if isinstance(x, torch.Tensor) else x for x in self.astuple()))

    def astuple(self):
        return self.v, self.d_t, self.d_r, self.d_rr

    def __repr__(self) -> str:
        return f"Jet2(v={self.v!r}, d_t={self.d_t!r}, d_r={self.d_r!r}, d_rr={self.d_rr!r})"


def stack_columns(jets: Iterable[Jet2]) -> Jet2:
    """Concatenate per-column jets of shape (N,) into one (N, k) jet."""
    jets = list(jets)
    parts = []
    for comp in range(4):
        cols = []
        for j in jets:
            c = j.astuple()[comp]
            ref = jets[0].v
            if not isinstance(c, torch.Tensor):
                c = torch.full_like(ref, float(c))
            cols.append(c)
        parts.append(torch.stack(cols, dim=-1))
    return Jet2(*parts)


@dataclass
class Segment:
    name: str
    start: int
    shape: tuple[int, ...]
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(math.prod(self.shape)) if self.shape else 1

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass
class ParamVector:
    """Flat float64 parameter storage with named, individually freezable segments."""

    values: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=DTYPE))
    segments: dict[str, Segment] = field(default_factory=dict)

    def add(self, name: str, init, trainable: bool = True) -> None:
        if name in self.segments:
            raise ValueError(f"segment {name!r} already exists")
        init = torch.as_tensor(init, dtype=DTYPE)
        seg = Segment(name, self.values.numel(), tuple(init.shape), trainable)
        self.segments[name] = seg
        self.values = torch.cat([self.values.detach(), init.reshape(-1)])

    def view(self, name: str, values: torch.Tensor | None = None) -> torch.Tensor:
        seg = self.segments[name]
        v = self.values if values is None else values
        return v[seg.start : seg.stop].reshape(seg.shape)

    def mask(self) -> torch.Tensor:
        m = torch.zeros(self.values.numel(), dtype=torch.bool)
        for seg in self.segments.values():
            if seg.trainable:
                m[seg.start : seg.stop] = True
        return m

    def set_trainable(self, predicate: Callable[[str], bool] | Iterable[str], flag: bool = True) -> None:
        if not callable(predicate):
            names = set(predicate)
            unknown = names - set(self.segments)
            if unknown:
                raise KeyError(f"unknown segments: {sorted(unknown)}")
            predicate = names.__contains__
        for seg in self.segments.values():
            if predicate(seg.name):
                seg.trainable = flag

    def freeze_all(self) -> None:
        for seg in self.segments.values():
            seg.trainable = False

    def copy(self) -> "ParamVector":
        segs = {k: Segment(s.name, s.start, s.shape, s.trainable) for k, s in self.segments.items()}
        return ParamVector(self.values.detach().clone(), segs)

    def layout(self) -> list[dict]:
        return [
            {"name": s.name, "start": s.start, "shape": list(s.shape), "trainable": s.trainable}
            for s in self.segments.values()
        ]

    @classmethod
    def from_layout(cls, values, layout: list[dict]) -> "ParamVector":
        pv = cls(torch.as_tensor(values, dtype=DTYPE).clone())
        for d in layout:
            pv.segments[d["name"]] = Segment(d["name"], int(d["start"]), tuple(d["shape"]), bool(d["trainable"]))
        covered = sum(s.size for s in pv.segments.values())
        if covered != pv.values.numel():
            raise ValueError("parameter layout does not cover the value vector")
        return pv

    def __len__(self) -> int:
        return self.values.numel()


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"loss term {term!r} is not finite")
        self.term = term


@dataclass
class LossSpec:
    """How to turn parameters into named loss terms.

    ``term_fn(values)`` receives the (differentiable) flat parameter tensor and
    returns an ordered dict of scalar loss terms. ``weights`` maps term names
    to their multipliers in the total (missing terms get weight 1).
    """

    term_fn: Callable[[torch.Tensor], dict[str, torch.Tensor]]
    weights: dict[str, float] = field(default_factory=dict)
    per_term: bool = False


@dataclass
class GradientResult:
    terms: dict[str, float]
    total: float
    grad: torch.Tensor
    term_grad_norms: dict[str, float] | None = None


def loss_gradient(params: ParamVector, loss_spec: LossSpec) -> GradientResult:
    """Evaluate loss terms and the masked gradient of their weighted sum.

    Frozen segments receive an exactly-zero gradient. With
    ``loss_spec.per_term`` the norm of each term's (masked) gradient is
    returned as well.
    """
    mask = params.mask()
    values = params.values.detach().clone().requires_grad_(bool(mask.any()))
    terms = loss_spec.term_fn(values)
    for name, val in terms.items():
        if not torch.isfinite(val).all():
            raise NonFiniteLoss(name)
    total = sum(loss_spec.weights.get(k, 1.0) * v for k, v in terms.items())
    if not mask.any():
        return GradientResult(
            {k: float(v) for k, v in terms.items()},
            float(total),
            torch.zeros_like(params.values),
            {k: 0.0 for k in terms} if loss_spec.per_term else None,
        )
    norms = None
    if loss_spec.per_term:
        norms = {}
        for name, val in terms.items():
            (g,) = torch.autograd.grad(val, values, retain_graph=True, allow_unused=True)
            g = torch.zeros_like(values) if g is None else g
            norms[name] = float(torch.linalg.vector_norm(torch.where(mask, g, 0.0)))
    (grad,) = torch.autograd.grad(total, values, allow_unused=True)
    grad = torch.zeros_like(values) if grad is None else grad
    grad = torch.where(mask, grad, torch.zeros_like(grad)).detach()
    return GradientResult({k: float(v.detach()) for k, v in terms.items()}, float(total.detach()), grad, norms)


class Adam:
    """Adam on a flat vector with a per-element learning rate; frozen entries are never written."""

    def __init__(self, n: int, lr, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = torch.as_tensor(lr, dtype=DTYPE).expand(n).clone()
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = torch.zeros(n, dtype=DTYPE)
        self.v = torch.zeros(n, dtype=DTYPE)
        self.k = 0

    def step(self, params: ParamVector, grad: torch.Tensor) -> torch.Tensor:
        """Update ``params.values`` in place on trainable entries; return the applied step."""
        mask = params.mask()
        self.k += 1
        self.m = torch.where(mask, self.b1 * self.m + (1 - self.b1) * grad, self.m)
        self.v = torch.where(mask, self.b2 * self.v + (1 - self.b2) * grad * grad, self.v)
        m_hat = self.m / (1 - self.b1**self.k)
        v_hat = self.v / (1 - self.b2**self.k)
        delta = torch.where(mask, -self.lr * m_hat / (v_hat.sqrt() + self.eps), torch.zeros_like(grad))
        new = params.values.detach().clone()
        new[mask] = new[mask] + delta[mask]
        params.values = new
        return delta

    def state_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "k": self.k, "lr": self.lr.tolist()}

    def load_state_dict(self, d: dict) -> None:
        self.m = torch.tensor(d["m"], dtype=DTYPE)
        self.v = torch.tensor(d["v"], dtype=DTYPE)
        self.k = int(d["k"])
        self.lr = torch.tensor(d["lr"], dtype=DTYPE)
