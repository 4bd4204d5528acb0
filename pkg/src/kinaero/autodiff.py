"""Dense-tensor reverse-mode automatic differentiation on a flat tape.

The tape is a single-owner, define-by-run op recorder: calling an op method
evaluates it immediately with numpy and appends one node to the tape. Nodes
are stored in execution order, which is a valid topological order of the
DAG by construction, so `backward` is a single reverse sweep that visits
each node exactly once. Values are float64 throughout; checkpoints quantize
to float32 at the persistence boundary only.

Tapes must not be shared across threads. Running several tapes in parallel
on disjoint data is fine as long as gradient reduction happens in a fixed
order (leaf `.grad` accumulation is plain addition, so callers control order).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class NonFiniteError(ArithmeticError):
    """A tensor picked up a NaN or Inf; the computation is in an error state."""


class TapeError(RuntimeError):
    """Tape misuse: backward before forward, foreign output, empty tape."""


class Tensor:
    """A numpy array plus gradient slot. Leaves may be marked trainable."""

    __slots__ = ("data", "grad", "requires_grad", "_tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._tape_id = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


class Tape:
    """Op recorder and reverse-sweep engine.

    Each node is ``(out, parents, backward_fn)`` where ``backward_fn`` maps
    the upstream gradient to a tuple of per-parent gradients (``None`` to
    skip a parent). `record` is public so domain code can register ops with
    analytic gradients; every built-in op routes through it too.
    """

    __slots__ = ("_nodes", "_id", "check_finite")

    def __init__(self, check_finite: bool = False):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._id = id(self)
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self._nodes)

    # -- recording ---------------------------------------------------------

    def record(self, out_data: Array, parents: tuple[Tensor, ...],
               backward_fn: Callable[[Array], tuple]) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(out_data)):
            raise NonFiniteError("op produced a non-finite value")
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.grad = None
        out.requires_grad = False
        out._tape_id = self._id
        self._nodes.append((out, parents, backward_fn))
        return out

    # -- op vocabulary -----------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Matrix @ vector or matrix @ matrix."""
        ad, bd = a.data, b.data
        out = ad @ bd
        if bd.ndim == 1:
            def back(g):
                return (g.reshape(-1, 1) * bd, ad.T @ g)
        else:
            def back(g):
                return (g @ bd.T, ad.T @ g)
        return self.record(out, (a, b), back)

    def affine(self, w: Tensor, x: Tensor, b: Tensor) -> Tensor:
        """w @ x + b for a 1-D x."""
        wd, xd = w.data, x.data

        def back(g):
            return (g.reshape(-1, 1) * xd, wd.T @ g, g)
        return self.record(wd @ xd + b.data, (w, x, b), back)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.shape != bd.shape and ad.ndim > 0 and bd.ndim > 0:
            raise ValueError(f"add shape mismatch: {ad.shape} vs {bd.shape}")
        out = ad + bd

        def back(g):
            ga = g if ad.shape == out.shape else np.sum(g)
            gb = g if bd.shape == out.shape else np.sum(g)
            return (ga, gb)
        return self.record(out, (a, b), back)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.shape != bd.shape and ad.ndim > 0 and bd.ndim > 0:
            raise ValueError(f"sub shape mismatch: {ad.shape} vs {bd.shape}")
        out = ad - bd

        def back(g):
            ga = g if ad.shape == out.shape else np.sum(g)
            gb = -g if bd.shape == out.shape else -np.sum(g)
            return (ga, gb)
        return self.record(out, (a, b), back)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.shape != bd.shape and ad.ndim > 0 and bd.ndim > 0:
            raise ValueError(f"mul shape mismatch: {ad.shape} vs {bd.shape}")
        out = ad * bd

        def back(g):
            ga = g * bd
            gb = g * ad
            if ad.shape != out.shape:
                ga = np.sum(ga)
            if bd.shape != out.shape:
                gb = np.sum(gb)
            return (ga, gb)
        return self.record(out, (a, b), back)

    def scale(self, a: Tensor, c: float) -> Tensor:
        def back(g):
            return (g * c,)
        return self.record(a.data * c, (a,), back)

    def add_const(self, a: Tensor, c) -> Tensor:
        def back(g):
            return (g,)
        return self.record(a.data + c, (a,), back)

    def mix(self, a: Tensor, b: Tensor, ca: float, cb: float) -> Tensor:
        """Linear blend ca*a + cb*b (the leaky-integrator update)."""
        def back(g):
            return (g * ca, g * cb)
        return self.record(a.data * ca + b.data * cb, (a, b), back)

    def mul_add(self, a: Tensor, factor: Array, b: Tensor) -> Tensor:
        """a * factor + b with a constant factor (reparameterized sampling)."""
        def back(g):
            return (g * factor, g)
        return self.record(a.data * factor + b.data, (a, b), back)

    def tanh(self, a: Tensor) -> Tensor:
        out = np.tanh(a.data)

        def back(g):
            return (g * (1.0 - out * out),)
        return self.record(out, (a,), back)

    def exp(self, a: Tensor) -> Tensor:
        out = np.exp(a.data)

        def back(g):
            return (g * out,)
        return self.record(out, (a,), back)

    def log(self, a: Tensor) -> Tensor:
        ad = a.data
        out = np.log(ad)

        def back(g):
            return (g / ad,)
        return self.record(out, (a,), back)

    def clip(self, a: Tensor, lo: float, hi: float) -> Tensor:
        """Clamp; gradient passes through strictly inside (lo, hi) only."""
        ad = a.data
        out = np.clip(ad, lo, hi)

        def back(g):
            return (g * ((ad > lo) & (ad < hi)),)
        return self.record(out, (a,), back)

    def exp_clip(self, a: Tensor, lo: float, hi: float) -> Tensor:
        """exp of the clamped input; zero gradient outside (lo, hi)."""
        ad = a.data
        out = np.exp(np.clip(ad, lo, hi))

        def back(g):
            return (g * out * ((ad > lo) & (ad < hi)),)
        return self.record(out, (a,), back)

    def softmax(self, a: Tensor) -> Tensor:
        """Row-wise softmax for 2-D input, plain softmax for 1-D."""
        ad = a.data
        shifted = ad - ad.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            dot = np.sum(g * out, axis=-1, keepdims=True)
            return (out * (g - dot),)
        return self.record(out, (a,), back)

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        ad = a.data

        def back(g):
            return (g.reshape(ad.shape),)
        return self.record(ad.reshape(shape), (a,), back)

    def slice(self, a: Tensor, idx) -> Tensor:
        ad = a.data
        out = np.array(ad[idx])

        def back(g):
            full = np.zeros_like(ad)
            full[idx] = g
            return (full,)
        return self.record(out, (a,), back)

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        datas = [p.data for p in parts]
        out = np.concatenate(datas)
        sizes = [d.shape[0] for d in datas]

        def back(g):
            grads = []
            off = 0
            for n in sizes:
                grads.append(g[off:off + n])
                off += n
            return tuple(grads)
        return self.record(out, tuple(parts), back)

    def sum(self, a: Tensor) -> Tensor:
        ad = a.data

        def back(g):
            return (np.full(ad.shape, g),)
        return self.record(np.asarray(ad.sum()), (a,), back)

    def dot_const(self, a: Tensor, weights: Array) -> Tensor:
        """Inner product of a 1-D tensor with a constant weight vector."""
        def back(g):
            return (g * weights,)
        return self.record(np.asarray(a.data @ weights), (a,), back)

    def stack_rows(self, parts: Sequence[Tensor]) -> Tensor:
        """Stack n same-length 1-D tensors into an (n, k) matrix."""
        out = np.stack([p.data for p in parts])
        n = len(parts)

        def back(g):
            return tuple(g[i] for i in range(n))
        return self.record(out, tuple(parts), back)

    def vstack2(self, a: Tensor, b: Tensor) -> Tensor:
        """Concatenate two 2-D blocks along the first axis."""
        ad, bd = a.data, b.data
        na = ad.shape[0]

        def back(g):
            return (g[:na], g[na:])
        return self.record(np.concatenate([ad, bd]), (a, b), back)

    def affine_rows(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """Row-batched affine map: x @ w.T + b for x of shape (n, d_in)."""
        xd, wd = x.data, w.data

        def back(g):
            return (g @ wd, g.T @ xd, g.sum(axis=0))
        return self.record(xd @ wd.T + b.data, (x, w, b), back)

    def add_n(self, parts: Sequence[Tensor]) -> Tensor:
        """Sum of same-shape tensors as one node."""
        out = parts[0].data.copy()
        for p in parts[1:]:
            out += p.data
        n = len(parts)

        def back(g):
            return (g,) * n
        return self.record(out, tuple(parts), back)

    def weighted_sum(self, parts: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
        """Scalar combination sum_i weights[i] * parts[i] as one node."""
        total = 0.0
        for p, w in zip(parts, weights):
            total += p.data * w
        ws = tuple(weights)

        def back(g):
            return tuple(g * w for w in ws)
        return self.record(np.asarray(total), tuple(parts), back)

    # -- reverse sweep -----------------------------------------------------

    def backward(self, output: Tensor, seed: float | Array = 1.0) -> None:
        """Accumulate d(output)/d(leaf) into every reachable leaf's ``.grad``.

        Seeding with c * base_seed yields exactly c * gradients (the sweep is
        linear in the seed). Grad accumulates across calls; callers zero
        persistent leaves between optimization steps.
        """
        if not self._nodes:
            raise TapeError("backward before forward: tape is empty")
        if output._tape_id != self._id:
            raise TapeError("backward target was not produced by this tape")
        output.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64),
                                      output.data.shape).copy()
        for out, parents, back in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            grads = back(g)
            for parent, gp in zip(parents, grads):
                if gp is None:
                    continue
                pg = parent.grad
                if pg is None:
                    parent.grad = gp
                else:
                    parent.grad = pg + gp


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all .grad in place so the global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        if lr <= 0:
            raise ValueError("lr must be positive")
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Array | None],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads[i] is None`` means zero gradient for that parameter (moments
    still decay, keeping the update deterministic).
    """
    if len(params) != len(state.m):
        raise ValueError("AdamState was built for a different parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state.m[i], state.v[i]
        if g is None:
            m *= b1
            v *= b2
        else:
            if g.shape != p.data.shape:
                raise ValueError(
                    f"grad shape {g.shape} does not match param {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def finite_diff_check(make_loss: Callable[[], tuple[Tape, Tensor]],
                      params: Sequence[Tensor], h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``make_loss`` builds a fresh tape and returns ``(tape, scalar_loss)``;
    it must read the current ``.data`` of ``params`` each call. Returns
    ``max_i |analytic_i - central_i| / (|analytic_i| + 1e-8)``.
    """
    zero_grads(params)
    tape, loss = make_loss()
    if not np.isfinite(loss.data):
        raise NonFiniteError("loss is non-finite at the base point")
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    zero_grads(params)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lo_plus = make_loss()[1].item()
            flat[i] = orig - h
            lo_minus = make_loss()[1].item()
            flat[i] = orig
            central = (lo_plus - lo_minus) / (2.0 * h)
            err = abs(aflat[i] - central) / (abs(aflat[i]) + 1e-8)
            worst = max(worst, err)
    return worst
