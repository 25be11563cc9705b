"""Reverse-mode differentiation over the primitives in :mod:`miavsr.tensor`.

A :class:`Tape` is a Wengert list: while it is the active context every
primitive that touches a gradient-requiring tensor appends a node holding
its forward function, inputs, output and backward closure. Backward walks
the list in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import _TAPES, NonFiniteError, Tensor


@dataclass
class Node:
    name: str
    fwd: Callable
    kw: dict
    inputs: list
    output: Tensor
    back: Callable


class Tape:
    """Records operations and owns the parameter registry.

    >>> from miavsr.tensor import sum_
    >>> x = Tensor([1.0, 2.0])
    >>> with Tape({"x": x}) as tape:
    ...     loss = sum_(x)
    >>> tape.backward(loss)["x"]
    array([1., 1.])
    """

    def __init__(self, params: dict[str, Tensor] | None = None):
        self.nodes: list[Node] = []
        self.params: dict[str, Tensor] = {}
        self._grads: dict[int, np.ndarray] | None = None
        for name, p in (params or {}).items():
            self.watch(name, p)

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        if not _TAPES or _TAPES[-1] is not self:
            raise RuntimeError("tape contexts exited out of order")
        _TAPES.pop()

    def record(self, name, fwd, kw, inputs, output, back) -> None:
        self.nodes.append(Node(name, fwd, kw, list(inputs), output, back))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, loss_grad: float = 1.0) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(tensor) for everything on the tape.

        Returns gradients for every registered parameter (zeros for the ones
        the forward pass never touched); input gradients are available via
        :meth:`grad`.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got dims {loss.dims}")
        if not any(n.output is loss for n in self.nodes):
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {
            id(loss): np.full(loss.shape, loss_grad, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            for t, gi in zip(node.inputs, node.back(g, needs)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                grads[k] = gi if k not in grads else grads[k] + gi
        self._grads = grads
        out = {}
        for name, p in self.params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
        return out

    def grad(self, tensor: Tensor) -> np.ndarray | None:
        if self._grads is None:
            raise RuntimeError("backward has not been run")
        return self._grads.get(id(tensor))

    def replay(self) -> bool:
        """Re-run every recorded forward; True when all outputs match bitwise."""
        for node in self.nodes:
            out, _ = node.fwd(*[t.data for t in node.inputs], **node.kw)
            if out.shape != node.output.data.shape or not np.array_equal(out, node.output.data):
                return False
        return True


# --- finite differences -----------------------------------------------------------

@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int


def finite_diff_check(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                      abs_floor: float = 1e-7, max_elements: int | None = None,
                      seed: int = 0) -> dict[str, GradCheck]:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` is a closure over ``params`` returning a scalar tensor. The error of
    an element is ``|a - n| / max(|a|, |n|)``; differences below
    ``abs_floor`` count as exact. With ``max_elements`` a seeded random subset
    of each parameter is probed.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"{name}: finite differences need float64, got {p.data.dtype}")
    with Tape(params) as tape:
        loss = f()
    analytic = tape.backward(loss)
    rng = np.random.default_rng(seed)
    report = {}
    for name, p in params.items():
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst = GradCheck(name, 0.0, (), 0.0, 0.0, idx.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"{name}[{i}]: non-finite perturbed loss")
            num = (fp - fm) / (2 * h)
            a = float(a_flat[i])
            diff = abs(a - num)
            err = 0.0 if diff <= abs_floor else diff / max(abs(a), abs(num))
            if err > worst.max_rel_error or not worst.worst_index:
                worst.max_rel_error = max(err, worst.max_rel_error)
                worst.worst_index = np.unravel_index(i, p.shape) if p.shape else ()
                worst.analytic, worst.numeric = a, num
        report[name] = worst
    return report


# --- optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              state: AdamState | None = None) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state = state if state is not None else AdamState()
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state
