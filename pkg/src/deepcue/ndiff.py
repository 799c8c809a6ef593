"""Small reverse-mode differentiation core over dense float64 arrays.

Only the primitives the models need are provided. Every op accepts either
plain ``np.ndarray`` values or :class:`Var` handles; when at least one input
is a ``Var`` the application is recorded on that variable's :class:`GradTape`
and a ``Var`` is returned, otherwise the op is a pure array function. The same
model code therefore serves both training (taped) and inference (untaped).

Batched inputs are accepted throughout: ``affine`` and ``cosine`` work over
the last axis, ``conv1d`` and ``maxpool1d`` take ``[C, T]`` or ``[B, C, T]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, NamedTuple

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateVectorError,
    DimensionError,
    LookupIndexError,
    ValidationError,
)

COSINE_EPS = 1e-8


def as_dense(x, name: str = "array") -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


class Var:
    """Handle to an array produced on a tape."""

    __slots__ = ("value", "tape", "name")

    def __init__(self, value: np.ndarray, tape: "GradTape", name: str | None = None):
        self.value = value
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Var{label} shape={self.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise ContractError("division by a Var is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self):
        return reduce_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class TapeEntry(NamedTuple):
    op: str
    inputs: tuple
    output: Var
    forward: Callable
    backward: Callable
    ctx: Any


@dataclass
class GradTape:
    """Ordered record of primitive applications.

    ``entries`` keep the forward closure and the inputs, so the whole forward
    pass can be replayed (see :meth:`replay`).
    """

    entries: list[TapeEntry] = field(default_factory=list)
    leaves: dict[str, Var] = field(default_factory=dict)

    def leaf(self, value, name: str | None = None) -> Var:
        arr = as_dense(value, name or "leaf")
        var = Var(arr, self, name)
        if name is not None:
            if name in self.leaves:
                raise ContractError(f"duplicate leaf name {name!r}")
            self.leaves[name] = var
        return var

    def params(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {name: self.leaf(value, name) for name, value in arrays.items()}

    def replay(self) -> bool:
        """Re-run every recorded forward and check outputs are bit-identical."""
        for entry in self.entries:
            values = tuple(_val(x) for x in entry.inputs)
            out, _ = entry.forward(*values)
            if out.shape != entry.output.value.shape:
                return False
            if out.tobytes() != entry.output.value.tobytes():
                return False
        return True

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        """Drop every entry and leaf.

        Vars point back at their tape, so a finished tape is a reference
        cycle holding all activations until the cycle collector runs.
        Training loops clear it after each step to free that memory now.
        """
        self.entries.clear()
        self.leaves.clear()


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(inputs) -> GradTape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("inputs belong to different tapes")
    return tape


def _apply(op: str, inputs: tuple, forward: Callable, backward: Callable):
    values = tuple(_val(x) for x in inputs)
    out, ctx = forward(*values)
    tape = _tape_of(inputs)
    if tape is None:
        return out
    var = Var(out, tape)
    tape.entries.append(TapeEntry(op, inputs, var, forward, backward, ctx))
    return var


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def grad(tape: GradTape, loss: Var, wrt=None):
    """Reverse sweep from a scalar ``loss``.

    Returns ``{leaf name: gradient}`` for every named leaf on the tape, or a
    list of gradients when ``wrt`` is a sequence of Vars. Leaves the loss does
    not depend on get exact zeros.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("loss must be a Var recorded on this tape")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for entry in reversed(tape.entries):
        g = adj.pop(id(entry.output), None)
        if g is None:
            continue
        values = tuple(_val(x) for x in entry.inputs)
        needs = tuple(isinstance(x, Var) for x in entry.inputs)
        grads = entry.backward(g, entry.ctx, needs, *values)
        for x, gx in zip(entry.inputs, grads):
            if gx is None or not isinstance(x, Var):
                continue
            key = id(x)
            if key in adj:
                adj[key] = adj[key] + gx
            else:
                adj[key] = gx

    def lookup(var: Var) -> np.ndarray:
        g = adj.get(id(var))
        return np.zeros_like(var.value) if g is None else np.asarray(g, dtype=np.float64)

    if wrt is None:
        return {name: lookup(var) for name, var in tape.leaves.items()}
    return [lookup(v) for v in wrt]


# --- primitives -----------------------------------------------------------


def affine(x, W, b):
    """``x @ W.T + b`` over the last axis of ``x``."""
    xs, Ws, bs = np.shape(_val(x)), np.shape(_val(W)), np.shape(_val(b))
    if len(Ws) != 2 or len(bs) != 1 or not xs or xs[-1] != Ws[1] or bs[0] != Ws[0]:
        raise DimensionError(f"affine: x{xs}, W{Ws}, b{bs} do not conform")

    def forward(x, W, b):
        return x @ W.T + b, None

    def backward(g, ctx, needs, x, W, b):
        m, n = W.shape
        g2 = g.reshape(-1, m)
        gx = g @ W if needs[0] else None
        gW = g2.T @ x.reshape(-1, n) if needs[1] else None
        gb = g2.sum(axis=0) if needs[2] else None
        return gx, gW, gb

    return _apply("affine", (x, W, b), forward, backward)


def _pad_amounts(k: int, pad: str) -> tuple[int, int]:
    if pad == "same":
        left = (k - 1) // 2
        return left, k - 1 - left
    if pad == "valid":
        return 0, 0
    raise ConfigError(f"unknown padding {pad!r}")


def conv1d(x, K, b, pad: str = "same"):
    """Temporal cross-correlation, stride 1.

    ``x`` is ``[C_in, T]`` or ``[B, C_in, T]``; ``K`` is ``[C_out, C_in, k]``.
    No kernel flip. Same-padding zero-pads ``(k-1)//2`` frames on the left.
    """
    xs, Ks, bs = np.shape(_val(x)), np.shape(_val(K)), np.shape(_val(b))
    if len(Ks) != 3 or len(bs) != 1 or bs[0] != Ks[0]:
        raise DimensionError(f"conv1d: kernel {Ks} / bias {bs} do not conform")
    if len(xs) not in (2, 3) or 0 in xs:
        raise DimensionError(f"conv1d: input shape {xs} must be non-empty [C,T] or [B,C,T]")
    if xs[-2] != Ks[1]:
        raise DimensionError(f"conv1d: input has {xs[-2]} channels, kernel expects {Ks[1]}")
    left, right = _pad_amounts(Ks[2], pad)
    if Ks[2] < 1 or Ks[2] > xs[-1] + left + right:
        raise DimensionError(f"conv1d: kernel width {Ks[2]} exceeds padded length")

    def forward(x, K, b):
        single = x.ndim == 2
        xb = x[None] if single else x
        B, Cin, T = xb.shape
        Cout, _, k = K.shape
        Tout = T + left + right - k + 1
        xc = np.pad(xb, ((0, 0), (0, 0), (left, right))).transpose(1, 0, 2)
        taps = np.ascontiguousarray(K.transpose(2, 0, 1))  # strided slices fall off the BLAS path
        acc = taps[0] @ xc[:, :, 0:Tout].reshape(Cin, B * Tout)
        for j in range(1, k):
            acc += taps[j] @ xc[:, :, j : j + Tout].reshape(Cin, B * Tout)
        out = acc.reshape(Cout, B, Tout).transpose(1, 0, 2) + b[None, :, None]
        out = np.ascontiguousarray(out)
        return (out[0] if single else out), None

    def backward(g, ctx, needs, x, K, b):
        single = x.ndim == 2
        xb = x[None] if single else x
        gb3 = g[None] if single else g
        B, Cin, T = xb.shape
        Cout, _, k = K.shape
        Tout = gb3.shape[2]
        gc = gb3.transpose(1, 0, 2).reshape(Cout, B * Tout)
        xc = np.pad(xb, ((0, 0), (0, 0), (left, right))).transpose(1, 0, 2)
        gK = gx = None
        if needs[1]:
            gK = np.empty_like(K)
            for j in range(k):
                gK[:, :, j] = gc @ xc[:, :, j : j + Tout].reshape(Cin, B * Tout).T
        if needs[0]:
            taps_t = np.ascontiguousarray(K.transpose(2, 1, 0))
            gxp = np.zeros((Cin, B, T + left + right))
            for j in range(k):
                gxp[:, :, j : j + Tout] += (taps_t[j] @ gc).reshape(Cin, B, Tout)
            gx = np.ascontiguousarray(gxp[:, :, left : left + T].transpose(1, 0, 2))
            if single:
                gx = gx[0]
        gb = gb3.sum(axis=(0, 2)) if needs[2] else None
        return gx, gK, gb

    return _apply("conv1d", (x, K, b), forward, backward)


def maxpool1d(x, w: int):
    """Non-overlapping max over time windows of width ``w``.

    Returns ``(pooled, argmax)`` where ``argmax`` holds absolute time indices
    of the winners. Trailing ``T % w`` frames are dropped; ties go to the
    earliest frame.
    """
    if int(w) != w or w < 1:
        raise ConfigError(f"pool width must be a positive integer, got {w!r}")
    w = int(w)
    xs = np.shape(_val(x))
    if not xs or xs[-1] // w == 0:
        raise DimensionError(f"maxpool1d: {xs[-1] if xs else 0} frames cannot fill a window of {w}")

    def forward(x):
        n = x.shape[-1] // w
        xr = x[..., : n * w].reshape(*x.shape[:-1], n, w)
        am = xr.argmax(axis=-1)
        out = np.take_along_axis(xr, am[..., None], axis=-1)[..., 0]
        return out, am

    def backward(g, am, needs, x):
        n = am.shape[-1]
        gr = np.zeros((*am.shape, w))
        np.put_along_axis(gr, am[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x)
        gx[..., : n * w] = gr.reshape(*am.shape[:-1], n * w)
        return (gx,)

    out = _apply("maxpool1d", (x,), forward, backward)
    am = out.tape.entries[-1].ctx if isinstance(out, Var) else forward(_val(x))[1]
    return out, am + np.arange(am.shape[-1]) * w


def relu(x):
    def forward(x):
        return np.maximum(x, 0.0), None

    def backward(g, ctx, needs, x):
        return (g * (x > 0.0),)

    return _apply("relu", (x,), forward, backward)


def embedding_lookup(E, idx):
    """Row gather ``E[idx]``; ``idx`` may be an int or an integer array.

    The gradient only touches the selected rows.
    """
    Es = np.shape(_val(E))
    if len(Es) != 2:
        raise DimensionError(f"embedding table must be 2-D, got {Es}")
    idx_arr = np.asarray(idx)
    if idx_arr.dtype.kind not in "iu":
        raise LookupIndexError(f"embedding index must be integer, got {idx_arr.dtype}")
    if idx_arr.size and (idx_arr.min() < 0 or idx_arr.max() >= Es[0]):
        raise LookupIndexError(f"embedding index out of range [0, {Es[0]})")

    def forward(E):
        return E[idx_arr], None

    def backward(g, ctx, needs, E):
        gE = np.zeros_like(E)
        np.add.at(gE, idx_arr, g)
        return (gE,)

    return _apply("embedding_lookup", (E,), forward, backward)


def cosine(a, b, eps: float = COSINE_EPS):
    """Cosine similarity over the last axis, with broadcasting of leading axes.

    Raises DegenerateVectorError when any norm is ``<= eps``.
    """
    av, bv = _val(a), _val(b)
    if np.shape(av)[-1:] != np.shape(bv)[-1:]:
        raise DimensionError(f"cosine: {np.shape(av)} vs {np.shape(bv)}")
    if np.any(np.linalg.norm(av, axis=-1) <= eps) or np.any(np.linalg.norm(bv, axis=-1) <= eps):
        raise DegenerateVectorError(f"cosine: vector norm at or below {eps}")

    def forward(a, b):
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        c = np.clip((a * b).sum(axis=-1) / (na * nb), -1.0, 1.0)
        return c, (na, nb)

    def backward(g, ctx, needs, a, b):
        na, nb = ctx
        c = (a * b).sum(axis=-1) / (na * nb)
        g_ = g[..., None]
        ga = gb = None
        if needs[0]:
            ga = g_ * (b / (na * nb)[..., None] - c[..., None] * a / (na**2)[..., None])
            ga = _unbroadcast(ga, a.shape)
        if needs[1]:
            gb = g_ * (a / (na * nb)[..., None] - c[..., None] * b / (nb**2)[..., None])
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _apply("cosine", (a, b), forward, backward)


# --- glue -----------------------------------------------------------------


def add(a, b):
    def forward(a, b):
        return np.add(a, b), None

    def backward(g, ctx, needs, a, b):
        return (
            _unbroadcast(g, np.shape(a)) if needs[0] else None,
            _unbroadcast(g, np.shape(b)) if needs[1] else None,
        )

    return _apply("add", (a, b), forward, backward)


def sub(a, b):
    def forward(a, b):
        return np.subtract(a, b), None

    def backward(g, ctx, needs, a, b):
        return (
            _unbroadcast(g, np.shape(a)) if needs[0] else None,
            _unbroadcast(-g, np.shape(b)) if needs[1] else None,
        )

    return _apply("sub", (a, b), forward, backward)


def mul(a, b):
    def forward(a, b):
        return np.multiply(a, b), None

    def backward(g, ctx, needs, a, b):
        return (
            _unbroadcast(g * b, np.shape(a)) if needs[0] else None,
            _unbroadcast(g * a, np.shape(b)) if needs[1] else None,
        )

    return _apply("mul", (a, b), forward, backward)


def getitem(x, key):
    def forward(x):
        return np.array(x[key]), None

    def backward(g, ctx, needs, x):
        gx = np.zeros_like(x)
        np.add.at(gx, key, g)
        return (gx,)

    return _apply("getitem", (x,), forward, backward)


def reshape(x, shape):
    def forward(x):
        return x.reshape(shape), None

    def backward(g, ctx, needs, x):
        return (g.reshape(x.shape),)

    return _apply("reshape", (x,), forward, backward)


def reduce_sum(x, axis=None):
    def forward(x):
        return np.asarray(x.sum(axis=axis)), None

    def backward(g, ctx, needs, x):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum", (x,), forward, backward)


def reduce_mean(x):
    def forward(x):
        return np.asarray(x.mean()), None

    def backward(g, ctx, needs, x):
        return (np.full(x.shape, g / x.size),)

    return _apply("mean", (x,), forward, backward)


def mse(pred, target):
    """``sum ||pred_r - target_r||^2 / rows``; a 1-D input counts as one row."""
    if np.shape(_val(pred)) != np.shape(_val(target)):
        raise DimensionError(f"mse: {np.shape(_val(pred))} vs {np.shape(_val(target))}")

    def forward(p, t):
        rows = p.shape[0] if p.ndim > 1 else 1
        return np.asarray(((p - t) ** 2).sum() / rows), rows

    def backward(g, rows, needs, p, t):
        d = 2.0 * g * (p - t) / rows
        return (d if needs[0] else None, -d if needs[1] else None)

    return _apply("mse", (pred, target), forward, backward)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    if np.shape(_val(logits)) != np.shape(_val(targets)):
        raise DimensionError("bce_with_logits: shape mismatch")

    def forward(z, t):
        loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(loss.mean()), None

    def backward(g, ctx, needs, z, t):
        return (g * (sigmoid(z) - t) / z.size if needs[0] else None, None)

    return _apply("bce_with_logits", (logits, targets), forward, backward)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step_count: int = 0
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 1e-6
    lr_scale: dict[str, float] = field(default_factory=dict)  # per-parameter multipliers, default 1

    def __post_init__(self):
        if any(not s >= 0 for s in self.lr_scale.values()):
            raise ConfigError("lr scales must be non-negative")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr_decay < 0:
            raise ConfigError("lr_decay must be non-negative")

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kwargs) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, **kwargs)

    @property
    def effective_lr(self) -> float:
        return self.base_lr / (1.0 + self.lr_decay * self.step_count)


def nesterov_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState):
    """One SGD step with Nesterov momentum and time-based lr decay.

    Uses the lookahead form re-parametrised onto the stored parameters::

        v     <- mu * v - lr * g
        theta <- theta + mu * v - lr * g

    which is the same update as evaluating the gradient at ``theta + mu * v``
    when ``theta`` tracks the lookahead point. Returns new dicts; inputs are
    not modified.
    """
    lr = state.effective_lr
    mu = state.momentum
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"nesterov_step: shape mismatch for {name!r}")
        step = lr * state.lr_scale.get(name, 1.0)
        v = mu * v - step * g
        new_velocity[name] = v
        new_params[name] = p + mu * v - step * g
    new_state = OptimizerState(new_velocity, state.step_count + 1, state.base_lr, mu, state.lr_decay, state.lr_scale)
    return new_params, new_state
