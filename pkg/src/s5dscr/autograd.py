"""Minimal reverse-mode differentiation over exactly the ops the model needs.

Every op builds a closure holding the saved inputs its backward rule needs;
nodes carry a creation sequence number, and :func:`backward` replays the
closures in exact reverse execution order, accumulating gradients additively
at fan-out.  Activations follow the [B, C, H, W] layout; parameter nodes keep
their natural ranks ([C,k,k] depthwise kernels, [Cout,Cin] pointwise
matrices, [C] biases).

Training runs in float32; gradient checking wraps float64 arrays through the
same code paths.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeMismatchError

_NODE_COUNTER = itertools.count()


class Tensor:
    """A node in the computation graph: an ndarray plus its backward closure."""

    __slots__ = (
        "data", "requires_grad", "grad", "op", "_parents", "_backward_fn", "_seq", "_consumed",
    )

    def __init__(self, data, requires_grad: bool = False, op: str | None = None,
                 _parents=(), _backward_fn=None):
        self.data = np.asarray(data)
        if not _parents and not np.isfinite(self.data).all():
            raise NumericError("tensor leaf contains non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op  # producing op name, for graph inspection
        self._parents = tuple(_parents)
        self._backward_fn = _backward_fn
        self._seq = next(_NODE_COUNTER)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"{op} expects [B,C,H,W] input, got shape {x.data.shape}")


def _windows(padded: np.ndarray, k: int) -> np.ndarray:
    """Read-only sliding [B,C,H,W,k,k] view over a padded activation."""
    b, c, hp, wp = padded.shape
    sb, sc, sh, sw = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(b, c, hp - k + 1, wp - k + 1, k, k),
        strides=(sb, sc, sh, sw, sh, sw),
        writeable=False,
    )


def depthwise_conv(x, w, b, pad: int | None = None) -> Tensor:
    """Per-channel 2-D correlation, zero padded to preserve spatial dims.

    out[n,c] = (x[n,c] cross-correlated with w[c]) + b[c].
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_4d(x, "depthwise_conv")
    if w.data.ndim != 3 or w.data.shape[1] != w.data.shape[2]:
        raise ShapeMismatchError(f"depthwise kernel must be [C,k,k], got {w.data.shape}")
    c, k, _ = w.data.shape
    if k % 2 == 0:
        raise ValueError(f"depthwise kernel size must be odd, got {k}")
    if x.data.shape[1] != c:
        raise ShapeMismatchError(f"input has {x.data.shape[1]} channels, kernel has {c}")
    if b.data.shape != (c,):
        raise ShapeMismatchError(f"bias must be [{c}], got {b.data.shape}")
    if pad is None:
        pad = k // 2
    elif pad != k // 2:
        raise ValueError("only same-size padding (k//2) is supported")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k)
    out = np.einsum("bchwuv,cuv->bchw", win, w.data) + b.data[None, :, None, None]

    requires = x.requires_grad or w.requires_grad or b.requires_grad
    if not requires:
        return Tensor(out, op="depthwise_conv", _parents=(x, w, b))

    def _backward(g: np.ndarray) -> None:
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            _accumulate(w, np.einsum("bchw,bchwuv->cuv", g, win))
        if x.requires_grad:
            # full correlation of the output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1 - pad,) * 2, (k - 1 - pad,) * 2))
            gwin = _windows(gp, k)
            _accumulate(x, np.einsum("bchwuv,cuv->bchw", gwin, w.data[:, ::-1, ::-1]))

    return Tensor(out, requires_grad=True, op="depthwise_conv", _parents=(x, w, b),
                  _backward_fn=_backward)


def pointwise_conv(x, w, b) -> Tensor:
    """1x1 convolution: a Cin -> Cout linear map applied at every pixel."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_4d(x, "pointwise_conv")
    if w.data.ndim != 2:
        raise ShapeMismatchError(f"pointwise weight must be [Cout,Cin], got {w.data.shape}")
    cout, cin = w.data.shape
    if x.data.shape[1] != cin:
        raise ShapeMismatchError(f"input has {x.data.shape[1]} channels, weight expects {cin}")
    if b.data.shape != (cout,):
        raise ShapeMismatchError(f"bias must be [{cout}], got {b.data.shape}")

    out = np.einsum("oi,bihw->bohw", w.data, x.data) + b.data[None, :, None, None]
    requires = x.requires_grad or w.requires_grad or b.requires_grad
    if not requires:
        return Tensor(out, op="pointwise_conv", _parents=(x, w, b))

    def _backward(g: np.ndarray) -> None:
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            _accumulate(w, np.einsum("bohw,bihw->oi", g, x.data))
        if x.requires_grad:
            _accumulate(x, np.einsum("oi,bohw->bihw", w.data, g))

    return Tensor(out, requires_grad=True, op="pointwise_conv", _parents=(x, w, b),
                  _backward_fn=_backward)


def relu(x) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    out = x.data * mask  # keeps dtype; 0 exactly where mask is false
    if not x.requires_grad:
        return Tensor(out, op="relu", _parents=(x,))

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return Tensor(out, requires_grad=True, op="relu", _parents=(x,), _backward_fn=_backward)


def add(x, y) -> Tensor:
    """Elementwise sum; the gradient passes to both operands."""
    x, y = as_tensor(x), as_tensor(y)
    if x.data.shape != y.data.shape:
        raise ShapeMismatchError(f"add shape mismatch: {x.data.shape} vs {y.data.shape}")
    out = x.data + y.data
    requires = x.requires_grad or y.requires_grad
    if not requires:
        return Tensor(out, op="add", _parents=(x, y))

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, g)
        _accumulate(y, g)

    return Tensor(out, requires_grad=True, op="add", _parents=(x, y), _backward_fn=_backward)


def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of the squared difference (a rank-0 node)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatchError(
            f"mse shape mismatch: {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).mean())
    requires = pred.requires_grad or target.requires_grad
    if not requires:
        return Tensor(out, op="mse_loss", _parents=(pred, target))

    def _backward(g: np.ndarray) -> None:
        scaled = (2.0 / n) * diff * g
        _accumulate(pred, scaled)
        _accumulate(target, -scaled)

    return Tensor(out, requires_grad=True, op="mse_loss", _parents=(pred, target),
                  _backward_fn=_backward)


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss to every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph")

    nodes: list[Tensor] = []
    seen: set[int] = {id(loss)}
    stack = [loss]
    while stack:
        node = stack.pop()
        nodes.append(node)
        for parent in node._parents:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    # creation order is execution order; replay it backwards
    nodes.sort(key=lambda n: n._seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    loss._consumed = True


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorCheck:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    checks: tuple[TensorCheck, ...]
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> str:
        lines = [
            f"{'PASS' if c.passed else 'FAIL'}  {c.name}: "
            f"max rel err {c.max_rel_error:.3e} over {c.n_checked} coords"
            for c in self.checks
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}  overall (tolerance {self.tolerance:g}, step {self.step:g})")
        return "\n".join(lines)


def grad_check(
    graph_builder,
    tolerance: float = 1e-4,
    h: float = 1e-3,
    n_sample: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``graph_builder`` is called repeatedly and must return
    ``(loss, params)`` where ``params`` maps names to float64 leaf tensors
    that wrap (not copy) the same underlying arrays on every call, so that
    perturbing those arrays in place changes the rebuilt loss.  Large tensors
    are subsampled to ``n_sample`` coordinates.  Mismatches are reported, not
    raised.
    """
    loss, params = graph_builder()
    for name, t in params.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters ({name} is {t.data.dtype})")
    backward(loss)
    analytic = {}
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name} received no gradient")
        analytic[name] = t.grad.copy()

    rng = np.random.default_rng(seed)
    checks = []
    for name, t in params.items():
        arr = t.data
        size = arr.size
        if size <= n_sample:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=n_sample, replace=False)
        max_rel = 0.0
        for idx in coords:
            # index into the original array so perturbation is visible to the
            # builder even for non-contiguous storage
            midx = np.unravel_index(idx, arr.shape)
            orig = arr[midx]
            arr[midx] = orig + h
            loss_plus = graph_builder()[0].item()
            arr[midx] = orig - h
            loss_minus = graph_builder()[0].item()
            arr[midx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            max_rel = max(max_rel, rel)
        checks.append(
            TensorCheck(
                name=name,
                max_rel_error=max_rel,
                n_checked=len(coords),
                passed=max_rel < tolerance,
            )
        )
    return GradCheckReport(checks=tuple(checks), tolerance=tolerance, step=h)
