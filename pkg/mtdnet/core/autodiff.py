"""
Reverse-mode automatic differentiation over numpy arrays.

Every primitive returns a new ``Tensor`` that remembers its inputs and a
closure that pushes the output gradient back into them. ``backward`` orders
the recorded nodes topologically from a scalar loss and runs the closures in
reverse, summing gradients where a tensor feeds several consumers.

Primitives accept an unbatched sample (``[C, H, W]``, ``[D]``) or a batch with
a leading axis (``[N, C, H, W]``, ``[N, D]``).
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ShapeError

logger = logging.getLogger(__name__)

REL_ERROR_FLOOR = 1e-6

ArrayLike = Union[np.ndarray, Sequence[float], float]


class Tensor:
    """Dense real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self.parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def label(self) -> str:
        return self.name or self.op

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward: Callable[[np.ndarray], None], name: Optional[str] = None) -> Tensor:
    out = Tensor(data, name=name)
    out.op = op
    out.parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.data.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def _batched(x: Tensor, ndim: int, fn: Callable[[Tensor], Tensor]) -> Tensor:
    """Run ``fn`` on a batched view of ``x`` when ``x`` is a single sample."""
    if x.ndim == ndim - 1:
        out = fn(reshape(x, (1,) + x.shape))
        return reshape(out, out.shape[1:])
    return fn(x)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Spatial output size of a convolution or pooling window."""
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Tuple[int, ...], name: Optional[str] = None) -> Tensor:
    """View ``x`` with a new shape of the same size."""
    data = x.data.reshape(shape)

    def _backward(grad: np.ndarray) -> None:
        _accumulate(x, grad.reshape(x.shape))

    return _result(data, (x,), "reshape", _backward, name)


def flatten(x: Tensor, name: Optional[str] = None) -> Tensor:
    """Flatten everything but the batch axis: ``[N, C, H, W] -> [N, C*H*W]``."""
    if x.ndim < 2:
        raise ShapeError(f"flatten needs a batched tensor, got shape {x.shape}")
    return reshape(x, (x.shape[0], -1), name=name or "flatten")


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, pad: int = 0,
           name: Optional[str] = None) -> Tensor:
    """2-D cross-correlation: ``[N, C_in, H, W] * [C_out, C_in, kH, kW] -> [N, C_out, H', W']``."""
    if x.ndim == 3:
        return _batched(x, 4, lambda xb: conv2d(xb, weights, bias, stride, pad, name))
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W] input and 4-D weights, got {x.shape} and {weights.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weights.shape
    if c != c_in:
        raise ShapeError(f"conv2d{_where(name)}: input has {c} channels but weights expect {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d{_where(name)}: bias shape {bias.shape} != ({c_out},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d{_where(name)}: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"conv2d{_where(name)}: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, weights.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def _backward(grad: np.ndarray) -> None:
        if weights.requires_grad:
            _accumulate(weights, np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])))
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            grad_xp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(grad, weights.data[:, :, i, j], axes=([1], [0]))
                    grad_xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        contrib.transpose(0, 3, 1, 2)
            if pad:
                grad_xp = grad_xp[:, :, pad:pad + h, pad:pad + w]
            _accumulate(x, grad_xp)

    return _result(out, (x, weights, bias), "conv2d", _backward, name)


def maxpool2d(x: Tensor, k: int, stride: int, name: Optional[str] = None) -> Tensor:
    """Max over ``k x k`` windows; ties route the gradient to the first index in the window."""
    if k < 1 or stride < 1:
        raise ShapeError(f"maxpool2d{_where(name)}: k and stride must be >= 1, got {k}, {stride}")
    if x.ndim == 3:
        return _batched(x, 4, lambda xb: maxpool2d(xb, k, stride, name))
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d{_where(name)}: window {k} larger than input {h}x{w}")

    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    flat = windows.reshape(n, c, h_out, w_out, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _backward(grad: np.ndarray) -> None:
        grad_x = np.zeros_like(x.data)
        rows = (np.arange(h_out) * stride)[None, None, :, None] + arg // k
        cols = (np.arange(w_out) * stride)[None, None, None, :] + arg % k
        n_idx = np.arange(n)[:, None, None, None]
        c_idx = np.arange(c)[None, :, None, None]
        np.add.at(grad_x, (n_idx, c_idx, rows, cols), grad)
        _accumulate(x, grad_x)

    return _result(out, (x,), "maxpool2d", _backward, name)


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor, name: Optional[str] = None) -> Tensor:
    """Affine map ``out[i] = sum_j w[i, j] x[j] + b[i]`` over the last axis."""
    if x.ndim == 1:
        return _batched(x, 2, lambda xb: fully_connected(xb, weights, bias, name))
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"fully_connected expects [N,D] input and 2-D weights, got {x.shape}, {weights.shape}")
    d_out, d_in = weights.shape
    if x.shape[1] != d_in:
        raise ShapeError(f"fully_connected{_where(name)}: input dim {x.shape[1]} != weight input dim {d_in}")
    if bias.shape != (d_out,):
        raise ShapeError(f"fully_connected{_where(name)}: bias shape {bias.shape} != ({d_out},)")

    out = x.data @ weights.data.T + bias.data

    def _backward(grad: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, grad @ weights.data)
        if weights.requires_grad:
            _accumulate(weights, grad.T @ x.data)
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=0))

    return _result(out, (x, weights, bias), "fully_connected", _backward, name)


def relu(x: Tensor, name: Optional[str] = None) -> Tensor:
    """Elementwise ``max(0, x)`` with subgradient 0 at 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def _backward(grad: np.ndarray) -> None:
        _accumulate(x, grad * mask)

    return _result(out, (x,), "relu", _backward, name)


def concat_channels(a: Tensor, b: Tensor, name: Optional[str] = None) -> Tensor:
    """Stack ``a`` and ``b`` along the channel axis: ``[C1,H,W] + [C2,H,W] -> [C1+C2,H,W]``."""
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_channels expects two 3-D or two 4-D tensors, got {a.shape}, {b.shape}")
    axis = a.ndim - 3
    if a.shape[:axis] != b.shape[:axis] or a.shape[axis + 1:] != b.shape[axis + 1:]:
        raise ShapeError(f"concat_channels{_where(name)}: spatial/batch mismatch {a.shape} vs {b.shape}")
    split = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def _backward(grad: np.ndarray) -> None:
        first, second = np.split(grad, [split], axis=axis)
        _accumulate(a, first)
        _accumulate(b, second)

    return _result(out, (a, b), "concat_channels", _backward, name)


def stack_rows(tensors: Sequence[Tensor], name: Optional[str] = None) -> Tensor:
    """Concatenate batched tensors along the batch axis."""
    if not tensors:
        raise ShapeError("stack_rows needs at least one tensor")
    tail = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != tail:
            raise ShapeError(f"stack_rows: row shape {t.shape[1:]} != {tail}")
    bounds = np.cumsum([t.shape[0] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def _backward(grad: np.ndarray) -> None:
        for t, part in zip(tensors, np.split(grad, bounds, axis=0)):
            _accumulate(t, part)

    return _result(out, tuple(tensors), "stack_rows", _backward, name)


def take_rows(x: Tensor, indices: Sequence[int], name: Optional[str] = None) -> Tensor:
    """Gather rows of a batched tensor; repeated indices sum their gradients."""
    idx = np.asarray(indices, dtype=np.int64)
    out = x.data[idx]

    def _backward(grad: np.ndarray) -> None:
        grad_x = np.zeros_like(x.data)
        np.add.at(grad_x, idx, grad)
        _accumulate(x, grad_x)

    return _result(out, (x,), "take_rows", _backward, name)


def sq_euclidean(a: Tensor, b: Tensor, name: Optional[str] = None) -> Tensor:
    """Squared Euclidean distance over the last axis."""
    if a.shape != b.shape:
        raise ShapeError(f"sq_euclidean{_where(name)}: dim mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.sum(diff * diff, axis=-1)

    def _backward(grad: np.ndarray) -> None:
        g = 2.0 * diff * np.asarray(grad)[..., None]
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(out, (a, b), "sq_euclidean", _backward, name)


def l2_normalize(x: Tensor, eps: float = 1e-12, name: Optional[str] = None) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def _backward(grad: np.ndarray) -> None:
        _accumulate(x, (grad - out * np.sum(grad * out, axis=-1, keepdims=True)) / norm)

    return _result(out, (x,), "l2_normalize", _backward, name)


def softmax2(logits: Tensor, name: Optional[str] = None) -> Tensor:
    """Two-way softmax over the last axis (max-subtracted, so large logits do not overflow)."""
    if logits.shape[-1] != 2:
        raise ShapeError(f"softmax2 expects 2 logits on the last axis, got {logits.shape}")
    probs = special.softmax(logits.data, axis=-1)

    def _backward(grad: np.ndarray) -> None:
        _accumulate(logits, probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True)))

    return _result(probs, (logits,), "softmax2", _backward, name)


def select_column(x: Tensor, column: int, name: Optional[str] = None) -> Tensor:
    """Pick one column of a ``[N, K]`` tensor."""
    out = x.data[..., column]

    def _backward(grad: np.ndarray) -> None:
        grad_x = np.zeros_like(x.data)
        grad_x[..., column] = grad
        _accumulate(x, grad_x)

    return _result(out, (x,), "select_column", _backward, name)


def add(a: Tensor, b: Tensor, name: Optional[str] = None) -> Tensor:
    """Elementwise sum of two tensors of equal shape."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def _backward(grad: np.ndarray) -> None:
        _accumulate(a, grad)
        _accumulate(b, grad)

    return _result(a.data + b.data, (a, b), "add", _backward, name)


def weighted_sum(tensors: Sequence[Tensor], weights: Sequence[float], name: Optional[str] = None) -> Tensor:
    """``sum_i w_i * t_i`` over tensors of equal shape."""
    if len(tensors) != len(weights) or not tensors:
        raise ShapeError(f"weighted_sum needs matching non-empty lists, got {len(tensors)} and {len(weights)}")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(f"weighted_sum: shapes differ {[t.shape for t in tensors]}")
    out = sum(w * t.data for t, w in zip(tensors, weights))

    def _backward(grad: np.ndarray) -> None:
        for t, w in zip(tensors, weights):
            _accumulate(t, w * grad)

    return _result(np.asarray(out), tuple(tensors), "weighted_sum", _backward, name)


def _where(name: Optional[str]) -> str:
    return f" [{name}]" if name else ""


# ---------------------------------------------------------------------------
# Graph and reverse pass
# ---------------------------------------------------------------------------

class Graph:
    """Named parameter store plus the node order of the last traced pass."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.nodes: List[Tensor] = []

    def add_parameter(self, name: str, data: ArrayLike) -> Tensor:
        if name in self.params:
            raise ValueError(f"Duplicate parameter name '{name}'")
        tensor = Tensor(np.array(data, dtype=self.dtype), requires_grad=True, name=name)
        tensor.op = "param"
        self.params[name] = tensor
        return tensor

    def parameter(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ShapeError(f"Graph has no parameter '{name}'") from None

    def constant(self, data: ArrayLike, name: Optional[str] = None) -> Tensor:
        tensor = Tensor(np.asarray(data, dtype=self.dtype), name=name)
        tensor.op = "input"
        return tensor

    def trace(self, output: Tensor) -> List[Tensor]:
        """Record and return the nodes reaching ``output`` in topological order."""
        self.nodes = topological_order(output)
        return self.nodes

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def gradients(self) -> Dict[str, np.ndarray]:
        return {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.params.items()
        }

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy parameter values in; ``strict`` also rejects unused entries."""
        for name, tensor in self.params.items():
            if name not in state:
                raise ShapeError(f"Missing parameter '{name}' in state")
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"Parameter '{name}' has shape {value.shape}, expected {tensor.shape}")
        if strict:
            extra = [name for name in state if name not in self.params]
            if extra:
                raise ShapeError(f"Unexpected parameter '{extra[0]}' in state")
        for name, tensor in self.params.items():
            tensor.data = np.array(state[name], dtype=self.dtype)
            tensor.grad = None

    def astype(self, dtype) -> "Graph":
        """Copy of this graph with parameters cast to ``dtype``."""
        graph = Graph(dtype)
        for name, tensor in self.params.items():
            graph.add_parameter(name, tensor.data)
        return graph

    def frozen(self) -> "Graph":
        """Snapshot whose parameters do not track gradients."""
        graph = self.astype(self.dtype)
        for tensor in graph.params.values():
            tensor.requires_grad = False
        return graph

    def __contains__(self, name: str) -> bool:
        return name in self.params


def topological_order(root: Tensor) -> List[Tensor]:
    """All nodes reaching ``root``, inputs before consumers."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(graph: Optional[Graph], loss: Tensor) -> Dict[str, np.ndarray]:
    """Back-propagate a scalar loss; return gradients of ``graph``'s parameters by name."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    if graph is not None:
        graph.zero_grad()
        graph.nodes = order
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node.parents:
                node.grad = None  # intermediate buffers are not needed after propagation
    return graph.gradients() if graph is not None else {}


def first_non_finite(output: Tensor) -> Optional[Tensor]:
    """First node, in evaluation order, holding a NaN or infinite value."""
    for node in topological_order(output):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric gradients."""
    max_rel_error: Dict[str, float] = field(default_factory=dict)
    failed: List[str] = field(default_factory=list)
    non_finite: List[str] = field(default_factory=list)
    checked_entries: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failed and not self.non_finite

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        relation = "<" if self.worst < self.tol else ">="
        text = (f"{status}: max rel err {self.worst:.3e} {relation} {self.tol:g} "
                f"over {len(self.max_rel_error)} parameters ({self.checked_entries} entries)")
        if self.failed:
            text += f"; over tolerance: {', '.join(self.failed)}"
        if self.non_finite:
            text += f"; non-finite: {', '.join(self.non_finite)}"
        return text


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERROR_FLOOR)


def finite_diff_check(graph: Graph, loss_fn: Callable[[], Tensor], h: float = 1e-5,
                      tol: float = 1e-4, analytic: Optional[Dict[str, np.ndarray]] = None,
                      max_entries: int = 16, seed: int = 0,
                      names: Optional[Iterable[str]] = None, refine: bool = True) -> GradCheckReport:
    """Compare ``backward`` against central differences ``(L(t+h) - L(t-h)) / 2h``.

    ``loss_fn`` must rebuild the loss from the current parameter values.
    Parameters larger than ``max_entries`` are checked on a seeded sample of
    entries. With ``refine``, an entry over tolerance is re-measured with steps
    ``10h`` and ``h/10`` and keeps its best agreement, so a single ReLU or
    max-pool kink inside ``[t - h, t + h]`` is not reported.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check needs h > 0, got {h}")
    if analytic is None:
        analytic = backward(graph, loss_fn())
    report = GradCheckReport(tol=tol)
    for name in (names if names is not None else list(graph.params)):
        param = graph.params[name]
        param.data = np.ascontiguousarray(param.data)
        flat = param.data.reshape(-1)
        grad = np.asarray(analytic.get(name, np.zeros_like(param.data))).reshape(-1)
        if flat.size <= max_entries:
            entries = np.arange(flat.size)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        finite = bool(np.all(np.isfinite(grad)))
        for i in entries:
            numeric = _central_difference(flat, i, h, loss_fn)
            if not (np.isfinite(numeric) and np.isfinite(grad[i])):
                finite = False
                continue
            error = relative_error(float(grad[i]), numeric)
            if refine and error >= tol:
                for step in (10.0 * h, h / 10.0):
                    error = min(error, relative_error(float(grad[i]), _central_difference(flat, i, step, loss_fn)))
                    if error < tol:
                        break
            worst = max(worst, error)
        report.max_rel_error[name] = worst
        report.checked_entries += len(entries)
        if not finite:
            report.non_finite.append(name)
        elif worst >= tol:
            report.failed.append(name)
    logger.debug(report.summary())
    return report


def _central_difference(flat: np.ndarray, i: int, h: float, loss_fn: Callable[[], Tensor]) -> float:
    original = flat[i]
    try:
        flat[i] = original + h
        up = loss_fn().item()
        flat[i] = original - h
        down = loss_fn().item()
    finally:
        flat[i] = original
    return (up - down) / (2.0 * h)
