"""Differentiable primitives, a tiny named compute graph, and a finite-difference oracle.

Tensors are plain ``torch.Tensor`` objects (NCHW for images); reverse-mode
differentiation is delegated to torch autograd. Every primitive validates its
operand shapes explicitly -- there is no implicit broadcasting -- so a graph
with mismatched operands fails at the offending node rather than silently
expanding.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Operand shapes do not match a primitive's signature."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _same(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    _require(a.shape == b.shape, f"{op}: expected identical shapes, got {tuple(a.shape)} and {tuple(b.shape)}")


# --------------------------------------------------------------------------- #
# primitives
# --------------------------------------------------------------------------- #

def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    _require(x.dim() == 4, f"conv2d: input must be NCHW, got {tuple(x.shape)}")
    _require(weight.dim() == 4, f"conv2d: weight must be OIHW, got {tuple(weight.shape)}")
    _require(
        x.shape[1] == weight.shape[1] * groups,
        f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1] * groups}",
    )
    if bias is not None:
        _require(bias.shape == (weight.shape[0],), f"conv2d: bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_size=None):
    """Transposed convolution; ``output_size`` (H, W) resolves the stride ambiguity."""
    _require(x.dim() == 4, f"conv_transpose2d: input must be NCHW, got {tuple(x.shape)}")
    _require(weight.dim() == 4, f"conv_transpose2d: weight must be IOHW, got {tuple(weight.shape)}")
    _require(
        x.shape[1] == weight.shape[0],
        f"conv_transpose2d: input has {x.shape[1]} channels, weight expects {weight.shape[0]}",
    )
    if bias is not None:
        _require(bias.shape == (weight.shape[1],), f"conv_transpose2d: bias shape {tuple(bias.shape)}")
    k = weight.shape[-1]
    out_pad = (0, 0)
    if output_size is not None:
        out_pad = []
        for n, target in zip(x.shape[-2:], output_size):
            base = (n - 1) * stride - 2 * padding + k
            extra = target - base
            _require(0 <= extra < stride, f"conv_transpose2d: cannot reach size {target} from {n}")
            out_pad.append(extra)
        out_pad = tuple(out_pad)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding, output_padding=out_pad)


def leaky_relu(x, slope=0.2):
    # right-hand subgradient at 0 (slope 1), matching torch
    return F.leaky_relu(x, slope)


def sigmoid(x):
    return torch.sigmoid(x)


def softplus(x):
    return F.softplus(x)


def tanh(x):
    return torch.tanh(x)


def absolute(x):
    return torch.abs(x)


def add(a, b):
    _same(a, b, "add")
    return a + b


def subtract(a, b):
    _same(a, b, "subtract")
    return a - b


def multiply(a, b):
    _same(a, b, "multiply")
    return a * b


def divide(a, b):
    _same(a, b, "divide")
    return a / b


def scale(x, c: float):
    """Multiply by a Python scalar (the one sanctioned scalar broadcast)."""
    return x * c


def log(x):
    return torch.log(x)


def exp(x):
    return torch.exp(x)


def sqrt(x):
    return torch.sqrt(x)


def normal_cdf(x):
    """Standard normal CDF, 0.5 * erfc(-x / sqrt 2)."""
    return 0.5 * torch.special.erfc(x * (-1.0 / math.sqrt(2.0)))


def sum_all(x):
    return x.sum()


def mean_all(x):
    return x.mean()


def sum_dims(x, dims: Sequence[int]):
    return x.sum(dim=tuple(dims))


def mean_dims(x, dims: Sequence[int]):
    return x.mean(dim=tuple(dims))


def matmul(a, b):
    _require(a.dim() == 2 and b.dim() == 2, f"matmul: expected 2-D operands, got {tuple(a.shape)} @ {tuple(b.shape)}")
    _require(a.shape[1] == b.shape[0], f"matmul: inner extents differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def resize_bilinear(x, size: tuple[int, int]):
    """Bilinear resampling with half-pixel centres; a linear map of ``x``."""
    _require(x.dim() == 4, f"resize_bilinear: input must be NCHW, got {tuple(x.shape)}")
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def crop(x, top: int, left: int, height: int, width: int):
    _require(x.dim() == 4, f"crop: input must be NCHW, got {tuple(x.shape)}")
    _require(
        0 <= top and 0 <= left and top + height <= x.shape[2] and left + width <= x.shape[3],
        f"crop: window ({top},{left},{height},{width}) outside {tuple(x.shape)}",
    )
    return x[:, :, top:top + height, left:left + width]


def l2_norm(x):
    """Row-wise Euclidean norm of an (N, D) matrix."""
    _require(x.dim() == 2, f"l2_norm: expected (N, D), got {tuple(x.shape)}")
    return torch.sqrt((x * x).sum(dim=1))


def dot(a, b):
    """Row-wise inner product of two (N, D) matrices."""
    _require(a.dim() == 2, f"dot: expected (N, D), got {tuple(a.shape)}")
    _same(a, b, "dot")
    return (a * b).sum(dim=1)


def round_half_away(x):
    """Round half away from zero (not differentiable; see codec.quantize)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


PRIMITIVES: dict[str, Callable] = {
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "tanh": tanh,
    "abs": absolute,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "scale": scale,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "normal_cdf": normal_cdf,
    "sum": sum_all,
    "mean": mean_all,
    "matmul": matmul,
    "resize_bilinear": resize_bilinear,
    "crop": crop,
    "l2_norm": l2_norm,
    "dot": dot,
}


# --------------------------------------------------------------------------- #
# compute graph
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...]
    attrs: Mapping = field(default_factory=dict)


class ComputeGraph:
    """Topologically ordered list of primitive applications.

    ``params`` are leaf tensors owned by the graph; other leaves are bound at
    evaluation time through ``forward_eval``'s ``inputs`` mapping.
    """

    def __init__(self, nodes: Sequence[Node], params: Mapping[str, torch.Tensor] | None = None):
        self.nodes = list(nodes)
        self.params = dict(params or {})
        seen = set(self.params)
        for node in self.nodes:
            if node.op != "input" and node.op not in PRIMITIVES:
                raise ValueError(f"node {node.name!r}: unknown primitive {node.op!r}")
            if node.name in seen:
                raise ValueError(f"node {node.name!r} defined twice")
            for ref in node.inputs:
                if ref not in seen:
                    raise ValueError(f"node {node.name!r} references {ref!r} before it is defined")
            seen.add(node.name)

    @property
    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "input"]


def forward_eval(graph: ComputeGraph, inputs: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Evaluate every node in order and return all values by name."""
    values: dict[str, torch.Tensor] = dict(graph.params)
    for node in graph.nodes:
        if node.op == "input":
            if node.name not in inputs:
                raise KeyError(f"input {node.name!r} is not bound")
            values[node.name] = inputs[node.name]
            continue
        args = [values[r] for r in node.inputs]
        try:
            values[node.name] = PRIMITIVES[node.op](*args, **dict(node.attrs))
        except ShapeError as exc:
            raise ShapeError(f"node {node.name!r} ({node.op}): {exc}") from None
    return values


def backward(values: Mapping[str, torch.Tensor], seed: str, wrt: Sequence[str] | None = None) -> dict[str, torch.Tensor]:
    """Reverse-mode pass from the scalar node ``seed``.

    Gradients accumulate into ``.grad`` of every leaf that requires grad; a
    second call without zeroing them adds to the previous result. Returns the
    accumulated gradients of ``wrt`` (default: all grad-requiring leaves).
    """
    out = values[seed]
    if out.numel() != 1:
        raise ShapeError(f"backward seed {seed!r} must be scalar, got shape {tuple(out.shape)}")
    out.backward(retain_graph=True)
    names = wrt if wrt is not None else [k for k, v in values.items() if v.is_leaf and v.requires_grad]
    return {k: values[k].grad for k in names}


def finite_diff_grad(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, step: float = 1e-5,
                     indices: Sequence[int] | None = None) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn`` at ``point``.

    With ``indices`` only those flat positions are probed; the rest of the
    returned tensor is zero.
    """
    base = point.detach().clone()
    flat = base.view(-1)
    grad = torch.zeros_like(flat)
    probe = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in probe:
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(base))
            flat[i] = orig - step
            lo = float(fn(base))
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * step)
    return grad.view_as(point)


def relative_error(actual: torch.Tensor, expected: torch.Tensor) -> float:
    """Max absolute deviation scaled by the oracle's max magnitude."""
    denom = max(float(expected.abs().max()), 1e-12)
    return float((actual - expected).abs().max()) / denom


# --------------------------------------------------------------------------- #
# serialization: LE u32 rank, LE u32 extents, LE f32 elements
# --------------------------------------------------------------------------- #

def write_tensor(fh: BinaryIO, t: torch.Tensor) -> None:
    arr = t.detach().to(torch.float32).contiguous().cpu().numpy()
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4").tobytes())


def tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().to(torch.float32).contiguous().cpu().numpy()
    return struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape) + arr.astype("<f4").tobytes()


def read_tensor(fh: BinaryIO) -> torch.Tensor:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = math.prod(shape)
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").astype(np.float32)
    return torch.from_numpy(data.reshape(shape).copy())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"expected {n} bytes, got {len(buf)}")
    return buf
