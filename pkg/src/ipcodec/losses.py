"""Training objectives: reconstruction, rate (in bits), identity, and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import tensor as T

RECON_KINDS = ("l2", "ms-ssim", "none")

# 5-scale weights of the reference MS-SSIM; coarser scales are kept when fewer fit
MSSSIM_WEIGHTS_5 = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_SCALES = 3
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
MIN_COARSE_SIDE = 4
K1, K2 = 0.01, 0.03


def parse_kind(kind: str) -> str:
    k = kind.strip().lower().replace("_", "-")
    if k == "msssim":
        k = "ms-ssim"
    if k not in RECON_KINDS:
        raise ValueError(f"reconstruction kind must be one of {RECON_KINDS}, got {kind!r}")
    return k


@dataclass(frozen=True)
class LossWeights:
    lambda_rate: float = 0.01
    lambda_id: float = 0.0
    kind: str = "l2"

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_kind(self.kind))
        if self.lambda_rate < 0:
            raise ValueError("lambda_rate must be non-negative")
        if self.kind == "none" and not self.lambda_id > 0:
            raise ValueError("reconstruction kind 'none' needs lambda_id > 0; a rate-only objective is degenerate")


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    rate: torch.Tensor
    id: torch.Tensor
    total: torch.Tensor

    def row(self, step: int) -> list:
        return [step] + [float(t.detach()) for t in (self.rec, self.rate, self.id, self.total)]


def msssim_weights(scales: int = MSSSIM_SCALES) -> tuple[float, ...]:
    w = MSSSIM_WEIGHTS_5[-scales:]
    s = sum(w)
    return tuple(x / s for x in w)


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA, dtype=torch.float32) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def window_for(coarse_side: int) -> tuple[int, float]:
    """Window (size, sigma) for a coarsest scale of ``coarse_side`` pixels.

    The standard 11 / 1.5 window whenever it fits; otherwise the largest odd
    size that fits, with sigma shrunk in proportion.
    """
    if coarse_side >= WINDOW_SIZE:
        return WINDOW_SIZE, WINDOW_SIGMA
    size = coarse_side if coarse_side % 2 else coarse_side - 1
    return size, WINDOW_SIGMA * size / WINDOW_SIZE


def _filter(x, window):
    c = x.shape[1]
    w = window.to(x.dtype).expand(c, 1, *window.shape).contiguous()
    return T.conv2d(x, w, groups=c)


def _downsample(x):
    c = x.shape[1]
    w = torch.full((c, 1, 2, 2), 0.25, dtype=x.dtype)
    return T.conv2d(x, w, stride=2, groups=c)


def msssim(x: torch.Tensor, y: torch.Tensor, scales: int = MSSSIM_SCALES, data_range: float = 1.0) -> torch.Tensor:
    """Per-image MS-SSIM (N,), built from differentiable primitives.

    Contrast-structure and luminance terms are clamped at zero before the
    fractional powers; channels are averaged after the product over scales.
    """
    if x.shape != y.shape:
        raise T.ShapeError(f"msssim: shapes differ, {tuple(x.shape)} vs {tuple(y.shape)}")
    min_side = MIN_COARSE_SIDE * 2 ** (scales - 1)
    if min(x.shape[-2:]) < min_side:
        raise ValueError(f"msssim: {scales} scales need sides >= {min_side}, got {tuple(x.shape[-2:])}")
    window = gaussian_window(*window_for(min(x.shape[-2:]) // 2 ** (scales - 1)), dtype=x.dtype)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    weights = msssim_weights(scales)
    result = None
    for s, w in enumerate(weights):
        mu_x, mu_y = _filter(x, window), _filter(y, window)
        sxx = _filter(x * x, window) - mu_x * mu_x
        syy = _filter(y * y, window) - mu_y * mu_y
        sxy = _filter(x * y, window) - mu_x * mu_y
        cs_map = (2 * sxy + c2) / (sxx + syy + c2)
        if s == scales - 1:
            lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
            term = (lum * cs_map).mean(dim=(2, 3))
        else:
            term = cs_map.mean(dim=(2, 3))
            x, y = _downsample(x), _downsample(y)
        term = torch.clamp(term, min=0.0) ** w
        result = term if result is None else result * term
    return result.mean(dim=1)


def loss_rec(x: torch.Tensor, x_hat: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    kind = parse_kind(kind)
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"loss_rec: shapes differ, {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if kind == "l2":
        d = T.subtract(x, x_hat)
        return T.mean_all(T.multiply(d, d))
    if kind == "ms-ssim":
        return 1.0 - msssim(x, x_hat).mean()
    return torch.zeros((), dtype=x.dtype)


def loss_rate(p_y: torch.Tensor, p_z: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the batch of the total self-information, in bits."""
    n = p_y.shape[0]
    bits = -torch.log(p_y).reshape(n, -1).sum(dim=1)
    if p_z is not None:
        bits = bits - torch.log(p_z).reshape(n, -1).sum(dim=1)
    return bits.mean() / math.log(2.0)


def loss_id(e: torch.Tensor, e_hat: torch.Tensor) -> torch.Tensor:
    """Batch mean of 1 - cos(e, e_hat)."""
    if e.shape != e_hat.shape:
        raise T.ShapeError(f"loss_id: embeddings {tuple(e.shape)} vs {tuple(e_hat.shape)}")
    ne, nh = T.l2_norm(e), T.l2_norm(e_hat)
    if bool((ne == 0).any()) or bool((nh == 0).any()):
        raise ValueError("zero-norm embedding: the embedder is degenerate for this input")
    cos = T.dot(e, e_hat) / (ne * nh)
    return (1.0 - cos).mean()


def loss_total(rec: torch.Tensor | None, rate: torch.Tensor, id_: torch.Tensor | None,
               weights: LossWeights) -> LossBreakdown:
    """[rec] + lambda_rate * rate + lambda_id * id; ``rec`` is dropped for kind 'none'."""
    zero = torch.zeros((), dtype=rate.dtype)
    rec_t = rec if (rec is not None and weights.kind != "none") else zero
    id_t = id_ if id_ is not None else zero
    total = weights.lambda_rate * rate
    if weights.kind != "none":
        total = rec_t + total
    if weights.lambda_id != 0:
        if id_ is None:
            raise ValueError("lambda_id > 0 but no identity loss supplied")
        total = total + weights.lambda_id * id_t
    return LossBreakdown(rec=rec_t, rate=rate, id=id_t, total=total)
