"""Probability models for the hyper-latent (factorized prior) and the latent
(zero-mean Gaussian conditional), plus their discretization into coder tables.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr
from scipy.stats import norm
from torch import nn
from torch.nn import functional as F

from . import tensor as T
from .codec import SIGMA_MIN
from .rangecoder import PRECISION, PMFTable

LIKELIHOOD_FLOOR = 1e-9
TAIL_MASS = 1e-9
SCALE_MAX = 64.0
N_SCALES = 64
MAX_SUPPORT = 1 << 15

SCALE_TABLE = np.exp(np.linspace(math.log(SIGMA_MIN), math.log(SCALE_MAX), N_SCALES))


def _inv_softplus(x: float) -> float:
    return math.log(math.expm1(x))


class FactorizedPrior(nn.Module):
    """Per-channel monotone CDF network c(v) (widths 1-3-3-1).

    Matrices are softplus-reparameterized to stay positive, and the hidden
    nonlinearity ``h + tanh(a) * tanh(h)`` is increasing because
    ``tanh(a) > -1``; hence c is non-decreasing in v.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3), init_scale: float = 10.0,
                 init: str = "default", seed: int = 0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        g = torch.Generator().manual_seed(seed)
        scale = init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            if init == "logistic":
                # composed linear map with slope exactly 1: c(v) = logistic(v)
                value = 1.0 if i == 0 else 1.0 / dims[i]
                bias = torch.zeros(channels, dims[i + 1], 1)
            elif init == "default":
                value = 1.0 / scale / dims[i + 1]
                bias = torch.rand(channels, dims[i + 1], 1, generator=g) - 0.5
            else:
                raise ValueError(f"unknown init {init!r}")
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), _inv_softplus(value))))
            self.biases.append(nn.Parameter(bias))
            if i < len(self.filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, v: torch.Tensor) -> torch.Tensor:
        """``v``: (C, 1, M) -> logits of c(v), same shape."""
        h = v
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            h = torch.matmul(F.softplus(m), h) + b
            if i < len(self.factors):
                h = h + torch.tanh(self.factors[i]) * torch.tanh(h)
        return h

    def cdf(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cumulative(v))


def _interval_mass(lower: torch.Tensor, upper: torch.Tensor) -> torch.Tensor:
    # evaluate in whichever tail keeps the sigmoids away from 1
    sign = torch.where(lower + upper > 0, -1.0, 1.0).to(lower.dtype).detach()
    return torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))


def likelihood_factorized(z_hat: torch.Tensor, prior: FactorizedPrior) -> torch.Tensor:
    """p(z) = c(z + 1/2) - c(z - 1/2) per element, floored at 1e-9. ``z_hat`` is N x C x H x W."""
    n, c, h, w = z_hat.shape
    if c != prior.channels:
        raise T.ShapeError(f"factorized prior has {prior.channels} channels, input has {c}")
    v = z_hat.permute(1, 0, 2, 3).reshape(c, 1, -1)
    p = _interval_mass(prior.logits_cumulative(v - 0.5), prior.logits_cumulative(v + 0.5))
    p = p.reshape(c, n, h, w).permute(1, 0, 2, 3)
    return torch.clamp(p, min=LIKELIHOOD_FLOOR)


def likelihood_gaussian(y_hat: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Zero-mean Gaussian mass on [y - 1/2, y + 1/2], floored at 1e-9."""
    if y_hat.shape != sigma.shape:
        raise T.ShapeError(f"likelihood_gaussian: {tuple(y_hat.shape)} vs scale {tuple(sigma.shape)}")
    v = T.absolute(y_hat)
    upper = T.normal_cdf((0.5 - v) / sigma)
    lower = T.normal_cdf((-0.5 - v) / sigma)
    return torch.clamp(upper - lower, min=LIKELIHOOD_FLOOR)


def snap_scale_index(sigma) -> np.ndarray:
    """Index of the nearest scale-table entry in log space."""
    s = np.asarray(sigma, dtype=np.float64)
    step = (math.log(SCALE_MAX) - math.log(SIGMA_MIN)) / (N_SCALES - 1)
    idx = np.floor((np.log(np.maximum(s, SIGMA_MIN)) - math.log(SIGMA_MIN)) / step + 0.5)
    return np.clip(idx, 0, N_SCALES - 1).astype(np.int64)


# --------------------------------------------------------------------------- #
# coder tables
# --------------------------------------------------------------------------- #

def quantize_pmf(pmf: np.ndarray, lower: int, precision: int = PRECISION) -> PMFTable:
    """Integer frequencies summing to 2**precision, each >= 1; the largest bin absorbs the residue."""
    total = 1 << precision
    p = np.asarray(pmf, dtype=np.float64)
    p = p / p.sum()
    freq = np.maximum(1, np.round(p * total)).astype(np.int64)
    top = int(np.argmax(freq))
    freq[top] += total - int(freq.sum())
    if freq[top] < 1:
        raise ValueError("pmf has too many symbols to quantize at this precision")
    cdf = np.concatenate([[0], np.cumsum(freq)])
    return PMFTable(int(lower), tuple(int(c) for c in cdf))


def gaussian_table(sigma: float) -> PMFTable:
    half = int(math.ceil(sigma * norm.isf(TAIL_MASS / 2) - 0.5))
    half = max(half, 0)
    if 2 * half + 1 > MAX_SUPPORT:
        raise ValueError(f"scale {sigma} needs {2 * half + 1} symbols")
    k = np.abs(np.arange(-half, half + 1, dtype=np.float64))
    pmf = ndtr((0.5 - k) / sigma) - ndtr((-0.5 - k) / sigma)
    return quantize_pmf(pmf, -half)


def factorized_tables(prior: FactorizedPrior) -> list[PMFTable]:
    """One table per channel; the support drops < 1e-9 of mass in the tails."""
    with torch.no_grad():
        half = MAX_SUPPORT
        grid = torch.arange(-half, half + 1, dtype=torch.float64)
        c = prior.channels
        v = grid.view(1, 1, -1).expand(c, 1, -1)
        prior64 = _as_float64(prior)
        lo = prior64.logits_cumulative(v - 0.5)[:, 0, :]
        hi = prior64.logits_cumulative(v + 0.5)[:, 0, :]
        below = torch.sigmoid(lo)  # mass below symbol k
        above = torch.sigmoid(-hi)  # mass above symbol k
        tables = []
        for ch in range(c):
            ok_low = torch.nonzero(below[ch] < TAIL_MASS / 2).flatten()
            ok_high = torch.nonzero(above[ch] < TAIL_MASS / 2).flatten()
            if len(ok_low) == 0 or len(ok_high) == 0:
                raise ValueError(f"channel {ch}: prior support exceeds {MAX_SUPPORT} symbols")
            lo_i, hi_i = int(ok_low.max()), int(ok_high.min())
            if hi_i < lo_i:
                lo_i = hi_i = int(torch.argmax(_interval_mass(lo[ch], hi[ch])))
            if hi_i - lo_i + 1 > MAX_SUPPORT:
                raise ValueError(f"channel {ch}: prior support exceeds {MAX_SUPPORT} symbols")
            pmf = _interval_mass(lo[ch, lo_i:hi_i + 1], hi[ch, lo_i:hi_i + 1]).numpy()
            tables.append(quantize_pmf(pmf, lo_i - half))
        return tables


def _as_float64(prior: FactorizedPrior) -> FactorizedPrior:
    clone = FactorizedPrior(prior.channels, prior.filters)
    clone.load_state_dict(prior.state_dict())
    return clone.double()


@dataclass
class TableSet:
    factorized: list[PMFTable]
    gaussian: list[PMFTable]


def build_pmf_tables(prior: FactorizedPrior) -> TableSet:
    return TableSet(factorized=factorized_tables(prior), gaussian=[gaussian_table(float(s)) for s in SCALE_TABLE])


def clamp_to_support(values, lower, upper) -> tuple[np.ndarray, int]:
    """Clamp integer symbols into ``[lower, upper]`` (scalars or per-element arrays)."""
    v = np.asarray(values, dtype=np.int64)
    clamped = np.clip(v, lower, upper)
    return clamped, int(np.count_nonzero(clamped != v))
