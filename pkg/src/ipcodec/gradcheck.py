"""Finite-difference verification of every primitive and every loss.

Each case draws random float64 instances, differentiates a scalar function
with autograd, and compares against central differences. Large inputs are
probed at a random subset of coordinates to keep the suite fast.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn
from torch.func import functional_call

from . import tensor as T
from .codec import Architecture
from .embedder import AlignerConfig, make_embedder
from .entropy import FactorizedPrior, likelihood_factorized, likelihood_gaussian
from .losses import LossWeights, loss_id, loss_rate, loss_rec, loss_total
from .model import CompressionModel

DTYPE = torch.float64
TOLERANCE = 1e-4
STEP = 1e-5
MAX_PROBES = 24


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


Builder = Callable[[torch.Generator], tuple[Callable[[torch.Tensor], torch.Tensor], torch.Tensor]]


def _rand(g, *shape, lo=-1.0, hi=1.0):
    return torch.rand(shape, generator=g, dtype=DTYPE) * (hi - lo) + lo


def _away_from_zero(g, *shape, margin=0.1):
    # magnitudes in [margin, 1], random sign
    mag = _rand(g, *shape, lo=margin, hi=1.0)
    sign = torch.where(torch.rand(shape, generator=g) < 0.5, -1.0, 1.0).to(DTYPE)
    return mag * sign


def _packed(*tensors):
    """Flatten operands into one point; return (point, unpack)."""
    shapes = [t.shape for t in tensors]
    sizes = [t.numel() for t in tensors]
    point = torch.cat([t.reshape(-1) for t in tensors])

    def unpack(p):
        out, i = [], 0
        for s, n in zip(shapes, sizes):
            out.append(p[i:i + n].reshape(s))
            i += n
        return out

    return point, unpack


def _weighted(op, x, g):
    # a random linear functional makes every output element matter
    w = _rand(g, *op(x).shape)
    return (lambda p: T.sum_all(T.multiply(op(p), w))), x


def _elementwise(op, make):
    def build(g):
        return _weighted(op, make(g), g)
    return build


def _binary(op, make_a, make_b):
    def build(g):
        a, b = make_a(g), make_b(g)
        point, unpack = _packed(a, b)
        w = _rand(g, *op(a, b).shape)
        return (lambda p: T.sum_all(T.multiply(op(*unpack(p)), w))), point
    return build


def _conv_case(g):
    x, w, b = _rand(g, 2, 3, 7, 7), _rand(g, 4, 3, 3, 3), _rand(g, 4)
    point, unpack = _packed(x, w, b)
    f = lambda x_, w_, b_: T.conv2d(x_, w_, b_, stride=2, padding=1)
    r = _rand(g, *f(x, w, b).shape)
    return (lambda p: T.sum_all(T.multiply(f(*unpack(p)), r))), point


def _deconv_case(g):
    x, w, b = _rand(g, 2, 4, 4, 4), _rand(g, 4, 3, 5, 5), _rand(g, 3)
    point, unpack = _packed(x, w, b)
    f = lambda x_, w_, b_: T.conv_transpose2d(x_, w_, b_, stride=2, padding=2, output_size=(8, 8))
    r = _rand(g, *f(x, w, b).shape)
    return (lambda p: T.sum_all(T.multiply(f(*unpack(p)), r))), point


def _reduction(op):
    def build(g):
        x = _rand(g, 2, 3, 4, 5)
        return (lambda p: T.multiply(op(p), op(p))), x
    return build


def _matmul_case(g):
    a, b = _rand(g, 4, 5), _rand(g, 5, 3)
    point, unpack = _packed(a, b)
    r = _rand(g, 4, 3)
    return (lambda p: T.sum_all(T.multiply(T.matmul(*unpack(p)), r))), point


def _resize_case(g):
    x = _rand(g, 1, 2, 7, 9)
    size = (int(torch.randint(3, 14, (1,), generator=g)), int(torch.randint(3, 14, (1,), generator=g)))
    return _weighted(lambda p: T.resize_bilinear(p, size), x, g)


def _crop_case(g):
    x = _rand(g, 1, 2, 8, 8)
    top, left = (int(v) for v in torch.randint(0, 4, (2,), generator=g))
    return _weighted(lambda p: T.crop(p, top, left, 4, 4), x, g)


def _rows_reduction(op):
    def build(g):
        x = _away_from_zero(g, 3, 6, margin=0.2)
        w = _rand(g, 3)
        return (lambda p: T.sum_all(T.multiply(op(p), w))), x
    return build


def _dot_case(g):
    a, b = _rand(g, 3, 6), _rand(g, 3, 6)
    point, unpack = _packed(a, b)
    w = _rand(g, 3)
    return (lambda p: T.sum_all(T.multiply(T.dot(*unpack(p)), w))), point


# --------------------------------------------------------------------------- #
# losses
# --------------------------------------------------------------------------- #

def _l2_case(g):
    x, xh = _rand(g, 2, 3, 8, 8, lo=0, hi=1), _rand(g, 2, 3, 8, 8, lo=0, hi=1)
    return (lambda p: loss_rec(x, p, "l2")), xh


def _msssim_case(g):
    # correlated pair keeps every contrast-structure term well above its clamp
    x = _rand(g, 1, 3, 44, 44, lo=0, hi=1)
    xh = torch.clamp(x + _rand(g, 1, 3, 44, 44, lo=-0.2, hi=0.2), 0, 1)
    return (lambda p: loss_rec(x, p, "ms-ssim")), xh


def _rate_gaussian_case(g):
    y = _rand(g, 1, 2, 3, 3, lo=-4, hi=4)
    s = _rand(g, 1, 2, 3, 3, lo=0.3, hi=3)
    point, unpack = _packed(y, s)
    return (lambda p: loss_rate(likelihood_gaussian(*unpack(p)))), point


class _Bound(nn.Module):
    """Wraps ``fn(module, *args)`` so ``functional_call`` can substitute parameters."""

    def __init__(self, module: nn.Module, fn):
        super().__init__()
        self.m = module
        self.fn = fn

    def forward(self, *args):
        return self.fn(self.m, *args)


def _rate_factorized_case(g):
    seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=g))
    prior = FactorizedPrior(2, seed=seed).to(DTYPE)
    with torch.no_grad():
        for p in prior.parameters():
            p.add_(_rand(g, *p.shape, lo=-0.3, hi=0.3))
    z = _rand(g, 1, 2, 3, 3, lo=-3, hi=3)
    names = [k for k, _ in prior.named_parameters()]
    point, unpack = _packed(z, *[p.detach() for _, p in prior.named_parameters()])
    call = _Bound(prior, lambda m, z_: loss_rate(torch.ones_like(z_), likelihood_factorized(z_, m)))

    def f(p):
        z_, *ps = unpack(p)
        return functional_call(call, {f"m.{k}": v for k, v in zip(names, ps)}, (z_,))

    return f, point


def _id_case(g):
    seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=g))
    emb = make_embedder("seeded-random", seed=seed, dim=8, widths=(4, 6), aligner=AlignerConfig(0.7, 8))
    x = _rand(g, 2, 3, 12, 12, lo=0, hi=1)
    xh = _rand(g, 2, 3, 12, 12, lo=0, hi=1)
    with torch.no_grad():
        e = emb(x)
    return (lambda p: loss_id(e, emb(p))), xh


TINY = Architecture(n_filters=4, latent_channels=4, hyper_channels=2, kernel_size=3)


def _ipr_case(decoder_mode: str, groups: tuple[str, ...]):
    """Full L_IPR w.r.t. sampled parameters of a tiny untrained model.

    The noise draw is fixed per instance so the objective is a deterministic
    function of the parameters. With straight-through rounding only
    parameters downstream of the rounding have a true derivative, so the
    ``round`` variant samples those and the ``noise`` variant covers the rest.
    """
    def build(g):
        seed = int(torch.randint(0, 2 ** 31 - 1, (1,), generator=g))
        model = CompressionModel(TINY, seed=seed).to(DTYPE)
        with torch.no_grad():
            # zero biases put every activation of an all-zero latent on the leaky-ReLU kink
            for name, prm in model.named_parameters():
                if "_b." in name:
                    prm.add_(_rand(g, *prm.shape, lo=-0.1, hi=0.1))
        emb = make_embedder("seeded-random", seed=seed, dim=8, widths=(4, 6), aligner=AlignerConfig(0.7, 8))
        x = _rand(g, 1, 3, 16, 16, lo=0, hi=1)
        weights = LossWeights(lambda_rate=0.01, lambda_id=1.0, kind="l2")
        names = [k for k in model.named_tensors() if k.startswith(groups)]
        point, unpack = _packed(*[model.named_tensors()[k].detach() for k in names])
        noise_seed = seed + 1
        with torch.no_grad():
            e = emb(x)

        def objective(m):
            gen = torch.Generator().manual_seed(noise_seed)
            out = m.forward_train(x, gen, decoder_mode=decoder_mode)
            rec = loss_rec(x, out.x_hat, "l2")
            return loss_total(rec, loss_rate(out.p_y, out.p_z), loss_id(e, emb(out.x_hat)), weights).total

        call = _Bound(model, objective)
        return (lambda p: functional_call(call, {f"m.{k}": v for k, v in zip(names, unpack(p))}, ())), point

        return f, point
    return build


CASES: dict[str, tuple[Builder, int | None]] = {
    # primitives
    "conv2d": (_conv_case, None),
    "conv_transpose2d": (_deconv_case, None),
    "leaky_relu": (_elementwise(T.leaky_relu, lambda g: _away_from_zero(g, 2, 3, 4)), None),
    "sigmoid": (_elementwise(T.sigmoid, lambda g: _rand(g, 2, 3, 4, lo=-4, hi=4)), None),
    "softplus": (_elementwise(T.softplus, lambda g: _rand(g, 2, 3, 4, lo=-4, hi=4)), None),
    "tanh": (_elementwise(T.tanh, lambda g: _rand(g, 2, 3, 4, lo=-2, hi=2)), None),
    "abs": (_elementwise(T.absolute, lambda g: _away_from_zero(g, 2, 3, 4)), None),
    "add": (_binary(T.add, lambda g: _rand(g, 3, 4), lambda g: _rand(g, 3, 4)), None),
    "subtract": (_binary(T.subtract, lambda g: _rand(g, 3, 4), lambda g: _rand(g, 3, 4)), None),
    "multiply": (_binary(T.multiply, lambda g: _rand(g, 3, 4), lambda g: _rand(g, 3, 4)), None),
    "divide": (_binary(T.divide, lambda g: _rand(g, 3, 4), lambda g: _rand(g, 3, 4, lo=0.5, hi=2)), None),
    "scale": (_elementwise(lambda p: T.scale(p, -1.7), lambda g: _rand(g, 3, 4)), None),
    "log": (_elementwise(T.log, lambda g: _rand(g, 3, 4, lo=0.2, hi=3)), None),
    "exp": (_elementwise(T.exp, lambda g: _rand(g, 3, 4, lo=-2, hi=2)), None),
    "sqrt": (_elementwise(T.sqrt, lambda g: _rand(g, 3, 4, lo=0.2, hi=3)), None),
    "normal_cdf": (_elementwise(T.normal_cdf, lambda g: _rand(g, 3, 4, lo=-3, hi=3)), None),
    "sum": (_reduction(T.sum_all), None),
    "mean": (_reduction(T.mean_all), None),
    "matmul": (_matmul_case, None),
    "resize_bilinear": (_resize_case, None),
    "crop": (_crop_case, None),
    "l2_norm": (_rows_reduction(T.l2_norm), None),
    "dot": (_dot_case, None),
    # losses
    "loss_l2": (_l2_case, None),
    "loss_ms_ssim": (_msssim_case, MAX_PROBES),
    "loss_rate_gaussian": (_rate_gaussian_case, None),
    "loss_rate_factorized": (_rate_factorized_case, None),
    "loss_id": (_id_case, MAX_PROBES),
    "loss_ipr_decoder_side": (_ipr_case("round", ("net.dec_", "net.hdec_", "prior.")), 10),
    "loss_ipr_encoder_side": (_ipr_case("noise", ("net.enc_", "net.henc_")), 10),
}


def check_case(builder: Builder, instances: int = 10, seed: int = 0, probes: int | None = None,
               step: float = STEP) -> float:
    """Worst relative error of autograd against central differences over ``instances`` draws."""
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(instances):
        f, point = builder(g)
        point = point.detach().clone().to(DTYPE)
        p = point.clone().requires_grad_(True)
        (analytic,) = torch.autograd.grad(f(p), p)
        idx = None
        if probes is not None and probes < point.numel():
            idx = torch.randperm(point.numel(), generator=g)[:probes].tolist()
        finite = T.finite_diff_grad(f, point, step=step, indices=idx)
        if idx is not None:
            analytic, finite = analytic.reshape(-1)[idx], finite.reshape(-1)[idx]
        worst = max(worst, T.relative_error(analytic, finite))
    return worst


def run_gradcheck(instances: int = 10, seed: int = 0, names=None, tolerance: float = TOLERANCE) -> list[CaseResult]:
    results = []
    prev = torch.get_default_dtype()
    try:
        torch.set_default_dtype(DTYPE)
        for i, (name, (builder, probes)) in enumerate(CASES.items()):
            if names is not None and name not in names:
                continue
            t0 = time.perf_counter()
            err = check_case(builder, instances, seed + 1000 * i, probes)
            results.append(CaseResult(name, instances, err, time.perf_counter() - t0, tolerance))
    finally:
        torch.set_default_dtype(prev)
    return results


def format_table(results: list[CaseResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'case':<{width}}  instances  max_rel_error  seconds  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.instances:>9}  {r.max_rel_error:>13.3e}  {r.seconds:>7.2f}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
