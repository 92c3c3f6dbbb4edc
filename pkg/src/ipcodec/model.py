"""Codec networks plus factorized prior, and the training-time forward graph."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
from torch import nn

from . import tensor as T
from .codec import Architecture, CodecNet, QuantizeMode, quantize
from .entropy import FactorizedPrior, likelihood_factorized, likelihood_gaussian


@dataclass
class ForwardResult:
    y: torch.Tensor
    z: torch.Tensor
    y_noisy: torch.Tensor
    z_noisy: torch.Tensor
    y_hat: torch.Tensor
    z_hat: torch.Tensor
    sigma: torch.Tensor
    p_y: torch.Tensor
    p_z: torch.Tensor
    x_hat: torch.Tensor


class CompressionModel(nn.Module):
    def __init__(self, arch: Architecture = Architecture(), seed: int = 0):
        super().__init__()
        self.arch = arch
        self.net = CodecNet(arch, seed=seed)
        self.prior = FactorizedPrior(arch.hyper_channels, seed=seed + 1)

    def forward_train(self, x: torch.Tensor, generator: torch.Generator | None = None,
                      decoder_mode: str = QuantizeMode.ROUND) -> ForwardResult:
        """Likelihoods see noise-quantized (hyper-)latents; the (hyper-)decoders
        see straight-through rounded ones.

        ``decoder_mode="noise"`` feeds the decoders the same noisy values instead
        (used only by gradient checks, where rounding has no true derivative).
        """
        y = self.net.encode(x)
        z = self.net.hyper_encode(y)
        z_noisy = quantize(z, QuantizeMode.NOISE, generator)
        y_noisy = quantize(y, QuantizeMode.NOISE, generator)
        if decoder_mode == QuantizeMode.ROUND:
            z_hat, y_hat = quantize(z, QuantizeMode.ROUND), quantize(y, QuantizeMode.ROUND)
        else:
            z_hat, y_hat = z_noisy, y_noisy
        sigma = self.net.hyper_decode(z_hat, tuple(y.shape[-2:]))
        p_y = likelihood_gaussian(y_noisy, sigma)
        p_z = likelihood_factorized(z_noisy, self.prior)
        x_hat = self.net.decode(y_hat)
        return ForwardResult(y, z, y_noisy, z_noisy, y_hat, z_hat, sigma, p_y, p_z, x_hat)

    def forward_eval(self, x: torch.Tensor) -> ForwardResult:
        """Deterministic pass with rounded latents everywhere (the coded path, minus clamping)."""
        y = self.net.encode(x)
        z = self.net.hyper_encode(y)
        z_hat, y_hat = T.round_half_away(z), T.round_half_away(y)
        sigma = self.net.hyper_decode(z_hat, tuple(y.shape[-2:]))
        return ForwardResult(
            y, z, y_hat, z_hat, y_hat, z_hat, sigma,
            likelihood_gaussian(y_hat, sigma), likelihood_factorized(z_hat, self.prior), self.net.decode(y_hat),
        )

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.named_parameters()}

    def content_hash(self) -> bytes:
        """8-byte digest over every parameter's name and float32 bytes."""
        h = hashlib.sha256()
        for name, t in sorted(self.named_tensors().items()):
            h.update(name.encode("utf-8"))
            h.update(T.tensor_bytes(t))
        return h.digest()[:8]
