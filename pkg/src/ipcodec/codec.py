"""Analysis/synthesis transforms, the hyper pair, and the two quantizers."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import tensor as T

SIGMA_MIN = 0.11


@dataclass(frozen=True)
class Architecture:
    n_filters: int = 64
    latent_channels: int = 32
    hyper_channels: int = 16
    kernel_size: int = 5
    slope: float = 0.2

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "Architecture":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(
            n_filters=int(kv["n_filters"]),
            latent_channels=int(kv["latent_channels"]),
            hyper_channels=int(kv["hyper_channels"]),
            kernel_size=int(kv["kernel_size"]),
            slope=float(kv["slope"]),
        )

    def digest(self) -> bytes:
        """8-byte fingerprint echoed in every bitstream header."""
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()[:8]


class QuantizeMode:
    NOISE = "noise"
    ROUND = "round"


def quantize(v: torch.Tensor, mode: str, generator: torch.Generator | None = None) -> torch.Tensor:
    """Quantize ``v``.

    ``noise``: add U(-0.5, 0.5) drawn from ``generator``; gradient is identity.
    ``round``: round half away from zero forward, straight-through backward.
    """
    if mode == QuantizeMode.NOISE:
        u = torch.rand(v.shape, generator=generator, dtype=v.dtype) - 0.5
        return v + u
    if mode == QuantizeMode.ROUND:
        return v + (T.round_half_away(v) - v).detach()
    raise ValueError(f"unknown quantize mode {mode!r}")


def _conv_param(shape, generator, gain=math.sqrt(2.0)):
    fan_in = shape[1] * shape[2] * shape[3]
    bound = gain * math.sqrt(3.0 / fan_in)
    return nn.Parameter((torch.rand(shape, generator=generator) * 2 - 1) * bound)


def _deconv_param(shape, generator, gain=math.sqrt(2.0)):
    # IOHW; each output pixel of a stride-2 deconv sees ~in*k*k/4 taps
    fan_in = max(1, shape[0] * shape[2] * shape[3] // 4)
    bound = gain * math.sqrt(3.0 / fan_in)
    return nn.Parameter((torch.rand(shape, generator=generator) * 2 - 1) * bound)


def side_chain(n: int, depth: int) -> list[int]:
    sides = [n]
    for _ in range(depth):
        sides.append((sides[-1] + 1) // 2)
    return sides


class CodecNet(nn.Module):
    """Encoder (3 strided convs), mirrored decoder, and the hyper encoder/decoder pair."""

    def __init__(self, arch: Architecture = Architecture(), seed: int = 0):
        super().__init__()
        self.arch = arch
        g = torch.Generator().manual_seed(seed)
        F_, Cy, Cz, k = arch.n_filters, arch.latent_channels, arch.hyper_channels, arch.kernel_size

        self.enc_w = nn.ParameterList([
            _conv_param((F_, 3, k, k), g), _conv_param((F_, F_, k, k), g), _conv_param((Cy, F_, k, k), g, gain=1.0),
        ])
        self.enc_b = nn.ParameterList([nn.Parameter(torch.zeros(c)) for c in (F_, F_, Cy)])
        self.dec_w = nn.ParameterList([
            _deconv_param((Cy, F_, k, k), g), _deconv_param((F_, F_, k, k), g), _deconv_param((F_, 3, k, k), g, gain=1.0),
        ])
        self.dec_b = nn.ParameterList([nn.Parameter(torch.zeros(c)) for c in (F_, F_, 3)])
        self.henc_w = nn.ParameterList([_conv_param((F_, Cy, k, k), g), _conv_param((Cz, F_, k, k), g, gain=1.0)])
        self.henc_b = nn.ParameterList([nn.Parameter(torch.zeros(c)) for c in (F_, Cz)])
        self.hdec_w = nn.ParameterList([_deconv_param((Cz, F_, k, k), g), _deconv_param((F_, Cy, k, k), g, gain=1.0)])
        self.hdec_b = nn.ParameterList([nn.Parameter(torch.zeros(F_)), nn.Parameter(torch.ones(Cy))])

    @property
    def _pad(self) -> int:
        return self.arch.kernel_size // 2

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise T.ShapeError(f"encode: expected N x 3 x H x W, got {tuple(x.shape)}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise T.ShapeError(
                f"encode: sides must be multiples of 8, got {x.shape[2]}x{x.shape[3]}; pad the image first"
            )
        h = x
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            h = T.conv2d(h, w, b, stride=2, padding=self._pad)
            if i < 2:
                h = T.leaky_relu(h, self.arch.slope)
        return h

    def decode(self, y_hat: torch.Tensor) -> torch.Tensor:
        if y_hat.dim() != 4 or y_hat.shape[1] != self.arch.latent_channels:
            raise T.ShapeError(
                f"decode: expected N x {self.arch.latent_channels} x h x w, got {tuple(y_hat.shape)}"
            )
        h = y_hat
        for i, (w, b) in enumerate(zip(self.dec_w, self.dec_b)):
            size = (h.shape[2] * 2, h.shape[3] * 2)
            h = T.conv_transpose2d(h, w, b, stride=2, padding=self._pad, output_size=size)
            if i < 2:
                h = T.leaky_relu(h, self.arch.slope)
        return T.sigmoid(h)

    def hyper_encode(self, y: torch.Tensor) -> torch.Tensor:
        h = T.absolute(y)
        h = T.leaky_relu(T.conv2d(h, self.henc_w[0], self.henc_b[0], stride=2, padding=self._pad), self.arch.slope)
        return T.conv2d(h, self.henc_w[1], self.henc_b[1], stride=2, padding=self._pad)

    def hyper_decode(self, z_hat: torch.Tensor, latent_hw: tuple[int, int]) -> torch.Tensor:
        """Per-element scale for the latent, floored smoothly at ``SIGMA_MIN``."""
        hs, ws = side_chain(latent_hw[0], 2), side_chain(latent_hw[1], 2)
        if tuple(z_hat.shape[-2:]) != (hs[2], ws[2]):
            raise T.ShapeError(f"hyper_decode: latent {latent_hw} implies hyper-latent {(hs[2], ws[2])}, "
                               f"got {tuple(z_hat.shape[-2:])}")
        h = T.conv_transpose2d(z_hat, self.hdec_w[0], self.hdec_b[0], stride=2, padding=self._pad,
                               output_size=(hs[1], ws[1]))
        h = T.leaky_relu(h, self.arch.slope)
        h = T.conv_transpose2d(h, self.hdec_w[1], self.hdec_b[1], stride=2, padding=self._pad,
                               output_size=(hs[0], ws[0]))
        # sqrt(s_min^2 + h^2): >= s_min everywhere, equal to it at h = 0, smooth
        return T.sqrt(T.add(T.multiply(h, h), torch.full_like(h, SIGMA_MIN ** 2)))

    def hyper_transform(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Hyper-latent ``z`` and the scale predicted from its rounded value."""
        z = self.hyper_encode(y)
        sigma = self.hyper_decode(quantize(z, QuantizeMode.ROUND), tuple(y.shape[-2:]))
        return z, sigma
