"""Image <-> container path through the real entropy coder.

Symbols are traversed channel-major, then row-major. The hyper-latent is
coded first because its decoded value fixes the scales of the latent tables.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import tensor as T
from .codec import side_chain
from .entropy import build_pmf_tables, clamp_to_support, likelihood_factorized, likelihood_gaussian, snap_scale_index
from .model import CompressionModel
from .rangecoder import ContainerMeta, ec_decode, ec_encode, pack_container, unpack_container

PAD_MULTIPLE = 8
MIN_SIDE = 16


@dataclass
class CompressInfo:
    container_bytes: int
    payload_bytes: int
    estimated_bits: float
    out_of_range: int
    n_symbols: int


def pad_edge(img: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    _, h, w = img.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")


class ImageCodec:
    """Frozen snapshot of a model with its coder tables."""

    def __init__(self, model: CompressionModel):
        self.model = model.eval()
        self.tables = build_pmf_tables(model.prior)
        self.checkpoint_hash = model.content_hash()
        self.arch_hash = model.arch.digest()
        self._zlo = np.array([t.lower for t in self.tables.factorized])
        self._zhi = np.array([t.upper for t in self.tables.factorized])
        self._ylo = np.array([t.lower for t in self.tables.gaussian])
        self._yhi = np.array([t.upper for t in self.tables.gaussian])

    def _z_tables(self, shape):
        c, h, w = shape
        return [self.tables.factorized[ch] for ch in range(c) for _ in range(h * w)]

    def compress(self, img: np.ndarray, return_info: bool = False):
        img = np.asarray(img, dtype=np.float32)
        if img.ndim != 3 or img.shape[0] != 3:
            raise T.ShapeError(f"compress: expected 3 x H x W, got {img.shape}")
        _, h, w = img.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"images must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        x = torch.from_numpy(pad_edge(img))[None]
        with torch.no_grad():
            net = self.model.net
            y = net.encode(x)
            z = net.hyper_encode(y)
            z_sym, z_oor = clamp_to_support(
                T.round_half_away(z).numpy().astype(np.int64),
                self._zlo[None, :, None, None], self._zhi[None, :, None, None],
            )
            z_hat = torch.from_numpy(z_sym.astype(np.float32))
            sigma = net.hyper_decode(z_hat, tuple(y.shape[-2:]))
            idx = snap_scale_index(sigma.numpy())
            y_sym, y_oor = clamp_to_support(T.round_half_away(y).numpy().astype(np.int64), self._ylo[idx], self._yhi[idx])
            b_z = ec_encode(z_sym.ravel().tolist(), self._z_tables(z.shape[1:]))
            b_y = ec_encode(y_sym.ravel().tolist(), [self.tables.gaussian[i] for i in idx.ravel()])
            data = pack_container(ContainerMeta(w, h, self.arch_hash, self.checkpoint_hash), b_z, b_y)
            if not return_info:
                return data
            y_hat = torch.from_numpy(y_sym.astype(np.float32))
            bits = -(torch.log2(likelihood_gaussian(y_hat, sigma)).sum()
                     + torch.log2(likelihood_factorized(z_hat, self.model.prior)).sum())
        info = CompressInfo(len(data), len(b_z) + len(b_y), float(bits), z_oor + y_oor, z_sym.size + y_sym.size)
        return data, info

    def decompress(self, data: bytes) -> np.ndarray:
        meta, b_z, b_y = unpack_container(data, self.arch_hash, self.checkpoint_hash)
        arch = self.model.arch
        hp, wp = meta.height + (-meta.height) % PAD_MULTIPLE, meta.width + (-meta.width) % PAD_MULTIPLE
        hy, wy = hp // 8, wp // 8
        hz, wz = side_chain(hy, 2)[2], side_chain(wy, 2)[2]
        z_shape = (arch.hyper_channels, hz, wz)
        z_sym = ec_decode(b_z, self._z_tables(z_shape), math.prod(z_shape))
        with torch.no_grad():
            z_hat = torch.tensor(z_sym, dtype=torch.float32).view(1, *z_shape)
            sigma = self.model.net.hyper_decode(z_hat, (hy, wy))
            idx = snap_scale_index(sigma.numpy())
            y_sym = ec_decode(b_y, [self.tables.gaussian[i] for i in idx.ravel()], idx.size)
            y_hat = torch.tensor(y_sym, dtype=torch.float32).view(1, arch.latent_channels, hy, wy)
            x_hat = self.model.net.decode(y_hat)[0].numpy()
        return x_hat[:, :meta.height, :meta.width]

    def roundtrip(self, img: np.ndarray) -> tuple[np.ndarray, CompressInfo]:
        data, info = self.compress(img, return_info=True)
        return self.decompress(data), info
