"""Frozen downstream stack: a deterministic center-crop aligner and a small
convolutional identity embedder.

The embedder never exposes ``nn.Parameter`` objects -- its weights are plain
tensors with ``requires_grad=False`` -- so it cannot end up in an optimizer
and gradients flow only through it to its input.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import tensor as T

EMBEDDER_MAGIC = b"IPEM"
EMBEDDER_VERSION = 1
POOL = 4


class IdentityOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class AlignerConfig:
    crop_fraction: float = 0.7
    side: int = 32

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise ValueError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if self.side < 4:
            raise ValueError(f"aligner side must be >= 4, got {self.side}")

    def window(self, height: int, width: int) -> tuple[int, int, int]:
        """(top, left, size) of the centred square crop."""
        size = max(1, int(math.floor(self.crop_fraction * min(height, width) + 0.5)))
        return (height - size) // 2, (width - size) // 2, size


def align(x: torch.Tensor, config: AlignerConfig = AlignerConfig()) -> torch.Tensor:
    top, left, size = config.window(x.shape[2], x.shape[3])
    patch = T.crop(x, top, left, size, size)
    return T.resize_bilinear(patch, (config.side, config.side))


class ToyEmbedder:
    """conv(3->w1, s2) -> conv(w1->w2, s2) -> 4x4 mean pool -> linear(16*w2 -> dim)."""

    def __init__(self, weights: dict[str, torch.Tensor], aligner: AlignerConfig = AlignerConfig(),
                 provenance: str = "seeded-random", seed: int = 0):
        self._weights = {k: v.detach().clone().float().requires_grad_(False) for k, v in weights.items()}
        self.aligner = aligner
        self.provenance = provenance
        self.seed = seed

    @property
    def dim(self) -> int:
        return self._weights["fc_w"].shape[1]

    @property
    def frozen(self) -> bool:
        return True

    def tensors(self) -> dict[str, torch.Tensor]:
        return dict(self._weights)

    def embed(self, aligned: torch.Tensor) -> torch.Tensor:
        if aligned.dim() != 4 or aligned.shape[1] != 3 or aligned.shape[2:] != (self.aligner.side, self.aligner.side):
            raise T.ShapeError(
                f"embed: expected N x 3 x {self.aligner.side} x {self.aligner.side}, got {tuple(aligned.shape)}"
            )
        return _trunk(self._weights, aligned)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """Embedding of full images: ``R(A(x))``."""
        return self.embed(align(x, self.aligner))

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for k in sorted(self._weights):
            h.update(k.encode())
            h.update(T.tensor_bytes(self._weights[k]))
        return h.digest()[:8]


def _trunk(w: dict[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    dt = x.dtype
    h = T.leaky_relu(T.conv2d(x, w["conv1_w"].to(dt), w["conv1_b"].to(dt), stride=2, padding=2))
    h = T.leaky_relu(T.conv2d(h, w["conv2_w"].to(dt), w["conv2_b"].to(dt), stride=2, padding=2))
    h = F.adaptive_avg_pool2d(h, POOL).flatten(1)  # keeps coarse layout; a global mean loses face geometry
    return T.matmul(h, w["fc_w"].to(dt)) + w["fc_b"].to(dt)


def _random_weights(seed: int, dim: int, widths: tuple[int, int]) -> dict[str, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    w1, w2 = widths

    def u(shape, fan_in):
        return (torch.rand(shape, generator=g) * 2 - 1) * math.sqrt(6.0 / fan_in)

    return {
        "conv1_w": u((w1, 3, 5, 5), 3 * 25),
        "conv1_b": torch.zeros(w1),
        "conv2_w": u((w2, w1, 5, 5), w1 * 25),
        "conv2_b": torch.zeros(w2),
        "fc_w": u((w2 * POOL * POOL, dim), w2 * POOL * POOL),
        "fc_b": torch.zeros(dim),
    }


def make_embedder(mode: str = "seeded-random", seed: int = 0, images: np.ndarray | None = None,
                  labels=None, *, aligner: AlignerConfig = AlignerConfig(), dim: int = 64,
                  widths: tuple[int, int] = (32, 64), epochs: int = 40, lr: float = 3e-3,
                  holdout: float = 0.2, exclude_identities=(), return_accuracy: bool = False):
    """Build a frozen embedder.

    ``pretrained`` trains the trunk plus a cosine-softmax classifier head on
    the given toy identities, then discards the head. Identities in
    ``exclude_identities`` (the codec's train/test identities) must not occur
    in ``labels``.
    """
    weights = _random_weights(seed, dim, widths)
    accuracy = None
    if mode == "seeded-random":
        pass
    elif mode == "pretrained":
        if images is None or labels is None:
            raise ValueError("pretrained mode needs toy-identity images and labels")
        overlap = set(map(str, labels)) & set(map(str, exclude_identities))
        if overlap:
            raise IdentityOverlapError(f"embedder identities overlap codec identities: {sorted(overlap)[:5]}")
        weights, accuracy = _pretrain(weights, np.asarray(images, dtype=np.float32), list(labels), aligner,
                                      seed, epochs, lr, holdout)
    else:
        raise ValueError(f"unknown embedder mode {mode!r}")
    emb = ToyEmbedder(weights, aligner, mode, seed)
    return (emb, accuracy) if return_accuracy else emb


def _pretrain(weights, images, labels, aligner, seed, epochs, lr, holdout):
    classes = sorted(set(map(str, labels)))
    y_all = np.array([classes.index(str(l)) for l in labels])
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(len(classes)):
        idx = rng.permutation(np.flatnonzero(y_all == c))
        n_test = int(round(len(idx) * holdout))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx, test_idx = np.array(sorted(train_idx)), np.array(sorted(test_idx))

    params = {k: nn.Parameter(v.clone()) for k, v in weights.items()}
    g = torch.Generator().manual_seed(seed + 1)
    dim = weights["fc_w"].shape[1]
    head = nn.Parameter(torch.randn(dim, len(classes), generator=g) / math.sqrt(dim))
    opt = torch.optim.Adam(list(params.values()) + [head], lr=lr)
    batch = 64
    steps_per_epoch = -(-len(train_idx) // batch)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs * steps_per_epoch)
    x_all = align(torch.from_numpy(images), aligner)
    y_t = torch.from_numpy(y_all)

    def logits(x):
        e = F.normalize(_trunk(params, x), dim=1)
        return 16.0 * e @ F.normalize(head, dim=0)

    for _ in range(epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), batch):
            idx = torch.from_numpy(order[start:start + batch])
            loss = F.cross_entropy(logits(x_all[idx]), y_t[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    with torch.no_grad():
        eval_idx = torch.from_numpy(test_idx if len(test_idx) else train_idx)
        pred = logits(x_all[eval_idx]).argmax(dim=1)
        accuracy = float((pred == y_t[eval_idx]).float().mean())
    return {k: v.detach() for k, v in params.items()}, accuracy


# --------------------------------------------------------------------------- #
# file format: magic, version, key=value header, named tensor blobs
# --------------------------------------------------------------------------- #

def save_embedder(emb: ToyEmbedder, path) -> None:
    meta = (f"provenance={emb.provenance}\nseed={emb.seed}\n"
            f"crop_fraction={emb.aligner.crop_fraction!r}\nside={emb.aligner.side}\n").encode("utf-8")
    buf = io.BytesIO()
    buf.write(EMBEDDER_MAGIC)
    buf.write(struct.pack("<BI", EMBEDDER_VERSION, len(meta)))
    buf.write(meta)
    names = sorted(emb.tensors())
    buf.write(struct.pack("<I", len(names)))
    for k in names:
        kb = k.encode("utf-8")
        buf.write(struct.pack("<H", len(kb)))
        buf.write(kb)
        T.write_tensor(buf, emb.tensors()[k])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_embedder(path) -> ToyEmbedder:
    with open(path, "rb") as fh:
        if fh.read(4) != EMBEDDER_MAGIC:
            raise ValueError(f"{path}: not an embedder file")
        version, n = struct.unpack("<BI", fh.read(5))
        if version != EMBEDDER_VERSION:
            raise ValueError(f"{path}: unsupported embedder version {version}")
        meta = dict(line.split("=", 1) for line in fh.read(n).decode("utf-8").splitlines() if line)
        (count,) = struct.unpack("<I", fh.read(4))
        weights = {}
        for _ in range(count):
            (kl,) = struct.unpack("<H", fh.read(2))
            k = fh.read(kl).decode("utf-8")
            weights[k] = T.read_tensor(fh)
    aligner = AlignerConfig(float(meta["crop_fraction"]), int(meta["side"]))
    return ToyEmbedder(weights, aligner, meta["provenance"], int(meta["seed"]))
