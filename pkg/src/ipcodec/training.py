"""Optimization of the codec under the REC / IPR / IP objectives."""
from __future__ import annotations

import copy
import csv
import io
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import tensor as T
from .codec import Architecture
from .embedder import ToyEmbedder
from .losses import LossBreakdown, LossWeights, loss_id, loss_rate, loss_rec, loss_total
from .model import CompressionModel

CHECKPOINT_MAGIC = b"IPCK"
CHECKPOINT_VERSION = 1
LOG_HEADER = ["step", "L_rec", "L_rate_bits", "L_id", "total"]


class WarmStartRequired(ValueError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: "Checkpoint", step: int):
        super().__init__(msg)
        self.last_good = last_good
        self.step = step


@dataclass
class TrainConfig:
    lambda_rate: float = 1e-6
    lambda_id: float = 0.0
    recon: str = "l2"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 3000
    seed: int = 0
    arch: Architecture = field(default_factory=Architecture)
    manifest: str | None = None
    warm_start: str | None = None
    embedder: str | None = None
    allow_cold_start: bool = False

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_rate, self.lambda_id, self.recon)

    def echo(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "arch":
                for k, av in v.__dict__.items():
                    out[f"arch.{k}"] = str(av)
            else:
                out[f.name] = "" if v is None else str(v)
        return out


# --------------------------------------------------------------------------- #
# Adam
# --------------------------------------------------------------------------- #

@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update; ``None`` gradients count as zero."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise T.ShapeError(f"adam_step: gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state


# --------------------------------------------------------------------------- #
# checkpoints
# --------------------------------------------------------------------------- #

@dataclass
class Checkpoint:
    model: CompressionModel
    adam: AdamState
    step: int = 0
    config: dict[str, str] = field(default_factory=dict)

    @property
    def content_hash(self) -> bytes:
        return self.model.content_hash()

    def copy(self) -> "Checkpoint":
        return copy.deepcopy(self)


def _write_named(buf, tensors: dict[str, torch.Tensor]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        T.write_tensor(buf, tensors[name])


def _read_named(fh) -> dict[str, torch.Tensor]:
    (n,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", fh.read(2))
        name = fh.read(ln).decode("utf-8")
        out[name] = T.read_tensor(fh)
    return out


def _write_text(buf, text: str) -> None:
    b = text.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _read_text(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    _write_text(buf, ckpt.model.arch.to_text())
    _write_named(buf, ckpt.model.named_tensors())
    opt = {f"m/{k}": v for k, v in ckpt.adam.m.items()}
    opt.update({f"v/{k}": v for k, v in ckpt.adam.v.items()})
    _write_named(buf, opt)
    buf.write(struct.pack("<QQ", ckpt.adam.t, ckpt.step))
    _write_text(buf, "".join(f"{k}={v}\n" for k, v in sorted(ckpt.config.items())))
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arch = Architecture.from_text(_read_text(fh))
        params = _read_named(fh)
        opt = _read_named(fh)
        t, step = struct.unpack("<QQ", fh.read(16))
        config = dict(line.split("=", 1) for line in _read_text(fh).splitlines() if line)
    model = CompressionModel(arch)
    own = model.named_tensors()
    if set(own) != set(params):
        raise ValueError(f"{path}: parameter set does not match the architecture")
    with torch.no_grad():
        for k, p in own.items():
            p.copy_(params[k])
    adam = AdamState({k[2:]: v for k, v in opt.items() if k.startswith("m/")},
                     {k[2:]: v for k, v in opt.items() if k.startswith("v/")}, t)
    return Checkpoint(model, adam, step, config)


def init_checkpoint(arch: Architecture, seed: int) -> Checkpoint:
    model = CompressionModel(arch, seed=seed)
    return Checkpoint(model, AdamState.zeros_like(model.named_tensors()), 0, {})


def warm_start(rec: Checkpoint, config: TrainConfig) -> Checkpoint:
    """Copy codec and prior parameters exactly; reset optimizer moments and step."""
    if rec.model.arch != config.arch:
        raise ArchitectureMismatchError(f"warm-start architecture {rec.model.arch} != configured {config.arch}")
    model = copy.deepcopy(rec.model)
    return Checkpoint(model, AdamState.zeros_like(model.named_tensors()), 0, {})


# --------------------------------------------------------------------------- #
# training loop
# --------------------------------------------------------------------------- #

def _batches(rng: np.random.Generator, n: int, batch: int):
    order = np.empty(0, dtype=np.int64)
    while True:
        while len(order) < batch:
            order = np.concatenate([order, rng.permutation(n)])
        yield order[:batch]
        order = order[batch:]


def compute_losses(model: CompressionModel, x: torch.Tensor, weights: LossWeights,
                   embedder: ToyEmbedder | None, generator: torch.Generator | None,
                   decoder_mode: str = "round") -> LossBreakdown:
    out = model.forward_train(x, generator, decoder_mode=decoder_mode)
    rec = loss_rec(x, out.x_hat, weights.kind) if weights.kind != "none" else None
    rate = loss_rate(out.p_y, out.p_z)
    id_ = None
    if weights.lambda_id != 0:
        with torch.no_grad():
            e = embedder(x)
        id_ = loss_id(e, embedder(out.x_hat))
    return loss_total(rec, rate, id_, weights)


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1, np.uint64)[0] >> 1)


def train(config: TrainConfig, images: np.ndarray, embedder: ToyEmbedder | None = None,
          init: Checkpoint | None = None, log_path=None,
          callback: Callable[[int, LossBreakdown], None] | None = None) -> tuple[Checkpoint, list[list]]:
    """Run ``config.steps`` Adam steps on ``images`` (N x 3 x H x W in [0, 1]).

    ``init`` is a warm-start state (see :func:`warm_start`); without one the
    model is freshly initialized from ``config.seed``. A checkpoint with a
    nonzero step resumes: batch order and quantization noise depend only on
    ``(seed, step)``, so a resumed run matches an uninterrupted one bitwise
    at a fixed thread count.
    """
    weights = config.weights
    if len(images) == 0:
        raise ValueError("training set is empty")
    if weights.lambda_id > 0:
        if embedder is None:
            raise ValueError("lambda_id > 0 requires a frozen embedder")
        if init is None and not config.allow_cold_start:
            raise WarmStartRequired(
                "identity-preserving regimes start from a reconstruction-only checkpoint; "
                "set warm_start or allow_cold_start"
            )
    ckpt = init.copy() if init is not None else init_checkpoint(config.arch, config.seed)
    ckpt.config = config.echo()
    model = ckpt.model.train()
    params = model.named_tensors()
    if embedder is not None:
        emb_ids = {id(t) for t in embedder.tensors().values()}
        assert not emb_ids & {id(p) for p in params.values()}

    data = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator()
    batches = _batches(rng, len(data), min(config.batch_size, len(data)))
    for _ in range(ckpt.step):  # resuming: skip batches already consumed
        next(batches)
    log: list[list] = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    try:
        for _ in range(config.steps):
            x = data[torch.from_numpy(next(batches))]
            gen.manual_seed(_step_seed(config.seed, ckpt.step))
            bd = compute_losses(model, x, weights, embedder, gen)
            if not math.isfinite(float(bd.total.detach())):
                raise TrainingDiverged(f"non-finite loss at step {ckpt.step}: {bd.row(ckpt.step)}",
                                       ckpt.copy(), ckpt.step)
            model.zero_grad(set_to_none=True)
            bd.total.backward()
            grads = {k: p.grad for k, p in params.items()}
            if any(g is not None and not torch.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"non-finite gradient at step {ckpt.step}", ckpt.copy(), ckpt.step)
            adam_step(params, grads, ckpt.adam, config.lr, config.beta1, config.beta2, config.eps)
            ckpt.step += 1
            row = bd.row(ckpt.step)
            log.append(row)
            if writer is not None:
                writer.writerow(row)
            if callback is not None:
                callback(ckpt.step, bd)
    finally:
        if fh is not None:
            fh.close()
    model.zero_grad(set_to_none=True)
    model.eval()
    return ckpt, log
