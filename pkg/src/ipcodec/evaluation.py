"""Rate, quality and recognition metrics, and the gallery/query FRR@FAR protocol."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .bitstream import ImageCodec
from .embedder import ToyEmbedder
from .imageio import load_split, to_uint8
from .losses import msssim

PSNR_CAP = 99.0


def bpp(coded_size_bytes: int, width: int, height: int) -> float:
    pixels = width * height
    if pixels <= 0:
        raise ValueError("image has no pixels")
    return 8.0 * coded_size_bytes / pixels


def _as_uint8(img) -> np.ndarray:
    a = np.asarray(img)
    return a if a.dtype == np.uint8 else to_uint8(a)


def psnr(x, x_hat) -> float:
    """PSNR in dB on 8-bit pixel values (floats in [0, 1] are quantized first)."""
    a, b = _as_uint8(x).astype(np.float64), _as_uint8(x_hat).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def msssim_metric(x, x_hat, scales: int = 3) -> float:
    """MS-SSIM of two 3 x H x W (or N x 3 x H x W) images in [0, 1]; mean over images."""
    a = torch.as_tensor(np.asarray(x, dtype=np.float64))
    b = torch.as_tensor(np.asarray(x_hat, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"msssim: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a[None], b[None]
    with torch.no_grad():
        return float(msssim(a, b, scales=scales).mean())


# --------------------------------------------------------------------------- #
# recognition protocol
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class QueryRecord:
    query: int
    identity: str
    same_distance: float
    notsame_distance: float


def split_gallery_query(paths: Sequence, identities: Sequence[str], n_gallery: int,
                        seed: int | None = None) -> tuple[list[int], list[int]]:
    """Indices of gallery and query images: per identity the first ``n_gallery``
    in sorted-path order (optionally seed-permuted) go to the gallery."""
    if n_gallery < 1:
        raise ValueError("n_gallery must be >= 1")
    if len(paths) == 0:
        raise ValueError("test split is empty")
    rng = np.random.default_rng(seed) if seed is not None else None
    by_id: dict[str, list[int]] = {}
    for i, ident in enumerate(identities):
        by_id.setdefault(ident, []).append(i)
    gallery, query = [], []
    for ident in sorted(by_id):
        idx = sorted(by_id[ident], key=lambda i: str(paths[i]))
        if rng is not None:
            idx = [idx[j] for j in rng.permutation(len(idx))]
        gallery.extend(idx[:n_gallery])
        query.extend(idx[n_gallery:])
    return sorted(gallery), sorted(query)


def cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return np.clip(1.0 - an @ bn.T, 0.0, 2.0)


def match_distances(query_emb, query_ids: Sequence[str], gallery_emb, gallery_ids: Sequence[str]) -> list[QueryRecord]:
    """Per query: minimum cosine distance to its own identity's gallery images
    and to all other identities' gallery images."""
    q_ids = np.asarray(query_ids, dtype=object)
    g_ids = np.asarray(gallery_ids, dtype=object)
    missing = set(q_ids) - set(g_ids)
    if missing:
        raise ValueError(f"query identities absent from gallery: {sorted(missing)[:5]}")
    if len(set(g_ids)) < 2:
        raise ValueError("gallery needs at least two identities for not-same distances")
    d = cosine_distances(query_emb, gallery_emb)
    same = q_ids[:, None] == g_ids[None, :]
    same_d = np.where(same, d, np.inf).min(axis=1)
    notsame_d = np.where(~same, d, np.inf).min(axis=1)
    return [QueryRecord(i, str(q_ids[i]), float(same_d[i]), float(notsame_d[i])) for i in range(len(q_ids))]


def frr_at_far(records: Sequence[QueryRecord], far_target: float) -> tuple[float, float]:
    """(FRR, threshold) at the largest candidate threshold whose FAR <= target.

    Candidates are the distinct observed distances plus -inf. FAR(t) counts
    not-same distances <= t, FRR(t) counts same distances > t.
    """
    if not records:
        raise ValueError("no query records")
    if not 0 < far_target < 1:
        raise ValueError("far_target must be in (0, 1)")
    same = np.sort(np.array([r.same_distance for r in records]))
    notsame = np.sort(np.array([r.notsame_distance for r in records]))
    n = len(records)
    candidates = np.unique(np.concatenate([same, notsame]))
    far = np.searchsorted(notsame, candidates, side="right") / n
    ok = np.flatnonzero(far <= far_target)
    if len(ok) == 0:
        return 1.0, -math.inf
    t = float(candidates[ok[-1]])
    frr = float(n - np.searchsorted(same, t, side="right")) / n
    return frr, t


# --------------------------------------------------------------------------- #
# full evaluation
# --------------------------------------------------------------------------- #

@dataclass
class EvalReport:
    bpp_mean: float
    psnr_db_mean: float
    msssim_mean: float
    frr_at_far: float
    far_target: float
    l_id_mean: float
    n_images: int
    n_identities: int
    n_queries: int
    threshold: float = 0.0
    frr_at_far_original: float = 0.0
    estimated_bits_mean: float = 0.0
    payload_bits_mean: float = 0.0
    rate_gap_rel_mean: float = 0.0
    out_of_range_rate: float = 0.0
    gallery_n: int = 1
    far_rule: str = "largest threshold with FAR <= target (no interpolation)"
    config: dict = field(default_factory=dict)
    per_image: list = field(default_factory=list, repr=False)

    FIELDS = ("bpp_mean", "psnr_db_mean", "msssim_mean", "frr_at_far", "far_target", "l_id_mean",
              "n_images", "n_identities", "n_queries")

    def to_dict(self, per_image: bool = False) -> dict:
        d = asdict(self)
        if not per_image:
            d.pop("per_image")
        return d

    def to_text(self) -> str:
        d = self.to_dict()
        cfg = d.pop("config")
        lines = [f"{k}={v}" for k, v in d.items()]
        lines += [f"config.{k}={v}" for k, v in sorted(cfg.items())]
        return "\n".join(lines) + "\n"

    def write(self, prefix) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".txt").write_text(self.to_text(), encoding="utf-8")
        prefix.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2, default=str), encoding="utf-8")
        if self.per_image:
            with open(prefix.with_suffix(".csv"), "w", encoding="utf-8") as fh:
                fh.write("index,identity,bpp,psnr_db,msssim,l_id\n")
                for row in self.per_image:
                    fh.write(",".join(str(v) for v in row) + "\n")


def _embed(embedder: ToyEmbedder, images: np.ndarray, batch: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            out.append(embedder(torch.from_numpy(np.ascontiguousarray(images[i:i + batch], dtype=np.float32))).numpy())
    return np.concatenate(out)


def _frr(emb, identities, paths, n_gallery, far_target, seed):
    g, q = split_gallery_query(paths, identities, n_gallery, seed)
    ids = np.asarray(identities, dtype=object)
    if not q:
        return float("nan"), float("nan"), 0
    recs = match_distances(emb[q], ids[q], emb[g], ids[g])
    frr, t = frr_at_far(recs, far_target)
    return frr, t, len(q)


def evaluate_images(codec: ImageCodec | None, embedder: ToyEmbedder, images: np.ndarray,
                    identities: Sequence[str], paths: Sequence | None = None, n_gallery: int = 1,
                    far_target: float = 0.01, seed: int | None = None) -> EvalReport:
    """Compress each image through real bitstreams (``codec=None`` bypasses the
    codec and scores the originals) and compute every metric."""
    images = np.asarray(images, dtype=np.float32)
    paths = list(paths) if paths is not None else [f"{i:06d}" for i in range(len(images))]
    n = len(images)
    recon = np.empty_like(images)
    rows, est, payload, gaps = [], [], [], []
    oor = n_sym = 0
    sizes = []
    for i, img in enumerate(images):
        if codec is None:
            recon[i] = to_uint8(img) / 255.0
            sizes.append(img.size)  # 8 bits per sample, uncompressed
            continue
        data, info = codec.compress(img, return_info=True)
        recon[i] = codec.decompress(data)
        sizes.append(len(data))
        est.append(info.estimated_bits)
        payload.append(info.payload_bytes * 8)
        gaps.append(abs(info.payload_bytes * 8 - info.estimated_bits) / max(info.estimated_bits, 1e-12))
        oor += info.out_of_range
        n_sym += info.n_symbols
    e_orig = _embed(embedder, images)
    e_rec = _embed(embedder, recon)
    cos = np.sum(e_orig * e_rec, axis=1) / (np.linalg.norm(e_orig, axis=1) * np.linalg.norm(e_rec, axis=1))
    l_id = 1.0 - cos
    q8 = [to_uint8(r) / 255.0 for r in recon]
    for i in range(n):
        h, w = images[i].shape[1:]
        rows.append([i, identities[i], bpp(sizes[i], w, h), psnr(images[i], recon[i]),
                     msssim_metric(to_uint8(images[i]) / 255.0, q8[i]), float(l_id[i])])
    frr, thr, n_q = _frr(e_rec, identities, paths, n_gallery, far_target, seed)
    frr0, _, _ = _frr(e_orig, identities, paths, n_gallery, far_target, seed)
    return EvalReport(
        bpp_mean=float(np.mean([r[2] for r in rows])),
        psnr_db_mean=float(np.mean([r[3] for r in rows])),
        msssim_mean=float(np.mean([r[4] for r in rows])),
        frr_at_far=frr,
        far_target=far_target,
        l_id_mean=float(np.mean(l_id)),
        n_images=n,
        n_identities=len(set(identities)),
        n_queries=n_q,
        threshold=thr,
        frr_at_far_original=frr0,
        estimated_bits_mean=float(np.mean(est)) if est else 0.0,
        payload_bits_mean=float(np.mean(payload)) if payload else 0.0,
        rate_gap_rel_mean=float(np.mean(gaps)) if gaps else 0.0,
        out_of_range_rate=oor / n_sym if n_sym else 0.0,
        gallery_n=n_gallery,
        per_image=rows,
    )


def evaluate_model(codec: ImageCodec | None, embedder: ToyEmbedder, manifest, n_gallery: int = 1,
                   far_target: float = 0.01, split: str = "test", seed: int | None = None) -> EvalReport:
    images, identities, paths = load_split(manifest, split)
    report = evaluate_images(codec, embedder, images, identities, paths, n_gallery, far_target, seed)
    report.config = {
        "manifest": str(manifest),
        "split": split,
        "checkpoint_hash": codec.checkpoint_hash.hex() if codec is not None else "bypass",
        "embedder_hash": embedder.digest().hex(),
        "embedder_provenance": embedder.provenance,
    }
    return report
