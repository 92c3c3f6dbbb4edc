"""Synthetic "toy faces": a fixed smooth pattern per identity on a textured background.

Identity lives in the central part of the frame (inside a 0.7 centre crop,
allowing for jitter); the background carries per-image texture that costs
bits but says nothing about identity.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class FaceSpec:
    skin: np.ndarray  # (3,)
    radii: tuple[float, float]
    blobs: tuple  # ((dy, dx, sigma, (3,) colour offset), ...)
    eye_dy: float
    eye_dx: float
    eye_r: float
    eye_color: np.ndarray
    mouth_dy: float
    mouth_w: float
    mouth_curve: float
    mouth_color: np.ndarray
    brow_tilt: float


def face_spec(rng: np.random.Generator, side: int) -> FaceSpec:
    s = side / 64.0
    blobs = tuple(
        (rng.uniform(-9, 9) * s, rng.uniform(-9, 9) * s, rng.uniform(2.0, 4.5) * s, rng.uniform(-0.35, 0.35, 3))
        for _ in range(3)
    )
    return FaceSpec(
        skin=rng.uniform(0.35, 0.75, 3),
        radii=(rng.uniform(13.0, 16.5) * s, rng.uniform(11.0, 15.0) * s),
        blobs=blobs,
        eye_dy=rng.uniform(-6.0, -2.0) * s,
        eye_dx=rng.uniform(3.5, 7.0) * s,
        eye_r=rng.uniform(1.4, 2.8) * s,
        eye_color=rng.uniform(0.0, 0.3, 3),
        mouth_dy=rng.uniform(4.0, 8.0) * s,
        mouth_w=rng.uniform(4.0, 8.0) * s,
        mouth_curve=rng.uniform(-3.0, 3.0) * s,
        mouth_color=rng.uniform(0.2, 0.9, 3) * np.array([1.0, 0.4, 0.4]),
        brow_tilt=rng.uniform(-0.4, 0.4),
    )


def _soft(d, width=0.8):
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def render(spec: FaceSpec, rng: np.random.Generator, side: int) -> np.ndarray:
    """One 3 x side x side image in [0, 1] with per-image nuisances."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy = (side - 1) / 2 + rng.integers(-2, 3)
    cx = (side - 1) / 2 + rng.integers(-2, 3)

    # background: smooth random field plus fine texture
    coarse = rng.uniform(0, 1, (3, 5, 5))
    ys = np.linspace(0, 4, side)
    iy, fy = np.floor(ys).astype(int).clip(0, 3), ys - np.floor(ys).clip(0, 3)
    a = coarse[:, iy, :] * (1 - fy)[None, :, None] + coarse[:, iy + 1, :] * fy[None, :, None]
    bg = a[:, :, iy] * (1 - fy)[None, None, :] + a[:, :, iy + 1] * fy[None, None, :]
    bg = 0.25 + 0.5 * bg + rng.normal(0, 0.08, (3, side, side))

    ry, rx = spec.radii
    dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    mask = _soft((dist - 1.0) * min(rx, ry), 0.8)
    face = np.broadcast_to(spec.skin[:, None, None], (3, side, side)).copy()
    for dy, dx, sig, col in spec.blobs:
        g = np.exp(-((yy - cy - dy) ** 2 + (xx - cx - dx) ** 2) / (2 * sig ** 2))
        face += col[:, None, None] * g[None]
    for sgn in (-1, 1):
        ey, ex = cy + spec.eye_dy, cx + sgn * spec.eye_dx
        eye = _soft(np.sqrt((yy - ey) ** 2 + (xx - ex) ** 2) - spec.eye_r, 0.5)
        face = face * (1 - eye) + spec.eye_color[:, None, None] * eye
        by = ey - spec.eye_r - 2.0 + sgn * spec.brow_tilt * (xx - ex)
        brow = _soft(np.abs(yy - by) - 0.6, 0.4) * (np.abs(xx - ex) < spec.eye_r + 1.5)
        face = face * (1 - 0.7 * brow)
    t = (xx - cx) / spec.mouth_w
    arc_y = cy + spec.mouth_dy + spec.mouth_curve * (t ** 2 - 0.5)
    mouth = _soft(np.abs(yy - arc_y) - 0.9, 0.5) * _soft(np.abs(t) - 1.0, 0.15)
    face = face * (1 - mouth) + spec.mouth_color[:, None, None] * mouth

    img = bg * (1 - mask) + face * mask
    img = img * rng.uniform(0.8, 1.2)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class ToyFaces:
    images: np.ndarray  # N x 3 x side x side, float32 in [0, 1]
    identities: list[str]
    splits: list[str]


def generate_toyfaces(seed: int, n_identities: int, images_per_identity: int, image_side: int = 64,
                      n_embedder_identities: int = 0, embedder_images_per_identity: int = 10,
                      test_fraction: float = 0.25) -> ToyFaces:
    """Deterministic dataset; identities are split (not images) between train and test.

    Extra identities for embedder pretraining are drawn from the same
    generator and carry the ``embedder`` split.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    root = np.random.SeedSequence(seed)
    id_seeds = root.spawn(n_identities + n_embedder_identities)
    n_test = max(1, int(round(n_identities * test_fraction)))
    images, ids, splits = [], [], []
    for k, ss in enumerate(id_seeds):
        spec_rng, img_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        spec = face_spec(spec_rng, image_side)
        if k < n_identities:
            name, split, count = f"id{k:04d}", ("test" if k >= n_identities - n_test else "train"), images_per_identity
        else:
            name, split, count = f"emb{k - n_identities:04d}", "embedder", embedder_images_per_identity
        for _ in range(count):
            images.append(render(spec, img_rng, image_side))
            ids.append(name)
            splits.append(split)
    return ToyFaces(np.stack(images), ids, splits)


def write_dataset(data: ToyFaces, out_dir) -> Path:
    """Write P6 images plus ``manifest.tsv``; returns the manifest path."""
    from .imageio import save_image, write_manifest

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, ident, split) in enumerate(zip(data.images, data.identities, data.splits)):
        rel = f"images/{ident}_{i:05d}.ppm"
        save_image(img, out / rel)
        rows.append((rel, ident, split))
    return write_manifest(rows, out / "manifest.tsv")
