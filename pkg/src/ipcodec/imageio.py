"""P6 pixmap images, dataset manifests, and flat key=value run configs."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

SPLITS = ("train", "test", "embedder")


class ImageFormatError(ValueError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Round-to-nearest 8-bit quantization of values in [0, 1]."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write a 3 x H x W array in [0, 1] (or uint8) as binary P6."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageFormatError(f"expected 3 x H x W, got {arr.shape}")
    data = arr if arr.dtype == np.uint8 else to_uint8(arr)
    _, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_p6(path) -> np.ndarray:
    """Raw 8-bit 3 x H x W array from a binary P6 file."""
    buf = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise ImageFormatError(f"{path}: malformed header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary P6 pixmap (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported depth (maxval {maxval}); only 8-bit is supported")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    if len(buf) - pos < need:
        raise ImageFormatError(f"{path}: pixel data truncated")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def load_image(path) -> np.ndarray:
    """3 x H x W float32 tensor in [0, 1] (values k/255)."""
    return read_p6(path).astype(np.float32) / 255.0


# --------------------------------------------------------------------------- #
# manifests: "<path>\t<identity>\t<split>" per line, paths relative to the file
# --------------------------------------------------------------------------- #

class ManifestError(ValueError):
    pass


def write_manifest(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rel, ident, split in rows:
            fh.write(f"{rel}\t{ident}\t{split}\n")
    return path


def read_manifest(path, check_exists: bool = True) -> list[tuple[Path, str, str]]:
    path = Path(path)
    base = path.parent
    rows = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{n}: expected 3 tab-separated fields")
        rel, ident, split = parts
        if split not in SPLITS:
            raise ManifestError(f"{path}:{n}: unknown split {split!r}")
        p = (base / rel) if not Path(rel).is_absolute() else Path(rel)
        if check_exists and not p.exists():
            raise FileNotFoundError(f"{path}:{n}: {p} does not exist")
        rows.append((p, ident, split))
    emb = {i for _, i, s in rows if s == "embedder"}
    codec = {i for _, i, s in rows if s != "embedder"}
    if emb & codec:
        raise ManifestError(f"{path}: embedder identities overlap train/test: {sorted(emb & codec)[:5]}")
    return rows


def load_split(path, split: str):
    """(images N x 3 x H x W, identities, paths) for one split of a manifest."""
    rows = [r for r in read_manifest(path) if r[2] == split]
    if not rows:
        raise ManifestError(f"{path}: split {split!r} is empty")
    images = np.stack([load_image(p) for p, _, _ in rows])
    return images, [i for _, i, _ in rows], [p for p, _, _ in rows]
