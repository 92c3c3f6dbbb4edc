"""Command-line entry point: ``ipcodec <command> [flags]``."""
from __future__ import annotations

import argparse
import logging
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bitstream import ImageCodec
from .codec import Architecture
from .embedder import AlignerConfig, IdentityOverlapError, load_embedder, make_embedder, save_embedder
from .evaluation import evaluate_model
from .gradcheck import format_table, run_gradcheck
from .imageio import ImageFormatError, ManifestError, load_image, load_split, read_manifest, save_image
from .rangecoder import ContainerError
from .tensor import ShapeError
from .toyfaces import generate_toyfaces, write_dataset
from .training import (ArchitectureMismatchError, TrainConfig, TrainingDiverged, WarmStartRequired,
                       load_checkpoint, save_checkpoint, train, warm_start)

log = logging.getLogger("ipcodec")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_FORMAT = 5
EXIT_WARM_START = 6
EXIT_DIVERGED = 7
EXIT_GRADCHECK = 8
EXIT_ARCH = 9
# container errors carry their own codes (10..15), see rangecoder


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text: str) -> str | None:
    return text or None


# key -> (parser, default)
RUN_CONFIG_SCHEMA: dict[str, tuple] = {
    "lambda_rate": (float, 1e-6),
    "lambda_id": (float, 0.0),
    "recon": (str, "l2"),
    "lr": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "eps": (float, 1e-8),
    "batch_size": (int, 8),
    "steps": (int, 3000),
    "seed": (int, 0),
    "threads": (int, 1),
    "manifest": (_opt_str, None),
    "warm_start": (_opt_str, None),
    "embedder": (_opt_str, None),
    "allow_cold_start": (_bool, False),
    "out": (str, "checkpoint.ipck"),
    "log": (_opt_str, None),
    "arch.n_filters": (int, 64),
    "arch.latent_channels": (int, 32),
    "arch.hyper_channels": (int, 16),
    "arch.kernel_size": (int, 5),
    "arch.slope": (float, 0.2),
    "aligner.crop_fraction": (float, 0.7),
    "aligner.side": (int, 32),
    "eval.gallery_n": (int, 1),
    "eval.far_target": (float, 0.01),
}


@dataclass
class RunConfig:
    values: dict
    path: Path | None = None

    def __getitem__(self, key):
        return self.values[key]

    def resolve(self, key) -> Path | None:
        """Path-valued key, relative to the config file's directory."""
        v = self.values[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() or self.path is None else self.path.parent / p

    def train_config(self) -> TrainConfig:
        v = self.values
        arch = Architecture(v["arch.n_filters"], v["arch.latent_channels"], v["arch.hyper_channels"],
                            v["arch.kernel_size"], v["arch.slope"])
        return TrainConfig(
            lambda_rate=v["lambda_rate"], lambda_id=v["lambda_id"], recon=v["recon"], lr=v["lr"],
            beta1=v["beta1"], beta2=v["beta2"], eps=v["eps"], batch_size=v["batch_size"], steps=v["steps"],
            seed=v["seed"], arch=arch, manifest=v["manifest"], warm_start=v["warm_start"],
            embedder=v["embedder"], allow_cold_start=v["allow_cold_start"],
        )


def parse_run_config(text: str, path: Path | None = None) -> RunConfig:
    """Flat ``key=value`` lines; ``#`` comments; unknown keys rejected."""
    values = {k: d for k, (_, d) in RUN_CONFIG_SCHEMA.items()}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in RUN_CONFIG_SCHEMA:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            values[key] = RUN_CONFIG_SCHEMA[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from None
    if values["steps"] < 0 or values["batch_size"] < 1 or values["threads"] < 1:
        raise ConfigError("steps must be >= 0, batch_size and threads >= 1")
    return RunConfig(values, path)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    return parse_run_config(path.read_text(encoding="utf-8"), path)


def write_stanza(path, command: str, items: dict) -> Path:
    """Reproducibility record written next to every command's outputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command={command}",
        f"ipcodec_version={__version__}",
        f"python={platform.python_version()}",
        f"torch={torch.__version__}",
        f"numpy={np.__version__}",
        f"threads={torch.get_num_threads()}",
    ]
    lines += [f"{k}={v}" for k, v in items.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _stanza_path(out: Path) -> Path:
    return out / "repro.txt" if out.is_dir() else out.with_name(out.name + ".repro.txt")


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #

def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    torch.set_num_threads(rc["threads"])
    cfg = rc.train_config()
    manifest = rc.resolve("manifest")
    if manifest is None:
        raise ConfigError("train needs 'manifest' in the config")
    images, _, _ = load_split(manifest, "train")
    embedder = None
    if cfg.lambda_id > 0:
        emb_path = rc.resolve("embedder")
        if emb_path is None:
            raise ConfigError("lambda_id > 0 needs 'embedder' in the config")
        embedder = load_embedder(emb_path)
    init = None
    if rc["warm_start"] is not None:
        init = warm_start(load_checkpoint(rc.resolve("warm_start")), cfg)
    out = rc.resolve("out")
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = rc.resolve("log") or out.with_name(out.name + ".log.csv")
    try:
        ckpt, rows = train(cfg, images, embedder=embedder, init=init, log_path=log_path)
    except TrainingDiverged as exc:
        bad = out.with_name(out.name + ".last_good")
        save_checkpoint(exc.last_good, bad)
        log.error("training diverged at step %d; last good state saved to %s", exc.step, bad)
        raise
    save_checkpoint(ckpt, out)
    items = {f"config.{k}": v for k, v in sorted(cfg.echo().items())}
    items.update(checkpoint=out, checkpoint_hash=ckpt.content_hash.hex(), log=log_path, n_train=len(images),
                 embedder_hash=embedder.digest().hex() if embedder else "",
                 warm_start_hash=init.content_hash.hex() if init else "")
    write_stanza(_stanza_path(out), "train", items)
    last = rows[-1] if rows else None
    print(f"checkpoint {out} hash={ckpt.content_hash.hex()} steps={ckpt.step}"
          + (f" L_rec={last[1]:.6g} L_rate_bits={last[2]:.6g} L_id={last[3]:.6g}" if last else ""))
    return EXIT_OK


def _pairs(src: Path, dst: Path, in_suffix: str, out_suffix: str):
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        files = sorted(src.glob(f"*{in_suffix}"))
        if not files:
            raise FileNotFoundError(f"no *{in_suffix} files in {src}")
        return [(f, dst / (f.stem + out_suffix)) for f in files]
    if not src.exists():
        raise FileNotFoundError(f"{src} does not exist")
    dst.parent.mkdir(parents=True, exist_ok=True)
    return [(src, dst)]


def cmd_compress(args) -> int:
    codec = ImageCodec(load_checkpoint(args.checkpoint).model)
    total = 0
    pairs = _pairs(Path(args.inp), Path(args.out), ".ppm", ".ipc")
    for src, dst in pairs:
        img = load_image(src)
        data = codec.compress(img)
        dst.write_bytes(data)
        total += len(data)
        print(f"{src} -> {dst} {len(data)} bytes {8 * len(data) / (img.shape[1] * img.shape[2]):.4f} bpp")
    write_stanza(_stanza_path(Path(args.out)), "compress",
                 {"checkpoint": args.checkpoint, "checkpoint_hash": codec.checkpoint_hash.hex(),
                  "arch_hash": codec.arch_hash.hex(), "inputs": len(pairs), "total_bytes": total})
    return EXIT_OK


def cmd_decompress(args) -> int:
    codec = ImageCodec(load_checkpoint(args.checkpoint).model)
    pairs = _pairs(Path(args.inp), Path(args.out), ".ipc", ".ppm")
    for src, dst in pairs:
        img = codec.decompress(src.read_bytes())
        save_image(img, dst)
        print(f"{src} -> {dst} {img.shape[2]}x{img.shape[1]}")
    write_stanza(_stanza_path(Path(args.out)), "decompress",
                 {"checkpoint": args.checkpoint, "checkpoint_hash": codec.checkpoint_hash.hex(), "inputs": len(pairs)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    torch.set_num_threads(1)
    embedder = load_embedder(args.embedder)
    codec = None if args.bypass else ImageCodec(load_checkpoint(args.checkpoint).model)
    report = evaluate_model(codec, embedder, args.manifest, n_gallery=args.gallery_n, far_target=args.far,
                            split=args.split, seed=args.seed)
    out = Path(args.out)
    report.write(out)
    write_stanza(out.with_suffix(".repro.txt"), "evaluate",
                 {**{f"config.{k}": v for k, v in report.config.items()},
                  "gallery_n": args.gallery_n, "far_target": args.far, "seed": args.seed})
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_datagen(args) -> int:
    data = generate_toyfaces(args.seed, args.ids, args.per_id, args.side, n_embedder_identities=args.embedder_ids,
                             embedder_images_per_identity=args.embedder_per_id)
    manifest = write_dataset(data, args.out)
    write_stanza(Path(args.out) / "repro.txt", "datagen",
                 {"seed": args.seed, "ids": args.ids, "per_id": args.per_id, "side": args.side,
                  "embedder_ids": args.embedder_ids, "embedder_per_id": args.embedder_per_id,
                  "images": len(data.images)})
    print(f"wrote {len(data.images)} images and {manifest}")
    return EXIT_OK


def cmd_make_embedder(args) -> int:
    torch.set_num_threads(1)
    aligner = AlignerConfig(args.crop_fraction, args.side)
    if args.mode == "pretrained":
        rows = read_manifest(args.manifest)
        codec_ids = sorted({i for _, i, s in rows if s != "embedder"})
        images, labels, _ = load_split(args.manifest, "embedder")
        emb, acc = make_embedder("pretrained", args.seed, images, labels, aligner=aligner, epochs=args.epochs,
                                 exclude_identities=codec_ids, return_accuracy=True)
    else:
        emb, acc = make_embedder("seeded-random", args.seed, aligner=aligner), None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embedder(emb, out)
    write_stanza(_stanza_path(out), "make-embedder",
                 {"mode": args.mode, "seed": args.seed, "embedder_hash": emb.digest().hex(),
                  "holdout_accuracy": acc if acc is not None else ""})
    print(f"embedder {out} hash={emb.digest().hex()}" + (f" holdout_accuracy={acc:.4f}" if acc is not None else ""))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(instances=args.instances, seed=args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases passed")
    return EXIT_OK if not failed else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipcodec", description="Identity-preserving learned image codec.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a codec from a key=value run config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, what in (("compress", cmd_compress, "P6 image(s) to .ipc container(s)"),
                             ("decompress", cmd_decompress, ".ipc container(s) to P6 image(s)")):
        s = sub.add_parser(name, help=what)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--in", dest="inp", required=True, help="file or directory")
        s.add_argument("--out", required=True, help="file or directory")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="rate, quality and FRR@FAR over a manifest split")
    s.add_argument("--checkpoint", help="omit together with --bypass to score the originals")
    s.add_argument("--embedder", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--gallery-n", type=int, default=1)
    s.add_argument("--far", type=float, default=0.01)
    s.add_argument("--split", default="test")
    s.add_argument("--seed", type=int, default=None, help="permute gallery picks")
    s.add_argument("--bypass", action="store_true", help="skip the codec (ceiling numbers)")
    s.add_argument("--out", default="eval_report", help="report prefix (.txt, .json, .csv)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("datagen", help="write the synthetic toy-faces dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ids", type=int, required=True)
    s.add_argument("--per-id", type=int, required=True)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--embedder-ids", type=int, default=200)
    s.add_argument("--embedder-per-id", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("make-embedder", help="build a frozen toy embedder")
    s.add_argument("--mode", choices=("pretrained", "seeded-random"), default="pretrained")
    s.add_argument("--manifest", help="needed for pretrained mode (uses the embedder split)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--crop-fraction", type=float, default=0.7)
    s.add_argument("--side", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_embedder)

    s = sub.add_parser("gradcheck", help="finite-difference check of all primitives and losses")
    s.add_argument("--instances", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ContainerError):
        return exc.code
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING_FILE
    if isinstance(exc, (ImageFormatError, ManifestError, IdentityOverlapError)):
        return EXIT_FORMAT
    if isinstance(exc, WarmStartRequired):
        return EXIT_WARM_START
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(exc, ArchitectureMismatchError):
        return EXIT_ARCH
    return EXIT_ERROR


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "evaluate" and not args.bypass and not args.checkpoint:
        parser.error("evaluate needs --checkpoint unless --bypass is given")
    if args.command == "make-embedder" and args.mode == "pretrained" and not args.manifest:
        parser.error("make-embedder --mode pretrained needs --manifest")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, ShapeError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
