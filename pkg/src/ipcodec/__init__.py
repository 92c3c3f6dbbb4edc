"""Learned image codec with an identity-preserving training objective."""

__version__ = "0.1.0"

from .bitstream import ImageCodec
from .codec import Architecture, CodecNet
from .embedder import AlignerConfig, ToyEmbedder, align, load_embedder, make_embedder, save_embedder
from .estimators import IdentityPreservingCodec, ToyFaceEmbedder
from .evaluation import EvalReport, evaluate_images, evaluate_model, frr_at_far, match_distances, psnr
from .model import CompressionModel
from .toyfaces import generate_toyfaces
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "AlignerConfig",
    "Architecture",
    "CodecNet",
    "CompressionModel",
    "EvalReport",
    "IdentityPreservingCodec",
    "ImageCodec",
    "ToyEmbedder",
    "ToyFaceEmbedder",
    "TrainConfig",
    "align",
    "evaluate_images",
    "evaluate_model",
    "frr_at_far",
    "generate_toyfaces",
    "load_checkpoint",
    "load_embedder",
    "make_embedder",
    "match_distances",
    "psnr",
    "save_checkpoint",
    "save_embedder",
    "train",
]
