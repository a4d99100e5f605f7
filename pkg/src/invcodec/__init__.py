"""Variable-rate learned image codec built on a multi-scale invertible transform."""

from .config import CodecConfig, desk, full_size, tiny
from .model import CodecModel
from .pipeline import decode, encode

__all__ = ["CodecConfig", "CodecModel", "decode", "desk", "encode", "full_size", "tiny"]
__version__ = "0.1.0"
