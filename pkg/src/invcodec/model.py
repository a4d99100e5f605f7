"""The complete codec model: transform, entropy model and post-processing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import CodecConfig
from .core import serialize
from .core.nn import Module
from .core.rng import Rng
from .entropy import EntropyModel
from .postprocess import PostProcessNet
from .transform import InvertibleTransform

_CONFIG_KEY = "__config__"
_STEP_KEY = "__step__"
_ADAM_PREFIX = "__adam__."


class CodecModel(Module):
    def __init__(self, config: CodecConfig, seed: int = 0):
        rng = Rng(seed)
        self.config = config
        self.transform = InvertibleTransform(config, rng.child("transform"))
        self.entropy = EntropyModel(config, rng.child("entropy"))
        self.post = PostProcessNet(config.postprocess_width, rng.child("post"), config.np_dtype)
        self.assign_names()

    @property
    def config_hash(self) -> int:
        return self.config.hash64()

    def lam(self, q) -> np.ndarray:
        """Rate-distortion trade-off for quality ``q``, geometric between integer entries."""
        q = np.asarray(q, dtype=np.float64)
        lams = np.log(np.asarray(self.config.lambdas))
        lo = np.floor(q).astype(np.int64)
        hi = np.minimum(lo + 1, self.config.q_max)
        frac = q - lo
        return np.exp((1 - frac) * lams[lo] + frac * lams[hi])

    def parameter_breakdown(self) -> dict[str, int]:
        counts = {"transform": self.transform.num_parameters(), "post": self.post.num_parameters()}
        ent = self.entropy
        for key in ("channel", "spatial", "params", "gain", "lrp"):
            counts[f"entropy.{key}"] = int(sum(m.num_parameters() for m in getattr(ent, key)))
        counts["total"] = self.num_parameters()
        return counts

    # ------------------------------------------------------------ persistence
    def to_entries(self, step: int = 0, with_optimizer: bool = False) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {
            _CONFIG_KEY: np.frombuffer(self.config.to_json().encode("utf-8"), dtype=np.uint8),
            _STEP_KEY: np.array([step], dtype=np.int64),
        }
        entries.update(self.state_dict())
        if with_optimizer:
            for name, p in self.named_parameters():
                if p.adam_m is not None:
                    entries[f"{_ADAM_PREFIX}m.{name}"] = p.adam_m
                    entries[f"{_ADAM_PREFIX}v.{name}"] = p.adam_v
                    entries[f"{_ADAM_PREFIX}t.{name}"] = np.array([p.adam_step], dtype=np.int64)
        return entries

    def save(self, path: str | Path, step: int = 0, with_optimizer: bool = False) -> None:
        serialize.save(path, self.to_entries(step, with_optimizer))

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> tuple["CodecModel", int]:
        if _CONFIG_KEY not in entries:
            raise serialize.WeightsFormatError("model file carries no configuration")
        config = CodecConfig.from_json(entries[_CONFIG_KEY].astype(np.uint8).tobytes().decode("utf-8"))
        model = cls(config)
        state = {k: v for k, v in entries.items() if not k.startswith("__")}
        model.load_state_dict(state)
        for name, p in model.named_parameters():
            m = entries.get(f"{_ADAM_PREFIX}m.{name}")
            if m is not None:
                p.adam_m = m.reshape(p.shape).astype(p.data.dtype)
                p.adam_v = entries[f"{_ADAM_PREFIX}v.{name}"].reshape(p.shape).astype(p.data.dtype)
                p.adam_step = int(entries[f"{_ADAM_PREFIX}t.{name}"].ravel()[0])
        step = int(entries[_STEP_KEY].ravel()[0]) if _STEP_KEY in entries else 0
        return model, step

    @classmethod
    def load(cls, path: str | Path) -> "CodecModel":
        return cls.from_entries(serialize.load(path))[0]

    @classmethod
    def load_checkpoint(cls, path: str | Path) -> tuple["CodecModel", int]:
        return cls.from_entries(serialize.load(path))
