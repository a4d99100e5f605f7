"""Model configuration and its stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483, 0.0932, 0.1800, 0.320, 0.569, 1.012, 1.8)

SPATIAL_VARIANTS = ("stack", "single", "none")


@dataclass(frozen=True)
class CodecConfig:
    num_blocks: int = 4
    units_per_block: int = 4
    # fraction of each block's output channels emitted as a latent; the last
    # block always splits evenly so its two outputs are siblings of equal shape
    split_ratios: tuple[float, ...] = (0.25, 0.25, 0.25, 0.5)
    coupling_widths: tuple[int, ...] = (32, 32, 32, 32)
    context_width: int = 32
    param_width: int = 32
    lrp_width: int = 32
    postprocess_width: int = 8
    q_max: int = 11
    lambdas: tuple[float, ...] = LAMBDAS
    use_lrp: bool = True
    use_postprocess: bool = True
    spatial_context: str = "stack"
    spatial_kernel: int = 5
    sigma_init: float = 16.0
    quantizer: str = "mixed"
    dtype: str = "float32"

    def __post_init__(self):
        nb = self.num_blocks
        if nb < 1:
            raise ValueError("need at least one invertible block")
        if len(self.split_ratios) != nb or len(self.coupling_widths) != nb:
            raise ValueError("split_ratios and coupling_widths need one entry per block")
        if self.split_ratios[-1] != 0.5:
            raise ValueError("the last block must split evenly")
        if len(self.lambdas) != self.q_max + 1:
            raise ValueError(f"need {self.q_max + 1} lambdas, got {len(self.lambdas)}")
        if self.spatial_context not in SPATIAL_VARIANTS:
            raise ValueError(f"spatial_context must be one of {SPATIAL_VARIANTS}")
        if self.spatial_context == "single" and (self.spatial_kernel % 2 == 0 or self.spatial_kernel < 3):
            raise ValueError("single-layer spatial kernel must be odd and >= 3")
        if self.quantizer not in ("mixed", "noise"):
            raise ValueError("quantizer must be 'mixed' or 'noise'")
        self.channel_plan()

    # ------------------------------------------------------------ bookkeeping
    @property
    def num_scales(self) -> int:
        return self.num_blocks + 1

    @property
    def multiple(self) -> int:
        return 2 ** self.num_blocks

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def channel_plan(self) -> list[dict]:
        """Per block: input channels after squeeze, latent and hidden channels."""
        plan = []
        ch = 3
        for b in range(self.num_blocks):
            c = ch * 4
            y = c * self.split_ratios[b]
            if y != int(y) or not 0 < y < c:
                raise ValueError(f"block {b + 1}: split {self.split_ratios[b]} of {c} channels is not integral")
            plan.append({"channels": c, "latent": int(y), "hidden": c - int(y)})
            ch = c - int(y)
        return plan

    def latent_channels(self) -> list[int]:
        """Channel counts of y_1 .. y_{n+1}."""
        plan = self.channel_plan()
        return [p["latent"] for p in plan] + [plan[-1]["hidden"]]

    def hidden_channels(self) -> list[int]:
        """Channel counts of the context input h_1 .. h_n for scales 1 .. n."""
        plan = self.channel_plan()
        return [p["hidden"] for p in plan]

    def latent_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        shapes = []
        lat = self.latent_channels()
        for s in range(self.num_scales):
            f = 2 ** min(s + 1, self.num_blocks)
            shapes.append((lat[s], height // f, width // f))
        return shapes

    # ------------------------------------------------------------ serialization
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["coupling_widths"] = list(self.coupling_widths)
        d["lambdas"] = list(self.lambdas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        for key in ("split_ratios", "coupling_widths", "lambdas"):
            if key in d:
                d[key] = tuple(d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "CodecConfig":
        return cls.from_dict(json.loads(text))

    def hash64(self) -> int:
        return int.from_bytes(hashlib.sha256(self.to_json().encode()).digest()[:8], "little")

    def replace(self, **changes) -> "CodecConfig":
        return dataclasses.replace(self, **changes)


def desk() -> CodecConfig:
    return CodecConfig()


def tiny() -> CodecConfig:
    """Smallest useful model; what the toy training runs use."""
    return CodecConfig(units_per_block=2, coupling_widths=(16, 16, 16, 16), context_width=16,
                       param_width=16, lrp_width=16, postprocess_width=8)


def full_size() -> CodecConfig:
    return CodecConfig(split_ratios=(0.5, 0.5, 0.5, 0.5), coupling_widths=(128, 128, 128, 192),
                       context_width=128, param_width=128, lrp_width=128, postprocess_width=101)


PRESETS = {"desk": desk, "tiny": tiny, "full": full_size}
