"""MADGNet-mini: plain CNN encoder, MFMSA decoder chain, E-SDM heads per stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, StateError
from .esdm import FLOWS, TaskBundle, esdm_multilabel
from .mfmsa import MfmsaConfig, MFMSABlock
from .nn import Conv2d, Module
from .tensor import Tensor, no_grad

STAGES = 4


@dataclass
class NetworkConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    c_e: int = 64
    mfmsa: MfmsaConfig = field(default_factory=MfmsaConfig)
    L: int = 2
    M: int = 1
    flow: str = "ensemble"
    deep_supervision: bool = True

    def __post_init__(self):
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ConfigError(f"input size {h}x{w} must be positive multiples of 32")
        if len(self.widths) != 5:
            raise ConfigError(f"need 5 encoder widths, got {len(self.widths)}")
        if self.c_e < self.mfmsa.C_min:
            raise ConfigError(f"c_e={self.c_e} is below C_min={self.mfmsa.C_min}")
        if self.mfmsa.C != self.c_e:
            raise ConfigError(f"MFMSA width {self.mfmsa.C} must equal c_e={self.c_e}")
        if not 0 <= self.L <= 2:
            raise ConfigError(f"L must be 0, 1 or 2 (region/distance/boundary), got {self.L}")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.flow not in FLOWS:
            raise ConfigError(f"flow must be one of {FLOWS}, got {self.flow!r}")

    def supervised_stages(self) -> list[int]:
        return list(range(1, STAGES + 1)) if self.deep_supervision else [STAGES]

    def upscale(self, stage: int) -> int:
        return 2 ** (STAGES + 1 - stage)


class Encoder(Module):
    """Five stages of (3x3 conv + ReLU) x2 followed by a 2x downsample."""

    def __init__(self, in_channels: int, widths, rng: np.random.Generator):
        self.stages = []
        cin = in_channels
        for c in widths:
            self.stages.append([Conv2d(cin, c, 3, rng), Conv2d(c, c, 3, rng)])
            cin = c

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for conv_a, conv_b in self.stages:
            x = T.relu(conv_b(T.relu(conv_a(x))))
            # half-pixel bilinear at scale 1/2 is an exact 2x2 mean
            x = T.resample_bilinear(x, 0.5)
            feats.append(x)
        return feats


class MADGNet(Module):
    def __init__(self, cfg: NetworkConfig, seed: int | None = 0):
        self.cfg = cfg
        rng = np.random.default_rng(0 if seed is None else seed)
        ce = cfg.c_e
        self.encoder = Encoder(cfg.in_channels, cfg.widths, rng)
        self.top = Conv2d(cfg.widths[4], ce, 1, rng)
        # lateral[i-1] reduces f_{5-i}
        self.lateral = [Conv2d(cfg.widths[4 - i], ce, 1, rng) for i in range(1, STAGES + 1)]
        self.fuse = [Conv2d(2 * ce, ce, 1, rng) for _ in range(STAGES)]
        self.blocks = [MFMSABlock(cfg.mfmsa, rng) for _ in range(STAGES)]
        self.heads = {
            stage: [[Conv2d(ce, 1, 1, rng) for _ in range(cfg.L + 1)] for _ in range(cfg.M)]
            for stage in cfg.supervised_stages()
        }
        self.loaded = seed is not None

    def load_state_dict(self, state) -> None:
        super().load_state_dict(state)
        self.loaded = True

    def encode(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 4:
            raise ConfigError(f"image must be (N,C,H,W), got {image.shape}")
        n, c, h, w = image.shape
        if c != self.cfg.in_channels:
            raise ConfigError(f"expected {self.cfg.in_channels} input channels, got {c}")
        if h % 32 or w % 32:
            raise ConfigError(f"input size {h}x{w} is not divisible by 32")
        return self.encoder(image)

    def decode(self, feats: list[Tensor]) -> dict[int, list[TaskBundle]]:
        """Run the decoder chain; returns ``{stage: [bundle per label]}``."""
        cfg = self.cfg
        y = self.top(feats[4])
        out = {}
        for i in range(1, STAGES + 1):
            skip = self.lateral[i - 1](feats[4 - i])
            up = T.resample(y, cfg.mfmsa.interp, size=skip.shape[2:])
            x = self.fuse[i - 1](T.concat_channels(skip, up))
            y = self.blocks[i - 1](x)
            if i in self.heads:
                out[i] = esdm_multilabel(y, self.heads[i], cfg.upscale(i), stage=i, flow=cfg.flow, mode=cfg.mfmsa.interp)
        return out

    def __call__(self, image: Tensor) -> dict[int, list[TaskBundle]]:
        return self.decode(self.encode(image))

    def core_logits(self, image: Tensor) -> np.ndarray:
        """Stage-4 core logits ``(N, M, H, W)`` without recording a graph."""
        if not self.loaded:
            raise StateError("network parameters were never initialised or loaded")
        with no_grad():
            bundles = self(image)[STAGES]
        return np.concatenate([b.core.data for b in bundles], axis=1)

    def infer(self, image: Tensor) -> np.ndarray:
        """Binary masks ``(N, M, H, W)``: sigmoid(core logit) >= 0.5."""
        return binarize(self.core_logits(image))


def binarize(logits: np.ndarray) -> np.ndarray:
    return T.sigmoid_array(np.asarray(logits, dtype=np.float64)) >= 0.5
