"""Multi-frequency in multi-scale attention block.

Each of ``S`` branches shrinks the input (resolution by ``2**(s-1)``, channels
by ``gamma**(s-1)``, both clamped from below), recalibrates channels from
avg/max/min statistics of K DCT coefficients, gates space with a
foreground/background split weighted by learnable ``alpha``/``beta``, and
restores the width. Branch outputs are upsampled, averaged and added back to
the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .freq import DctBasis, FrequencySet, build_basis, dct_coefficients, select_frequencies
from .nn import Conv2d, Linear, Module, parameter
from .tensor import Tensor

POOL_STATS = ("avg", "max", "min")


@dataclass
class MfmsaConfig:
    C: int = 64
    S: int = 3
    K: int = 16
    gamma: float = 0.5
    r: int = 16
    C_min: int = 32
    H_min: int = 8
    W_min: int = 8
    strategy: str = "top"
    base_grid: tuple[int, int] = (8, 8)
    top_indices: list[tuple[int, int]] | None = field(default=None, repr=False)
    interp: str = "bilinear"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.S < 1 or self.K < 1 or self.r < 1:
            raise ConfigError("S, K and r must all be >= 1")
        if not self.C >= self.C_min >= 1:
            raise ConfigError(f"need C >= C_min >= 1, got C={self.C}, C_min={self.C_min}")
        if self.H_min < 1 or self.W_min < 1:
            raise ConfigError("H_min and W_min must be >= 1")
        if self.interp not in ("bilinear", "nearest"):
            raise ConfigError(f"interp must be bilinear or nearest, got {self.interp!r}")

    def reduced_channels(self, s: int) -> float:
        """Unclamped ``C * gamma**(s-1)``."""
        return self.C * self.gamma ** (s - 1)

    def branch_channels(self, s: int) -> int:
        return max(math.floor(self.reduced_channels(s) + 1e-9), self.C_min)

    def hidden_channels(self, s: int) -> int:
        return max(1, self.branch_channels(s) // self.r)

    def branch_size(self, s: int, h: int, w: int) -> tuple[int, int]:
        if s == 1:
            return h, w
        f = 2 ** (s - 1)
        # never upsample: small stages keep their own size instead of growing to H_min
        return min(h, max(h // f, self.H_min)), min(w, max(w // f, self.W_min))

    def frequencies(self) -> FrequencySet:
        return select_frequencies(self.strategy, self.K, self.base_grid, self.top_indices)


class Branch(Module):
    def __init__(self, cfg: MfmsaConfig, s: int, rng: np.random.Generator):
        c, cs = cfg.C, cfg.branch_channels(s)
        self.s = s
        self.channels = cs
        self.decompose = Conv2d(c, cs, 3, rng, dilation=s)
        self.fc1 = Linear(cs, cfg.hidden_channels(s), rng)
        self.fc2 = Linear(cfg.hidden_channels(s), cs, rng)
        self.fg = Conv2d(cs, 1, 1, rng)
        self.restore = Conv2d(cs, c, 3, rng)
        self.alpha = parameter(np.ones((1, 1, 1, 1)))
        self.beta = parameter(np.ones((1, 1, 1, 1)))

    def census_weights(self) -> int:
        """Weights enumerated by the closed-form census (no biases, no alpha/beta)."""
        return sum(m.weight.size for m in (self.decompose, self.fc1, self.fc2, self.fg, self.restore))


class MFMSABlock(Module):
    def __init__(self, cfg: MfmsaConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.freqs = cfg.frequencies()
        self.branches = [Branch(cfg, s, rng) for s in range(1, cfg.S + 1)]
        self._bases: dict[tuple[int, int], DctBasis] = {}

    def basis(self, h: int, w: int) -> DctBasis:
        key = (h, w)
        if key not in self._bases:
            self._bases[key] = build_basis(self.freqs, h, w)
        return self._bases[key]

    def __call__(self, x: Tensor) -> Tensor:
        return mfmsa_forward(x, self)


def scale_decompose(x: Tensor, block: MFMSABlock) -> list[Tensor]:
    cfg = block.cfg
    h, w = x.shape[2:]
    out = []
    for br in block.branches:
        size = cfg.branch_size(br.s, h, w)
        xs = T.resample(x, cfg.interp, size=size) if br.s > 1 else x
        out.append(br.decompose(xs))
    return out


def mfca(x_s: Tensor, basis: DctBasis, branch: Branch) -> tuple[Tensor, Tensor]:
    """Channel attention from pooled DCT statistics; returns (recalibrated, attention)."""
    coef = dct_coefficients(x_s, basis)  # (N, C_s, K, 1)
    logits = None
    for stat in POOL_STATS:
        z = T.global_pool(coef, stat)
        term = branch.fc2(T.relu(branch.fc1(z)))
        logits = term if logits is None else T.add(logits, term)
    attention = T.sigmoid(logits)
    return T.mul_channelwise(x_s, attention), attention


def foreground_map(x_hat: Tensor, branch: Branch) -> Tensor:
    return T.sigmoid(branch.fg(x_hat))


def mssa(x_hat: Tensor, branch: Branch) -> Tensor:
    fg = foreground_map(x_hat, branch)
    bg = T.affine(fg, -1.0, 1.0)
    gated = T.add(
        T.scale(T.mul_spatial(x_hat, fg), branch.alpha),
        T.scale(T.mul_spatial(x_hat, bg), branch.beta),
    )
    return branch.restore(gated)


def branch_outputs(x: Tensor, block: MFMSABlock) -> list[Tensor]:
    outs = []
    for br, xs in zip(block.branches, scale_decompose(x, block)):
        x_hat, _ = mfca(xs, block.basis(*xs.shape[2:]), br)
        outs.append(mssa(x_hat, br))
    return outs


def mfmsa_forward(x: Tensor, block: MFMSABlock) -> Tensor:
    h, w = x.shape[2:]
    total = None
    for s, y in enumerate(branch_outputs(x, block), start=1):
        if s > 1:
            y = T.resample(y, block.cfg.interp, size=(h, w))
        total = y if total is None else T.add(total, y)
    return T.add(x, T.scale(total, 1.0 / block.cfg.S))


# ---------------------------------------------------------------------------
# parameter census


@dataclass(frozen=True)
class BranchCensus:
    s: int
    channels: int
    counted: int
    closed_form: float
    ratio: float
    gamma_power: float


@dataclass(frozen=True)
class ParamCensus:
    rows: tuple[BranchCensus, ...]
    single_scale: float
    geometric_sum: float

    @property
    def ratio_sum(self) -> float:
        return sum(r.ratio for r in self.rows)


def closed_form_branch(C: float, gamma: float, r: float, s: int) -> float:
    cg = C * gamma ** (s - 1)
    return cg * (18 * C + cg * 2 / r + 1)


def param_count(cfg: MfmsaConfig) -> ParamCensus:
    """Count branch weights of a freshly built block and compare with the closed form."""
    block = MFMSABlock(cfg, np.random.default_rng(0))
    p = closed_form_branch(cfg.C, cfg.gamma, cfg.r, 1)
    rows = []
    for br in block.branches:
        counted = br.census_weights()
        rows.append(
            BranchCensus(
                s=br.s,
                channels=br.channels,
                counted=counted,
                closed_form=closed_form_branch(cfg.C, cfg.gamma, cfg.r, br.s),
                ratio=counted / p,
                gamma_power=cfg.gamma ** (br.s - 1),
            )
        )
    geometric = (1 - cfg.gamma**cfg.S) / (1 - cfg.gamma)
    return ParamCensus(tuple(rows), p, geometric)
