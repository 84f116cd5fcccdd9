"""2-D DCT basis images and frequency-index selection.

Frequency indices live on a base grid (8x8 by default) and are rescaled to
each branch resolution with ``u' = floor(u * H_s / G_h)``. The basis is the
unnormalised DCT-II product ``cos(pi*u*(h+1/2)/H) * cos(pi*v*(w+1/2)/W)``, so
``(0, 0)`` is the all-ones image and the projection onto it is the spatial sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, ParseError
from .tensor import Tensor, spatial_project

STRATEGIES = ("top", "bot", "low")
DEFAULT_GRID = (8, 8)


def zigzag(gh: int, gw: int) -> list[tuple[int, int]]:
    """JPEG zigzag traversal of a ``gh x gw`` grid starting at (0, 0)."""
    order = []
    for d in range(gh + gw - 1):
        diag = [(u, d - u) for u in range(max(0, d - gw + 1), min(d, gh - 1) + 1)]
        # even diagonals run bottom-left -> top-right, odd ones the other way
        if d % 2 == 0:
            diag.reverse()
        order.extend(diag)
    return order


def read_index_file(path: str | Path, base_grid: tuple[int, int] = DEFAULT_GRID) -> list[tuple[int, int]]:
    """Parse a ``u v`` per line index list; blank lines and ``#`` comments are skipped."""
    raw = Path(path).read_bytes()
    return _parse_indices(raw.decode("ascii"), base_grid, str(path))


def _parse_indices(text: str, base_grid, source: str) -> list[tuple[int, int]]:
    pairs = []
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            parts = body.split()
            if len(parts) != 2 or not all(p.isdigit() for p in parts):
                raise ParseError(f"{source}: expected 'u v', got {body!r}", offset)
            u, v = int(parts[0]), int(parts[1])
            if not (0 <= u < base_grid[0] and 0 <= v < base_grid[1]):
                raise ParseError(f"{source}: index ({u}, {v}) outside {base_grid[0]}x{base_grid[1]} grid", offset)
            pairs.append((u, v))
        offset += len(line.encode("ascii"))
    if len(set(pairs)) != len(pairs):
        raise ConfigError(f"{source}: duplicate frequency indices")
    return pairs


def default_top_indices() -> list[tuple[int, int]]:
    text = resources.files("madgnet").joinpath("data/top_frequencies.txt").read_text("ascii")
    return _parse_indices(text, DEFAULT_GRID, "top_frequencies.txt")


@dataclass(frozen=True)
class FrequencySet:
    strategy: str
    indices: tuple[tuple[int, int], ...]
    base_grid: tuple[int, int] = DEFAULT_GRID

    @property
    def K(self) -> int:
        return len(self.indices)


def select_frequencies(
    strategy: str,
    K: int,
    base_grid: tuple[int, int] = DEFAULT_GRID,
    top_indices: list[tuple[int, int]] | None = None,
) -> FrequencySet:
    """Pick ``K`` frequency pairs by strategy ``top``, ``bot`` or ``low``.

    ``low`` takes the first K zigzag positions, ``bot`` the first K of the
    reversed zigzag (starting at the far corner), and ``top`` the first K of
    a ranked list (``top_indices`` or the shipped default file).
    """
    strategy = strategy.lower()
    gh, gw = base_grid
    if not 1 <= K <= gh * gw:
        raise ContractError(f"K={K} outside [1, {gh * gw}] for a {gh}x{gw} grid")
    if strategy == "low":
        chosen = zigzag(gh, gw)[:K]
    elif strategy == "bot":
        chosen = zigzag(gh, gw)[::-1][:K]
    elif strategy == "top":
        ranked = top_indices if top_indices is not None else default_top_indices()
        if K > len(ranked):
            raise ContractError(f"top strategy lists only {len(ranked)} indices, K={K} requested")
        chosen = list(ranked[:K])
        if any(not (0 <= u < gh and 0 <= v < gw) for u, v in chosen):
            raise ContractError("top indices fall outside the base grid")
    else:
        raise ContractError(f"unknown frequency strategy {strategy!r}; expected one of {STRATEGIES}")
    return FrequencySet(strategy, tuple((int(u), int(v)) for u, v in chosen), (gh, gw))


@dataclass(frozen=True, eq=False)
class DctBasis:
    resolution: tuple[int, int]
    scaled_indices: tuple[tuple[int, int], ...]
    images: np.ndarray  # (K, H_s, W_s)


def dct_image(u: int, v: int, h: int, w: int) -> np.ndarray:
    rows = np.cos(np.pi * u * (np.arange(h) + 0.5) / h)
    cols = np.cos(np.pi * v * (np.arange(w) + 0.5) / w)
    return np.outer(rows, cols)


def build_basis(freqs: FrequencySet, h: int, w: int) -> DctBasis:
    if h < 1 or w < 1:
        raise DimensionError(f"basis resolution must be positive, got {h}x{w}")
    gh, gw = freqs.base_grid
    scaled = tuple((min(u * h // gh, h - 1), min(v * w // gw, w - 1)) for u, v in freqs.indices)
    images = np.stack([dct_image(u, v, h, w) for u, v in scaled])
    return DctBasis((h, w), scaled, images)


def dct_coefficients(x: Tensor, basis: DctBasis) -> Tensor:
    """Project each channel onto the K basis images: ``(N,C,H,W) -> (N,C,K,1)``."""
    if x.ndim != 4 or tuple(x.shape[2:]) != basis.resolution:
        raise DimensionError(f"feature map {x.shape} does not match basis resolution {basis.resolution}")
    return spatial_project(x, basis.images)
