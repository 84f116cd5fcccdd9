"""Ensemble sub-decoding: chained task heads whose upsampled logits are summed.

Task order is region -> distance -> boundary. The forward stream feeds each
head the stage feature gated by the sigmoid of the previous pseudo
prediction; the backward stream accumulates upsampled pseudo predictions
from the last task down to the core one, so the core output is the sum of
all of them. Everything here is a logit; sigmoids appear only as attention.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ContractError
from .nn import Conv2d
from .tensor import Tensor

TASKS = ("region", "distance", "boundary")
FLOWS = ("ensemble", "parallel", "forward_only")


@dataclass
class TaskBundle:
    stage: int
    pseudo: list[Tensor]  # P^{s_0..s_L} at stage resolution
    final: list[Tensor]  # T^{s_0..s_L} at output resolution

    @property
    def core(self) -> Tensor:
        return self.final[0]

    @property
    def tasks(self) -> tuple[str, ...]:
        # chains longer than the named tasks get positional names
        return tuple(TASKS[l] if l < len(TASKS) else f"task{l}" for l in range(len(self.final)))

    def prediction(self, task: str) -> Tensor | None:
        try:
            return self.final[TASKS.index(task)]
        except (ValueError, IndexError):
            return None


def _check(heads, upscale: int) -> None:
    if len(heads) < 1:
        raise ContractError("E-SDM needs at least the core head")
    if upscale < 1:
        raise ContractError(f"upscale must be >= 1, got {upscale}")


def upsample(p: Tensor, upscale: int, mode: str = "bilinear") -> Tensor:
    h, w = p.shape[2:]
    return T.resample(p, mode, size=(h * upscale, w * upscale))


def forward_stream(y: Tensor, heads: list[Conv2d]) -> list[Tensor]:
    pseudo = [heads[0](y)]
    for head in heads[1:]:
        pseudo.append(head(T.mul_spatial(y, T.sigmoid(pseudo[-1]))))
    return pseudo


def backward_stream(ups: list[Tensor]) -> list[Tensor]:
    """``T_L = U_L`` and ``T_l = U_l + T_{l+1}`` down to ``l = 0``."""
    final = [None] * len(ups)
    final[-1] = ups[-1]
    for l in range(len(ups) - 2, -1, -1):
        final[l] = T.add(ups[l], final[l + 1])
    return final


def esdm_forward(y: Tensor, heads: list[Conv2d], upscale: int, stage: int = 0, mode: str = "bilinear") -> TaskBundle:
    _check(heads, upscale)
    pseudo = forward_stream(y, heads)
    ups = [upsample(p, upscale, mode) for p in pseudo]
    return TaskBundle(stage, pseudo, backward_stream(ups))


def esdm_forward_only(y: Tensor, heads: list[Conv2d], upscale: int, stage: int = 0, mode: str = "bilinear") -> TaskBundle:
    _check(heads, upscale)
    pseudo = forward_stream(y, heads)
    return TaskBundle(stage, pseudo, [upsample(p, upscale, mode) for p in pseudo])


def esdm_parallel(y: Tensor, heads: list[Conv2d], upscale: int, stage: int = 0, mode: str = "bilinear") -> TaskBundle:
    _check(heads, upscale)
    pseudo = [head(y) for head in heads]
    return TaskBundle(stage, pseudo, [upsample(p, upscale, mode) for p in pseudo])


_DISPATCH = {"ensemble": esdm_forward, "parallel": esdm_parallel, "forward_only": esdm_forward_only}


def run_flow(flow: str, y: Tensor, heads: list[Conv2d], upscale: int, stage: int = 0, mode: str = "bilinear") -> TaskBundle:
    try:
        fn = _DISPATCH[flow]
    except KeyError:
        raise ContractError(f"unknown decoding flow {flow!r}; expected one of {FLOWS}") from None
    return fn(y, heads, upscale, stage, mode)


def esdm_multilabel(
    y: Tensor,
    heads: list[list[Conv2d]],
    upscale: int,
    stage: int = 0,
    flow: str = "ensemble",
    mode: str = "bilinear",
) -> list[TaskBundle]:
    """One independent head chain per label, all reading the same stage feature."""
    if len(heads) < 1:
        raise ContractError("multi-label E-SDM needs M >= 1 label chains")
    return [run_flow(flow, y, chain, upscale, stage, mode) for chain in heads]
