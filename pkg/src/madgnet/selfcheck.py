"""Quick internal consistency checks run by ``madgnet selfcheck``.

Each check returns ``(name, passed, detail)``. They are small versions of the
test-suite oracles: finite-difference gradients, the ensemble identity, the
DCT projection against a double sum and the alpha = beta collapse of MSSA.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .esdm import esdm_forward, forward_stream, upsample
from .freq import build_basis, dct_coefficients, select_frequencies
from .losses import GroundTruthSet, network_loss
from .mfmsa import MfmsaConfig, MFMSABlock
from .network import MADGNet, NetworkConfig
from .nn import Conv2d
from .tensor import Tensor, no_grad


def relative_error(analytic: float, numeric: float) -> float:
    """``|a - n| / max(1, |a|)``: relative for large gradients, absolute for small ones."""
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def finite_difference(loss_fn, param: Tensor, index, eps: float) -> float:
    old = param.data[index]
    param.data[index] = old + eps
    up = loss_fn()
    param.data[index] = old - eps
    down = loss_fn()
    param.data[index] = old
    return (up - down) / (2 * eps)


def small_network(size: int = 32, seed: int = 0) -> MADGNet:
    mf = MfmsaConfig(C=16, C_min=4, r=4, K=4)
    cfg = NetworkConfig(input_size=(size, size), widths=(4, 4, 8, 8, 8), c_e=16, mfmsa=mf)
    return MADGNet(cfg, seed=seed)


def check_gradients(n_probe: int = 24, seed: int = 0, eps: float = 1e-5, tol: float = 1e-6):
    rng = np.random.default_rng(seed)
    net = small_network(seed=seed)
    x = Tensor(rng.random((1, 3, 32, 32)))
    region = np.zeros((1, 1, 32, 32))
    region[0, 0, 8:22, 10:26] = 1.0
    gts = [GroundTruthSet.from_region(region)]

    def loss_value() -> float:
        with no_grad():
            return network_loss(net(x), gts).item()

    loss = network_loss(net(x), gts)
    net.zero_grad()
    T.backward(loss)
    named = list(net.named_parameters())
    worst = 0.0
    for _ in range(n_probe):
        name, p = named[int(rng.integers(len(named)))]
        idx = tuple(int(rng.integers(n)) for n in p.shape)
        worst = max(worst, relative_error(float(p.grad[idx]), finite_difference(loss_value, p, idx, eps)))
    return "gradients", worst < tol, f"max relative error {worst:.3g} over {n_probe} probes"


def check_ensemble(n_seeds: int = 10):
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        y = Tensor(rng.standard_normal((1, 4, 4, 4)))
        heads = [Conv2d(4, 1, 1, rng) for _ in range(3)]
        with no_grad():
            bundle = esdm_forward(y, heads, 4)
            ups = [upsample(p, 4) for p in forward_stream(y, heads)]
            # summed last-to-first, as the recursion associates
            direct = ups[-1].data.copy()
            for u in reversed(ups[:-1]):
                direct = direct + u.data
        if not np.array_equal(bundle.core.data, direct):
            return "ensemble", False, f"seed {seed}: recursive and direct sums differ"
    return "ensemble", True, f"{n_seeds} seeds bit-exact"


def check_dct(seed: int = 0):
    rng = np.random.default_rng(seed)
    freqs = select_frequencies("low", 4)
    x = rng.standard_normal((1, 2, 8, 8))
    with no_grad():
        got = dct_coefficients(Tensor(x), build_basis(freqs, 8, 8)).data
    basis = build_basis(freqs, 8, 8)
    worst = 0.0
    for k, (u, v) in enumerate(basis.scaled_indices):
        for c in range(2):
            ref = 0.0
            for h in range(8):
                for w in range(8):
                    ref += x[0, c, h, w] * np.cos(np.pi * u * (h + 0.5) / 8) * np.cos(np.pi * v * (w + 0.5) / 8)
            worst = max(worst, abs(got[0, c, k, 0] - ref))
    return "dct", bool(worst < 1e-12), f"max abs error {worst:.3g}"


def check_mssa_collapse(redraws: int = 5, seed: int = 0):
    rng = np.random.default_rng(seed)
    cfg = MfmsaConfig(C=8, C_min=2, r=2, K=4, S=2)
    block = MFMSABlock(cfg, rng)
    for br in block.branches:
        br.alpha.data[...] = 0.7
        br.beta.data[...] = 0.7
    x = Tensor(rng.standard_normal((1, 8, 16, 16)))
    with no_grad():
        ref = block(x).data
        worst = 0.0
        for _ in range(redraws):
            for br in block.branches:
                br.fg.weight.data = rng.standard_normal(br.fg.weight.shape)
                br.fg.bias.data = rng.standard_normal(br.fg.bias.shape)
            worst = max(worst, float(np.abs(block(x).data - ref).max()))
    return "mssa_collapse", worst < 1e-12, f"max abs difference {worst:.3g}"


CHECKS = (check_gradients, check_ensemble, check_dct, check_mssa_collapse)


def run_all() -> list[tuple[str, bool, str]]:
    return [check() for check in CHECKS]
