"""Dataset profiling (scale and frequency statistics) and the parameter census report."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Manifest, load_sample
from .errors import ContractError
from .mfmsa import MfmsaConfig, param_count

log = logging.getLogger(__name__)

HIGH_CUTOFF = 0.25  # cycles/sample: half the Nyquist radius
RATIO_TOLERANCE = 0.02


def scale_statistic(mask) -> float:
    m = np.asarray(mask)
    if m.size == 0:
        return 0.0
    return np.count_nonzero(m) / m.size


def frequency_statistic(image, cutoff: float = HIGH_CUTOFF) -> float:
    """Share of non-DC spectral power at radial frequency above ``cutoff``.

    Colour images (C,H,W) are reduced to their channel mean first.
    """
    g = np.asarray(image, dtype=np.float64)
    if g.ndim == 3:
        g = g.mean(axis=0)
    if g.ndim != 2:
        raise ContractError(f"expected a 2-D image, got shape {g.shape}")
    power = np.abs(np.fft.fft2(g)) ** 2
    power[0, 0] = 0.0
    total = power.sum()
    power[power < 1e-20 * total] = 0.0  # round-off leakage
    # constant images (and float residue of them) have no AC content
    if total <= 1e-20 * max(1.0, float(np.sum(g * g))) * g.size:
        return 0.0
    fy = np.fft.fftfreq(g.shape[0])[:, None]
    fx = np.fft.fftfreq(g.shape[1])[None, :]
    high = np.hypot(fy, fx) > cutoff
    return float(power[high].sum() / total)


# ---------------------------------------------------------------------------
# dataset profile


@dataclass
class ProfileRow:
    sample_id: str
    scale: float
    frequency: float


@dataclass
class DatasetProfile:
    rows: list[ProfileRow] = field(default_factory=list)
    skipped: int = 0

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    @property
    def scale_mean(self) -> float:
        return float(self._column("scale").mean()) if self.rows else math.nan

    @property
    def scale_var(self) -> float:
        return float(self._column("scale").var()) if self.rows else math.nan

    @property
    def frequency_mean(self) -> float:
        return float(self._column("frequency").mean()) if self.rows else math.nan

    @property
    def frequency_var(self) -> float:
        return float(self._column("frequency").var()) if self.rows else math.nan

    def to_text(self) -> str:
        lines = ["id\tscale\tfrequency"]
        lines += [f"{r.sample_id}\t{r.scale!r}\t{r.frequency!r}" for r in self.rows]
        # summary lines are comments so plotting tools can skip them
        lines.append(f"# mean\t{self.scale_mean!r}\t{self.frequency_mean!r}")
        lines.append(f"# variance\t{self.scale_var!r}\t{self.frequency_var!r}")
        lines.append(f"# skipped\t{self.skipped}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def profile_dataset(manifest: Manifest, cutoff: float = HIGH_CUTOFF) -> DatasetProfile:
    """Scale/frequency scatter at native resolution; unreadable samples are skipped."""
    prof = DatasetProfile()
    for img_path, mask_path in manifest.pairs:
        try:
            s = load_sample(img_path, mask_path)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", img_path, exc)
            prof.skipped += 1
            continue
        prof.rows.append(ProfileRow(s.sample_id, scale_statistic(s.region), frequency_statistic(s.image, cutoff)))
    return prof


# ---------------------------------------------------------------------------
# parameter census report


@dataclass(frozen=True)
class ParamRow:
    C: int
    r: int
    gamma: float
    s: int
    counted: int
    closed_form: float
    ratio: float
    gamma_power: float
    clamped: bool


@dataclass
class ParamReport:
    rows: list[ParamRow]
    sums: list[tuple[int, float, int, float, float, bool]]  # (C, gamma, S, ratio sum, geometric sum, clamped)
    failures: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        out = ["C\tr\tgamma\ts\tcounted\tclosed_form\tratio\tgamma^(s-1)\tclamped"]
        for r in self.rows:
            out.append(f"{r.C}\t{r.r}\t{r.gamma:g}\t{r.s}\t{r.counted}\t{r.closed_form:.6g}\t"
                       f"{r.ratio:.6f}\t{r.gamma_power:.6f}\t{'yes' if r.clamped else 'no'}")
        for c, g, s, ratio_sum, geo, clamped in self.sums:
            if clamped:
                flag = "not comparable, clamped branches"
            else:
                flag = "within 2%" if abs(ratio_sum - geo) <= RATIO_TOLERANCE * geo else "NOT within 2%"
            out.append(f"# sum C={c} gamma={g:g} S={s}: ratio sum {ratio_sum:.6f}, "
                       f"sum gamma^(s-1) = {geo:g} ({flag})")
        for f in self.failures:
            out.append(f"# FAIL {f}")
        return "\n".join(out) + "\n"


def param_report(configs: Iterable[MfmsaConfig]) -> ParamReport:
    """Census rows for each config, checking the closed form wherever no clamp applies.

    Checks: counted == closed form on unclamped branches, p_2/p_1 within 2% of
    gamma, and the geometric sum equal to the sum of gamma powers.
    """
    rows, sums, failures = [], [], []
    for cfg in configs:
        census = param_count(cfg)
        for b in census.rows:
            exact = cfg.reduced_channels(b.s)
            clamped = exact < cfg.C_min or exact != int(exact) or exact / cfg.r != int(exact / cfg.r)
            rows.append(ParamRow(cfg.C, cfg.r, cfg.gamma, b.s, b.counted, b.closed_form, b.ratio, b.gamma_power, clamped))
            if not clamped and b.counted != b.closed_form:
                failures.append(f"C={cfg.C} s={b.s}: counted {b.counted} != closed form {b.closed_form}")
        unclamped = [r for r in rows[-len(census.rows):] if not r.clamped]
        if len(unclamped) >= 2 and unclamped[1].s == 2:
            if abs(unclamped[1].ratio / unclamped[0].ratio - cfg.gamma) > RATIO_TOLERANCE * cfg.gamma:
                failures.append(f"C={cfg.C}: p2/p1 not within 2% of gamma")
        powers = sum(cfg.gamma ** (s - 1) for s in range(1, cfg.S + 1))
        if not math.isclose(powers, census.geometric_sum, rel_tol=1e-12):
            failures.append(f"C={cfg.C}: geometric sum {census.geometric_sum} != {powers}")
        any_clamped = len(unclamped) < len(census.rows)
        sums.append((cfg.C, cfg.gamma, cfg.S, census.ratio_sum, census.geometric_sum, any_clamped))
    return ParamReport(rows, sums, failures)


def sweep(base: MfmsaConfig, Cs: Sequence[int] = (), gammas: Sequence[float] = (), rs: Sequence[int] = ()) -> list[MfmsaConfig]:
    """Cartesian sweep around ``base``; empty axes keep the base value."""
    out = []
    for c in Cs or (base.C,):
        for g in gammas or (base.gamma,):
            for r in rs or (base.r,):
                out.append(replace(base, C=c, gamma=g, r=r, C_min=min(base.C_min, c)))
    return out
