"""EDM-style preconditioning, training-noise sampling, and sigma schedules.

Two preconditioning variants are provided:

  * "edm": c_in = 1/sqrt(sigma^2+1), c_out = -sigma/sqrt(sigma^2+1),
    c_noise = 0.25*ln(sigma).  For c_skip the bounded form 1/(sigma^2+1)
    is the default; a "verbatim" mode uses (sigma^2+1) instead, which grows
    without bound with sigma — it is kept selectable purely so the exact
    printed variant stays reproducible, but it contradicts the boundary
    behaviour every other coefficient implies, so it is off by default.
  * "sd": c_skip = 1, c_out = -sigma, c_in = 1/sqrt(sigma^2+1), c_noise is
    a table index — the largest index j whose table sigma_j does not exceed
    sigma (clamped at the table ends).

The loss weight lambda(sigma) = (1+sigma^2)/sigma^2 satisfies
lambda * c_out^2 = 1 for the edm variant, which keeps the effective
regression target of the raw network unit-scale at every noise level.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


@dataclass(frozen=True)
class NoiseDistribution:
    p_mean: float = 0.7
    p_std: float = 1.6

    def __post_init__(self):
        if self.p_std <= 0:
            raise ValueError("p_std must be positive")


@dataclass(frozen=True)
class SigmaSchedule:
    sigmas: np.ndarray  # strictly decreasing, final entry 0
    kind: str           # "edm" | "ddpm-table"

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s[-1] != 0.0:
            raise ValueError("schedule must end at sigma=0")
        if np.any(np.diff(s) >= 0):
            raise ValueError("schedule must be strictly decreasing")
        if not np.all(np.isfinite(s)):
            raise ValueError("schedule contains non-finite sigma")
        object.__setattr__(self, "sigmas", s)

    @property
    def num_steps(self) -> int:
        return len(self.sigmas) - 1


# ----------------------------------------------------------------------------
# preconditioning

def precondition_edm(sigma: float, skip_mode: str = "bounded") -> PreconditionCoeffs:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    s2 = sigma * sigma
    if skip_mode == "bounded":
        c_skip = 1.0 / (s2 + 1.0)
    elif skip_mode == "verbatim":
        c_skip = s2 + 1.0
    else:
        raise ValueError(f"unknown skip_mode {skip_mode!r}")
    c_out = -sigma / math.sqrt(s2 + 1.0)
    c_in = 1.0 / math.sqrt(s2 + 1.0)
    c_noise = 0.25 * math.log(sigma)
    return PreconditionCoeffs(c_skip, c_out, c_in, c_noise)


def sd_sigma_table(n: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2) -> np.ndarray:
    """1000-entry ascending sigma table from a scaled-linear beta schedule."""
    betas = (np.sqrt(beta_start) + np.arange(n) / (n - 1) * (np.sqrt(beta_end) - np.sqrt(beta_start))) ** 2
    alpha_bar = np.cumprod(1.0 - betas)
    return np.sqrt((1.0 - alpha_bar) / alpha_bar)


def precondition_sd(sigma: float, sigma_table: np.ndarray) -> PreconditionCoeffs:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    table = np.asarray(sigma_table, dtype=np.float64)
    if table.size == 0:
        raise ValueError("empty sigma table")
    # nearest-below index: largest j with sigma_j <= sigma, clamped to [0, n-1]
    j = int(np.searchsorted(table, sigma, side="right")) - 1
    j = min(max(j, 0), len(table) - 1)
    return PreconditionCoeffs(c_skip=1.0, c_out=-sigma, c_in=1.0 / math.sqrt(sigma * sigma + 1.0),
                              c_noise=float(j))


# ----------------------------------------------------------------------------
# training-noise distribution and loss weighting

def sample_training_sigma(rng: np.random.Generator, dist: NoiseDistribution = NoiseDistribution(),
                          size=None):
    """sigma = exp(g), g ~ Normal(p_mean, p_std^2)."""
    return np.exp(rng.normal(dist.p_mean, dist.p_std, size=size))


def loss_weight(sigma: float) -> float:
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    return (1.0 + sigma * sigma) / (sigma * sigma)


def shift_sigma_for_views(sigma, n_targets: int):
    """Lower the log-SNR by log(n_targets): sigma -> sigma * sqrt(n_targets).

    SNR is proportional to 1/sigma^2, so dividing SNR by N multiplies sigma
    by sqrt(N).  Used when N target frames are denoised jointly.
    """
    if n_targets < 1:
        raise ValueError("n_targets must be >= 1")
    return sigma * math.sqrt(n_targets)


# ----------------------------------------------------------------------------
# discretizations

def edm_discretization(steps: int, sigma_min: float = 0.002, sigma_max: float = 700.0,
                       rho: float = 7.0) -> SigmaSchedule:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (0 < sigma_min < sigma_max):
        raise ValueError("need 0 < sigma_min < sigma_max")
    if steps == 1:
        s = np.array([sigma_max])
    else:
        i = np.arange(steps, dtype=np.float64)
        s = (sigma_max ** (1 / rho) + i / (steps - 1) * (sigma_min ** (1 / rho) - sigma_max ** (1 / rho))) ** rho
    return SigmaSchedule(np.append(s, 0.0), kind="edm")


def ddpm_discretization(steps: int, sigma_table: Optional[np.ndarray] = None) -> SigmaSchedule:
    """Uniformly strided descending subsample of the table, 0 appended.

    stride = len(table) // steps; indices run len-1, len-1-stride, ...
    (steps=50 on the 1000-entry table gives 999, 979, ..., 19).
    """
    table = sd_sigma_table() if sigma_table is None else np.asarray(sigma_table, dtype=np.float64)
    if steps > len(table):
        raise ValueError("steps exceeds table length")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    stride = len(table) // steps
    idx = len(table) - 1 - stride * np.arange(steps)
    return SigmaSchedule(np.append(table[idx], 0.0), kind="ddpm-table")


def format_schedule(sched: SigmaSchedule) -> str:
    """Text table (index, sigma) for golden-file comparisons."""
    lines = [f"# kind={sched.kind} steps={sched.num_steps}"]
    for i, s in enumerate(sched.sigmas):
        lines.append(f"{i:4d} {s:.12g}")
    return "\n".join(lines) + "\n"
