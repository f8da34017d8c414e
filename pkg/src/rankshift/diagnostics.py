"""Spectral and cost telemetry."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ParameterError
from .layers import Layer, effective_weight, unfold_kernel
from .linalg import as_tensor, default_rel_tol, svd, singular_values

INF = math.inf
# lambda is reported as infinite once sigma_min falls to this fraction of sigma_max
LAMBDA_CUTOFF = 1e-6


class Spectrum(NamedTuple):
    lam: float
    sigmas: np.ndarray
    empty: bool


def spectral_ratio(W, fold: str = "hwc_f") -> Spectrum:
    """``sigma_max / sigma_min`` of a weight's 2-D unfolding.

    Returns ``inf`` when ``sigma_min <= sigma_max * 1e-6``. A zero weight
    gives ``inf`` with ``empty=True`` and no singular values.
    """
    M = unfold_kernel(as_tensor(W, (2, 4), "W"), fold)
    s = singular_values(M)
    if s[0] == 0.0:
        return Spectrum(INF, np.empty(0), True)
    if s[-1] <= s[0] * LAMBDA_CUTOFF:
        return Spectrum(INF, s, False)
    return Spectrum(float(s[0] / s[-1]), s, False)


def effective_rank(sigmas: np.ndarray, shape) -> int:
    if len(sigmas) == 0 or sigmas[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigmas > default_rel_tol(shape) * sigmas[0]))


def layer_spectrum(layer: Layer, fold: str = "hwc_f") -> dict:
    W = effective_weight(layer)
    M = unfold_kernel(W, fold)
    spec = spectral_ratio(M)
    return {
        "lambda": spec.lam,
        "empty": spec.empty,
        "effective_rank": effective_rank(spec.sigmas, M.shape),
        "sigmas": spec.sigmas.tolist(),
        "shape": list(M.shape),
        "mode": layer.mode,
    }


@dataclass(frozen=True)
class ComputeBudget:
    d: int
    d_low: int
    E: int
    I: int
    D: int
    T_F: float
    T_low: float
    T_DR: float

    @property
    def comp_ratio(self) -> float:
        return self.T_DR / self.T_F

    @property
    def phi(self) -> float:
        return (self.D - self.I) / self.E

    def to_dict(self) -> dict:
        out = asdict(self)
        out["comp_ratio"] = self.comp_ratio
        out["phi"] = self.phi
        return out


def compute_budget(d: int, d_low: int, E: int, I: int | None = None, D: int | None = None) -> ComputeBudget:
    """Parameter-epoch cost of full, low-rank and dynamic-rank training.

    A missing ``I`` with a missing ``D`` means pure low-rank training. A
    missing ``D`` means full rank from ``I`` to the end (``D = E + 1``); a
    missing ``I`` means full rank from the first epoch (``I = 1``).
    """
    problems = []
    if d <= 0 or d_low <= 0:
        problems.append("parameter counts must be positive")
    if E <= 0:
        problems.append("E must be positive")
    if I is None and D is None:
        I = D = 1
    elif D is None:
        D = E + 1
    elif I is None:
        I = 1
    if I < 0 or D < I:
        problems.append(f"need 0 <= I <= D, got I={I}, D={D}")
    if E > 0 and D - I > E:
        problems.append(f"full-rank window D-I={D - I} exceeds E={E}")
    if problems:
        raise ConfigError(problems)
    window = D - I
    return ComputeBudget(
        d=d, d_low=d_low, E=E, I=I, D=D,
        T_F=float(E * d),
        T_low=float(E * d_low),
        T_DR=float(window * d + (E - window) * d_low),
    )


def tail_reconstruction_heatmap(W, n_tail: int, fold: str = "hwc_f") -> np.ndarray:
    """Sum of the ``n_tail`` smallest singular triplets of the unfolded weight."""
    M = unfold_kernel(as_tensor(W, (2, 4), "W"), fold)
    p = min(M.shape)
    if not 0 <= n_tail <= p:
        raise ParameterError(f"n_tail must be in [0, {p}], got {n_tail}")
    if n_tail == 0:
        return np.zeros_like(M)
    U, S, V = svd(M)
    sl = slice(p - n_tail, p)
    return (U[:, sl] * S[sl]) @ V[:, sl].T


def head_reconstruction(W, n_head: int, fold: str = "hwc_f") -> np.ndarray:
    """Complement of :func:`tail_reconstruction_heatmap`: the ``n_head`` largest triplets."""
    M = unfold_kernel(as_tensor(W, (2, 4), "W"), fold)
    p = min(M.shape)
    if not 0 <= n_head <= p:
        raise ParameterError(f"n_head must be in [0, {p}], got {n_head}")
    U, S, V = svd(M)
    return (U[:, :n_head] * S[:n_head]) @ V[:, :n_head].T


def format_value(x: float) -> str:
    """Locale-free text for CSV cells; the infinite sentinel is ``inf``."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return repr(float(x))


def lambda_timeseries(runlog) -> tuple[list[str], list[list[float]]]:
    """Epochs x layers table of lambda values with infinities preserved."""
    n_layers = len(runlog.records[0].lambdas) if runlog.records else 0
    header = ["epoch"] + [f"lambda_{i}" for i in range(n_layers)]
    rows = [[r.epoch, *r.lambdas] for r in runlog.records]
    return header, rows
