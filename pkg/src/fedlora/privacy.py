"""Client-level differential privacy for LoRA uploads.

Covers clipping, the Gaussian mechanism, the pseudo-inverse noise regulators
that map full-layer noise into a single factor, the linear/quadratic noise
split of a two-factor injection, and a Renyi-DP accountant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import frobenius_norm, pinv, sample_gaussian

RDP_ORDERS = np.arange(5, 2049) / 4.0  # 1.25, 1.5, ..., 512
SIGMA_BOUNDS = (1e-3, 1e6)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacySpec:
    """Gaussian-mechanism parameters for one federation.

    ``sigma`` is the noise multiplier; per-entry noise std is
    ``sigma * clip / sqrt(clients)``.
    """

    epsilon: float
    delta: float
    clip: float
    sigma: float
    clients: int
    rounds: int
    enabled: bool = True

    @property
    def noise_std(self) -> float:
        if not self.enabled:
            return 0.0
        return self.sigma * self.clip / math.sqrt(self.clients)

    @classmethod
    def calibrated(cls, epsilon: float, clip: float, clients: int, rounds: int,
                   delta: float | None = None) -> "PrivacySpec":
        delta = 1.0 / clients if delta is None else delta
        sigma = calibrate_sigma(epsilon, delta, rounds, clients)
        return cls(epsilon=epsilon, delta=delta, clip=clip, sigma=sigma,
                   clients=clients, rounds=rounds)

    @classmethod
    def disabled(cls, clients: int, rounds: int) -> "PrivacySpec":
        return cls(epsilon=math.inf, delta=1.0 / clients if clients > 1 else 0.5,
                   clip=1.0, sigma=0.0, clients=clients, rounds=rounds, enabled=False)


@dataclass(frozen=True)
class NoiseTrace:
    round: int
    layer: int
    norm_linear_B: float
    norm_linear_A: float
    norm_base: float
    norm_quadratic: float = 0.0
    phase: str = "TrainBoth"


def clip_update(delta, clip: float) -> np.ndarray:
    """Scale ``delta`` by ``min(1, clip / ||delta||_F)``."""
    if clip <= 0:
        raise ValueError(f"clip must be positive, got {clip}")
    delta = np.asarray(delta, dtype=np.float64)
    norm = frobenius_norm(delta)
    if norm <= clip:
        return delta.copy()
    return delta * (clip / norm)


def mechanism_noise(rows: int, cols: int, spec: PrivacySpec,
                    rng: np.random.Generator) -> np.ndarray:
    if not spec.enabled:
        raise ValueError("mechanism_noise called with a disabled PrivacySpec")
    return sample_gaussian(rows, cols, spec.noise_std, rng)


def regulate_for_B(xi_w, A) -> np.ndarray:
    """Noise for ``B`` whose image ``xi_B @ A`` best matches ``xi_w``."""
    xi_w = np.asarray(xi_w, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if xi_w.shape[1] != A.shape[1]:
        raise ValueError(f"xi_w {xi_w.shape} and A {A.shape} disagree on columns")
    return xi_w @ pinv(A)


def regulate_for_A(xi_w, B) -> np.ndarray:
    """Noise for ``A`` whose image ``B @ xi_A`` best matches ``xi_w``."""
    xi_w = np.asarray(xi_w, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if xi_w.shape[0] != B.shape[0]:
        raise ValueError(f"xi_w {xi_w.shape} and B {B.shape} disagree on rows")
    return pinv(B) @ xi_w


def noise_decomposition(B, A, xi_B, xi_A, alpha: float, r: int):
    """Split ``s[(B + xi_B)(A + xi_A) - BA]`` into its three additive terms.

    Returns ``(linear_B, linear_A, quadratic)`` = ``s xi_B A``, ``s B xi_A``,
    ``s xi_B xi_A`` with ``s = alpha / r``.
    """
    s = alpha / r
    B, A, xi_B, xi_A = (np.asarray(x, dtype=np.float64) for x in (B, A, xi_B, xi_A))
    if B.shape != xi_B.shape or A.shape != xi_A.shape or B.shape[1] != A.shape[0]:
        raise ValueError(
            f"inconsistent shapes: B {B.shape}, xi_B {xi_B.shape}, A {A.shape}, xi_A {xi_A.shape}"
        )
    return s * (xi_B @ A), s * (B @ xi_A), s * (xi_B @ xi_A)


def epsilon_of(sigma: float, delta: float, rounds: int, clients: int | None = None) -> float:
    """Epsilon of ``rounds``-fold Gaussian composition via RDP.

    ``clients`` is accepted for signature symmetry; the noise multiplier is
    already normalised to the mean so it does not enter the bound.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    eps = rounds * RDP_ORDERS / (2.0 * sigma * sigma) + math.log(1.0 / delta) / (RDP_ORDERS - 1.0)
    return float(eps.min())


def calibrate_sigma(epsilon: float, delta: float, rounds: int, clients: int | None = None,
                    rtol: float = 1e-4) -> float:
    """Smallest noise multiplier (to ``rtol``) whose epsilon is within budget."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    lo, hi = SIGMA_BOUNDS
    if epsilon_of(hi, delta, rounds) > epsilon:
        raise CalibrationError(
            f"epsilon={epsilon} unattainable with sigma <= {hi:g} "
            f"(delta={delta}, rounds={rounds})"
        )
    if epsilon_of(lo, delta, rounds) <= epsilon:
        return lo
    while hi / lo > 1.0 + rtol:
        mid = math.sqrt(lo * hi)
        if epsilon_of(mid, delta, rounds) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi
