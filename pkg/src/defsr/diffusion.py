"""Guided ancestral diffusion sampling with exact data consistency.

The reverse process is an ordinary DDPM chain with one modification:
before each posterior step the clean-image estimate x0 is rectified so
its observable component matches the measurement,

    x0_hat = A+ y + (I - A+ A) x0,

which leaves the final sample consistent with y by construction (the
last step returns the rectified estimate with no added noise).  Strided
step subsequences reuse the original schedule's cumulative products, so
a 50-step run and the full 1000-step run target the same marginals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .counters import bump
from .linop import LinearOperator
from .rng import make_rng

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_diffuse",
    "strided_steps",
    "SamplerConfig",
    "guided_reverse_step",
    "sample",
    "Denoiser",
    "OracleDenoiser",
    "ZeroDenoiser",
    "GaussianPriorDenoiser",
    "LearnedTinyDenoiser",
    "init_denoiser_params",
    "DENOISER_WIDTH",
]


# ---- noise schedule ----

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cached cumulative alpha products."""

    T: int
    betas: np.ndarray       # betas[i] is beta at t = i + 1
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        # alpha_bar(0) = 1 closes the posterior formulas at the last step
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside schedule range 1..{self.T}")


def build_schedule(T: int = 1000, beta_start: float = 1e-6, beta_end: float = 1e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"schedule length must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"beta endpoints must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def forward_diffuse(x0, t: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """Sample the forward marginal x_t = sqrt(ab) x0 + sqrt(1-ab) noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != image shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def strided_steps(T: int, steps_used: int) -> list[int]:
    """Descending timestep subsequence containing both T and 1."""
    if not 1 <= steps_used <= T:
        raise ValueError(f"steps_used must be in 1..{T}, got {steps_used}")
    if steps_used == 1:
        return [T] if T == 1 else [T, 1]
    seq = np.unique(np.rint(np.linspace(1, T, steps_used)).astype(int))
    return [int(t) for t in seq[::-1]]


# ---- denoisers ----

class Denoiser(Protocol):
    """Estimates the clean image x0 from a noisy iterate."""

    def estimate(self, x_t: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray: ...


class OracleDenoiser:
    """Always answers with a fixed target image (ground-truth probe)."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def estimate(self, x_t, t, schedule):
        x_t = np.asarray(x_t)
        if x_t.shape != self.target.shape:
            raise ValueError(f"oracle target shape {self.target.shape} != iterate shape {x_t.shape}")
        return self.target.copy()


class ZeroDenoiser:
    """Estimates x0 = 0; the sampler then returns pure range-space content."""

    def estimate(self, x_t, t, schedule):
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))


class GaussianPriorDenoiser:
    """Exact posterior mean under an isotropic Gaussian prior N(mu, sigma0^2 I).

    With x_t = sqrt(ab) x0 + sqrt(1-ab) eps the per-pixel posterior mean is

        E[x0 | x_t] = (sqrt(ab) sigma0^2 x_t + (1-ab) mu)
                      / (ab sigma0^2 + (1-ab)).
    """

    def __init__(self, mu, sigma0: float):
        if sigma0 <= 0:
            raise ValueError(f"sigma0 must be positive, got {sigma0}")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sigma0 = float(sigma0)

    def estimate(self, x_t, t, schedule):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != self.mu.shape:
            raise ValueError(f"prior mean shape {self.mu.shape} != iterate shape {x_t.shape}")
        ab = schedule.alpha_bar(t)
        v = self.sigma0 * self.sigma0
        return (np.sqrt(ab) * v * x_t + (1.0 - ab) * self.mu) / (ab * v + (1.0 - ab))


DENOISER_WIDTH = 32
_DENOISER_LAYERS = 6


def init_denoiser_params(rng, width: int = DENOISER_WIDTH) -> dict[str, np.ndarray]:
    """He-initialized weights for the six-layer conv x0 predictor."""
    params = {}
    chans = [4] + [width] * (_DENOISER_LAYERS - 1) + [3]
    for i in range(_DENOISER_LAYERS):
        c_in, c_out = chans[i], chans[i + 1]
        std = np.sqrt(2.0 / (9 * c_in))
        params[f"c{i}.w"] = rng.normal(0.0, std, size=(c_out, c_in, 3, 3))
        params[f"c{i}.b"] = np.zeros(c_out)
    return params


def denoiser_forward_torch(ptensors, x_t, noise_level):
    """Torch forward of the tiny denoiser; x_t is (B, 3, H, W).

    The timestep enters as one constant channel holding sqrt(1 - ab),
    the noise standard deviation at that step.
    """
    import torch
    import torch.nn.functional as F

    lvl = torch.as_tensor(noise_level, dtype=x_t.dtype).reshape(-1, 1, 1, 1)
    lvl = lvl.expand(x_t.shape[0], 1, x_t.shape[2], x_t.shape[3])
    h = torch.cat([x_t, lvl], dim=1)
    for i in range(_DENOISER_LAYERS):
        h = F.conv2d(h, ptensors[f"c{i}.w"], ptensors[f"c{i}.b"], padding=1)
        if i < _DENOISER_LAYERS - 1:
            h = F.silu(h)
    return h


class LearnedTinyDenoiser:
    """Six-layer conv net predicting x0 directly from (x_t, noise level)."""

    def __init__(self, params: dict[str, np.ndarray], precision: str = "double"):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.precision = precision
        self._tensors = None

    def estimate(self, x_t, t, schedule):
        import torch

        from ._torchutil import image_to_tensor, param_tensors, resolve_dtype, tensor_to_image

        dtype = resolve_dtype(self.precision)
        if self._tensors is None:
            self._tensors = param_tensors(self.params, dtype)
        x = image_to_tensor(np.asarray(x_t, dtype=np.float64), dtype)
        lvl = np.sqrt(1.0 - schedule.alpha_bar(t))
        with torch.no_grad():
            out = denoiser_forward_torch(self._tensors, x, lvl)
        return tensor_to_image(out)


# ---- guided reverse process ----

@dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule
    steps_used: int
    seed: int


def _rectify(x0_est: np.ndarray, y: np.ndarray, A: LinearOperator) -> np.ndarray:
    return A.pinv_apply(y) + x0_est - A.pinv_apply(A.apply(x0_est))


def guided_reverse_step(
    x_t,
    t: int,
    y,
    A: LinearOperator,
    D: Denoiser,
    schedule: NoiseSchedule,
    rng,
    t_prev: int | None = None,
) -> np.ndarray:
    """One ancestral step t -> t_prev with range-space replacement.

    ``t_prev`` defaults to t - 1; strided subsequences pass the next
    retained timestep.  With t_prev = 0 the rectified estimate itself is
    returned (zero posterior variance), which is the final output.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must be in [0, t), got t={t}, t_prev={t_prev}")
    if y.shape[:2] != A.out_shape:
        raise ValueError(f"observation shape {y.shape[:2]} != operator output {A.out_shape}")
    if x_t.shape[:2] != A.in_shape:
        raise ValueError(f"iterate shape {x_t.shape[:2]} != operator input {A.in_shape}")

    x0_hat = _rectify(D.estimate(x_t, t, schedule), y, A)

    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    alpha_eff = ab_t / ab_prev
    beta_eff = 1.0 - alpha_eff
    c0 = np.sqrt(ab_prev) * beta_eff / (1.0 - ab_t)
    ct = np.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * x0_hat + ct * x_t
    if var > 0.0:
        mean = mean + np.sqrt(var) * rng.standard_normal(x_t.shape)
    return mean


def sample(y, A: LinearOperator, D: Denoiser, cfg: SamplerConfig, clamp: bool = True) -> np.ndarray:
    """Run the guided reverse chain from pure noise down to t = 0.

    Returns the final image, clamped to [0, 1] unless ``clamp=False``
    (the raw value is what satisfies A x = y exactly).
    """
    bump("diffusion.sample")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[:2] != A.out_shape:
        raise ValueError(f"observation shape {y.shape} incompatible with operator output {A.out_shape}")
    rng = make_rng(cfg.seed)
    x = rng.standard_normal(A.in_shape + (y.shape[2],))
    seq = strided_steps(cfg.schedule.T, cfg.steps_used)
    for i, t in enumerate(seq):
        t_prev = seq[i + 1] if i + 1 < len(seq) else 0
        x = guided_reverse_step(x, t, y, A, D, cfg.schedule, rng, t_prev=t_prev)
    return np.clip(x, 0.0, 1.0) if clamp else x
