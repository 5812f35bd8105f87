"""The four spectrum-edit policies and their application to a decomposition.

Every policy maps a sensitivity profile to a per-component scaling vector
alpha; the edited spectrum is alpha * sigma followed by magnitude control.
Bases are never touched, so edits cannot leave the learned subspace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import expit

from spectral_surgeon._fnv import fnv1a_str
from spectral_surgeon.adapter_io import ModuleEditRecord
from spectral_surgeon.sensitivity import SensitivityProfile
from spectral_surgeon.spectral import (
    MagnitudeControlConfig,
    SpectralUpdate,
    apply_magnitude_control,
)

POLICIES = ("abs_select", "smooth_abs", "random_index", "grad_direction")

# Relative spread below which smooth_abs skips shaping entirely.
DEGENERATE_RANGE_TOL = 1e-8


@dataclass(frozen=True)
class EditPolicyConfig:
    policy: str = "smooth_abs"
    core_frac: float = 0.2
    noise_frac: float = 0.2
    min_core_k: int = 1
    amp_factor: float = 1.25
    sup_factor: float = 0.80
    mid_factor: float = 1.0
    smooth_temperature: float = 0.35
    smooth_center_q: float = 0.5
    smooth_align_mid: bool = False
    eta_suppress: float = 2.0
    eta_enhance: float = 0.2
    eta: float = 0.5
    asymmetric_update: bool = True
    grad_power: float = 1.0
    seed: int = 0
    magnitude: MagnitudeControlConfig = field(default_factory=MagnitudeControlConfig)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy '{self.policy}'")
        if not 0.0 <= self.core_frac <= 1.0 or not 0.0 <= self.noise_frac <= 1.0:
            raise ValueError("core_frac and noise_frac must lie in [0, 1]")
        if self.min_core_k < 0:
            raise ValueError("min_core_k must be nonnegative")
        if self.smooth_temperature <= 0:
            raise ValueError("smooth_temperature must be positive")
        if not 0.0 < self.smooth_center_q < 1.0:
            raise ValueError("smooth_center_q must lie in (0, 1)")
        if self.grad_power < 0:
            raise ValueError("grad_power must be nonnegative")
        for name in ("amp_factor", "sup_factor", "mid_factor"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "magnitude"}
        d["sigma_clip_min"] = self.magnitude.sigma_clip_min
        d["energy_mode"] = self.magnitude.energy_mode
        return d


def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def selection_counts(r: int, p: float, q: float, k_min: int) -> tuple[int, int]:
    """Core/noise set sizes: k_core = min(r, max(round(r*p), k_min)),
    k_noise = min(r - k_core, round(r*q)), rounding half away from zero."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    k_core = min(r, max(_round_half_away(r * p), k_min))
    k_noise = min(r - k_core, _round_half_away(r * q))
    return k_core, max(k_noise, 0)


def _three_level(r: int, core: np.ndarray, noise: np.ndarray, cfg: EditPolicyConfig) -> np.ndarray:
    alpha = np.full(r, cfg.mid_factor, dtype=np.float64)
    alpha[core] = cfg.amp_factor
    alpha[noise] = cfg.sup_factor
    return alpha


def alpha_abs_select(x: np.ndarray, cfg: EditPolicyConfig) -> tuple[np.ndarray, tuple[str, ...]]:
    """Hard selection: the k_core largest x get amp_factor, the k_noise
    smallest get sup_factor, the rest mid_factor. Ties break toward the
    lower index; the noise set is drawn from the complement of the core set.
    A degenerate (all-zero) profile disables shaping: alpha = mid_factor."""
    x = np.asarray(x, dtype=np.float64)
    r = x.shape[0]
    if not np.any(x):
        return np.full(r, cfg.mid_factor), ("degenerate_profile",)
    k_core, k_noise = selection_counts(r, cfg.core_frac, cfg.noise_frac, cfg.min_core_k)
    descending = np.argsort(-x, kind="stable")
    core = descending[:k_core]
    ascending = np.argsort(x, kind="stable")
    core_set = set(core.tolist())
    noise = np.array(
        [i for i in ascending if i not in core_set][:k_noise], dtype=np.intp
    )
    return _three_level(r, core, noise, cfg), ()


def _quantile(x: np.ndarray, q: float) -> float:
    # linear interpolation at index position (n-1)*q on the sorted values
    return float(np.quantile(x, q))


def alpha_smooth_abs(x: np.ndarray, cfg: EditPolicyConfig) -> tuple[np.ndarray, tuple[str, ...]]:
    """Continuous reweighting: a sigmoid gate between sup_factor and
    amp_factor, centered at the smooth_center_q quantile with temperature
    proportional to the (noise_frac, 1 - core_frac) quantile range."""
    x = np.asarray(x, dtype=np.float64)
    r = x.shape[0]
    flags: list[str] = []

    x_max, x_min = float(x.max()), float(x.min())
    if x_max - x_min < DEGENERATE_RANGE_TOL * max(1.0, x_max):
        return np.full(r, cfg.mid_factor), ("degenerate_range",)

    q_lo, q_hi = cfg.noise_frac, 1.0 - cfg.core_frac
    if q_hi <= q_lo:
        q_lo, q_hi = 0.25, 0.75
    tau = cfg.smooth_temperature * (_quantile(x, q_hi) - _quantile(x, q_lo))
    if tau <= 0.0:
        return np.full(r, cfg.mid_factor), ("degenerate_range",)

    mu = _quantile(x, cfg.smooth_center_q)
    span = cfg.amp_factor - cfg.sup_factor
    if cfg.smooth_align_mid:
        ratio = (cfg.mid_factor - cfg.sup_factor) / span if span != 0.0 else math.nan
        if 0.0 < ratio < 1.0:
            mu -= tau * math.log(ratio / (1.0 - ratio))
        else:
            flags.append("align_mid_ignored")

    alpha = cfg.sup_factor + span * expit((x - mu) / tau)
    return alpha, tuple(flags)


def _module_rng(seed: int, module_path: str) -> Generator:
    """Counter-based stream keyed by (seed, module path hash): per-module
    draws are reproducible regardless of edit order or parallelism."""
    key = ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | fnv1a_str(module_path)
    return Generator(Philox(key=key))


def alpha_random_index(r: int, cfg: EditPolicyConfig, module_path: str) -> tuple[np.ndarray, tuple[str, ...]]:
    """Matched-random control: same (k_core, k_noise) as abs_select but
    indices drawn uniformly without replacement, so the alpha multiset is
    identical while sensitivity targeting is removed."""
    if r < 1:
        raise ValueError(f"r must be >= 1, got {r}")
    k_core, k_noise = selection_counts(r, cfg.core_frac, cfg.noise_frac, cfg.min_core_k)
    perm = _module_rng(cfg.seed, module_path).permutation(r)
    return _three_level(r, perm[:k_core], perm[k_core : k_core + k_noise], cfg), ()


def alpha_grad_direction(g_tilde: np.ndarray, cfg: EditPolicyConfig) -> tuple[np.ndarray, tuple[str, ...]]:
    """Signed multiplicative update alpha = exp(-g_eff). Asymmetric mode
    penalizes positive sensitivities with eta_suppress (optionally powered)
    and rewards negative ones with eta_enhance; symmetric mode uses the
    single step size eta."""
    g_tilde = np.asarray(g_tilde, dtype=np.float64)
    if not np.isfinite(g_tilde).all():
        raise ValueError("g_tilde must be finite")
    if cfg.asymmetric_update:
        g_pos = np.maximum(g_tilde, 0.0)
        g_neg = np.minimum(g_tilde, 0.0)
        # guard 0**0: a zero positive part must contribute nothing
        powered = np.where(g_pos > 0.0, np.power(g_pos, cfg.grad_power), 0.0)
        g_eff = cfg.eta_suppress * powered + cfg.eta_enhance * g_neg
    else:
        g_eff = cfg.eta * g_tilde
    return np.exp(-g_eff), ()


def compute_alpha(
    spec: SpectralUpdate, profile: SensitivityProfile, cfg: EditPolicyConfig
) -> tuple[np.ndarray, tuple[str, ...]]:
    if cfg.policy == "abs_select":
        return alpha_abs_select(profile.x_normalized, cfg)
    if cfg.policy == "smooth_abs":
        return alpha_smooth_abs(profile.x_normalized, cfg)
    if cfg.policy == "random_index":
        return alpha_random_index(spec.rank, cfg, spec.module_path)
    if cfg.policy == "grad_direction":
        return alpha_grad_direction(profile.g_tilde, cfg)
    raise ValueError(f"unknown policy '{cfg.policy}'")


def _energy_ratio(sigma_ref: np.ndarray, sigma: np.ndarray) -> float:
    ref = float(sigma_ref.sum())
    cur = float(sigma.sum())
    if ref > 0.0:
        return cur / ref
    return 0.0 if cur == 0.0 else math.inf


def apply_alpha(
    spec: SpectralUpdate,
    alpha: np.ndarray,
    magnitude: MagnitudeControlConfig,
) -> tuple[SpectralUpdate, np.ndarray, tuple[str, ...]]:
    """Scale the spectrum by alpha and run magnitude control; returns the
    edited update, the clipped pre-renormalization spectrum, and flags."""
    sigma_edited = np.asarray(alpha, dtype=np.float64) * spec.sigma
    clipped = np.maximum(sigma_edited, magnitude.sigma_clip_min)
    sigma_final, flags = apply_magnitude_control(spec.sigma, sigma_edited, magnitude)
    return spec.with_sigma(sigma_final), clipped, flags


def apply_edit(
    spec: SpectralUpdate, profile: SensitivityProfile, cfg: EditPolicyConfig
) -> tuple[SpectralUpdate, ModuleEditRecord]:
    """Full per-module edit: policy alpha, sigma' = alpha * sigma, magnitude
    control. U and V are carried over unchanged (same array objects)."""
    if profile.rank != spec.rank:
        raise ValueError(
            f"rank mismatch for '{spec.module_path}': decomposition r={spec.rank}, "
            f"profile r={profile.rank}"
        )
    if profile.module_path and profile.module_path != spec.module_path:
        raise ValueError(
            f"module mismatch: decomposition '{spec.module_path}' vs "
            f"profile '{profile.module_path}'"
        )
    alpha, flags = compute_alpha(spec, profile, cfg)
    edited, clipped, mag_flags = apply_alpha(spec, alpha, cfg.magnitude)

    k_core = k_noise = None
    if cfg.policy in ("abs_select", "random_index"):
        k_core, k_noise = selection_counts(
            spec.rank, cfg.core_frac, cfg.noise_frac, cfg.min_core_k
        )
    record = ModuleEditRecord(
        module_path=spec.module_path,
        alpha=alpha,
        sigma_pre=spec.sigma,
        sigma_post=edited.sigma,
        energy_ratio_pre_renorm=_energy_ratio(spec.sigma, clipped),
        energy_ratio=_energy_ratio(spec.sigma, edited.sigma),
        warnings=flags + mag_flags,
        k_core=k_core,
        k_noise=k_noise,
    )
    return edited, record
