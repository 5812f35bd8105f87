"""Thin SVD of LoRA updates and spectrum-space editing primitives.

The decomposition never materializes the dense d_out x d_in product: factor
B = Q_B R_B and A^T = Q_A R_A, SVD the r x r core, then rotate the Q bases.
Cost is O((d_out + d_in) r^2 + r^3).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from spectral_surgeon.adapter_io import FactorPair

ORTHO_TOL = 1e-10
RECON_TOL = 1e-10


class DecompositionError(ValueError):
    """SVD failure or invariant violation while decomposing an update."""


@dataclass(frozen=True)
class SpectralUpdate:
    """Thin SVD triple of one module's effective update scale * B @ A.

    u_basis (d_out x r) and v_basis (d_in x r) have orthonormal columns;
    sigma is nonnegative. Fresh decompositions are sorted nonincreasing;
    edited spectra may not be (the bases stay aligned to component order).
    """

    module_path: str
    u_basis: np.ndarray
    sigma: np.ndarray
    v_basis: np.ndarray
    scale: float

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    @property
    def d_out(self) -> int:
        return self.u_basis.shape[0]

    @property
    def d_in(self) -> int:
        return self.v_basis.shape[0]

    def with_sigma(self, sigma: np.ndarray) -> "SpectralUpdate":
        if sigma.shape != self.sigma.shape:
            raise ValueError("sigma length mismatch")
        return replace(self, sigma=np.asarray(sigma, dtype=np.float64))


def orthonormality_defect(basis: np.ndarray) -> float:
    """max-norm deviation of basis^T basis from the identity."""
    r = basis.shape[1]
    return float(np.abs(basis.T @ basis - np.eye(r)).max())


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    """Flip (u_k, v_k) pairs in place so each u_k's largest-|.| entry is positive."""
    lead = np.argmax(np.abs(u), axis=0)
    flip = u[lead, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0


def decompose(factors: FactorPair, scale: float, module_path: str = "") -> SpectralUpdate:
    """Thin SVD of scale * B @ A via the QR-core trick.

    Returns rank-r triple even when the numerical rank is lower (trailing
    sigma entries are 0 with orthonormal filler columns from the QR bases).
    """
    if scale <= 0:
        raise DecompositionError(f"scale must be positive, got {scale}")
    b = np.asarray(factors.b_matrix, dtype=np.float64)
    a = np.asarray(factors.a_matrix, dtype=np.float64)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DecompositionError("non-finite factor entries")

    q_b, r_b = np.linalg.qr(b)
    q_a, r_a = np.linalg.qr(a.T)
    core = scale * (r_b @ r_a.T)
    try:
        u_core, sigma, vt_core = np.linalg.svd(core)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD of the r x r core failed: {exc}") from exc

    # Reconstruction fidelity is verified on the r x r core; left and right
    # rotations by the orthonormal Q factors preserve the Frobenius residual,
    # so this bounds ||U S V^T - s B A||_F without forming the dense product.
    core_norm = float(np.linalg.norm(core))
    defect = float(np.linalg.norm((u_core * sigma) @ vt_core - core))
    if defect > RECON_TOL * max(1.0, core_norm):
        raise DecompositionError(
            f"core reconstruction defect {defect:.3e} for '{module_path}'"
        )

    u = q_b @ u_core
    v = q_a @ vt_core.T
    _fix_signs(u, v)

    for name, basis in (("U", u), ("V", v)):
        d = orthonormality_defect(basis)
        if d > ORTHO_TOL:
            raise DecompositionError(
                f"non-orthonormal {name} basis for '{module_path}' (defect {d:.3e})"
            )

    return SpectralUpdate(
        module_path=module_path,
        u_basis=u,
        sigma=sigma,
        v_basis=v,
        scale=float(scale),
    )


@dataclass(frozen=True)
class MagnitudeControlConfig:
    sigma_clip_min: float = 0.0
    energy_mode: str = "l1"  # "l1" | "none"

    def __post_init__(self):
        if not np.isfinite(self.sigma_clip_min) or self.sigma_clip_min < 0:
            raise ValueError(f"sigma_clip_min must be finite and >= 0, got {self.sigma_clip_min}")
        if self.energy_mode not in ("l1", "none"):
            raise ValueError(f"energy_mode must be 'l1' or 'none', got '{self.energy_mode}'")


def apply_magnitude_control(
    sigma_orig: np.ndarray,
    sigma_edited: np.ndarray,
    cfg: MagnitudeControlConfig,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Clamp the edited spectrum at sigma_clip_min, then (in l1 mode) rescale
    it so its sum matches the original sum exactly. A fully clipped-to-zero
    spectrum is returned unscaled with the 'zero_mass' flag."""
    sigma_orig = np.asarray(sigma_orig, dtype=np.float64)
    sigma_edited = np.asarray(sigma_edited, dtype=np.float64)
    if sigma_orig.shape != sigma_edited.shape:
        raise ValueError(
            f"length mismatch: {sigma_orig.shape} vs {sigma_edited.shape}"
        )
    out = np.maximum(sigma_edited, cfg.sigma_clip_min)
    warnings: tuple[str, ...] = ()
    if cfg.energy_mode == "l1":
        mass = float(out.sum())
        if mass > 0.0:
            target = float(sigma_orig.sum())
            factor = target / mass
            if np.isfinite(factor):
                out = out * factor
            else:
                # near-zero mass: normalize first so nothing overflows
                out = (out / mass) * target
        else:
            warnings = ("zero_mass",)
    return out, warnings


def reconstruct(spec: SpectralUpdate) -> np.ndarray:
    """Dense d_out x d_in update U diag(sigma) V^T (testing/diagnostics only)."""
    return (spec.u_basis * spec.sigma) @ spec.v_basis.T


def refactor(spec: SpectralUpdate) -> FactorPair:
    """Convert back to LoRA factors with the symmetric square-root split:
    B' = U diag(sqrt(sigma/s)), A' = diag(sqrt(sigma/s)) V^T, so that
    s * B' @ A' reproduces the update and factor norms stay balanced."""
    if spec.scale <= 0:
        raise ValueError(f"scale must be positive, got {spec.scale}")
    if np.any(spec.sigma < 0):
        raise ValueError("sigma must be nonnegative")
    root = np.sqrt(spec.sigma / spec.scale)
    return FactorPair(
        a_matrix=root[:, None] * spec.v_basis.T,
        b_matrix=spec.u_basis * root,
        source_dtype="F32",
    )
