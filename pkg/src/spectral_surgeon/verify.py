"""Property suites behind the `verify` CLI subcommand.

Each suite runs a batch of randomized checks on synthetic problems and
reports its worst observed error against the pinned tolerance. The optional
`inject` hook deliberately corrupts intermediate state so the suite's
detection of a violation can itself be tested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spectral_surgeon.adapter_io import FactorPair
from spectral_surgeon.policies import EditPolicyConfig, apply_alpha, apply_edit
from spectral_surgeon.sensitivity import aggregate, project_gradient
from spectral_surgeon.spectral import (
    MagnitudeControlConfig,
    decompose,
    orthonormality_defect,
    reconstruct,
)
from spectral_surgeon.toy import build_toy_problem, calib_loss_and_grad, finite_diff_sensitivity

ORTHO_TOL = 1e-10
RECON_TOL = 1e-10
SPECTRUM_TOL = 1e-8
CONTAINMENT_TOL = 1e-9
FINITE_DIFF_TOL = 1e-4
ENERGY_TOL = 1e-12
NOOP_TOL = 1e-12


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "suite": self.name,
            "passed": bool(self.passed),
            "max_error": float(self.max_error),
            "tolerance": float(self.tolerance),
            "detail": self.detail,
        }


def _random_factors(rng: np.random.Generator, d_out: int, d_in: int, r: int) -> FactorPair:
    return FactorPair(
        a_matrix=rng.standard_normal((r, d_in)),
        b_matrix=rng.standard_normal((d_out, r)),
    )


def suite_svd(n_instances: int = 50, seed: int = 0, inject: str | None = None) -> SuiteResult:
    """Orthonormality, reconstruction fidelity, nonincreasing order, and
    agreement with a dense-SVD oracle on the explicit product."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        d_out = int(rng.integers(8, 129))
        d_in = int(rng.integers(8, 97))
        r = int(rng.integers(1, min(17, d_out, d_in) + 1))
        scale = float(rng.uniform(0.25, 4.0))
        pair = _random_factors(rng, d_out, d_in, r)
        spec = decompose(pair, scale, "verify.module")
        if inject == "sigma-order" and r >= 2:
            sigma = spec.sigma.copy()
            sigma[0], sigma[-1] = sigma[-1], sigma[0]
            spec = spec.with_sigma(sigma)

        if np.any(np.diff(spec.sigma) > 0):
            return SuiteResult(
                "svd", False, float(np.max(np.diff(spec.sigma))), 0.0,
                "invariant 'spectrum_order' violated: sigma not nonincreasing",
            )
        worst = max(
            worst,
            orthonormality_defect(spec.u_basis) / ORTHO_TOL,
            orthonormality_defect(spec.v_basis) / ORTHO_TOL,
        )
        dense = scale * pair.b_matrix @ pair.a_matrix
        rel = np.linalg.norm(reconstruct(spec) - dense) / max(np.linalg.norm(dense), 1e-300)
        worst = max(worst, rel / RECON_TOL)
        oracle = np.linalg.svd(dense, compute_uv=False)[:r]
        sig_err = float(np.max(np.abs(spec.sigma - oracle))) / max(float(oracle[0]), 1e-300)
        worst = max(worst, sig_err / SPECTRUM_TOL)
    return SuiteResult("svd", worst <= 1.0, worst, 1.0, f"{n_instances} random instances; errors scaled by their tolerances")


def suite_containment(n_instances: int = 12, seed: int = 1) -> SuiteResult:
    """Edits never leave the learned subspace, for every policy."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        pair = _random_factors(rng, 40, 30, 6)
        spec = decompose(pair, 1.5, f"verify.containment.{i}")
        per_example = rng.standard_normal((16, 6))
        profile = aggregate(per_example, "mean_abs", module_path=spec.module_path)
        for policy in ("abs_select", "smooth_abs", "random_index", "grad_direction"):
            cfg = EditPolicyConfig(policy=policy, seed=seed)
            edited, _ = apply_edit(spec, profile, cfg)
            delta = reconstruct(edited)
            norm = max(np.linalg.norm(delta), 1e-300)
            u, v = edited.u_basis, edited.v_basis
            left = np.linalg.norm(delta - u @ (u.T @ delta)) / norm
            right = np.linalg.norm(delta - (delta @ v) @ v.T) / norm
            worst = max(worst, left, right)
    return SuiteResult("containment", worst <= CONTAINMENT_TOL, worst, CONTAINMENT_TOL)


def suite_finite_diff(n_problems: int = 20, seed: int = 2) -> SuiteResult:
    """Gradient projection vs central finite differences on toy problems."""
    worst = 0.0
    for i in range(n_problems):
        problem = build_toy_problem(seed * 1000 + i)
        spec = decompose(problem.factors, problem.scale, problem.module_path)
        _, grad, _ = calib_loss_and_grad(problem)
        g = project_gradient(spec.u_basis, spec.v_basis, grad)
        for k in range(spec.rank):
            eps = 1e-5 * max(1.0, float(spec.sigma[k]))
            fd = finite_diff_sensitivity(problem, spec, k, eps)
            denom = max(abs(fd), abs(g[k]), 1e-12)
            worst = max(worst, abs(fd - g[k]) / denom)
    return SuiteResult("finite_diff", worst <= FINITE_DIFF_TOL, worst, FINITE_DIFF_TOL)


def suite_energy(n_instances: int = 200, seed: int = 3) -> SuiteResult:
    """l1 renormalization reproduces the original spectral mass exactly."""
    rng = np.random.default_rng(seed)
    cfg = MagnitudeControlConfig(energy_mode="l1")
    worst = 0.0
    for _ in range(n_instances):
        r = int(rng.integers(1, 33))
        sigma = np.sort(rng.uniform(0.0, 10.0, r))[::-1]
        if sigma.sum() == 0:
            continue
        alpha = rng.uniform(0.1, 3.0, r)
        from spectral_surgeon.spectral import apply_magnitude_control

        out, _ = apply_magnitude_control(sigma, alpha * sigma, cfg)
        worst = max(worst, abs(out.sum() - sigma.sum()) / sigma.sum())
    return SuiteResult("energy", worst <= ENERGY_TOL, worst, ENERGY_TOL)


def suite_noop(n_instances: int = 50, seed: int = 4) -> SuiteResult:
    """Uniform alpha followed by l1 preservation returns sigma unchanged."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        pair = _random_factors(rng, 24, 20, 5)
        spec = decompose(pair, 2.0, f"verify.noop.{i}")
        c = float(rng.uniform(0.2, 5.0))
        edited, _, _ = apply_alpha(
            spec, np.full(5, c), MagnitudeControlConfig(energy_mode="l1")
        )
        denom = max(float(np.abs(spec.sigma).max()), 1e-300)
        worst = max(worst, float(np.abs(edited.sigma - spec.sigma).max()) / denom)
    return SuiteResult("noop", worst <= NOOP_TOL, worst, NOOP_TOL)


SUITES = {
    "svd": suite_svd,
    "containment": suite_containment,
    "finite_diff": suite_finite_diff,
    "energy": suite_energy,
    "noop": suite_noop,
}


def run_suites(scope: list[str] | None = None, inject: str | None = None) -> list[SuiteResult]:
    names = scope or list(SUITES)
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite '{name}'")
        if name == "svd":
            results.append(suite_svd(inject=inject))
        else:
            results.append(SUITES[name]())
    return results
