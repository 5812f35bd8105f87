"""Self-contained synthetic problem with analytic gradients.

A frozen linear map plus a LoRA-structured update is fit against targets
generated by a planted optimal update that shares the stored factors'
singular subspaces but not their spectrum. Spectrum-only editing can
therefore provably reach the optimum, and every sensitivity claim can be
checked against closed forms and finite differences without any model
runtime. Loss is mean-squared regression, L = 1/(2 n) sum_i |(W + s B A)
x_i - y_i|^2, so G = dL/dDeltaW = 1/n sum_i e_i x_i^T exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from spectral_surgeon.adapter_io import (
    EditReport,
    FactorPair,
    GradientDump,
    export_bases,
    save_adapter,
    save_gradient_dump,
    LoraAdapter,
)
from spectral_surgeon.container import write_tensors
from spectral_surgeon.policies import EditPolicyConfig, apply_edit
from spectral_surgeon.sensitivity import aggregate
from spectral_surgeon.spectral import SpectralUpdate, decompose, refactor

DEFAULT_DIMS = (48, 32, 8, 64)  # (d_out, d_in, r, n_cal)
TOY_MODULE = "model.layers.0.self_attn.o_proj"
DECOY_MODULE = "model.layers.0.self_attn.q_proj"


@dataclass(frozen=True)
class ToyProblem:
    w_frozen: np.ndarray
    factors: FactorPair
    scale: float
    calib_inputs: np.ndarray
    calib_targets: np.ndarray
    seed: int
    dims: tuple[int, int, int, int]
    planted_u: np.ndarray
    planted_v: np.ndarray
    planted_sigma: np.ndarray
    stored_sigma: np.ndarray
    module_path: str = TOY_MODULE

    @property
    def n_cal(self) -> int:
        return self.dims[3]

    def effective_update(self) -> np.ndarray:
        return self.scale * (self.factors.b_matrix @ self.factors.a_matrix)

    def planted_update(self) -> np.ndarray:
        return (self.planted_u * self.planted_sigma) @ self.planted_v.T

    def with_stored_sigma(self, sigma: np.ndarray) -> "ToyProblem":
        """Same problem with factors rebuilt from the planted bases and a
        replacement spectrum (used to probe specific spectra)."""
        sigma = np.asarray(sigma, dtype=np.float64)
        root = np.sqrt(sigma / self.scale)
        factors = FactorPair(
            a_matrix=root[:, None] * self.planted_v.T,
            b_matrix=self.planted_u * root,
        )
        return replace(self, factors=factors, stored_sigma=sigma)


def _orthonormal_columns(rng: np.random.Generator, d: int, r: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return q


def build_toy_problem(
    seed: int,
    dims: tuple[int, int, int, int] = DEFAULT_DIMS,
    *,
    scale: float = 2.0,
    noise: float = 1e-3,
    sigma_jitter: float = 0.5,
) -> ToyProblem:
    """Deterministic construction from `seed`.

    Planted spectrum is log-uniform in [0.1, 10]; stored sigma multiplies it
    by exp(N(0, sigma_jitter)), so the stored update differs from the planted
    optimum only along its own singular directions. Targets carry `noise`
    relative Gaussian noise (0 for exactness tests).
    """
    d_out, d_in, r, n_cal = dims
    if not (1 <= r <= min(d_out, d_in)) or n_cal < 1:
        raise ValueError(f"invalid dims {dims}")
    rng = np.random.default_rng(seed)

    u = _orthonormal_columns(rng, d_out, r)
    v = _orthonormal_columns(rng, d_in, r)
    planted = np.sort(np.exp(rng.uniform(np.log(0.1), np.log(10.0), r)))[::-1]
    stored = planted * np.exp(rng.normal(0.0, sigma_jitter, r)) if sigma_jitter > 0 else planted.copy()

    w = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
    x = rng.standard_normal((n_cal, d_in))
    y = x @ (w + (u * planted) @ v.T).T
    if noise > 0:
        y = y + noise * float(y.std()) * rng.standard_normal(y.shape)

    root = np.sqrt(stored / scale)
    factors = FactorPair(a_matrix=root[:, None] * v.T, b_matrix=u * root)
    return ToyProblem(
        w_frozen=w,
        factors=factors,
        scale=scale,
        calib_inputs=x,
        calib_targets=y,
        seed=seed,
        dims=dims,
        planted_u=u,
        planted_v=v,
        planted_sigma=planted,
        stored_sigma=stored,
    )


def loss_with_update(problem: ToyProblem, delta_w: np.ndarray) -> float:
    resid = problem.calib_inputs @ (problem.w_frozen + delta_w).T - problem.calib_targets
    return 0.5 * float(np.sum(resid * resid)) / problem.n_cal


def calib_loss_and_grad(
    problem: ToyProblem,
    bases: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Loss, analytic G = 1/n sum_i e_i x_i^T, and (when bases are supplied)
    the n_cal x r matrix of per-example projections diag(U^T e_i x_i^T V)."""
    x, y = problem.calib_inputs, problem.calib_targets
    resid = x @ (problem.w_frozen + problem.effective_update()).T - y
    n = problem.n_cal
    loss = 0.5 * float(np.sum(resid * resid)) / n
    grad = resid.T @ x / n
    per_example = None
    if bases is not None:
        u, v = bases
        per_example = (resid @ u) * (x @ v)
    return loss, grad, per_example


def finite_diff_sensitivity(
    problem: ToyProblem, spec: SpectralUpdate, k: int, eps: float
) -> float:
    """Central difference (L(sigma_k + eps) - L(sigma_k - eps)) / (2 eps),
    rebuilding the dense update from the decomposition each time. sigma_k -
    eps may go negative; the oracle does not clamp."""
    if not 0 <= k < spec.rank:
        raise ValueError(f"component index {k} out of range for rank {spec.rank}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    losses = []
    for sign in (+1.0, -1.0):
        sigma = spec.sigma.copy()
        sigma[k] += sign * eps
        losses.append(loss_with_update(problem, (spec.u_basis * sigma) @ spec.v_basis.T))
    return (losses[0] - losses[1]) / (2.0 * eps)


def planted_target_sigma(problem: ToyProblem, spec: SpectralUpdate) -> np.ndarray:
    """The planted update's coefficients in the decomposition's own basis:
    sigma*_k = u_k^T DeltaW* v_k. With zero noise, editing the spectrum to
    these values makes the calibration loss vanish."""
    return np.einsum(
        "dk,dk->k", spec.u_basis, problem.planted_update() @ spec.v_basis
    )


def run_end_to_end(
    problem: ToyProblem, cfg: EditPolicyConfig
) -> tuple[float, float, EditReport]:
    """decompose -> project -> aggregate -> policy -> magnitude control ->
    refactor -> re-evaluate. Reports calibration loss before and after."""
    spec = decompose(problem.factors, problem.scale, problem.module_path)
    loss_before, _, per_example = calib_loss_and_grad(
        problem, bases=(spec.u_basis, spec.v_basis)
    )
    profile = aggregate(per_example, "mean_abs", module_path=problem.module_path)
    edited, record = apply_edit(spec, profile, cfg)
    if np.array_equal(edited.sigma, spec.sigma):
        # identity edit: keep the original factors rather than re-splitting
        loss_after = loss_before
    else:
        new_pair = refactor(edited)
        loss_after = loss_with_update(
            problem, edited.scale * (new_pair.b_matrix @ new_pair.a_matrix)
        )
    report = EditReport(policy=cfg.policy, config=cfg.to_dict(), records=[record])
    return loss_before, loss_after, report


def _decoy_factors(problem: ToyProblem) -> FactorPair:
    d_out, d_in, r, _ = problem.dims
    rng = np.random.default_rng((problem.seed, 0xDEC0))
    return FactorPair(
        a_matrix=rng.standard_normal((r, d_in)) / np.sqrt(d_in),
        b_matrix=rng.standard_normal((d_out, r)) / np.sqrt(r),
    )


def toy_adapter(problem: ToyProblem, include_decoy: bool = True) -> LoraAdapter:
    """The problem as a loadable adapter. The decoy module sits outside the
    default edit filter, exercising unedited-module isolation downstream."""
    r = problem.dims[2]
    modules = {problem.module_path: problem.factors}
    families = [problem.module_path.rsplit(".", 1)[-1]]
    if include_decoy:
        modules[DECOY_MODULE] = _decoy_factors(problem)
        families.append(DECOY_MODULE.rsplit(".", 1)[-1])
    return LoraAdapter(
        modules=dict(sorted(modules.items())),
        rank=r,
        lora_alpha=problem.scale * r,
        target_modules=tuple(families),
    )


def emit_files(
    problem: ToyProblem,
    out_dir: str | Path,
    mode: str = "full_matrix",
    include_decoy: bool = True,
) -> dict[str, Path]:
    """Write the problem as adapter + config + gradient dump + bases (+ the
    raw problem tensors) so the file-based pipeline and the external
    gradient extractor can run against it.

    Bases, projections, and gradients are derived from the factors after
    float32 rounding, i.e. exactly what a later load of the adapter file
    decomposes to, so the basis checksum matches across the two passes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "adapter": out / "adapter.safetensors",
        "config": out / "adapter_config.json",
        "grads": out / "grads.safetensors",
        "bases": out / "bases.safetensors",
        "problem": out / "problem.safetensors",
    }

    adapter = toy_adapter(problem, include_decoy=include_decoy)
    save_adapter(adapter, paths["adapter"], paths["config"])

    rounded = FactorPair(
        a_matrix=problem.factors.a_matrix.astype(np.float32).astype(np.float64),
        b_matrix=problem.factors.b_matrix.astype(np.float32).astype(np.float64),
    )
    file_problem = replace(problem, factors=rounded)
    spec = decompose(rounded, problem.scale, problem.module_path)
    checksum = export_bases([spec], paths["bases"])

    _, grad, per_example = calib_loss_and_grad(
        file_problem, bases=(spec.u_basis, spec.v_basis)
    )
    if mode == "full_matrix":
        entries = {problem.module_path: grad}
        dump = GradientDump(
            mode=mode, entries=entries, n_cal=problem.n_cal, seed=problem.seed
        )
    elif mode == "projections":
        dump = GradientDump(
            mode=mode,
            entries={problem.module_path: per_example},
            n_cal=problem.n_cal,
            seed=problem.seed,
            basis_checksum=checksum,
        )
    else:
        raise ValueError(f"unknown dump mode '{mode}'")
    save_gradient_dump(dump, paths["grads"])

    write_tensors(
        paths["problem"],
        {
            "w_frozen": problem.w_frozen,
            "calib_inputs": problem.calib_inputs,
            "calib_targets": problem.calib_targets,
        },
        metadata={
            "seed": str(problem.seed),
            "scale": repr(problem.scale),
            "module_path": problem.module_path,
            "loss": "half_mean_squared_error",
        },
    )
    manifest = {name: str(p) for name, p in paths.items()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return paths
