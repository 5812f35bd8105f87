"""Acceptance suite: one test per release criterion, each timed against its
stated budget and printing a PASS/FAIL line (run with `pytest -s` to see the
lines as they happen).
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest
from click.testing import CliRunner

from spectral_surgeon.adapter_io import (
    load_adapter,
    load_bases,
    load_gradient_dump,
    save_adapter,
    save_gradient_dump,
    export_bases,
)
from spectral_surgeon.alignment import align_subspace, count_edited_scalars, random_overlap_baseline
from spectral_surgeon.cli import main as cli_main
from spectral_surgeon.container import read_tensors
from spectral_surgeon.policies import (
    EditPolicyConfig,
    alpha_abs_select,
    alpha_grad_direction,
    alpha_random_index,
    alpha_smooth_abs,
    apply_alpha,
    apply_edit,
    selection_counts,
)
from spectral_surgeon.sensitivity import aggregate, project_gradient
from spectral_surgeon.spectral import (
    MagnitudeControlConfig,
    apply_magnitude_control,
    decompose,
    orthonormality_defect,
    reconstruct,
    refactor,
)
from spectral_surgeon.adapter_io import FactorPair, GradientDump
from spectral_surgeon.toy import (
    build_toy_problem,
    calib_loss_and_grad,
    emit_files,
    finite_diff_sensitivity,
    loss_with_update,
    planted_target_sigma,
    run_end_to_end,
)


@contextmanager
def criterion(name: str, budget_seconds: float):
    start = time.perf_counter()
    try:
        yield
    except Exception:
        print(f"FAIL  {name}")
        raise
    elapsed = time.perf_counter() - start
    assert elapsed < budget_seconds, f"{name}: {elapsed:.3f}s exceeds {budget_seconds}s budget"
    print(f"PASS  {name} ({elapsed:.3f}s)")


def test_edit_overhead_accounting():
    with criterion("edit-overhead accounting", 1e-3):
        assert count_edited_scalars(32, 2, 16) == 1024
        assert count_edited_scalars(36, 2, 16) == 1152


def test_random_subspace_baseline():
    with criterion("random-subspace baseline", 10.0):
        rng = np.random.default_rng(0)
        d, m, trials = 512, 4, 200
        vals = np.empty(trials)
        for t in range(trials):
            qa, _ = np.linalg.qr(rng.standard_normal((d, m)))
            qb, _ = np.linalg.qr(rng.standard_normal((d, m)))
            vals[t] = align_subspace(qa, qb)
        se = vals.std(ddof=1) / np.sqrt(trials)
        assert abs(vals.mean() - m / d) <= 3.0 * se
        assert random_overlap_baseline(4096, 16) == 16 / 4096
        assert abs(random_overlap_baseline(4096, 16) - 0.0039) < 1e-4


def test_svd_suite():
    with criterion("SVD suite (50 instances)", 5.0):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d_out = int(rng.integers(2, 129))
            d_in = int(rng.integers(2, 97))
            r = int(rng.integers(1, min(16, d_out, d_in) + 1))
            scale = float(rng.uniform(0.2, 5.0))
            pair = FactorPair(
                a_matrix=rng.standard_normal((r, d_in)),
                b_matrix=rng.standard_normal((d_out, r)),
            )
            spec = decompose(pair, scale, "acc.svd")
            assert orthonormality_defect(spec.u_basis) <= 1e-10
            assert orthonormality_defect(spec.v_basis) <= 1e-10
            dense = scale * pair.b_matrix @ pair.a_matrix
            norm = np.linalg.norm(dense)
            assert np.linalg.norm(reconstruct(spec) - dense) <= 1e-10 * max(1.0, norm)
            oracle = np.linalg.svd(dense, compute_uv=False)[:r]
            assert np.abs(spec.sigma - oracle).max() <= 1e-8 * max(1.0, oracle[0])


def test_sensitivity_oracle():
    with criterion("sensitivity vs finite differences (20 problems)", 10.0):
        worst = 0.0
        for seed in range(20):
            problem = build_toy_problem(seed, (48, 32, 8, 64))
            spec = decompose(problem.factors, problem.scale, problem.module_path)
            _, grad, _ = calib_loss_and_grad(problem)
            g = project_gradient(spec.u_basis, spec.v_basis, grad)
            for k in range(8):
                eps = 1e-5 * max(1.0, float(spec.sigma[k]))
                fd = finite_diff_sensitivity(problem, spec, k, eps)
                rel = abs(fd - g[k]) / max(abs(fd), abs(g[k]), 1e-12)
                worst = max(worst, rel)
        assert worst <= 1e-4, f"max relative error {worst:.3e}"


def test_policy_formula_suite():
    with criterion("policy formulas", 1.0):
        assert selection_counts(16, 0.2, 0.2, 1) == (3, 3)
        assert selection_counts(16, 1.0, 0.2, 1) == (16, 0)
        assert selection_counts(4, 0.1, 0.9, 1) == (1, 3)

        cfg = EditPolicyConfig(policy="abs_select", core_frac=0.25, noise_frac=0.25)
        alpha, _ = alpha_abs_select(np.array([4.0, 3.0, 2.0, 1.0]), cfg)
        np.testing.assert_array_equal(alpha, [1.25, 1.0, 1.0, 0.80])

        # sigmoid gate at its center: sup + span/2 = 1.025 with defaults
        cfg = EditPolicyConfig(policy="smooth_abs")
        alpha, _ = alpha_smooth_abs(np.array([0.5, 1.0, 1.5]), cfg)
        assert abs(alpha[1] - 1.025) <= 1e-12
        # closed form frozen from a 50-digit independent evaluation
        alpha, _ = alpha_smooth_abs(np.array([0.2, 0.8, 1.0, 2.0]), cfg)
        expected = (
            0.8380865385676803692,
            0.98709939268887862391,
            1.0629006073111213761,
            1.2395739308360343013,
        )
        np.testing.assert_allclose(alpha, expected, rtol=0, atol=1e-12)

        cfg = EditPolicyConfig(policy="grad_direction")
        alpha, _ = alpha_grad_direction(np.array([0.5]), cfg)
        assert abs(alpha[0] - 0.3678794411714423216) <= 1e-12
        alpha, _ = alpha_grad_direction(np.array([-0.5]), cfg)
        assert abs(alpha[0] - 1.1051709180756476248) <= 1e-12


def test_conservation_suite():
    with criterion("conservation (l1, no-op, containment)", 5.0):
        rng = np.random.default_rng(2)
        l1 = MagnitudeControlConfig(energy_mode="l1")
        for _ in range(100):
            r = int(rng.integers(1, 24))
            sigma = np.sort(rng.uniform(0.001, 10.0, r))[::-1]
            out, _ = apply_magnitude_control(sigma, sigma * rng.uniform(0.1, 3.0, r), l1)
            assert abs(out.sum() - sigma.sum()) <= 1e-12 * sigma.sum()

        for i in range(20):
            pair = FactorPair(
                a_matrix=rng.standard_normal((5, 20)),
                b_matrix=rng.standard_normal((26, 5)),
            )
            spec = decompose(pair, 2.0, f"acc.cons.{i}")
            c = float(rng.uniform(0.2, 5.0))
            edited, _, _ = apply_alpha(spec, np.full(5, c), l1)
            assert np.abs(edited.sigma - spec.sigma).max() <= 1e-12 * spec.sigma[0]

            profile = aggregate(rng.standard_normal((16, 5)), module_path=spec.module_path)
            for policy in ("abs_select", "smooth_abs", "random_index", "grad_direction"):
                out_spec, _ = apply_edit(
                    spec, profile, EditPolicyConfig(policy=policy, seed=i)
                )
                delta = reconstruct(out_spec)
                norm = np.linalg.norm(delta)
                u, v = spec.u_basis, spec.v_basis
                assert np.linalg.norm(delta - u @ (u.T @ delta)) <= 1e-9 * norm
                assert np.linalg.norm(delta - (delta @ v) @ v.T) <= 1e-9 * norm


def test_control_matching():
    with criterion("control matching (1000 draws)", 5.0):
        rng = np.random.default_rng(3)
        r, p, q, k_min = 16, 0.2, 0.2, 1
        k_core, _ = selection_counts(r, p, q, k_min)
        amp_hits = np.zeros(r)
        n = 1000
        cfg_abs = EditPolicyConfig(policy="abs_select")
        for seed in range(n):
            x = rng.uniform(0.1, 4.0, r)
            a_sel, _ = alpha_abs_select(x, cfg_abs)
            a_rnd, _ = alpha_random_index(
                r, EditPolicyConfig(policy="random_index", seed=seed), "acc.control"
            )
            assert sorted(a_sel.tolist()) == sorted(a_rnd.tolist())
            amp_hits += a_rnd == 1.25
        prob = k_core / r
        bound = 3.0 * np.sqrt(prob * (1 - prob) / n)
        assert np.abs(amp_hits / n - prob).max() <= bound


def test_end_to_end_descent_and_recovery():
    with criterion("end-to-end descent + planted recovery", 30.0):
        for seed in range(20):
            problem = build_toy_problem(seed)
            for eta in (1e-3, 1e-2):
                cfg = EditPolicyConfig(
                    policy="grad_direction",
                    asymmetric_update=False,
                    eta=eta,
                    magnitude=MagnitudeControlConfig(energy_mode="none"),
                )
                before, after, _ = run_end_to_end(problem, cfg)
                assert after <= before, f"seed {seed}, eta {eta}: {before} -> {after}"

        for seed in range(5):
            problem = build_toy_problem(seed, noise=0.0)
            spec = decompose(problem.factors, problem.scale, problem.module_path)
            alpha = planted_target_sigma(problem, spec) / spec.sigma
            edited, _, _ = apply_alpha(
                spec, alpha, MagnitudeControlConfig(energy_mode="none")
            )
            pair = refactor(edited)
            loss = loss_with_update(
                problem, problem.scale * pair.b_matrix @ pair.a_matrix
            )
            assert loss <= 1e-18


def test_file_round_trips(tmp_path):
    with criterion("file-format round trips + edit isolation", 5.0):
        problem = build_toy_problem(31)
        paths = emit_files(problem, tmp_path / "emitted")

        # adapter round trip is byte-exact
        adapter = load_adapter(paths["adapter"], paths["config"])
        save_adapter(adapter, tmp_path / "resaved.safetensors")
        assert (tmp_path / "resaved.safetensors").read_bytes() == paths["adapter"].read_bytes()

        # bases round trip is byte-exact
        bases, _ = load_bases(paths["bases"])
        spec = decompose(
            adapter.modules[problem.module_path], adapter.scale, problem.module_path
        )
        export_bases([spec], tmp_path / "rebases.safetensors")
        assert (tmp_path / "rebases.safetensors").read_bytes() == paths["bases"].read_bytes()

        # dump round trip is byte-exact
        dump = load_gradient_dump(paths["grads"])
        save_gradient_dump(dump, tmp_path / "redump.safetensors")
        assert (tmp_path / "redump.safetensors").read_bytes() == paths["grads"].read_bytes()

        # unedited modules pass through cmd_edit byte-identical
        out = tmp_path / "edited.safetensors"
        result = CliRunner().invoke(
            cli_main,
            [
                "edit",
                "--adapter", str(paths["adapter"]),
                "--config", str(paths["config"]),
                "--grads", str(paths["grads"]),
                "--out", str(out),
                "--policy", "smooth_abs",
            ],
            catch_exceptions=False,
        )
        assert result.exit_code == 0, result.output
        before, _ = read_tensors(paths["adapter"])
        after, _ = read_tensors(out)
        for key in before:
            if not key.startswith(problem.module_path):
                assert after[key].tobytes() == before[key].tobytes()
