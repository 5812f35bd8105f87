import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectral_surgeon.adapter_io import FactorPair
from spectral_surgeon.spectral import (
    DecompositionError,
    MagnitudeControlConfig,
    apply_magnitude_control,
    decompose,
    orthonormality_defect,
    reconstruct,
    refactor,
)


def test_rank_one_outer_product():
    b = np.zeros((4, 1))
    b[0, 0] = 1.0
    a = np.array([[2.0, 0.0, 0.0]])
    spec = decompose(FactorPair(a_matrix=a, b_matrix=b), 1.0, "m")
    np.testing.assert_allclose(spec.sigma, [2.0], atol=1e-14)
    np.testing.assert_allclose(spec.u_basis[:, 0], [1, 0, 0, 0], atol=1e-14)
    np.testing.assert_allclose(np.abs(spec.v_basis[:, 0]), [1, 0, 0], atol=1e-14)


def test_diagonal_case_scaled():
    b = np.eye(2)
    a = np.zeros((2, 5))
    a[0, 0] = 3.0
    a[1, 1] = 1.0
    spec = decompose(FactorPair(a_matrix=a, b_matrix=b), 2.0, "m")
    np.testing.assert_allclose(spec.sigma, [6.0, 2.0], atol=1e-14)


def test_matches_dense_svd_oracle(rng):
    # random B (64x16) @ A (16x48), scale = alpha/r
    b = rng.standard_normal((64, 16))
    a = rng.standard_normal((16, 48))
    scale = 32.0 / 16.0
    spec = decompose(FactorPair(a_matrix=a, b_matrix=b), scale, "m")
    dense = scale * b @ a
    u_o, s_o, vt_o = np.linalg.svd(dense, full_matrices=False)
    np.testing.assert_allclose(spec.sigma, s_o[:16], atol=1e-8 * s_o[0])
    # per-component subspace agreement (spectrum is a.s. nondegenerate)
    for k in range(16):
        assert abs(spec.u_basis[:, k] @ u_o[:, k]) > 1 - 1e-8
        assert abs(spec.v_basis[:, k] @ vt_o[k]) > 1 - 1e-8


def test_sign_convention_deterministic(rng):
    b = rng.standard_normal((10, 3))
    a = rng.standard_normal((3, 7))
    spec = decompose(FactorPair(a_matrix=a, b_matrix=b), 1.0, "m")
    lead = np.argmax(np.abs(spec.u_basis), axis=0)
    assert (spec.u_basis[lead, np.arange(3)] > 0).all()
    spec2 = decompose(FactorPair(a_matrix=a, b_matrix=b), 1.0, "m")
    np.testing.assert_array_equal(spec.u_basis, spec2.u_basis)
    np.testing.assert_array_equal(spec.v_basis, spec2.v_basis)


def test_rank_deficient_input_pads_with_zeros(rng):
    # numerical rank 1 but r=3: trailing sigma ~ 0, bases stay orthonormal
    col = rng.standard_normal((8, 1))
    b = np.hstack([col, col, col])
    a = rng.standard_normal((3, 6))
    spec = decompose(FactorPair(a_matrix=a, b_matrix=b), 1.0, "m")
    assert spec.sigma.shape == (3,)
    assert spec.sigma[1] < 1e-12 * spec.sigma[0]
    assert orthonormality_defect(spec.u_basis) < 1e-10
    assert orthonormality_defect(spec.v_basis) < 1e-10


def test_zero_update_decomposes(rng):
    spec = decompose(
        FactorPair(a_matrix=np.zeros((2, 5)), b_matrix=np.zeros((4, 2))), 1.0, "m"
    )
    np.testing.assert_array_equal(spec.sigma, [0.0, 0.0])
    assert orthonormality_defect(spec.u_basis) < 1e-10


def test_nonpositive_scale_rejected(rng):
    pair = FactorPair(
        a_matrix=rng.standard_normal((2, 4)), b_matrix=rng.standard_normal((4, 2))
    )
    with pytest.raises(DecompositionError, match="scale"):
        decompose(pair, 0.0, "m")


@settings(max_examples=25, deadline=None)
@given(
    d_out=st.integers(2, 40),
    d_in=st.integers(2, 40),
    seed=st.integers(0, 2**31),
)
def test_decompose_invariants_property(d_out, d_in, seed):
    rng = np.random.default_rng(seed)
    r = int(rng.integers(1, min(d_out, d_in) + 1))
    pair = FactorPair(
        a_matrix=rng.standard_normal((r, d_in)),
        b_matrix=rng.standard_normal((d_out, r)),
    )
    scale = float(rng.uniform(0.1, 8.0))
    spec = decompose(pair, scale, "m")
    assert orthonormality_defect(spec.u_basis) <= 1e-10
    assert orthonormality_defect(spec.v_basis) <= 1e-10
    assert (np.diff(spec.sigma) <= 1e-15 * max(1.0, spec.sigma[0])).all()
    assert (spec.sigma >= 0).all()
    dense = scale * pair.b_matrix @ pair.a_matrix
    err = np.linalg.norm(reconstruct(spec) - dense)
    assert err <= 1e-10 * max(1.0, np.linalg.norm(dense))


# ------------------------------------------------- magnitude control


def test_l1_undoes_uniform_doubling():
    out, flags = apply_magnitude_control(
        np.array([3.0, 1.0]), np.array([6.0, 2.0]), MagnitudeControlConfig()
    )
    np.testing.assert_allclose(out, [3.0, 1.0], rtol=1e-15)
    assert flags == ()


def test_clip_then_renormalize():
    # clip [0.5, -0.2] at 0 -> [0.5, 0]; renormalize by 8 -> [4, 0]
    out, _ = apply_magnitude_control(
        np.array([3.0, 1.0]), np.array([0.5, -0.2]), MagnitudeControlConfig()
    )
    np.testing.assert_allclose(out, [4.0, 0.0], rtol=1e-15)


def test_energy_mode_none_is_identity():
    out, _ = apply_magnitude_control(
        np.array([3.0, 1.0]),
        np.array([6.0, 2.0]),
        MagnitudeControlConfig(energy_mode="none"),
    )
    np.testing.assert_array_equal(out, [6.0, 2.0])


def test_zero_mass_flagged():
    out, flags = apply_magnitude_control(
        np.array([3.0, 1.0]), np.array([-1.0, -2.0]), MagnitudeControlConfig()
    )
    np.testing.assert_array_equal(out, [0.0, 0.0])
    assert "zero_mass" in flags


def test_length_mismatch_rejected():
    with pytest.raises(ValueError, match="length mismatch"):
        apply_magnitude_control(np.ones(2), np.ones(3), MagnitudeControlConfig())


@settings(max_examples=60, deadline=None)
@given(
    sigma=st.lists(st.floats(0.0, 1e6, allow_subnormal=False), min_size=1, max_size=32),
    factors=st.lists(st.floats(0.0, 8.0, allow_subnormal=False), min_size=1, max_size=32),
)
def test_l1_preserves_mass_property(sigma, factors):
    n = min(len(sigma), len(factors))
    sig = np.array(sigma[:n])
    edited = sig * np.array(factors[:n])
    out, flags = apply_magnitude_control(sig, edited, MagnitudeControlConfig())
    if out.sum() > 0:
        assert abs(out.sum() - sig.sum()) <= 1e-12 * max(sig.sum(), 1e-300)
    else:
        assert "zero_mass" in flags or sig.sum() == 0


# ------------------------------------------------- reconstruct / refactor


def test_reconstruct_identity(rng):
    pair = FactorPair(
        a_matrix=rng.standard_normal((4, 9)), b_matrix=rng.standard_normal((11, 4))
    )
    spec = decompose(pair, 1.5, "m")
    dense = 1.5 * pair.b_matrix @ pair.a_matrix
    err = np.linalg.norm(reconstruct(spec) - dense) / np.linalg.norm(dense)
    assert err <= 1e-10


def test_reconstruct_zero_sigma(rng):
    pair = FactorPair(
        a_matrix=rng.standard_normal((2, 4)), b_matrix=rng.standard_normal((5, 2))
    )
    spec = decompose(pair, 1.0, "m").with_sigma(np.zeros(2))
    np.testing.assert_array_equal(reconstruct(spec), np.zeros((5, 4)))


def test_reconstruct_rank_one():
    u = np.zeros((4, 1))
    u[1] = 1.0
    v = np.zeros((3, 1))
    v[2] = 1.0
    from spectral_surgeon.spectral import SpectralUpdate

    spec = SpectralUpdate("m", u, np.array([5.0]), v, 1.0)
    expected = np.zeros((4, 3))
    expected[1, 2] = 5.0
    np.testing.assert_array_equal(reconstruct(spec), expected)


def test_refactor_norm_split():
    # sigma=[4], s=1: both factors carry sqrt(4) = 2
    u = np.array([[1.0], [0.0]])
    v = np.array([[0.0], [1.0]])
    from spectral_surgeon.spectral import SpectralUpdate

    pair = refactor(SpectralUpdate("m", u, np.array([4.0]), v, 1.0))
    assert np.isclose(np.linalg.norm(pair.b_matrix[:, 0]), 2.0)
    assert np.isclose(np.linalg.norm(pair.a_matrix[0]), 2.0)

    # sigma=[4], s=4: norms 1, top singular value of s*B'A' is 4
    pair = refactor(SpectralUpdate("m", u, np.array([4.0]), v, 4.0))
    assert np.isclose(np.linalg.norm(pair.b_matrix[:, 0]), 1.0)
    assert np.isclose(np.linalg.norm(pair.a_matrix[0]), 1.0)
    top = np.linalg.svd(4.0 * pair.b_matrix @ pair.a_matrix, compute_uv=False)[0]
    assert np.isclose(top, 4.0)


def test_refactor_round_trip_random(rng):
    pair = FactorPair(
        a_matrix=rng.standard_normal((6, 17)), b_matrix=rng.standard_normal((23, 6))
    )
    spec = decompose(pair, 2.5, "m")
    new_pair = refactor(spec)
    recon = 2.5 * new_pair.b_matrix @ new_pair.a_matrix
    err = np.linalg.norm(recon - reconstruct(spec)) / np.linalg.norm(reconstruct(spec))
    assert err <= 1e-9


def test_refactor_rejects_bad_inputs(rng):
    from spectral_surgeon.spectral import SpectralUpdate

    u = np.array([[1.0], [0.0]])
    v = np.array([[1.0], [0.0]])
    with pytest.raises(ValueError, match="scale"):
        refactor(SpectralUpdate("m", u, np.array([1.0]), v, -1.0))
    with pytest.raises(ValueError, match="nonnegative"):
        refactor(SpectralUpdate("m", u, np.array([-1.0]), v, 1.0))
