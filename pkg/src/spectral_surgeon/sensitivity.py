"""Per-component sensitivities from calibration gradients.

The signal for component k is the directional derivative of the calibration
loss along the rank-1 direction u_k v_k^T, i.e. u_k^T G v_k. Magnitudes are
averaged per example (mean-absolute reducer) and normalized within a module
by their mean, so policies see a scale-free profile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spectral_surgeon.adapter_io import DumpError, GradientDump, bases_checksum
from spectral_surgeon.spectral import SpectralUpdate

REDUCERS = ("mean_abs", "mean_signed")


@dataclass(frozen=True)
class SensitivityProfile:
    """Aggregated sensitivities for one module's r components.

    s_magnitude drives magnitude policies; g_tilde keeps the sign for the
    signed-update policy. x_normalized and g_tilde share one normalizer
    (the mean of s_magnitude), so both live on the same scale.
    """

    module_path: str
    g_signed: np.ndarray
    s_magnitude: np.ndarray
    x_normalized: np.ndarray
    g_tilde: np.ndarray
    n_cal: int
    reducer: str = "mean_abs"
    degenerate: bool = False

    @property
    def rank(self) -> int:
        return self.s_magnitude.shape[0]


def project_gradient(u_basis: np.ndarray, v_basis: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """g_k = u_k^T grad v_k for every k, via the diagonal of U^T grad V."""
    if grad.shape != (u_basis.shape[0], v_basis.shape[0]):
        raise ValueError(
            f"gradient shape {grad.shape} does not match bases "
            f"({u_basis.shape[0]} x {v_basis.shape[0]})"
        )
    return np.einsum("dk,dk->k", u_basis, grad @ v_basis)


def project_gradient_batch(
    u_basis: np.ndarray, v_basis: np.ndarray, grads: np.ndarray
) -> np.ndarray:
    """Stacked version: grads is n x d_out x d_in, returns n x r."""
    return np.einsum("dk,ndj,jk->nk", u_basis, grads, v_basis)


def aggregate(per_example: np.ndarray, reducer: str = "mean_abs", module_path: str = "", n_cal: int | None = None) -> SensitivityProfile:
    """Reduce an n_cal x r matrix of per-example projections.

    Both the mean of |g| and the signed mean are always computed; `reducer`
    records which one downstream magnitude policies consume.
    """
    if reducer not in REDUCERS:
        raise ValueError(f"unknown reducer '{reducer}'")
    per_example = np.asarray(per_example, dtype=np.float64)
    if per_example.ndim != 2 or per_example.shape[0] < 1:
        raise ValueError("per_example must be a nonempty n_cal x r matrix")
    g_signed = per_example.mean(axis=0)
    s_magnitude = np.abs(per_example).mean(axis=0)
    r = per_example.shape[1]
    return normalize(
        SensitivityProfile(
            module_path=module_path,
            g_signed=g_signed,
            s_magnitude=s_magnitude,
            x_normalized=np.zeros(r),
            g_tilde=np.zeros(r),
            n_cal=n_cal if n_cal is not None else per_example.shape[0],
            reducer=reducer,
        )
    )


def normalize(profile: SensitivityProfile) -> SensitivityProfile:
    """Mean-absolute normalization within the module: divide the magnitude
    source and g_signed by its mean. Under the mean_signed reducer the
    magnitude source is |g_signed| (abs applied after averaging) instead of
    s_magnitude. An all-zero source is flagged degenerate."""
    source = (
        profile.s_magnitude if profile.reducer == "mean_abs" else np.abs(profile.g_signed)
    )
    m = float(source.mean())
    if m > 0.0:
        x = source / m
        g_tilde = profile.g_signed / m
        degenerate = False
    else:
        x = np.zeros_like(profile.s_magnitude)
        g_tilde = np.zeros_like(profile.g_signed)
        degenerate = True
    return SensitivityProfile(
        module_path=profile.module_path,
        g_signed=profile.g_signed,
        s_magnitude=profile.s_magnitude,
        x_normalized=x,
        g_tilde=g_tilde,
        n_cal=profile.n_cal,
        reducer=profile.reducer,
        degenerate=degenerate,
    )


def sensitivities_from_dump(
    decompositions: dict[str, SpectralUpdate],
    dump: GradientDump,
    reducer: str = "mean_abs",
) -> dict[str, SensitivityProfile]:
    """One complete profile per decomposed module.

    full_matrix mode projects each module's gradient matrix onto its bases;
    projections mode consumes the stored per-example rows directly, after
    verifying the dump was computed against these exact bases.
    """
    missing = sorted(set(decompositions) - set(dump.entries))
    if missing:
        raise DumpError(f"gradient dump missing modules: {missing}")

    if dump.mode == "projections":
        expected = bases_checksum(
            {p: (s.u_basis, s.v_basis) for p, s in decompositions.items()}
        )
        if dump.basis_checksum is None:
            raise DumpError("projections dump carries no basis checksum")
        if dump.basis_checksum != expected:
            raise DumpError(
                f"basis checksum mismatch (dump {dump.basis_checksum:#x}, "
                f"bases {expected:#x}); re-export bases and redo the dump"
            )

    profiles: dict[str, SensitivityProfile] = {}
    for path, spec in decompositions.items():
        entry = dump.entries[path]
        if dump.mode == "full_matrix":
            rows = project_gradient(spec.u_basis, spec.v_basis, entry)[None, :]
        else:
            if entry.shape[1] != spec.rank:
                raise DumpError(
                    f"projection width {entry.shape[1]} != rank {spec.rank} for '{path}'"
                )
            rows = entry
        profiles[path] = aggregate(rows, reducer, module_path=path, n_cal=dump.n_cal)
    return profiles
