"""Output-subspace alignment diagnostics across layers and module families.

The subspace overlap (1/m)||U_a^T U_b||_F^2 equals the average cos^2 of the
principal angles between the two m-dimensional column spaces; two random
m-subspaces of R^d overlap by m/d in expectation, which serves as the
reference baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spectral_surgeon.adapter_io import LoraAdapter, module_family, module_layer
from spectral_surgeon.spectral import decompose

METRICS = ("u1_similarity", "subspace_overlap")
UNIT_TOL = 1e-8


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentMatrix:
    metric: str
    m: int
    module_family: str
    layer_ids: tuple[int, ...]
    values: np.ndarray
    d_model: int

    @property
    def baseline(self) -> float:
        """Expected overlap of two random m-subspaces of R^d_model."""
        return self.m / self.d_model


def align_u1(u_a: np.ndarray, u_b: np.ndarray) -> float:
    """|u_a . u_b| for two unit vectors."""
    for name, u in (("u_a", u_a), ("u_b", u_b)):
        norm = np.linalg.norm(u)
        if abs(norm - 1.0) > UNIT_TOL:
            raise AlignmentError(f"{name} is not unit-norm (|{name}| = {norm:.6g})")
    return min(abs(float(u_a @ u_b)), 1.0)


def align_subspace(u_a_block: np.ndarray, u_b_block: np.ndarray) -> float:
    """(1/m) ||U_a^T U_b||_F^2 for two orthonormal d x m blocks."""
    if u_a_block.shape != u_b_block.shape:
        raise AlignmentError(
            f"block shape mismatch: {u_a_block.shape} vs {u_b_block.shape}"
        )
    m = u_a_block.shape[1]
    for name, blk in (("u_a_block", u_a_block), ("u_b_block", u_b_block)):
        defect = np.abs(blk.T @ blk - np.eye(m)).max()
        if defect > UNIT_TOL:
            raise AlignmentError(f"{name} columns not orthonormal (defect {defect:.3g})")
    value = float(np.linalg.norm(u_a_block.T @ u_b_block) ** 2) / m
    return min(max(value, 0.0), 1.0)


def _family_u_blocks(
    adapter: LoraAdapter, family: str, m: int
) -> tuple[list[int], list[np.ndarray]]:
    paths = adapter.filter_paths([family])
    if not paths:
        raise AlignmentError(f"module family '{family}' not present in adapter")
    if m > adapter.rank:
        raise AlignmentError(f"m={m} exceeds adapter rank {adapter.rank}")
    by_layer: dict[int, np.ndarray] = {}
    for path in paths:
        layer = module_layer(path)
        if layer is None:
            raise AlignmentError(f"cannot parse a layer index from '{path}'")
        spec = decompose(adapter.modules[path], adapter.scale, path)
        by_layer[layer] = spec.u_basis[:, :m]
    layers = sorted(by_layer)
    return layers, [by_layer[l] for l in layers]


def layer_heatmap(
    adapter: LoraAdapter, module_family_name: str, metric: str, m: int = 4
) -> AlignmentMatrix:
    """Pairwise alignment of one family's output subspaces across layers."""
    if metric not in METRICS:
        raise AlignmentError(f"unknown metric '{metric}'")
    if metric == "u1_similarity":
        m = 1
    layers, blocks = _family_u_blocks(adapter, module_family_name, m)
    d_model = blocks[0].shape[0]
    n = len(layers)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if metric == "u1_similarity":
                v = align_u1(blocks[i][:, 0], blocks[j][:, 0])
            else:
                v = align_subspace(blocks[i], blocks[j])
            values[i, j] = values[j, i] = v
    return AlignmentMatrix(
        metric=metric,
        m=m,
        module_family=module_family_name,
        layer_ids=tuple(layers),
        values=values,
        d_model=d_model,
    )


def intra_layer_synergy(
    adapter: LoraAdapter,
    m: int = 4,
    family_a: str = "o_proj",
    family_b: str = "down_proj",
) -> tuple[list[tuple[int, float]], float]:
    """Per-layer overlap between the two residual-writing families' top-m
    output subspaces, plus the m/d_model random baseline."""
    layers_a, blocks_a = _family_u_blocks(adapter, family_a, m)
    layers_b, blocks_b = _family_u_blocks(adapter, family_b, m)
    if layers_a != layers_b:
        raise AlignmentError(
            f"families '{family_a}' and '{family_b}' cover different layers"
        )
    if blocks_a[0].shape[0] != blocks_b[0].shape[0]:
        raise AlignmentError(
            f"output-dimension mismatch: {family_a} writes into "
            f"R^{blocks_a[0].shape[0]}, {family_b} into R^{blocks_b[0].shape[0]}"
        )
    d_model = blocks_a[0].shape[0]
    synergies = [
        (layer, align_subspace(ba, bb))
        for layer, ba, bb in zip(layers_a, blocks_a, blocks_b)
    ]
    return synergies, m / d_model


def random_overlap_baseline(d: int, m: int) -> float:
    """Expected Align_U of two independent random m-subspaces of R^d."""
    if d < 1 or m < 1 or m > d:
        raise AlignmentError(f"need 1 <= m <= d, got m={m}, d={d}")
    return m / d


def count_edited_scalars(num_layers: int, num_families: int, r: int) -> int:
    """Editable degrees of freedom when r singular values are edited in
    `num_families` module families of every one of `num_layers` layers."""
    if num_layers < 1 or num_families < 1 or r < 1:
        raise ValueError("all counts must be positive")
    return num_layers * num_families * r


def write_heatmap_csv(matrix: AlignmentMatrix, path: str | Path) -> None:
    """CSV with layer labels on the first row/column and 9-significant-digit
    values; a JSON sidecar at <path>.json records metric, m, family, layers,
    d_model, and the random baseline."""
    path = Path(path)
    lines = ["layer," + ",".join(str(l) for l in matrix.layer_ids)]
    for i, layer in enumerate(matrix.layer_ids):
        row = ",".join(format(v, ".9g") for v in matrix.values[i])
        lines.append(f"{layer},{row}")
    path.write_text("\n".join(lines) + "\n")
    sidecar = {
        "metric": matrix.metric,
        "m": matrix.m,
        "family": matrix.module_family,
        "layers": list(matrix.layer_ids),
        "d_model": matrix.d_model,
        "baseline": matrix.baseline,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
