"""Training-free refinement of LoRA adapters by singular-value reweighting."""

from spectral_surgeon.adapter_io import (
    EditReport,
    FactorPair,
    GradientDump,
    LoraAdapter,
    export_bases,
    load_adapter,
    load_bases,
    load_gradient_dump,
    save_adapter,
    save_gradient_dump,
)
from spectral_surgeon.alignment import (
    AlignmentMatrix,
    align_subspace,
    align_u1,
    count_edited_scalars,
    intra_layer_synergy,
    layer_heatmap,
    random_overlap_baseline,
)
from spectral_surgeon.policies import (
    EditPolicyConfig,
    alpha_abs_select,
    alpha_grad_direction,
    alpha_random_index,
    alpha_smooth_abs,
    apply_edit,
    selection_counts,
)
from spectral_surgeon.sensitivity import (
    SensitivityProfile,
    aggregate,
    normalize,
    project_gradient,
    sensitivities_from_dump,
)
from spectral_surgeon.spectral import (
    MagnitudeControlConfig,
    SpectralUpdate,
    apply_magnitude_control,
    decompose,
    reconstruct,
    refactor,
)
from spectral_surgeon.toy import (
    ToyProblem,
    build_toy_problem,
    calib_loss_and_grad,
    finite_diff_sensitivity,
    run_end_to_end,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentMatrix",
    "EditPolicyConfig",
    "EditReport",
    "FactorPair",
    "GradientDump",
    "LoraAdapter",
    "MagnitudeControlConfig",
    "SensitivityProfile",
    "SpectralUpdate",
    "ToyProblem",
    "aggregate",
    "align_subspace",
    "align_u1",
    "alpha_abs_select",
    "alpha_grad_direction",
    "alpha_random_index",
    "alpha_smooth_abs",
    "apply_edit",
    "apply_magnitude_control",
    "build_toy_problem",
    "calib_loss_and_grad",
    "count_edited_scalars",
    "decompose",
    "export_bases",
    "finite_diff_sensitivity",
    "intra_layer_synergy",
    "layer_heatmap",
    "load_adapter",
    "load_bases",
    "load_gradient_dump",
    "normalize",
    "project_gradient",
    "random_overlap_baseline",
    "reconstruct",
    "refactor",
    "run_end_to_end",
    "save_adapter",
    "save_gradient_dump",
    "selection_counts",
    "sensitivities_from_dump",
]
