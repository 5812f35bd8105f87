"""Calibration-gradient extraction for LoRA spectrum editing."""

from grad_extractor.accumulate import (
    accumulate,
    causal_lm_loss,
    project_rows,
    regression_loss,
    write_dump,
)
from grad_extractor.calibration import (
    Batch,
    CalibrationSpec,
    build_calibration_batches,
    load_pairs,
)
from grad_extractor.lora import AdapterFactors, attach_adapter, load_adapter, load_bases
from grad_extractor.models import (
    LinearToyModel,
    TinyLM,
    WhitespaceTokenizer,
    load_toy_problem,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterFactors",
    "Batch",
    "CalibrationSpec",
    "LinearToyModel",
    "TinyLM",
    "WhitespaceTokenizer",
    "accumulate",
    "attach_adapter",
    "build_calibration_batches",
    "causal_lm_loss",
    "load_adapter",
    "load_bases",
    "load_pairs",
    "load_toy_problem",
    "project_rows",
    "regression_loss",
    "write_dump",
]
