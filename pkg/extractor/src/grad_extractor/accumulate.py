"""Per-module gradient accumulation and dump writing.

full_matrix mode stores G = (1/n_cal) sum_i dL_i/dDeltaW per module;
projections mode stores the n_cal x r matrix of per-example rows
g^(i) = diag(U^T G^(i) V) against previously exported bases. Dumps are
written atomically (temp file + rename) in the editor's container format.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Callable, Iterable

import torch
from safetensors.torch import save_file

from grad_extractor.lora import AdapterFactors, DeltaHandle, attach_adapter

MODES = ("full_matrix", "projections")


def project_rows(u: torch.Tensor, v: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """diag(U^T grad V) without materializing rank-1 matrices."""
    return torch.einsum("dk,dk->k", u, grad @ v)


def accumulate(
    model: torch.nn.Module,
    factors: AdapterFactors,
    examples: Iterable,
    loss_fn: Callable[[torch.nn.Module, object], torch.Tensor],
    mode: str = "full_matrix",
    bases: dict[str, dict[str, torch.Tensor]] | None = None,
    basis_checksum: int | None = None,
    seed: int = 0,
) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    """Run `loss_fn(model, example)` per example, backprop, and collect
    per-module gradients. Returns (tensors, metadata) ready to write.

    Examples are processed one at a time: the mean-absolute reducer needs
    per-example magnitudes, so micro-batching would have to keep per-element
    losses separate anyway.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}'")
    if mode == "projections":
        if bases is None:
            raise ValueError("projections mode requires the exported bases")
        missing = sorted(set(factors.modules) - set(bases))
        if missing:
            raise ValueError(f"bases file missing modules: {missing}")

    handles = attach_adapter(model, factors)
    sums: dict[str, torch.Tensor] = {}
    rows: dict[str, list[torch.Tensor]] = {path: [] for path in handles}
    n_cal = 0
    try:
        for example in examples:
            n_cal += 1
            for handle in handles.values():
                handle.zero_grad()
            try:
                loss = loss_fn(model, example)
                loss.backward()
            except RuntimeError as exc:
                if "out of memory" in str(exc).lower():
                    raise RuntimeError(
                        "out of memory during gradient accumulation; reduce the "
                        "micro-batch / sequence length or move to a larger device"
                    ) from exc
                raise
            for path, handle in handles.items():
                grad = handle.grad()
                if mode == "full_matrix":
                    if path in sums:
                        sums[path] += grad
                    else:
                        sums[path] = grad.clone()
                else:
                    rows[path].append(
                        project_rows(bases[path]["U"], bases[path]["V"], grad)
                    )
    finally:
        for handle in handles.values():
            handle.detach()
    if n_cal == 0:
        raise ValueError("no calibration examples supplied")

    metadata = {"mode": mode, "n_cal": str(n_cal), "seed": str(seed)}
    tensors: dict[str, torch.Tensor] = {}
    if mode == "full_matrix":
        for path, total in sums.items():
            tensors[path + ".grad"] = (total / n_cal).float()
    else:
        for path, stack in rows.items():
            tensors[path + ".proj"] = torch.stack(stack).float()
        if basis_checksum is not None:
            metadata["basis_checksum"] = str(basis_checksum)
    return tensors, metadata


def write_dump(
    tensors: dict[str, torch.Tensor], metadata: dict[str, str], path: str | Path
) -> None:
    """Atomic write: the dump appears complete or not at all."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_file(dict(sorted(tensors.items())), str(tmp), metadata=metadata)
    os.replace(tmp, path)


def causal_lm_loss(model: torch.nn.Module, batch) -> torch.Tensor:
    """Mean cross-entropy over the answer tokens of one example; positions
    labeled -100 contribute nothing."""
    logits = model(batch.input_ids.unsqueeze(0)).squeeze(0)
    return torch.nn.functional.cross_entropy(
        logits, batch.labels, ignore_index=-100, reduction="mean"
    )


def regression_loss(model: torch.nn.Module, example) -> torch.Tensor:
    """Half squared error for one (input, target) pair of the linear toy
    problem; averaging its per-example gradients reproduces the editor's
    analytic G."""
    x, y = example
    pred = model(x.unsqueeze(0)).squeeze(0)
    return 0.5 * torch.sum((pred - y) ** 2)
