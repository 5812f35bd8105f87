"""Adapter/bases file access and LoRA delta attachment for torch models.

The effective update delta = (alpha/r) * B @ A is attached to each target
module as an explicit leaf tensor added to the module output, so after a
backward pass `delta.grad` is exactly dL/dDeltaW for that module. This is
mathematically identical whether the adapter is merged or kept separate,
since the module is linear in its weight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import load_file

KEY_PREFIX = "base_model.model."
FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


@dataclass(frozen=True)
class AdapterFactors:
    modules: dict[str, tuple[torch.Tensor, torch.Tensor]]  # path -> (A, B)
    rank: int
    lora_alpha: float

    @property
    def scale(self) -> float:
        return self.lora_alpha / self.rank


def load_adapter(path: str | Path, config_path: str | Path) -> AdapterFactors:
    config = json.loads(Path(config_path).read_text())
    tensors = load_file(str(path))
    halves: dict[str, dict[str, torch.Tensor]] = {}
    for key, value in tensors.items():
        if key.startswith(KEY_PREFIX):
            key = key[len(KEY_PREFIX) :]
        for suffix, which in ((".lora_A.weight", "A"), (".lora_B.weight", "B")):
            if key.endswith(suffix):
                halves.setdefault(key[: -len(suffix)], {})[which] = value
                break
        else:
            raise ValueError(f"unrecognized adapter key '{key}'")
    modules = {}
    for module, pair in sorted(halves.items()):
        if set(pair) != {"A", "B"}:
            raise ValueError(f"unpaired factor for module '{module}'")
        modules[module] = (pair["A"].double(), pair["B"].double())
    return AdapterFactors(
        modules=modules, rank=int(config["r"]), lora_alpha=float(config["lora_alpha"])
    )


def load_bases(path: str | Path) -> tuple[dict[str, dict[str, torch.Tensor]], int]:
    """Load exported bases and verify/compute their FNV-1a checksum. The
    checksum covers the raw 32-bit U then V payloads in sorted module order
    and must equal the value the editor computes at edit time."""
    tensors = load_file(str(path))
    with safe_open(str(path), framework="pt") as fh:
        metadata = fh.metadata() or {}
    out: dict[str, dict[str, torch.Tensor]] = {}
    for key, value in tensors.items():
        module, _, kind = key.rpartition(".")
        if kind not in ("U", "V", "sigma") or not module:
            raise ValueError(f"unrecognized bases key '{key}'")
        out.setdefault(module, {})[kind] = value.double()

    h = FNV64_OFFSET
    for module in sorted(out):
        for kind in ("U", "V"):
            data = out[module][kind].float().contiguous().numpy().tobytes()
            for b in data:
                h = ((h ^ b) * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    stored = metadata.get("basis_checksum")
    if stored is not None and int(stored) != h:
        raise ValueError(
            f"bases file checksum {int(stored):#x} does not match payload {h:#x}"
        )
    return out, h


class DeltaHandle:
    """One attached module: holds the leaf delta whose .grad is dL/dDeltaW."""

    def __init__(self, module: torch.nn.Module, delta: torch.Tensor):
        self.module = module
        self.delta = delta
        self._orig_forward = module.forward

    def detach(self) -> None:
        self.module.forward = self._orig_forward

    def grad(self) -> torch.Tensor:
        if self.delta.grad is None:
            raise RuntimeError("no gradient accumulated; run a backward pass first")
        return self.delta.grad

    def zero_grad(self) -> None:
        self.delta.grad = None


def attach_adapter(
    model: torch.nn.Module, factors: AdapterFactors, dtype: torch.dtype = torch.float64
) -> dict[str, DeltaHandle]:
    """Attach every adapter module to its named submodule; the model's own
    parameters are frozen. Raises on module paths the model does not have."""
    for param in model.parameters():
        param.requires_grad_(False)
    handles: dict[str, DeltaHandle] = {}
    for path, (a, b) in factors.modules.items():
        try:
            module = model.get_submodule(path)
        except AttributeError as exc:
            raise ValueError(
                f"adapter module '{path}' not found in the model: {exc}"
            ) from exc
        weight = getattr(module, "weight", None)
        if weight is None or weight.shape != (b.shape[0], a.shape[1]):
            raise ValueError(
                f"module '{path}' incompatible with factors "
                f"({tuple(b.shape)} @ {tuple(a.shape)})"
            )
        delta = (factors.scale * b @ a).to(dtype).detach().requires_grad_(True)
        handle = DeltaHandle(module, delta)
        orig = handle._orig_forward

        def patched(x, _orig=orig, _delta=delta):
            return _orig(x) + torch.nn.functional.linear(x.to(_delta.dtype), _delta)

        module.forward = patched
        handles[path] = handle
    return handles
