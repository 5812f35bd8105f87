"""Load and save LoRA adapters, gradient dumps, exported bases, and edit reports.

All tensors are promoted to float64 on load; the source precision tag is kept
per factor pair so an unedited pair writes back bit-exactly. Edited pairs are
written as 32-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from spectral_surgeon._fnv import FNV64_OFFSET, fnv1a
from spectral_surgeon.container import ContainerError, read_tensors, write_tensors

DEFAULT_KEY_PREFIX = "base_model.model."
LORA_A_SUFFIX = ".lora_A.weight"
LORA_B_SUFFIX = ".lora_B.weight"


class AdapterError(ContainerError):
    """Adapter file or config violates the format contract."""


class DumpError(ContainerError):
    """Gradient dump violates the format contract."""


def module_family(path: str) -> str:
    """Family name of a module path, e.g. 'model.layers.3.self_attn.o_proj' -> 'o_proj'."""
    return path.rsplit(".", 1)[-1]


def module_layer(path: str) -> int | None:
    """Layer index parsed from a '...layers.<n>...' segment, None if absent."""
    parts = path.split(".")
    for i, part in enumerate(parts[:-1]):
        if part == "layers" and parts[i + 1].isdigit():
            return int(parts[i + 1])
    return None


@dataclass(frozen=True)
class FactorPair:
    """One module's low-rank factors: a_matrix is r x d_in, b_matrix is d_out x r."""

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    source_dtype: str = "F32"  # "F32" or "F16"; controls write-back precision

    def __post_init__(self):
        a, b = self.a_matrix, self.b_matrix
        if a.ndim != 2 or b.ndim != 2:
            raise AdapterError("factors must be 2-D matrices")
        if a.shape[0] != b.shape[1]:
            raise AdapterError(
                f"rank mismatch between factors: A has {a.shape[0]} rows, "
                f"B has {b.shape[1]} columns"
            )
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise AdapterError("factors contain non-finite values")

    @property
    def rank(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def d_in(self) -> int:
        return self.a_matrix.shape[1]

    @property
    def d_out(self) -> int:
        return self.b_matrix.shape[0]


@dataclass(frozen=True)
class LoraAdapter:
    """A full adapter: ordered module-path -> FactorPair map plus its config."""

    modules: dict[str, FactorPair]
    rank: int
    lora_alpha: float
    target_modules: tuple[str, ...]
    key_prefix: str = ""  # stripped on load, restored on save

    def __post_init__(self):
        if self.rank < 1:
            raise AdapterError(f"rank must be >= 1, got {self.rank}")
        if self.lora_alpha <= 0:
            raise AdapterError(f"lora_alpha must be positive, got {self.lora_alpha}")
        for path, pair in self.modules.items():
            if pair.rank != self.rank:
                raise AdapterError(
                    f"rank mismatch for module '{path}': adapter r={self.rank}, "
                    f"factors have r={pair.rank}"
                )
            if self.rank > min(pair.d_out, pair.d_in):
                raise AdapterError(
                    f"rank {self.rank} exceeds min dimension of module '{path}'"
                )

    @property
    def scale(self) -> float:
        """Effective-update multiplier: the edit target is scale * B @ A."""
        return self.lora_alpha / self.rank

    def filter_paths(self, families: Iterable[str]) -> list[str]:
        """Sorted module paths whose family is in `families`."""
        fams = set(families)
        return sorted(p for p in self.modules if module_family(p) in fams)


@dataclass(frozen=True)
class GradientDump:
    """Calibration gradients, either one full matrix per module or per-example
    projections (n_cal x r) onto previously exported bases."""

    mode: str  # "full_matrix" | "projections"
    entries: dict[str, np.ndarray]
    n_cal: int
    seed: int = 0
    basis_checksum: int | None = None

    def __post_init__(self):
        if self.mode not in ("full_matrix", "projections"):
            raise DumpError(f"unknown gradient mode '{self.mode}'")
        if self.n_cal < 1:
            raise DumpError(f"n_cal must be >= 1, got {self.n_cal}")
        if self.mode == "projections":
            widths = {arr.shape[1] for arr in self.entries.values()}
            if len(widths) > 1:
                raise DumpError(f"inconsistent projection column counts: {sorted(widths)}")


def _split_lora_key(key: str, prefix: str) -> tuple[str, str] | None:
    """Return (module_path, 'A'|'B') for a LoRA weight key, else None."""
    if prefix and key.startswith(prefix):
        key = key[len(prefix) :]
    if key.endswith(LORA_A_SUFFIX):
        return key[: -len(LORA_A_SUFFIX)], "A"
    if key.endswith(LORA_B_SUFFIX):
        return key[: -len(LORA_B_SUFFIX)], "B"
    return None


def load_adapter(path: str | Path, config_path: str | Path) -> LoraAdapter:
    """Load an adapter file plus its JSON config (fields r, lora_alpha,
    target_modules). Modules are ordered lexicographically by path."""
    try:
        config = json.loads(Path(config_path).read_text())
    except json.JSONDecodeError as exc:
        raise AdapterError(f"{config_path}: config is not valid JSON: {exc}") from exc
    missing = [k for k in ("r", "lora_alpha", "target_modules") if k not in config]
    if missing:
        raise AdapterError(f"{config_path}: missing config fields {missing}")

    tensors, _ = read_tensors(path)
    prefix = ""
    if any(k.startswith(DEFAULT_KEY_PREFIX) for k in tensors):
        prefix = DEFAULT_KEY_PREFIX

    halves: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        split = _split_lora_key(key, prefix)
        if split is None:
            raise AdapterError(f"{path}: unrecognized tensor key '{key}'")
        module, which = split
        halves.setdefault(module, {})[which] = arr

    modules: dict[str, FactorPair] = {}
    for module in sorted(halves):
        pair = halves[module]
        if "A" not in pair or "B" not in pair:
            raise AdapterError(f"{path}: unpaired factor for module '{module}'")
        src = "F16" if pair["A"].dtype.itemsize == 2 else "F32"
        modules[module] = FactorPair(
            a_matrix=pair["A"].astype(np.float64),
            b_matrix=pair["B"].astype(np.float64),
            source_dtype=src,
        )

    adapter = LoraAdapter(
        modules=modules,
        rank=int(config["r"]),
        lora_alpha=float(config["lora_alpha"]),
        target_modules=tuple(config["target_modules"]),
        key_prefix=prefix,
    )
    return adapter


def save_adapter(adapter: LoraAdapter, path: str | Path, config_path: str | Path | None = None) -> None:
    """Write the adapter (keys sorted, original prefix restored) and, when
    `config_path` is given, the config JSON alongside."""
    tensors: dict[str, np.ndarray] = {}
    for module, pair in adapter.modules.items():
        dtype = np.float16 if pair.source_dtype == "F16" else np.float32
        tensors[adapter.key_prefix + module + LORA_A_SUFFIX] = pair.a_matrix.astype(dtype)
        tensors[adapter.key_prefix + module + LORA_B_SUFFIX] = pair.b_matrix.astype(dtype)
    write_tensors(path, tensors)
    if config_path is not None:
        config = {
            "r": adapter.rank,
            "lora_alpha": adapter.lora_alpha,
            "target_modules": list(adapter.target_modules),
        }
        Path(config_path).write_text(json.dumps(config, indent=2) + "\n")


def load_gradient_dump(path: str | Path) -> GradientDump:
    """Load a gradient dump: keys '<module>.grad' (full_matrix mode) or
    '<module>.proj' (projections mode), plus n_cal/seed metadata."""
    tensors, metadata = read_tensors(path)

    entries: dict[str, np.ndarray] = {}
    modes = set()
    for key, arr in tensors.items():
        if key.endswith(".grad"):
            modes.add("full_matrix")
            entries[key[: -len(".grad")]] = arr.astype(np.float64)
        elif key.endswith(".proj"):
            modes.add("projections")
            entries[key[: -len(".proj")]] = arr.astype(np.float64)
        else:
            raise DumpError(f"{path}: unrecognized tensor key '{key}'")
    if len(modes) > 1:
        raise DumpError(f"{path}: mixed gradient modes")

    if "mode" not in metadata or "n_cal" not in metadata:
        raise DumpError(f"{path}: missing dump metadata (mode, n_cal)")
    mode = metadata["mode"]
    if modes and modes != {mode}:
        raise DumpError(f"{path}: metadata mode '{mode}' does not match tensor keys")
    n_cal = int(metadata["n_cal"])
    if n_cal < 1:
        raise DumpError(f"{path}: n_cal must be >= 1, got {n_cal}")
    checksum = metadata.get("basis_checksum")
    return GradientDump(
        mode=mode,
        entries=entries,
        n_cal=n_cal,
        seed=int(metadata.get("seed", 0)),
        basis_checksum=int(checksum) if checksum is not None else None,
    )


def save_gradient_dump(dump: GradientDump, path: str | Path) -> None:
    suffix = ".grad" if dump.mode == "full_matrix" else ".proj"
    tensors = {
        module + suffix: arr.astype(np.float32) for module, arr in dump.entries.items()
    }
    metadata = {"mode": dump.mode, "n_cal": str(dump.n_cal), "seed": str(dump.seed)}
    if dump.basis_checksum is not None:
        metadata["basis_checksum"] = str(dump.basis_checksum)
    write_tensors(path, tensors, metadata)


def bases_checksum(bases: dict[str, tuple[np.ndarray, np.ndarray]]) -> int:
    """FNV-1a over the 32-bit U then V payloads, modules in sorted order.

    Detects stale projections: a dump made against different bases than the
    adapter currently decomposes to will carry a different checksum.
    """
    h = FNV64_OFFSET
    for module in sorted(bases):
        u, v = bases[module]
        h = fnv1a(np.ascontiguousarray(u, dtype="<f4").tobytes(), h)
        h = fnv1a(np.ascontiguousarray(v, dtype="<f4").tobytes(), h)
    return h


def export_bases(decompositions: list, path: str | Path) -> int:
    """Write '<module>.U', '<module>.V', '<module>.sigma' in 32-bit for each
    decomposition; returns the basis checksum (also stored in metadata)."""
    tensors: dict[str, np.ndarray] = {}
    pairs: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for spec in decompositions:
        tensors[spec.module_path + ".U"] = spec.u_basis.astype(np.float32)
        tensors[spec.module_path + ".V"] = spec.v_basis.astype(np.float32)
        tensors[spec.module_path + ".sigma"] = spec.sigma.astype(np.float32)
        pairs[spec.module_path] = (spec.u_basis, spec.v_basis)
    checksum = bases_checksum(pairs)
    write_tensors(path, tensors, {"basis_checksum": str(checksum)})
    return checksum


def load_bases(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], int | None]:
    """Load an exported-bases file: module -> {'U','V','sigma'} float64 arrays."""
    tensors, metadata = read_tensors(path)
    out: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        module, _, kind = key.rpartition(".")
        if kind not in ("U", "V", "sigma") or not module:
            raise ContainerError(f"{path}: unrecognized tensor key '{key}'")
        out.setdefault(module, {})[kind] = arr.astype(np.float64)
    for module, parts in out.items():
        if set(parts) != {"U", "V", "sigma"}:
            raise ContainerError(f"{path}: incomplete basis triple for '{module}'")
    checksum = metadata.get("basis_checksum")
    return out, int(checksum) if checksum is not None else None


REPORT_SCHEMA_VERSION = 1


@dataclass
class ModuleEditRecord:
    """Per-module entry of an edit report."""

    module_path: str
    alpha: np.ndarray
    sigma_pre: np.ndarray
    sigma_post: np.ndarray
    energy_ratio_pre_renorm: float
    energy_ratio: float
    warnings: tuple[str, ...] = ()
    k_core: int | None = None
    k_noise: int | None = None

    def to_dict(self) -> dict:
        d = {
            "module": self.module_path,
            "alpha": [float(v) for v in self.alpha],
            "sigma_pre": [float(v) for v in self.sigma_pre],
            "sigma_post": [float(v) for v in self.sigma_post],
            "energy_ratio_pre_renorm": self.energy_ratio_pre_renorm,
            "energy_ratio": self.energy_ratio,
            "warnings": list(self.warnings),
        }
        if self.k_core is not None:
            d["k_core"] = self.k_core
        if self.k_noise is not None:
            d["k_noise"] = self.k_noise
        return d


@dataclass
class EditReport:
    """Full report for one edit run: config echo plus per-module records."""

    policy: str
    config: dict
    records: list[ModuleEditRecord] = field(default_factory=list)

    @property
    def total_edited_scalars(self) -> int:
        return sum(len(rec.alpha) for rec in self.records)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "policy": self.policy,
            "config": self.config,
            "total_edited_scalars": self.total_edited_scalars,
            "modules": [rec.to_dict() for rec in sorted(self.records, key=lambda r: r.module_path)],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
