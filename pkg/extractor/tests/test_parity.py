"""Cross-component checks against the spectrum editor, purely through files
and its CLI: the extractor's full-matrix G must match the editor's analytic
gradient on the exported toy problem, and an extractor-produced projections
dump must drive a full edit run."""

import json
import subprocess
import sys

import numpy as np
import pytest
from safetensors import safe_open
from safetensors.numpy import load_file

from grad_extractor.accumulate import accumulate, regression_loss, write_dump
from grad_extractor.lora import load_adapter, load_bases
from grad_extractor.models import load_toy_problem


def run_editor(*args):
    proc = subprocess.run(
        [sys.executable, "-m", "spectral_surgeon.cli", *args],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr or proc.stdout
    return proc.stdout


@pytest.fixture(scope="module")
def emitted(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    run_editor(
        "toy-demo", "--seed", "17", "--emit", str(out), "--mode", "full_matrix"
    )
    return out


def test_full_matrix_parity_with_analytic_gradient(emitted, tmp_path):
    factors = load_adapter(emitted / "adapter.safetensors", emitted / "adapter_config.json")
    model, module_path, examples, _ = load_toy_problem(emitted / "problem.safetensors")
    factors = type(factors)(
        modules={module_path: factors.modules[module_path]},
        rank=factors.rank,
        lora_alpha=factors.lora_alpha,
    )
    tensors, metadata = accumulate(
        model, factors, examples, regression_loss, mode="full_matrix"
    )
    assert metadata["n_cal"] == str(len(examples))

    ours = tensors[module_path + ".grad"].double().numpy()
    reference = load_file(str(emitted / "grads.safetensors"))[module_path + ".grad"]
    rel = np.linalg.norm(ours - reference) / np.linalg.norm(reference)
    assert rel <= 1e-4, f"relative error {rel:.3e}"


def test_projections_dump_drives_editor_edit(emitted, tmp_path):
    factors = load_adapter(emitted / "adapter.safetensors", emitted / "adapter_config.json")
    model, module_path, examples, _ = load_toy_problem(emitted / "problem.safetensors")
    factors = type(factors)(
        modules={module_path: factors.modules[module_path]},
        rank=factors.rank,
        lora_alpha=factors.lora_alpha,
    )
    bases, checksum = load_bases(emitted / "bases.safetensors")
    tensors, metadata = accumulate(
        model,
        factors,
        examples,
        regression_loss,
        mode="projections",
        bases=bases,
        basis_checksum=checksum,
    )
    dump_path = tmp_path / "extractor_dump.safetensors"
    write_dump(tensors, metadata, dump_path)

    # checksum in the dump equals the checksum of the bases file
    with safe_open(str(emitted / "bases.safetensors"), framework="pt") as fh:
        assert metadata["basis_checksum"] == fh.metadata()["basis_checksum"]

    out = tmp_path / "edited.safetensors"
    report = tmp_path / "report.json"
    run_editor(
        "edit",
        "--adapter", str(emitted / "adapter.safetensors"),
        "--config", str(emitted / "adapter_config.json"),
        "--grads", str(dump_path),
        "--out", str(out),
        "--report", str(report),
        "--policy", "smooth_abs",
    )
    payload = json.loads(report.read_text())
    assert payload["modules"][0]["module"] == module_path
    assert abs(payload["modules"][0]["energy_ratio"] - 1.0) <= 1e-9


def test_extractor_cli_round_trip(emitted, tmp_path):
    out = tmp_path / "cli_dump.safetensors"
    proc = subprocess.run(
        [
            sys.executable, "-m", "grad_extractor.cli",
            "--adapter", str(emitted / "adapter.safetensors"),
            "--config", str(emitted / "adapter_config.json"),
            "--problem", str(emitted / "problem.safetensors"),
            "--out", str(out),
            "--mode", "full_matrix",
            "--n-cal", "0",
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr or proc.stdout
    payload = json.loads(proc.stdout)
    assert payload["status"] == "ok"
    reference = load_file(str(emitted / "grads.safetensors"))
    ours = load_file(str(out))
    key = next(iter(reference))
    rel = np.linalg.norm(ours[key] - reference[key]) / np.linalg.norm(reference[key])
    assert rel <= 1e-4
