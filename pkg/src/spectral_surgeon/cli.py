"""Command-line entry point.

Exit codes: 0 on success, 1 on invariant/coverage/verification failure
(structured error JSON on stderr), 2 on usage errors. Per-module work runs
on a thread pool capped by SPECTRAL_SURGEON_THREADS; outputs are assembled
in sorted module order regardless of completion order.
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from spectral_surgeon import alignment as align_mod
from spectral_surgeon.adapter_io import (
    EditReport,
    LoraAdapter,
    export_bases,
    load_adapter,
    load_gradient_dump,
    module_layer,
    save_adapter,
)
from spectral_surgeon.container import ContainerError
from spectral_surgeon.policies import POLICIES, EditPolicyConfig, apply_edit
from spectral_surgeon.sensitivity import sensitivities_from_dump
from spectral_surgeon.spectral import DecompositionError, MagnitudeControlConfig, decompose, refactor
from spectral_surgeon.toy import build_toy_problem, emit_files, run_end_to_end
from spectral_surgeon.verify import run_suites

DEFAULT_FAMILIES = "o_proj,down_proj"

_HANDLED_ERRORS = (ContainerError, DecompositionError, ValueError)


def _max_workers() -> int:
    env = os.environ.get("SPECTRAL_SURGEON_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def _parallel_map(fn, items: list):
    if _max_workers() == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        return list(pool.map(fn, items))


def _fail(exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


def _parse_families(modules: str) -> list[str]:
    fams = [m.strip() for m in modules.split(",") if m.strip()]
    if not fams:
        raise click.UsageError("--modules must name at least one family")
    return fams


def _filtered_paths(adapter: LoraAdapter, families: list[str]) -> list[str]:
    paths = adapter.filter_paths(families)
    if not paths:
        raise ValueError(f"no modules matched families {families}")
    return paths


def _decompose_all(adapter: LoraAdapter, paths: list[str]):
    specs = _parallel_map(
        lambda p: decompose(adapter.modules[p], adapter.scale, p), paths
    )
    return dict(zip(paths, specs))


def policy_options(f):
    opts = [
        click.option("--policy", type=click.Choice(POLICIES), default="smooth_abs", show_default=True),
        click.option("--core-frac", type=float, default=0.2, show_default=True),
        click.option("--noise-frac", type=float, default=0.2, show_default=True),
        click.option("--min-core-k", type=int, default=1, show_default=True),
        click.option("--amp-factor", type=float, default=1.25, show_default=True),
        click.option("--sup-factor", type=float, default=0.80, show_default=True),
        click.option("--mid-factor", type=float, default=1.0, show_default=True),
        click.option("--smooth-temperature", type=float, default=0.35, show_default=True),
        click.option("--smooth-center-q", type=float, default=0.5, show_default=True),
        click.option("--smooth-align-mid", is_flag=True, default=False),
        click.option("--eta-suppress", type=float, default=2.0, show_default=True),
        click.option("--eta-enhance", type=float, default=0.2, show_default=True),
        click.option("--eta", type=float, default=0.5, show_default=True),
        click.option("--asymmetric-update/--symmetric-update", default=True, show_default=True),
        click.option("--grad-power", type=float, default=1.0, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--sigma-clip-min", type=float, default=0.0, show_default=True),
        click.option("--preserve-energy", type=click.Choice(["l1", "none"]), default="l1", show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _config_from_flags(**kw) -> EditPolicyConfig:
    return EditPolicyConfig(
        policy=kw["policy"],
        core_frac=kw["core_frac"],
        noise_frac=kw["noise_frac"],
        min_core_k=kw["min_core_k"],
        amp_factor=kw["amp_factor"],
        sup_factor=kw["sup_factor"],
        mid_factor=kw["mid_factor"],
        smooth_temperature=kw["smooth_temperature"],
        smooth_center_q=kw["smooth_center_q"],
        smooth_align_mid=kw["smooth_align_mid"],
        eta_suppress=kw["eta_suppress"],
        eta_enhance=kw["eta_enhance"],
        eta=kw["eta"],
        asymmetric_update=kw["asymmetric_update"],
        grad_power=kw["grad_power"],
        seed=kw["seed"],
        magnitude=MagnitudeControlConfig(
            sigma_clip_min=kw["sigma_clip_min"], energy_mode=kw["preserve_energy"]
        ),
    )


@click.group()
def main():
    """Spectrum-only editing of trained LoRA adapters."""


@main.command("decompose")
@click.option("--adapter", "adapter_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out-bases", type=click.Path(), default=None)
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--modules", default=DEFAULT_FAMILIES, show_default=True)
def cmd_decompose(adapter_path, config_path, out_bases, report_path, modules):
    """Decompose the filtered modules; export bases and a spectrum report."""
    families = _parse_families(modules)
    try:
        adapter = load_adapter(adapter_path, config_path)
        paths = _filtered_paths(adapter, families)
        specs = _decompose_all(adapter, paths)
        checksum = None
        if out_bases:
            checksum = export_bases(list(specs.values()), out_bases)
        layers = {module_layer(p) for p in paths}
        report = {
            "schema_version": 1,
            "modules": {
                p: {
                    "sigma": [float(v) for v in s.sigma],
                    "l1_energy": float(s.sigma.sum()),
                    "fro_energy": float(np.sqrt((s.sigma**2).sum())),
                }
                for p, s in specs.items()
            },
            "num_modules": len(paths),
            "num_layers": len(layers),
            "families": families,
            "edited_scalars": len(paths) * adapter.rank,
        }
        if checksum is not None:
            report["basis_checksum"] = checksum
        if report_path:
            Path(report_path).write_text(json.dumps(report, indent=2) + "\n")
        click.echo(json.dumps({"status": "ok", "modules": len(paths), "edited_scalars": report["edited_scalars"]}))
    except _HANDLED_ERRORS as exc:
        _fail(exc)


@main.command("edit")
@click.option("--adapter", "adapter_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--grads", "grads_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--out-config", type=click.Path(), default=None)
@click.option("--report", "report_path", type=click.Path(), default=None)
@click.option("--modules", default=DEFAULT_FAMILIES, show_default=True)
@click.option("--reducer", type=click.Choice(["mean_abs", "mean_signed"]), default="mean_abs", show_default=True)
@policy_options
def cmd_edit(adapter_path, config_path, grads_path, out_path, out_config, report_path, modules, reducer, **kw):
    """Edit the filtered modules' spectra; copy all other tensors verbatim."""
    families = _parse_families(modules)
    cfg = _config_from_flags(**kw)
    try:
        adapter = load_adapter(adapter_path, config_path)
        paths = _filtered_paths(adapter, families)
        dump = load_gradient_dump(grads_path)
        specs = _decompose_all(adapter, paths)
        profiles = sensitivities_from_dump(specs, dump, reducer)

        report = EditReport(policy=cfg.policy, config=cfg.to_dict())

        def edit_one(path: str):
            edited, record = apply_edit(specs[path], profiles[path], cfg)
            return path, refactor(edited), record

        new_modules = dict(adapter.modules)
        for path, pair, record in _parallel_map(edit_one, paths):
            new_modules[path] = pair
            report.records.append(record)

        edited_adapter = LoraAdapter(
            modules=dict(sorted(new_modules.items())),
            rank=adapter.rank,
            lora_alpha=adapter.lora_alpha,
            target_modules=adapter.target_modules,
            key_prefix=adapter.key_prefix,
        )
        save_adapter(edited_adapter, out_path, out_config)
        if report_path:
            report.save(report_path)
        click.echo(
            json.dumps(
                {
                    "status": "ok",
                    "policy": cfg.policy,
                    "edited_modules": len(paths),
                    "total_edited_scalars": report.total_edited_scalars,
                }
            )
        )
    except _HANDLED_ERRORS as exc:
        _fail(exc)


@main.command("analyze")
@click.option("--adapter", "adapter_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--family", default="o_proj", show_default=True)
@click.option("--metric", type=click.Choice(align_mod.METRICS), default="subspace_overlap", show_default=True)
@click.option("--m", "m_dim", type=int, default=4, show_default=True)
@click.option("--out-csv", required=True, type=click.Path())
@click.option("--synergy", is_flag=True, default=False, help="Also report per-layer o_proj/down_proj overlap.")
def cmd_analyze(adapter_path, config_path, family, metric, m_dim, out_csv, synergy):
    """Pairwise cross-layer alignment heatmap (CSV + JSON sidecar)."""
    try:
        adapter = load_adapter(adapter_path, config_path)
        matrix = align_mod.layer_heatmap(adapter, family, metric, m_dim)
        align_mod.write_heatmap_csv(matrix, out_csv)
        result = {
            "status": "ok",
            "metric": metric,
            "family": family,
            "m": matrix.m,
            "layers": list(matrix.layer_ids),
            "baseline": matrix.baseline,
        }
        if synergy:
            values, baseline = align_mod.intra_layer_synergy(adapter, m_dim)
            result["synergy"] = {
                "per_layer": [[layer, value] for layer, value in values],
                "baseline": baseline,
            }
        click.echo(json.dumps(result))
    except _HANDLED_ERRORS as exc:
        _fail(exc)


@main.command("verify")
@click.option("--scope", default="all", show_default=True,
              help="Comma list of suites (svd, containment, finite_diff, energy, noop) or 'all'.")
@click.option("--inject", type=click.Choice(["sigma-order"]), default=None, hidden=True)
def cmd_verify(scope, inject):
    """Run the invariant suites on synthetic problems."""
    names = None if scope == "all" else [s.strip() for s in scope.split(",") if s.strip()]
    try:
        results = run_suites(names, inject=inject)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    payload = {
        "passed": all(r.passed for r in results),
        "suites": [r.to_dict() for r in results],
    }
    click.echo(json.dumps(payload, indent=2))
    if not payload["passed"]:
        failed = [r.name for r in results if not r.passed]
        click.echo(json.dumps({"error": "VerificationFailure", "message": f"suites failed: {failed}"}), err=True)
        sys.exit(1)


@main.command("toy-demo")
@click.option("--dims", default="48,32,8,64", show_default=True, help="d_out,d_in,r,n_cal")
@click.option("--noise", type=float, default=1e-3, show_default=True)
@click.option("--emit", "emit_dir", type=click.Path(), default=None,
              help="Also write adapter/config/grads/bases/problem files here.")
@click.option("--mode", type=click.Choice(["full_matrix", "projections"]), default="full_matrix", show_default=True)
@policy_options
def cmd_toy_demo(dims, noise, emit_dir, mode, **kw):
    """Build a synthetic problem, run one edit, and report both losses.

    --seed drives both the problem construction and the policy RNG.
    """
    try:
        parsed = tuple(int(v) for v in dims.split(","))
        if len(parsed) != 4:
            raise click.UsageError("--dims must be d_out,d_in,r,n_cal")
        cfg = _config_from_flags(**kw)
        problem = build_toy_problem(kw["seed"], parsed, noise=noise)
        loss_before, loss_after, report = run_end_to_end(problem, cfg)
        if emit_dir:
            emit_files(problem, emit_dir, mode=mode)
        click.echo(
            json.dumps(
                {
                    "status": "ok",
                    "loss_before": loss_before,
                    "loss_after": loss_after,
                    "report": report.to_dict(),
                }
            )
        )
    except _HANDLED_ERRORS as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
