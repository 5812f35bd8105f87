"""Extract calibration gradients into a dump the spectrum editor consumes.

Two built-in model sources keep the bridge self-contained: --problem replays
the editor's exported linear toy problem, --demo-tiny runs a small randomly
initialized language model over a JSONL prompt/answer dataset. Real models
go through the Python API (any torch module with nameable linear modules).
"""

from __future__ import annotations

import json
import sys

import click
import torch

from grad_extractor.accumulate import (
    accumulate,
    causal_lm_loss,
    regression_loss,
    write_dump,
)
from grad_extractor.calibration import CalibrationSpec, build_calibration_batches, load_pairs
from grad_extractor.lora import load_adapter, load_bases
from grad_extractor.models import TinyLM, WhitespaceTokenizer, load_toy_problem


def _fail(exc: Exception) -> None:
    click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
    sys.exit(1)


@click.command()
@click.option("--adapter", "adapter_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["full_matrix", "projections"]), default="full_matrix", show_default=True)
@click.option("--bases", "bases_path", type=click.Path(exists=True), default=None,
              help="Exported bases file (required in projections mode).")
@click.option("--problem", "problem_path", type=click.Path(exists=True), default=None,
              help="Editor-exported toy problem file (regression loss).")
@click.option("--demo-tiny", is_flag=True, default=False,
              help="Run a tiny random LM over --dataset (causal LM loss).")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--n-cal", type=int, default=128, show_default=True,
              help="Calibration examples; 0 takes every example of a --problem file.")
@click.option("--shuffle/--no-shuffle", default=False, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--offset", type=int, default=0, show_default=True)
@click.option("--max-length", type=int, default=None)
@click.option("--sep-space/--no-sep-space", default=True, show_default=True)
@click.option("--eos/--no-eos", default=True, show_default=True)
def main(adapter_path, config_path, out_path, mode, bases_path, problem_path,
         demo_tiny, dataset_path, n_cal, shuffle, seed, offset, max_length,
         sep_space, eos):
    """Write a gradient dump for the given adapter."""
    if (problem_path is None) == (not demo_tiny):
        raise click.UsageError("choose exactly one of --problem or --demo-tiny")
    if mode == "projections" and bases_path is None:
        raise click.UsageError("--bases is required in projections mode")
    try:
        factors = load_adapter(adapter_path, config_path)
        bases = checksum = None
        if bases_path is not None:
            bases, checksum = load_bases(bases_path)

        if problem_path is not None:
            model, module_path, examples, _ = load_toy_problem(problem_path)
            if module_path not in factors.modules:
                raise ValueError(
                    f"adapter does not cover problem module '{module_path}'"
                )
            factors = type(factors)(
                modules={module_path: factors.modules[module_path]},
                rank=factors.rank,
                lora_alpha=factors.lora_alpha,
            )
            examples = examples[offset : offset + n_cal] if n_cal else examples
            loss_fn = regression_loss
        else:
            if dataset_path is None:
                raise click.UsageError("--demo-tiny requires --dataset")
            pairs = load_pairs(dataset_path)
            tokenizer = WhitespaceTokenizer(
                [p["prompt"] + " " + p.get("answer", "") for p in pairs]
            )
            spec = CalibrationSpec(
                dataset_path=dataset_path,
                n_cal=n_cal,
                shuffle=shuffle,
                seed=seed,
                offset=offset,
                max_length=max_length,
                add_sep_space=sep_space,
                add_eos=eos,
            )
            examples, dropped = build_calibration_batches(spec, tokenizer, pairs)
            if dropped:
                click.echo(json.dumps({"dropped_examples": dropped}), err=True)
            model = TinyLM(tokenizer.vocab_size, seed=seed).double()
            loss_fn = causal_lm_loss

        tensors, metadata = accumulate(
            model,
            factors,
            examples,
            loss_fn,
            mode=mode,
            bases=bases,
            basis_checksum=checksum,
            seed=seed,
        )
        write_dump(tensors, metadata, out_path)
        click.echo(
            json.dumps(
                {
                    "status": "ok",
                    "mode": mode,
                    "modules": len(tensors),
                    "n_cal": int(metadata["n_cal"]),
                    "out": str(out_path),
                }
            )
        )
    except (ValueError, RuntimeError, OSError) as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
