"""Desk-scale models for tests and demos.

TinyLM names its projections exactly like transformer adapters expect
(model.layers.<i>.self_attn.o_proj / .mlp.down_proj). With mix_positions off
every position is processed independently, which isolates the loss-masking
property: perturbing a masked-position token cannot change the gradient.
LinearToyModel reconstructs the editor's exported regression problem.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import load_file
from torch import nn


class WhitespaceTokenizer:
    """Deterministic toy tokenizer: whitespace tokens over a fixed vocab."""

    def __init__(self, texts: list[str]):
        words = sorted({w for t in texts for w in t.split()})
        self.vocab = {w: i + 2 for i, w in enumerate(words)}
        self.unk_token_id = 0
        self.eos_token_id = 1

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 2

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(w, self.unk_token_id) for w in text.split()]


class _Block(nn.Module):
    def __init__(self, d_model: int, mix_positions: bool):
        super().__init__()
        self.mix_positions = mix_positions
        self.self_attn = nn.Module()
        self.self_attn.o_proj = nn.Linear(d_model, d_model, bias=False)
        self.mlp = nn.Module()
        self.mlp.down_proj = nn.Linear(d_model, d_model, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if self.mix_positions:
            # causal uniform attention: position t sees the mean of 0..t
            counts = torch.arange(1, h.shape[1] + 1, device=h.device, dtype=h.dtype)
            mixed = torch.cumsum(h, dim=1) / counts[None, :, None]
        else:
            mixed = h
        h = h + self.self_attn.o_proj(torch.tanh(mixed))
        return h + self.mlp.down_proj(torch.tanh(h))


class TinyLM(nn.Module):
    """Embedding -> n_layers blocks -> unembedding, all named like a
    standard decoder so adapter module paths resolve via get_submodule."""

    def __init__(
        self,
        vocab_size: int,
        d_model: int = 16,
        n_layers: int = 2,
        mix_positions: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        torch.manual_seed(seed)
        self.model = nn.Module()
        self.model.embed_tokens = nn.Embedding(vocab_size, d_model)
        self.model.layers = nn.ModuleList(
            _Block(d_model, mix_positions) for _ in range(n_layers)
        )
        self.lm_head = nn.Linear(d_model, vocab_size, bias=False)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        h = self.model.embed_tokens(input_ids)
        for block in self.model.layers:
            h = block(h)
        return self.lm_head(h)


class LinearToyModel(nn.Module):
    """y = x W^T with a frozen weight, registered under an arbitrary dotted
    module path (numeric segments become ModuleList indices) so adapter
    attachment resolves it like any transformer projection."""

    def __init__(self, module_path: str, weight: torch.Tensor):
        super().__init__()
        parts = module_path.split(".")
        parent: nn.Module = self
        for i, name in enumerate(parts[:-1]):
            if name.isdigit():
                while len(parent) <= int(name):  # parent is a ModuleList
                    parent.append(nn.Module())
                parent = parent[int(name)]
                continue
            if not hasattr(parent, name):
                next_is_index = i + 1 < len(parts) and parts[i + 1].isdigit()
                setattr(parent, name, nn.ModuleList() if next_is_index else nn.Module())
            parent = getattr(parent, name)
        linear = nn.Linear(weight.shape[1], weight.shape[0], bias=False)
        with torch.no_grad():
            linear.weight.copy_(weight)
        setattr(parent, parts[-1], linear)
        self._entry = module_path

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.get_submodule(self._entry)(x)


def load_toy_problem(path: str | Path):
    """Read the editor-exported problem file: frozen weight plus calibration
    inputs/targets, and the metadata naming the adapted module."""
    tensors = load_file(str(path))
    with safe_open(str(path), framework="pt") as fh:
        metadata = fh.metadata() or {}
    module_path = metadata.get("module_path")
    if module_path is None:
        raise ValueError(f"{path}: problem file missing module_path metadata")
    w = tensors["w_frozen"].double()
    x = tensors["calib_inputs"].double()
    y = tensors["calib_targets"].double()
    model = LinearToyModel(module_path, w).double()
    return model, module_path, list(zip(x, y)), metadata
