import numpy as np
import pytest

from spectral_surgeon.adapter_io import FactorPair, LoraAdapter


def make_adapter(
    rng: np.random.Generator,
    n_layers: int = 2,
    families: dict[str, str] | None = None,
    r: int = 4,
    d_out: int = 24,
    d_in: int = 20,
    lora_alpha: float | None = None,
) -> LoraAdapter:
    """Synthetic adapter with one module per (layer, family).

    `families` maps family name to its branch, e.g. {"o_proj": "self_attn"}.
    """
    if families is None:
        families = {"o_proj": "self_attn", "down_proj": "mlp"}
    modules = {}
    for layer in range(n_layers):
        for fam, branch in families.items():
            path = f"model.layers.{layer}.{branch}.{fam}"
            modules[path] = FactorPair(
                a_matrix=rng.standard_normal((r, d_in)),
                b_matrix=rng.standard_normal((d_out, r)),
            )
    return LoraAdapter(
        modules=dict(sorted(modules.items())),
        rank=r,
        lora_alpha=lora_alpha if lora_alpha is not None else 2.0 * r,
        target_modules=tuple(sorted(families)),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
