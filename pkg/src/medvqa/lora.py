"""Low-rank adapters attached to frozen linear maps.

An adapted map computes y = x W0^T + (alpha/rank) (x A^T) B^T. B starts at
zero, so a freshly attached adapter is exactly the identity on top of the
frozen base; merging folds (alpha/rank) B A into a deployable single weight.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, matmul, scale, transpose, add


class LoraAdapter:
    """Trainable rank-r factors (A: rank x in, B: out x rank) plus the scale."""

    def __init__(self, a: Parameter, b: Parameter, rank: int, alpha: float):
        if rank <= 0:
            raise ValueError(f"lora rank must be positive, got {rank}")
        if a.tensor.shape[0] != rank or b.tensor.shape[1] != rank:
            raise ValueError(
                f"adapter factors {a.tensor.shape} / {b.tensor.shape} do not match rank {rank}")
        self.a = a
        self.b = b
        self.rank = rank
        self.alpha = float(alpha)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def init_lora(registry, prefix: str, in_dim: int, out_dim: int, rank: int,
              alpha: float, rng: np.random.Generator) -> LoraAdapter:
    """Register a fresh adapter: A gaussian, B zero so the base map is unchanged."""
    a = registry.register(f"{prefix}.lora_A", rng.normal(0.0, 0.02, size=(rank, in_dim)))
    b = registry.register(f"{prefix}.lora_B", np.zeros((out_dim, rank)))
    return LoraAdapter(a, b, rank, alpha)


def lora_forward(x: Tensor, w0: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """Frozen base map plus the scaled low-rank correction."""
    if x.shape[-1] != w0.shape[1]:
        raise ValueError(f"input width {x.shape} incompatible with weight {w0.shape}")
    base = matmul(x, transpose(w0))
    if adapter is None:
        return base
    low = matmul(matmul(x, transpose(adapter.a.tensor)), transpose(adapter.b.tensor))
    return add(base, scale(low, adapter.scaling))


def merge_lora(w0: Tensor, adapter: LoraAdapter) -> Tensor:
    """Fold the adapter into the base weight: W0 + (alpha/rank) B A."""
    if adapter.b.tensor.shape[0] != w0.shape[0] or adapter.a.tensor.shape[1] != w0.shape[1]:
        raise ValueError(
            f"adapter {adapter.b.tensor.shape}x{adapter.a.tensor.shape} "
            f"does not match weight {w0.shape}")
    delta = adapter.scaling * (adapter.b.tensor.data @ adapter.a.tensor.data)
    return Tensor(w0.data + delta)


def unmerge_lora(merged: Tensor, adapter: LoraAdapter) -> Tensor:
    """Invert :func:`merge_lora`, recovering the frozen base weight."""
    delta = adapter.scaling * (adapter.b.tensor.data @ adapter.a.tensor.data)
    return Tensor(merged.data - delta)
