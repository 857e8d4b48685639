"""Gated fusion of the visual and fecal features, plus the classifier.

The fecal vector z_f (one entry per anchor) is linearly projected into
the visual embedding space, a two-layer gate maps the concatenated pair
to a per-dimension sigmoid weight alpha, and the fused feature is the
convex combination alpha * z_v + (1 - alpha) * FC(z_f). A final affine
layer produces the four class logits; prediction is the argmax with
ties broken toward the lowest score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError
from .encoder import fan_in_normal_, row_linear, rowwise_sigmoid

N_CLASSES = 4

# Sigmoid preactivation bound per dtype. sigmoid(15) in float32 and
# sigmoid(30) in float64 are both strictly below 1, so the gate can
# never saturate to an exact 0 or 1.
_GATE_CLAMP = {torch.float32: 15.0, torch.float64: 30.0}


@dataclass
class FusionState:
    """All intermediate vectors of one fused forward pass."""

    z_v: np.ndarray
    z_f: np.ndarray | None
    z_f_proj: np.ndarray | None
    alpha: np.ndarray | None
    z_all: np.ndarray
    logits: np.ndarray


class FusionModule(nn.Module):
    """Projection, gate, and classifier parameters for one model."""

    def __init__(self, n_anchors: int, embed_dim: int):
        super().__init__()
        if n_anchors < 1:
            raise ConfigError(f"fusion needs at least one anchor, got {n_anchors}")
        self.n_anchors = n_anchors
        self.embed_dim = embed_dim
        self.projection = nn.Linear(n_anchors, embed_dim)
        self.gate1 = nn.Linear(2 * embed_dim, embed_dim)
        self.gate2 = nn.Linear(embed_dim, embed_dim)
        self.classifier = nn.Linear(embed_dim, N_CLASSES)

    def reset_parameters_seeded(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for layer in (self.projection, self.gate1, self.gate2, self.classifier):
                fan_in_normal_(layer.weight, gen)
                layer.bias.zero_()

    def project_fecal(self, z_f: torch.Tensor) -> torch.Tensor:
        if z_f.shape[-1] != self.n_anchors:
            raise ConfigError(f"z_f width {z_f.shape[-1]} does not match anchors {self.n_anchors}")
        return row_linear(z_f, self.projection.weight, self.projection.bias)

    def gate(self, z_v: torch.Tensor, z_f_proj: torch.Tensor) -> torch.Tensor:
        if z_v.shape != z_f_proj.shape:
            raise ConfigError(f"gate inputs disagree: {tuple(z_v.shape)} vs {tuple(z_f_proj.shape)}")
        if z_v.shape[-1] != self.embed_dim:
            raise ConfigError(f"gate expects width {self.embed_dim}, got {z_v.shape[-1]}")
        joint = torch.cat([z_v, z_f_proj], dim=-1)
        hidden = torch.relu(row_linear(joint, self.gate1.weight, self.gate1.bias))
        pre = row_linear(hidden, self.gate2.weight, self.gate2.bias)
        bound = _GATE_CLAMP.get(pre.dtype, 15.0)
        return rowwise_sigmoid(pre.clamp(-bound, bound))

    @staticmethod
    def fuse(z_v: torch.Tensor, z_f_proj: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        """alpha * z_v + (1 - alpha) * z_f_proj, evaluated as
        z_f_proj + alpha * (z_v - z_f_proj) so each fused entry provably
        stays inside [min, max] of its inputs under float rounding."""
        return z_f_proj + alpha * (z_v - z_f_proj)

    def classify(self, z_all: torch.Tensor) -> torch.Tensor:
        if z_all.shape[-1] != self.embed_dim:
            raise ConfigError(f"classifier expects width {self.embed_dim}, got {z_all.shape[-1]}")
        return row_linear(z_all, self.classifier.weight, self.classifier.bias)

    def forward(self, z_v: torch.Tensor, z_f: torch.Tensor):
        """Full fusion pass; returns (z_f_proj, alpha, z_all, logits)."""
        z_f_proj = self.project_fecal(z_f)
        alpha = self.gate(z_v, z_f_proj)
        z_all = self.fuse(z_v, z_f_proj, alpha)
        return z_f_proj, alpha, z_all, self.classify(z_all)


def predict(logits) -> int:
    """Argmax over the four logits; ties go to the lowest index."""
    arr = np.asarray(logits, dtype=np.float64).reshape(-1)
    if arr.shape[0] != N_CLASSES:
        raise DataError(f"expected {N_CLASSES} logits, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite logit in {arr.tolist()}")
    return int(np.argmax(arr))


def predict_batch(logits: np.ndarray) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != N_CLASSES:
        raise DataError(f"expected (N, {N_CLASSES}) logits, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite logits in batch")
    return np.argmax(arr, axis=1)
