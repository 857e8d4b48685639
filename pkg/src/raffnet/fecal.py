"""Prompt-similarity branch: score anchor patches against stool prompts.

Every anchor patch is embedded by the branch's (frozen) image tower plus
its own trainable adapter, unit-normalized, and compared against a bank
of text prompt embeddings by cosine similarity. The per-anchor scores
are reduced over prompts (max by default) into z_f, one entry per
anchor, preserving which region of the image looked like stool.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError
from .encoder import Adapter, l2_normalize, l2_normalize_rows

AGGREGATE_MODES = ("max", "mean", "topk_mean")
DEFAULT_PROMPTS = ("yellow stool", "residual feces")


@dataclass
class PromptBank:
    """Prompt strings with their unit-norm embedding rows (P x D)."""

    prompts: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        if len(self.prompts) < 1:
            raise ConfigError("prompt bank needs at least one prompt")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.prompts):
            raise ConfigError(
                f"embedding matrix {self.embeddings.shape} does not match {len(self.prompts)} prompts"
            )
        norms = np.sqrt((self.embeddings.astype(np.float64) ** 2).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ConfigError("prompt embeddings must be unit-norm rows")

    @classmethod
    def build(cls, text_tower: nn.Module, prompts: list[str] | tuple[str, ...]) -> "PromptBank":
        if not prompts:
            raise ConfigError("prompt list is empty")
        with torch.no_grad():
            raw = text_tower(list(prompts)).numpy()
        rows = np.stack([l2_normalize(raw[i]) for i in range(raw.shape[0])])
        return cls(prompts=tuple(prompts), embeddings=rows)


def similarity_scores(anchor_embs: np.ndarray, bank: PromptBank) -> np.ndarray:
    """Cosine similarities between anchor rows and prompt rows (A x P).

    Both sides must already be unit vectors, so the similarity is a plain
    dot product and every entry lies in [-1, 1].
    """
    embs = np.asarray(anchor_embs, dtype=np.float64)
    if embs.ndim != 2:
        raise ConfigError(f"anchor embeddings must be 2-D, got shape {embs.shape}")
    if embs.shape[1] != bank.embeddings.shape[1]:
        raise ConfigError(
            f"embedding width {embs.shape[1]} does not match prompt width {bank.embeddings.shape[1]}"
        )
    norms = np.sqrt((embs ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise DataError("anchor embeddings must be unit-norm rows")
    scores = embs @ bank.embeddings.astype(np.float64).T
    return np.clip(scores, -1.0, 1.0)


def aggregate(scores: np.ndarray, mode: str = "max", k: int | None = None) -> np.ndarray:
    """Reduce the A x P score matrix over prompts to z_f in R^A."""
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 1:
        raise ConfigError(f"scores must be a non-empty A x P matrix, got shape {scores.shape}")
    if mode == "max":
        return scores.max(axis=1)
    if mode == "mean":
        return scores.mean(axis=1)
    if mode == "topk_mean":
        if k is None or not 1 <= k <= scores.shape[1]:
            raise ConfigError(f"topk_mean needs 1 <= k <= {scores.shape[1]}, got {k}")
        top = np.sort(scores, axis=1)[:, scores.shape[1] - k :]
        return top.mean(axis=1)
    raise ConfigError(f"unknown aggregation mode {mode!r}; choose from {AGGREGATE_MODES}")


class FecalBranch(nn.Module):
    """Image tower + adapter producing unit anchor embeddings.

    The tower is run without autograd when frozen (the default), so the
    graph starts at the adapter and the tower's parameters can never
    drift. Similarity and aggregation run in-graph for the adapter's
    gradient.
    """

    def __init__(self, backbone: nn.Module, embed_dim: int, frozen_backbone: bool = True):
        super().__init__()
        self.backbone = backbone
        self.adapter = Adapter(embed_dim)
        self.frozen_backbone = frozen_backbone

    def tower_features(self, crops: torch.Tensor) -> torch.Tensor:
        """Raw tower features for a stack of crops (N, h, w, 3) -> (N, D).

        When frozen these are constant per crop, so callers may cache
        them; caching changes nothing because every op in the tower is
        batch-composition invariant per row.
        """
        if self.frozen_backbone:
            with torch.no_grad():
                return self.backbone(crops)
        return self.backbone(crops)

    def embed_features(self, feats: torch.Tensor) -> torch.Tensor:
        """Adapter plus unit normalization, (N, D) -> (N, D)."""
        return l2_normalize_rows(self.adapter(feats))

    def embed(self, crops: torch.Tensor) -> torch.Tensor:
        """Unit embeddings for a stack of anchor crops (N, h, w, 3) -> (N, D)."""
        return self.embed_features(self.tower_features(crops))

    def scores_from_features(self, feats: torch.Tensor,
                             prompt_embeddings: torch.Tensor) -> torch.Tensor:
        embs = self.embed_features(feats)
        sim = (embs.unsqueeze(-2) * prompt_embeddings).sum(dim=-1)
        return sim.clamp(-1.0, 1.0)

    def scores(self, crops: torch.Tensor, prompt_embeddings: torch.Tensor) -> torch.Tensor:
        """Cosine similarity of each crop embedding against each prompt row."""
        return self.scores_from_features(self.tower_features(crops), prompt_embeddings)

    @staticmethod
    def _aggregate(scores: torch.Tensor, mode: str, k: int | None) -> torch.Tensor:
        if mode == "max":
            return scores.max(dim=2).values
        if mode == "mean":
            return scores.mean(dim=2)
        if mode == "topk_mean":
            p = scores.shape[2]
            if k is None or not 1 <= k <= p:
                raise ConfigError(f"topk_mean needs 1 <= k <= {p}, got {k}")
            top = scores.topk(k, dim=2).values
            return top.mean(dim=2)
        raise ConfigError(f"unknown aggregation mode {mode!r}; choose from {AGGREGATE_MODES}")

    def forward_features(self, feats: torch.Tensor, prompt_embeddings: torch.Tensor,
                         mode: str = "max", k: int | None = None) -> torch.Tensor:
        """z_f from precomputed tower features: (N, A, D) -> (N, A)."""
        if feats.ndim != 3:
            raise ConfigError(f"expected (N, A, D) feature batch, got shape {tuple(feats.shape)}")
        n, a = feats.shape[0], feats.shape[1]
        scores = self.scores_from_features(
            feats.reshape(n * a, feats.shape[2]), prompt_embeddings
        ).reshape(n, a, -1)
        return self._aggregate(scores, mode, k)

    def forward(
        self,
        crops: torch.Tensor,
        prompt_embeddings: torch.Tensor,
        mode: str = "max",
        k: int | None = None,
    ) -> torch.Tensor:
        """z_f for a batch: crops (N, A, h, w, 3) -> (N, A)."""
        if crops.ndim != 5:
            raise ConfigError(f"expected (N, A, h, w, 3) crop batch, got shape {tuple(crops.shape)}")
        n, a = crops.shape[0], crops.shape[1]
        flat = crops.reshape(n * a, *crops.shape[2:])
        scores = self.scores(flat, prompt_embeddings).reshape(n, a, -1)
        return self._aggregate(scores, mode, k)
