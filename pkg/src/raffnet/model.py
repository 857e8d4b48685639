"""Full dual-branch model: visual branch, fecal branch, gate, classifier.

Construction is a pure function of ModelConfig: every submodule draws
its initialization from a generator keyed by (seed, submodule name), so
two models built from the same config are bitwise identical regardless
of construction order. The fecal branch's image tower starts as an
exact copy of the main tower by default ("shared" initialization) but
owns separate tensors, so freezing one while training the other works.

Parameter names follow the <branch>.<module>.<param> convention, e.g.
``main.adapter.down.weight`` or ``fusion.gate1.bias``; checkpoints use
these names verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .anchors import AnchorBox, AnchorConfig, CropResizer, anchor_config_from_dict, generate_anchors
from .encoder import Adapter, resolve_backend, seeded_generator
from .errors import CheckpointError, ConfigError
from .fecal import DEFAULT_PROMPTS, FecalBranch, PromptBank
from .fusion import FusionModule

FULL_IMAGE_BOX = AnchorBox(cx=0.5, cy=0.5, w=1.0, h=1.0)


@dataclass
class ModelConfig:
    backend: str = "toy-vit-d16"
    anchors: AnchorConfig | None = None
    prompts: tuple[str, ...] = DEFAULT_PROMPTS
    aggregate: str = "max"
    topk: int | None = None
    fecal_enabled: bool = True
    share_fecal_backbone: bool = True
    fecal_backbone_frozen: bool = True
    seed: int = 0

    def to_meta(self, embed_dim: int, native_input: tuple[int, int]) -> dict:
        return {
            "backend": self.backend,
            "embed_dim": embed_dim,
            "native_input": list(native_input),
            "anchors": self.anchors.to_dict(),
            "prompts": list(self.prompts),
            "aggregate": self.aggregate,
            "topk": self.topk,
            "fecal_enabled": self.fecal_enabled,
            "share_fecal_backbone": self.share_fecal_backbone,
            "fecal_backbone_frozen": self.fecal_backbone_frozen,
            "seed": self.seed,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        try:
            return cls(
                backend=meta["backend"],
                anchors=anchor_config_from_dict(meta["anchors"]),
                prompts=tuple(meta["prompts"]),
                aggregate=meta["aggregate"],
                topk=meta["topk"],
                fecal_enabled=meta["fecal_enabled"],
                share_fecal_backbone=meta["share_fecal_backbone"],
                fecal_backbone_frozen=meta["fecal_backbone_frozen"],
                seed=meta["seed"],
            )
        except KeyError as exc:
            raise CheckpointError(f"model metadata is missing key {exc.args[0]!r}") from exc


class MainBranch(nn.Module):
    """Whole-image tower plus adapter (z_v pathway)."""

    def __init__(self, backbone: nn.Module, embed_dim: int):
        super().__init__()
        self.backbone = backbone
        self.adapter = Adapter(embed_dim)
        self.frozen_backbone = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.frozen_backbone:
            with torch.no_grad():
                feats = self.backbone(x)
        else:
            feats = self.backbone(x)
        return self.adapter(feats)


class TextEncoder(nn.Module):
    """Named wrapper so text parameters live under text.encoder.*."""

    def __init__(self, encoder: nn.Module):
        super().__init__()
        self.encoder = encoder


@dataclass
class ModelOutputs:
    """Batched forward-pass tensors; fecal fields are None when disabled."""

    z_v: torch.Tensor
    z_f: torch.Tensor | None
    z_f_proj: torch.Tensor | None
    alpha: torch.Tensor | None
    z_all: torch.Tensor
    logits: torch.Tensor


class RaffModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.anchors is None:
            raise ConfigError("model config needs an anchor layout")
        spec = resolve_backend(config.backend)
        self.config = config
        self.backend_spec = spec
        self.embed_dim = spec.embed_dim
        self.native_input = spec.native_input
        self.anchor_boxes = generate_anchors(config.anchors)
        self.n_anchors = len(self.anchor_boxes)

        self.main = MainBranch(spec.vision_factory(), spec.embed_dim)
        self.fecal = FecalBranch(
            spec.vision_factory(), spec.embed_dim, frozen_backbone=config.fecal_backbone_frozen
        )
        self.text = TextEncoder(spec.text_factory())
        self.fusion = FusionModule(self.n_anchors, spec.embed_dim)

        seed = config.seed
        self.main.backbone.reset_parameters_seeded(seeded_generator(seed, "init", "main.backbone"))
        self.main.adapter.reset_parameters_seeded(seeded_generator(seed, "init", "main.adapter"))
        if config.share_fecal_backbone:
            self.fecal.backbone.load_state_dict(self.main.backbone.state_dict())
        else:
            self.fecal.backbone.reset_parameters_seeded(
                seeded_generator(seed, "init", "fecal.backbone")
            )
        self.fecal.adapter.reset_parameters_seeded(seeded_generator(seed, "init", "fecal.adapter"))
        self.text.encoder.reset_parameters_seeded(seeded_generator(seed, "init", "text.encoder"))
        self.fusion.reset_parameters_seeded(seeded_generator(seed, "init", "fusion"))

        for p in self.fecal.backbone.parameters():
            p.requires_grad_(not config.fecal_backbone_frozen)
        for p in self.text.parameters():
            p.requires_grad_(False)

        # Derived, recomputed state: prompt embeddings are a function of
        # the (frozen) text tower, so they are excluded from checkpoints.
        self.register_buffer("prompt_embeddings", torch.zeros(len(config.prompts), spec.embed_dim),
                             persistent=False)
        self.refresh_prompt_bank()
        self._resizers: dict[tuple[int, int], tuple[CropResizer, CropResizer]] = {}

    # -- prompt bank -------------------------------------------------

    def refresh_prompt_bank(self) -> PromptBank:
        bank = PromptBank.build(self.text.encoder, list(self.config.prompts))
        dtype = next(self.parameters()).dtype
        with torch.no_grad():
            self.prompt_embeddings = torch.from_numpy(bank.embeddings).to(dtype)
        return bank

    # -- raster preparation -------------------------------------------

    def _resizers_for(self, shape: tuple[int, int]) -> tuple[CropResizer, CropResizer]:
        pair = self._resizers.get(shape)
        if pair is None:
            full = CropResizer(shape, [FULL_IMAGE_BOX], self.native_input)
            anchors = CropResizer(shape, self.anchor_boxes, self.native_input)
            pair = (full, anchors)
            self._resizers[shape] = pair
        return pair

    def prepare_main(self, image: np.ndarray) -> np.ndarray:
        """Resample a raster to the tower's native input, (h, w, 3)."""
        full, _ = self._resizers_for(image.shape[:2])
        return full.apply(image)[0]

    def prepare_crops(self, image: np.ndarray) -> np.ndarray:
        """All anchor crops of a raster, (A, h, w, 3)."""
        _, anchors = self._resizers_for(image.shape[:2])
        return anchors.apply(image)

    def _tensorize(self, arrays: list[np.ndarray]) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        stacked = np.ascontiguousarray(np.stack(arrays))
        return torch.from_numpy(stacked).to(dtype)

    # -- forward ------------------------------------------------------

    def forward(self, main_batch: torch.Tensor, crops_batch: torch.Tensor | None,
                fecal_feats: torch.Tensor | None = None) -> ModelOutputs:
        z_v = self.main(main_batch)
        if not self.config.fecal_enabled:
            logits = self.fusion.classify(z_v)
            return ModelOutputs(z_v=z_v, z_f=None, z_f_proj=None, alpha=None, z_all=z_v, logits=logits)
        if fecal_feats is not None:
            z_f = self.fecal.forward_features(fecal_feats, self.prompt_embeddings,
                                              mode=self.config.aggregate, k=self.config.topk)
        elif crops_batch is not None:
            z_f = self.fecal(crops_batch, self.prompt_embeddings,
                             mode=self.config.aggregate, k=self.config.topk)
        else:
            raise ConfigError("fecal branch is enabled but no anchor crops were given")
        z_f_proj, alpha, z_all, logits = self.fusion(z_v, z_f)
        return ModelOutputs(z_v=z_v, z_f=z_f, z_f_proj=z_f_proj, alpha=alpha, z_all=z_all, logits=logits)

    def fecal_tower_features(self, image: np.ndarray) -> np.ndarray:
        """Fecal tower features for one raster's anchor crops, (A, D).

        Constant per image while the fecal tower is frozen, so the result
        can be cached and later fed back through ``forward``.
        """
        crops = self._tensorize([self.prepare_crops(image)])
        with torch.no_grad():
            flat = crops.reshape(self.n_anchors, *crops.shape[2:])
            feats = self.fecal.tower_features(flat)
        return feats.detach().cpu().numpy()

    def forward_images(self, images: list[np.ndarray],
                       fecal_feats: torch.Tensor | None = None) -> ModelOutputs:
        """Prepare rasters and run the forward pass with autograd."""
        main_batch = self._tensorize([self.prepare_main(img) for img in images])
        crops_batch = None
        if self.config.fecal_enabled and fecal_feats is None:
            crops_batch = self._tensorize([self.prepare_crops(img) for img in images])
        return self.forward(main_batch, crops_batch, fecal_feats=fecal_feats)

    def infer_logits(self, images: list[np.ndarray],
                     fecal_feats: torch.Tensor | None = None) -> np.ndarray:
        """Inference-only logits for a list of rasters, (N, 4) float array."""
        with torch.no_grad():
            out = self.forward_images(images, fecal_feats=fecal_feats)
        return out.logits.detach().cpu().numpy()

    # -- parameter registry -------------------------------------------

    def registry_names(self) -> list[str]:
        return [name for name, _ in self.named_parameters()]

    def export_parameters(self) -> dict[str, np.ndarray]:
        return {name: p.detach().cpu().numpy().copy() for name, p in self.named_parameters()}


def build_model(config: ModelConfig) -> RaffModel:
    return RaffModel(config)


def load_parameters(model: RaffModel, params: dict[str, np.ndarray]) -> None:
    """Copy a named parameter map into the model, strictly.

    Every registry name must be present with the right shape and no
    extra names may appear; errors list the offending names.
    """
    registry = dict(model.named_parameters())
    missing = sorted(set(registry) - set(params))
    unexpected = sorted(set(params) - set(registry))
    if missing or unexpected:
        parts = []
        if missing:
            parts.append(f"missing parameters: {', '.join(missing)}")
        if unexpected:
            parts.append(f"unexpected parameters: {', '.join(unexpected)}")
        raise CheckpointError("; ".join(parts))
    mismatched = [
        f"{name} (checkpoint {tuple(params[name].shape)} vs model {tuple(p.shape)})"
        for name, p in registry.items()
        if tuple(params[name].shape) != tuple(p.shape)
    ]
    if mismatched:
        raise CheckpointError("parameter shape mismatch: " + ", ".join(mismatched))
    with torch.no_grad():
        for name, p in registry.items():
            p.copy_(torch.from_numpy(np.ascontiguousarray(params[name])))
    model.refresh_prompt_bank()
