"""Training loop: two-tier learning rates, freezing, augmentation,
best-validation checkpoint selection, and checkpoint serialization.

Learning-rate policy: pretrained towers (main/fecal image towers, text
encoder) that are trainable go into a "backbone" group at lr_backbone;
every newly introduced layer (both adapters, fecal projection, gate,
classifier) goes into a "new layers" group at lr_new. The fecal tower
and the text encoder stay frozen throughout by default, and frozen
parameters never enter the optimizer, so they remain bit-identical to
initialization.

Checkpoints are directories holding metadata.json plus tensors.bin, a
minimal container written byte-for-byte deterministically (common
archive formats embed timestamps, which would break reproducible-output
guarantees).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import DatasetManifest, load_image
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .evaluation import evaluate
from .model import ModelConfig, RaffModel, build_model, load_parameters
from .utils import canonical_json, config_hash, derive_seed

CHECKPOINT_FORMAT_VERSION = 1
TENSOR_MAGIC = b"RAFTENS1"

# Trainable-parameter prefixes per experiment tier. Each tier is a strict
# superset of the previous one; the full tier adds the main tower itself
# subject to the freeze flag.
PRESET_TRAINABLE = {
    "clip-base": ("fusion.classifier",),
    "trans-base": ("fusion.classifier", "main.adapter"),
    "full": (
        "fusion.classifier",
        "main.adapter",
        "fecal.adapter",
        "fusion.projection",
        "fusion.gate1",
        "fusion.gate2",
    ),
}
PRESET_FECAL_ENABLED = {"clip-base": False, "trans-base": False, "full": True}

_BACKBONE_PREFIXES = ("main.backbone.", "fecal.backbone.", "text.encoder.")


@dataclass
class AugmentSpec:
    hflip_prob: float = 0.5
    rotation_degrees: float = 15.0
    color_jitter: tuple[float, float, float] = (0.2, 0.2, 0.2)
    blur_prob: float = 0.2
    blur_sigma: tuple[float, float] = (0.1, 1.0)

    def validate(self) -> None:
        for name, p in (("hflip_prob", self.hflip_prob), ("blur_prob", self.blur_prob)):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.rotation_degrees < 0:
            raise ConfigError(f"rotation_degrees must be >= 0, got {self.rotation_degrees}")
        if len(self.color_jitter) != 3 or any(not 0.0 <= s <= 1.0 for s in self.color_jitter):
            raise ConfigError(f"color_jitter needs 3 strengths in [0, 1], got {self.color_jitter}")
        lo, hi = self.blur_sigma
        if not 0 < lo <= hi:
            raise ConfigError(f"blur_sigma range must satisfy 0 < lo <= hi, got {self.blur_sigma}")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(hflip_prob=0.0, rotation_degrees=0.0, color_jitter=(0.0, 0.0, 0.0), blur_prob=0.0)

    def is_identity(self) -> bool:
        return (self.hflip_prob == 0.0 and self.rotation_degrees == 0.0
                and all(s == 0.0 for s in self.color_jitter) and self.blur_prob == 0.0)

    def to_dict(self) -> dict:
        return {
            "hflip_prob": self.hflip_prob,
            "rotation_degrees": self.rotation_degrees,
            "color_jitter": list(self.color_jitter),
            "blur_prob": self.blur_prob,
            "blur_sigma": list(self.blur_sigma),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AugmentSpec":
        known = {"hflip_prob", "rotation_degrees", "color_jitter", "blur_prob", "blur_sigma"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown augmentation keys: {sorted(unknown)}")
        spec = cls(
            hflip_prob=float(obj.get("hflip_prob", 0.5)),
            rotation_degrees=float(obj.get("rotation_degrees", 15.0)),
            color_jitter=tuple(obj.get("color_jitter", (0.2, 0.2, 0.2))),
            blur_prob=float(obj.get("blur_prob", 0.2)),
            blur_sigma=tuple(obj.get("blur_sigma", (0.1, 1.0))),
        )
        spec.validate()
        return spec


@dataclass
class FreezeFlags:
    fecal_backbone: bool = True
    text_encoder: bool = True
    main_backbone: bool = False
    fecal_adapter: bool = False

    def to_dict(self) -> dict:
        return {
            "fecal_backbone": self.fecal_backbone,
            "text_encoder": self.text_encoder,
            "main_backbone": self.main_backbone,
            "fecal_adapter": self.fecal_adapter,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FreezeFlags":
        known = {"fecal_backbone", "text_encoder", "main_backbone", "fecal_adapter"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown freeze keys: {sorted(unknown)}")
        return cls(**{k: bool(v) for k, v in obj.items()})


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    lr_backbone: float = 1e-5
    lr_new: float = 1e-3
    weight_decay: float = 0.01
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)
    freeze: FreezeFlags = field(default_factory=FreezeFlags)
    preset: str = "full"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name, v in (("lr_backbone", self.lr_backbone), ("lr_new", self.lr_new),
                        ("weight_decay", self.weight_decay)):
            if v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")
        if self.preset not in PRESET_TRAINABLE:
            raise ConfigError(
                f"unknown preset {self.preset!r}; choose from {sorted(PRESET_TRAINABLE)}"
            )
        self.augmentation.validate()

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "lr_backbone": self.lr_backbone,
            "lr_new": self.lr_new,
            "weight_decay": self.weight_decay,
            "augmentation": self.augmentation.to_dict(),
            "freeze": self.freeze.to_dict(),
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {"epochs", "batch_size", "seed", "lr_backbone", "lr_new", "weight_decay",
                 "augmentation", "freeze", "preset"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        config = cls(
            epochs=int(obj.get("epochs", 50)),
            batch_size=int(obj.get("batch_size", 32)),
            seed=int(obj.get("seed", 0)),
            lr_backbone=float(obj.get("lr_backbone", 1e-5)),
            lr_new=float(obj.get("lr_new", 1e-3)),
            weight_decay=float(obj.get("weight_decay", 0.01)),
            augmentation=AugmentSpec.from_dict(obj.get("augmentation", {})),
            freeze=FreezeFlags.from_dict(obj.get("freeze", {})),
            preset=str(obj.get("preset", "full")),
        )
        config.validate()
        return config


@dataclass
class Checkpoint:
    parameters: dict[str, np.ndarray]
    epoch: int
    val_accuracy: float
    config_hash: str
    rng_state: dict
    model_meta: dict

    def validate(self) -> None:
        if not 0.0 <= self.val_accuracy <= 1.0:
            raise CheckpointError(f"val_accuracy must lie in [0, 1], got {self.val_accuracy}")
        if self.epoch < 0:
            raise CheckpointError(f"epoch must be >= 0, got {self.epoch}")


def resolve_trainable_prefixes(config: TrainConfig) -> set[str]:
    prefixes = set(PRESET_TRAINABLE[config.preset])
    if config.preset == "full" and not config.freeze.main_backbone:
        prefixes.add("main.backbone")
    if config.freeze.fecal_adapter:
        prefixes.discard("fecal.adapter")
    if config.preset == "full" and not config.freeze.fecal_backbone:
        prefixes.add("fecal.backbone")
    if config.preset == "full" and not config.freeze.text_encoder:
        prefixes.add("text.encoder")
    return prefixes


def configure_trainability(model: RaffModel, config: TrainConfig) -> tuple[list[str], list[str]]:
    """Mark requires_grad per preset/freeze flags; return the trainable
    names split into (backbone group, new-layer group)."""
    config.validate()
    if PRESET_FECAL_ENABLED[config.preset] != model.config.fecal_enabled:
        raise ConfigError(
            f"preset {config.preset!r} expects fecal_enabled="
            f"{PRESET_FECAL_ENABLED[config.preset]}, but the model was built with "
            f"fecal_enabled={model.config.fecal_enabled}"
        )
    prefixes = resolve_trainable_prefixes(config)
    registry = model.registry_names()
    for prefix in prefixes:
        if not any(n.startswith(prefix + ".") for n in registry):
            raise ConfigError(f"trainable prefix {prefix!r} matches no registered parameter")
    backbone_names: list[str] = []
    new_names: list[str] = []
    for name, p in model.named_parameters():
        on = any(name.startswith(prefix + ".") for prefix in prefixes)
        p.requires_grad_(on)
        if on:
            if name.startswith(_BACKBONE_PREFIXES):
                backbone_names.append(name)
            else:
                new_names.append(name)
    model.main.frozen_backbone = "main.backbone" not in prefixes
    model.fecal.frozen_backbone = "fecal.backbone" not in prefixes
    return backbone_names, new_names


def param_groups(model: RaffModel, config: TrainConfig):
    """Exactly two optimizer groups: (backbone, lr_backbone) and
    (new layers, lr_new). Either may be empty; together with the frozen
    set they partition all parameters."""
    backbone_names, new_names = configure_trainability(model, config)
    return [
        (backbone_names, config.lr_backbone, config.weight_decay),
        (new_names, config.lr_new, config.weight_decay),
    ]


# -- augmentation ------------------------------------------------------

LUMA = (0.299, 0.587, 0.114)


def augment(image: np.ndarray, spec: AugmentSpec, sample_seed: int) -> np.ndarray:
    """Stochastic training transform, a pure function of its arguments.

    All randomness comes from sample_seed, and the draws happen in a
    fixed order regardless of which transforms fire, so outputs never
    depend on batch composition or on other samples. With all
    probabilities and strengths at zero this is the identity.
    """
    spec.validate()
    rng = np.random.default_rng(sample_seed)
    u_flip = rng.random()
    angle = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees)
    jb, jc, js = spec.color_jitter
    f_bright = rng.uniform(1.0 - jb, 1.0 + jb)
    f_contrast = rng.uniform(1.0 - jc, 1.0 + jc)
    f_sat = rng.uniform(1.0 - js, 1.0 + js)
    u_blur = rng.random()
    sigma = rng.uniform(spec.blur_sigma[0], spec.blur_sigma[1])

    out = image
    if u_flip < spec.hflip_prob:
        out = out[:, ::-1, :]
    if spec.rotation_degrees > 0 and angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(0, 1), reshape=False, order=1,
                             mode="reflect", prefilter=False)
    if jb > 0:
        out = out * f_bright
    if jc > 0:
        luma_mean = (LUMA[0] * out[:, :, 0] + LUMA[1] * out[:, :, 1] + LUMA[2] * out[:, :, 2]).mean()
        out = out * f_contrast + luma_mean * (1.0 - f_contrast)
    if js > 0:
        luma = (LUMA[0] * out[:, :, 0] + LUMA[1] * out[:, :, 1] + LUMA[2] * out[:, :, 2])[:, :, None]
        out = out * f_sat + luma * (1.0 - f_sat)
    if u_blur < spec.blur_prob:
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="reflect")
    return np.clip(out, 0.0, 1.0)


# -- loss ---------------------------------------------------------------

def ce_loss(logits, label: int) -> float:
    """Cross-entropy of one 4-way logit vector, max-subtracted for
    stability: -log softmax(logits)[label]."""
    arr = np.asarray(logits, dtype=np.float64).reshape(-1)
    if arr.shape[0] != 4:
        raise DataError(f"expected 4 logits, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite logits: {arr.tolist()}")
    if label not in (0, 1, 2, 3):
        raise DataError(f"label must be in {{0,1,2,3}}, got {label}")
    z = arr - arr.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def batched_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over a batch, same stabilized formula."""
    z = logits - logits.max(dim=1, keepdim=True).values
    lse = torch.log(torch.exp(z).sum(dim=1))
    picked = z.gather(1, labels.view(-1, 1)).squeeze(1)
    return (lse - picked).mean()


# -- training loop -------------------------------------------------------

def sample_seed_for(config_seed: int, epoch: int, image_id: str) -> int:
    return derive_seed(config_seed, epoch, image_id)


def train(manifest: DatasetManifest, model: RaffModel, config: TrainConfig,
          images: dict | None = None):
    """Optimize the model; return (best checkpoint, per-epoch history).

    The checkpoint with the highest validation macro accuracy wins, ties
    going to the earlier epoch. Raises DivergenceError with the step
    index if the loss goes non-finite.
    """
    config.validate()
    train_samples = manifest.split_samples("train")
    val_samples = manifest.split_samples("val")
    if not train_samples:
        raise DataError("train split is empty")
    if not val_samples:
        raise DataError("val split is empty")

    groups = param_groups(model, config)
    name_to_param = dict(model.named_parameters())
    optimizer_groups = [
        {"params": [name_to_param[n] for n in names], "lr": lr, "weight_decay": wd}
        for names, lr, wd in groups
        if names
    ]
    if not optimizer_groups:
        raise ConfigError("no trainable parameters under the given preset/freeze flags")
    opt = torch.optim.AdamW(optimizer_groups, betas=(0.9, 0.999), eps=1e-8)

    if images is None:
        images = {}
    for s in train_samples + val_samples:
        if s.image_id not in images:
            images[s.image_id] = load_image(manifest.resolve_path(s))

    # While the fecal tower is frozen its per-anchor features are a pure
    # function of the raster, so they are computed once per image instead
    # of every epoch. Augmented rasters only qualify when the augmentation
    # is the identity. Row-level batch invariance makes the cached path
    # bitwise identical to recomputation.
    fecal_cache: dict[str, np.ndarray] | None = None
    if model.config.fecal_enabled and model.fecal.frozen_backbone:
        fecal_cache = {}
    cache_train = fecal_cache is not None and config.augmentation.is_identity()
    param_dtype = next(model.parameters()).dtype

    run_hash = config_hash({"model": model.config.to_meta(model.embed_dim, model.native_input),
                            "train": config.to_dict()})
    best: Checkpoint | None = None
    history: list[dict] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(
            len(train_samples)
        )
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            chunk = [train_samples[i] for i in order[start : start + config.batch_size]]
            rasters = [
                augment(images[s.image_id], config.augmentation,
                        sample_seed_for(config.seed, epoch, s.image_id))
                for s in chunk
            ]
            labels = torch.tensor([s.label for s in chunk], dtype=torch.long)
            feats = None
            if cache_train:
                stack = []
                for s, raster in zip(chunk, rasters):
                    f = fecal_cache.get(s.image_id)
                    if f is None:
                        f = model.fecal_tower_features(raster)
                        fecal_cache[s.image_id] = f
                    stack.append(f)
                feats = torch.from_numpy(np.ascontiguousarray(np.stack(stack))).to(param_dtype)
            out = model.forward_images(rasters, fecal_feats=feats)
            loss = batched_ce(out.logits, labels)
            step += 1
            if not bool(torch.isfinite(loss)):
                raise DivergenceError(step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach()) * len(chunk)
        train_loss = loss_sum / len(train_samples)
        report = evaluate(model, manifest, "val", batch_size=config.batch_size, images=images,
                          fecal_features=fecal_cache)
        val_acc = report.macro_avg / 100.0
        history.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": val_acc})
        if best is None or val_acc > best.val_accuracy:
            best = Checkpoint(
                parameters=model.export_parameters(),
                epoch=epoch,
                val_accuracy=val_acc,
                config_hash=run_hash,
                rng_state={"seed": config.seed, "epoch": epoch},
                model_meta=model.config.to_meta(model.embed_dim, model.native_input),
            )
    assert best is not None
    return best, history


def history_csv(history: list[dict]) -> str:
    lines = ["epoch,train_loss,val_macro_acc"]
    for row in history:
        lines.append(f"{row['epoch']},{row['train_loss']:.6f},{row['val_accuracy'] * 100.0:.4f}")
    return "\n".join(lines) + "\n"


# -- checkpoint serialization ---------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _write_tensor_file(path: Path, arrays: dict[str, np.ndarray]) -> None:
    header: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float32:
            dtype = "float32"
        elif arr.dtype == np.float64:
            dtype = "float64"
        else:
            raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name!r}")
        data = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    encoded = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)


def _read_tensor_file(path: Path) -> dict[str, np.ndarray]:
    raw = path.read_bytes()
    if raw[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise CheckpointError(f"{path} is not a tensor container (bad magic)")
    head_len = struct.unpack("<Q", raw[len(TENSOR_MAGIC) : len(TENSOR_MAGIC) + 8])[0]
    start = len(TENSOR_MAGIC) + 8
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: malformed tensor header: {exc}") from exc
    body = raw[start + head_len :]
    arrays: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        if meta["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {meta['dtype']!r} for {name!r}")
        blob = body[meta["offset"] : meta["offset"] + meta["nbytes"]]
        if len(blob) != meta["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
        arrays[name] = np.frombuffer(blob, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"]).copy()
    return arrays


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write a checkpoint directory. Outputs are byte-for-byte functions
    of the checkpoint contents (no timestamps)."""
    ckpt.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": ckpt.epoch,
        "val_accuracy": ckpt.val_accuracy,
        "config_hash": ckpt.config_hash,
        "rng_state": ckpt.rng_state,
        "model": ckpt.model_meta,
    }
    (path / "metadata.json").write_text(canonical_json(meta) + "\n", encoding="utf-8")
    _write_tensor_file(path / "tensors.bin", ckpt.parameters)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta_path = path / "metadata.json"
    tensor_path = path / "tensors.bin"
    if not meta_path.exists() or not tensor_path.exists():
        raise CheckpointError(f"{path} is not a checkpoint directory "
                              "(needs metadata.json and tensors.bin)")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{meta_path}: malformed metadata: {exc}") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version!r} "
            f"(this build reads version {CHECKPOINT_FORMAT_VERSION})"
        )
    ckpt = Checkpoint(
        parameters=_read_tensor_file(tensor_path),
        epoch=int(meta["epoch"]),
        val_accuracy=float(meta["val_accuracy"]),
        config_hash=str(meta["config_hash"]),
        rng_state=dict(meta["rng_state"]),
        model_meta=dict(meta["model"]),
    )
    ckpt.validate()
    return ckpt


def restore_model(ckpt: Checkpoint) -> RaffModel:
    """Rebuild the model a checkpoint describes and load its parameters."""
    model = build_model(ModelConfig.from_meta(ckpt.model_meta))
    load_parameters(model, ckpt.parameters)
    model.eval()
    return model
