"""Encoder backends and the bottleneck adapter.

A backend supplies an image tower (raster -> R^D), a text tower
(string -> R^D) and its native input resolution. Backends are resolved
by name through a small registry so pretrained models can be plugged in
without touching the rest of the pipeline; the built-in "toy-vit-d{D}"
family is a deterministic, trainable miniature transformer used by the
test suite and the synthetic experiments.

Numerical convention: learned maps that act on single feature vectors
(adapter, tower head, anything downstream of pooling) go through
``row_linear`` instead of matmul. Its per-row reduction order does not
depend on how many rows are in the batch, which keeps per-anchor and
per-image results bitwise identical whether they are computed alone or
inside a larger batch. Token-level maps keep regular matmul: every
anchor contributes a fixed 16-row block and those blocks are stable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable
from zlib import crc32

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError
from .utils import derive_seed

TOY_NATIVE_INPUT = (16, 16)
TOY_PATCH = 4
TOY_VOCAB = 512
# Positional and token embeddings start as small perturbations; weight
# matrices use fan-in scaling so activations stay O(1) and the toy
# pipeline trains within seconds rather than thousands of steps.
INIT_STD = 0.02


def fan_in_normal_(weight: torch.Tensor, gen: torch.Generator) -> None:
    """Fill a (fan_out, fan_in) weight with normal(0, 1/sqrt(fan_in))."""
    weight.normal_(0.0, weight.shape[-1] ** -0.5, generator=gen)


def row_linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine map computed as an explicit multiply-and-reduce.

    Equivalent to x @ weight.T + bias but with a fixed per-row reduction
    order, so row r's result never depends on the batch size.
    """
    return (x.unsqueeze(-2) * weight).sum(dim=-1) + bias


def rowwise_sigmoid(x: torch.Tensor) -> torch.Tensor:
    """Sigmoid applied one row at a time.

    Vectorized transcendental kernels fall back to a differently rounded
    tail path when the flattened length is not a multiple of the SIMD
    width, so sigmoid over (N, D) and over (1, D) can disagree by an ulp
    for the same row. Feeding rows individually pins every row to the
    same kernel path whatever the batch size.
    """
    if x.ndim == 1:
        return torch.sigmoid(x)
    if x.ndim != 2:
        raise ConfigError(f"rowwise_sigmoid expects a vector or matrix, got shape {tuple(x.shape)}")
    return torch.stack([torch.sigmoid(row) for row in x.unbind(0)], dim=0)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    v = np.asarray(v)
    norm = float(np.sqrt(np.sum(v.astype(np.float64) ** 2)))
    if norm <= 1e-12:
        raise DataError(f"cannot normalize a near-zero vector (norm {norm:.3e})")
    return (v / norm).astype(v.dtype, copy=False)


def l2_normalize_rows(x: torch.Tensor) -> torch.Tensor:
    """Unit-normalize the last dimension; batch-size invariant per row."""
    norm = torch.sqrt((x * x).sum(dim=-1, keepdim=True))
    return x / norm


class Adapter(nn.Module):
    """Residual bottleneck: z + up(relu(down(z))), hidden width floor(D/4).

    The up projection starts at zero, so a fresh adapter is exactly the
    identity and training departs from the backbone's own function.
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        if embed_dim < 4:
            raise ConfigError(f"adapter needs embed_dim >= 4, got {embed_dim}")
        hidden = embed_dim // 4
        self.embed_dim = embed_dim
        self.hidden_dim = hidden
        self.down = nn.Linear(embed_dim, hidden)
        self.up = nn.Linear(hidden, embed_dim)

    def reset_parameters_seeded(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            fan_in_normal_(self.down.weight, gen)
            self.down.bias.zero_()
            self.up.weight.zero_()
            self.up.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.embed_dim:
            raise ConfigError(f"adapter expects width {self.embed_dim}, got {z.shape[-1]}")
        h = torch.relu(row_linear(z, self.down.weight, self.down.bias))
        return z + row_linear(h, self.up.weight, self.up.bias)


class _AttentionBlock(nn.Module):
    """Pre-norm single-head attention + 2x MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)
        self.scale = dim ** -0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        att = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        x = x + self.o(att @ v)
        h = self.ln2(x)
        return x + self.fc2(torch.relu(self.fc1(h)))


class ToyVisionTower(nn.Module):
    """Patch-flatten transformer over a fixed 16x16 input, 4x4 patches.

    forward takes channels-last rasters (N, 16, 16, 3) and returns (N, D).
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        if embed_dim < 4:
            raise ConfigError(f"vision tower needs embed_dim >= 4, got {embed_dim}")
        self.embed_dim = embed_dim
        self.native_input = TOY_NATIVE_INPUT
        h, w = TOY_NATIVE_INPUT
        self.grid = (h // TOY_PATCH, w // TOY_PATCH)
        self.n_tokens = self.grid[0] * self.grid[1]
        patch_dim = TOY_PATCH * TOY_PATCH * 3
        self.patch_proj = nn.Linear(patch_dim, embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(self.n_tokens, embed_dim))
        self.blocks = nn.ModuleList([_AttentionBlock(embed_dim) for _ in range(2)])
        self.head = nn.Linear(embed_dim, embed_dim)

    def reset_parameters_seeded(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "pos_embed":
                    p.normal_(0.0, INIT_STD, generator=gen)
                elif "ln" in name and name.endswith("weight"):
                    p.fill_(1.0)
                elif name.endswith("weight") and p.ndim == 2:
                    fan_in_normal_(p, gen)
                else:
                    p.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        h, w = self.native_input
        if x.shape[1:] != (h, w, 3):
            raise ConfigError(f"tower expects (N, {h}, {w}, 3) input, got {tuple(x.shape)}")
        gh, gw = self.grid
        tokens = (
            x.reshape(n, gh, TOY_PATCH, gw, TOY_PATCH, 3)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(n, self.n_tokens, TOY_PATCH * TOY_PATCH * 3)
        )
        tokens = self.patch_proj(tokens) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        pooled = tokens.mean(dim=1)
        return row_linear(pooled, self.head.weight, self.head.bias)


class HashingTextTower(nn.Module):
    """Hash tokens into a small embedding table and mean-pool."""

    def __init__(self, embed_dim: int, vocab_size: int = TOY_VOCAB):
        super().__init__()
        self.embed_dim = embed_dim
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, embed_dim)

    def reset_parameters_seeded(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            self.embed.weight.normal_(0.0, INIT_STD, generator=gen)

    def token_ids(self, text: str) -> list[int]:
        if not text or not text.strip():
            raise ConfigError("prompt must be a non-empty string")
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        if not tokens:
            raise ConfigError(f"prompt {text!r} contains no usable tokens")
        return [crc32(t.encode("utf-8")) % self.vocab_size for t in tokens]

    def forward(self, prompts: list[str]) -> torch.Tensor:
        rows = []
        for prompt in prompts:
            ids = torch.tensor(self.token_ids(prompt), dtype=torch.long)
            rows.append(self.embed(ids).mean(dim=0))
        return torch.stack(rows, dim=0)


@dataclass(frozen=True)
class BackendSpec:
    """Registry entry describing how to build a backend's towers."""

    name: str
    embed_dim: int
    native_input: tuple[int, int]
    vision_factory: Callable[[], nn.Module]
    text_factory: Callable[[], nn.Module]
    trainable: bool = True


_TOY_PATTERN = re.compile(r"^toy-vit-d(\d+)$")


def _resolve_toy(name: str) -> BackendSpec | None:
    m = _TOY_PATTERN.match(name)
    if m is None:
        return None
    dim = int(m.group(1))
    if dim < 4:
        raise ConfigError(f"backend {name!r}: embed dim must be >= 4 (adapter hidden = dim // 4)")
    return BackendSpec(
        name=name,
        embed_dim=dim,
        native_input=TOY_NATIVE_INPUT,
        vision_factory=lambda: ToyVisionTower(dim),
        text_factory=lambda: HashingTextTower(dim),
        trainable=True,
    )


_RESOLVERS: list[Callable[[str], BackendSpec | None]] = [_resolve_toy]


def register_backend_resolver(resolver: Callable[[str], BackendSpec | None]) -> None:
    """Add a resolver for external backend names (e.g. pretrained weights)."""
    _RESOLVERS.append(resolver)


def resolve_backend(name: str) -> BackendSpec:
    for resolver in _RESOLVERS:
        spec = resolver(name)
        if spec is not None:
            return spec
    raise ConfigError(f"unknown backend {name!r}; built-in names match 'toy-vit-d<D>'")


def seeded_generator(*parts) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen


class InferenceBackend:
    """A ready-to-call backend: numpy in, numpy out, prompts cached.

    This is the standalone entry point used by dataset statistics and by
    anything that wants embeddings without building the full model. The
    image must already be resampled to ``native_input``.
    """

    def __init__(self, spec: BackendSpec, seed: int = 0):
        self.spec = spec
        self.name = spec.name
        self.embed_dim = spec.embed_dim
        self.native_input = spec.native_input
        self.trainable = spec.trainable
        self.vision = spec.vision_factory()
        self.text = spec.text_factory()
        self.vision.reset_parameters_seeded(seeded_generator(seed, "backend", spec.name, "vision"))
        self.text.reset_parameters_seeded(seeded_generator(seed, "backend", spec.name, "text"))
        self.vision.eval()
        self.text.eval()
        self._prompt_cache: dict[str, np.ndarray] = {}

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        h, w = self.native_input
        if image.shape != (h, w, 3):
            raise ConfigError(
                f"backend {self.name!r} expects a ({h}, {w}, 3) raster, got {image.shape}"
            )
        with torch.no_grad():
            batch = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).unsqueeze(0)
            out = self.vision(batch)[0]
        vec = out.numpy().copy()
        if not np.all(np.isfinite(vec)):
            raise DataError("backend produced non-finite image embedding")
        return vec

    def encode_text(self, prompt: str) -> np.ndarray:
        cached = self._prompt_cache.get(prompt)
        if cached is None:
            with torch.no_grad():
                cached = self.text([prompt])[0].numpy().copy()
            self._prompt_cache[prompt] = cached
        return cached.copy()


def load_backend(name: str, seed: int = 0) -> InferenceBackend:
    return InferenceBackend(resolve_backend(name), seed=seed)
