import numpy as np
import pytest
import torch

from raffnet.encoder import HashingTextTower, ToyVisionTower, seeded_generator
from raffnet.errors import ConfigError, DataError
from raffnet.fecal import (
    DEFAULT_PROMPTS,
    FecalBranch,
    PromptBank,
    aggregate,
    similarity_scores,
)

from oracles import similarity_oracle

torch.set_num_threads(1)


def _unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.sqrt((m ** 2).sum(axis=1, keepdims=True))


def _bank(rng, n_prompts, d):
    return PromptBank(
        prompts=tuple(f"prompt {i}" for i in range(n_prompts)),
        embeddings=_unit_rows(rng, n_prompts, d),
    )


def test_similarity_matches_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a = int(rng.integers(1, 12))
        p = int(rng.integers(1, 6))
        d = int(rng.integers(2, 24))
        embs = _unit_rows(rng, a, d)
        bank = _bank(rng, p, d)
        got = similarity_scores(embs, bank)
        want = similarity_oracle(embs, bank.embeddings)
        assert got.shape == (a, p)
        assert np.abs(got - want).max() <= 1e-6
        assert got.min() >= -1.0 and got.max() <= 1.0


def test_similarity_input_validation(rng):
    bank = _bank(rng, 3, 8)
    with pytest.raises(ConfigError):
        similarity_scores(np.zeros((2, 3, 8)), bank)
    with pytest.raises(ConfigError):
        similarity_scores(_unit_rows(rng, 2, 6), bank)
    with pytest.raises(DataError):
        similarity_scores(np.ones((2, 8)), bank)


def test_prompt_bank_validation(rng):
    with pytest.raises(ConfigError):
        PromptBank(prompts=(), embeddings=np.zeros((0, 4)))
    with pytest.raises(ConfigError):
        PromptBank(prompts=("a", "b"), embeddings=_unit_rows(rng, 3, 4))
    with pytest.raises(ConfigError):
        PromptBank(prompts=("a",), embeddings=np.full((1, 4), 0.9))


def test_prompt_bank_build_unit_norm():
    text = HashingTextTower(16)
    text.reset_parameters_seeded(seeded_generator(0, "init", "text"))
    bank = PromptBank.build(text, list(DEFAULT_PROMPTS))
    norms = np.sqrt((bank.embeddings.astype(np.float64) ** 2).sum(axis=1))
    assert np.abs(norms - 1.0).max() < 1e-6
    assert bank.prompts == DEFAULT_PROMPTS


def test_aggregate_modes():
    scores = np.array([[0.1, 0.7, 0.3], [0.5, 0.2, 0.9]])
    assert np.array_equal(aggregate(scores, "max"), np.array([0.7, 0.9]))
    assert np.allclose(aggregate(scores, "mean"), scores.mean(axis=1))
    top2 = aggregate(scores, "topk_mean", k=2)
    assert np.allclose(top2, [(0.7 + 0.3) / 2, (0.9 + 0.5) / 2])
    assert np.allclose(aggregate(scores, "topk_mean", k=3), scores.mean(axis=1))
    with pytest.raises(ConfigError):
        aggregate(scores, "topk_mean", k=0)
    with pytest.raises(ConfigError):
        aggregate(scores, "topk_mean", k=4)
    with pytest.raises(ConfigError):
        aggregate(scores, "median")
    with pytest.raises(ConfigError):
        aggregate(np.zeros((0, 3)), "max")


def _branch(dim=8, frozen=True, seed=0):
    tower = ToyVisionTower(dim)
    tower.reset_parameters_seeded(seeded_generator(seed, "init", "fecal-tower"))
    branch = FecalBranch(tower, dim, frozen_backbone=frozen)
    branch.adapter.reset_parameters_seeded(seeded_generator(seed, "init", "fecal-adapter"))
    return branch


def _prompt_tensor(rng, p, d):
    return torch.from_numpy(_unit_rows(rng, p, d).astype(np.float32))


def test_branch_embeddings_are_unit(rng):
    branch = _branch()
    crops = torch.rand(6, 16, 16, 3, generator=torch.Generator().manual_seed(3))
    embs = branch.embed(crops)
    norms = embs.norm(dim=-1)
    assert torch.allclose(norms, torch.ones(6), atol=1e-6)


def test_branch_scores_against_numpy(rng):
    branch = _branch()
    crops = torch.rand(5, 16, 16, 3, generator=torch.Generator().manual_seed(4))
    prompts = _prompt_tensor(rng, 3, 8)
    scores = branch.scores(crops, prompts).detach().numpy()
    embs = branch.embed(crops).detach().numpy()
    bank = PromptBank(prompts=("a", "b", "c"), embeddings=prompts.numpy().astype(np.float64))
    want = similarity_scores(embs.astype(np.float64), bank)
    assert np.abs(scores.astype(np.float64) - want).max() < 1e-6


def test_forward_shapes_and_modes(rng):
    branch = _branch()
    n, a = 3, 4
    crops = torch.rand(n, a, 16, 16, 3, generator=torch.Generator().manual_seed(5))
    prompts = _prompt_tensor(rng, 2, 8)
    z_max = branch(crops, prompts)
    assert z_max.shape == (n, a)
    z_mean = branch(crops, prompts, mode="mean")
    z_top1 = branch(crops, prompts, mode="topk_mean", k=1)
    assert torch.equal(z_max, z_top1)
    assert not torch.equal(z_max, z_mean)
    with pytest.raises(ConfigError):
        branch(crops, prompts, mode="nope")
    with pytest.raises(ConfigError):
        branch(crops, prompts, mode="topk_mean", k=9)


def test_cached_features_path_is_bitwise(rng):
    """tower_features -> forward_features equals the direct crops path."""
    branch = _branch()
    n, a = 4, 5
    crops = torch.rand(n, a, 16, 16, 3, generator=torch.Generator().manual_seed(6))
    prompts = _prompt_tensor(rng, 3, 8)
    direct = branch(crops, prompts)
    flat = crops.reshape(n * a, 16, 16, 3)
    feats = branch.tower_features(flat).reshape(n, a, -1)
    via_cache = branch.forward_features(feats, prompts)
    assert torch.equal(direct, via_cache)
    with pytest.raises(ConfigError):
        branch.forward_features(feats[0], prompts)


def test_frozen_branch_rejects_tower_grads():
    branch = _branch(frozen=True)
    crops = torch.rand(2, 16, 16, 3)
    feats = branch.tower_features(crops)
    assert not feats.requires_grad
    branch_t = _branch(frozen=False)
    feats_t = branch_t.tower_features(crops)
    assert feats_t.requires_grad
