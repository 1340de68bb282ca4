import math

import numpy as np
import pytest
import torch

from malenia.alignment import (
    PairSets,
    build_pairs,
    deep_dice_loss,
    downsample_mask,
    mp_nce,
    multiscale_sim_loss,
    similarity,
    soft_dice_loss,
)
from malenia.attributes import (
    ASPECTS,
    HashedSubwordProvider,
    RandomLinearProjection,
    default_schema,
    embed_descriptions,
)
from malenia.errors import EmptyMaskError, ShapeError, UnknownValueError
from malenia.maskdecoder import Assignment


def random_pairs(n_tokens: int, n_ids: int, rng: np.random.Generator) -> PairSets:
    """Random disjoint positive/negative id sets over ids 0..n_ids-1."""
    positives, negatives = [], []
    for _ in range(n_tokens):
        ids = rng.permutation(n_ids)
        n_pos = int(rng.integers(1, max(2, n_ids // 3)))
        n_neg = int(rng.integers(1, n_ids - n_pos))
        positives.append(tuple(int(i) for i in ids[:n_pos]))
        negatives.append(tuple(int(i) for i in ids[n_pos : n_pos + n_neg]))
    return PairSets(positives=tuple(positives), negatives=tuple(negatives))


def direct_mp_nce(scores: np.ndarray, pairs: PairSets) -> float:
    """Literal evaluation: softmax ratios per positive, plain exp arithmetic."""
    total = 0.0
    for j in range(pairs.num_tokens):
        inner = 0.0
        for k in pairs.positives[j]:
            denom = math.exp(scores[j, k]) + sum(
                math.exp(scores[j, n]) for n in pairs.negatives[j]
            )
            inner += math.log(math.exp(scores[j, k]) / denom)
        total += inner / len(pairs.positives[j])
    return -total / pairs.num_tokens


# --- contrastive loss oracles ---------------------------------------------------

def test_mp_nce_matches_direct_evaluation_many_instances():
    rng = np.random.default_rng(0)
    for _ in range(120):
        n_tokens = int(rng.integers(1, 8))
        n_ids = int(rng.integers(4, 20))
        pairs = random_pairs(n_tokens, n_ids, rng)
        scores = rng.normal(scale=3.0, size=(n_tokens, n_ids))
        got = float(mp_nce(torch.as_tensor(scores), pairs))
        assert abs(got - direct_mp_nce(scores, pairs)) <= 1e-9


def test_mp_nce_reduces_to_infonce_for_single_positive():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n_ids = 12
        scores = rng.normal(scale=2.0, size=(3, n_ids))
        positives = tuple((int(rng.integers(0, n_ids)),) for _ in range(3))
        negatives = tuple(
            tuple(i for i in range(n_ids) if i != pos[0]) for pos in positives
        )
        pairs = PairSets(positives=positives, negatives=negatives)
        got = float(mp_nce(torch.as_tensor(scores), pairs))
        # standard InfoNCE: cross-entropy of the positive against all ids
        expected = float(
            np.mean(
                [
                    -scores[j, positives[j][0]]
                    + np.log(np.exp(scores[j]).sum())
                    for j in range(3)
                ]
            )
        )
        assert abs(got - expected) <= 1e-12


def test_mp_nce_excludes_other_positives_from_denominator():
    # two positives with one hugely scored: if positives leaked into the
    # denominator, the second positive's term would be dominated by the first
    scores = torch.tensor([[50.0, 0.0, 0.0]])
    pairs = PairSets(positives=((0, 1),), negatives=((2,),))
    got = float(mp_nce(scores, pairs))
    t1 = -(50.0 - math.log(math.exp(50.0) + 1.0))
    t2 = -(0.0 - math.log(math.exp(0.0) + 1.0))
    assert abs(got - (t1 + t2) / 2) < 1e-9


def test_mp_nce_stable_at_extreme_scores():
    scores = torch.tensor([[1000.0, -1000.0, 900.0]])
    pairs = PairSets(positives=((0,),), negatives=((1, 2),))
    assert torch.isfinite(mp_nce(scores, pairs))


def test_mp_nce_rejects_row_mismatch():
    pairs = PairSets(positives=((0,),), negatives=((1,),))
    with pytest.raises(ShapeError):
        mp_nce(torch.zeros(2, 3), pairs)


def test_pairsets_rejects_overlap():
    with pytest.raises(UnknownValueError):
        PairSets(positives=((0, 1),), negatives=((1, 2),))


# --- similarity -----------------------------------------------------------------

def test_similarity_scaling():
    tokens = torch.randn(4, 8, dtype=torch.float64)
    bank = torch.randn(5, 8, dtype=torch.float64)
    s1 = similarity(tokens, bank, 1.0)
    s2 = similarity(tokens, bank, 0.07)
    assert torch.allclose(s2, s1 / 0.07)
    assert torch.allclose(s1, tokens @ bank.T)


def test_similarity_rejects_bad_temperature_and_dims():
    with pytest.raises(ShapeError):
        similarity(torch.randn(2, 4), torch.randn(3, 4), 0.0)
    with pytest.raises(ShapeError):
        similarity(torch.randn(2, 4), torch.randn(3, 5), 0.1)


def test_similarity_gradient_flows_through_temperature():
    tokens = torch.randn(2, 4)
    bank = torch.randn(3, 4)
    tau = torch.tensor(0.07, requires_grad=True)
    similarity(tokens, bank, tau).sum().backward()
    assert tau.grad is not None and torch.isfinite(tau.grad)


# --- gradient checks against central finite differences --------------------------

def _fd_check(f, x: torch.Tensor, h: float = 1e-5, tol: float = 1e-4):
    x = x.detach().double().requires_grad_(True)
    f(x).backward()
    grad = x.grad.clone()
    flat = x.detach().flatten()
    num = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        up = float(f(flat.reshape(x.shape)))
        flat[i] = orig - h
        down = float(f(flat.reshape(x.shape)))
        flat[i] = orig
        num[i] = (up - down) / (2 * h)
    num = num.reshape(x.shape)
    denom = max(float(grad.norm()), float(num.norm()), 1e-12)
    assert float((grad - num).norm()) / denom < tol


def test_mp_nce_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    pairs = random_pairs(4, 9, rng)
    scores = torch.as_tensor(rng.normal(size=(4, 9)))
    _fd_check(lambda s: mp_nce(s, pairs), scores)


def test_similarity_loss_gradient_wrt_tokens_and_tau():
    rng = np.random.default_rng(3)
    pairs = random_pairs(4, 9, rng)
    bank = torch.as_tensor(rng.normal(size=(9, 8)))
    tokens = torch.as_tensor(rng.normal(size=(4, 8)))
    _fd_check(lambda t: mp_nce(similarity(t, bank, 0.3), pairs), tokens)
    tokens_fixed = tokens.clone()
    _fd_check(
        lambda tau: mp_nce(similarity(tokens_fixed, bank, tau.reshape(())), pairs),
        torch.tensor([0.3]),
    )


def test_soft_dice_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    target = torch.as_tensor((rng.random((4, 4, 4)) > 0.5).astype(float))
    pred = torch.as_tensor(rng.random((4, 4, 4)) * 0.8 + 0.1)
    _fd_check(lambda p: soft_dice_loss(p, target), pred)


# --- soft dice / downsampling ----------------------------------------------------

def test_soft_dice_oracle():
    pred = torch.tensor([[1.0, 0.0], [0.5, 0.0]])
    target = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    inter, psum, tsum = 1.5, 1.5, 2.0
    expected = 1 - (2 * inter + 1e-5) / (psum + tsum + 1e-5)
    assert abs(float(soft_dice_loss(pred, target)) - expected) < 1e-7


def test_soft_dice_perfect_and_empty():
    m = torch.ones(3, 3, 3)
    assert float(soft_dice_loss(m, m)) < 1e-5
    z = torch.zeros(3, 3, 3)
    assert float(soft_dice_loss(z, z)) == 0.0  # smoothing guard: 0/0 -> 0 loss


def test_downsample_mask_is_any_overlap():
    mask = torch.zeros(8, 8, 8)
    mask[3, 3, 3] = 1  # single voxel
    down = downsample_mask(mask, (2, 2, 2))
    assert down.shape == (2, 2, 2)
    assert float(down[0, 0, 0]) == 1.0
    assert float(down.sum()) == 1.0


def test_downsample_mask_rejects_non_integer_factor():
    with pytest.raises(ShapeError):
        downsample_mask(torch.zeros(6, 6, 6), (4, 4, 4))


# --- pair construction ----------------------------------------------------------

@pytest.fixture(scope="module")
def bank():
    schema = default_schema()
    provider = HashedSubwordProvider(dim=64, seed=0)
    return embed_descriptions(schema, provider, RandomLinearProjection(64, 16, 1))


def full_report(schema):
    return {a: schema.vocab[a][0] for a in ASPECTS}


def test_build_pairs_matched_token_gets_eight_positives(bank):
    schema = default_schema()
    report = full_report(schema)
    pairs = build_pairs(Assignment(pairs=((2, 0),)), [report], bank, num_tokens=4)
    assert len(pairs.positives[2]) == 8
    expected = [bank.lookup(a, report[a]) for a in ASPECTS]
    assert list(pairs.positives[2]) == expected
    assert len(pairs.negatives[2]) == 41 - 8


def test_build_pairs_background_tokens_get_t0(bank):
    schema = default_schema()
    pairs = build_pairs(
        Assignment(pairs=((2, 0),)), [full_report(schema)], bank, num_tokens=4
    )
    for j in (0, 1, 3):
        assert pairs.positives[j] == (0,)
        assert len(pairs.negatives[j]) == 40
        assert 0 not in pairs.negatives[j]


def test_build_pairs_rejects_incomplete_report(bank):
    schema = default_schema()
    report = full_report(schema)
    del report["Shape"]
    with pytest.raises(UnknownValueError):
        build_pairs(Assignment(pairs=((0, 0),)), [report], bank, num_tokens=2)


# --- deep supervision ------------------------------------------------------------

def test_deep_dice_loss_direct_recomputation():
    g = torch.Generator().manual_seed(5)
    proposals = [torch.rand(3, 4, 4, 4, generator=g), torch.rand(3, 8, 8, 8, generator=g)]
    gt = torch.zeros(2, 8, 8, 8)
    gt[0, :4, :4, :4] = 1
    gt[1, 6:, 6:, 6:] = 1
    assignment = Assignment(pairs=((0, 0), (2, 1)))
    got = float(deep_dice_loss(proposals, assignment, gt))
    expected_blocks = []
    for proposal in proposals:
        spatial = proposal.shape[1:]
        terms = []
        for j, s in assignment.pairs:
            target = downsample_mask(gt[s], spatial)
            terms.append(float(soft_dice_loss(proposal[j], target)))
        expected_blocks.append(float(np.mean(terms)))
    assert abs(got - float(np.mean(expected_blocks))) < 1e-6


def test_deep_dice_loss_skips_vanished_scales_and_renormalizes():
    # lesion is a single voxel: pooling to 1x1x1 keeps it, so nothing vanishes;
    # instead make a scale where pooling is impossible by using an empty pool
    g = torch.Generator().manual_seed(6)
    gt = torch.zeros(1, 8, 8, 8)
    gt[0, 0, 0, 0] = 1
    proposals = [torch.rand(2, 2, 2, 2, generator=g), torch.rand(2, 8, 8, 8, generator=g)]
    assignment = Assignment(pairs=((1, 0),))
    got = float(deep_dice_loss(proposals, assignment, gt))
    t_coarse = float(soft_dice_loss(proposals[0][1], downsample_mask(gt[0], (2, 2, 2))))
    t_fine = float(soft_dice_loss(proposals[1][1], gt[0]))
    assert abs(got - (t_coarse + t_fine) / 2) < 1e-6


def test_deep_dice_loss_empty_gt_mask_raises():
    proposals = [torch.rand(2, 4, 4, 4)]
    with pytest.raises(EmptyMaskError):
        deep_dice_loss(proposals, Assignment(pairs=((0, 0),)), torch.zeros(1, 4, 4, 4))


def test_deep_dice_loss_no_pairs_returns_zero_with_graph():
    proposals = [torch.rand(2, 4, 4, 4, requires_grad=True)]
    loss = deep_dice_loss(proposals, Assignment(pairs=()), torch.zeros(0, 4, 4, 4))
    assert float(loss.detach()) == 0.0
    loss.backward()
    assert proposals[0].grad is not None


def test_multiscale_sim_loss_is_mean_over_blocks():
    rng = np.random.default_rng(7)
    pairs = random_pairs(3, 8, rng)
    bank = torch.as_tensor(rng.normal(size=(8, 6)))
    blocks = [torch.as_tensor(rng.normal(size=(3, 6))) for _ in range(3)]
    got = float(multiscale_sim_loss(blocks, bank, pairs, 0.5))
    expected = np.mean(
        [float(mp_nce(similarity(t, bank, 0.5), pairs)) for t in blocks]
    )
    assert abs(got - expected) < 1e-9
