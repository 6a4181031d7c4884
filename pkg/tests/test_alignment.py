import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import analytic_grad, central_difference, relative_error
from promalign.alignment import (
    LossWeights,
    ObjectProposal,
    PretrainHeads,
    cir_loss,
    cit_loss,
    coe_loss,
    itm_loss,
    pool_object_region,
    pretrain_losses,
    total_loss,
)
from promalign.encoders import FusedEmbeddings, MultimodalEncoder
from promalign.errors import ConfigError, InputError

probs = st.floats(0.01, 0.99)


def fused_from(rows, n_tokens):
    emb = torch.tensor(rows, dtype=torch.float64)[None]
    return FusedEmbeddings(emb, torch.ones(emb.shape[:2], dtype=torch.bool), [n_tokens], emb.shape[1] - n_tokens - 1)


def distribution(xs):
    t = torch.tensor(xs, dtype=torch.float64).abs() + 1e-3
    return t / t.sum()


class TestItm:
    def test_max_uncertainty(self):
        assert itm_loss([0.5], [1]).item() == pytest.approx(math.log(2), abs=1e-9)

    def test_perfect_limit(self):
        eps = 1e-9
        assert itm_loss(torch.tensor([1 - eps, eps], dtype=torch.float64), [1, 0]).item() < 1e-6

    def test_hand_value(self):
        expected = -(math.log(0.9) + math.log(0.8)) / 2
        assert expected == pytest.approx(0.164252, abs=1e-6)
        assert itm_loss(torch.tensor([0.9, 0.2], dtype=torch.float64), [1, 0]).item() == pytest.approx(expected, abs=1e-12)

    def test_clamped_at_exact_zero(self):
        assert math.isfinite(itm_loss([0.0], [1]).item())

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            itm_loss([0.5, 0.5], [1])

    @given(st.lists(st.tuples(probs, st.integers(0, 1)), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant(self, pairs, rnd):
        p = torch.tensor([a for a, _ in pairs], dtype=torch.float64)
        y = torch.tensor([b for _, b in pairs])
        order = list(range(len(pairs)))
        rnd.shuffle(order)
        assert itm_loss(p[order], y[order]).item() == pytest.approx(itm_loss(p, y).item(), rel=1e-12)


class TestCit:
    def test_single_pair_is_zero(self):
        assert cit_loss(torch.tensor([[3.7]]), 0.07).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        s = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        assert cit_loss(s, 1.0).item() == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_equal_entries(self, n):
        assert cit_loss(torch.full((n, n), 0.3, dtype=torch.float64), 0.07).item() == pytest.approx(math.log(n), abs=1e-9)

    def test_empty_is_zero_with_warning(self, caplog):
        assert cit_loss(torch.zeros(0, 0), 1.0).item() == 0.0
        assert "no matched pairs" in caplog.text

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            cit_loss(torch.eye(2), 0.0)

    def test_not_square(self):
        with pytest.raises(InputError):
            cit_loss(torch.zeros(2, 3), 1.0)

    @settings(max_examples=50)
    @given(st.integers(1, 5), st.floats(-20, 20), st.integers(0, 10_000))
    def test_nonnegative_and_shift_invariant(self, n, c, seed):
        s = torch.randn(n, n, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        base = cit_loss(s, 0.5).item()
        assert base >= 0
        assert cit_loss(s + c, 0.5).item() == pytest.approx(base, abs=1e-9)


class TestPooling:
    def test_single_patch(self):
        fused = fused_from([[0, 0], [9, 9], [1, 2], [3, 4]], n_tokens=1)
        assert pool_object_region(fused, 0, [2]).tolist() == [3.0, 4.0]

    def test_identical_embeddings(self):
        fused = fused_from([[0, 0], [0, 0], [5, 6], [5, 6]], n_tokens=1)
        assert pool_object_region(fused, 0, [1, 2]).tolist() == [5.0, 6.0]

    def test_hand_mean(self):
        fused = fused_from([[0, 0], [9, 9], [1, 0], [0, 1]], n_tokens=1)
        assert pool_object_region(fused, 0, [1, 2]).tolist() == [0.5, 0.5]

    def test_reads_patch_region_not_text(self):
        """Patch 1 of a sample with 2 tokens sits at fused index 3."""
        fused = fused_from([[0, 0], [7, 7], [8, 8], [1, 2]], n_tokens=2)
        assert pool_object_region(fused, 0, [1]).tolist() == [1.0, 2.0]

    def test_empty(self):
        with pytest.raises(InputError):
            pool_object_region(fused_from([[0, 0], [1, 1]], 0), 0, [])

    def test_proposal_needs_patches(self):
        with pytest.raises(InputError):
            ObjectProposal((0, 0, 1, 1), ())


class TestSoftCrossEntropy:
    def test_one_hot_match(self):
        logits = torch.tensor([[50.0, 0.0, 0.0]], dtype=torch.float64)
        assert coe_loss(logits, [[1.0, 0.0, 0.0]]).item() < 1e-12
        assert cir_loss(logits, [[1.0, 0.0, 0.0]]).item() < 1e-12

    def test_uniform(self):
        assert coe_loss(torch.zeros(1, 4, dtype=torch.float64), torch.full((1, 4), 0.25)).item() == pytest.approx(math.log(4), abs=1e-9)
        assert cir_loss(torch.zeros(1, 8), torch.full((1, 8), 0.125)).item() == pytest.approx(math.log(8), abs=1e-6)

    def test_hand_value(self):
        logits = torch.tensor([math.log(0.6), math.log(0.4)], dtype=torch.float64)
        expected = -(0.7 * math.log(0.6) + 0.3 * math.log(0.4))  # 0.632465
        assert expected == pytest.approx(0.632462, abs=1e-5)
        assert coe_loss(logits, [0.7, 0.3]).item() == pytest.approx(expected, abs=1e-12)

    def test_entropy_when_equal(self):
        q = torch.tensor([0.68, 0.12, 0.20], dtype=torch.float64)
        entropy = -sum(v * math.log(v) for v in (0.68, 0.12, 0.20))  # 0.838570
        assert cir_loss(q.log(), q).item() == pytest.approx(entropy, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            coe_loss(torch.zeros(2, 3), torch.full((2, 4), 0.25))

    @settings(max_examples=100)
    @given(st.lists(st.floats(0, 10), min_size=2, max_size=6).flatmap(
        lambda a: st.tuples(st.just(a), st.lists(st.floats(0, 10), min_size=len(a), max_size=len(a)))))
    def test_gibbs_inequality(self, pair):
        q, p = distribution(pair[0]), distribution(pair[1])
        entropy = -(q * q.log()).sum().item()
        ce = coe_loss(p.log(), q).item()
        assert ce >= entropy - 1e-8
        assert coe_loss(q.log(), q).item() == pytest.approx(entropy, abs=1e-8)


class TestTotal:
    def test_sum(self):
        parts = [torch.tensor(float(v)) for v in (1, 2, 3, 4)]
        assert total_loss(parts, LossWeights()).item() == 10

    def test_masking(self):
        parts = [torch.tensor(float(v)) for v in (5, 5, 5, 7)]
        assert total_loss(parts, LossWeights(0, 0, 0, 1)).item() == 7

    def test_defaults_all_one(self):
        assert LossWeights().as_tuple() == (1.0, 1.0, 1.0, 1.0)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            LossWeights(itm=-1)

    def test_zero_weight_drops_nonfinite_term(self):
        parts = [torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(2.0), torch.tensor(3.0)]
        assert total_loss(parts, LossWeights(cit=0)).item() == 6

    @given(st.lists(st.floats(0, 100), min_size=4, max_size=4),
           st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 10), st.integers(0, 3))
    def test_linear_in_each_weight(self, parts, weights, extra, i):
        parts_t = [torch.tensor(p, dtype=torch.float64) for p in parts]
        bumped = list(weights)
        bumped[i] += extra
        delta = total_loss(parts_t, LossWeights(*bumped)).item() - total_loss(parts_t, LossWeights(*weights)).item()
        assert delta == pytest.approx(extra * parts[i], rel=1e-9, abs=1e-9)


class TestGradients:
    """Autograd against central differences; the acceptance suite runs many more fixtures."""

    def test_cit_wrt_similarities(self):
        s = torch.randn(3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        f = lambda x: cit_loss(x, 0.5)
        assert relative_error(analytic_grad(f, s), central_difference(f, s)) <= 1e-4

    def test_coe_wrt_pooled_embeddings(self):
        g = torch.Generator().manual_seed(1)
        fc = torch.nn.Linear(4, 3).double()
        q = distribution(torch.rand(2, 3, generator=g).tolist()[0]).expand(2, 3)
        x = torch.randn(2, 4, dtype=torch.float64, generator=g)
        f = lambda e: coe_loss(fc(e), q)
        assert relative_error(analytic_grad(f, x), central_difference(f, x)) <= 1e-4


def _batch(config, labels):
    g = torch.Generator().manual_seed(3)
    seqs = [[2, 3, 4], [5, 6], [7, 8, 9, 10]][: len(labels)]
    patches = torch.randn(len(labels), config.num_patches, config.patch_feature_dim, generator=g)
    return seqs, patches


class TestPretrainLosses:
    def test_total_matches_weighted_components(self, tiny_config):
        enc = MultimodalEncoder(tiny_config)
        heads = PretrainHeads(tiny_config, 5, 3)
        labels = torch.tensor([1, 0, 1])
        out = enc(*_batch(tiny_config, labels))
        prop = ObjectProposal((0, 0, 0.5, 0.5), (1,))
        ent = [[(prop, distribution([1, 2, 3, 4, 5]))], [], [(prop, distribution([5, 1, 1, 1, 1]))] * 2]
        rel = [distribution([1, 1, 2]), None, distribution([3, 1, 1])]
        w = LossWeights(0.5, 2.0, 1.5, 0.25)
        parts = pretrain_losses(out.fused, out.text.summary, out.visual.summary, heads, enc.projection,
                                labels, ent, rel, w, tiny_config.temperature)
        expected = 0.5 * parts.itm + 2.0 * parts.cit + 1.5 * parts.coe + 0.25 * parts.cir
        assert parts.total.item() == pytest.approx(expected.item(), abs=1e-6)
        assert parts.coe_terms == 3
        assert parts.coe_excluded == 1

    def test_no_proposals_means_zero_coe(self, tiny_config):
        enc = MultimodalEncoder(tiny_config)
        heads = PretrainHeads(tiny_config, 5, 3)
        labels = torch.tensor([1, 1])
        out = enc(*_batch(tiny_config, labels))
        parts = pretrain_losses(out.fused, out.text.summary, out.visual.summary, heads, enc.projection,
                                labels, [[], []], [None, None], LossWeights(), 0.07)
        assert parts.coe.item() == 0.0 and parts.cir.item() == 0.0
        assert parts.coe_excluded == 2

    def test_all_zero_weights_have_no_gradient(self, tiny_config):
        enc = MultimodalEncoder(tiny_config)
        heads = PretrainHeads(tiny_config, 5, 3)
        labels = torch.tensor([1, 0])
        out = enc(*_batch(tiny_config, labels))
        parts = pretrain_losses(out.fused, out.text.summary, out.visual.summary, heads, enc.projection,
                                labels, [[], []], [None, None], LossWeights(0, 0, 0, 0), 0.07)
        assert parts.total.item() == 0.0
        assert not parts.total.requires_grad
