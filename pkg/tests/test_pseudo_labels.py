import json
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import softmax
from promalign.alignment import ObjectProposal
from promalign.encoders import JointProjection, MultimodalEncoder
from promalign.errors import ConfigError, ExternalError, InputError
from promalign.pseudo_labels import (
    TEMPLATES,
    CacheSample,
    CacheStats,
    FixtureDetector,
    LexiconTagger,
    PromptTemplate,
    PseudoLabelEntry,
    RandomCropDetector,
    bbox_to_patches,
    build_cache,
    crop_patch_grid,
    extract_candidate_entities,
    get_template,
    load_relation_tags,
    propose_objects,
    read_cache,
    render_prompts,
    soft_label,
    soft_label_from_similarities,
    write_cache,
)

GRID = (4, 4)


def tagged(counts: dict[str, int], pos="NOUN"):
    return [[(w, pos)] * c for w, c in counts.items()]


class TestCandidates:
    def test_frequency_order(self):
        out = extract_candidate_entities(tagged({"face": 1, "girl": 3, "medal": 2}), 2)
        assert out.entities == ["girl", "medal"]
        assert out.source_counts == [3, 2]

    def test_tie_break(self):
        assert extract_candidate_entities(tagged({"b": 2, "a": 2}), 1).entities == ["a"]

    def test_shortage_warns(self, caplog):
        out = extract_candidate_entities(tagged({"x": 1, "y": 1, "z": 1}), 10)
        assert len(out) == 3
        assert "fewer than" in caplog.text

    def test_non_nouns_ignored(self):
        caps = [[("runs", "VERB"), ("dog", "NOUN"), ("Paris", "PROPN"), ("the", "DET")]]
        assert extract_candidate_entities(caps, 5).entities == ["dog", "paris"]

    def test_empty_corpus(self):
        with pytest.raises(InputError):
            extract_candidate_entities([], 3)

    def test_lexicon_tagger(self, tmp_path):
        path = tmp_path / "lex.tsv"
        path.write_text("dog\tNOUN\n# comment\nRuns\tVERB\n")
        tagger = LexiconTagger.from_file(path)
        assert tagger.tag(["Dog", "runs", "far"]) == [("Dog", "NOUN"), ("runs", "VERB"), ("far", "X")]

    @given(st.dictionaries(st.sampled_from("abcdefg"), st.integers(1, 5), min_size=1), st.integers(1, 8), st.randoms())
    def test_deterministic_under_caption_order(self, counts, m, rnd):
        caps = tagged(counts)
        shuffled = list(caps)
        rnd.shuffle(shuffled)
        a = extract_candidate_entities(caps, m)
        b = extract_candidate_entities(shuffled, m)
        assert a == b
        assert len(set(a.entities)) == len(a.entities)
        keys = [(-c, w) for w, c in zip(a.entities, a.source_counts)]
        assert keys == sorted(keys)


class TestRelationTags:
    def test_order_kept(self, tmp_path):
        p = tmp_path / "tags.txt"
        p.write_text("spouse\nemployer\n\n")
        assert load_relation_tags(p) == ["spouse", "employer"]

    def test_duplicates(self, tmp_path):
        p = tmp_path / "tags.txt"
        p.write_text("a\na\n")
        with pytest.raises(InputError):
            load_relation_tags(p)


class TestPrompts:
    def test_entity_template(self):
        assert render_prompts(["girl"], TEMPLATES["E1"]) == ["This is an image of girl"]

    def test_relation_template(self):
        assert render_prompts(["spouse"], TEMPLATES["RA"]) == ["The image shows the relation of spouse"]

    def test_empty(self):
        assert render_prompts([], TEMPLATES["E2"]) == []

    def test_every_template_has_one_slot(self):
        for t in TEMPLATES.values():
            assert t.pattern.count("{}") == 1

    def test_bad_pattern(self):
        with pytest.raises(ConfigError):
            PromptTemplate("X", "no slot here")

    def test_kind_checked(self):
        with pytest.raises(ConfigError):
            get_template("RA", "entity")


class TestSoftLabel:
    def test_hand_softmax(self):
        q = soft_label_from_similarities(torch.tensor([2.0, 1.0, 0.0], dtype=torch.float64), 1.0)
        assert q.tolist() == pytest.approx([0.665241, 0.244728, 0.090031], abs=1e-6)

    def test_uniform(self):
        q = soft_label_from_similarities(torch.full((5,), 0.7, dtype=torch.float64), 0.07)
        assert q.tolist() == pytest.approx([0.2] * 5, abs=1e-12)

    def test_sharpening(self):
        q = soft_label_from_similarities(torch.tensor([2.0, 1.0, 0.0], dtype=torch.float64), 0.1)
        expected = softmax([20.0, 10.0, 0.0])
        assert q.tolist() == pytest.approx(expected, rel=1e-9)
        assert q[0].item() == pytest.approx(0.999955, abs=1e-6)

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            soft_label_from_similarities([1.0], 0.0)

    def test_empty_prompts(self):
        with pytest.raises(InputError):
            soft_label(torch.zeros(2), torch.zeros(0, 2), JointProjection.identity(2), 1.0)

    def test_uses_joint_similarity(self):
        proj = JointProjection.identity(2)
        target = torch.tensor([1.0, 2.0], dtype=torch.float64)
        prompts = torch.tensor([[3.0, 4.0], [1.0, 0.0]], dtype=torch.float64)
        q = soft_label(target, prompts, proj, 2.0)
        assert q.tolist() == pytest.approx(softmax([11 / 2, 1 / 2]), abs=1e-12)

    @settings(max_examples=60)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(-50, 50), st.floats(0.05, 5), st.randoms())
    def test_shift_and_permutation(self, sims, c, tau, rnd):
        s = torch.tensor(sims, dtype=torch.float64)
        q = soft_label_from_similarities(s, tau)
        assert q.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert (q >= 0).all()
        assert soft_label_from_similarities(s + c, tau).tolist() == pytest.approx(q.tolist(), abs=1e-9)
        perm = list(range(len(sims)))
        rnd.shuffle(perm)
        assert soft_label_from_similarities(s[perm], tau).tolist() == pytest.approx(q[perm].tolist(), abs=1e-12)

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.integers(0, 5), st.floats(0.01, 3))
    def test_monotone(self, sims, i, bump):
        i %= len(sims)
        s = torch.tensor(sims, dtype=torch.float64)
        raised = s.clone()
        raised[i] += bump
        assert soft_label_from_similarities(raised, 1.0)[i] > soft_label_from_similarities(s, 1.0)[i]


class TestProposals:
    def test_exact_patches(self):
        assert bbox_to_patches((0.0, 0.25, 0.5, 0.5), GRID) == (5, 6)

    def test_forty_percent_excluded(self):
        # covers 40% of patch 1's width over its full height, and nothing else
        assert bbox_to_patches((0.0, 0.0, 0.1, 0.25), GRID) == ()

    def test_half_included(self):
        assert bbox_to_patches((0.0, 0.0, 0.125, 0.25), GRID) == (1,)

    def test_fixture_detector(self, tmp_path):
        path = tmp_path / "boxes.jsonl"
        path.write_text(json.dumps({"sample_id": "s1", "bboxes": [[0.0, 0.25, 0.5, 0.5]]}) + "\n")
        props = propose_objects("s1", GRID, FixtureDetector.from_file(path))
        assert [p.patch_indices for p in props] == [(5, 6)]
        assert propose_objects("unknown", GRID, FixtureDetector.from_file(path)) == []

    def test_malformed_fixture(self, tmp_path):
        path = tmp_path / "boxes.jsonl"
        path.write_text('{"sample_id": "s1", "bboxes": [[0.5, 0.0, 0.2, 1.0]]}\n')
        with pytest.raises(InputError, match=":1"):
            FixtureDetector.from_file(path)

    def test_retry_then_succeed(self):
        class Flaky:
            calls = 0

            def detect(self, sample_id):
                self.calls += 1
                if self.calls == 1:
                    raise OSError("transient")
                return [(0.0, 0.0, 0.25, 0.25)]

        assert len(propose_objects("s", GRID, Flaky())) == 1

    def test_persistent_failure_is_retriable_external_error(self):
        class Broken:
            def detect(self, sample_id):
                raise OSError("down")

        with pytest.raises(ExternalError) as info:
            propose_objects("s", GRID, Broken())
        assert info.value.retriable

    def test_random_crop_deterministic(self):
        a, b = RandomCropDetector(3), RandomCropDetector(3)
        assert a.detect("x") == b.detect("x")
        assert a.detect("x") != RandomCropDetector(4).detect("x")
        x0, y0, x1, y1 = a.detect("x")[0]
        assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1

    def test_crop_whole_image_is_identity(self):
        patches = torch.arange(16 * 2, dtype=torch.float32).reshape(16, 2)
        assert torch.equal(crop_patch_grid(patches, (0, 0, 1, 1), GRID), patches)

    def test_crop_single_patch_replicates(self):
        patches = torch.arange(16, dtype=torch.float32).reshape(16, 1)
        out = crop_patch_grid(patches, (0.25, 0.25, 0.5, 0.5), GRID)
        assert out.flatten().tolist() == [5.0] * 16


def entry(sid="s", kind="relation", probs=(0.25, 0.75), proposal=None):
    return PseudoLabelEntry(sid, kind, "RA", 0.07, list(probs), proposal)


class TestCacheFile:
    def test_round_trip(self, tmp_path):
        prop = ObjectProposal((0.0, 0.0, 0.5, 0.5), (1, 2, 5, 6))
        entries = [entry(), entry(kind="entity", probs=(1 / 3, 1 / 3, 1 / 3), proposal=prop)]
        write_cache(tmp_path / "c.jsonl", entries)
        back = read_cache(tmp_path / "c.jsonl")
        assert back[1].proposal == prop
        assert back[1].probs == pytest.approx([1 / 3] * 3, rel=1e-8)
        rec = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[1])
        assert rec["schema_version"] == 1 and rec["probs"][0] == 0.333333333

    def test_entity_needs_proposal(self):
        with pytest.raises(InputError):
            entry(kind="entity")

    def test_not_a_distribution(self):
        with pytest.raises(InputError):
            entry(probs=(0.5, 0.6))

    def test_failed_write_leaves_old_file(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_cache(path, [entry()])
        before = path.read_bytes()

        def broken():
            yield entry()
            raise RuntimeError("boom")

        with pytest.raises(RuntimeError):
            write_cache(path, broken())
        assert path.read_bytes() == before
        assert list(tmp_path.iterdir()) == [path]

    def test_bad_schema_version(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({**entry().to_record(), "schema_version": 99}) + "\n")
        with pytest.raises(InputError, match=":1"):
            read_cache(path)


def _tokenize(text):
    return [2 + (sum(map(ord, w)) % 40) for w in text.lower().split()]


class TestBuildCache:
    def setup_samples(self, config, n=2):
        g = torch.Generator().manual_seed(0)
        return [CacheSample(f"s{i}", torch.randn(config.num_patches, config.patch_feature_dim, generator=g)) for i in range(n)]

    def run(self, config, detector, samples=None, stats=None):
        enc = MultimodalEncoder(config)
        return list(build_cache(samples or self.setup_samples(config), enc, _tokenize, ["girl", "medal", "face"],
                                ["spouse", "employer"], TEMPLATES["E1"], TEMPLATES["RA"], 0.07, detector, stats))

    def test_cardinality(self, tiny_config):
        det = FixtureDetector({"s0": [(0, 0, 0.5, 0.5)], "s1": [(0.5, 0.5, 1, 1)]})
        out = self.run(tiny_config, det)
        assert [e.kind for e in out].count("entity") == 2
        assert [e.kind for e in out].count("relation") == 2
        for e in out:
            assert sum(e.probs) == pytest.approx(1.0, abs=1e-6)
            assert len(e.probs) == (3 if e.kind == "entity" else 2)

    def test_no_proposal_relation_only(self, tiny_config):
        stats = CacheStats()
        out = self.run(tiny_config, FixtureDetector({}), stats=stats)
        assert {e.kind for e in out} == {"relation"}
        assert stats.no_proposal == 2

    def test_detector_failure_skips_sample(self, tiny_config):
        class HalfBroken:
            def detect(self, sample_id):
                if sample_id == "s0":
                    raise OSError("down")
                return []

        stats = CacheStats()
        out = self.run(tiny_config, HalfBroken(), stats=stats)
        assert [e.sample_id for e in out] == ["s1"]
        assert stats.detector_failures == ["s0"]

    def test_rebuild_is_byte_identical(self, tiny_config, tmp_path):
        det = FixtureDetector({"s0": [(0, 0, 0.5, 0.5), (0.5, 0, 1, 0.5)]})
        write_cache(tmp_path / "a.jsonl", self.run(tiny_config, det))
        write_cache(tmp_path / "b.jsonl", self.run(tiny_config, det))
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_restores_training_mode_and_leaves_no_graph(self, tiny_config):
        enc = MultimodalEncoder(tiny_config).train()
        out = list(build_cache(self.setup_samples(tiny_config), enc, _tokenize, ["a"], ["b"],
                               TEMPLATES["E1"], TEMPLATES["RA"], 0.07, RandomCropDetector(0)))
        assert enc.training
        assert all(isinstance(p, float) for e in out for p in e.probs)
        assert all(math.isfinite(p) for e in out for p in e.probs)
