import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monoattn.data import (
    EOS,
    UNK,
    Pair,
    ParallelCorpus,
    SyntheticTaskSpec,
    Vocab,
    batch_iter,
    build_vocab,
    expansion_counts,
    g2p_transcribe,
    gen_task,
    load_feature_tsv,
    load_g2p_rules,
    load_tsv,
    read_features,
    render_features,
    symbol_vector,
    write_features,
    write_tsv,
)
from monoattn.errors import EmptyCorpusError, ParseError


def corpus_of(*pairs):
    return ParallelCorpus([Pair(list(s), [list(t)]) for s, t in pairs])


class TestVocab:
    def test_min_count_one_has_no_unk(self):
        c = corpus_of(("ab", "xyz"), ("ba", "zy"))
        v = build_vocab(c)
        assert UNK not in v.encode(["x", "y", "z"])

    def test_rare_token_maps_to_unk(self):
        v = build_vocab([["zzz", "a"], ["a", "b"], ["b"]], min_count=2)
        assert v.encode(["zzz"]) == [UNK]
        assert "a" in v and "b" in v

    def test_round_trip(self):
        v = Vocab(["x", "y", "z"])
        toks = ["z", "x", "y", "x"]
        assert v.decode(v.encode(toks, add_eos=True)) == toks

    def test_order_by_count_then_lexicographic(self):
        v = build_vocab([["b", "a", "c", "c"]])
        assert v.tokens == ["c", "a", "b"]

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpusError):
            build_vocab(ParallelCorpus([]))


class TestGenerators:
    def test_copy(self):
        c = gen_task(SyntheticTaskSpec("copy", alphabet_size=3, min_len=3, max_len=3, seed=4), 5)
        for p in c:
            assert p.references == [p.source]
            assert p.alignment == [0, 1, 2]

    def test_fixed_ratio_two(self):
        spec = SyntheticTaskSpec("expansion", min_len=5, max_len=5, ratio_min=2, ratio_max=2)
        for p in gen_task(spec, 10):
            assert len(p.references[0]) == 10

    def test_g2p_rule(self):
        assert ("ch", "CH") in load_g2p_rules()
        phones, starts = g2p_transcribe("chat")
        assert phones[0] == "CH" and starts == [0, 2, 3]

    def test_g2p_corpus_matches_transcription(self):
        for p in gen_task(SyntheticTaskSpec("toy-g2p", min_len=2, max_len=5, seed=3), 50):
            assert p.references[0] == g2p_transcribe("".join(p.source))[0]

    @pytest.mark.parametrize("kind", ["copy", "expansion", "toy-g2p"])
    def test_alignments_strictly_monotonic(self, kind):
        for p in gen_task(SyntheticTaskSpec(kind, seed=11), 200):
            a = p.alignment
            assert len(a) == len(p.references[0])
            assert a[0] == 0 and a[-1] <= len(p.source) - 1
            steps = np.diff(a)
            if kind == "expansion":
                # runs of repeated symbols share a source position; runs advance one at a time
                assert np.all((steps == 0) | (steps == 1))
                assert sorted(set(a)) == list(range(len(p.source)))
            else:
                assert np.all(steps > 0)

    @pytest.mark.parametrize("kind", ["copy", "expansion", "toy-g2p"])
    def test_reproducible(self, kind, tmp_path):
        spec = SyntheticTaskSpec(kind, seed=9)
        write_tsv(gen_task(spec, 100), tmp_path / "a.tsv")
        write_tsv(gen_task(spec, 100), tmp_path / "b.tsv")
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    @pytest.mark.parametrize("lo,hi", [(2, 3), (2, 2), (1, 4)])
    def test_mean_ratio(self, lo, hi):
        c = gen_task(SyntheticTaskSpec("expansion", ratio_min=lo, ratio_max=hi, seed=2), 1000)
        ratio = np.mean([len(p.references[0]) / len(p.source) for p in c])
        assert abs(ratio - (lo + hi) / 2) <= 0.05 * (lo + hi) / 2

    def test_expansion_rule_shared_across_seeds(self):
        a = SyntheticTaskSpec("expansion", seed=1)
        b = SyntheticTaskSpec("expansion", seed=2)
        assert expansion_counts(a) == expansion_counts(b)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            gen_task(SyntheticTaskSpec("copy", min_len=4, max_len=2), 3)
        with pytest.raises(ValueError):
            gen_task(SyntheticTaskSpec("reverse"), 3)


class TestFeatures:
    def test_render_swaps_direction(self):
        c = gen_task(SyntheticTaskSpec("expansion", min_len=3, max_len=6, seed=1), 20)
        f = render_features(c, dim=5, noise=0.0, seed=3)
        for p, q in zip(c, f):
            assert q.references == [p.source]
            assert q.source.shape == (len(p.references[0]), 5)
            np.testing.assert_array_equal(q.source[0], symbol_vector(p.references[0][0], 5, 3))

    def test_symbol_vectors_independent_of_corpus(self):
        a = render_features(corpus_of(("ab", "ab")), 4, 0.0, seed=0)
        b = render_features(corpus_of(("ba", "ba")), 4, 0.0, seed=0)
        np.testing.assert_array_equal(a[0].source[0], b[0].source[1])

    def test_feature_file_round_trip(self, tmp_path, rng):
        x = rng.normal(size=(7, 3))
        write_features(tmp_path / "u.feat", x)
        np.testing.assert_array_equal(read_features(tmp_path / "u.feat"), x)

    def test_feature_tsv(self, tmp_path, rng):
        write_features(tmp_path / "u1.feat", rng.normal(size=(4, 2)))
        (tmp_path / "c.tsv").write_text("u1.feat\tA B\n")
        c = load_feature_tsv(tmp_path / "c.tsv")
        assert c.is_features and c[0].references == [["A", "B"]]

    def test_bad_feature_header(self, tmp_path):
        (tmp_path / "bad.feat").write_text("3 2\n1 2\n")
        with pytest.raises(ParseError):
            read_features(tmp_path / "bad.feat")


class TestTSV:
    def test_character_source(self, tmp_path):
        (tmp_path / "c.tsv").write_text("AB\tAE B\n")
        c = load_tsv(tmp_path / "c.tsv")
        assert c[0].source == ["A", "B"] and c[0].references == [["AE", "B"]]

    def test_multi_reference_merge(self, tmp_path):
        (tmp_path / "c.tsv").write_text("read\tR EH D\nread\tR IY D\nred\tR EH D\n")
        c = load_tsv(tmp_path / "c.tsv")
        assert len(c) == 2
        assert c[0].references == [["R", "EH", "D"], ["R", "IY", "D"]]

    def test_missing_tab_reports_line(self, tmp_path):
        (tmp_path / "c.tsv").write_text("ab\tA B\nno tab here\n")
        with pytest.raises(ParseError) as exc:
            load_tsv(tmp_path / "c.tsv")
        assert exc.value.lineno == 2

    def test_empty_file(self, tmp_path):
        (tmp_path / "c.tsv").write_text("\n")
        with pytest.raises(EmptyCorpusError):
            load_tsv(tmp_path / "c.tsv")

    def test_write_load_round_trip(self, tmp_path):
        c = gen_task(SyntheticTaskSpec("copy", seed=5), 30)
        write_tsv(c, tmp_path / "c.tsv")
        back = load_tsv(tmp_path / "c.tsv")
        assert [p.source for p in back] == [p.source for p in c]


class TestBatching:
    def setup_method(self):
        self.corpus = gen_task(SyntheticTaskSpec("copy", seed=1), 23)
        self.vs = build_vocab(self.corpus, side="source")
        self.vt = build_vocab(self.corpus)

    def test_single_batch(self):
        assert len(batch_iter(self.corpus, self.vs, self.vt, 50)) == 1

    def test_same_seed_same_order(self):
        a = batch_iter(self.corpus, self.vs, self.vt, 4, seed=3, epoch=2)
        b = batch_iter(self.corpus, self.vs, self.vt, 4, seed=3, epoch=2)
        assert [x.targets for x in a] == [x.targets for x in b]
        c = batch_iter(self.corpus, self.vs, self.vt, 4, seed=3, epoch=3)
        assert [x.targets for x in a] != [x.targets for x in c]

    def test_targets_end_with_eos(self):
        for batch in batch_iter(self.corpus, self.vs, self.vt, 4):
            assert all(t[-1] == EOS for t in batch.targets)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30))
    def test_every_item_once(self, bs):
        batches = batch_iter(self.corpus, self.vs, self.vt, bs, seed=1)
        assert sum(len(b) for b in batches) == len(self.corpus)
        assert all(len(b) <= bs for b in batches)

    def test_padding(self):
        batch = batch_iter(self.corpus, self.vs, self.vt, 5)[0]
        ids, mask = batch.padded_targets()
        assert ids.shape == mask.shape == (5, batch.target_lengths.max())
        assert (mask.sum(axis=1) == batch.target_lengths).all()
