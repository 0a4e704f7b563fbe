import numpy as np
import pytest

from signlab import synth
from signlab.seeding import child_rng


def lang(seed=7, n=50, sigma=0.1):
    return synth.build_language(seed, n, d_raw=32, noise_sigma=sigma)


class TestLanguage:
    def test_deterministic(self):
        a, b = lang(), lang()
        assert a.signs == b.signs
        for s in a.signs:
            assert np.array_equal(a.prototypes[s], b.prototypes[s])
        assert a.grammar.permutations == b.grammar.permutations
        assert a.grammar.insertions == b.grammar.insertions
        assert a.grammar.content_map == b.grammar.content_map

    def test_seed_sensitivity(self):
        a, b = lang(7), lang(8)
        s = a.signs[0]
        assert not np.array_equal(a.prototypes[s], b.prototypes[s])

    def test_prototype_separation_beats_noise(self):
        lg = lang()
        sep = synth.prototype_separation(lg.prototypes)
        assert sep > 4 * lg.noise_sigma

    def test_separation_holds_at_high_noise(self):
        lg = lang(sigma=0.35)
        assert synth.prototype_separation(lg.prototypes) > 4 * 0.35

    def test_rejects_tiny_vocab(self):
        with pytest.raises(ValueError):
            synth.build_language(0, 1)


class TestGrammar:
    def test_gloss_never_longer_than_text(self):
        lg = lang()
        for i in range(300):
            g = synth.sample_gloss(lg, child_rng(1, "g", i))
            text = lg.grammar.apply(g)
            assert len(g) <= len(text)

    def test_apply_is_deterministic(self):
        lg = lang()
        g = synth.sample_gloss(lg, child_rng(2, "g"))
        assert lg.grammar.apply(g) == lg.grammar.apply(g)

    def test_unknown_sign_rejected(self):
        lg = lang()
        with pytest.raises(ValueError, match="zzz"):
            lg.grammar.apply(["zzz", lg.signs[0]])

    def test_permutation_visible_in_content_words(self):
        # some length must reorder; otherwise the grammar degenerates to identity
        lg = lang()
        assert any(tuple(p) != tuple(range(len(p)))
                   for p in lg.grammar.permutations.values())

    def test_sign_coverage(self):
        lg = lang()
        seen = set()
        for i in range(10000):
            seen.update(synth.sample_gloss(lg, child_rng(3, "cov", i)))
        assert seen == set(lg.signs)

    def test_gloss_lengths_in_range(self):
        lg = lang()
        ns = {len(synth.sample_gloss(lg, child_rng(4, "len", i))) for i in range(500)}
        assert min(ns) >= synth.GLOSS_MIN and max(ns) <= synth.GLOSS_MAX


class TestRender:
    def test_noise_free_identity(self):
        lg = lang()
        g = [lg.signs[3]]
        frames = synth.render_video(lg, g, jitter=False, sigma=0.0)
        assert np.array_equal(frames, lg.prototypes[g[0]].astype(np.float32))

    def test_concat_length(self):
        lg = lang()
        g = [lg.signs[0], lg.signs[1], lg.signs[2]]
        frames = synth.render_video(lg, g, jitter=False, sigma=0.0)
        want = sum(lg.prototypes[s].shape[0] for s in g)
        assert frames.shape == (want, lg.d_raw)

    def test_jitter_duration_bounds(self):
        lg = lang()
        g = [lg.signs[5]]
        L = lg.prototypes[g[0]].shape[0]
        for i in range(50):
            T = synth.render_video(lg, g, child_rng(5, "j", i)).shape[0]
            assert np.ceil(0.75 * L) <= T <= np.floor(1.25 * L)

    def test_two_renders_differ_but_stay_close(self):
        lg = lang()
        g = [lg.signs[0], lg.signs[7]]
        a = synth.render_video(lg, g, child_rng(6, "a"), jitter=False)
        b = synth.render_video(lg, g, child_rng(6, "b"), jitter=False)
        assert not np.array_equal(a, b)
        assert np.abs(a - b).max() < 6 * lg.noise_sigma * np.sqrt(2)

    def test_unknown_sign_named(self):
        lg = lang()
        with pytest.raises(ValueError, match="nope"):
            synth.render_video(lg, ["nope"], child_rng(0))

    def test_rng_required_when_stochastic(self):
        lg = lang()
        with pytest.raises(ValueError):
            synth.render_video(lg, [lg.signs[0]])


class TestDocuments:
    def test_token_stream_nonempty(self):
        lg = lang()
        doc = synth.sample_document(lg, child_rng(7, "d"), n_sentences=5)
        assert len(doc) >= 5
        assert synth.SEP_TOKEN in doc

    def test_docs_cover_vocabulary_words(self):
        lg = lang()
        toks = set()
        for i in range(200):
            toks.update(synth.sample_document(lg, child_rng(8, "d", i), 10))
        content = set(lg.grammar.content_map.values())
        assert content <= toks


class TestSltf:
    def test_roundtrip_exact(self, tmp_path):
        x = np.random.default_rng(0).normal(0, 1, (17, 8)).astype(np.float32)
        p = tmp_path / "v.sltf"
        synth.write_sltf(p, x)
        assert np.array_equal(synth.read_sltf(p), x)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "v.sltf"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="SLTF"):
            synth.read_sltf(p)

    def test_truncated_payload(self, tmp_path):
        x = np.ones((4, 4), dtype=np.float32)
        p = tmp_path / "v.sltf"
        synth.write_sltf(p, x)
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(ValueError, match="truncated"):
            synth.read_sltf(p)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        rows = [("a01", ["s1", "s2"], ["w2", "w1", "le"], "videos/a01.sltf")]
        p = tmp_path / "m.tsv"
        synth.write_manifest(p, rows)
        rec = synth.load_manifest(p)
        assert len(rec) == 1
        assert rec[0].id == "a01"
        assert rec[0].gloss == ["s1", "s2"]
        assert rec[0].text == ["w2", "w1", "le"]
        assert rec[0].video.endswith("videos/a01.sltf")

    def test_column_validation(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("only\tthree\tcols\n")
        with pytest.raises(ValueError, match="4 tab-separated"):
            synth.load_manifest(p)


class TestDataset:
    def test_split_hygiene_and_determinism(self, tmp_path):
        lg = lang(11, 30)
        m1, docs1 = synth.generate_dataset(lg, tmp_path / "a", 40, 10, 10, seed=11, n_docs=5)
        m2, docs2 = synth.generate_dataset(lg, tmp_path / "b", 40, 10, 10, seed=11, n_docs=5)
        assert docs1 == docs2
        train = {tuple(g) for _, g, _, _ in m1["train"]}
        val = {tuple(g) for _, g, _, _ in m1["val"]}
        test = {tuple(g) for _, g, _, _ in m1["test"]}
        assert not train & val and not train & test and not val & test
        assert len(val) == 10 and len(test) == 10
        for split in ("train", "val", "test"):
            a = (tmp_path / "a" / f"{split}.tsv").read_bytes()
            b = (tmp_path / "b" / f"{split}.tsv").read_bytes()
            assert a == b
        va = sorted((tmp_path / "a" / "videos").iterdir())
        vb = sorted((tmp_path / "b" / "videos").iterdir())
        assert [p.name for p in va] == [p.name for p in vb]
        for pa, pb in zip(va[:5], vb[:5]):
            assert pa.read_bytes() == pb.read_bytes()
