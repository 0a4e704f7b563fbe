import numpy as np
import pytest

from signlab import visual
from signlab.autograd import Tensor
from signlab.checkpoint import CheckpointMismatch
from signlab.seeding import child_rng


def enc(seed=0, dtype=np.float32, **kw):
    base = dict(d_raw=6, d_model=16, n_heads=2, window=2, step=3,
                local_depth=2, full_depth=2, d_co=24, max_words=16)
    base.update(kw)
    return visual.HierarchicalEncoder(visual.VisualConfig(**base),
                                      child_rng(seed, "vtest"), dtype=dtype)


def frames(T, d=6, seed=0):
    return np.random.default_rng(seed).standard_normal((T, d)).astype(np.float32)


class TestMaskAndDownsample:
    def test_band_shape(self):
        m = visual.local_attention_mask(6, 2)
        want = np.abs(np.subtract.outer(np.arange(6), np.arange(6))) <= 2
        np.testing.assert_array_equal(m, want)
        assert m.all(axis=None) is not True
        np.testing.assert_array_equal(visual.local_attention_mask(3, 5),
                                      np.ones((3, 3), dtype=bool))

    @pytest.mark.parametrize("step", [1, 2, 4, 8])
    def test_downsample_law_all_lengths(self, step):
        for T in range(1, 101):
            x = np.arange(T, dtype=np.float64)[:, None]
            out = visual.nn_downsample(x, step)
            assert out.shape[0] == -(-T // step)  # ceil(T/step)
            want = np.minimum(np.arange(out.shape[0]) * step, T - 1)
            np.testing.assert_array_equal(out[:, 0], want)

    def test_downsample_tensor_matches_array(self):
        x = frames(11)
        a = visual.nn_downsample(x, 3)
        b = visual.nn_downsample(Tensor(x), 3).data
        np.testing.assert_array_equal(a, b)

    def test_step_one_is_identity(self):
        x = frames(9)
        np.testing.assert_array_equal(visual.nn_downsample(x, 1), x)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            visual.nn_downsample(frames(4), 0)


class TestRotary:
    def test_shift_invariance_of_scores(self):
        # attention scores depend only on relative offsets: rotating q/k at
        # positions p and p+s must give identical q k^T up to fp error
        rng = np.random.default_rng(3)
        H, T, dh = 2, 7, 8
        q = rng.standard_normal((H, T, dh))
        k = rng.standard_normal((H, T, dh))
        base_q, base_k = visual.rotary_apply(q, k, np.arange(T))
        s0 = np.einsum("htd,hsd->hts", base_q.data, base_k.data)
        for shift in (1, 5, 40):
            sq, sk = visual.rotary_apply(q, k, np.arange(T) + shift)
            s1 = np.einsum("htd,hsd->hts", sq.data, sk.data)
            np.testing.assert_allclose(s1, s0, atol=1e-6)

    def test_rotation_preserves_norms(self):
        rng = np.random.default_rng(4)
        q = rng.standard_normal((1, 5, 8))
        rq, _ = visual.rotary_apply(q, q, np.arange(5))
        np.testing.assert_allclose(np.linalg.norm(rq.data, axis=-1),
                                   np.linalg.norm(q, axis=-1), atol=1e-10)


class TestEncoder:
    def test_frame_encode_is_rowwise(self):
        e = enc()
        x = frames(10)
        full = e.frame_encode(x).data
        perm = np.random.default_rng(0).permutation(10)
        permuted = e.frame_encode(x[perm]).data
        np.testing.assert_array_equal(full[perm], permuted)

    def test_frame_encode_validation(self):
        e = enc()
        with pytest.raises(ValueError):
            e.frame_encode(np.zeros((4, 7), dtype=np.float32))
        with pytest.raises(ValueError):
            e.frame_encode(np.zeros((0, 6), dtype=np.float32))

    def test_receptive_field_is_exact(self):
        # with window w and depth L, frame t can see at most w*L steps away;
        # perturbing a frame farther than that leaves the output row bitwise equal
        e = enc(window=2, local_depth=2)
        T = 14
        x = frames(T, seed=5)
        base = e.local_stack(e.frame_encode(x)).data.copy()
        reach = e.cfg.window * e.cfg.local_depth  # 4
        x2 = x.copy()
        x2[0] += 10.0
        out = e.local_stack(e.frame_encode(x2)).data
        np.testing.assert_array_equal(base[reach + 1:], out[reach + 1:])
        assert not np.array_equal(base[reach], out[reach])

    def test_word_count_follows_downsample_law(self):
        e = enc()
        for T in (1, 2, 3, 6, 7, 12, 13):
            words, sent = e.encode_video(frames(T, seed=T))
            assert words.shape == (-(-T // e.cfg.step), e.cfg.d_model)
            assert sent.shape == (e.cfg.d_co,)

    def test_sentence_embedding_unit_norm(self):
        e = enc(seed=2)
        for T in (3, 8, 20):
            _, sent = e.encode_video(frames(T, seed=T))
            assert np.linalg.norm(sent.data) == pytest.approx(1.0, abs=1e-5)

    def test_local_depth_zero_is_passthrough(self):
        e = enc(local_depth=0)
        x = frames(9, seed=9)
        ff = e.frame_encode(x)
        np.testing.assert_array_equal(e.local_stack(ff).data, ff.data)
        words = e.word_encode(ff)
        np.testing.assert_array_equal(words.data, visual.nn_downsample(ff.data, 3))

    def test_too_many_words_rejected(self):
        e = enc(max_words=4)
        with pytest.raises(ValueError, match="max_words"):
            e.sentence_encode(Tensor(np.zeros((5, 16), dtype=np.float32)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            visual.VisualConfig(window=0)
        with pytest.raises(ValueError):
            visual.VisualConfig(step=0)
        with pytest.raises(ValueError):
            visual.VisualConfig(full_depth=0)
        with pytest.raises(ValueError):
            visual.VisualConfig(local_depth=-1)
        visual.VisualConfig(local_depth=0)  # allowed: disables the word stack

    def test_state_roundtrip_and_mismatch(self):
        a, b = enc(seed=1), enc(seed=2)
        b.load_state({k: v.copy() for k, v in a.state_dict().items()})
        x = frames(7, seed=1)
        np.testing.assert_array_equal(a.encode_video(x)[1].data,
                                      b.encode_video(x)[1].data)
        blobs = a.state_dict()
        blobs.pop("proj.w")
        with pytest.raises(CheckpointMismatch):
            enc().load_state(blobs)

    def test_determinism_same_seed(self):
        x = frames(10, seed=11)
        s1 = enc(seed=7).encode_video(x)[1].data
        s2 = enc(seed=7).encode_video(x)[1].data
        np.testing.assert_array_equal(s1, s2)
