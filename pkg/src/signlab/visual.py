"""Hierarchical visual encoder: rowwise frame map -> local-attention word
transformer with rotary positions -> nearest-neighbor downsample -> sentence
encoder with a learnable query token projected into the co-embedding space."""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from . import layers
from .autograd import Tensor


@dataclass(frozen=True)
class VisualConfig:
    d_raw: int = 32
    d_model: int = 64
    n_heads: int = 4
    window: int = 4
    step: int = 4
    local_depth: int = 4
    full_depth: int = 8
    d_co: int = 768
    max_words: int = 64

    def __post_init__(self):
        if self.window < 1 or self.step < 1:
            raise ValueError("window and step must be >= 1")
        # local_depth 0 switches the word transformer off (ablation axis)
        if self.local_depth < 0 or self.full_depth < 1:
            raise ValueError("bad encoder depth")


def local_attention_mask(T: int, w: int) -> np.ndarray:
    i = np.arange(T)
    return np.abs(i[:, None] - i[None, :]) <= w


def nn_downsample(seq, step: int):
    """Keep rows min(j*step, T-1) for j < ceil(T/step); works on Tensor or ndarray."""
    if step < 1:
        raise ValueError("step must be >= 1")
    T = seq.shape[0]
    n_out = -(-T // step)
    idx = np.minimum(np.arange(n_out) * step, T - 1)
    if isinstance(seq, Tensor):
        return ag.gather_rows(seq, idx)
    return seq[idx]


def rotary_apply(q, k, positions, base: float = 10000.0):
    """Rotate (H, T, d_head) query/key stacks at integer positions."""
    dh = q.shape[-1]
    dt = q.dtype if isinstance(q, Tensor) else np.asarray(q).dtype
    cos, sin = layers.rope_tables(len(positions), dh, dt, base=base, positions=positions)
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    return layers.rotary_apply(q, cos, sin), layers.rotary_apply(k, cos, sin)


class HierarchicalEncoder:
    def __init__(self, cfg: VisualConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        p = {}
        p["frame.w1"] = layers.param(rng, (cfg.d_model, cfg.d_raw), dtype)
        p["frame.b1"] = layers.zeros((cfg.d_model,), dtype)
        p["frame.w2"] = layers.param(rng, (cfg.d_model, cfg.d_model), dtype)
        p["frame.b2"] = layers.zeros((cfg.d_model,), dtype)
        for i in range(cfg.local_depth):
            layers.init_block(p, rng, f"local.{i}", cfg.d_model, 4 * cfg.d_model, dtype)
        p["sent.query"] = layers.param(rng, (1, cfg.d_model), dtype)
        p["sent.pos"] = layers.param(rng, (cfg.max_words + 1, cfg.d_model), dtype)
        for i in range(cfg.full_depth):
            layers.init_block(p, rng, f"sent.{i}", cfg.d_model, 4 * cfg.d_model, dtype)
        p["proj.w"] = layers.param(rng, (cfg.d_co, cfg.d_model), dtype)
        p["proj.b"] = layers.zeros((cfg.d_co,), dtype)
        self.params = p

    def frame_encode(self, frames) -> Tensor:
        """Rowwise two-layer map; no temporal mixing at this level."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, self.dtype))
        if x.ndim != 2 or x.shape[1] != self.cfg.d_raw:
            raise ValueError(f"expected (T, {self.cfg.d_raw}) frames, got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("empty video")
        p = self.params
        h = ag.gelu(layers.linear(x, p["frame.w1"], p["frame.b1"]))
        return layers.linear(h, p["frame.w2"], p["frame.b2"])

    def local_stack(self, frame_feats: Tensor) -> Tensor:
        """Pre-downsample word features: local_depth banded-attention blocks."""
        T = frame_feats.shape[0]
        cfg = self.cfg
        keep = local_attention_mask(T, cfg.window)
        rope = layers.rope_tables(T, cfg.d_model // cfg.n_heads, self.dtype)
        h = frame_feats
        for i in range(cfg.local_depth):
            h = layers.block(h, self.params, f"local.{i}", cfg.n_heads,
                             keep_mask=keep, rope=rope)
        return h

    def word_encode(self, frame_feats: Tensor) -> Tensor:
        return nn_downsample(self.local_stack(frame_feats), self.cfg.step)

    def sentence_encode(self, words: Tensor) -> Tensor:
        cfg = self.cfg
        n = words.shape[0]
        if n < 1:
            raise ValueError("sentence encoder needs at least one word row")
        if n + 1 > cfg.max_words + 1:
            raise ValueError(f"{n} word rows exceed max_words {cfg.max_words}")
        p = self.params
        x = ag.concat([p["sent.query"], words], axis=0) + p["sent.pos"][: n + 1]
        for i in range(cfg.full_depth):
            x = layers.block(x, p, f"sent.{i}", cfg.n_heads)
        v = layers.linear(x[0], p["proj.w"], p["proj.b"])
        return v / ag.rownorm(v, axis=-1, keepdims=True)

    def encode_video(self, frames):
        words = self.word_encode(self.frame_encode(frames))
        return words, self.sentence_encode(words)

    def named_params(self):
        return sorted(self.params.items())

    def trainable(self):
        return [(n, p) for n, p in self.named_params() if p.requires_grad]

    def state_dict(self):
        return {n: p.data for n, p in self.params.items()}

    def load_state(self, blobs):
        mine, theirs = set(self.params), set(blobs)
        if mine != theirs:
            off = sorted(mine.symmetric_difference(theirs))[0]
            raise ckpt.CheckpointMismatch(f"visual parameter set mismatch near {off!r}")
        for n, p in self.params.items():
            arr = np.asarray(blobs[n], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ckpt.CheckpointMismatch(
                    f"shape mismatch for {n!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
