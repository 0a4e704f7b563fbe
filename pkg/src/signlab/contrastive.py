"""Video-text contrastive pretraining.

Pairs a frozen-or-trained text tower with the hierarchical visual encoder,
optimizing symmetric InfoNCE over unit-norm sentence embeddings plus a
feature-distance regularizer on the word sequence (pull adjacent rows
together, push rows two apart beyond a margin).
"""

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from . import layers
from . import training
from .autograd import Tensor
from .seeding import child_rng
from .visual import HierarchicalEncoder


@dataclass(frozen=True)
class ContrastiveConfig:
    lam: float = 1e-2
    temperature_init: float = 0.07
    margin: float = 1.0
    push_offset: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.temperature_init <= 0:
            raise ValueError("temperature must be positive")
        if self.margin <= 0 or self.push_offset < 1:
            raise ValueError("bad margin/push_offset")


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    depth: int = 2
    d_co: int = 768
    max_len: int = 64
    causal_pooling: bool = False


class TextEncoder:
    """Small transformer producing one unit-norm sentence vector per id row.

    Default pooling is the mean over token positions with full attention;
    causal_pooling switches to a left-to-right mask and takes the last row.
    """

    def __init__(self, cfg: TextConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        p = {}
        p["emb"] = layers.param(rng, (cfg.vocab_size, cfg.d_model), dtype)
        p["pos"] = layers.param(rng, (cfg.max_len, cfg.d_model), dtype)
        for i in range(cfg.depth):
            layers.init_block(p, rng, f"txt.{i}", cfg.d_model, 4 * cfg.d_model, dtype)
        p["proj.w"] = layers.param(rng, (cfg.d_co, cfg.d_model), dtype)
        p["proj.b"] = layers.zeros((cfg.d_co,), dtype)
        self.params = p

    def encode(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        T = ids.shape[0]
        if ids.ndim != 1 or T < 1:
            raise ValueError("encode wants a non-empty 1-D id array")
        if T > self.cfg.max_len:
            raise ValueError(f"{T} tokens exceed max_len {self.cfg.max_len}")
        p = self.params
        x = ag.gather_rows(p["emb"], ids) + p["pos"][:T]
        keep = layers.causal_mask(T) if self.cfg.causal_pooling else None
        for i in range(self.cfg.depth):
            x = layers.block(x, p, f"txt.{i}", self.cfg.n_heads, keep_mask=keep)
        pooled = x[T - 1] if self.cfg.causal_pooling else ag.tmean(x, axis=0)
        v = layers.linear(pooled, p["proj.w"], p["proj.b"])
        return v / ag.rownorm(v, axis=-1, keepdims=True)

    def named_params(self):
        return sorted(self.params.items())

    def trainable(self):
        return [(n, p) for n, p in self.named_params() if p.requires_grad]

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False

    def state_dict(self):
        return {n: p.data for n, p in self.params.items()}

    def load_state(self, blobs):
        mine, theirs = set(self.params), set(blobs)
        if mine != theirs:
            off = sorted(mine.symmetric_difference(theirs))[0]
            raise ckpt.CheckpointMismatch(f"text parameter set mismatch near {off!r}")
        for n, p in self.params.items():
            arr = np.asarray(blobs[n], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ckpt.CheckpointMismatch(
                    f"shape mismatch for {n!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


def clip_loss(v: Tensor, t: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE at temperature tau over matched rows of v and t."""
    if v.shape != t.shape or v.ndim != 2:
        raise ValueError("clip_loss wants matching (B, d) embeddings")
    B = v.shape[0]
    for name, x in (("video", v), ("text", t)):
        norms = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=1))
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError(f"{name} embeddings are not unit-norm")
    logits = ag.matmul(v, t.transpose()) / tau
    labels = np.arange(B, dtype=np.int64)
    return (ag.cross_entropy(logits, labels) + ag.cross_entropy(logits.transpose(), labels)) * 0.5


def signcl_loss(words: Tensor, cfg: ContrastiveConfig, counters=None) -> Tensor:
    """Pull adjacent word rows together, push rows push_offset apart to margin.

    Sequences too short to contain a push pair contribute exact zero and are
    tallied in counters["signcl_skipped"] when a dict is supplied.
    """
    T = words.shape[0]
    d = cfg.push_offset
    if T < d + 1:
        if counters is not None:
            counters["signcl_skipped"] = counters.get("signcl_skipped", 0) + 1
        return Tensor(np.zeros((), dtype=words.dtype))
    pull = ag.tmean(ag.rownorm(words[1:] - words[:-1], axis=-1))
    gaps = ag.rownorm(words[d:] - words[:-d], axis=-1)
    push = ag.tmean(ag.relu(float(cfg.margin) - gaps))
    return pull + push


def total_cl_loss(v, t, word_seqs, tau, cfg: ContrastiveConfig, counters=None) -> Tensor:
    reg = [signcl_loss(w, cfg, counters) for w in word_seqs]
    return clip_loss(v, t, tau) + float(cfg.lam) * ag.tmean(ag.stack(reg))


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 200
    batch: int = 128
    max_lr: float = 2e-4
    weight_decay: float = 1e-5
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    freeze_text: bool = False
    checkpoint_every: int = 0


def pretrain_visual(enc: HierarchicalEncoder, tenc: TextEncoder, samples,
                    ccfg: ContrastiveConfig, cfg: Stage2Config, out_dir,
                    resume=False, stop_at=None):
    """Contrastive stage over (frames, text_ids) samples; returns (steps, loss)."""
    n = len(samples)
    if n < 2:
        raise ValueError("contrastive pretraining needs at least two samples")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    batch = min(cfg.batch, n)
    steps_per_epoch = -(-n // batch)
    total_steps = cfg.epochs * steps_per_epoch
    cfg_hash = ckpt.config_hash({
        "stage2": asdict(cfg), "contrastive": asdict(ccfg),
        "visual": asdict(enc.cfg), "text": asdict(tenc.cfg),
    })

    log_tau = Tensor(np.asarray(math.log(ccfg.temperature_init), dtype=enc.dtype),
                     requires_grad=True)
    if cfg.freeze_text:
        tenc.freeze()
    named = [("visual." + k, p) for k, p in enc.trainable()]
    named += [("text." + k, p) for k, p in tenc.trainable()]
    named.append(("log_tau", log_tau))
    opt = training.AdamW(named, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)

    start_step = 0
    if resume:
        meta = ckpt.load_meta(out_dir)
        ckpt.require_meta(meta, "stage", "stage2", out_dir)
        ckpt.require_meta(meta, "config_hash", cfg_hash, out_dir)
        blobs = ckpt.load_tensors(out_dir)
        enc.load_state({k[len("visual."):]: v for k, v in blobs.items()
                        if k.startswith("visual.")})
        tenc.load_state({k[len("text."):]: v for k, v in blobs.items()
                         if k.startswith("text.")})
        log_tau.data = np.asarray(blobs["log_tau"], dtype=enc.dtype).reshape(())
        opt.load_state_arrays({k: v for k, v in blobs.items() if k.startswith("opt.")},
                              int(meta["step_opt_t"]))
        start_step = int(meta["step"])

    order_cache = {}

    def batch_indices(step):
        epoch, b = divmod(step, steps_per_epoch)
        if epoch not in order_cache:
            order_cache.clear()
            order_cache[epoch] = child_rng(cfg.seed, "order", epoch).permutation(n)
        return order_cache[epoch][b * batch:(b + 1) * batch]

    counters = {}

    def step_fn(step, lr):
        idx = batch_indices(step)
        vs, ts, word_seqs = [], [], []
        for i in idx:
            frames, ids = samples[i]
            words = enc.word_encode(enc.frame_encode(frames))
            word_seqs.append(words)
            vs.append(enc.sentence_encode(words))
            ts.append(tenc.encode(ids))
        tau = ag.texp(log_tau)
        loss = total_cl_loss(ag.stack(vs), ag.stack(ts), word_seqs, tau, ccfg, counters)
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        return loss.item()

    def save_state(step):
        blobs = {"visual." + k: v for k, v in enc.state_dict().items()}
        blobs.update({"text." + k: v for k, v in tenc.state_dict().items()})
        blobs["log_tau"] = log_tau.data.reshape(1)
        blobs.update(opt.state_arrays())
        ckpt.save_tensors(out_dir, blobs)
        ckpt.save_meta(out_dir, {
            "stage": "stage2", "step": step, "step_opt_t": opt.t,
            "config_hash": cfg_hash, "rng_state": f"seed:{cfg.seed}",
            "total_steps": total_steps,
        })

    final = training.run_stage(
        step_fn, total_steps, cfg.max_lr, cfg.warmup_frac,
        out_dir / "train.log", save_state=save_state,
        checkpoint_every=cfg.checkpoint_every, start_step=start_step,
        stop_at=stop_at)
    return total_steps, final
