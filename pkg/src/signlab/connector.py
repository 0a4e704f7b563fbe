"""Visual language tuning: the connector from visual features into LM embedding
space, multimodal sequence assembly with response masking, the stage-3 loop
(connector only, everything else frozen), the later full-tuning phase, and
greedy translation."""

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from . import layers
from . import metrics
from . import training
from .autograd import Tensor
from .lm import DecoderLM, ar_loss, generate
from .seeding import child_rng
from .tokenizer import SEG_RESPONSE, TokenSequence, render_chat

MODES = ("mlp", "linear", "sentence")


@dataclass(frozen=True)
class ConnectorConfig:
    d_in: int
    d_lm: int
    mode: str = "mlp"
    d_hidden: int = 0  # 0 picks d_lm

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown connector mode {self.mode!r}")
        if self.d_in < 1 or self.d_lm < 1 or self.d_hidden < 0:
            raise ValueError("bad connector widths")

    @property
    def hidden(self) -> int:
        return self.d_hidden or self.d_lm


class Connector:
    """Rowwise map into the LM embedding space; never mixes time steps.

    mlp and sentence modes share the two-layer shape (they differ in what the
    pipeline feeds them: word rows vs one sentence embedding); linear drops
    the hidden layer.
    """

    def __init__(self, cfg: ConnectorConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        p = {}
        if cfg.mode == "linear":
            p["w"] = layers.param(rng, (cfg.d_lm, cfg.d_in), dtype)
            p["b"] = layers.zeros((cfg.d_lm,), dtype)
        else:
            p["w1"] = layers.param(rng, (cfg.hidden, cfg.d_in), dtype)
            p["b1"] = layers.zeros((cfg.hidden,), dtype)
            p["w2"] = layers.param(rng, (cfg.d_lm, cfg.hidden), dtype)
            p["b2"] = layers.zeros((cfg.d_lm,), dtype)
        self.params = p

    def connect(self, feats) -> Tensor:
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, self.dtype))
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_in:
            raise ValueError(f"expected (T', {self.cfg.d_in}) features, got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("no feature rows")
        p = self.params
        if self.cfg.mode == "linear":
            return layers.linear(x, p["w"], p["b"])
        h = ag.gelu(layers.linear(x, p["w1"], p["b1"]))
        return layers.linear(h, p["w2"], p["b2"])

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
            raise ckpt.CheckpointMismatch(f"connector parameter set mismatch near {off!r}")
        for n, p in self.params.items():
            arr = np.asarray(blobs[n], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ckpt.CheckpointMismatch(
                    f"shape mismatch for {n!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


@dataclass
class MultimodalSample:
    embs: Tensor          # (N, d_lm), video rows come from the connector
    ids: np.ndarray       # (N,) with placeholder ids in the video span
    targets: np.ndarray   # (N-1,) next-token ids
    mask: np.ndarray      # (N-1,) bool, true exactly where the target is response/EOS
    video_start: int
    n_video: int


def assemble(lm: DecoderLM, chat: TokenSequence, video_rows: Tensor) -> MultimodalSample:
    """Embed the chat through the LM table, splice connector rows over the
    (elastically resized) video placeholder block, derive shifted targets and
    the response mask."""
    if video_rows.ndim != 2 or video_rows.shape[0] < 1:
        raise ValueError("video_rows must be (T', d_lm) with T' >= 1)")
    if video_rows.shape[1] != lm.cfg.d_model:
        raise ValueError(f"connector width {video_rows.shape[1]} != LM width {lm.cfg.d_model}")
    s, e = chat.video_span()
    tp = video_rows.shape[0]
    ids = np.concatenate([chat.ids[:s], np.full(tp, chat.ids[s], dtype=np.int64), chat.ids[e:]])
    segs = list(chat.segments[:s]) + [chat.segments[s]] * tp + list(chat.segments[e:])
    emb = lm.params["tok_emb"]
    embs = ag.concat([ag.gather_rows(emb, ids[:s]), video_rows,
                      ag.gather_rows(emb, ids[s + tp:])], axis=0)
    n = ids.shape[0]
    targets = ids[1:]
    mask = np.zeros(n - 1, dtype=bool)
    for t in range(n - 1):
        mask[t] = segs[t + 1] == SEG_RESPONSE or (chat.has_response and t + 1 == n - 1)
    return MultimodalSample(embs, ids, targets, mask, s, tp)


def collate(samples, d_lm: int):
    """Pad with zero rows / false mask and stack into one batch."""
    n_max = max(s.embs.shape[0] for s in samples)
    embs, targets, mask = [], [], []
    for s in samples:
        n = s.embs.shape[0]
        e = s.embs
        if n < n_max:
            pad = Tensor(np.zeros((n_max - n, d_lm), dtype=e.dtype))
            e = ag.concat([e, pad], axis=0)
        embs.append(e)
        targets.append(np.concatenate([s.targets, np.zeros(n_max - n, dtype=np.int64)]))
        mask.append(np.concatenate([s.mask, np.zeros(n_max - n, dtype=bool)]))
    return ag.stack(embs), np.stack(targets), np.stack(mask)


def vlt_loss(lm: DecoderLM, batch, adapters=None) -> Tensor:
    """Response-masked next-token loss over one sample or a collated batch."""
    if isinstance(batch, MultimodalSample):
        logits = lm.forward_embeddings(batch.embs, adapters)
        return ar_loss(logits[:-1], batch.targets, batch.mask)
    embs, targets, mask = batch
    logits = lm.forward_embeddings(embs, adapters)
    return ar_loss(logits[:, :-1, :], targets, mask)


def translate(lm: DecoderLM, vocab, template, conn: Connector, feats,
              max_new: int = 24) -> str:
    """features -> connector -> promptless-response chat -> greedy decode."""
    rows = conn.connect(feats)
    chat = render_chat(vocab, template, n_video_tokens=rows.shape[0])
    sample = assemble(lm, chat, rows)
    with ag.no_grad():
        out = generate(lm, sample.embs, max_new, eos_id=vocab.eos_id)
    return vocab.decode(out)


@dataclass(frozen=True)
class Stage3Config:
    epochs: int = 10
    batch: int = 64
    max_lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 0      # 0 disables early stopping
    patience: int = 3
    eval_limit: int = 32     # validation sentences scored per evaluation
    max_new: int = 24
    checkpoint_every: int = 0


@dataclass(frozen=True)
class FulltuneConfig:
    epochs: int = 1
    batch: int = 16
    max_lr: float = 1e-5
    weight_decay: float = 0.0
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0


def _freeze(params: dict):
    for p in params.values():
        p.requires_grad = False


def _unfreeze(params: dict):
    for p in params.values():
        p.requires_grad = True


def _visual_features(venc, conn_mode: str, frames):
    with ag.no_grad():
        f = venc.frame_encode(frames)
        words = venc.word_encode(f)
        if conn_mode == "sentence":
            return venc.sentence_encode(words).data.reshape(1, -1)
        return words.data


def tune_connector(lm: DecoderLM, venc, conn: Connector, vocab, template,
                   train_samples, val_samples, cfg: Stage3Config, out_dir,
                   resume=False, stop_at=None):
    """Stage 3: LM and visual towers frozen, connector trained on response loss.

    train_samples/val_samples are (frames, text) pairs. Visual features are
    precomputed once (they cannot move while frozen). Early stopping tracks
    validation BLEU-4 and restores the best connector at the end.
    """
    n = len(train_samples)
    if n < 1:
        raise ValueError("no training samples")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _freeze(lm.params)
    _freeze(venc.params)
    feats = [_visual_features(venc, conn.cfg.mode, f) for f, _ in train_samples]
    texts = [t for _, t in train_samples]
    val_feats = [_visual_features(venc, conn.cfg.mode, f) for f, _ in val_samples]
    val_texts = [t for _, t in val_samples]

    batch = min(cfg.batch, n)
    steps_per_epoch = -(-n // batch)
    total_steps = cfg.epochs * steps_per_epoch
    cfg_hash = ckpt.config_hash({
        "stage3": asdict(cfg), "connector": asdict(conn.cfg), "lm": asdict(lm.cfg),
        "visual": asdict(venc.cfg), "template": asdict(template),
    })
    named = [("conn." + k, p) for k, p in conn.trainable()]
    opt = training.AdamW(named, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)

    state = {"best_bleu": -1.0, "stale": 0, "best": None}
    start_step = 0
    if resume:
        meta = ckpt.load_meta(out_dir)
        ckpt.require_meta(meta, "stage", "stage3", out_dir)
        ckpt.require_meta(meta, "config_hash", cfg_hash, out_dir)
        blobs = ckpt.load_tensors(out_dir)
        conn.load_state({k[len("conn."):]: v for k, v in blobs.items()
                         if k.startswith("conn.")})
        best = {k[len("best."):]: v for k, v in blobs.items() if k.startswith("best.")}
        if best:
            state["best"] = best
        state["best_bleu"] = float(meta.get("best_bleu", -1.0))
        state["stale"] = int(meta.get("stale", 0))
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

    def step_fn(step, lr):
        idx = batch_indices(step)
        parts = []
        for i in idx:
            rows = conn.connect(Tensor(feats[i]))
            chat = render_chat(vocab, template, n_video_tokens=rows.shape[0],
                               response=texts[i])
            parts.append(assemble(lm, chat, rows))
        loss = vlt_loss(lm, collate(parts, lm.cfg.d_model))
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        return loss.item()

    def val_bleu():
        lim = min(cfg.eval_limit, len(val_texts)) or len(val_texts)
        cands = [translate(lm, vocab, template, conn, val_feats[i], cfg.max_new)
                 for i in range(lim)]
        return metrics.bleu(cands, val_texts[:lim], 4, smooth=True)

    def stop_hook(next_step):
        if cfg.eval_every <= 0 or not val_texts:
            return False
        if next_step % cfg.eval_every != 0 and next_step != total_steps:
            return False
        score = val_bleu()
        if score > state["best_bleu"]:
            state["best_bleu"] = score
            state["stale"] = 0
            state["best"] = {k: v.copy() for k, v in conn.state_dict().items()}
        else:
            state["stale"] += 1
        return state["stale"] >= cfg.patience

    def save_state(step):
        blobs = {"conn." + k: v for k, v in conn.state_dict().items()}
        if state["best"] is not None:
            blobs.update({"best." + k: v for k, v in state["best"].items()})
        blobs.update(opt.state_arrays())
        ckpt.save_tensors(out_dir, blobs)
        ckpt.save_meta(out_dir, {
            "stage": "stage3", "step": step, "step_opt_t": opt.t,
            "config_hash": cfg_hash, "rng_state": f"seed:{cfg.seed}",
            "total_steps": total_steps, "best_bleu": state["best_bleu"],
            "stale": state["stale"],
        })

    final = training.run_stage(
        step_fn, total_steps, cfg.max_lr, cfg.warmup_frac, out_dir / "train.log",
        save_state=save_state, checkpoint_every=cfg.checkpoint_every,
        start_step=start_step, stop_at=stop_at, stop_hook=stop_hook)
    if stop_at is None and state["best"] is not None:
        conn.load_state(state["best"])
        save_state(total_steps)
    return total_steps, final


def full_tune(lm: DecoderLM, venc, conn: Connector, vocab, template,
              train_samples, cfg: FulltuneConfig, out_dir,
              resume=False, stop_at=None):
    """Unfreeze all three towers and tune end to end at a small rate."""
    n = len(train_samples)
    if n < 1:
        raise ValueError("no training samples")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _unfreeze(lm.params)
    _unfreeze(venc.params)
    _unfreeze(conn.params)
    batch = min(cfg.batch, n)
    steps_per_epoch = -(-n // batch)
    total_steps = cfg.epochs * steps_per_epoch
    cfg_hash = ckpt.config_hash({
        "fulltune": asdict(cfg), "connector": asdict(conn.cfg), "lm": asdict(lm.cfg),
        "visual": asdict(venc.cfg), "template": asdict(template),
    })
    named = [("lm." + k, p) for k, p in lm.trainable()]
    named += [("visual." + k, p) for k, p in venc.trainable()]
    named += [("conn." + k, p) for k, p in conn.trainable()]
    opt = training.AdamW(named, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)

    start_step = 0
    if resume:
        meta = ckpt.load_meta(out_dir)
        ckpt.require_meta(meta, "stage", "fulltune", out_dir)
        ckpt.require_meta(meta, "config_hash", cfg_hash, out_dir)
        blobs = ckpt.load_tensors(out_dir)
        lm.load_state({k[3:]: v for k, v in blobs.items() if k.startswith("lm.")})
        venc.load_state({k[7:]: v for k, v in blobs.items() if k.startswith("visual.")})
        conn.load_state({k[5:]: v for k, v in blobs.items() if k.startswith("conn.")})
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

    def step_fn(step, lr):
        idx = batch_indices(step)
        parts = []
        for i in idx:
            frames, text = train_samples[i]
            words = venc.word_encode(venc.frame_encode(frames))
            feats = words if conn.cfg.mode != "sentence" else \
                venc.sentence_encode(words).reshape(1, -1)
            rows = conn.connect(feats)
            chat = render_chat(vocab, template, n_video_tokens=rows.shape[0],
                               response=text)
            parts.append(assemble(lm, chat, rows))
        loss = vlt_loss(lm, collate(parts, lm.cfg.d_model))
        opt.zero_grad()
        loss.backward()
        opt.step(lr)
        return loss.item()

    def save_state(step):
        blobs = {"lm." + k: v for k, v in lm.state_dict().items()}
        blobs.update({"visual." + k: v for k, v in venc.state_dict().items()})
        blobs.update({"conn." + k: v for k, v in conn.state_dict().items()})
        blobs.update(opt.state_arrays())
        ckpt.save_tensors(out_dir, blobs)
        ckpt.save_meta(out_dir, {
            "stage": "fulltune", "step": step, "step_opt_t": opt.t,
            "config_hash": cfg_hash, "rng_state": f"seed:{cfg.seed}",
            "total_steps": total_steps,
        })

    final = training.run_stage(
        step_fn, total_steps, cfg.max_lr, cfg.warmup_frac, out_dir / "train.log",
        save_state=save_state, checkpoint_every=cfg.checkpoint_every,
        start_step=start_step, stop_at=stop_at)
    return total_steps, final
