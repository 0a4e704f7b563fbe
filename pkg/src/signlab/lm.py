"""Decoder-only language model: causal attention, autoregressive loss, LoRA
hooks, continued pretraining over a pair/document mixture, greedy generation.

forward accepts token ids or pre-built embedding rows; the embedding path is
how connector outputs enter the stream.
"""

import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from . import layers
from . import lora as lora_mod
from . import training
from .autograd import Tensor
from .seeding import child_rng
from .tokenizer import SEP_TOKEN


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4*d_model
    max_len: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff else 4 * self.d_model


class DecoderLM:
    def __init__(self, cfg: LmConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        p = {}
        p["tok_emb"] = layers.param(rng, (cfg.vocab_size, cfg.d_model), dtype)
        p["pos_emb"] = layers.param(rng, (cfg.max_len, cfg.d_model), dtype)
        for i in range(cfg.n_layers):
            layers.init_block(p, rng, f"layers.{i}", cfg.d_model, cfg.ff_width, dtype)
        p["final_ln.g"] = layers.ones((cfg.d_model,), dtype)
        p["final_ln.b"] = layers.zeros((cfg.d_model,), dtype)
        p["head"] = layers.param(rng, (cfg.d_model, cfg.vocab_size), dtype)
        self.params = p

    def embed_ids(self, ids) -> Tensor:
        """Token-table rows without positions (positions are added in forward)."""
        return ag.gather_rows(self.params["tok_emb"], np.asarray(ids, dtype=np.int64))

    def forward_embeddings(self, x, adapters=None) -> Tensor:
        if isinstance(x, np.ndarray):
            x = Tensor(x)
        T = x.shape[-2]
        if T < 1:
            raise ValueError("empty input sequence")
        if x.shape[-1] != self.cfg.d_model:
            raise ValueError(f"embedding width {x.shape[-1]} != d_model {self.cfg.d_model}")
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        table = adapters.forward_table() if adapters is not None else None
        p = self.params
        h = x + p["pos_emb"][:T]
        keep = layers.causal_mask(T)
        for i in range(self.cfg.n_layers):
            h = layers.block(h, p, f"layers.{i}", self.cfg.n_heads, keep_mask=keep,
                             adapters=table)
        h = ag.layernorm(h, p["final_ln.g"], p["final_ln.b"])
        return h @ p["head"]

    def forward_ids(self, ids, adapters=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] < 1:
            raise ValueError("empty input sequence")
        return self.forward_embeddings(self.embed_ids(ids), adapters)

    def named_params(self):
        return sorted(self.params.items())

    def trainable(self):
        return [(n, p) for n, p in self.named_params() if p.requires_grad]

    def state_dict(self):
        return {n: p.data for n, p in self.params.items()}

    def load_state(self, blobs):
        mine = set(self.params)
        theirs = set(blobs)
        if mine != theirs:
            missing = sorted(mine - theirs) + sorted(theirs - mine)
            raise ckpt.CheckpointMismatch(f"parameter set mismatch near {missing[0]!r}")
        for n, p in self.params.items():
            arr = np.asarray(blobs[n], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ckpt.CheckpointMismatch(
                    f"shape mismatch for {n!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


def ar_loss(logits, targets, loss_mask):
    """Mean cross entropy over masked positions; errors if the mask is empty."""
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.asarray(loss_mask, dtype=bool).reshape(-1)
    if flat.shape[0] != t.shape[0] or t.shape[0] != m.shape[0]:
        raise ValueError("logits/targets/mask length mismatch")
    return ag.cross_entropy(flat, t, m)


def shifted_ar_loss(logits, ids, lengths):
    """Next-token loss for padded id batches; position t predicts ids[:, t+1]."""
    ids = np.asarray(ids, dtype=np.int64)
    B, T = ids.shape
    targets = ids[:, 1:]
    mask = np.arange(T - 1)[None, :] < (np.asarray(lengths)[:, None] - 1)
    return ar_loss(logits[:, : T - 1, :], targets, mask)


# --- pretraining corpus assembly ----------------------------------------------

def serialize_pair(vocab, gloss, text, swapped: bool) -> np.ndarray:
    first, second = (text, gloss) if swapped else (gloss, text)
    ids = [vocab.bos_id]
    ids.extend(int(vocab.id_of(t)) for t in first)
    ids.append(vocab.id_of(SEP_TOKEN))
    ids.extend(int(vocab.id_of(t)) for t in second)
    ids.append(vocab.eos_id)
    return np.array(ids, dtype=np.int64)


def chunk_document(ids, k: int):
    """Stride-k sliding window: ceil(len/k) chunks, the last one ragged."""
    ids = np.asarray(ids, dtype=np.int64)
    return [ids[i: i + k] for i in range(0, len(ids), k)]


@dataclass(frozen=True)
class PretrainConfig:
    context_k: int = 256
    epochs: int = 1
    batch: int = 64
    p_perm: float = 0.5
    max_lr: float = 2e-4
    weight_decay: float = 0.0
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    pair_doc_ratio: float = 2.0  # pair:document token ratio in the mixture
    lora: bool = False
    lora_rank: int = 8
    lora_alpha: float = 16.0
    keep_lora: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.context_k < 2:
            raise ValueError("context window k must be >= 2")
        if not 0.0 <= self.p_perm <= 1.0:
            raise ValueError("p_perm must lie in [0, 1]")


def build_pretrain_units(vocab, pairs, documents, cfg: PretrainConfig):
    """Mixture of pair markers and document chunks, pair:doc ~ cfg.pair_doc_ratio
    by token count (documents are cycled or truncated to hit the target)."""
    units = [("pair", i) for i in range(len(pairs))]
    pair_tokens = sum(len(g) + len(t) + 3 for g, t in pairs)
    chunks = []
    for doc in documents:
        ids = vocab.encode(doc)
        chunks.extend(c for c in chunk_document(ids, cfg.context_k) if len(c) >= 2)
    if chunks and cfg.pair_doc_ratio > 0:
        target = pair_tokens / cfg.pair_doc_ratio
        got, j = 0, 0
        while got < target:
            c = chunks[j % len(chunks)]
            units.append(("doc", c))
            got += len(c)
            j += 1
    elif chunks:
        units.extend(("doc", c) for c in chunks)
    return units


def _pair_ids(vocab, pairs, unit_index, cfg, epoch):
    gloss, text = pairs[unit_index]
    swapped = bool(child_rng(cfg.seed, "swap", epoch, unit_index).random() < cfg.p_perm)
    return serialize_pair(vocab, gloss, text, swapped)


def _padded_batch(vocab, seqs):
    B = len(seqs)
    T = max(len(s) for s in seqs)
    ids = np.full((B, T), vocab.pad_id, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        lengths[r] = len(s)
    return ids, lengths


def continued_pretrain(lm: DecoderLM, vocab, pairs, documents, cfg: PretrainConfig,
                       out_dir, resume: bool = False, stop_at=None):
    """Stage-1 training loop. Returns (total_steps, final loss)."""
    if not pairs and not documents:
        raise ValueError("empty pretraining corpus")
    os.makedirs(out_dir, exist_ok=True)
    units = build_pretrain_units(vocab, pairs, documents, cfg)
    spe = math.ceil(len(units) / cfg.batch)
    total_steps = cfg.epochs * spe
    cfg_hash = ckpt.config_hash({"pretrain": asdict(cfg), "lm": asdict(lm.cfg)})

    adapters = None
    if cfg.lora:
        lcfg = lora_mod.LoraConfig(rank=cfg.lora_rank, alpha=cfg.lora_alpha)
        adapters = lora_mod.attach_lora(lm.params, lcfg, child_rng(cfg.seed, "lora"),
                                        dtype=lm.dtype)
        named = adapters.named_parameters()
    else:
        named = lm.trainable()
    opt = training.AdamW(named, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)

    start_step = 0
    if resume:
        meta = ckpt.load_meta(out_dir)
        ckpt.require_meta(meta, "stage", "stage1", out_dir)
        ckpt.require_meta(meta, "config_hash", cfg_hash, out_dir)
        blobs = ckpt.load_tensors(out_dir)
        lm.load_state({n: blobs[n] for n in lm.params if n in blobs})
        if adapters is not None:
            for name, (A, B) in adapters.pairs.items():
                A.data = np.asarray(blobs[f"lora.{name}.A"], dtype=lm.dtype)
                B.data = np.asarray(blobs[f"lora.{name}.B"], dtype=lm.dtype)
        opt.load_state_arrays(blobs, int(meta["step_opt_t"]))
        start_step = int(meta["step"])

    order_cache = {}

    def batch_units(step):
        epoch = step // spe
        if epoch not in order_cache:
            order_cache.clear()
            order_cache[epoch] = child_rng(cfg.seed, "order", epoch).permutation(len(units))
        order = order_cache[epoch]
        pos = step % spe
        chosen = order[pos * cfg.batch: (pos + 1) * cfg.batch]
        seqs = []
        for u in chosen:
            kind, payload = units[u]
            if kind == "pair":
                seqs.append(_pair_ids(vocab, pairs, payload, cfg, epoch))
            else:
                seqs.append(payload)
        return seqs

    def step_fn(step, lr):
        seqs = batch_units(step)
        ids, lengths = _padded_batch(vocab, seqs)
        opt.zero_grad()
        logits = lm.forward_ids(ids, adapters)
        loss = shifted_ar_loss(logits, ids, lengths)
        loss.backward()
        opt.step(lr)
        return loss.item()

    def save_state(next_step):
        blobs = dict(lm.state_dict())
        if adapters is not None:
            for name, (A, B) in adapters.pairs.items():
                blobs[f"lora.{name}.A"] = A.data
                blobs[f"lora.{name}.B"] = B.data
        blobs.update(opt.state_arrays())
        ckpt.save_tensors(out_dir, blobs)
        ckpt.save_meta(out_dir, {
            "stage": "stage1", "step": next_step, "step_opt_t": opt.t,
            "config_hash": cfg_hash, "rng_state": f"seed:{cfg.seed}",
            "total_steps": total_steps,
        })

    final = training.run_stage(step_fn, total_steps, cfg.max_lr, cfg.warmup_frac,
                               os.path.join(out_dir, "train.log"),
                               save_state=save_state,
                               checkpoint_every=cfg.checkpoint_every,
                               start_step=start_step, stop_at=stop_at)

    if stop_at is not None and stop_at < total_steps:
        return total_steps, final

    if adapters is not None and not cfg.keep_lora:
        lora_mod.merge_lora(lm.params, adapters)
        adapters = None
        ckpt.save_tensors(out_dir, dict(lm.state_dict()) | opt.state_arrays())
        ckpt.save_meta(out_dir, {
            "stage": "stage1", "step": total_steps, "step_opt_t": opt.t,
            "config_hash": cfg_hash, "rng_state": f"seed:{cfg.seed}",
            "total_steps": total_steps, "lora_merged": "true",
        })
    return total_steps, final


def generate(lm: DecoderLM, prompt, max_new: int, eos_id=None, adapters=None):
    """Greedy decoding from an id array or an embedding-row Tensor; returns the
    freshly generated ids, EOS excluded."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    out = []
    with ag.no_grad():
        if isinstance(prompt, Tensor) or (isinstance(prompt, np.ndarray)
                                          and prompt.ndim == 2):
            x = prompt if isinstance(prompt, Tensor) else Tensor(prompt)
            for _ in range(max_new):
                if x.shape[0] >= lm.cfg.max_len:
                    break
                logits = lm.forward_embeddings(x, adapters)
                nxt = int(np.argmax(logits.data[-1]))
                if eos_id is not None and nxt == eos_id:
                    break
                out.append(nxt)
                row = lm.embed_ids(np.array([nxt], dtype=np.int64))
                x = ag.concat([x, row], axis=0)
        else:
            ids = list(np.asarray(prompt, dtype=np.int64).reshape(-1))
            for _ in range(max_new):
                if len(ids) >= lm.cfg.max_len:
                    break
                logits = lm.forward_ids(np.array(ids, dtype=np.int64), adapters)
                nxt = int(np.argmax(logits.data[-1]))
                if eos_id is not None and nxt == eos_id:
                    break
                out.append(nxt)
                ids.append(nxt)
    return out
