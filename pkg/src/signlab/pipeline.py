"""Work-directory orchestration: data generation, the three training stages,
full tuning, evaluation, translation, and ablation sweeps.

Layout under a workdir:
  data/        manifests, videos/, docs.txt, vocab.tsv
  template.ini chat template used for tuning and inference
  stage1/ stage2/ stage3/ fulltune/   per-stage checkpoints + train.log
  report-<split>.txt                  evaluation output
  ab/          ablation runs, stage dirs keyed by config hash for reuse
"""

import dataclasses
import os
import statistics
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import connector as con
from . import contrastive as cl
from . import lm as lmmod
from . import metrics, synth, tokenizer
from .config import Settings
from .seeding import child_rng
from .visual import HierarchicalEncoder


def data_dir(wd) -> Path:
    return Path(wd) / "data"


def _lm_config(st: Settings, vocab_size: int) -> lmmod.LmConfig:
    s = st.lm
    return lmmod.LmConfig(vocab_size=vocab_size, d_model=s.d_model,
                          n_layers=s.n_layers, n_heads=s.n_heads,
                          d_ff=s.d_ff, max_len=s.max_len)


def _text_config(st: Settings, vocab_size: int) -> cl.TextConfig:
    s = st.text
    return cl.TextConfig(vocab_size=vocab_size, d_model=s.d_model,
                         n_heads=s.n_heads, depth=s.depth, d_co=s.d_co,
                         max_len=s.max_len, causal_pooling=s.causal_pooling)


def _visual_config(st: Settings):
    return replace(st.visual, d_raw=st.data.d_raw)


def _conn_config(st: Settings) -> con.ConnectorConfig:
    mode = st.connector.mode
    d_in = st.visual.d_co if mode == "sentence" else st.visual.d_model
    return con.ConnectorConfig(d_in=d_in, d_lm=st.lm.d_model, mode=mode,
                               d_hidden=st.connector.d_hidden)


def build_language(st: Settings) -> synth.SyntheticLanguage:
    return synth.build_language(st.data.seed, st.data.vocab_size,
                                st.data.d_raw, st.data.noise)


def generate_data(st: Settings, wd) -> None:
    """Deterministic dataset + vocab + template under wd; reruns are byte-identical."""
    wd = Path(wd)
    dd = data_dir(wd)
    os.makedirs(dd, exist_ok=True)
    lang = build_language(st)
    manifests, documents = synth.generate_dataset(
        lang, dd, st.data.train, st.data.val, st.data.test,
        seed=st.data.seed, n_docs=st.data.documents,
        doc_sentences=st.data.doc_sentences)
    streams = list(documents)
    for rows in manifests.values():
        for _, gloss, text, _ in rows:
            streams.append(list(gloss) + [tokenizer.SEP_TOKEN] + list(text))
    # prompts must be in-vocab even when a template ablation blanks them later
    streams.append(list(tokenizer.ChatTemplate().token_stream()))
    streams.append(list(st.template.token_stream()))
    vocab = tokenizer.build_vocab(streams)
    vocab.save(dd / "vocab.tsv")
    tokenizer.save_template(wd / "template.ini", st.template)


def load_vocab(wd) -> tokenizer.Vocab:
    path = data_dir(wd) / "vocab.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no vocabulary at {path}; run gen-data first")
    return tokenizer.Vocab.load(path)


def _records(wd, split: str):
    path = data_dir(wd) / f"{split}.tsv"
    if not path.exists():
        raise FileNotFoundError(f"no {split} manifest at {path}; run gen-data first")
    return synth.load_manifest(path)


def _documents(wd):
    docs = []
    with open(data_dir(wd) / "docs.txt", encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                docs.append(toks)
    return docs


def _take_fraction(rows, fraction: float):
    if fraction >= 1.0:
        return rows
    n = max(1, int(len(rows) * fraction))
    return rows[:n]


def stage_complete(out_dir) -> bool:
    try:
        meta = ckpt.load_meta(out_dir)
    except (FileNotFoundError, ckpt.CheckpointMismatch):
        return False
    return int(meta["step"]) >= int(meta["total_steps"])


def _require_stage(out_dir, stage: str):
    if not Path(out_dir, "meta.txt").exists():
        raise ckpt.CheckpointMismatch(
            f"missing {stage} checkpoint at {out_dir}; train it first "
            "or pass --allow-random-init")
    if not stage_complete(out_dir):
        raise ckpt.CheckpointMismatch(f"{stage} checkpoint at {out_dir} is incomplete")


def _model_blobs(out_dir, *skip_prefixes):
    blobs = ckpt.load_tensors(out_dir)
    skip = ("opt.",) + skip_prefixes
    return {k: v for k, v in blobs.items() if not k.startswith(skip)}


# --- stage runners ------------------------------------------------------------

def run_stage1(st: Settings, wd, out=None, resume=False, stop_at=None):
    wd = Path(wd)
    out = Path(out) if out else wd / "stage1"
    os.makedirs(out, exist_ok=True)
    vocab = load_vocab(wd)
    pairs = [(r.gloss, r.text) for r in _records(wd, "train")]
    docs = _documents(wd)
    lm = lmmod.DecoderLM(_lm_config(st, vocab.size),
                         child_rng(st.stage1.seed, "lm-init"))
    return lmmod.continued_pretrain(lm, vocab, pairs, docs, st.stage1, out,
                                    resume=resume, stop_at=stop_at)


def _fresh_lm(st, vocab):
    return lmmod.DecoderLM(_lm_config(st, vocab.size),
                           child_rng(st.stage1.seed, "lm-init"))


def _load_lm(st, vocab, stage1_dir):
    _require_stage(stage1_dir, "stage1")
    lm = _fresh_lm(st, vocab)
    lm.load_state(_model_blobs(stage1_dir, "lora."))
    return lm


def _fresh_towers(st, vocab):
    venc = HierarchicalEncoder(_visual_config(st),
                               child_rng(st.stage2.seed, "visual-init"))
    tenc = cl.TextEncoder(_text_config(st, vocab.size),
                          child_rng(st.stage2.seed, "text-init"))
    return venc, tenc


def _load_towers(st, vocab, stage2_dir):
    _require_stage(stage2_dir, "stage2")
    venc, tenc = _fresh_towers(st, vocab)
    blobs = _model_blobs(stage2_dir)
    venc.load_state({k[7:]: v for k, v in blobs.items() if k.startswith("visual.")})
    tenc.load_state({k[5:]: v for k, v in blobs.items() if k.startswith("text.")})
    return venc, tenc


def _contrastive_samples(wd, vocab, fraction=1.0):
    rows = _take_fraction(_records(wd, "train"), fraction)
    return [(synth.read_sltf(r.video), vocab.encode(r.text)) for r in rows]


def run_stage2(st: Settings, wd, out=None, resume=False, stop_at=None,
               data_fraction=1.0):
    wd = Path(wd)
    out = Path(out) if out else wd / "stage2"
    os.makedirs(out, exist_ok=True)
    vocab = load_vocab(wd)
    samples = _contrastive_samples(wd, vocab, data_fraction)
    venc, tenc = _fresh_towers(st, vocab)
    return cl.pretrain_visual(venc, tenc, samples, st.contrastive, st.stage2,
                              out, resume=resume, stop_at=stop_at)


def _pair_samples(rows):
    return [(synth.read_sltf(r.video), " ".join(r.text)) for r in rows]


def run_stage3(st: Settings, wd, out=None, stage1_dir=None, stage2_dir=None,
               allow_random_init=False, data_fraction=1.0, resume=False,
               stop_at=None):
    wd = Path(wd)
    out = Path(out) if out else wd / "stage3"
    stage1_dir = Path(stage1_dir) if stage1_dir else wd / "stage1"
    stage2_dir = Path(stage2_dir) if stage2_dir else wd / "stage2"
    os.makedirs(out, exist_ok=True)
    vocab = load_vocab(wd)
    if allow_random_init and not Path(stage1_dir, "meta.txt").exists():
        lm = _fresh_lm(st, vocab)
    else:
        lm = _load_lm(st, vocab, stage1_dir)
    if allow_random_init and not Path(stage2_dir, "meta.txt").exists():
        venc, _ = _fresh_towers(st, vocab)
    else:
        venc, _ = _load_towers(st, vocab, stage2_dir)
    conn = con.Connector(_conn_config(st), child_rng(st.stage3.seed, "conn-init"))
    train = _pair_samples(_take_fraction(_records(wd, "train"), data_fraction))
    val = _pair_samples(_records(wd, "val"))
    return con.tune_connector(lm, venc, conn, vocab, st.template, train, val,
                              st.stage3, out, resume=resume, stop_at=stop_at)


def run_fulltune(st: Settings, wd, out=None, stage1_dir=None, stage2_dir=None,
                 stage3_dir=None, allow_random_init=False, data_fraction=1.0,
                 resume=False, stop_at=None):
    wd = Path(wd)
    out = Path(out) if out else wd / "fulltune"
    stage1_dir = Path(stage1_dir) if stage1_dir else wd / "stage1"
    stage2_dir = Path(stage2_dir) if stage2_dir else wd / "stage2"
    stage3_dir = Path(stage3_dir) if stage3_dir else wd / "stage3"
    os.makedirs(out, exist_ok=True)
    vocab = load_vocab(wd)
    if allow_random_init and not Path(stage1_dir, "meta.txt").exists():
        lm = _fresh_lm(st, vocab)
    else:
        lm = _load_lm(st, vocab, stage1_dir)
    venc, _ = _load_towers(st, vocab, stage2_dir)
    _require_stage(stage3_dir, "stage3")
    conn = con.Connector(_conn_config(st), child_rng(st.stage3.seed, "conn-init"))
    blobs = _model_blobs(stage3_dir, "best.")
    conn.load_state({k[5:]: v for k, v in blobs.items() if k.startswith("conn.")})
    train = _pair_samples(_take_fraction(_records(wd, "train"), data_fraction))
    return con.full_tune(lm, venc, conn, vocab, st.template, train,
                         st.fulltune, out, resume=resume, stop_at=stop_at)


# --- bundle loading and inference ----------------------------------------------

def load_bundle(st: Settings, wd, allow_random_init=False, stage1_dir=None,
                stage2_dir=None, stage3_dir=None, fulltune_dir=None):
    """Assemble (lm, venc, conn, vocab, template) from the newest complete phase:
    full-tuned weights when present, otherwise the per-stage checkpoints."""
    wd = Path(wd)
    vocab = load_vocab(wd)
    ft = Path(fulltune_dir) if fulltune_dir else wd / "fulltune"
    if Path(ft, "meta.txt").exists():
        _require_stage(ft, "fulltune")
        lm = _fresh_lm(st, vocab)
        venc, _ = _fresh_towers(st, vocab)
        conn = con.Connector(_conn_config(st), child_rng(st.stage3.seed, "conn-init"))
        blobs = _model_blobs(ft)
        lm.load_state({k[3:]: v for k, v in blobs.items() if k.startswith("lm.")})
        venc.load_state({k[7:]: v for k, v in blobs.items() if k.startswith("visual.")})
        conn.load_state({k[5:]: v for k, v in blobs.items() if k.startswith("conn.")})
        return lm, venc, conn, vocab, st.template
    s1 = Path(stage1_dir) if stage1_dir else wd / "stage1"
    s2 = Path(stage2_dir) if stage2_dir else wd / "stage2"
    s3 = Path(stage3_dir) if stage3_dir else wd / "stage3"
    if allow_random_init and not Path(s1, "meta.txt").exists():
        lm = _fresh_lm(st, vocab)
    else:
        lm = _load_lm(st, vocab, s1)
    if allow_random_init and not Path(s2, "meta.txt").exists():
        venc, _ = _fresh_towers(st, vocab)
    else:
        venc, _ = _load_towers(st, vocab, s2)
    conn = con.Connector(_conn_config(st), child_rng(st.stage3.seed, "conn-init"))
    if allow_random_init and not Path(s3, "meta.txt").exists():
        pass
    else:
        _require_stage(s3, "stage3")
        blobs = _model_blobs(s3, "best.")
        conn.load_state({k[5:]: v for k, v in blobs.items() if k.startswith("conn.")})
    return lm, venc, conn, vocab, st.template


def translate_components(lm, venc, conn, vocab, template, frames, max_new=24) -> str:
    feats = con._visual_features(venc, conn.cfg.mode, frames)
    return con.translate(lm, vocab, template, conn, feats, max_new)


def evaluate_components(lm, venc, conn, vocab, template, records, max_new=24):
    cands, refs = [], []
    for r in records:
        frames = synth.read_sltf(r.video)
        cands.append(translate_components(lm, venc, conn, vocab, template,
                                          frames, max_new))
        refs.append(" ".join(r.text))
    return metrics.compute_report(cands, refs), cands, refs


def evaluate_bundle(st: Settings, wd, split="test", bundle=None,
                    allow_random_init=False, out_path=None):
    """Translate a split and write report-<split>.txt; the literal bundle name
    "echo-stub" scores references against themselves (metric plumbing check)."""
    wd = Path(wd)
    records = _records(wd, split)
    if bundle == "echo-stub":
        refs = [" ".join(r.text) for r in records]
        report = metrics.compute_report(refs, refs)
    else:
        lm, venc, conn, vocab, template = load_bundle(
            st, wd, allow_random_init=allow_random_init)
        report, _, _ = evaluate_components(lm, venc, conn, vocab, template,
                                           records, st.stage3.max_new)
    out_path = Path(out_path) if out_path else wd / f"report-{split}.txt"
    metrics.write_report(out_path, report)
    return report


def translate_file(st: Settings, wd, video_path, allow_random_init=False) -> str:
    lm, venc, conn, vocab, template = load_bundle(
        st, wd, allow_random_init=allow_random_init)
    frames = synth.read_sltf(video_path)
    return translate_components(lm, venc, conn, vocab, template, frames,
                                st.stage3.max_new)


# --- ablation sweeps ------------------------------------------------------------

def _with_seeds(st: Settings, seed: int) -> Settings:
    return Settings(
        data=st.data, lm=st.lm, visual=st.visual, text=st.text,
        contrastive=st.contrastive, connector=st.connector,
        stage1=replace(st.stage1, seed=seed),
        stage2=replace(st.stage2, seed=seed),
        stage3=replace(st.stage3, seed=seed),
        fulltune=replace(st.fulltune, seed=seed),
        template=st.template,
    )


def _stage_dir(root: Path, name: str, *cfg_parts) -> Path:
    h = ckpt.config_hash([dataclasses.asdict(p) if dataclasses.is_dataclass(p)
                          else p for p in cfg_parts])
    return root / f"{name}-{h}"


def _chain(st: Settings, wd, root: Path, skip_stage1=False, data_fraction=1.0,
           fulltune=True):
    """Train one full settings bundle, reusing any stage directory whose config
    hash already exists (shared between ablation variants)."""
    d1 = _stage_dir(root, "stage1", st.stage1, st.lm, st.data)
    if skip_stage1:
        d1 = None
    elif not stage_complete(d1):
        run_stage1(st, wd, out=d1)
    vcfg = _visual_config(st)
    d2 = _stage_dir(root, "stage2", st.stage2, st.contrastive, vcfg, st.text, st.data)
    if not stage_complete(d2):
        run_stage2(st, wd, out=d2)
    d3 = _stage_dir(root, "stage3", st.stage3, _conn_config(st), st.lm, vcfg,
                    st.template, st.data, "no-cpt" if skip_stage1 else "cpt",
                    data_fraction)
    if not stage_complete(d3):
        run_stage3(st, wd, out=d3, stage1_dir=d1 or root / "absent",
                   stage2_dir=d2, allow_random_init=skip_stage1,
                   data_fraction=data_fraction)
    if not fulltune:
        return d1, d2, d3, None
    # d3's name hashes every upstream choice, so it keys the tuned weights too
    d4 = _stage_dir(root, "fulltune", st.fulltune, d3.name)
    if not stage_complete(d4):
        run_fulltune(st, wd, out=d4, stage1_dir=d1 or root / "absent",
                     stage2_dir=d2, stage3_dir=d3, allow_random_init=skip_stage1,
                     data_fraction=data_fraction)
    return d1, d2, d3, d4


def _chain_bleu4(st: Settings, wd, dirs, split="test") -> float:
    d1, d2, d3, d4 = dirs
    absent = Path(wd) / "absent"
    lm, venc, conn, vocab, template = load_bundle(
        st, wd, allow_random_init=d1 is None,
        stage1_dir=d1 or absent, stage2_dir=d2, stage3_dir=d3,
        fulltune_dir=d4 or absent)
    report, _, _ = evaluate_components(lm, venc, conn, vocab, template,
                                       _records(wd, split), st.stage3.max_new)
    return report.bleu4


def run_ablation(st: Settings, wd, name: str, seeds=(0, 1, 2), split="test"):
    """Baseline-vs-variant comparison, median over seeds. Stage directories are
    shared between arms whenever their configs agree; both arms get the same
    full-tune treatment (the no-fulltune axis removes it from the variant)."""
    from .config import apply_ablation
    wd = Path(wd)
    root = wd / "ab"
    os.makedirs(root, exist_ok=True)
    base_scores, var_scores = [], []
    for seed in seeds:
        base = _with_seeds(st, seed)
        var = apply_ablation(base, name)
        skip1 = name == "no-cpt"
        frac = 0.5 if name == "data-50pct" else 1.0
        bdirs = _chain(base, wd, root)
        vdirs = _chain(var, wd, root, skip_stage1=skip1, data_fraction=frac,
                       fulltune=name != "no-fulltune")
        base_scores.append(_chain_bleu4(base, wd, bdirs, split))
        var_scores.append(_chain_bleu4(var, wd, vdirs, split))
    result = {
        "name": name,
        "seeds": list(seeds),
        "baseline": base_scores,
        "variant": var_scores,
        "baseline_median": statistics.median(base_scores),
        "variant_median": statistics.median(var_scores),
    }
    lines = [f"ablation = {name}", f"seeds = {','.join(str(s) for s in seeds)}"]
    lines.append("baseline = " + " ".join(f"{x:.6f}" for x in base_scores))
    lines.append("variant = " + " ".join(f"{x:.6f}" for x in var_scores))
    lines.append(f"baseline_median = {result['baseline_median']:.6f}")
    lines.append(f"variant_median = {result['variant_median']:.6f}")
    with open(wd / f"ablation-{name}.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return result
