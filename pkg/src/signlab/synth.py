"""Synthetic sign language: prototypes, grammar, rendering, datasets.

A language couples a sign inventory ("s000"..) with per-sign feature
trajectories and a deterministic toy grammar mapping gloss sequences to
spoken-word sequences ("w000".. plus function words). Videos are rendered as
float32 feature matrices with duration jitter and Gaussian noise, written in
the SLTF container. Everything derives from a single integer seed.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import child_rng
from .tokenizer import SEP_TOKEN

FUNCTION_WORDS = ("le", "ba", "ma", "ne", "de", "ya")

GLOSS_MIN, GLOSS_MAX = 2, 8
PROTO_LEN_MIN, PROTO_LEN_MAX = 4, 12

SLTF_MAGIC = b"SLTF"


@dataclass(frozen=True)
class Grammar:
    """Length-keyed positional permutation plus function-word insertions."""

    permutations: dict  # gloss length -> tuple of source indices
    insertions: dict  # gloss length -> tuple of (position, word), applied left to right
    content_map: dict  # sign -> spoken word

    def apply(self, gloss):
        n = len(gloss)
        if n not in self.permutations:
            raise ValueError(f"no grammar rule for gloss length {n}")
        try:
            content = [self.content_map[g] for g in gloss]
        except KeyError as e:
            raise ValueError(f"unknown sign {e.args[0]!r}") from None
        text = [content[i] for i in self.permutations[n]]
        for pos, word in self.insertions[n]:
            text.insert(pos, word)
        return text


@dataclass
class SyntheticLanguage:
    seed: int
    d_raw: int
    noise_sigma: float
    signs: list
    prototypes: dict  # sign -> (L_i, d_raw) float32
    grammar: Grammar

    @property
    def spoken_words(self):
        return [self.grammar.content_map[s] for s in self.signs]


def prototype_separation(prototypes) -> float:
    """Min L2 distance between any two frames of different signs, exhaustive scan."""
    mats = list(prototypes.values())
    best = np.inf
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            a = mats[i].astype(np.float64)
            b = mats[j].astype(np.float64)
            d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
            best = min(best, float(np.sqrt(d2.min())))
    return best


def build_language(seed: int, n_signs: int = 50, d_raw: int = 32,
                   noise_sigma: float = 0.1) -> SyntheticLanguage:
    if n_signs < 2:
        raise ValueError(f"need at least 2 signs, got {n_signs}")
    if d_raw < 1:
        raise ValueError(f"d_raw must be positive, got {d_raw}")
    rng = child_rng(seed, "language")
    # anchor radius scales with render noise so frames stay identifiable:
    # framewise separation works out to >= 0.7*radius, which must beat 4*sigma
    radius = max(1.0, 7.0 * noise_sigma)
    anchors = []
    for _ in range(n_signs):
        for _attempt in range(1000):
            v = rng.standard_normal(d_raw)
            v *= radius / np.linalg.norm(v)
            if all(np.linalg.norm(v - a) >= 0.9 * radius for a in anchors):
                anchors.append(v)
                break
        else:
            raise RuntimeError("could not place sign anchors; lower n_signs or d_raw")

    signs = [f"s{i:03d}" for i in range(n_signs)]
    prototypes = {}
    for name, anchor in zip(signs, anchors):
        L = int(rng.integers(PROTO_LEN_MIN, PROTO_LEN_MAX + 1))
        res = rng.standard_normal((L, d_raw))
        res *= (0.1 * radius) / np.linalg.norm(res, axis=1, keepdims=True)
        prototypes[name] = (anchor[None, :] + res).astype(np.float32)

    sep = prototype_separation(prototypes)
    if noise_sigma > 0 and sep <= 4.0 * noise_sigma:
        raise RuntimeError(f"prototype separation {sep:.3f} <= 4*sigma, unidentifiable")

    grng = child_rng(seed, "grammar")
    permutations = {}
    insertions = {}
    for n in range(1, GLOSS_MAX + 1):
        permutations[n] = tuple(int(x) for x in grng.permutation(n))
        rules = []
        for k in range(1 + n // 3):
            pos = int(grng.integers(0, n + k + 1))
            word = FUNCTION_WORDS[int(grng.integers(0, len(FUNCTION_WORDS)))]
            rules.append((pos, word))
        insertions[n] = tuple(rules)
    content_map = {s: f"w{s[1:]}" for s in signs}

    grammar = Grammar(permutations, insertions, content_map)
    return SyntheticLanguage(seed, d_raw, noise_sigma, signs, prototypes, grammar)


def sample_gloss(lang: SyntheticLanguage, rng) -> list:
    n = int(rng.integers(GLOSS_MIN, GLOSS_MAX + 1))
    idx = rng.integers(0, len(lang.signs), n)
    return [lang.signs[i] for i in idx]


def _resample_rows(proto, dur):
    # linear interpolation along time; identity when dur == len(proto)
    L = proto.shape[0]
    if dur == L:
        return proto.astype(np.float64)
    pos = np.linspace(0.0, L - 1.0, dur)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, L - 1)
    frac = (pos - lo)[:, None]
    p = proto.astype(np.float64)
    return p[lo] * (1.0 - frac) + p[hi] * frac


def render_video(lang: SyntheticLanguage, gloss, rng=None, jitter: bool = True,
                 sigma: float | None = None) -> np.ndarray:
    """Render a gloss sequence to a (T, d_raw) float32 feature matrix."""
    if sigma is None:
        sigma = lang.noise_sigma
    if (jitter or sigma > 0) and rng is None:
        raise ValueError("render_video needs an rng when jitter or noise is on")
    parts = []
    for sign in gloss:
        try:
            proto = lang.prototypes[sign]
        except KeyError:
            raise ValueError(f"unknown sign {sign!r}") from None
        L = proto.shape[0]
        if jitter:
            u = rng.uniform(0.75, 1.25)
            dur = int(np.clip(np.rint(L * u), np.ceil(0.75 * L), np.floor(1.25 * L)))
        else:
            dur = L
        parts.append(_resample_rows(proto, dur))
    x = np.concatenate(parts, axis=0)
    if sigma > 0:
        x = x + rng.normal(0.0, sigma, x.shape)
    return x.astype(np.float32)


def sample_document(lang: SyntheticLanguage, rng, n_sentences: int = 30) -> list:
    """Token stream mixing plain target-language sentences with gloss<sep>text statements."""
    tokens = []
    for _ in range(n_sentences):
        gloss = sample_gloss(lang, rng)
        text = lang.grammar.apply(gloss)
        if rng.random() < 0.5:
            tokens.extend(gloss)
            tokens.append(SEP_TOKEN)
            tokens.extend(text)
        else:
            tokens.extend(text)
        tokens.append(SEP_TOKEN)
    return tokens


# --- container and manifest io ----------------------------------------------

def write_sltf(path, frames) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError("SLTF frames must be 2-d (T, D)")
    frames = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(SLTF_MAGIC)
        f.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def read_sltf(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != SLTF_MAGIC:
            raise ValueError(f"{path}: not an SLTF file")
        t, d = struct.unpack("<II", head[4:12])
        payload = f.read(4 * t * d)
    if len(payload) != 4 * t * d:
        raise ValueError(f"{path}: truncated SLTF payload")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)


@dataclass
class ManifestRecord:
    id: str
    gloss: list
    text: list
    video: str  # resolved path


def write_manifest(path, rows) -> None:
    # rows: (id, gloss tokens, text tokens, relative video path)
    with open(path, "w", encoding="utf-8") as f:
        for rid, gloss, text, video in rows:
            f.write(f"{rid}\t{' '.join(gloss)}\t{' '.join(text)}\t{video}\n")


def load_manifest(path) -> list:
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise ValueError(f"{path}:{ln}: expected 4 tab-separated columns")
            rid, gloss, text, video = cols
            records.append(ManifestRecord(rid, gloss.split(), text.split(),
                                          os.path.join(base, video)))
    return records


def _sample_split(lang, seed, tag, n, forbidden, unique):
    out = []
    i = 0
    while len(out) < n:
        g = sample_gloss(lang, child_rng(seed, "gloss", tag, i))
        i += 1
        if i > 100 * n + 1000:
            raise RuntimeError("split sampling stalled; corpus too constrained")
        key = tuple(g)
        if key in forbidden:
            continue
        if unique:
            forbidden.add(key)
        out.append(g)
    return out


def generate_dataset(lang: SyntheticLanguage, out_dir, n_train, n_val, n_test,
                     seed: int, n_docs: int = 20, doc_sentences: int = 30,
                     jitter: bool = True):
    """Write train/val/test manifests, rendered videos, and a document corpus.

    Splits are disjoint on the gloss sequence (val/test additionally have no
    internal duplicates), documents go one per line to docs.txt.
    """
    os.makedirs(os.path.join(out_dir, "videos"), exist_ok=True)

    train_gloss = _sample_split(lang, seed, "train", n_train, set(), unique=False)
    seen = set(tuple(g) for g in train_gloss)
    val_gloss = _sample_split(lang, seed, "val", n_val, seen, unique=True)
    test_gloss = _sample_split(lang, seed, "test", n_test, seen, unique=True)

    manifests = {}
    for split, glosses in (("train", train_gloss), ("val", val_gloss), ("test", test_gloss)):
        rows = []
        for i, gloss in enumerate(glosses):
            rid = f"{split}{i:05d}"
            frames = render_video(lang, gloss, child_rng(seed, "render", split, i),
                                  jitter=jitter)
            rel = os.path.join("videos", rid + ".sltf")
            write_sltf(os.path.join(out_dir, rel), frames)
            rows.append((rid, gloss, lang.grammar.apply(gloss), rel))
        write_manifest(os.path.join(out_dir, split + ".tsv"), rows)
        manifests[split] = rows

    documents = [sample_document(lang, child_rng(seed, "doc", i), doc_sentences)
                 for i in range(n_docs)]
    with open(os.path.join(out_dir, "docs.txt"), "w", encoding="utf-8") as f:
        for doc in documents:
            f.write(" ".join(doc) + "\n")

    return manifests, documents
