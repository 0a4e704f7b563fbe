"""Translation quality metrics and the plain-text evaluation report.

BLEU is corpus-level: clipped n-gram counts are pooled across sentences,
the geometric mean of the four precisions is scaled by the brevity penalty
min(1, e^(1 - r/c)). ROUGE-L is the usual LCS-based F score and is averaged
over sentences at corpus level. Scores live in [0, 1]; the report file
shows them x100, two decimals.
"""

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels


def _toks(seq) -> list:
    return seq.split() if isinstance(seq, str) else list(seq)


def _ngrams(toks, n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(candidates, references, max_n: int = 4, smooth: bool = False) -> float:
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        raise ValueError("empty corpus")
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c, r = _toks(cand), _toks(ref)
        c_len += len(c)
        r_len += len(r)
        for n in range(1, max_n + 1):
            cg = _ngrams(c, n)
            rg = _ngrams(r, n)
            total[n - 1] += sum(cg.values())
            matched[n - 1] += sum(min(k, rg[g]) for g, k in cg.items())
    if c_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matched, total):
        if smooth:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = min(1.0, math.exp(1.0 - r_len / c_len))
    return bp * math.exp(log_p / max_n)


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    c, r = _toks(candidate), _toks(reference)
    if not r:
        raise ValueError("empty reference")
    if not c:
        return 0.0
    ids = {}
    enc = lambda ts: np.asarray([ids.setdefault(t, len(ids)) for t in ts], dtype=np.int64)
    L = kernels.lcs_length(enc(c), enc(r))
    if L == 0:
        return 0.0
    p, rec = L / len(c), L / len(r)
    b2 = beta * beta
    return (1 + b2) * p * rec / (rec + b2 * p)


def exact_match(candidates, references) -> float:
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        raise ValueError("empty corpus")
    hits = sum(_toks(c) == _toks(r) for c, r in zip(candidates, references))
    return hits / len(candidates)


@dataclass(frozen=True)
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    exact: float
    n_sentences: int

    def __post_init__(self):
        for f in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "exact"):
            v = getattr(self, f)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{f} out of [0, 1]: {v}")


def compute_report(candidates, references, smooth: bool = False) -> EvalReport:
    rs = [rouge_l(c, r) for c, r in zip(candidates, references)]
    return EvalReport(
        bleu1=bleu(candidates, references, 1, smooth),
        bleu2=bleu(candidates, references, 2, smooth),
        bleu3=bleu(candidates, references, 3, smooth),
        bleu4=bleu(candidates, references, 4, smooth),
        rouge_l=sum(rs) / len(rs),
        exact=exact_match(candidates, references),
        n_sentences=len(candidates),
    )


def format_report(rep: EvalReport) -> str:
    lines = [
        "[scores]",
        f"n_sentences = {rep.n_sentences}",
        f"bleu1 = {rep.bleu1 * 100:.2f}",
        f"bleu2 = {rep.bleu2 * 100:.2f}",
        f"bleu3 = {rep.bleu3 * 100:.2f}",
        f"bleu4 = {rep.bleu4 * 100:.2f}",
        f"rouge_l = {rep.rouge_l * 100:.2f}",
        f"exact = {rep.exact * 100:.2f}",
    ]
    return "\n".join(lines) + "\n"


def write_report(path, rep: EvalReport):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_report(rep))


def parse_report(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("["):
                continue
            key, _, val = line.partition(" = ")
            out[key] = int(val) if key == "n_sentences" else float(val)
    return out
