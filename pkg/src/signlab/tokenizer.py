"""Whitespace tokenizer, vocabulary with special tokens, chat-template rendering.

Segment labels ride along with token ids so response masking and video-slot
splicing never re-derive spans from content.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS, SYS, USR, AST, VID = SPECIALS = (
    "<pad>", "<bos>", "<eos>", "<sys>", "<usr>", "<ast>", "<vid>",
)

# ordinary corpus token separating serialized blocks; deliberately not special
SEP_TOKEN = "<sep>"

SEG_SYSTEM = "system"
SEG_USER = "user_text"
SEG_VIDEO = "video_slot"
SEG_RESPONSE = "response"
SEG_SPECIAL = "special"


class Vocab:
    """Immutable token<->id map; ids dense, specials occupy the top 7 slots."""

    def __init__(self, tokens):
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self._ids:
                raise ValueError(f"vocabulary missing special token {s!r}")
        self._special_ids = frozenset(self._ids[s] for s in SPECIALS)

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __len__(self):
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise ValueError(f"out-of-vocabulary token {token!r}") from None

    def token_of(self, i: int) -> str:
        if not 0 <= i < len(self._tokens):
            raise ValueError(f"invalid token id {i}")
        return self._tokens[i]

    def is_special(self, i: int) -> bool:
        return i in self._special_ids

    @property
    def pad_id(self):
        return self._ids[PAD]

    @property
    def bos_id(self):
        return self._ids[BOS]

    @property
    def eos_id(self):
        return self._ids[EOS]

    @property
    def sys_id(self):
        return self._ids[SYS]

    @property
    def usr_id(self):
        return self._ids[USR]

    @property
    def ast_id(self):
        return self._ids[AST]

    @property
    def vid_id(self):
        return self._ids[VID]

    def encode(self, text) -> np.ndarray:
        tokens = text.split() if isinstance(text, str) else list(text)
        return np.array([self.id_of(t) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            tok = self.token_of(i)
            if i in self._special_ids:
                continue
            out.append(tok)
        return " ".join(out)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, t in enumerate(self._tokens):
                f.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        pairs = []
        with open(path, "r", encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                cols = line.split("\t")
                if len(cols) != 2:
                    raise ValueError(f"{path}:{ln}: expected token<TAB>id")
                pairs.append((cols[0], int(cols[1])))
        pairs.sort(key=lambda p: p[1])
        if [i for _, i in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids not dense in [0, |V|)")
        return cls([t for t, _ in pairs])


def build_vocab(streams) -> Vocab:
    """Frequency-then-lexicographic vocabulary over token streams (strings or token lists)."""
    counts = Counter()
    for stream in streams:
        tokens = stream.split() if isinstance(stream, str) else stream
        counts.update(tokens)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    for s in SPECIALS:
        if s in counts:
            raise ValueError(f"corpus contains reserved special token {s!r}")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ordered + list(SPECIALS))


@dataclass(frozen=True)
class ChatTemplate:
    system: str = "You are a helpful assistant."
    task_prompt: str = "Use your expertise to provide the most precise translation."
    format_prompt: str = "Answer with one single sentence."

    def token_stream(self):
        return self.system.split() + self.task_prompt.split() + self.format_prompt.split()


def save_template(path, template: ChatTemplate) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("[template]\n")
        f.write(f"system = {template.system}\n")
        f.write(f"task_prompt = {template.task_prompt}\n")
        f.write(f"format_prompt = {template.format_prompt}\n")


def load_template(path) -> ChatTemplate:
    import configparser

    cp = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as f:
        cp.read_file(f)
    if not cp.has_section("template"):
        raise ValueError(f"{path}: missing [template] section")
    sec = cp["template"]
    kwargs = {}
    for key in ("system", "task_prompt", "format_prompt"):
        if key in sec:
            kwargs[key] = sec[key]
    extra = set(sec) - {"system", "task_prompt", "format_prompt"}
    if extra:
        raise ValueError(f"{path}: unknown template key {sorted(extra)[0]!r}")
    return ChatTemplate(**kwargs)


@dataclass
class TokenSequence:
    ids: np.ndarray
    segments: list
    has_response: bool

    def __post_init__(self):
        if len(self.ids) != len(self.segments):
            raise ValueError("ids and segments length mismatch")

    def video_span(self):
        """(start, stop) of the contiguous video_slot block."""
        idx = [i for i, s in enumerate(self.segments) if s == SEG_VIDEO]
        if not idx:
            raise ValueError("token sequence has no video_slot block")
        lo, hi = idx[0], idx[-1] + 1
        if idx != list(range(lo, hi)):
            raise ValueError("video_slot block is not contiguous")
        return lo, hi


def render_chat(vocab: Vocab, template: ChatTemplate, n_video_tokens: int,
                response=None) -> TokenSequence:
    """SYS system+task+format | USR [vid]*n | AST [response EOS]."""
    if n_video_tokens < 1:
        raise ValueError("n_video_tokens must be >= 1")
    ids = [vocab.sys_id]
    segs = [SEG_SPECIAL]
    sys_ids = vocab.encode(" ".join(
        [template.system, template.task_prompt, template.format_prompt]))
    ids.extend(sys_ids.tolist())
    segs.extend([SEG_SYSTEM] * len(sys_ids))
    ids.append(vocab.usr_id)
    segs.append(SEG_SPECIAL)
    ids.extend([vocab.vid_id] * n_video_tokens)
    segs.extend([SEG_VIDEO] * n_video_tokens)
    ids.append(vocab.ast_id)
    segs.append(SEG_SPECIAL)
    has_response = response is not None
    if has_response:
        resp_ids = vocab.encode(response)
        ids.extend(resp_ids.tolist())
        segs.extend([SEG_RESPONSE] * len(resp_ids))
        ids.append(vocab.eos_id)
        segs.append(SEG_SPECIAL)
    return TokenSequence(np.array(ids, dtype=np.int64), segs, has_response)
