"""Run settings: one frozen dataclass per config section, named presets, and a
sectioned key-value loader (configparser syntax). Validation failures always
name the offending section and key."""

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace

from .connector import FulltuneConfig, Stage3Config
from .contrastive import ContrastiveConfig, Stage2Config
from .lm import PretrainConfig
from .tokenizer import ChatTemplate
from .visual import VisualConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DataConfig:
    seed: int = 7
    vocab_size: int = 200
    d_raw: int = 32
    noise: float = 0.1
    train: int = 2000
    val: int = 200
    test: int = 200
    documents: int = 400
    doc_sentences: int = 20

    def __post_init__(self):
        if self.vocab_size < 2 or self.d_raw < 2:
            raise ValueError("vocab_size >= 2 and d_raw >= 2 required")
        if min(self.train, self.val, self.test, self.documents) < 1:
            raise ValueError("split sizes must be >= 1")
        if self.doc_sentences < 1:
            raise ValueError("doc_sentences must be >= 1")


@dataclass(frozen=True)
class LmShape:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 0
    max_len: int = 512


@dataclass(frozen=True)
class TextShape:
    d_model: int = 64
    n_heads: int = 4
    depth: int = 2
    d_co: int = 768
    max_len: int = 64
    causal_pooling: bool = False


@dataclass(frozen=True)
class ConnShape:
    mode: str = "mlp"
    d_hidden: int = 0


@dataclass(frozen=True)
class Settings:
    data: DataConfig = field(default_factory=DataConfig)
    lm: LmShape = field(default_factory=LmShape)
    visual: VisualConfig = field(default_factory=VisualConfig)
    text: TextShape = field(default_factory=TextShape)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    connector: ConnShape = field(default_factory=ConnShape)
    stage1: PretrainConfig = field(default_factory=PretrainConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    fulltune: FulltuneConfig = field(default_factory=FulltuneConfig)
    template: ChatTemplate = field(default_factory=ChatTemplate)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, typ, where: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def apply_overrides(st: Settings, overrides) -> Settings:
    """overrides: iterable of (section, key, value); raw strings are converted
    to the field's declared type, other values are used as-is."""
    sections = {f.name: getattr(st, f.name) for f in fields(st)}
    for sec, key, val in overrides:
        if sec not in sections:
            raise ConfigError(f"unknown config section [{sec}]")
        dc = sections[sec]
        ftypes = {f.name: f.type for f in fields(dc)}
        if key not in ftypes:
            raise ConfigError(f"unknown key {sec}.{key}")
        typ = type(getattr(dc, key))
        if isinstance(val, str) and typ is not str:
            val = _convert(val, typ, f"{sec}.{key}")
        try:
            sections[sec] = replace(dc, **{key: val})
        except ValueError as e:
            raise ConfigError(f"invalid value for {sec}.{key}: {e}") from None
    return Settings(**sections)


def load_config(path, base: Settings = None) -> Settings:
    st = base if base is not None else Settings()
    cp = configparser.ConfigParser()
    cp.optionxform = str
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    triples = [(sec, key, cp.get(sec, key))
               for sec in cp.sections() for key in cp[sec]]
    return apply_overrides(st, triples)


# Named presets. "desk" is the full-size run; the others shrink it for gating
# experiments. Values are (section, key, value) overrides on the defaults.
_PRESETS = {
    "desk": [],
    "smoke": [
        ("data", "vocab_size", 24), ("data", "train", 48), ("data", "val", 12),
        ("data", "test", 12), ("data", "documents", 40),
        ("data", "doc_sentences", 8),
        ("lm", "d_model", 32), ("lm", "n_layers", 2), ("lm", "n_heads", 2),
        ("lm", "max_len", 256),
        ("visual", "d_model", 32), ("visual", "n_heads", 2),
        ("visual", "local_depth", 2), ("visual", "full_depth", 2),
        ("visual", "d_co", 64),
        ("text", "d_model", 32), ("text", "depth", 1), ("text", "d_co", 64),
        ("text", "n_heads", 2),
        ("stage1", "epochs", 1), ("stage1", "batch", 16),
        ("stage2", "epochs", 2), ("stage2", "batch", 16),
        ("stage3", "epochs", 2), ("stage3", "batch", 8), ("stage3", "eval_every", 0),
        ("fulltune", "epochs", 1), ("fulltune", "batch", 8),
    ],
    "overfit": [
        ("data", "vocab_size", 50), ("data", "train", 32), ("data", "val", 8),
        ("data", "test", 8), ("data", "documents", 20),
        ("data", "doc_sentences", 8),
        ("lm", "d_model", 64), ("lm", "n_layers", 2), ("lm", "n_heads", 2),
        ("lm", "max_len", 256),
        ("visual", "d_model", 48), ("visual", "n_heads", 2),
        ("visual", "local_depth", 2), ("visual", "full_depth", 2),
        ("visual", "d_co", 96), ("visual", "max_words", 32),
        ("text", "d_model", 48), ("text", "depth", 1), ("text", "d_co", 96),
        ("text", "n_heads", 2),
        ("stage1", "epochs", 1), ("stage1", "batch", 16),
        ("stage2", "epochs", 300), ("stage2", "batch", 32),
        ("stage3", "epochs", 800), ("stage3", "batch", 32),
        ("stage3", "eval_every", 0), ("stage3", "max_lr", 2e-3),
        # the full-tune phase here is a memorization polish; the small paper
        # rate cannot move a random-ish stack inside the step budget
        ("fulltune", "epochs", 600), ("fulltune", "batch", 32),
        ("fulltune", "max_lr", 1e-3),
    ],
    "ablation": [
        ("data", "vocab_size", 40), ("data", "noise", 0.35),
        ("data", "train", 400), ("data", "val", 48), ("data", "test", 48),
        ("data", "documents", 60),
        ("data", "doc_sentences", 10),
        ("lm", "d_model", 64), ("lm", "n_layers", 2), ("lm", "n_heads", 2),
        ("lm", "max_len", 256),
        ("visual", "d_model", 48), ("visual", "n_heads", 2),
        ("visual", "local_depth", 2), ("visual", "full_depth", 2),
        ("visual", "d_co", 96),
        ("text", "d_model", 48), ("text", "depth", 1), ("text", "d_co", 96),
        ("text", "n_heads", 2),
        ("stage1", "epochs", 2), ("stage1", "batch", 16),
        ("stage2", "epochs", 40), ("stage2", "batch", 32),
        ("stage3", "epochs", 30), ("stage3", "batch", 16),
        ("stage3", "eval_every", 0),
        ("fulltune", "epochs", 2), ("fulltune", "batch", 16),
    ],
}

# Table-style ablation axes: named tweaks applied on top of any preset.
ABLATIONS = {
    "no-cpt": [],  # handled by the pipeline: stage 1 is skipped
    "llm-size-s": [("lm", "d_model", 64), ("lm", "n_layers", 2)],
    "llm-size-m": [],
    "llm-size-l": [("lm", "d_model", 192), ("lm", "n_layers", 6), ("lm", "n_heads", 6)],
    "no-local-attention": [("visual", "local_depth", 0)],
    "small-draw": [("data", "train", 200)],
    "data-50pct": [],  # pipeline halves the train manifest
    "sentence-level-feature": [("connector", "mode", "sentence")],
    "linear-connector": [("connector", "mode", "linear")],
    "no-format-prompt": [("template", "format_prompt", "")],
    "no-prompt": [("template", "task_prompt", ""), ("template", "format_prompt", "")],
    "no-fulltune": [],  # pipeline skips the full-tuning phase
}


def preset_names():
    return sorted(_PRESETS)


def make_settings(preset: str = "desk") -> Settings:
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (have {', '.join(preset_names())})")
    return apply_overrides(Settings(), _PRESETS[preset])


def apply_ablation(st: Settings, name: str) -> Settings:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r} (have {', '.join(sorted(ABLATIONS))})")
    return apply_overrides(st, ABLATIONS[name])


def dump_settings(st: Settings) -> str:
    """Round-trippable text form (stable key order) for provenance files."""
    out = []
    for f in fields(st):
        out.append(f"[{f.name}]")
        dc = getattr(st, f.name)
        for g in fields(dc):
            out.append(f"{g.name} = {getattr(dc, g.name)}")
        out.append("")
    return "\n".join(out)


def settings_sections(st: Settings) -> dict:
    return {f.name: dataclasses.asdict(getattr(st, f.name)) for f in fields(st)}
