"""Low-rank adapters: delta = (alpha/gamma) * B @ A on named 2-d weights.

B starts at zero so attaching is an exact no-op until training moves it.
Merging folds deltas into the base weights and consumes the adapter set,
making a second merge impossible by construction.
"""

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor

DEFAULT_TARGETS = ("attn.wq", "attn.wv")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")


class AdapterSet:
    def __init__(self, rank, alpha, pairs):
        self.rank = rank
        self.alpha = alpha
        self.pairs = pairs  # target name -> (A: (rank, d_in), B: (d_out, rank))
        self.consumed = False

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward_table(self):
        """target name -> (A, B, scale) for the attention plumbing."""
        if self.consumed:
            raise RuntimeError("adapter set was merged and can no longer be applied")
        return {name: (A, B, self.scale) for name, (A, B) in self.pairs.items()}

    def named_parameters(self):
        out = []
        for name in sorted(self.pairs):
            A, B = self.pairs[name]
            out.append((f"lora.{name}.A", A))
            out.append((f"lora.{name}.B", B))
        return out

    def parameter_count(self) -> int:
        return sum(A.data.size + B.data.size for A, B in self.pairs.values())


def attach_lora(params, cfg: LoraConfig, rng, dtype=np.float32) -> AdapterSet:
    """Create zero-init adapters on every weight matching a target suffix and
    freeze the base parameters (the adapters become the whole trainable set)."""
    pairs = {}
    for target in cfg.targets:
        matched = [n for n in sorted(params) if n.endswith(target)]
        if not matched:
            raise ValueError(f"no parameter matches LoRA target {target!r}")
        for name in matched:
            w = params[name]
            if w.data.ndim != 2:
                raise ValueError(f"LoRA target {name!r} is not a matrix")
            d_out, d_in = w.data.shape
            A = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (cfg.rank, d_in)).astype(dtype),
                       requires_grad=True)
            B = Tensor(np.zeros((d_out, cfg.rank), dtype=dtype), requires_grad=True)
            pairs[name] = (A, B)
    for p in params.values():
        p.requires_grad = False
    return AdapterSet(cfg.rank, cfg.alpha, pairs)


def merge_lora(params, adapters: AdapterSet):
    """W <- W + scale * B @ A for every target; unfreezes the base and consumes
    the adapter set."""
    if adapters.consumed:
        raise RuntimeError("adapter set already merged")
    for name, (A, B) in adapters.pairs.items():
        w = params[name]
        w.data = w.data + adapters.scale * (B.data @ A.data)
    adapters.consumed = True
    for p in params.values():
        p.requires_grad = True
    return params
