"""Optimization machinery shared by all stages: AdamW with decoupled decay,
one-cycle cosine schedule, global-norm clipping, and the seeded run loop."""

import math
import time

import numpy as np

from . import kernels


class NumericAbort(RuntimeError):
    """Raised when a non-finite gradient shows up; carries the parameter name."""

    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.param_name = name


class AdamW:
    """Holds first/second moments per named parameter; lr comes in per step."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, grad_clip=1.0):
        self.named_params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {n: np.zeros(p.data.size, dtype=p.data.dtype) for n, p in self.named_params}
        self.v = {n: np.zeros(p.data.size, dtype=p.data.dtype) for n, p in self.named_params}

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def _gather_grads(self):
        grads = []
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericAbort(name)
            grads.append(np.asarray(g, dtype=p.data.dtype).reshape(-1))
        return grads

    def step(self, lr: float):
        grads = self._gather_grads()
        scale = 1.0
        if self.grad_clip and self.grad_clip > 0:
            total = math.sqrt(sum(float(g @ g) for g in grads))
            if total > self.grad_clip:
                scale = self.grad_clip / total
        self.t += 1
        for (name, p), g in zip(self.named_params, grads):
            if scale != 1.0:
                g = g * np.asarray(scale, dtype=g.dtype)
            flat = p.data.reshape(-1)
            kernels.adamw_update(flat, np.ascontiguousarray(g), self.m[name], self.v[name],
                                 lr, self.beta1, self.beta2, self.eps,
                                 self.weight_decay, self.t)

    def state_arrays(self):
        """Flat state blobs for checkpointing (moments plus the step counter)."""
        out = {}
        for name in sorted(self.m):
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, blobs, t: int):
        for name in self.m:
            self.m[name] = np.asarray(blobs[f"opt.m.{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.asarray(blobs[f"opt.v.{name}"], dtype=self.v[name].dtype)
        self.t = int(t)


def onecycle_cosine(step: int, total_steps: int, max_lr: float,
                    warmup_frac: float = 0.05) -> float:
    """Linear warmup 0 -> max_lr over ceil(warmup_frac*total), cosine to 0 at total."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    w = math.ceil(warmup_frac * total_steps)
    if step < w:
        return max_lr * step / w
    span = max(total_steps - w, 1)
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


def run_stage(step_fn, total_steps: int, max_lr: float, warmup_frac: float,
              log_path, save_state=None, checkpoint_every: int = 0,
              start_step: int = 0, log_every: int = 1, stop_at=None,
              stop_hook=None):
    """Drive step_fn(step, lr) -> loss for steps [start_step, end).

    end is total_steps, or stop_at for a deliberately interrupted run (the
    schedule still spans total_steps, so a later resume continues identically).
    stop_hook(next_step) may end the run early (early stopping); the final
    checkpoint then reflects the step actually reached. Appends to the metric
    log when resuming, truncates otherwise. Checkpoints via save_state(next_step)
    periodically and always at the end.
    """
    end = total_steps if stop_at is None else min(int(stop_at), total_steps)
    mode = "a" if start_step > 0 else "w"
    last_loss = float("nan")
    reached = start_step
    with open(log_path, mode, encoding="utf-8") as log:
        for step in range(start_step, end):
            t0 = time.monotonic()
            lr = onecycle_cosine(step, total_steps, max_lr, warmup_frac)
            loss = float(step_fn(step, lr))
            last_loss = loss
            reached = step + 1
            if step % log_every == 0 or step == end - 1:
                wall = time.monotonic() - t0
                log.write(f"step={step} lr={lr:.10e} loss={loss:.10e} wallclock={wall:.3f}\n")
                log.flush()
            if stop_hook is not None and stop_hook(step + 1):
                break
            if save_state is not None and checkpoint_every > 0 \
                    and (step + 1) % checkpoint_every == 0 and (step + 1) < end:
                save_state(step + 1)
    if save_state is not None:
        save_state(reached)
    return last_loss


def read_metric_log(path):
    """Parse the line format back into dicts (step int, lr/loss/wallclock float)."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = {}
            for part in line.split():
                k, v = part.split("=", 1)
                rec[k] = int(v) if k == "step" else float(v)
            rows.append(rec)
    return rows
