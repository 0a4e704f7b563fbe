import math

import numpy as np
import pytest

from signlab import training
from signlab.autograd import Tensor


def make_params(seed=0, n=3, d=5, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return [(f"p{i}", Tensor(rng.standard_normal(d).astype(dtype), requires_grad=True))
            for i in range(n)]


class TestSchedule:
    def test_endpoints(self):
        total, max_lr = 200, 3e-4
        assert training.onecycle_cosine(0, total, max_lr) == 0.0
        w = math.ceil(0.05 * total)
        assert training.onecycle_cosine(w, total, max_lr) == pytest.approx(max_lr)
        # step total-1 is the last one executed; exact zero lands at total
        assert training.onecycle_cosine(total, total, max_lr) == pytest.approx(0.0, abs=1e-18)

    def test_warmup_is_linear(self):
        total, max_lr = 1000, 1.0
        w = math.ceil(0.05 * total)
        for s in range(w):
            assert training.onecycle_cosine(s, total, max_lr) == pytest.approx(max_lr * s / w)

    def test_monotone_after_peak(self):
        total = 400
        w = math.ceil(0.05 * total)
        lrs = [training.onecycle_cosine(s, total, 1e-3) for s in range(w, total + 1)]
        assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))

    def test_continuity_at_peak(self):
        total = 333
        w = math.ceil(0.05 * total)
        left = training.onecycle_cosine(w - 1, total, 1.0)
        at = training.onecycle_cosine(w, total, 1.0)
        assert abs(at - left) < 2.0 / w + 1e-12

    def test_rejects_nonpositive_total(self):
        with pytest.raises(ValueError):
            training.onecycle_cosine(0, 0, 1e-3)


class TestAdamW:
    def test_single_step_matches_reference(self):
        params = make_params(1, n=1, d=4)
        name, p = params[0]
        g = np.array([0.5, -1.0, 0.25, 2.0])
        p.grad = g.copy()
        opt = training.AdamW(params, weight_decay=0.1, grad_clip=0.0)
        before = p.data.copy()
        opt.step(1e-2)
        # bias-corrected Adam with decoupled decay, t=1
        m_hat = 0.1 * g / 0.1
        v_hat = 0.001 * g * g / 0.001
        want = before - 1e-2 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.1 * before)
        np.testing.assert_allclose(p.data, want, rtol=1e-12)

    def test_grad_clip_equals_prescaled_grads(self):
        base = make_params(2)
        grads = [np.full(5, 3.0), np.full(5, -4.0), np.full(5, 1.0)]
        total = math.sqrt(sum(float(g @ g) for g in grads))
        clip = total / 10.0

        clipped = make_params(2)
        for (_, p), g in zip(clipped, grads):
            p.grad = g.copy()
        o1 = training.AdamW(clipped, grad_clip=clip)
        o1.step(1e-3)

        scaled = make_params(2)
        for (_, p), g in zip(scaled, grads):
            p.grad = g * (clip / total)
        o2 = training.AdamW(scaled, grad_clip=0.0)
        o2.step(1e-3)

        for (_, a), (_, b) in zip(clipped, scaled):
            np.testing.assert_allclose(a.data, b.data, rtol=1e-12)

    def test_no_clip_below_threshold(self):
        a, b = make_params(3), make_params(3)
        for (_, p), (_, q) in zip(a, b):
            p.grad = np.full(5, 1e-3)
            q.grad = np.full(5, 1e-3)
        training.AdamW(a, grad_clip=1e9).step(1e-3)
        training.AdamW(b, grad_clip=0.0).step(1e-3)
        for (_, p), (_, q) in zip(a, b):
            np.testing.assert_array_equal(p.data, q.data)

    def test_nonfinite_gradient_names_parameter(self):
        params = make_params(4)
        for _, p in params:
            p.grad = np.zeros(5)
        params[1][1].grad[2] = np.nan
        opt = training.AdamW(params)
        with pytest.raises(training.NumericAbort, match="p1"):
            opt.step(1e-3)

    def test_missing_grad_treated_as_zero(self):
        params = make_params(5)
        opt = training.AdamW(params, weight_decay=0.0)
        before = [p.data.copy() for _, p in params]
        opt.step(1e-2)
        for (_, p), b in zip(params, before):
            np.testing.assert_array_equal(p.data, b)

    def test_state_roundtrip_bitwise(self):
        def run(steps, reload_at=None):
            rng = np.random.default_rng(9)
            params = make_params(6)
            opt = training.AdamW(params, weight_decay=0.01)
            saved = None
            for t in range(steps):
                if reload_at is not None and t == reload_at:
                    blobs, tt, data = saved
                    params = make_params(6)
                    for (_, p), d in zip(params, data):
                        p.data[:] = d
                    opt = training.AdamW(params, weight_decay=0.01)
                    opt.load_state_arrays(blobs, tt)
                for _, p in params:
                    p.grad = rng.standard_normal(5)
                opt.step(1e-3)
                if reload_at is not None and t == reload_at - 1:
                    saved = ({k: v.copy() for k, v in opt.state_arrays().items()},
                             opt.t, [p.data.copy() for _, p in params])
            return [p.data.copy() for _, p in params]

        straight = run(8)
        resumed = run(8, reload_at=4)
        for a, b in zip(straight, resumed):
            np.testing.assert_array_equal(a, b)


class TestRunStage:
    def test_log_format_and_determinism(self, tmp_path):
        def step_fn(step, lr):
            return 1.0 / (step + 1) + lr

        p1, p2 = tmp_path / "a.log", tmp_path / "b.log"
        training.run_stage(step_fn, 7, 1e-3, 0.1, p1)
        training.run_stage(step_fn, 7, 1e-3, 0.1, p2)
        r1, r2 = training.read_metric_log(p1), training.read_metric_log(p2)
        assert [x["step"] for x in r1] == list(range(7))
        assert [(x["step"], x["lr"], x["loss"]) for x in r1] \
            == [(x["step"], x["lr"], x["loss"]) for x in r2]
        line = p1.read_text().splitlines()[0]
        assert line.startswith("step=0 lr=")
        assert "loss=" in line and "wallclock=" in line

    def test_interrupt_resume_same_schedule(self, tmp_path):
        seen = []

        def step_fn(step, lr):
            seen.append((step, lr))
            return 0.0

        log = tmp_path / "s.log"
        training.run_stage(step_fn, 10, 2e-3, 0.2, log, stop_at=4)
        training.run_stage(step_fn, 10, 2e-3, 0.2, log, start_step=4)
        full = [(s, training.onecycle_cosine(s, 10, 2e-3, 0.2)) for s in range(10)]
        assert seen == full
        assert [x["step"] for x in training.read_metric_log(log)] == list(range(10))

    def test_checkpoint_cadence_and_final(self, tmp_path):
        calls = []
        training.run_stage(lambda s, lr: 0.0, 10, 1e-3, 0.1, tmp_path / "c.log",
                           save_state=calls.append, checkpoint_every=3)
        assert calls == [3, 6, 9, 10]

    def test_stop_hook_checkpoints_reached_step(self, tmp_path):
        calls = []
        training.run_stage(lambda s, lr: 0.0, 100, 1e-3, 0.1, tmp_path / "h.log",
                           save_state=calls.append,
                           stop_hook=lambda nxt: nxt >= 5)
        assert calls == [5]

    def test_returns_last_loss(self, tmp_path):
        out = training.run_stage(lambda s, lr: float(s) * 2, 5, 1e-3, 0.1,
                                 tmp_path / "r.log")
        assert out == 8.0
