"""Quick in-process invariant checks run by ``kwsdat selftest``.

Each check is small enough to finish in seconds; the full property suites
live in the test tree.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .adversary import AttackConfig, pgd
from .disnorm import BranchSet, Strategy, make_branch_plan
from .evaluator import auc, det_curve
from .model import ModelConfig, SimAM, build_model
from .ops import conv2d, depthwise_conv2d, softmax_cross_entropy
from .tensor import Tensor, backward


def _naive_conv(x, w, stride, pad, groups):
    c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    per = o // groups
    for oc in range(o):
        g = oc // per
        for i in range(ho):
            for j in range(wo):
                patch = xp[g * cg : (g + 1) * cg, i * stride : i * stride + kh, j * stride : j * stride + kw]
                out[oc, i, j] = np.sum(patch * w[oc])
    return out


def check_param_count() -> str:
    counts = build_model(ModelConfig(num_classes=2), seed=0).parameter_counts()
    expected = [405] + [26_730] * 7 + [57_600, 2_560]
    assert list(counts.values()) == expected, counts
    return f"per-layer counts match, total {sum(expected)}"


def check_conv_oracle() -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        c, o, s = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        x = rng.normal(size=(1, c, 7, 6))
        w = rng.normal(size=(o, c, 3, 3))
        got = conv2d(Tensor(x), Tensor(w), s, 1).data[0]
        worst = max(worst, float(np.abs(got - _naive_conv(x[0], w, s, 1, 1)).max()))
        wd = rng.normal(size=(c, 3, 3))
        got = depthwise_conv2d(Tensor(x), Tensor(wd), s, 1).data[0]
        worst = max(worst, float(np.abs(got - _naive_conv(x[0], wd[:, None], s, 1, c)).max()))
    assert worst < 1e-6, worst
    return f"max abs error {worst:.1e}"


def check_simam_constant() -> str:
    x = np.full((1, 2, 3, 4), 0.7)
    y = SimAM.apply(Tensor(x), lam=1e-4).data
    err = float(np.abs(y - x / (1 + np.exp(-0.5))).max())
    assert err < 1e-9, err
    return f"error {err:.1e}"


def check_pgd_ball() -> str:
    rng = np.random.default_rng(1)
    w = rng.normal(size=(6, 3))

    def model(x, tag=0, mode="train", update_stats=True):
        return x.reshape(x.shape[0], 6) @ Tensor(w)

    x = rng.normal(size=(4, 2, 3))
    y = rng.integers(0, 3, size=4)
    x_adv = pgd(model, x, y, AttackConfig(0.05, steps=5))
    dev = float(np.abs(x_adv - x).max())
    assert dev <= 0.05, dev
    return f"max deviation {dev:.4f} <= 0.05"


def check_branch_isolation() -> str:
    bs = BranchSet(3, 3)
    before = [b.running_mean.copy() for b in bs.branches]
    bs.forward(Tensor(np.random.default_rng(2).normal(size=(4, 3, 2, 2))), 1, "train")
    after = [b.running_mean for b in bs.branches]
    assert np.array_equal(before[0], after[0]) and np.array_equal(before[2], after[2])
    assert not np.array_equal(before[1], after[1])
    k = {s.value: make_branch_plan(s, 3, 2).num_branches for s in Strategy if s is not Strategy.NONE}
    assert k == {"AT": 1, "DAT": 2, "FG_DAT": 3, "DA_DAT": 6}, k
    return f"branch counts {k}"


def check_gradient() -> str:
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 5, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    y = np.array([0, 2])

    def loss_of(wv):
        out = conv2d(Tensor(x, dtype=np.float64), wv, 1, 1)
        return softmax_cross_entropy(out.sum(axis=(2, 3)), y)

    wt = Tensor(w, requires_grad=True, dtype=np.float64)
    backward(loss_of(wt))
    h, worst = 1e-6, 0.0
    for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 1, 2)]:
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        fd = (loss_of(Tensor(wp, dtype=np.float64)).item() - loss_of(Tensor(wm, dtype=np.float64)).item()) / (2 * h)
        worst = max(worst, abs(fd - wt.grad[idx]) / max(abs(fd), 1e-8))
    assert worst < 1e-4, worst
    return f"max relative error {worst:.1e}"


def check_auc() -> str:
    rng = np.random.default_rng(4)
    pos, neg = rng.normal(1, 1, 40), rng.normal(0, 1, 50)
    brute = np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])
    assert abs(auc(pos, neg) - brute) < 1e-12
    curve = det_curve(pos, neg)
    assert np.all(np.diff(curve.far) <= 0) and np.all(np.diff(curve.frr) >= 0)
    return f"auc {brute:.4f}"


CHECKS: dict[str, Callable[[], str]] = {
    "parameter count": check_param_count,
    "convolution oracle": check_conv_oracle,
    "SimAM constant input": check_simam_constant,
    "gradient check": check_gradient,
    "PGD ball bound": check_pgd_ball,
    "BN branch isolation": check_branch_isolation,
    "AUC / DET oracle": check_auc,
}


def run_selftest(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t = time.perf_counter()
        try:
            detail = fn()
            echo(f"PASS  {name}: {detail} ({time.perf_counter() - t:.2f}s)")
        except Exception as exc:  # report every failure, keep going
            ok = False
            echo(f"FAIL  {name}: {type(exc).__name__}: {exc}")
    return ok
