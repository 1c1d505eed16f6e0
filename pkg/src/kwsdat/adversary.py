"""L-infinity PGD adversaries in log-Mel feature space.

Starting from the clean window (zero initial perturbation), each step moves
every feature by ``step_size`` in the direction of the loss gradient's sign
and projects back onto the epsilon ball around the clean window. Forward
passes use batch statistics of the configured normalization branch without
updating its running statistics, and only the input gradient is formed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .augment import FeatureWindow
from .disnorm import BranchPlan, DatasourceTag, Strategy, make_branch_plan
from .errors import ContractError, NumericError
from .ops import softmax_cross_entropy
from .tensor import Tensor, grad

GENERATION_BRANCHES = ("adversarial", "parent")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float | None = None  # defaults to epsilon / 4
    steps: int = 8
    branch_tag: int = 0  # branch used for forward passes while generating
    target_branch: int = 0  # branch that consumes the adversary in training
    source: int | None = None  # datasource this attack applies to; None = all
    level: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise ContractError(f"step_size must be positive, got {self.step_size}")

    @property
    def step(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def applies_to(self, source: int) -> bool:
        return self.source is None or self.source == source


def ball_bounds(x: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper limits in x's dtype that never stray more than epsilon from x."""
    lo = (x - x.dtype.type(epsilon)).astype(x.dtype)
    hi = (x + x.dtype.type(epsilon)).astype(x.dtype)
    x64 = x.astype(np.float64)
    # float rounding can push x +- eps past the ball by several ulps of a bound
    # near zero; step those bounds back toward x until they sit inside
    while np.any(bad := x64 - lo.astype(np.float64) > epsilon):
        lo[bad] = np.nextafter(lo[bad], x[bad])
    while np.any(bad := hi.astype(np.float64) - x64 > epsilon):
        hi[bad] = np.nextafter(hi[bad], x[bad])
    return lo, hi


def pgd(model, x: np.ndarray, labels, cfg: AttackConfig, branch: int | None = None,
        trace: list | None = None) -> np.ndarray:
    """Run PGD on a batch ``x`` (N x T x F); returns the adversarial batch.

    ``model(x, tag, mode, update_stats)`` must return N x K logits. If
    ``trace`` is given, the loss at every iterate (including the start) is
    appended to it.
    """
    x = np.asarray(x)
    labels = np.atleast_1d(np.asarray(labels))
    branch = cfg.branch_tag if branch is None else branch
    lo, hi = ball_bounds(x, cfg.epsilon)
    step = x.dtype.type(cfg.step)
    x_adv = x.copy()
    for _ in range(cfg.steps):
        xt = Tensor(x_adv, requires_grad=True)
        loss = softmax_cross_entropy(model(xt, branch, "train", False), labels)
        if trace is not None:
            trace.append(loss.item())
        (g,) = grad(loss, [xt])
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite input gradient during adversary generation")
        x_adv = np.clip(x_adv + step * np.sign(g).astype(x.dtype), lo, hi)
    if trace is not None:
        xt = Tensor(x_adv)
        trace.append(softmax_cross_entropy(model(xt, branch, "train", False), labels).item())
    return x_adv


def pgd_attack(model, windows: FeatureWindow | list[FeatureWindow], cfg: AttackConfig):
    """Adversarial copies of one window or a same-tag batch of windows.

    The returned windows carry an ``adversarial`` tag whose parent is the
    clean window's tag and whose id is the branch that will consume them.
    """
    single = isinstance(windows, FeatureWindow)
    batch = [windows] if single else list(windows)
    x = np.stack([w.features for w in batch])
    y = np.array([w.label for w in batch])
    x_adv = pgd(model, x, y, cfg)
    out = [
        replace(w, features=xa, tag=DatasourceTag.adversarial(w.tag, cfg.level, id=cfg.target_branch))
        for w, xa in zip(batch, x_adv)
    ]
    return out[0] if single else out


def make_attack_schedule(strategy, epsilon_or_levels, num_datasources: int = 1, *, steps: int = 8,
                         step_size: float | None = None, generation_branch: str = "adversarial",
                         plan: BranchPlan | None = None) -> list[AttackConfig]:
    """Attack configurations for one training strategy.

    AT, DAT and DA_DAT get one attack per datasource at a single epsilon;
    FG_DAT gets one attack per perturbation level, applied to every
    datasource. Plain training gets none.
    """
    strategy = Strategy.parse(strategy)
    if generation_branch not in GENERATION_BRANCHES:
        raise ContractError(f"generation_branch must be one of {GENERATION_BRANCHES}")
    levels = list(np.atleast_1d(np.asarray(epsilon_or_levels, dtype=float)))
    if not levels:
        raise ContractError("no perturbation level given")
    if strategy is Strategy.NONE:
        return []
    if plan is None:
        plan = make_branch_plan(strategy, num_datasources, len(levels) if strategy is Strategy.FG_DAT else 1)

    def config(eps, source, level, parent_branch, target):
        gen = target if generation_branch == "adversarial" else parent_branch
        return AttackConfig(float(eps), step_size, steps, gen, target, source, level)

    if strategy is Strategy.FG_DAT:
        return [config(eps, None, lvl, 0, plan.adversarial_branch(0, lvl)) for lvl, eps in enumerate(levels)]
    if len(levels) != 1:
        raise ContractError(f"{strategy.value} uses a single epsilon, got {len(levels)}")
    return [config(levels[0], s, 0, plan.original_branch(s), plan.adversarial_branch(s))
            for s in range(num_datasources)]
