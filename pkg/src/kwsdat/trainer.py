"""Mixed clean/adversarial training with Adam and cosine learning-rate decay.

One step takes a batch drawn from a single datasource, forwards it through
that datasource's branch, generates the configured adversaries, forwards each
through its adversarial branch, and minimizes the unweighted sum of the
clean and adversarial losses with a single backward pass.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .adversary import AttackConfig, make_attack_schedule, pgd
from .augment import FeatureWindow
from .disnorm import BranchPlan, Strategy, make_branch_plan
from .errors import ConfigError, NumericError, RoutingError
from .model import Model, save_checkpoint
from .ops import softmax_cross_entropy
from .tensor import Tensor, backward, grad

log = logging.getLogger(__name__)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainConfig:
    strategy: str = "DA_DAT"
    epochs: int = 15
    base_lr: float = 0.005
    batch_size: int = 64
    epsilon: float | list[float] = 0.1
    steps: int = 8
    step_size: float | None = None
    adv_weight: float = 1.0
    generation_branch: str = "adversarial"
    seed: int = 0
    audit: bool = False  # record the adversarial term's shared-parameter gradient each step
    collapse_routing: bool = False  # ablation: route every batch to branch 0


class Adam:
    """Bias-corrected Adam keeping moments per parameter.

    Parameters whose ``grad`` is None are skipped entirely (their moments do
    not decay), so an auxiliary branch moves only on steps that used it.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.state: dict[int, list] = {}  # id(param) -> [m, v, t]

    def step(self, params: list[Tensor], lr: float) -> None:
        self.step_count += 1
        for p in params:
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient")
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            m, v, t = st
            t += 1
            b1, b2 = p.dtype.type(self.beta1), p.dtype.type(self.beta2)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
            st[0], st[1], st[2] = m, v, t


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: Adam, lr: float) -> list[Tensor]:
    """Functional form: install ``grads`` and take one Adam step."""
    for p, g in zip(params, grads):
        p.grad = g
    state.step(params, lr)
    return params


@dataclass
class StepResult:
    loss: float
    clean_loss: float
    adv_losses: list[float]
    touched: dict[int, int]
    adv_shared_grad_norm: float | None = None


class Trainer:
    def __init__(self, model: Model, cfg: TrainConfig, num_datasources: int):
        self.model = model
        self.cfg = cfg
        strategy = Strategy.parse(cfg.strategy)
        levels = np.atleast_1d(cfg.epsilon)
        self.plan: BranchPlan = make_branch_plan(
            strategy, num_datasources, len(levels) if strategy is Strategy.FG_DAT else 1, cfg.collapse_routing)
        if self.plan.num_branches != model.num_branches:
            raise ConfigError(
                f"strategy {strategy.value} needs {self.plan.num_branches} branches, model has {model.num_branches}",
                "model.num_branches")
        self.schedule: list[AttackConfig] = make_attack_schedule(
            strategy, levels, num_datasources, steps=cfg.steps, step_size=cfg.step_size,
            generation_branch=cfg.generation_branch, plan=self.plan)
        self.optimizer = Adam()

    def train_step(self, batch: list[FeatureWindow], lr: float) -> StepResult:
        tags = {w.tag for w in batch}
        if len(tags) != 1:
            raise RoutingError(f"batch mixes datasource tags {sorted(map(str, tags))}")
        (tag,) = tags
        model = self.model
        branch = self.plan.route(tag)
        x = np.stack([w.features for w in batch]).astype(model.dtype)
        y = np.array([w.label for w in batch])
        model.zero_grad()
        model.reset_touches()

        clean = softmax_cross_entropy(model(Tensor(x), branch, "train"), y)
        adv_terms = []
        for cfg in self.schedule:
            if not cfg.applies_to(tag.source):
                continue
            x_adv = pgd(model, x, y, cfg)
            target = cfg.target_branch
            adv_terms.append(softmax_cross_entropy(model(Tensor(x_adv), target, "train"), y))

        total = clean
        for term in adv_terms:
            total = total + term * self.cfg.adv_weight
        audit = None
        if self.cfg.audit and adv_terms:
            adv_sum = adv_terms[0]
            for term in adv_terms[1:]:
                adv_sum = adv_sum + term
            shared = model.shared_parameters()
            audit = float(math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                                        for g in grad(adv_sum * self.cfg.adv_weight, shared))))
        backward(total)
        self.optimizer.step(model.parameters(), lr)
        if not np.isfinite(total.item()):
            raise NumericError(f"loss diverged to {total.item()}")
        return StepResult(total.item(), clean.item(), [t.item() for t in adv_terms],
                          dict(model.branch_touches()), audit)


def make_batches(windows: list[FeatureWindow], batch_size: int, rng: np.random.Generator) -> list[list[FeatureWindow]]:
    """Datasource-homogeneous batches: shuffle within each source, chunk, shuffle batch order."""
    by_source: dict[int, list[FeatureWindow]] = {}
    for w in windows:
        by_source.setdefault(w.tag.source, []).append(w)
    batches = []
    for source in sorted(by_source):
        group = by_source[source]
        order = rng.permutation(len(group))
        for i in range(0, len(group), batch_size):
            batches.append([group[j] for j in order[i : i + batch_size]])
    return [batches[i] for i in rng.permutation(len(batches))]


def steps_per_epoch(counts_per_source: list[int], batch_size: int) -> int:
    return sum(math.ceil(c / batch_size) for c in counts_per_source)


@dataclass
class TrainReport:
    strategy: str
    epoch_loss: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    touches: list[dict[int, int]] = field(default_factory=list)
    adv_grad_norms: list[float] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)


def fit(model: Model, epoch_windows: Callable[[int], list[FeatureWindow]], cfg: TrainConfig,
        num_datasources: int, out_dir=None, report_file=None,
        on_epoch_end: Callable[[int, Model], dict | None] | None = None) -> TrainReport:
    """Train for ``cfg.epochs`` epochs.

    ``epoch_windows(e)`` returns the tagged windows of epoch ``e``. When
    ``out_dir`` is set a checkpoint is written after every epoch; the last
    one is flagged final in its header and copied to ``final.kwsc``.
    ``report_file`` receives one JSON line per step.
    """
    trainer = Trainer(model, cfg, num_datasources)
    report = TrainReport(cfg.strategy)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    first = epoch_windows(0)
    counts = [sum(1 for w in first if w.tag.source == s) for s in range(num_datasources)]
    total_steps = cfg.epochs * steps_per_epoch(counts, cfg.batch_size)
    sink = open(report_file, "w") if report_file is not None else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            windows = first if epoch == 0 else epoch_windows(epoch)
            rng = np.random.default_rng([cfg.seed, epoch, 7])
            losses = []
            for batch in make_batches(windows, cfg.batch_size, rng):
                lr = cosine_lr(step, total_steps, cfg.base_lr)
                res = trainer.train_step(batch, lr)
                losses.append(res.loss)
                report.lr_trace.append(lr)
                report.step_losses.append(res.loss)
                report.touches.append(res.touched)
                if res.adv_shared_grad_norm is not None:
                    report.adv_grad_norms.append(res.adv_shared_grad_norm)
                if sink is not None:
                    sink.write(json.dumps({"epoch": epoch, "step": step, "lr": lr, "loss": res.loss,
                                           "clean_loss": res.clean_loss, "strategy": cfg.strategy,
                                           "source": batch[0].tag.source,
                                           "branches": sorted(res.touched)}) + "\n")
                step += 1
            report.epoch_loss.append(float(np.mean(losses)))
            extra = on_epoch_end(epoch, model) if on_epoch_end else None
            if extra:
                report.validation.append({"epoch": epoch, **extra})
            log.info("epoch %d loss %.4f %s", epoch, report.epoch_loss[-1], extra or "")
            if out is not None:
                final = epoch == cfg.epochs - 1
                path = out / f"epoch_{epoch + 1:02d}.kwsc"
                save_checkpoint(model, path, {"epoch": epoch + 1, "final": final, "strategy": cfg.strategy})
                report.checkpoints.append(str(path))
                if final:
                    (out / "final.kwsc").write_bytes(path.read_bytes())
    finally:
        if sink is not None:
            sink.close()
    return report
