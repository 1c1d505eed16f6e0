"""Batch normalization with several parallel branches selected by datasource tag.

A :class:`BranchSet` holds K independent sets of affine parameters and running
statistics. Training forwards normalize with the batch's own statistics and
touch only the branch named by the batch's tag; evaluation always reads
branch 0, the main branch for clean data.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ContractError, RoutingError
from .tensor import Function, Tensor

MOMENTUM = 0.1
EPSILON = 1e-5


class Strategy(str, enum.Enum):
    NONE = "NONE"  # plain training, no adversaries
    AT = "AT"
    DAT = "DAT"
    FG_DAT = "FG_DAT"
    DA_DAT = "DA_DAT"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ContractError(f"unknown strategy {value!r}; expected one of {[s.value for s in cls]}") from None


@dataclass(frozen=True)
class DatasourceTag:
    """Identity of one stream of training data.

    ``id`` is the normalization branch the stream is routed to in a plan, or
    the datasource index when the tag is attached to a feature window.
    """

    id: int
    kind: str = "clean"  # clean | augmented | adversarial
    source: int = 0
    level: int | None = None
    parent: int | None = None

    def __str__(self) -> str:
        if self.kind == "adversarial":
            return f"Adv{self.source + 1}" + (f"@{self.level}" if self.level else "")
        return f"DS{self.source + 1}"

    @classmethod
    def clean(cls) -> "DatasourceTag":
        return cls(0, "clean", 0)

    @classmethod
    def augmented(cls, source: int) -> "DatasourceTag":
        return cls(source, "augmented", source)

    @classmethod
    def adversarial(cls, parent: "DatasourceTag", level: int = 0, id: int | None = None) -> "DatasourceTag":
        return cls(parent.id if id is None else id, "adversarial", parent.source, level, parent.id)


def datasource_tag(source: int) -> DatasourceTag:
    return DatasourceTag.clean() if source == 0 else DatasourceTag.augmented(source)


@dataclass
class BranchPlan:
    """Branch layout for one training strategy plus the routing rules."""

    strategy: Strategy
    num_datasources: int
    num_levels: int
    tags: list[DatasourceTag]
    collapsed: bool = False  # ablation: every tag routes to branch 0, branch count unchanged

    def __len__(self) -> int:
        return len(self.tags)

    def __iter__(self):
        return iter(self.tags)

    def __getitem__(self, i) -> DatasourceTag:
        return self.tags[i]

    @property
    def num_branches(self) -> int:
        return len(self.tags)

    def _check_source(self, source: int) -> None:
        if not 0 <= source < self.num_datasources:
            raise RoutingError(f"datasource {source} outside plan with {self.num_datasources} datasources")

    def original_branch(self, source: int) -> int:
        self._check_source(source)
        if self.strategy is Strategy.DA_DAT and not self.collapsed:
            return source
        return 0

    def adversarial_branch(self, source: int, level: int = 0) -> int:
        self._check_source(source)
        s = self.strategy
        if s in (Strategy.NONE, Strategy.AT) or self.collapsed:
            return 0
        if s is Strategy.DAT:
            return 1
        if s is Strategy.FG_DAT:
            if not 0 <= level < self.num_levels:
                raise RoutingError(f"perturbation level {level} outside plan with {self.num_levels} levels")
            return 1 + level
        return self.num_datasources + source

    def route(self, tag: DatasourceTag) -> int:
        """Branch index for a window tag (clean/augmented or adversarial)."""
        if tag.kind == "adversarial":
            return self.adversarial_branch(tag.source, tag.level or 0)
        return self.original_branch(tag.source)


def make_branch_plan(strategy, num_datasources: int = 1, num_levels: int = 1, collapsed: bool = False) -> BranchPlan:
    """Lay out normalization branches for ``strategy``.

    AT (and plain training) keep one branch; DAT adds one auxiliary branch for
    adversaries; FG_DAT one auxiliary branch per perturbation level; DA_DAT one
    main branch for clean data, one auxiliary branch per augmented datasource
    and one per datasource's adversaries. ``collapsed`` keeps the layout but
    sends everything to branch 0, which turns any strategy into plain AT.
    """
    strategy = Strategy.parse(strategy)
    if num_datasources < 1 or num_levels < 1:
        raise ContractError("num_datasources and num_levels must be positive")
    clean = DatasourceTag.clean()
    if strategy in (Strategy.NONE, Strategy.AT):
        tags = [clean]
    elif strategy is Strategy.DAT:
        tags = [clean, DatasourceTag.adversarial(clean, 0, id=1)]
    elif strategy is Strategy.FG_DAT:
        tags = [clean] + [DatasourceTag.adversarial(clean, lvl, id=1 + lvl) for lvl in range(num_levels)]
    else:
        sources = [datasource_tag(s) for s in range(num_datasources)]
        advs = [DatasourceTag.adversarial(t, 0, id=num_datasources + t.source) for t in sources]
        tags = sources + advs
    return BranchPlan(strategy, num_datasources, num_levels, tags, collapsed)


# -- normalization kernels ---------------------------------------------------------

_AXES = (0, 2, 3)


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


@numba.njit(cache=True)
def _bn_train_forward(x, gamma, beta, eps):
    n_, c_, h_, w_ = x.shape
    m = n_ * h_ * w_
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    mean = np.empty(c_, np.float64)
    var = np.empty(c_, np.float64)
    inv = np.empty(c_, x.dtype)
    for c in range(c_):
        acc = 0.0
        for n in range(n_):
            for h in range(h_):
                for w in range(w_):
                    acc += x[n, c, h, w]
        mu = acc / m
        acc = 0.0
        for n in range(n_):
            for h in range(h_):
                for w in range(w_):
                    d = x[n, c, h, w] - mu
                    acc += d * d
        v = acc / m
        mean[c], var[c] = mu, v
        iv = 1.0 / np.sqrt(v + eps)
        inv[c] = iv
        g, b = gamma[c], beta[c]
        for n in range(n_):
            for h in range(h_):
                for w in range(w_):
                    xh = (x[n, c, h, w] - mu) * iv
                    xhat[n, c, h, w] = xh
                    y[n, c, h, w] = xh * g + b
    return y, xhat, mean, var, inv


@numba.njit(cache=True)
def _bn_train_backward(grad, xhat, gamma, inv):
    n_, c_, h_, w_ = grad.shape
    m = n_ * h_ * w_
    gx = np.empty_like(grad)
    gsum = np.empty(c_, np.float64)
    gxsum = np.empty(c_, np.float64)
    for c in range(c_):
        a = 0.0
        b = 0.0
        for n in range(n_):
            for h in range(h_):
                for w in range(w_):
                    g = grad[n, c, h, w]
                    a += g
                    b += g * xhat[n, c, h, w]
        gsum[c], gxsum[c] = a, b
        scale = gamma[c] * inv[c]
        ma, mb = a / m, b / m
        for n in range(n_):
            for h in range(h_):
                for w in range(w_):
                    gx[n, c, h, w] = scale * (grad[n, c, h, w] - ma - xhat[n, c, h, w] * mb)
    return gx, gsum, gxsum


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, eps=EPSILON, stats=None):
        x = np.ascontiguousarray(x)
        y, self.xhat, mean, var, self.inv = _bn_train_forward(x, gamma, beta, eps)
        self.gamma = gamma
        if stats is not None:
            stats["mean"], stats["var"] = mean.astype(x.dtype), var.astype(x.dtype)
        return y

    def backward(self, grad, needs):
        gx, gsum, gxsum = _bn_train_backward(np.ascontiguousarray(grad), self.xhat, self.gamma, self.inv)
        dt = grad.dtype
        return (gx if needs[0] else None, gxsum.astype(dt) if needs[1] else None,
                gsum.astype(dt) if needs[2] else None)


class BatchNormEval(Function):
    def forward(self, x, gamma, beta, mean=None, var=None, eps=EPSILON):
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = (x - _per_channel(mean)) * _per_channel(inv)
        self.scale = gamma * inv
        return self.xhat * _per_channel(gamma) + _per_channel(beta)

    def backward(self, grad, needs):
        gx = grad * _per_channel(self.scale) if needs[0] else None
        gg = np.einsum("nchw,nchw->c", grad, self.xhat) if needs[1] else None
        gb = grad.sum(axis=_AXES) if needs[2] else None
        return gx, gg, gb


class Branch:
    """Affine parameters and running statistics of one normalization branch."""

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.update_count = 0


class BranchSet:
    """K parallel normalization branches over ``channels`` feature maps."""

    def __init__(self, channels: int, num_branches: int = 1, momentum: float = MOMENTUM,
                 epsilon: float = EPSILON, dtype=np.float32):
        if num_branches < 1:
            raise ContractError("a BranchSet needs at least one branch")
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.branches = [Branch(channels, dtype) for _ in range(num_branches)]
        self.touches: Counter = Counter()

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    def parameters(self) -> list[Tensor]:
        return [p for b in self.branches for p in (b.gamma, b.beta)]

    def _index(self, tag) -> int:
        k = tag.id if isinstance(tag, DatasourceTag) else int(tag)
        if not 0 <= k < len(self.branches):
            raise RoutingError(f"tag {k} has no branch (K={len(self.branches)})")
        return k

    def forward(self, x: Tensor, tag=0, mode: str = "train", update_stats: bool = True) -> Tensor:
        """Normalize ``x`` (N x C x H x W).

        ``mode='train'`` uses batch statistics and the tagged branch's
        gamma/beta; unless ``update_stats`` is False the tagged branch's running
        statistics move toward the batch statistics. ``mode='eval'`` ignores the
        tag and uses branch 0 throughout.
        """
        if mode == "eval":
            b = self.branches[0]
            return BatchNormEval.apply(x, b.gamma, b.beta, mean=b.running_mean, var=b.running_var,
                                       eps=self.epsilon)
        if mode != "train":
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        k = self._index(tag)
        b = self.branches[k]
        stats: dict = {}
        y = BatchNormTrain.apply(x, b.gamma, b.beta, eps=self.epsilon, stats=stats)
        self.touches[k] += 1
        if update_stats:
            mom = b.running_mean.dtype.type(self.momentum)
            b.running_mean = (1 - mom) * b.running_mean + mom * stats["mean"].astype(b.running_mean.dtype)
            b.running_var = (1 - mom) * b.running_var + mom * stats["var"].astype(b.running_var.dtype)
            b.update_count += 1
        return y

    __call__ = forward


def bn_forward(bn: BranchSet, x: Tensor, tag, mode: str = "train", update_stats: bool = True) -> Tensor:
    return bn.forward(x, tag, mode, update_stats)
