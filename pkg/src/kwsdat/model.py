"""MN7-45: a MobileNetV2-style keyword spotting network with optional SimAM.

Layer stack (C x H x W = channels x frames x mel bins)::

    layer0  conv 3x3, 1 -> 45, stride 2, BN, ReLU6
    layer1-7  bottleneck blocks, t=6, n=45, strides 1 2 2 2 1 2 1
    layer8  conv 1x1, 45 -> 1280, BN, ReLU6
            global average pool
    layer9  conv 1x1, 1280 -> num_classes  (logits)

Every normalization layer is a :class:`~kwsdat.disnorm.BranchSet`, so the
same network runs plain, disentangled or datasource-aware training depending
only on how many branches it is built with and how batches are tagged.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ops
from .disnorm import BranchSet
from .errors import ConfigError, FormatError, IntegrityError, VersionError
from .tensor import Function, Tensor


@dataclass(frozen=True)
class BlockSpec:
    t: int  # expansion factor
    n: int  # output channels
    s: int  # stride

    def __post_init__(self):
        if self.t < 1 or self.s not in (1, 2) or self.n < 1:
            raise ConfigError(f"invalid bottleneck spec t={self.t} n={self.n} s={self.s}")


MN7_45_BLOCKS = tuple(BlockSpec(6, 45, s) for s in (1, 2, 2, 2, 1, 2, 1))


@dataclass
class ModelConfig:
    blocks: list[BlockSpec] = field(default_factory=lambda: list(MN7_45_BLOCKS))
    stem_channels: int = 45
    last_channels: int = 1280
    num_classes: int = 11
    with_simam: bool = False
    simam_lambda: float = 1e-4
    input_shape: tuple[int, int] = (100, 40)
    num_branches: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [[b.t, b.n, b.s] for b in self.blocks]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "model")
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = [b if isinstance(b, BlockSpec) else BlockSpec(*b) for b in d["blocks"]]
        if "input_shape" in d:
            d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


# -- SimAM -----------------------------------------------------------------------


class SimAM(Function):
    # z = 1/e* = (x - mu)^2 / (4 (var + lam)) + 1/2 ; y = sigmoid(z) * x
    def forward(self, x, lam=1e-4):
        n = x.shape[2] * x.shape[3]
        mu = x.mean(axis=(2, 3), keepdims=True)
        d = x - mu
        d2 = d * d
        a = d2.sum(axis=(2, 3), keepdims=True) / n + x.dtype.type(lam)
        z = d2 / (4 * a) + x.dtype.type(0.5)
        s = ops._sigmoid(z)
        self.x, self.d, self.a, self.s, self.n = x, d, a, s, n
        return s * x

    def backward(self, grad, needs):
        x, d, a, s, n = self.x, self.d, self.a, self.s, self.n
        q = grad * x * s * (1 - s)  # dL/dz
        dl_da = -(q * d * d).sum(axis=(2, 3), keepdims=True) / (4 * a * a)
        dl_dd = q * d / (2 * a) + dl_da * (2.0 / n) * d
        dl_dd = dl_dd - dl_dd.mean(axis=(2, 3), keepdims=True)
        return (grad * s + dl_dd,)


def simam(x: Tensor, lam: float = 1e-4) -> Tensor:
    """Parameter-free attention: scale each neuron by sigmoid of its inverse minimal energy.

    Channel statistics are the mean and population variance over all H*W
    positions, the neuron itself included.
    """
    if x.ndim == 3:
        return SimAM.apply(x.reshape((1,) + x.shape), lam=lam).reshape(x.shape)
    return SimAM.apply(x, lam=lam)


# -- network ---------------------------------------------------------------------


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Bottleneck:
    """Pointwise expand -> depthwise 3x3 -> [SimAM] -> pointwise linear project."""

    def __init__(self, index: int, m: int, spec: BlockSpec, cfg: ModelConfig, rng, dtype):
        self.index, self.m, self.spec = index, m, spec
        hidden = spec.t * m
        self.hidden = hidden
        self.residual = spec.s == 1 and m == spec.n
        self.with_simam = cfg.with_simam
        self.simam_lambda = cfg.simam_lambda
        k = cfg.num_branches
        self.expand = _kaiming_uniform(rng, (hidden, m, 1, 1), m, dtype)
        self.expand_bn = BranchSet(hidden, k, dtype=dtype)
        self.depthwise = _kaiming_uniform(rng, (hidden, 3, 3), 9, dtype)
        self.depthwise_bn = BranchSet(hidden, k, dtype=dtype)
        self.project = _kaiming_uniform(rng, (spec.n, hidden, 1, 1), hidden, dtype)
        self.project_bn = BranchSet(spec.n, k, dtype=dtype)

    def weights(self) -> dict[str, Tensor]:
        p = f"layer{self.index}"
        return {f"{p}.expand.weight": self.expand, f"{p}.depthwise.weight": self.depthwise,
                f"{p}.project.weight": self.project}

    def norms(self) -> dict[str, BranchSet]:
        p = f"layer{self.index}"
        return {f"{p}.expand_bn": self.expand_bn, f"{p}.depthwise_bn": self.depthwise_bn,
                f"{p}.project_bn": self.project_bn}

    def forward(self, x: Tensor, tag=0, mode="train", update_stats=True, taps=None) -> Tensor:
        def tap(role, t):
            if taps is not None:
                taps[f"layer{self.index}.{role}"] = t.data
            return t

        h = ops.conv2d(x, self.expand)
        h = ops.relu6(self.expand_bn(tap("expand", h), tag, mode, update_stats))
        h = tap("depthwise", ops.depthwise_conv2d(h, self.depthwise, stride=self.spec.s, padding=1))
        if self.with_simam:
            h = simam(h, self.simam_lambda)
        h = tap("attention", h)
        h = ops.relu6(self.depthwise_bn(h, tag, mode, update_stats))
        h = self.project_bn(ops.conv2d(h, self.project), tag, mode, update_stats)
        if self.residual:
            h = h + x
        return tap("out", h)

    __call__ = forward


class Model:
    """MN7-45 with branch-aware normalization."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        k = cfg.num_branches
        c0 = cfg.stem_channels
        self.stem = _kaiming_uniform(rng, (c0, 1, 3, 3), 9, dtype)
        self.stem_bn = BranchSet(c0, k, dtype=dtype)
        self.blocks: list[Bottleneck] = []
        m = c0
        for i, spec in enumerate(cfg.blocks, start=1):
            self.blocks.append(Bottleneck(i, m, spec, cfg, rng, dtype))
            m = spec.n
        self.last = _kaiming_uniform(rng, (cfg.last_channels, m, 1, 1), m, dtype)
        self.last_bn = BranchSet(cfg.last_channels, k, dtype=dtype)
        self.head = _kaiming_uniform(rng, (cfg.num_classes, cfg.last_channels, 1, 1), cfg.last_channels, dtype)
        self._last_index = len(self.blocks) + 1

    # -- naming ------------------------------------------------------------------
    def named_weights(self) -> dict[str, Tensor]:
        """Convolution weights, in layer order."""
        out = {"layer0.conv.weight": self.stem}
        for b in self.blocks:
            out.update(b.weights())
        out[f"layer{self._last_index}.conv.weight"] = self.last
        out[f"layer{self._last_index + 1}.head.weight"] = self.head
        return out

    def named_norms(self) -> dict[str, BranchSet]:
        out = {"layer0.bn": self.stem_bn}
        for b in self.blocks:
            out.update(b.norms())
        out[f"layer{self._last_index}.bn"] = self.last_bn
        return out

    def shared_parameters(self) -> list[Tensor]:
        return list(self.named_weights().values())

    def parameters(self) -> list[Tensor]:
        params = self.shared_parameters()
        for bn in self.named_norms().values():
            params.extend(bn.parameters())
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @property
    def num_branches(self) -> int:
        return self.cfg.num_branches

    def parameter_counts(self) -> dict[str, int]:
        """Convolution weight count per layer (normalization parameters excluded)."""
        counts = {"layer0": self.stem.size}
        for b in self.blocks:
            counts[f"layer{b.index}"] = sum(w.size for w in b.weights().values())
        counts[f"layer{self._last_index}"] = self.last.size
        counts[f"layer{self._last_index + 1}"] = self.head.size
        return counts

    def num_conv_parameters(self) -> int:
        return sum(self.parameter_counts().values())

    def branch_touches(self) -> dict[int, int]:
        total: dict[int, int] = {}
        for bn in self.named_norms().values():
            for k, v in bn.touches.items():
                total[k] = total.get(k, 0) + v
        return total

    def reset_touches(self) -> None:
        for bn in self.named_norms().values():
            bn.touches.clear()

    # -- forward -------------------------------------------------------------------
    def forward(self, x, tag=0, mode: str = "train", update_stats: bool = True, taps=None) -> Tensor:
        """Map feature windows to logits.

        ``x`` is N x T x F, N x 1 x T x F, or a single T x F window; the result
        is N x num_classes (or num_classes for a single window).
        """
        single = False
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 2:
            x, single = x.reshape(1, 1, *x.shape), True
        elif x.ndim == 3:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        h = ops.conv2d(x, self.stem, stride=2, padding=1)
        h = ops.relu6(self.stem_bn(h, tag, mode, update_stats))
        for block in self.blocks:
            h = block(h, tag, mode, update_stats, taps)
        h = ops.relu6(self.last_bn(ops.conv2d(h, self.last), tag, mode, update_stats))
        h = ops.global_avg_pool(h)
        logits = ops.conv2d(h, self.head)
        logits = logits.reshape(logits.shape[0], self.cfg.num_classes)
        return logits.reshape(self.cfg.num_classes) if single else logits

    __call__ = forward

    # -- state -----------------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: w.data for name, w in self.named_weights().items()}
        for name, bn in self.named_norms().items():
            for k, br in enumerate(bn.branches):
                p = f"{name}.branch{k}"
                state[f"{p}.gamma"] = br.gamma.data
                state[f"{p}.beta"] = br.beta.data
                state[f"{p}.running_mean"] = br.running_mean
                state[f"{p}.running_var"] = br.running_var
                state[f"{p}.update_count"] = np.array([br.update_count], dtype=np.float32)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = [k for k in expected if k not in state]
        if missing:
            raise IntegrityError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]}")
        for name, arr in expected.items():
            if state[name].shape != arr.shape:
                raise IntegrityError(f"tensor {name} has shape {state[name].shape}, expected {arr.shape}")
        for name, w in self.named_weights().items():
            w.data = state[name].astype(self.dtype, copy=True)
        for name, bn in self.named_norms().items():
            for k, br in enumerate(bn.branches):
                p = f"{name}.branch{k}"
                br.gamma.data = state[f"{p}.gamma"].astype(self.dtype, copy=True)
                br.beta.data = state[f"{p}.beta"].astype(self.dtype, copy=True)
                br.running_mean = state[f"{p}.running_mean"].astype(self.dtype, copy=True)
                br.running_var = state[f"{p}.running_var"].astype(self.dtype, copy=True)
                br.update_count = int(state[f"{p}.update_count"][0])


def build_model(cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    return Model(cfg or ModelConfig(), seed=seed, dtype=dtype)


def bottleneck_forward(x: Tensor, block: Bottleneck, tag=0, mode="train") -> Tensor:
    return block(x, tag, mode)


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"KWSC"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write config and every tensor (weights and all branch statistics) as float32.

    Layout: magic, u32 version, u32 header length, JSON header, u32 tensor
    count, then per tensor u16 name length, name, u8 ndim, u32 dims, float32
    little-endian data; a trailing CRC32 covers everything before it.
    """
    header = json.dumps({"model": model.cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    state = model.state_dict()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
             struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint file into (header, tensor table)."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a kwsdat checkpoint")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except ValueError as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        nlen, ndim = r.unpack("<HB")
        name = r.take(nlen).decode()
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(buf[:body_end]) or r.pos != len(buf):
        raise IntegrityError(f"{path}: checksum mismatch")
    return header, state


def load_checkpoint(path, dtype=np.float32) -> Model:
    header, state = read_checkpoint(path)
    model = Model(ModelConfig.from_dict(header["model"]), dtype=dtype)
    model.load_state_dict(state)
    return model
