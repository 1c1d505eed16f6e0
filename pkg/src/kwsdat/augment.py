"""Multi-datasource training stream: clean, noise-mixed and SpecAugmented windows.

Each clean utterance yields one window per configured datasource per epoch:

    DS1  clean log-Mel features
    DS2  features of the waveform mixed with background noise at a random SNR
    DS3  DS2's features with SpecAugment time/frequency masks

The random draws for an utterance depend only on (seed, epoch, utterance
index), so an epoch's stream is reproducible and can be built in parallel.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .disnorm import DatasourceTag, datasource_tag
from .errors import ConfigError, ContractError
from .frontend import AudioClip, FrontendConfig, logmel

DATASOURCES = ("clean", "noisy", "specaug")
_CLIP_MAX = 1.0 - 1.0 / 32768


@dataclass
class FeatureWindow:
    features: np.ndarray  # T x F
    label: int
    tag: DatasourceTag = field(default_factory=DatasourceTag.clean)
    uid: str = ""


@dataclass
class Example:
    uid: str
    clip: AudioClip
    label: int


@dataclass
class SpecAugmentConfig:
    num_time_masks: int = 2
    max_time_width: int = 20
    num_freq_masks: int = 2
    max_freq_width: int = 7


@dataclass
class AugmentPlan:
    snr_range_db: tuple[float, float] = (0.0, 20.0)
    noise_corpus: list[AudioClip] = field(default_factory=list)
    specaug: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    rng_seed: int = 0
    datasources: tuple[str, ...] = DATASOURCES

    def __post_init__(self):
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ConfigError(f"snr range {self.snr_range_db} has low > high", "augment.snr_range_db")
        unknown = [d for d in self.datasources if d not in DATASOURCES]
        if unknown:
            raise ConfigError(f"unknown datasources {unknown}", "augment.datasources")
        if not self.datasources or self.datasources[0] != "clean":
            raise ConfigError("the first datasource must be 'clean' (it owns the main branch)",
                              "augment.datasources")

    @property
    def needs_noise(self) -> bool:
        return any(d in ("noisy", "specaug") for d in self.datasources)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def fit_noise(noise: np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    """Crop ``noise`` to ``length`` samples starting at ``offset``, looping if it is short."""
    if len(noise) == 0:
        raise ContractError("empty noise clip")
    idx = (offset + np.arange(length)) % len(noise)
    return noise[idx]


def scaled_noise(clean: AudioClip, noise: AudioClip, snr_db: float, offset: int = 0) -> np.ndarray:
    """The noise segment, scaled so clean-to-noise power ratio is ``snr_db``."""
    seg = fit_noise(noise.samples, len(clean), offset)
    rc, rn = _rms(clean.samples), _rms(seg)
    if rc == 0:
        raise ContractError("clean clip has zero energy")
    if rn == 0:
        raise ContractError("noise clip has zero energy")
    return seg * (rc / (rn * 10.0 ** (snr_db / 20.0)))


def mix_noise(clean: AudioClip, noise: AudioClip, snr_db: float, offset: int = 0) -> AudioClip:
    """Add noise at the requested SNR; the sum is clipped to [-1, 1)."""
    mixed = clean.samples + scaled_noise(clean, noise, snr_db, offset)
    return AudioClip(np.clip(mixed, -1.0, _CLIP_MAX))


def spec_augment(features: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero random time stripes (rows) and frequency stripes (columns)."""
    t, f = features.shape
    if cfg.max_time_width > t or cfg.max_freq_width > f:
        raise ContractError(f"mask widths ({cfg.max_time_width}, {cfg.max_freq_width}) exceed features {t}x{f}")
    out = features.copy()
    for _ in range(cfg.num_time_masks):
        w = int(rng.integers(0, cfg.max_time_width + 1))
        start = int(rng.integers(0, t - w + 1))
        out[start : start + w, :] = 0
    for _ in range(cfg.num_freq_masks):
        w = int(rng.integers(0, cfg.max_freq_width + 1))
        start = int(rng.integers(0, f - w + 1))
        out[:, start : start + w] = 0
    return out


def example_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def _augment_one(ex: Example, index: int, epoch: int, plan: AugmentPlan, frontend: FrontendConfig,
                 clean_features: np.ndarray | None) -> list[FeatureWindow]:
    rng = example_rng(plan.rng_seed, epoch, index)
    feats = clean_features if clean_features is not None else logmel(ex.clip, frontend)
    out = []
    noisy_feats = None
    if plan.needs_noise:
        noise = plan.noise_corpus[int(rng.integers(len(plan.noise_corpus)))]
        offset = int(rng.integers(len(noise)))
        snr = float(rng.uniform(*plan.snr_range_db))
        noisy_feats = logmel(mix_noise(ex.clip, noise, snr, offset), frontend)
    for source, name in enumerate(plan.datasources):
        if name == "clean":
            f = feats
        elif name == "noisy":
            f = noisy_feats
        else:
            f = spec_augment(noisy_feats, plan.specaug, rng)
        out.append(FeatureWindow(f, ex.label, datasource_tag(source), ex.uid))
    return out


_worker_state: dict = {}


def _init_worker(plan, frontend):
    _worker_state["plan"], _worker_state["frontend"] = plan, frontend


def _worker_task(args):
    ex, index, epoch, feats = args
    return _augment_one(ex, index, epoch, _worker_state["plan"], _worker_state["frontend"], feats)


def build_datasources(clean_set: list[Example], plan: AugmentPlan, epoch: int = 0,
                      frontend: FrontendConfig | None = None,
                      clean_features: list[np.ndarray] | None = None,
                      workers: int = 1) -> list[FeatureWindow]:
    """All tagged windows of one epoch, grouped by datasource in example order."""
    if not clean_set:
        raise ContractError("clean set is empty")
    if plan.needs_noise and not plan.noise_corpus:
        raise ConfigError("noise augmentation requested but the noise corpus is empty", "augment.noise_dir")
    frontend = frontend or FrontendConfig()
    feats = clean_features or [None] * len(clean_set)
    tasks = [(ex, i, epoch, feats[i]) for i, ex in enumerate(clean_set)]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(plan, frontend)) as pool:
            per_example = list(pool.map(_worker_task, tasks, chunksize=16))
    else:
        per_example = [_augment_one(ex, i, epoch, plan, frontend, f) for ex, i, epoch, f in tasks]
    n_src = len(plan.datasources)
    return [windows[s] for s in range(n_src) for windows in per_example]


def distort_test_set(clips: list[Example], noise_corpus: list[AudioClip], snr_db: float, seed: int = 0,
                     frontend: FrontendConfig | None = None) -> list[FeatureWindow]:
    """Evaluation copy of ``clips`` mixed at a fixed SNR with (held-out) noises."""
    if not noise_corpus:
        raise ConfigError("no noise clips for test distortion", "eval.noise")
    out = []
    for i, ex in enumerate(clips):
        rng = np.random.default_rng([seed, 1_000_003, i])  # stream disjoint from training epochs
        noise = noise_corpus[int(rng.integers(len(noise_corpus)))]
        mixed = mix_noise(ex.clip, noise, snr_db, int(rng.integers(len(noise))))
        out.append(FeatureWindow(logmel(mixed, frontend), ex.label, DatasourceTag.clean(), ex.uid))
    return out
