"""Google Speech Commands V1 ingestion.

The distributed ``validation_list.txt`` and ``testing_list.txt`` decide the
split of every word clip; everything else is training data. Ten words are
keywords (classes 0-9); all other words, plus 1 s slices of the background
noise recordings, form the final "unknown" class.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import Example
from .errors import DataError, FormatError, IntegrityError
from .frontend import SAMPLE_RATE, AudioClip, read_wav

KEYWORDS = ("up", "down", "left", "right", "yes", "no", "on", "off", "go", "stop")
UNKNOWN = "unknown"
BACKGROUND_DIR = "_background_noise_"
SPLITS = ("train", "valid", "test")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Utterance:
    path: str  # relative to the dataset root
    label: int
    offset: int = 0  # first sample
    length: int | None = None  # samples; None = whole file

    @property
    def uid(self) -> str:
        return self.path if self.length is None else f"{self.path}@{self.offset}"


@dataclass
class DatasetManifest:
    root: str
    labels: list[str]
    splits: dict[str, list[Utterance]]
    rejects: list[tuple[str, str]] = field(default_factory=list)

    @property
    def unknown_index(self) -> int:
        return self.labels.index(UNKNOWN)

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}

    def to_json(self) -> str:
        return json.dumps({
            "version": MANIFEST_VERSION,
            "root": self.root,
            "labels": self.labels,
            "splits": {k: [asdict(u) for u in v] for k, v in self.splits.items()},
            "rejects": [list(r) for r in self.rejects],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
            if d.get("version") != MANIFEST_VERSION:
                raise FormatError(f"manifest version {d.get('version')} unsupported")
            splits = {k: [Utterance(**u) for u in v] for k, v in d["splits"].items()}
            return cls(d["root"], list(d["labels"]), splits, [tuple(r) for r in d.get("rejects", [])])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def _read_list(root: Path, name: str) -> set[str]:
    path = root / name
    if not path.is_file():
        raise FormatError(f"{root} is missing {name}")
    return {line.strip() for line in path.read_text().splitlines() if line.strip()}


def _background_split(i: int) -> str:
    # 8:1:1 by slice index
    return "valid" if i % 10 == 8 else "test" if i % 10 == 9 else "train"


def ingest_gsc(dataset_dir, keywords=KEYWORDS, unknown_words=None, include_background: bool = True,
               verify: bool = True) -> DatasetManifest:
    """Build the split/label manifest for a Speech Commands V1 directory.

    ``unknown_words`` restricts which non-keyword folders feed "unknown"
    (default: all of them). With ``verify`` every file is decoded and
    failures go to ``rejects`` instead of a split.
    """
    root = Path(dataset_dir)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    valid_list = _read_list(root, "validation_list.txt")
    test_list = _read_list(root, "testing_list.txt")
    labels = list(keywords) + [UNKNOWN]
    unk = len(keywords)
    splits: dict[str, list[Utterance]] = {s: [] for s in SPLITS}
    rejects: list[tuple[str, str]] = []

    folders = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("_"))
    for folder in folders:
        word = folder.name
        if word in keywords:
            label = keywords.index(word)
        elif unknown_words is None or word in unknown_words:
            label = unk
        else:
            continue
        for wav in sorted(folder.glob("*.wav")):
            rel = f"{word}/{wav.name}"
            if verify:
                try:
                    read_wav(wav)
                except DataError as exc:
                    rejects.append((rel, str(exc)))
                    continue
            split = "test" if rel in test_list else "valid" if rel in valid_list else "train"
            splits[split].append(Utterance(rel, label))

    bg = root / BACKGROUND_DIR
    if include_background and bg.is_dir():
        for wav in sorted(bg.glob("*.wav")):
            rel = f"{BACKGROUND_DIR}/{wav.name}"
            try:
                n = len(read_wav(wav))
            except DataError as exc:
                rejects.append((rel, str(exc)))
                continue
            for i in range(n // SAMPLE_RATE):
                splits[_background_split(i)].append(Utterance(rel, unk, i * SAMPLE_RATE, SAMPLE_RATE))

    for s in SPLITS:
        splits[s].sort(key=lambda u: (u.path, u.offset))
    return DatasetManifest(str(root), labels, splits, rejects)


def subsample(items: list, limit: int | None, seed: int = 0) -> list:
    """Deterministic random subset of at most ``limit`` items, original order kept."""
    if limit is None or len(items) <= limit:
        return list(items)
    keep = np.sort(np.random.default_rng([seed, 4242]).choice(len(items), size=limit, replace=False))
    return [items[i] for i in keep]


def fit_length(samples: np.ndarray, length: int = SAMPLE_RATE) -> np.ndarray:
    """Zero-pad on the right or crop to exactly ``length`` samples."""
    if len(samples) >= length:
        return samples[:length]
    return np.concatenate([samples, np.zeros(length - len(samples))])


def load_utterance(root, utt: Utterance, length: int = SAMPLE_RATE) -> AudioClip:
    path = Path(root) / utt.path
    if not path.is_file():
        raise IntegrityError(f"manifest entry {utt.path} not found under {root}")
    samples = read_wav(path).samples
    if utt.length is not None:
        samples = samples[utt.offset : utt.offset + utt.length]
    return AudioClip(fit_length(samples, length))


def load_examples(manifest: DatasetManifest, split: str, limit: int | None = None, seed: int = 0,
                  length: int = SAMPLE_RATE) -> list[Example]:
    utts = subsample(manifest.splits[split], limit, seed)
    return [Example(u.uid, load_utterance(manifest.root, u, length), u.label) for u in utts]


def load_noise_corpus(dataset_dir, names=None) -> list[AudioClip]:
    """Background-noise recordings, optionally restricted to file ``names``."""
    bg = Path(dataset_dir) / BACKGROUND_DIR
    if not bg.is_dir():
        return []
    files = sorted(bg.glob("*.wav"))
    if names is not None:
        files = [f for f in files if f.name in set(names)]
    return [read_wav(f) for f in files]
