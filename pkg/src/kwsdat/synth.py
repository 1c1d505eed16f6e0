"""Synthetic corpus laid out like Speech Commands V1.

Every word is a fixed sequence of harmonic tone segments; each clip varies
the speaker pitch, onset, duration, loudness and adds a little hiss. The
``_background_noise_`` folder gets long recordings of several noise colours.
Useful for smoke runs and tests where the real corpus is not available.

    python -m kwsdat.synth OUT_DIR [--clips-per-word N]
"""

from __future__ import annotations

import argparse
import hashlib
import re
from pathlib import Path

import numpy as np

from .frontend import SAMPLE_RATE, write_wav

DEFAULT_WORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go", "bed", "cat")
NOISES = ("white", "pink", "brown", "hum", "babble")
_MAX_CLIPS_PER_SPEAKER = 2**27 - 1


def which_set(filename: str, validation_pct: float = 10.0, testing_pct: float = 10.0) -> str:
    """Speaker-hash split assignment used by the original corpus."""
    speaker = re.sub(r"_nohash_.*$", "", Path(filename).name)
    h = int(hashlib.sha1(speaker.encode()).hexdigest(), 16)
    pct = (h % (_MAX_CLIPS_PER_SPEAKER + 1)) * (100.0 / _MAX_CLIPS_PER_SPEAKER)
    if pct < validation_pct:
        return "valid"
    if pct < validation_pct + testing_pct:
        return "test"
    return "train"


def word_template(word: str) -> list[tuple[float, float]]:
    """(frequency Hz, relative duration) segments, fixed per word."""
    seed = int(hashlib.sha1(word.encode()).hexdigest()[:8], 16)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    freqs = rng.uniform(250.0, 2500.0, size=n)
    durs = rng.uniform(0.5, 1.5, size=n)
    return list(zip(freqs.tolist(), (durs / durs.sum()).tolist()))


def synth_word(word: str, rng: np.random.Generator, length: int = SAMPLE_RATE) -> np.ndarray:
    pitch = rng.uniform(0.9, 1.1)
    dur = int(rng.uniform(0.4, 0.6) * SAMPLE_RATE)
    onset = int(rng.integers(0, length - dur))
    amp = rng.uniform(0.1, 0.4)
    out = np.zeros(length)
    pos = onset
    for freq, frac in word_template(word):
        n = max(int(frac * dur), 1)
        t = np.arange(n) / SAMPLE_RATE
        f = freq * pitch
        seg = np.sin(2 * np.pi * f * t) + 0.5 * np.sin(2 * np.pi * 2 * f * t + rng.uniform(0, np.pi))
        out[pos : pos + n] += amp * np.hanning(n) * seg / 1.5
        pos += n
    out += rng.normal(0.0, amp * 10 ** (-rng.uniform(25, 40) / 20), size=length)
    return np.clip(out, -1.0, 1.0 - 1.0 / 32768)


def synth_noise(kind: str, rng: np.random.Generator, seconds: float = 10.0) -> np.ndarray:
    n = int(seconds * SAMPLE_RATE)
    white = rng.normal(size=n)
    if kind == "white":
        x = white
    elif kind == "pink":
        spec = np.fft.rfft(white)
        spec[1:] /= np.sqrt(np.arange(1, len(spec)))
        x = np.fft.irfft(spec, n)
    elif kind == "brown":
        x = np.cumsum(white)
        x -= np.convolve(x, np.ones(801) / 801, mode="same")
    elif kind == "hum":
        t = np.arange(n) / SAMPLE_RATE
        x = sum(np.sin(2 * np.pi * 50 * k * t) / k for k in range(1, 8)) + 0.3 * white
    elif kind == "babble":
        t = np.arange(n) / SAMPLE_RATE
        x = 0.2 * white
        for _ in range(6):
            f = rng.uniform(150, 1500)
            env = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1, 4) * t + rng.uniform(0, 2 * np.pi))
            x = x + env * np.sin(2 * np.pi * f * t)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return 0.3 * x / np.max(np.abs(x))


def make_synthetic_gsc(root, words=DEFAULT_WORDS, clips_per_word: int = 40, seed: int = 0,
                       noises=NOISES, noise_seconds: float = 10.0) -> Path:
    """Write a Speech Commands shaped directory tree under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    valid, test = [], []
    for w_i, word in enumerate(words):
        folder = root / word
        folder.mkdir(exist_ok=True)
        for i in range(clips_per_word):
            rng = np.random.default_rng([seed, w_i, i])
            speaker = f"{int(rng.integers(2**32)):08x}"
            name = f"{speaker}_nohash_0.wav"
            write_wav(folder / name, synth_word(word, rng))
            split = which_set(name)
            if split == "valid":
                valid.append(f"{word}/{name}")
            elif split == "test":
                test.append(f"{word}/{name}")
    (root / "validation_list.txt").write_text("".join(p + "\n" for p in sorted(valid)))
    (root / "testing_list.txt").write_text("".join(p + "\n" for p in sorted(test)))
    bg = root / "_background_noise_"
    bg.mkdir(exist_ok=True)
    for k, kind in enumerate(noises):
        write_wav(bg / f"{kind}_noise.wav", synth_noise(kind, np.random.default_rng([seed, 99, k]), noise_seconds))
    return root


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="python -m kwsdat.synth", description="write a synthetic GSC-layout corpus")
    ap.add_argument("out_dir")
    ap.add_argument("--clips-per-word", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--words", nargs="+", default=list(DEFAULT_WORDS))
    args = ap.parse_args(argv)
    make_synthetic_gsc(args.out_dir, args.words, args.clips_per_word, args.seed)


if __name__ == "__main__":
    main()
