"""Synthetic GRID-grammar clips, their on-disk format and batching.

Every character (including the space) owns a fixed smooth base pattern.
A sentence renders as a run of frames, 2-4 per character, with a short
linear crossfade into the next character. Confusable pairs share one base
pattern plus a small perturbation, which plays the role of visemes that
several phonemes map to.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import DataConfig, GrammarConfig, RenderConfig

MAGIC = b"VSEQ"
VERSION = 1
DTYPE_F32 = 1
MANIFEST = "manifest.tsv"
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Problem with a dataset on disk or with a sample that cannot be rendered."""


class FormatError(DataError):
    """Malformed frame file or manifest."""


class MissingFileError(DataError, FileNotFoundError):
    """Manifest points at a file that does not exist."""


@dataclass
class Sample:
    id: str
    frames: np.ndarray  # (C, T, H, W) float32
    transcript: str

    @property
    def length(self) -> int:
        return self.frames.shape[1]


# ----------------------------------------------------------------- grammar

def sample_sentence(grammar: GrammarConfig, rng: np.random.Generator) -> str:
    words = []
    for cat in grammar.categories():
        if not cat:
            raise ValueError("grammar word lists must be non-empty")
        words.append(cat[int(rng.integers(len(cat)))])
    return " ".join(words)


# --------------------------------------------------------------- rendering

def _smooth_field(rng: np.random.Generator, h: int, w: int, bumps: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    for _ in range(bumps):
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        sy, sx = rng.uniform(1.0, h / 3), rng.uniform(1.5, w / 3)
        amp = rng.uniform(-1.0, 1.0)
        out += amp * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    out -= out.mean()
    return out / (np.sqrt((out ** 2).mean()) + 1e-12)


def base_patterns(spec: RenderConfig, symbols: Iterable[str]) -> dict[str, np.ndarray]:
    """Per-character (C, H, W) patterns; fixed by ``spec.pattern_seed``."""
    rng = np.random.default_rng(spec.pattern_seed)
    pats = {}
    for ch in sorted(set(symbols)):
        pats[ch] = np.stack([_smooth_field(rng, spec.height, spec.width) for _ in range(spec.channels)])
    for a, b in spec.confusable_pairs:
        if a in pats and b in pats:
            noise = np.stack([_smooth_field(rng, spec.height, spec.width) for _ in range(spec.channels)])
            pats[b] = pats[a] + spec.confusable_scale * noise
    return pats


_PATTERN_CACHE: dict[tuple, dict[str, np.ndarray]] = {}


def _patterns_for(spec: RenderConfig) -> dict[str, np.ndarray]:
    key = (spec.height, spec.width, spec.channels, spec.pattern_seed,
           tuple(spec.confusable_pairs), spec.confusable_scale)
    if key not in _PATTERN_CACHE:
        _PATTERN_CACHE[key] = base_patterns(spec, "abcdefghijklmnopqrstuvwxyz ")
    return _PATTERN_CACHE[key]


def durations(n_chars: int, spec: RenderConfig, rng: np.random.Generator) -> np.ndarray:
    """Frames per character, shortened (longest first) until the clip fits ``max_frames``."""
    lo, hi = spec.min_frames_per_char, spec.max_frames_per_char
    if n_chars * lo > spec.max_frames:
        raise DataError(f"{n_chars} characters need at least {n_chars * lo} frames, max is {spec.max_frames}")
    d = rng.integers(lo, hi + 1, size=n_chars)
    excess = int(d.sum()) - spec.max_frames
    while excess > 0:
        i = int(np.argmax(d))
        d[i] -= 1
        excess -= 1
    return d


def render_frames(sentence: str, spec: RenderConfig, rng: np.random.Generator) -> np.ndarray:
    """(C, T, H, W) float32 clip, mean 0 and unit variance."""
    pats = _patterns_for(spec)
    missing = sorted(set(sentence) - set(pats))
    if missing:
        raise DataError(f"no pattern for character(s) {missing!r}")
    if not sentence:
        raise DataError("empty sentence")
    d = durations(len(sentence), spec, rng)
    frames = []
    for i, ch in enumerate(sentence):
        nxt = pats[sentence[i + 1]] if i + 1 < len(sentence) else None
        fade = min(spec.crossfade, int(d[i]) - 1) if nxt is not None else 0
        for k in range(int(d[i])):
            from_end = int(d[i]) - k  # 1 on the last frame
            if from_end <= fade:
                a = (fade - from_end + 1) / (fade + 1)
                frames.append((1 - a) * pats[ch] + a * nxt)
            else:
                frames.append(pats[ch])
    x = np.stack(frames, axis=1)
    if spec.noise > 0:
        x = x + spec.noise * rng.standard_normal(x.shape)
    x = x - x.mean()
    std = x.std()
    if std > 0:
        x = x / std
    return x.astype(np.float32)


def make_sample(index: int, base_seed: int, grammar: GrammarConfig, spec: RenderConfig) -> Sample:
    rng = np.random.default_rng(base_seed ^ index)
    text = sample_sentence(grammar, rng)
    try:
        frames = render_frames(text, spec, rng)
    except DataError as err:
        raise DataError(f"sample {index:05d}: {err}") from None
    return Sample(f"s{index:05d}", frames, text)


def split_indices(n: int, counts: Sequence[int], seed: int) -> list[np.ndarray]:
    """Disjoint, exhaustive random split of range(n) into the given sizes."""
    if sum(counts) != n or min(counts) < 0:
        raise ValueError(f"split sizes {counts} do not partition {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    edges = np.cumsum([0, *counts])
    return [np.sort(perm[a:b]) for a, b in zip(edges[:-1], edges[1:])]


def generate(data: DataConfig, grammar: GrammarConfig, spec: RenderConfig, seed: int) -> dict[str, list[Sample]]:
    counts = [data.n_train, data.n_val, data.n_test]
    parts = split_indices(sum(counts), counts, seed)
    return {name: [make_sample(int(i), seed, grammar, spec) for i in idx] for name, idx in zip(SPLITS, parts)}


# ----------------------------------------------------------------- file io

def write_vseq(path: str | Path, frames: np.ndarray) -> None:
    arr = np.ascontiguousarray(frames, dtype="<f4")
    header = MAGIC + struct.pack(f"<III{arr.ndim}I", VERSION, DTYPE_F32, arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_vseq(path: str | Path, sample_id: str | None = None) -> np.ndarray:
    who = sample_id or str(path)
    if not os.path.exists(path):
        raise MissingFileError(f"{who}: frame file {path} not found")
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{who}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{who}: truncated header")
    version, dtype, rank = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise FormatError(f"{who}: unsupported VSEQ version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{who}: unsupported dtype code {dtype}")
    if rank == 0 or rank > 8 or len(raw) < 16 + 4 * rank:
        raise FormatError(f"{who}: bad rank {rank} or truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 16)
    offset = 16 + 4 * rank
    expected = 4 * int(np.prod(dims))
    if len(raw) - offset != expected:
        raise FormatError(f"{who}: payload is {len(raw) - offset} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


def write_dataset(samples: Sequence[Sample], directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        if "\t" in s.transcript or "\n" in s.transcript:
            raise FormatError(f"{s.id}: transcript contains a tab or newline")
        rel = f"frames/{s.id}.vseq"
        write_vseq(directory / rel, s.frames)
        lines.append(f"{s.id}\t{rel}\t{s.transcript}\n")
    (directory / MANIFEST).write_text("".join(lines), encoding="utf-8")


def read_dataset(directory: str | Path) -> list[Sample]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise MissingFileError(f"no {MANIFEST} in {directory}")
    samples = []
    for n, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{manifest}:{n}: expected 3 tab-separated fields, got {len(parts)}")
        sid, rel, text = parts
        frames = read_vseq(directory / rel, sid)
        if frames.ndim != 4:
            raise FormatError(f"{sid}: expected (C, T, H, W) frames, got shape {frames.shape}")
        samples.append(Sample(sid, frames, text))
    return samples


# ---------------------------------------------------------------- batching

def pad_batch(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Zero-pad clips along time; returns (N, C, T_max, H, W), lengths, transcripts."""
    lengths = np.array([s.length for s in samples])
    c, _, h, w = samples[0].frames.shape
    out = np.zeros((len(samples), c, int(lengths.max()), h, w), dtype=samples[0].frames.dtype)
    for i, s in enumerate(samples):
        out[i, :, :s.length] = s.frames
    return out, lengths, [s.transcript for s in samples]
