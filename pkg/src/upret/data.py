"""Synthetic paired token corpora and the ``UPRF`` feature file format.

Each pair comes from a latent sequence of concepts. A text carries one token
per concept. A video shows every concept for the same number of frames, but
concepts are grouped ``polysemy`` at a time and every member of a group shares
one visual surface, so a video frame cannot tell its group members apart.

UPRF layout (little-endian)::

    b"UPRF" | u32 version=1 | u32 D | u64 record count
    per record: u64 pair id | u32 N_v | u32 N_t | N_v*D f32 | N_t*D f32
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_VIDEO_LEN = 64
MAX_TEXT_LEN = 32

MAGIC = b"UPRF"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_RECORD = struct.Struct("<QII")

SPLITS = ("train", "val", "test")


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


@dataclass(frozen=True)
class CorpusSpec:
    pairs: int = 2000
    vocab: int = 50
    video_len_min: int = 8
    video_len_max: int = 16
    text_len_min: int = 4
    text_len_max: int = 8
    dim: int = 32
    polysemy: int = 3
    noise: float = 0.3
    seed: int = 0
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def validate(self) -> None:
        if self.pairs < 0:
            raise ValueError("pairs must be >= 0")
        if self.dim < 2 or self.dim % 2:
            raise ValueError("dim must be a positive even number")
        if self.polysemy < 1:
            raise ValueError("polysemy must be >= 1")
        if self.vocab < self.polysemy:
            raise ValueError(f"vocab ({self.vocab}) smaller than polysemy ({self.polysemy})")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 1 <= self.text_len_min <= self.text_len_max <= MAX_TEXT_LEN:
            raise ValueError(f"text lengths must satisfy 1 <= min <= max <= {MAX_TEXT_LEN}")
        if not 1 <= self.video_len_min <= self.video_len_max <= MAX_VIDEO_LEN:
            raise ValueError(f"video lengths must satisfy 1 <= min <= max <= {MAX_VIDEO_LEN}")
        if not any(self._frame_options(n) for n in range(self.text_len_min, self.text_len_max + 1)):
            raise ValueError("no text length admits a whole number of frames per concept in the video range")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ValueError("split fractions must be >= 0 and leave a training split")

    def _frame_options(self, n_t: int) -> list[int]:
        return [r for r in range(1, self.video_len_max // n_t + 1) if self.video_len_min <= r * n_t <= self.video_len_max]


@dataclass
class PairedSample:
    video: np.ndarray  # (N_v, D) float32
    text: np.ndarray  # (N_t, D) float32
    pair_id: int
    concepts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_corpus(spec: CorpusSpec) -> dict[str, list[PairedSample]]:
    """Build disjoint train/val/test splits; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D = spec.dim
    meaning = _unit_rows(rng.standard_normal((spec.vocab, D)))
    group = rng.permutation(spec.vocab) % max(1, spec.vocab // spec.polysemy)
    n_groups = int(group.max()) + 1
    surface = np.zeros((n_groups, D))
    for g in range(n_groups):
        surface[g] = meaning[group == g].mean(axis=0)
    surface = _unit_rows(surface)
    # per-entry noise std is noise/sqrt(D), so noise is relative to a unit token
    sd = spec.noise / np.sqrt(D)

    text_lengths = [n for n in range(spec.text_len_min, spec.text_len_max + 1) if spec._frame_options(n)]
    seen: set[tuple] = set()
    samples = []
    for pid in range(spec.pairs):
        for _ in range(10_000):
            n_t = int(rng.choice(text_lengths))
            concepts = rng.choice(spec.vocab, size=n_t, replace=False)
            key = tuple(sorted(concepts.tolist()))
            if key not in seen:
                seen.add(key)
                break
        else:
            raise ValueError(f"vocabulary of {spec.vocab} cannot supply {spec.pairs} distinct concept sets")
        reps = int(rng.choice(spec._frame_options(n_t)))
        text = meaning[concepts] + sd * rng.standard_normal((n_t, D))
        frames = np.repeat(surface[group[concepts]], reps, axis=0)
        video = frames + sd * rng.standard_normal(frames.shape)
        samples.append(
            PairedSample(video.astype(np.float32), text.astype(np.float32), pid, concepts.astype(np.int64))
        )

    n_test = int(round(spec.pairs * spec.test_fraction))
    n_val = int(round(spec.pairs * spec.val_fraction))
    n_train = spec.pairs - n_val - n_test
    return {
        "train": samples[:n_train],
        "val": samples[n_train : n_train + n_val],
        "test": samples[n_train + n_val :],
    }


# ---------------------------------------------------------------- UPRF codec

def write_features(path, samples: list[PairedSample], dim: int | None = None) -> None:
    if dim is None:
        if not samples:
            raise ValueError("feature width is required for an empty corpus")
        dim = samples[0].video.shape[1]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dim, len(samples)))
        for s in samples:
            if s.video.shape[1] != dim or s.text.shape[1] != dim:
                raise ValueError(f"pair {s.pair_id}: feature width differs from {dim}")
            fh.write(_RECORD.pack(s.pair_id, s.video.shape[0], s.text.shape[0]))
            fh.write(np.ascontiguousarray(s.video, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.text, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_features(path) -> tuple[int, list[PairedSample]]:
    """Read a UPRF file; returns (D, samples). Nothing is returned on a corrupt file."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FeatureFormatError("truncated header", len(buf))
    magic, version, dim, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    samples = []
    for _ in range(count):
        if off + _RECORD.size > len(buf):
            raise FeatureFormatError("truncated record header", off)
        pid, n_v, n_t = _RECORD.unpack_from(buf, off)
        off += _RECORD.size
        need = 4 * dim * (n_v + n_t)
        if off + need > len(buf):
            raise FeatureFormatError(f"truncated token data for pair {pid}", off)
        video = np.frombuffer(buf, dtype="<f4", count=n_v * dim, offset=off).reshape(n_v, dim).astype(np.float32)
        off += 4 * n_v * dim
        text = np.frombuffer(buf, dtype="<f4", count=n_t * dim, offset=off).reshape(n_t, dim).astype(np.float32)
        off += 4 * n_t * dim
        samples.append(PairedSample(video, text, int(pid)))
    if off != len(buf):
        raise FeatureFormatError(f"{len(buf) - off} trailing bytes", off)
    return dim, samples


def write_manifest(path, files: dict[str, str]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in files.items()))


def read_manifest(path) -> dict[str, Path]:
    """``split=relative/or/absolute/path`` lines; paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected split=path")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = (base / v) if not Path(v).is_absolute() else Path(v)
    return out
