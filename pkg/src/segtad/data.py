"""Feature-file codec, dataset loading and the synthetic dataset generator."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .labels import (
    ActionAnnotation,
    dump_annotations,
    dump_class_manifest,
    load_annotations,
    load_class_manifest,
)
from .tensor import interp_matrix

FEATURE_MAGIC = b"SGFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFileError(ValueError):
    pass


def encode_features(X: np.ndarray) -> bytes:
    """C x T array -> SGFT bytes (little-endian float32, channel-major)."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise FeatureFileError(f"features must be C x T, got shape {X.shape}")
    C, T = X.shape
    payload = np.ascontiguousarray(X, dtype="<f4").tobytes()
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, C, T) + payload


def decode_features(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FeatureFileError("feature file shorter than its header")
    magic, version, C, T = _HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"bad feature magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported feature version {version}")
    expected = 4 * C * T
    if len(buf) - _HEADER.size != expected:
        raise FeatureFileError(f"payload is {len(buf) - _HEADER.size} bytes, header says {expected}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(C, T).astype(np.float32)


def write_features(path: str | Path, X: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(X))


def read_features(path: str | Path) -> np.ndarray:
    return decode_features(Path(path).read_bytes())


def rescale_features(X: np.ndarray, T: int) -> np.ndarray:
    """Linearly resample a C x T0 sequence to T snippets."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] == T:
        return X
    return X @ interp_matrix(X.shape[1], T)


@dataclass
class VideoItem:
    annotation: ActionAnnotation
    features: np.ndarray  # C x T, float64

    @property
    def video_id(self) -> str:
        return self.annotation.video_id


def load_dataset(root: str | Path, T: int | None = None, subset: str | None = None) -> tuple[list[VideoItem], dict[str, int]]:
    """Read ``features/*.sgft``, ``annotations.json`` and ``classes.json`` under ``root``."""
    root = Path(root)
    manifest = root / "classes.json"
    class_ids = load_class_manifest(manifest) if manifest.exists() else None
    anns, class_ids = load_annotations(root / "annotations.json", class_ids)
    items = []
    for ann in anns:
        if subset is not None and ann.subset != subset:
            continue
        X = read_features(root / "features" / f"{ann.video_id}.sgft").astype(np.float64)
        if T is not None:
            X = rescale_features(X, T)
        items.append(VideoItem(ann, X))
    return items, class_ids


@dataclass
class SyntheticSpec:
    n_videos: int = 20
    D: int = 3
    C: int = 16
    T: int = 256
    min_actions: int = 1
    max_actions: int = 3
    min_len: int = 16
    max_len: int = 64
    sigma: float = 0.3
    seed: int = 0
    grid: int = 1
    single_class: bool = True
    seconds_per_snippet: float = 0.5

    def validate(self) -> None:
        if self.C < self.D:
            raise ValueError(f"need C >= D for orthogonal class signatures (C={self.C}, D={self.D})")
        if self.T % self.grid:
            raise ValueError(f"T={self.T} is not a multiple of grid={self.grid}")
        if not (1 <= self.min_actions <= self.max_actions):
            raise ValueError("need 1 <= min_actions <= max_actions")
        if not (self.grid <= self.min_len <= self.max_len):
            raise ValueError("need grid <= min_len <= max_len")
        min_units = math.ceil(self.min_len / self.grid)
        if self.max_actions * min_units + self.max_actions - 1 > self.T // self.grid:
            raise ValueError(
                f"cannot pack {self.max_actions} actions of length >= {self.min_len} "
                f"with gaps into {self.T} snippets"
            )


def class_signatures(D: int, C: int) -> np.ndarray:
    """D x C: class d (1-based) is the unit basis vector e_{d-1}."""
    return np.eye(D, C)


def _place_actions(spec: SyntheticSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping (start, end) snippet spans separated by at least one grid unit."""
    units = spec.T // spec.grid
    lo = math.ceil(spec.min_len / spec.grid)
    hi = spec.max_len // spec.grid
    for _ in range(100):
        n = int(rng.integers(spec.min_actions, spec.max_actions + 1))
        lengths = rng.integers(lo, hi + 1, size=n)
        slack = units - int(lengths.sum()) - (n - 1)
        if slack >= 0:
            break
    else:
        raise ValueError("could not pack the requested actions; lower max_len or max_actions")
    gaps = rng.multinomial(slack, np.full(n + 1, 1.0 / (n + 1)))
    spans = []
    pos = int(gaps[0])
    for i in range(n):
        start = pos
        end = start + int(lengths[i])
        spans.append((start * spec.grid, end * spec.grid))
        pos = end + 1 + int(gaps[i + 1])
    return spans


def gen_synthetic_dataset(spec: SyntheticSpec) -> tuple[list[VideoItem], dict[str, int]]:
    """Noisy class-signature features with grid-aligned ground truth."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sig = class_signatures(spec.D, spec.C)
    class_ids = {f"class_{d}": d for d in range(1, spec.D + 1)}
    items = []
    width = max(3, len(str(spec.n_videos - 1)))
    duration = spec.T * spec.seconds_per_snippet
    for v in range(spec.n_videos):
        spans = _place_actions(spec, rng)
        if spec.single_class:
            classes = [int(rng.integers(1, spec.D + 1))] * len(spans)
        else:
            classes = [int(c) for c in rng.integers(1, spec.D + 1, size=len(spans))]
        X = rng.normal(0.0, spec.sigma, size=(spec.C, spec.T)) if spec.sigma > 0 else np.zeros((spec.C, spec.T))
        actions = []
        for (s, e), c in zip(spans, classes):
            X[:, s:e] += sig[c - 1][:, None]
            actions.append((s * spec.seconds_per_snippet, e * spec.seconds_per_snippet, c))
        X = X.astype(np.float32).astype(np.float64)
        ann = ActionAnnotation(f"video_{v:0{width}d}", duration, actions, "training")
        items.append(VideoItem(ann, X))
    return items, class_ids


def write_dataset(root: str | Path, items: list[VideoItem], class_ids: dict[str, int]) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    for item in items:
        write_features(root / "features" / f"{item.video_id}.sgft", item.features)
    dump_annotations([it.annotation for it in items], class_ids, root / "annotations.json")
    dump_class_manifest(class_ids, root / "classes.json")
