"""Desk-scale synthetic dataset with a compositional 4-attribute label space.

Each class is a distinct tuple (takeoff, somersault, twist, flight) with
arities 4/8/8/4; 48 of the 1024 possible tuples form the class set. The
clip timeline is split into four segments and attribute i is legible only
inside segment i, which forces a classifier to integrate over time:

  vector mode  attribute i writes a fixed prototype pattern into its own
               block of feature dimensions during its segment. With noise
               enabled, decoy prototypes from other attributes are splashed
               into the same blocks at the wrong times, so a static
               dimension filter cannot separate signal from distraction,
               while time-aware gating can.
  image mode   a bright blob travels a path whose start and direction
               encode attribute i during segment i, over static per-episode
               clutter; the blob's footprint mask is stored per frame as
               ground truth for attention-localization checks.

Samples are grouped into episodes (shared clutter, shared rng ancestry);
episode ids are disjoint across the train and test splits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, LabelError
from .features import FeatureSequence, FrameVolume, load_features, save_features
from .seeding import CLASS_TABLE, DATASET, EPISODE, PATTERN, SAMPLE, derive_rng

ARITIES = (4, 8, 8, 4)
DEFAULT_TABLE_SEED = 0
TEST_EPISODE_BASE = 1_000_000

NOISE_SCALE = 0.35
DECOY_SCALE = 1.0
DECOY_PROB = 0.75
PIXEL_NOISE = 0.04


@dataclass(frozen=True)
class AttributeTuple:
    takeoff: int
    somersault: int
    twist: int
    flight: int

    def __post_init__(self):
        for v, a in zip(self.as_tuple(), ARITIES):
            if not (0 <= v < a):
                raise LabelError(f"attribute value {v} outside arity {a}")

    def as_tuple(self):
        return (self.takeoff, self.somersault, self.twist, self.flight)

    @classmethod
    def from_index(cls, idx: int) -> "AttributeTuple":
        """Decode a mixed-radix index over the 4*8*8*4 product space."""
        vals = []
        for a in reversed(ARITIES):
            vals.append(idx % a)
            idx //= a
        return cls(*reversed(vals))


class ClassTable:
    """Bijection between 48 distinct attribute tuples and class indices."""

    def __init__(self, entries: list[AttributeTuple]):
        if len(entries) != 48 or len(set(entries)) != 48:
            raise ContractError(f"class table needs 48 distinct tuples, got {len(entries)}")
        self.entries = list(entries)
        self._index = {e.as_tuple(): k for k, e in enumerate(self.entries)}

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, class_index: int) -> AttributeTuple:
        if not (0 <= class_index < len(self.entries)):
            raise LabelError(f"class index {class_index} outside [0,48)")
        return self.entries[class_index]

    def lookup(self, tup: AttributeTuple) -> int:
        key = tup.as_tuple() if isinstance(tup, AttributeTuple) else tuple(tup)
        if key not in self._index:
            raise LabelError(f"tuple {key} is not a valid class")
        return self._index[key]

    def save(self, path):
        with open(path, "w") as f:
            for k, e in enumerate(self.entries):
                f.write(f"{k} {e.takeoff} {e.somersault} {e.twist} {e.flight}\n")

    @classmethod
    def load(cls, path) -> "ClassTable":
        entries = []
        with open(path) as f:
            for line in f:
                parts = line.split()
                if len(parts) != 5:
                    raise FormatError(f"bad class table line: {line!r}")
                entries.append(AttributeTuple(*map(int, parts[1:])))
        return cls(entries)


def build_class_table(seed: int = DEFAULT_TABLE_SEED) -> ClassTable:
    """Seeded selection of 48 distinct tuples out of the 1024-tuple space."""
    rng = derive_rng(seed, CLASS_TABLE)
    space = int(np.prod(ARITIES))
    chosen = np.sort(rng.choice(space, size=48, replace=False))
    return ClassTable([AttributeTuple.from_index(int(i)) for i in chosen])


@dataclass
class SynthConfig:
    num_frames: int = 16
    feature_dim: int = 32
    image_size: int = 48
    train_per_class: int = 8
    test_per_class: int = 2
    clips_per_episode: int = 4
    pattern_seed: int = 1234
    table_seed: int = DEFAULT_TABLE_SEED
    blob_radius: float = 4.0

    def __post_init__(self):
        if self.num_frames < 4:
            raise ContractError("need at least 4 frames for 4 attribute segments")
        for name in ("feature_dim", "image_size", "train_per_class", "test_per_class",
                     "clips_per_episode"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass
class SyntheticSample:
    clip_id: str
    split: str
    episode: int
    class_index: int
    attributes: AttributeTuple
    features: FeatureSequence | None = None
    frames: FrameVolume | None = None
    masks: np.ndarray | None = None
    path: str | None = None


def segment_bounds(n: int) -> list[tuple[int, int]]:
    """Four contiguous time segments covering 0..n, remainder to the last."""
    edges = [0, n // 4, n // 2, 3 * n // 4, n]
    return [(edges[i], edges[i + 1]) for i in range(4)]


def attribute_blocks(m: int) -> list[slice]:
    """One feature-dimension block per attribute; the rest is noise-only."""
    bs = max(1, m // 8)
    return [slice(i * bs, (i + 1) * bs) for i in range(4)]


def _prototype(cfg: SynthConfig, attr: int, value: int, length: int, width: int) -> np.ndarray:
    """Deterministic pattern for (attribute, value); independent of sample rng."""
    rng = derive_rng(cfg.pattern_seed, PATTERN, attr, value)
    full = rng.uniform(-1.0, 1.0, size=(cfg.num_frames, width)).astype(np.float32)
    return full[:length]


def _vector_clip(cfg: SynthConfig, attrs: AttributeTuple, noise_level: float,
                 rng: np.random.Generator) -> FeatureSequence:
    n, m = cfg.num_frames, cfg.feature_dim
    x = np.zeros((n, m), dtype=np.float32)
    segs = segment_bounds(n)
    blocks = attribute_blocks(m)
    width = blocks[0].stop - blocks[0].start
    for i, v in enumerate(attrs.as_tuple()):
        lo, hi = segs[i]
        x[lo:hi, blocks[i]] = _prototype(cfg, i, v, hi - lo, width)
    if noise_level > 0:
        # time-misplaced decoys: attribute-i patterns inside other segments
        for j in range(4):
            lo, hi = segs[j]
            for i in range(4):
                if i == j or rng.random() >= DECOY_PROB:
                    continue
                v = int(rng.integers(0, ARITIES[i]))
                x[lo:hi, blocks[i]] += DECOY_SCALE * _prototype(cfg, i, v, hi - lo, width)
        x += (noise_level * NOISE_SCALE * rng.standard_normal((n, m))).astype(np.float32)
    return FeatureSequence(vectors=x)


def _clutter(cfg: SynthConfig, episode_rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    canvas = np.full((s, s, 3), 0.08, dtype=np.float32)
    for _ in range(int(episode_rng.integers(3, 7))):
        y, x = episode_rng.integers(0, s, size=2)
        h, w = episode_rng.integers(s // 8, s // 3, size=2)
        color = episode_rng.uniform(0.15, 0.45, size=3).astype(np.float32)
        canvas[y:y + h, x:x + w] = color
    return canvas


def _blob_positions(cfg: SynthConfig, attrs: AttributeTuple) -> np.ndarray:
    """Per-frame blob centers; segment i runs a line whose endpoints encode v_i."""
    n, s = cfg.num_frames, cfg.image_size
    center = np.array([s / 2.0, s / 2.0])
    radius = 0.36 * s
    pos = np.zeros((n, 2))
    for i, (v, (lo, hi)) in enumerate(zip(attrs.as_tuple(), segment_bounds(n))):
        theta = 2.0 * np.pi * v / ARITIES[i] + i * np.pi / 7.0
        start = center + radius * np.array([np.cos(theta), np.sin(theta)])
        theta2 = theta + 2.0 * np.pi * (i + 2) / 9.0
        end = center + radius * np.array([np.cos(theta2), np.sin(theta2)])
        ts = np.linspace(0.0, 1.0, hi - lo, endpoint=True) if hi - lo > 1 else np.array([0.5])
        pos[lo:hi] = start[None, :] + ts[:, None] * (end - start)[None, :]
    return pos


def _image_clip(cfg: SynthConfig, attrs: AttributeTuple, noise_level: float,
                rng: np.random.Generator, episode_rng: np.random.Generator):
    s = cfg.image_size
    clutter = _clutter(cfg, episode_rng)
    positions = _blob_positions(cfg, attrs)
    frames = np.repeat(clutter[None], cfg.num_frames, axis=0)
    masks = np.zeros((cfg.num_frames, s, s), dtype=bool)
    yy, xx = np.mgrid[0:s, 0:s]
    sigma = cfg.blob_radius
    for t, (cy, cx) in enumerate(positions):
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        blob = np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)
        frames[t] = np.clip(frames[t] + blob[:, :, None], 0.0, 1.0)
        masks[t] = blob > 0.5
    if noise_level > 0:
        frames = frames + (noise_level * PIXEL_NOISE *
                           rng.standard_normal(frames.shape)).astype(np.float32)
        frames = np.clip(frames, 0.0, 1.0)
    return FrameVolume(frames), masks


def generate_sample(cfg: SynthConfig, table: ClassTable, class_index: int, mode: str,
                    noise_level: float, rng: np.random.Generator,
                    clip_id: str = "clip", split: str = "train", episode: int = 0,
                    episode_rng: np.random.Generator | None = None) -> SyntheticSample:
    if mode not in ("vector", "image"):
        raise ContractError(f"unknown mode {mode!r}")
    attrs = table[class_index]
    sample = SyntheticSample(clip_id=clip_id, split=split, episode=episode,
                             class_index=class_index, attributes=attrs)
    if mode == "vector":
        sample.features = _vector_clip(cfg, attrs, noise_level, rng)
    else:
        ep_rng = episode_rng if episode_rng is not None else rng
        sample.frames, sample.masks = _image_clip(cfg, attrs, noise_level, rng, ep_rng)
    return sample


def generate_dataset(cfg: SynthConfig, mode: str, seed: int, noise_level: float):
    """Deterministic (train, test) sample lists; every class in both splits."""
    table = build_class_table(cfg.table_seed)
    splits = []
    for split, count, ep_base, split_key in (
            ("train", cfg.train_per_class, 0, 0),
            ("test", cfg.test_per_class, TEST_EPISODE_BASE, 1)):
        samples = []
        k = 0
        for class_index in range(len(table)):
            for j in range(count):
                episode = ep_base + k // cfg.clips_per_episode
                rng = derive_rng(seed, DATASET, SAMPLE, split_key, class_index, j)
                ep_rng = derive_rng(seed, DATASET, EPISODE, episode)
                samples.append(generate_sample(
                    cfg, table, class_index, mode, noise_level, rng,
                    clip_id=f"{split}-c{class_index:02d}-{j:02d}", split=split,
                    episode=episode, episode_rng=ep_rng))
                k += 1
        splits.append(samples)
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# on-disk layout: clips/ plus a plain-text manifest, one record per line:
#   clip_id split class takeoff somersault twist flight path

def write_dataset(train: list[SyntheticSample], test: list[SyntheticSample], outdir) -> str:
    clips = os.path.join(outdir, "clips")
    os.makedirs(clips, exist_ok=True)
    manifest = os.path.join(outdir, "manifest.txt")
    with open(manifest, "w") as f:
        for sample in [*train, *test]:
            if sample.features is not None:
                rel = os.path.join("clips", f"{sample.clip_id}.astf")
                save_features(sample.features, os.path.join(outdir, rel))
            else:
                rel = os.path.join("clips", f"{sample.clip_id}.frames.npy")
                np.save(os.path.join(outdir, rel), sample.frames.frames)
                np.save(os.path.join(outdir, os.path.join("clips", f"{sample.clip_id}.masks.npy")),
                        sample.masks)
            sample.path = rel
            a = sample.attributes
            f.write(f"{sample.clip_id} {sample.split} {sample.class_index} "
                    f"{a.takeoff} {a.somersault} {a.twist} {a.flight} {rel}\n")
    return manifest


def load_dataset(manifest_path, split: str | None = None) -> list[SyntheticSample]:
    """Read manifest records and load clip payloads for the requested split."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    with open(manifest_path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 8:
                raise FormatError(f"manifest line {lineno} has {len(parts)} fields, expected 8")
            clip_id, sp, cls, t, s, tw, fl, rel = parts
            if split is not None and sp != split:
                continue
            attrs = AttributeTuple(int(t), int(s), int(tw), int(fl))
            sample = SyntheticSample(clip_id=clip_id, split=sp, episode=-1,
                                     class_index=int(cls), attributes=attrs, path=rel)
            full = os.path.join(base, rel)
            if rel.endswith(".astf"):
                sample.features = load_features(full)
            elif rel.endswith(".frames.npy"):
                sample.frames = FrameVolume(np.load(full))
                mask_path = full[:-len(".frames.npy")] + ".masks.npy"
                if os.path.exists(mask_path):
                    sample.masks = np.load(mask_path)
            else:
                raise FormatError(f"manifest line {lineno}: unknown payload {rel!r}")
            samples.append(sample)
    return samples
