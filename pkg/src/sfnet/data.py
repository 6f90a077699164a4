"""Dataset plumbing and the synthetic continuous-gesture corpus.

Frame blobs are one file per sample: a header of four little-endian u64
values (T, C, H, W) followed by raw 8-bit pixels in row-major order.
Manifests are line-oriented text: ``sample_id TAB blob_path TAB T TAB fps
TAB gloss ids space-separated``; blob paths are relative to the manifest.
The vocabulary file holds one gloss per line, line number = id (id 0 is
reserved for the blank symbol).

The synthetic generator maps every gloss id to a distinct moving-shape
motif (shape x trajectory x oscillation tier) and renders sentences as
concatenated gloss clips joined by short crossfade transitions, so the
corpus is weakly supervised exactly like the real task: no alignment is
stored.  Signer-style families (color/scale/background) are split
disjointly between the train and test manifests, and a fixed seed yields a
byte-identical corpus.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = [
    "BLOB_HEADER",
    "DataError",
    "GlossVocabulary",
    "ManifestEntry",
    "SynthSpec",
    "VideoBatch",
    "batch_loader",
    "preprocess",
    "read_frames",
    "read_manifest",
    "resize_bilinear",
    "synth_generate",
    "write_frames",
    "write_manifest",
]

BLOB_HEADER = struct.Struct("<4Q")


class DataError(ValueError):
    """Malformed corpus data, named by sample where possible."""


# -- vocabulary -----------------------------------------------------------------


class GlossVocabulary:
    """Bijection between gloss strings and ids 1..N; id 0 is the CTC blank."""

    def __init__(self, glosses):
        self.glosses = list(glosses)
        if len(set(self.glosses)) != len(self.glosses):
            raise DataError("vocabulary contains duplicate glosses")
        self._ids = {g: i + 1 for i, g in enumerate(self.glosses)}

    def __len__(self):
        return len(self.glosses)

    def id_of(self, gloss: str) -> int:
        return self._ids[gloss]

    def gloss_of(self, gid: int) -> str:
        return self.glosses[gid - 1]

    def save(self, path):
        Path(path).write_text("\n".join(self.glosses) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GlossVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


# -- frame blobs ------------------------------------------------------------------


def write_frames(path, frames: np.ndarray):
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    if frames.ndim != 4:
        raise DataError(f"frame blob must be [T, C, H, W], got shape {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(BLOB_HEADER.pack(*frames.shape))
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < BLOB_HEADER.size:
        raise DataError(f"truncated frame blob: {path}")
    t, c, h, w = BLOB_HEADER.unpack_from(raw)
    expected = BLOB_HEADER.size + t * c * h * w
    if len(raw) != expected:
        raise DataError(f"frame blob {path} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=BLOB_HEADER.size).reshape(t, c, h, w)


# -- manifests ---------------------------------------------------------------------


@dataclass
class ManifestEntry:
    sample_id: str
    blob_path: str
    frames: int
    fps: int
    glosses: list

    def resolve(self, manifest_path) -> Path:
        return Path(manifest_path).parent / self.blob_path


def write_manifest(path, entries):
    lines = []
    for e in entries:
        ids = " ".join(str(g) for g in e.glosses)
        lines.append(f"{e.sample_id}\t{e.blob_path}\t{e.frames}\t{e.fps}\t{ids}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list:
    entries = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{ln}: expected 5 tab-separated fields")
        sample_id, blob_path, frames, fps, glosses = parts
        entries.append(ManifestEntry(sample_id, blob_path, int(frames), int(fps),
                                     [int(g) for g in glosses.split()]))
    return entries


# -- synthetic corpus ---------------------------------------------------------------

_SHAPES = ("square", "disk", "plus", "ring", "triangle")
_TRAJECTORIES = ("sweep_lr", "sweep_tb", "diagonal", "orbit")


@dataclass
class SynthSpec:
    vocab_size: int = 20
    sentences: int = 200
    test_sentences: int = 40
    min_glosses: int = 2
    max_glosses: int = 5
    min_frames: int = 12
    max_frames: int = 30
    image_size: int = 64
    styles: int = 5
    test_styles: int = 1
    transition_frames: int = 3
    fps: int = 25
    seed: int = 0

    def validate(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.styles <= self.test_styles or self.test_styles < 1:
            raise ValueError("need at least one held-out style and one training style")
        if self.min_glosses < 1 or self.max_glosses < self.min_glosses:
            raise ValueError("invalid sentence-length range")
        if self.min_frames < 1 or self.max_frames < self.min_frames:
            raise ValueError("invalid frames-per-gloss range")
        return self

    def to_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"


def _style_parameters(style: int, styles: int):
    hue = (style + 0.5) / styles
    sector = hue * 6.0
    k = int(sector) % 6
    frac = sector - int(sector)
    v, s = 0.95, 0.75
    p, q, t = v * (1 - s), v * (1 - s * frac), v * (1 - s * (1 - frac))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][k]
    background = 0.08 + 0.06 * (style % 3)
    scale = 0.85 + 0.3 * style / max(styles - 1, 1)
    return np.array(rgb), background, scale


def _test_style_indices(styles: int, test_styles: int):
    # interior indices, so held-out styles interpolate the training ones
    step = styles / (test_styles + 1)
    return sorted({min(int(round(step * (i + 1))), styles - 2) for i in range(test_styles)})


def _trajectory(kind: str, phase: float, tier: int):
    margin = 0.24
    span = 1.0 - 2 * margin
    if kind == "sweep_lr":
        x, y = margin + span * phase, 0.5
    elif kind == "sweep_tb":
        x, y = 0.5, margin + span * phase
    elif kind == "diagonal":
        x = margin + span * phase
        y = margin + span * phase
    else:  # orbit
        angle = 2 * np.pi * phase
        x = 0.5 + 0.26 * np.cos(angle)
        y = 0.5 + 0.26 * np.sin(angle)
    if tier > 0:
        y += 0.08 * np.sin(2 * np.pi * (tier + 1) * phase)
    return x, y


def _shape_mask(kind: str, yy, xx, cx, cy, radius):
    dx = xx - cx
    dy = yy - cy
    if kind == "square":
        return (np.abs(dx) < radius) & (np.abs(dy) < radius)
    if kind == "disk":
        return dx * dx + dy * dy < radius * radius
    if kind == "plus":
        bar = radius / 2.4
        return ((np.abs(dx) < bar) & (np.abs(dy) < radius)) | \
               ((np.abs(dy) < bar) & (np.abs(dx) < radius))
    if kind == "ring":
        rr = dx * dx + dy * dy
        return (rr < radius * radius) & (rr > (0.55 * radius) ** 2)
    # triangle (apex up)
    return (dy > -radius) & (dy < radius) & (np.abs(dx) < (radius - dy) / 2.0)


def render_gloss_clip(gloss_id: int, n_frames: int, style: int, spec: SynthSpec,
                      rng: np.random.Generator) -> np.ndarray:
    """Render one gloss as [T, 3, H, W] uint8 frames."""
    shape = _SHAPES[(gloss_id - 1) % len(_SHAPES)]
    trajectory = _TRAJECTORIES[((gloss_id - 1) // len(_SHAPES)) % len(_TRAJECTORIES)]
    tier = (gloss_id - 1) // (len(_SHAPES) * len(_TRAJECTORIES))
    rgb, background, scale = _style_parameters(style, spec.styles)
    size = spec.image_size
    axis = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    radius = 0.16 * scale
    frames = np.empty((n_frames, 3, size, size), dtype=np.uint8)
    for k in range(n_frames):
        phase = k / max(n_frames - 1, 1)
        cx, cy = _trajectory(trajectory, phase, tier)
        mask = _shape_mask(shape, yy, xx, cx, cy, radius)
        img = np.full((3, size, size), background)
        img += mask[None, :, :] * (rgb[:, None, None] - background)
        img += rng.uniform(-0.02, 0.02, size=img.shape)
        frames[k] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return frames


def _render_sentence(glosses, style, spec, rng):
    clips = [render_gloss_clip(g, int(rng.integers(spec.min_frames, spec.max_frames + 1)),
                               style, spec, rng) for g in glosses]
    pieces = [clips[0]]
    for nxt in clips[1:]:
        prev_last = pieces[-1][-1].astype(np.float64)
        nxt_first = nxt[0].astype(np.float64)
        for k in range(spec.transition_frames):
            alpha = (k + 1) / (spec.transition_frames + 1)
            blend = (1 - alpha) * prev_last + alpha * nxt_first
            pieces.append(blend.astype(np.uint8)[None])
        pieces.append(nxt)
    return np.concatenate(pieces, axis=0)


def _sample_sentence(spec, rng):
    length = int(rng.integers(spec.min_glosses, spec.max_glosses + 1))
    glosses = []
    while len(glosses) < length:
        g = int(rng.integers(1, spec.vocab_size + 1))
        if glosses and glosses[-1] == g:
            continue  # crossfaded identical motifs would be unsegmentable
        glosses.append(g)
    return glosses


def synth_generate(spec: SynthSpec, out_dir) -> dict:
    """Write vocabulary, blobs and train/test manifests; returns corpus stats.

    Test sentences use only held-out style families.  Byte-identical output
    for identical specs.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    vocab = GlossVocabulary([f"G{i:02d}" for i in range(1, spec.vocab_size + 1)])
    vocab.save(out / "vocab.txt")
    (out / "synth.spec").write_text(spec.to_text(), encoding="utf-8")

    test_styles = _test_style_indices(spec.styles, spec.test_styles)
    train_styles = [s for s in range(spec.styles) if s not in test_styles]
    stats = {"train_styles": train_styles, "test_styles": test_styles,
             "vocab_size": spec.vocab_size}
    for split, count, styles in (("train", spec.sentences, train_styles),
                                 ("test", spec.test_sentences, test_styles)):
        entries = []
        for i in range(count):
            sample_id = f"{split}_{i:04d}"
            style = styles[i % len(styles)]
            glosses = _sample_sentence(spec, rng)
            frames = _render_sentence(glosses, style, spec, rng)
            blob = f"blobs/{sample_id}.bin"
            write_frames(out / blob, frames)
            entries.append(ManifestEntry(sample_id, blob, frames.shape[0], spec.fps,
                                         glosses))
        write_manifest(out / f"{split}.manifest", entries)
        stats[f"{split}_sentences"] = count
        stats[f"{split}_frames"] = sum(e.frames for e in entries)
    return stats


# -- preprocessing -------------------------------------------------------------------


def resize_bilinear(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [T, C, H, W] float frames (half-pixel centers)."""
    t, c, h, w = frames.shape
    if (h, w) == (out_h, out_w):
        return frames
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    tl = frames[:, :, y0[:, None], x0[None, :]]
    tr = frames[:, :, y0[:, None], x1[None, :]]
    bl = frames[:, :, y1[:, None], x0[None, :]]
    br = frames[:, :, y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * wx
    bottom = bl + (br - bl) * wx
    return top + (bottom - top) * wy


def _central_crop(frames: np.ndarray, ch: int, cw: int) -> np.ndarray:
    h, w = frames.shape[2:]
    top = (h - ch) // 2
    left = (w - cw) // 2
    return frames[:, :, top:top + ch, left:left + cw]


def preprocess(frames: np.ndarray, kind: str, train: bool, target: int = 224,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Decode-time preprocessing to float frames in [0, 1] at target size.

    ``csl``: central crop to square, then resize to target.
    ``rwth``: resize to 8/7 of target, then a random target crop in training
    and a central crop in evaluation.
    ``synth``: plain resize to target.
    """
    x = frames.astype(np.float64) / 255.0
    if kind == "csl":
        side = min(x.shape[2], x.shape[3])
        x = _central_crop(x, side, side)
        return resize_bilinear(x, target, target)
    if kind == "rwth":
        inter = max(target + 1, int(round(target * 256 / 224)))
        x = resize_bilinear(x, inter, inter)
        if train:
            if rng is None:
                raise DataError("training-mode rwth preprocessing needs an rng")
            top = int(rng.integers(0, inter - target + 1))
            left = int(rng.integers(0, inter - target + 1))
            return x[:, :, top:top + target, left:left + target]
        return _central_crop(x, target, target)
    if kind == "synth":
        return resize_bilinear(x, target, target)
    raise DataError(f"unknown dataset kind: {kind!r}")


# -- batching -------------------------------------------------------------------------


@dataclass
class VideoBatch:
    ids: list
    frames: Tensor               # [B, T, C, h, w], zero-padded on T
    lengths: np.ndarray          # valid frames per sample
    targets: list = field(default_factory=list)


def batch_loader(manifest_path, batch_size: int, seed: int, epoch: int,
                 kind: str = "synth", train: bool = True, target: int = 64,
                 min_length: int | None = None, decimate: int = 1):
    """Deterministic shuffled batch stream for one epoch.

    Shuffle order is a pure function of (seed, epoch).  Sequences are padded
    to the batch maximum with valid lengths preserved; a sample shorter than
    ``min_length`` (the framing window) is rejected before it can reach the
    model.
    """
    entries = read_manifest(manifest_path)
    rng = np.random.default_rng((seed, epoch))
    order = rng.permutation(len(entries)) if train else np.arange(len(entries))
    for lo in range(0, len(entries), batch_size):
        chunk = [entries[i] for i in order[lo:lo + batch_size]]
        videos = []
        for entry in chunk:
            raw = read_frames(entry.resolve(manifest_path))
            if decimate > 1:
                raw = raw[::decimate]
            video = preprocess(raw, kind, train, target=target, rng=rng)
            if min_length is not None and video.shape[0] < min_length:
                raise DataError(
                    f"sample {entry.sample_id}: {video.shape[0]} frames are fewer "
                    f"than the framing window {min_length}")
            videos.append(video)
        lengths = np.array([v.shape[0] for v in videos], dtype=np.int64)
        max_t = int(lengths.max())
        c, h, w = videos[0].shape[1:]
        padded = np.zeros((len(videos), max_t, c, h, w))
        for i, v in enumerate(videos):
            padded[i, :v.shape[0]] = v
        yield VideoBatch(ids=[e.sample_id for e in chunk], frames=Tensor(padded),
                         lengths=lengths, targets=[list(e.glosses) for e in chunk])
