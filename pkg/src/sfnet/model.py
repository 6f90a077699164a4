"""Three-level model assembly.

Frame level: a 2D stem plus mixed 2D/3D blocks ending in global average
pooling.  Gloss level: sliding-window framing of the per-frame features and
an LSTM whose final hidden state embeds each meta frame.  Sentence level: a
BiLSTM over meta frames feeding the emission head.  Ablation switches
remove the 3D branches, the framing step, or the gloss LSTM, and a
word-level mode classifies single-meta-frame clips.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .layers import (
    BatchNorm,
    BiLSTMLayer,
    Conv2DLayer,
    Linear,
    LSTMLayer,
    MiCTBlock,
    SeqBatchNorm,
    global_avg_pool,
)
from .tensor import ShapeError, Tensor, gather_axis1, softmax

__all__ = [
    "ModelConfig",
    "MetaFrameFeatures",
    "SFNet",
    "framing",
    "meta_frame_count",
    "transfer_parameters",
    "FRAME_LEVEL_PREFIXES",
    "GLOSS_LEVEL_PREFIXES",
]


@dataclass
class ModelConfig:
    vocab_size: int
    in_channels: int = 3
    input_hw: tuple = (224, 224)
    stem_channels: int = 32
    stem_kernel: int = 7
    stem_stride: int = 2
    block_channels: tuple = (32, 64, 128, 256)
    block_strides: tuple = (2, 2, 2, 2)
    temporal_kernel: int = 3
    window: int = 12
    window_stride: int = 3
    gloss_hidden: int = 512
    sentence_hidden: int = 256
    no_3d: bool = False
    no_framing: bool = False
    no_gloss_lstm: bool = False
    word_level: bool = False

    @property
    def alphabet_size(self) -> int:
        return self.vocab_size + 1  # blank id 0 plus vocabulary ids 1..N

    def validate(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.window < 1 or self.window_stride < 1:
            raise ValueError("framing window and stride must be >= 1")
        if self.gloss_hidden < 1 or self.sentence_hidden < 1:
            raise ValueError("hidden sizes must be >= 1")
        if len(self.block_channels) != len(self.block_strides):
            raise ValueError("block_channels and block_strides must have equal length")
        if self.no_framing and (self.no_gloss_lstm or self.word_level):
            raise ValueError("no_framing cannot combine with gloss-level variants")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw.pop(f.name)
            if f.type == "tuple":
                kwargs[f.name] = tuple(int(v) for v in value.split(","))
            elif f.type == "bool":
                kwargs[f.name] = value.lower() == "true"
            else:
                kwargs[f.name] = int(value)
        if raw:
            raise ValueError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs).validate()


@dataclass
class MetaFrameFeatures:
    features: Tensor          # [B, F, H]
    counts: np.ndarray        # valid meta frames per sample

    @property
    def mask(self) -> np.ndarray:
        steps = self.features.data.shape[1]
        return np.arange(steps)[None, :] < self.counts[:, None]


def meta_frame_count(length: int, window: int, stride: int) -> int:
    return (length - window) // stride + 1


def framing(features: Tensor, window: int, stride: int, valid_lengths) -> tuple:
    """Regroup [B, T, K] per-frame features into [B, F, L, K] meta frames.

    Meta frame f of a sample covers frames [f*stride, f*stride + window).
    Samples shorter than the window are rejected by name; the batch is
    padded to the largest meta-frame count, with valid counts returned.
    """
    lengths = np.asarray(valid_lengths, dtype=np.int64)
    for b, t in enumerate(lengths):
        if t < window:
            raise ShapeError(
                f"sample {b}: {t} valid frames are fewer than the framing window {window}")
    counts = (lengths - window) // stride + 1
    max_f = int(counts.max())
    idx = np.arange(max_f)[:, None] * stride + np.arange(window)[None, :]
    return gather_axis1(features, idx), counts


FRAME_LEVEL_PREFIXES = ("stem.", "stem_bn.", "block")
GLOSS_LEVEL_PREFIXES = ("gloss_bn.", "gloss_lstm.")


class SFNet:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.stem = Conv2DLayer(rng, cfg.in_channels, cfg.stem_channels,
                                kernel_size=cfg.stem_kernel, stride=cfg.stem_stride)
        self.stem_bn = BatchNorm(cfg.stem_channels)
        self.blocks = []
        prev = cfg.stem_channels
        for channels, stride in zip(cfg.block_channels, cfg.block_strides):
            self.blocks.append(MiCTBlock(rng, prev, channels, stride=stride,
                                         temporal_size=cfg.temporal_kernel,
                                         use_3d=not cfg.no_3d))
            prev = channels
        self.frame_channels = prev

        if cfg.no_framing:
            meta_dim = prev
        elif cfg.no_gloss_lstm:
            meta_dim = cfg.window * prev
        else:
            meta_dim = cfg.gloss_hidden
        self.meta_dim = meta_dim

        if not cfg.no_framing:
            self.gloss_bn = SeqBatchNorm(prev)
            if not cfg.no_gloss_lstm:
                self.gloss_lstm = LSTMLayer(rng, prev, cfg.gloss_hidden)
            self.gloss_head = Linear(rng, meta_dim, cfg.alphabet_size)
        if cfg.word_level:
            self.word_head = Linear(rng, meta_dim, cfg.vocab_size)
        else:
            self.sent_bn = SeqBatchNorm(meta_dim)
            self.bilstm = BiLSTMLayer(rng, meta_dim, cfg.sentence_hidden)
            self.sent_head = Linear(rng, 2 * cfg.sentence_hidden, cfg.alphabet_size)

    # -- mode and parameter plumbing ------------------------------------------

    def _norm_layers(self):
        layers = [self.stem_bn]
        for block in self.blocks:
            layers += [block.bn2d, block.bn_out]
            if block.use_3d:
                layers.append(block.bn3d)
        if not self.cfg.no_framing:
            layers.append(self.gloss_bn)
        if not self.cfg.word_level:
            layers.append(self.sent_bn)
        return layers

    def train(self):
        for layer in self._norm_layers():
            layer.training = True
        return self

    def eval(self):
        for layer in self._norm_layers():
            layer.training = False
        return self

    def _modules(self):
        mods = {"stem": self.stem, "stem_bn": self.stem_bn}
        for i, block in enumerate(self.blocks, start=1):
            mods[f"block{i}"] = block
        if not self.cfg.no_framing:
            mods["gloss_bn"] = self.gloss_bn
            if not self.cfg.no_gloss_lstm:
                mods["gloss_lstm"] = self.gloss_lstm
            mods["gloss_head"] = self.gloss_head
        if self.cfg.word_level:
            mods["word_head"] = self.word_head
        else:
            mods["sent_bn"] = self.sent_bn
            mods["bilstm"] = self.bilstm
            mods["sent_head"] = self.sent_head
        return mods

    def parameters(self) -> dict:
        out = {}
        for prefix, module in self._modules().items():
            for name, tensor in module.params().items():
                out[f"{prefix}.{name}"] = tensor
        return out

    def buffers(self) -> dict:
        out = {}
        for prefix, module in self._modules().items():
            for name, arr in module.buffers().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def set_buffers(self, values: dict):
        for prefix, module in self._modules().items():
            keys = {name: f"{prefix}.{name}" for name in module.buffers()}
            if keys and all(v in values for v in keys.values()):
                module.set_buffers({name: values[full] for name, full in keys.items()})

    def zero_grad(self):
        for tensor in self.parameters().values():
            tensor.zero_grad()

    # -- forward passes ---------------------------------------------------------

    def frame_features(self, video: Tensor, lengths) -> Tensor:
        """[B, T, C, H, W] -> [B, T, K] pooled per-frame features."""
        mask = np.arange(video.data.shape[1])[None, :] < np.asarray(lengths)[:, None]
        x = self.stem_bn(self.stem(video), mask=mask).relu()
        for block in self.blocks:
            x = block(x, mask=mask)
        return global_avg_pool(x)

    def gloss_features(self, video: Tensor, lengths) -> MetaFrameFeatures:
        feats = self.frame_features(video, lengths)
        lengths = np.asarray(lengths, dtype=np.int64)
        frame_mask = np.arange(feats.data.shape[1])[None, :] < lengths[:, None]
        feats = self.gloss_bn(feats, mask=frame_mask)
        windows, counts = framing(feats, self.cfg.window, self.cfg.window_stride, lengths)
        b, f, l, k = windows.data.shape
        if self.cfg.no_gloss_lstm:
            meta = windows.reshape(b, f, l * k)
        else:
            flat = windows.reshape(b * f, l, k)
            _, last = self.gloss_lstm(flat)
            meta = last.reshape(b, f, self.cfg.gloss_hidden)
        return MetaFrameFeatures(meta, counts)

    def forward_full(self, video: Tensor, lengths):
        """Returns (sentence logits [B, F, N+1], gloss logits or None, meta features)."""
        if self.cfg.word_level:
            raise ShapeError("word-level model cannot run the sentence pipeline")
        if self.cfg.no_framing:
            feats = self.frame_features(video, lengths)
            counts = np.asarray(lengths, dtype=np.int64)
            meta = MetaFrameFeatures(feats, counts)
            logits_gl = None
        else:
            meta = self.gloss_features(video, lengths)
            logits_gl = self.gloss_head(meta.features)
        normed = self.sent_bn(meta.features, mask=meta.mask)
        context = self.bilstm(normed, lengths=meta.counts)
        logits_sl = self.sent_head(context)
        return logits_sl, logits_gl, meta

    def forward_word_level(self, video: Tensor, lengths) -> Tensor:
        """Classify clips that frame into exactly one meta frame: [B, N] logits."""
        if not self.cfg.word_level:
            raise ShapeError("model was not built in word-level mode")
        meta = self.gloss_features(video, lengths)
        if meta.features.data.shape[1] != 1 or np.any(meta.counts != 1):
            raise ShapeError(
                f"word-level clips must produce exactly one meta frame, got {meta.counts}")
        return self.word_head(meta.features[:, 0, :])

    def probabilities(self, logits: Tensor) -> Tensor:
        return softmax(logits, axis=2)


def transfer_parameters(source: SFNet, target: SFNet) -> SFNet:
    """Copy frame-level and gloss-level weights from a word-level model.

    Sentence-level layers and classifier heads keep their fresh
    initialization.  Shape mismatches are reported with the offending names.
    """
    prefixes = FRAME_LEVEL_PREFIXES + GLOSS_LEVEL_PREFIXES
    src_params = source.parameters()
    dst_params = target.parameters()
    src_buffers = source.buffers()
    dst_buffers = target.buffers()
    mismatched = []
    for name, tensor in dst_params.items():
        if not name.startswith(prefixes) or name not in src_params:
            continue
        if src_params[name].data.shape != tensor.data.shape:
            mismatched.append(f"{name}: {src_params[name].data.shape} vs {tensor.data.shape}")
    if mismatched:
        raise ShapeError("parameter transfer shape mismatch: " + "; ".join(mismatched))
    for name, tensor in dst_params.items():
        if name.startswith(prefixes) and name in src_params:
            tensor.data[...] = src_params[name].data
    for name, arr in dst_buffers.items():
        if name.startswith(prefixes) and name in src_buffers:
            arr[...] = src_buffers[name]
    return target
