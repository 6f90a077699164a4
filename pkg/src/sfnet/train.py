"""Training runtime: Adam, the halving learning-rate schedule, the gated
epoch loop, evaluation, and bit-exact checkpointing.

Epochs are 1-based so the regularizer gate reads as "strictly after
``e_start``".  All randomness flows from (seed, epoch), so equal seeds give
bit-identical trajectories.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .ctc import InfeasibleTargetError, combined_loss, ctc_loss, kl_regularizer, min_frames_required
from .data import batch_loader, read_manifest
from .metrics import WerBreakdown, wer
from .model import ModelConfig, SFNet, meta_frame_count
from .tensor import Tensor, array_from_bytes, array_to_bytes, no_grad, softmax

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "lr_at_epoch",
    "clip_gradients",
    "train_loop",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "TrainingDivergence",
]


class TrainingDivergence(RuntimeError):
    """Loss became non-finite; carries epoch/batch diagnostics."""


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 2
    e_start: int = 30
    kl_scale: float = 1.0
    kl_bidirectional: bool = False
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_every: int = 0       # 0: final checkpoint only
    dataset_kind: str = "synth"
    input_size: int = 64
    decimate: int = 1
    early_stop_train_wer: float = -1.0   # negative: never stop early

    def validate(self):
        if not 0 <= self.e_start <= self.epochs:
            raise ValueError("e_start must lie in [0, epochs]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.decimate < 1:
            raise ValueError("decimate must be >= 1")
        return self

    def to_text(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kwargs = {}
        typed = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in typed:
                raise ValueError(f"unknown config key: {key}")
            kind = typed[key]
            if kind == "int":
                kwargs[key] = int(value)
            elif kind == "float":
                kwargs[key] = float(value)
            elif kind == "bool":
                kwargs[key] = value.lower() == "true"
            else:
                kwargs[key] = value
        return cls(**kwargs).validate()


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step_count: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam update, in place.

    Weight decay enters as a coupled L2 gradient term.  Parameters with no
    gradient this step are left untouched (their moments do not advance).
    """
    state.step_count += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Initial rate through the first half of training, then halved once."""
    return cfg.lr if epoch <= cfg.epochs // 2 else cfg.lr * 0.5


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- checkpointing ------------------------------------------------------------------

_MAGIC = b"SFNETCK1"


def _write_block(fh, payload: bytes):
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)


def _read_block(buf: bytes, offset: int):
    (size,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    return buf[offset:offset + size], offset + size


def save_checkpoint(path, model: SFNet, train_cfg: TrainConfig, epoch: int,
                    state: AdamState | None = None):
    """Container: config snapshots plus a name -> tensor-blob index."""
    entries = {}
    for name, tensor in model.parameters().items():
        entries[f"param/{name}"] = tensor.data
    for name, arr in model.buffers().items():
        entries[f"buffer/{name}"] = arr
    if state is not None:
        for name, arr in state.m.items():
            entries[f"adam_m/{name}"] = arr
        for name, arr in state.v.items():
            entries[f"adam_v/{name}"] = arr
        entries["adam_t"] = np.asarray(float(state.step_count))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", epoch))
        _write_block(fh, model.cfg.to_text().encode("utf-8"))
        _write_block(fh, train_cfg.to_text().encode("utf-8"))
        fh.write(struct.pack("<Q", len(entries)))
        for name in sorted(entries):
            _write_block(fh, name.encode("utf-8"))
            fh.write(array_to_bytes(entries[name]))


def load_checkpoint(path):
    """Returns (model, train_cfg, adam_state or None, epoch)."""
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (epoch,) = struct.unpack_from("<Q", buf, 8)
    cfg_text, offset = _read_block(buf, 16)
    tcfg_text, offset = _read_block(buf, offset)
    model_cfg = ModelConfig.from_text(cfg_text.decode("utf-8"))
    train_cfg = TrainConfig.from_text(tcfg_text.decode("utf-8"))
    (count,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    entries = {}
    for _ in range(count):
        name, offset = _read_block(buf, offset)
        arr, offset = array_from_bytes(buf, offset)
        entries[name.decode("utf-8")] = arr

    model = SFNet(model_cfg, np.random.default_rng(0))
    params = model.parameters()
    for name, tensor in params.items():
        tensor.data[...] = entries[f"param/{name}"]
    model.set_buffers({name[len("buffer/"):]: arr for name, arr in entries.items()
                       if name.startswith("buffer/")})
    state = None
    if "adam_t" in entries:
        state = AdamState(
            m={k[len("adam_m/"):]: v for k, v in entries.items() if k.startswith("adam_m/")},
            v={k[len("adam_v/"):]: v for k, v in entries.items() if k.startswith("adam_v/")},
            step_count=int(entries["adam_t"]))
    return model, train_cfg, state, int(epoch)


# -- evaluation ----------------------------------------------------------------------


def evaluate(model: SFNet, manifest_path, tcfg: TrainConfig):
    """Greedy-decode WER over a manifest; returns (pooled wer, report entries)."""
    from .ctc import greedy_decode

    model.eval()
    entries = []
    errors = 0
    ref_len = 0
    with no_grad():
        for batch in batch_loader(manifest_path, tcfg.batch_size, tcfg.seed, 0,
                                  kind=tcfg.dataset_kind, train=False,
                                  target=tcfg.input_size,
                                  min_length=_required_length(model.cfg),
                                  decimate=tcfg.decimate):
            logits_sl, _, meta = model.forward_full(batch.frames, batch.lengths)
            probs = softmax(logits_sl, axis=2)
            decoded = greedy_decode(probs, meta.counts)
            for sid, ref, hyp in zip(batch.ids, batch.targets, decoded):
                breakdown = wer(ref, hyp)
                entries.append((sid, breakdown, hyp))
                errors += breakdown.errors
                ref_len += breakdown.reference_length
    return errors / max(ref_len, 1), entries


def _required_length(cfg: ModelConfig) -> int:
    return 1 if cfg.no_framing else cfg.window


def preflight_targets(manifest_path, mcfg: ModelConfig, tcfg: TrainConfig):
    """Reject samples whose targets admit no CTC alignment, naming them."""
    problems = []
    for entry in read_manifest(manifest_path):
        frames = -(-entry.frames // tcfg.decimate)
        if mcfg.no_framing:
            steps = frames
        elif frames < mcfg.window:
            problems.append(f"{entry.sample_id}: {frames} frames < window {mcfg.window}")
            continue
        else:
            steps = meta_frame_count(frames, mcfg.window, mcfg.window_stride)
        need = min_frames_required(entry.glosses)
        if steps < need:
            problems.append(f"{entry.sample_id}: {steps} output steps < {need} required "
                            f"for target length {len(entry.glosses)}")
        if any(not 1 <= g <= mcfg.vocab_size for g in entry.glosses):
            problems.append(f"{entry.sample_id}: gloss id outside vocabulary")
    if problems:
        raise InfeasibleTargetError("infeasible targets:\n  " + "\n  ".join(problems))


# -- the loop ------------------------------------------------------------------------


def train_loop(model: SFNet, train_manifest, tcfg: TrainConfig, eval_manifest=None,
               out_dir=None, log=None):
    """Run the full schedule; returns the per-epoch history.

    Each epoch: forward -> CTC loss (+ gated KL regularizer) -> backward ->
    clipped Adam step, then held-out WER.  Aborts with diagnostics on a
    non-finite loss.
    """
    tcfg.validate()
    mcfg = model.cfg
    preflight_targets(train_manifest, mcfg, tcfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    raw = {k: p.data for k, p in params.items()}
    state = AdamState.init(raw)
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        start = time.perf_counter()
        lr = lr_at_epoch(epoch, tcfg)
        model.train()
        sum_ctc = sum_kl = 0.0
        batches = 0
        active = False
        for batch in batch_loader(train_manifest, tcfg.batch_size, tcfg.seed, epoch,
                                  kind=tcfg.dataset_kind, train=True,
                                  target=tcfg.input_size,
                                  min_length=_required_length(mcfg),
                                  decimate=tcfg.decimate):
            model.zero_grad()
            logits_sl, logits_gl, meta = model.forward_full(batch.frames, batch.lengths)
            loss_ctc = ctc_loss(logits_sl, batch.targets, meta.counts,
                                sample_ids=batch.ids)
            loss_kl = None
            if logits_gl is not None and epoch > tcfg.e_start:
                p_gl = softmax(logits_gl, axis=2)
                p_sl = softmax(logits_sl, axis=2)
                loss_kl = kl_regularizer(p_gl, p_sl, meta.mask,
                                         block_teacher_grad=not tcfg.kl_bidirectional)
                if tcfg.kl_scale != 1.0:
                    loss_kl = loss_kl * tcfg.kl_scale
            total, report = combined_loss(loss_ctc, loss_kl, epoch, tcfg.e_start)
            if not np.isfinite(report.total):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}, batch {batch.ids}: "
                    f"ctc={report.loss_ctc} kl={report.loss_kl}")
            total.backward()
            clip_gradients(params, tcfg.grad_clip)
            grads = {k: p.grad for k, p in params.items()}
            adam_step(raw, grads, state, lr, weight_decay=tcfg.weight_decay)
            sum_ctc += report.loss_ctc
            sum_kl += report.loss_kl
            active = report.regularizer_active
            batches += 1
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss_ctc": sum_ctc / max(batches, 1),
            "loss_kl": sum_kl / max(batches, 1),
            "regularizer_active": active,
            "seconds": time.perf_counter() - start,
        }
        want_train_wer = tcfg.early_stop_train_wer >= 0.0
        if want_train_wer:
            record["train_wer"], _ = evaluate(model, train_manifest, tcfg)
        if eval_manifest is not None:
            record["eval_wer"], _ = evaluate(model, eval_manifest, tcfg)
        history.append(record)
        if log is not None:
            log(_format_epoch(record))
        if out is not None and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", model, tcfg, epoch, state)
        if want_train_wer and record["train_wer"] <= tcfg.early_stop_train_wer:
            break
    if out is not None:
        save_checkpoint(out / "final.ckpt", model, tcfg, history[-1]["epoch"], state)
        (out / "train.log").write_text(
            "".join(_format_epoch(r) + "\n" for r in history), encoding="utf-8")
    return history


def _format_epoch(record: dict) -> str:
    parts = [f"epoch {record['epoch']:3d}", f"lr {record['lr']:.2e}",
             f"ctc {record['loss_ctc']:.4f}", f"kl {record['loss_kl']:.4f}",
             f"reg {'on' if record['regularizer_active'] else 'off'}"]
    if "train_wer" in record:
        parts.append(f"train_wer {record['train_wer']:.4f}")
    if "eval_wer" in record:
        parts.append(f"eval_wer {record['eval_wer']:.4f}")
    parts.append(f"{record['seconds']:.1f}s")
    return "  ".join(parts)
