"""Sequence training losses and decoding.

The CTC loss sums the probabilities of every emission path that collapses
(remove repeats, then blanks) to the target sequence, computed with a
log-space forward recursion over the blank-extended label sequence.  Its
gradient uses the matching backward recursion.  Blank id is fixed at 0;
vocabulary ids start at 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _node, log_softmax

BLANK_ID = 0

__all__ = [
    "BLANK_ID",
    "InfeasibleTargetError",
    "LossReport",
    "ctc_loss",
    "greedy_decode",
    "kl_regularizer",
    "combined_loss",
    "extended_labels",
    "min_frames_required",
]


class InfeasibleTargetError(ValueError):
    """No emission path of the given length can produce the target."""


@dataclass
class LossReport:
    loss_ctc: float
    loss_kl: float
    total: float
    regularizer_active: bool


def extended_labels(target) -> np.ndarray:
    """Interleave blanks: y -> [_, y1, _, y2, ..., _], length 2|y|+1."""
    ext = np.full(2 * len(target) + 1, BLANK_ID, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames_required(target) -> int:
    """Shortest emission path: one step per label plus a separating blank
    between equal consecutive labels."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_targets(targets, frame_counts, alphabet, sample_ids=None):
    for b, (target, count) in enumerate(zip(targets, frame_counts)):
        name = sample_ids[b] if sample_ids is not None else str(b)
        for gid in target:
            if not 1 <= gid < alphabet:
                raise InfeasibleTargetError(
                    f"sample {name}: gloss id {gid} outside [1, {alphabet - 1}]")
        need = min_frames_required(target)
        if count < need:
            raise InfeasibleTargetError(
                f"sample {name}: {count} output steps cannot emit a target of "
                f"length {len(target)} needing at least {need} steps")


def _forward_alphas(lp, ext, allow_skip):
    """Log-space alpha recursion; lp is [T, A] log-probs for one sample."""
    steps = lp.shape[0]
    states = ext.shape[0]
    alphas = np.full((steps, states), -np.inf)
    alphas[0, 0] = lp[0, ext[0]]
    if states > 1:
        alphas[0, 1] = lp[0, ext[1]]
    with np.errstate(invalid="ignore"):
        for t in range(1, steps):
            prev = alphas[t - 1]
            step1 = np.full(states, -np.inf)
            step1[1:] = prev[:-1]
            step2 = np.full(states, -np.inf)
            step2[2:] = prev[:-2]
            merged = np.logaddexp(prev, step1)
            merged = np.where(allow_skip, np.logaddexp(merged, step2), merged)
            alphas[t] = merged + lp[t, ext]
    return alphas


def _backward_betas(lp, ext, allow_skip):
    """Betas exclude the emission at their own step (they score the future)."""
    steps = lp.shape[0]
    states = ext.shape[0]
    betas = np.full((steps, states), -np.inf)
    betas[-1, -1] = 0.0
    if states > 1:
        betas[-1, -2] = 0.0
    skip_from = np.zeros(states, dtype=bool)
    skip_from[:max(states - 2, 0)] = allow_skip[2:]
    for t in range(steps - 2, -1, -1):
        nxt = betas[t + 1] + lp[t + 1, ext]
        step1 = np.full(states, -np.inf)
        step1[:-1] = nxt[1:]
        step2 = np.full(states, -np.inf)
        step2[:max(states - 2, 0)] = nxt[2:]
        merged = np.logaddexp(nxt, step1)
        betas[t] = np.where(skip_from, np.logaddexp(merged, step2), merged)
    return betas


def ctc_loss(logits: Tensor, targets, frame_counts, sample_ids=None) -> Tensor:
    """Mean negative log-likelihood of the targets under the CTC path model.

    ``logits`` is [B, F, A] (A = vocabulary + blank); ``frame_counts`` gives
    each sample's valid output steps.  Differentiable with respect to the
    logits; padded steps receive zero gradient.
    """
    frame_counts = np.asarray(frame_counts, dtype=np.int64)
    alphabet = logits.data.shape[2]
    _check_targets(targets, frame_counts, alphabet, sample_ids)
    lp = log_softmax(logits, axis=2)
    return _ctc_nll(lp, targets, frame_counts)


def _ctc_nll(lp: Tensor, targets, frame_counts) -> Tensor:
    batch = lp.data.shape[0]
    exts = [extended_labels(t) for t in targets]
    skips = []
    for ext in exts:
        allow = np.zeros(len(ext), dtype=bool)
        allow[2:] = (ext[2:] != BLANK_ID) & (ext[2:] != ext[:-2])
        skips.append(allow)
    all_alphas = []
    log_likelihoods = np.empty(batch)
    for b in range(batch):
        sample_lp = lp.data[b, :frame_counts[b]]
        alphas = _forward_alphas(sample_lp, exts[b], skips[b])
        tail = alphas[-1, -1]
        if len(exts[b]) > 1:
            with np.errstate(invalid="ignore"):
                tail = np.logaddexp(tail, alphas[-1, -2])
        all_alphas.append(alphas)
        log_likelihoods[b] = tail
    nll = -log_likelihoods.mean()

    def backward(g):
        gout = float(g)
        grad = np.zeros_like(lp.data)
        for b in range(batch):
            steps = frame_counts[b]
            sample_lp = lp.data[b, :steps]
            betas = _backward_betas(sample_lp, exts[b], skips[b])
            ab = all_alphas[b] + betas
            occupancy = np.full((steps, lp.data.shape[2]), -np.inf)
            for t in range(steps):
                np.logaddexp.at(occupancy[t], exts[b], ab[t])
            grad[b, :steps] = -np.exp(occupancy - log_likelihoods[b])
        lp._accumulate(grad * (gout / batch))

    return _node(np.asarray(nll), (lp,), backward)


def greedy_decode(probs, frame_counts) -> list:
    """Per-step argmax, collapse consecutive repeats, remove blanks."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    frame_counts = np.asarray(frame_counts, dtype=np.int64)
    best = data.argmax(axis=2)
    decoded = []
    for b in range(data.shape[0]):
        path = best[b, :frame_counts[b]]
        keep = np.ones(len(path), dtype=bool)
        keep[1:] = path[1:] != path[:-1]
        collapsed = path[keep]
        decoded.append([int(v) for v in collapsed if v != BLANK_ID])
    return decoded


def kl_regularizer(p_gl: Tensor, p_sl: Tensor, masks: np.ndarray,
                   block_teacher_grad: bool = True, eps: float = 1e-12) -> Tensor:
    """Divergence of the emission-head distributions from the gloss-head ones,
    ``sum_n p_sl_n * log(p_sl_n / p_gl_n)``, averaged over each sample's valid
    meta frames and then over the batch.

    The sentence-level head acts as the teacher: by default no gradient flows
    into ``p_sl``, so only the gloss head is pulled toward it.  Set
    ``block_teacher_grad=False`` to let the divergence shape both heads.
    """
    masks = np.asarray(masks, dtype=bool)
    counts = masks.sum(axis=1)
    teacher = p_sl.detach() if block_teacher_grad else p_sl
    ratio = (teacher + eps).log() - (p_gl + eps).log()
    per_step = (teacher * ratio).sum(axis=2)
    weights = masks / np.maximum(counts, 1)[:, None]
    per_sample = (per_step * Tensor(weights)).sum(axis=1)
    return per_sample.mean()


def combined_loss(loss_ctc: Tensor, loss_kl: Tensor | None, epoch: int,
                  e_start: int):
    """Epoch-gated total: the regularizer joins strictly after ``e_start``.

    Returns (total loss tensor, report).  When inactive the total IS the CTC
    term, so a run gated off forever is bit-identical to one with no
    regularizer at all.
    """
    active = epoch > e_start and loss_kl is not None
    if active:
        total = loss_ctc + loss_kl
    else:
        total = loss_ctc
    report = LossReport(
        loss_ctc=loss_ctc.item(),
        loss_kl=loss_kl.item() if loss_kl is not None else 0.0,
        total=total.item(),
        regularizer_active=active,
    )
    return total, report
