"""Adam optimizer, gradient accumulation, segmentation metrics, and the loop.

The loss is mean-reduced over batch, channels, and pixels, so accumulating G
micro-batches (each loss scaled by 1/G before backward) produces exactly the
gradient of the G-times-larger batch.  One optimizer step consumes G
micro-batches; the optimizer step count doubles as the global step counter,
which makes checkpoint resume deterministic.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import stack_samples
from .net import OmegaNet, save_checkpoint
from .tensor import no_grad, scale, sigmoid


class DivergenceError(RuntimeError):
    """A loss or gradient went non-finite; carries the history so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam with L2-coupled weight decay (decay folded into the gradient)."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.00015
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState) -> None:
    """One update over [(name, Tensor)] given {name: gradient array}.

    g <- grad + weight_decay * param; m, v exponential moments with bias
    correction; param <- param - lr * m_hat / (sqrt(v_hat) + eps).
    A non-finite gradient rejects the whole step.
    """
    for name, p in params:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}"
            )
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def adam_state_arrays(state: AdamState) -> dict:
    """Flatten optimizer state into float32 arrays for checkpointing."""
    out = {"adam.t": np.array([state.t], dtype=np.float32)}
    for name, arr in state.m.items():
        out[f"adam.m.{name}"] = arr.astype(np.float32)
    for name, arr in state.v.items():
        out[f"adam.v.{name}"] = arr.astype(np.float32)
    return out


def adam_state_from_arrays(arrays: dict, lr=1e-4, weight_decay=0.00015) -> AdamState:
    state = AdamState(lr=lr, weight_decay=weight_decay)
    state.t = int(arrays.get("adam.t", np.zeros(1))[0])
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            state.m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v."):]] = arr.copy()
    return state


# ---------------------------------------------------------------------------
# Gradient accumulation
# ---------------------------------------------------------------------------

def accumulate_gradients(net: OmegaNet, micro_batches):
    """Mean gradient over G micro-batches of (images, mask) tensors.

    Each micro-batch loss is scaled by 1/G before backward, so the summed
    leaf gradients equal the mean of the per-micro-batch gradients.
    Returns ({name: grad}, mean loss).
    """
    g = len(micro_batches)
    if g < 1:
        raise ValueError("need at least one micro-batch")
    net.zero_grad()
    losses = []
    for images, mask in micro_batches:
        out = net.forward(images)
        loss = net.loss(out, mask)
        losses.append(loss.item())
        scale(loss, 1.0 / g).backward()
    grads = {}
    for name, p in net.named_parameters():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads, float(np.mean(losses))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class ChannelMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    dsc: float
    ppv: float
    sensitivity: float


@dataclass
class MetricsReport:
    """Per-channel confusion counts and overlap metrics, plus macro averages."""

    channels: list
    macro_dsc: float
    macro_ppv: float
    macro_sensitivity: float


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Shared thresholding used for metrics and mask export: strictly above."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return prob > threshold


def confusion_counts(prob, mask, threshold=0.5):
    """Per-channel (tp, fp, fn, tn) int64 arrays over all batch pixels."""
    prob = np.asarray(prob)
    mask = np.asarray(mask)
    if prob.shape != mask.shape:
        raise ValueError(f"shape mismatch: prob {prob.shape} vs mask {mask.shape}")
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask must be binary")
    pred = binarize(prob, threshold)
    truth = mask > 0.5
    axes = tuple(i for i in range(prob.ndim) if i != prob.ndim - 3)
    tp = np.logical_and(pred, truth).sum(axis=axes)
    fp = np.logical_and(pred, ~truth).sum(axis=axes)
    fn = np.logical_and(~pred, truth).sum(axis=axes)
    tn = np.logical_and(~pred, ~truth).sum(axis=axes)
    return tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64), tn.astype(np.int64)


def metrics_from_counts(tp, fp, fn, tn) -> MetricsReport:
    """DSC = 2TP/(|T|+|P|), PPV = TP/(TP+FP), Sensitivity = TP/(TP+FN).

    A channel empty on both sides scores 1 everywhere; a denominator that is
    empty on exactly one side scores 0 for the affected metric.
    """
    channels = []
    for c in range(len(tp)):
        t = int(tp[c] + fn[c])
        p = int(tp[c] + fp[c])
        if t == 0 and p == 0:
            dsc = ppv = sens = 1.0
        else:
            dsc = 2.0 * tp[c] / (t + p)
            ppv = tp[c] / p if p > 0 else 0.0
            sens = tp[c] / t if t > 0 else 0.0
        channels.append(ChannelMetrics(int(tp[c]), int(fp[c]), int(fn[c]), int(tn[c]),
                                       float(dsc), float(ppv), float(sens)))
    return MetricsReport(
        channels=channels,
        macro_dsc=float(np.mean([c.dsc for c in channels])),
        macro_ppv=float(np.mean([c.ppv for c in channels])),
        macro_sensitivity=float(np.mean([c.sensitivity for c in channels])),
    )


def compute_metrics(prob, mask, threshold: float = 0.5) -> MetricsReport:
    """Metrics over an (N, L, H, W) probability map against a binary mask."""
    return metrics_from_counts(*confusion_counts(prob, mask, threshold))


def evaluate(net: OmegaNet, dataset, indices=None, threshold: float = 0.5,
             micro_batch_size: int = 8) -> MetricsReport:
    """Main-head metrics over a dataset slice, accumulated in micro-batches."""
    idx = list(indices) if indices is not None else list(range(len(dataset)))
    if not idx:
        raise ValueError("cannot evaluate an empty index set")
    totals = None
    with no_grad():
        for lo in range(0, len(idx), micro_batch_size):
            chunk = [dataset[i] for i in idx[lo:lo + micro_batch_size]]
            images, mask = stack_samples(chunk, dtype=net.dtype)
            prob = sigmoid(net.forward(images).main_logits)
            counts = confusion_counts(prob.data, mask.data, threshold)
            if totals is None:
                totals = list(counts)
            else:
                totals = [a + b for a, b in zip(totals, counts)]
    return metrics_from_counts(*totals)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainLoopConfig:
    epochs: int = 1
    micro_batch_size: int = 2
    accumulation_steps: int = 4
    eval_interval: int = 50
    threshold: float = 0.5
    seed: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.micro_batch_size < 1 or self.accumulation_steps < 1:
            raise ValueError("micro_batch_size and accumulation_steps must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        return self


@dataclass
class HistoryEntry:
    step: int
    loss: float
    metrics: MetricsReport | None = None


def _epoch_order(seed: int, epoch: int, indices) -> list:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, epoch])
    order = list(indices)
    rng.shuffle(order)
    return order


def train(net: OmegaNet, dataset, cfg: TrainLoopConfig, adam: AdamState | None = None,
          indices=None, checkpoint_path=None) -> list:
    """Run the loop; returns the history of (step, loss, metrics at eval points).

    Deterministic given the seed: per-epoch sample order is a pure function of
    (seed, epoch), and the optimizer step count selects the position inside the
    epoch, so a run resumed from a checkpoint replays the uninterrupted
    schedule.  Checkpoints are written every ``eval_interval`` steps; on
    divergence the last written checkpoint is left in place and a
    DivergenceError carrying the partial history is raised.
    """
    cfg.validate()
    adam = adam if adam is not None else AdamState()
    idx = list(indices) if indices is not None else list(range(len(dataset)))
    if not idx:
        raise ValueError("training dataset is empty")
    per_step = cfg.micro_batch_size * cfg.accumulation_steps
    steps_per_epoch = len(idx) // per_step
    if steps_per_epoch < 1:
        raise ValueError(
            f"dataset slice of {len(idx)} samples is smaller than one effective"
            f" batch of {per_step}"
        )
    total_steps = cfg.epochs * steps_per_epoch
    params = net.named_parameters()
    history = []

    for step in range(adam.t, total_steps):
        epoch, pos = divmod(step, steps_per_epoch)
        order = _epoch_order(cfg.seed, epoch, idx)
        chunk = order[pos * per_step:(pos + 1) * per_step]
        micro_batches = []
        for g in range(cfg.accumulation_steps):
            part = chunk[g * cfg.micro_batch_size:(g + 1) * cfg.micro_batch_size]
            micro_batches.append(stack_samples([dataset[i] for i in part], dtype=net.dtype))
        try:
            grads, loss = accumulate_gradients(net, micro_batches)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step + 1}")
            adam_step(params, grads, adam)
        except DivergenceError as e:
            e.history = history
            raise
        entry = HistoryEntry(step=adam.t, loss=loss)
        if adam.t % cfg.eval_interval == 0 or adam.t == total_steps:
            entry.metrics = evaluate(net, dataset, idx, threshold=cfg.threshold,
                                     micro_batch_size=cfg.micro_batch_size)
            if checkpoint_path is not None:
                save_checkpoint(net, checkpoint_path, extra=adam_state_arrays(adam))
        history.append(entry)
    return history


def write_history_csv(path, history, n_channels: int) -> None:
    """step, loss, then per-channel dsc/ppv/sens (blank outside eval points)."""
    header = ["step", "loss"]
    for c in range(n_channels):
        header += [f"dsc_{c}", f"ppv_{c}", f"sens_{c}"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for entry in history:
            row = [entry.step, f"{entry.loss:.9g}"]
            if entry.metrics is not None:
                for c in entry.metrics.channels:
                    row += [f"{c.dsc:.6f}", f"{c.ppv:.6f}", f"{c.sensitivity:.6f}"]
            else:
                row += [""] * (3 * n_channels)
            writer.writerow(row)


def write_metrics_csv(path, report: MetricsReport, channel_names=None) -> None:
    """One row per channel plus a macro row: dsc, ppv, sensitivity, counts."""
    names = channel_names or [f"channel_{i}" for i in range(len(report.channels))]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["channel", "dsc", "ppv", "sensitivity", "tp", "fp", "fn", "tn"])
        for name, c in zip(names, report.channels):
            writer.writerow([name, f"{c.dsc:.6f}", f"{c.ppv:.6f}", f"{c.sensitivity:.6f}",
                             c.tp, c.fp, c.fn, c.tn])
        writer.writerow(["macro", f"{report.macro_dsc:.6f}", f"{report.macro_ppv:.6f}",
                         f"{report.macro_sensitivity:.6f}", "", "", "", ""])


def format_metrics(report: MetricsReport, channel_names=None) -> str:
    """Fixed-width table with the DSC / PPV / Sensi column layout."""
    names = channel_names or [f"channel_{i}" for i in range(len(report.channels))]
    lines = [f"{'':<10}{'DSC':>8}{'PPV':>8}{'Sensi':>8}"]
    for name, c in zip(names, report.channels):
        lines.append(f"{name:<10}{c.dsc:>8.4f}{c.ppv:>8.4f}{c.sensitivity:>8.4f}")
    lines.append(
        f"{'macro':<10}{report.macro_dsc:>8.4f}{report.macro_ppv:>8.4f}"
        f"{report.macro_sensitivity:>8.4f}"
    )
    return "\n".join(lines)
