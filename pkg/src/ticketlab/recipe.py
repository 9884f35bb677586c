"""Retraining recipes: loss variants and initialization policies.

Loss variants: hard cross-entropy, label smoothing, and distillation against
a trained dense teacher. Initialization policies: the lottery init itself,
rewinding to an early dense checkpoint, and layer-wise positive rescaling of
the lottery init chosen by a one-step look-ahead objective.

kd_loss returns the raw KL divergence between the temperature softmaxes, so
the temperature limits behave as expected (tau -> inf gives 0). The usual
tau^2 gradient compensation is applied where the training objective is
assembled, not inside the measurement.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Graph, Tensor

DEFAULT_ALPHA = 0.1
DEFAULT_TAU = 4.0
DEFAULT_REWIND_FRACTION = 0.18
RESCALE_GRID = (0.5, 1.0 / math.sqrt(2.0), 1.0, math.sqrt(2.0), 2.0)
RESCALE_BOUNDS = (0.25, 4.0)
RESCALE_PASSES = 5


class RecipeError(ValueError):
    pass


@dataclass
class SoftTarget:
    probs: np.ndarray
    K: int
    alpha: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (self.K,):
            raise RecipeError(f"target needs {self.K} entries, got "
                              f"{self.probs.shape}")
        if (self.probs < 0).any():
            raise RecipeError("target probabilities must be >= 0")
        if abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise RecipeError(f"target sums to {self.probs.sum()}, not 1")


@dataclass
class LossSpec:
    kind: str = "hard"               # hard | label_smooth | kd
    alpha: float = DEFAULT_ALPHA     # label_smooth
    tau: float = DEFAULT_TAU         # kd
    teacher: str = ""                # kd: checkpoint reference

    def __post_init__(self):
        if self.kind not in ("hard", "label_smooth", "kd"):
            raise RecipeError(f"unknown loss kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise RecipeError(f"alpha must be in [0,1], got {self.alpha}")
        if self.tau <= 0:
            raise RecipeError(f"tau must be positive, got {self.tau}")


@dataclass
class InitPolicy:
    kind: str = "lottery"            # lottery | rewind | rescaled
    epoch: int = 0                   # rewind target
    bounds: tuple = RESCALE_BOUNDS
    grid: tuple = RESCALE_GRID
    passes: int = RESCALE_PASSES
    inner_lr: float = 0.1
    source: str = ""                 # checkpoint store reference

    def __post_init__(self):
        if self.kind not in ("lottery", "rewind", "rescaled"):
            raise RecipeError(f"unknown init policy {self.kind!r}")
        lo, hi = self.bounds
        if not 0.0 < lo < 1.0 < hi:
            raise RecipeError(f"rescale bounds need lo < 1 < hi, got {self.bounds}")
        if any(g <= 0 for g in self.grid):
            raise RecipeError("rescale grid entries must be positive")


def smooth_labels(onehot, alpha, K):
    """y_k(1 - alpha) + alpha/K. Correct class gets (1-alpha) + alpha/K."""
    if not 0.0 <= alpha <= 1.0:
        raise RecipeError(f"alpha must be in [0,1], got {alpha}")
    if K < 2:
        raise RecipeError(f"need at least 2 classes, got {K}")
    y = np.asarray(onehot, dtype=np.float64)
    if y.shape != (K,):
        raise RecipeError(f"onehot needs {K} entries, got {y.shape}")
    hits = int((y == 1.0).sum())
    if hits != 1 or int((y == 0.0).sum()) != K - 1:
        raise RecipeError("onehot must have exactly one 1 and K-1 zeros")
    probs = y * (1.0 - alpha) + alpha / K
    return SoftTarget(probs, K, alpha)


def smooth_label_matrix(labels, K, alpha):
    """Batch form: (N, K) smoothed targets from integer labels."""
    labels = np.asarray(labels)
    out = np.full((labels.shape[0], K), alpha / K, dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = (1.0 - alpha) + alpha / K
    return out


def _log_softmax64(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ce_loss(logits, target):
    """-sum(t_k log softmax(logits)_k), max-subtraction stabilized."""
    probs = target.probs if isinstance(target, SoftTarget) else np.asarray(target)
    return float(-(probs * _log_softmax64(logits)).sum())


def kd_loss(student_logits, teacher_logits, tau):
    """KL(teacher^tau || student^tau) of the temperature softmaxes.
    Unscaled; zero iff the distributions coincide."""
    if tau <= 0:
        raise RecipeError(f"tau must be positive, got {tau}")
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise RecipeError(f"logit shapes differ: {s.shape} vs {t.shape}")
    log_q = _log_softmax64(t / tau)
    log_p = _log_softmax64(s / tau)
    q = np.exp(log_q)
    return float((q * (log_q - log_p)).sum(axis=-1).mean())


# -- graph loss assembly (used by the trainer) -------------------------------

def attach_ce_loss(g, logits, targets):
    """Mean cross-entropy of the batch against constant targets (N, K)."""
    t = g.const(np.asarray(targets, dtype=np.float32))
    ls = g.log_softmax(logits, axis=1)
    loss = g.neg(g.mean(g.sum(g.mul(ls, t), axis=1)))
    g.mark_loss(loss)
    return loss

def attach_kd_loss(g, logits, teacher_logits, tau, compensate=True):
    """Mean KL(teacher^tau || student^tau) over the batch as the graph loss.
    With compensate=True the node is scaled by tau^2 so gradient magnitude
    stays comparable across temperatures."""
    log_q = _log_softmax64(np.asarray(teacher_logits) / tau)
    q = np.exp(log_q)
    entropy_term = float((q * log_q).sum(axis=-1).mean())
    ls = g.log_softmax(g.scale(logits, 1.0 / tau), axis=1)
    cross = g.mean(g.sum(g.mul(ls, g.const(q.astype(np.float32))), axis=1))
    kl = g.add(g.neg(cross), g.const(np.float32(entropy_term)))
    loss = g.scale(kl, tau * tau) if compensate else kl
    g.mark_loss(loss)
    return loss


def rewind_epoch(fraction, total_epochs):
    """Smallest epoch covering `fraction` of training: ceil(f * total).
    An 18% fraction lands on epoch 33 of 180 and epoch 4 of 20."""
    if not 0.0 <= fraction < 1.0:
        raise RecipeError(f"rewind fraction must be in [0,1), got {fraction}")
    return math.ceil(fraction * total_epochs - 1e-9)


def rewind(checkpoints, epoch):
    """Weights recorded at the end of `epoch` during dense training.
    `checkpoints` maps epoch -> named weight arrays; epoch 0 is the
    initialization itself."""
    if epoch not in checkpoints:
        raise RecipeError(f"no checkpoint for epoch {epoch}; available: "
                          f"{sorted(checkpoints)}")
    return {k: np.asarray(v, dtype=np.float32).copy()
            for k, v in checkpoints[epoch].items()}


def rescale_init(model, mask, batch1, batch2, policy, loss_targets=None):
    """Per-block positive scale coefficients for the masked lottery init.

    Greedy coordinate descent over the blocks in topological order: each
    block tries the multiplicative grid (clipped to bounds), keeping a
    candidate only if it strictly lowers the look-ahead objective = loss on
    batch2 after one plain SGD step (inner_lr) computed on batch1. Collapsed
    blocks keep scale 1. The model is left with the scaled, masked weights.
    """
    from .models import build_graph  # local import: models has no recipe dep

    if policy.kind != "rescaled":
        raise RecipeError(f"policy kind must be 'rescaled', got {policy.kind!r}")
    x1, y1 = batch1
    x2, y2 = batch2
    K = model.spec.num_classes
    t1 = loss_targets(y1) if loss_targets else np.eye(K, dtype=np.float32)[y1]
    t2 = loss_targets(y2) if loss_targets else np.eye(K, dtype=np.float32)[y2]

    names = [n for n in model.weight_block_names() if n in mask.prunable]
    w0 = {n: model.params[n].data.copy() for n in model.params}
    masked0 = {n: w0[n] * mask.blocks[n] for n in names}
    collapsed = {n for n in names if not mask.blocks[n].any()}

    g1, logits1 = build_graph(model)
    attach_ce_loss(g1, logits1, t1)
    g2, logits2 = build_graph(model)
    attach_ce_loss(g2, logits2, t2)
    leaves = g1.trainable_leaves()

    def set_weights(scales):
        for n in model.params:
            if n in names:
                model.params[n].data = (masked0[n] * np.float32(scales[n]))
            else:
                model.params[n].data = w0[n].copy()

    def objective(scales):
        set_weights(scales)
        g1.forward({"x": x1}, training=True, update_stats=False)
        g1.backward()
        lr = np.float32(policy.inner_lr)
        for leaf in leaves:
            leaf.tensor.data = leaf.tensor.data - lr * leaf.tensor.grad
        for n in names:  # the step must not resurrect pruned weights
            model.params[n].data = model.params[n].data * mask.blocks[n]
        out = g2.forward({"x": x2}, training=True, update_stats=False)
        return float(out.data)

    lo, hi = policy.bounds
    scales = {n: 1.0 for n in names}
    best = objective(scales)
    for _ in range(int(policy.passes)):
        improved = False
        for n in names:
            if n in collapsed:
                continue
            for gmul in policy.grid:
                cand = scales[n] * gmul
                if cand == scales[n] or not lo <= cand <= hi:
                    continue
                trial = dict(scales)
                trial[n] = cand
                val = objective(trial)
                if val < best:
                    best = val
                    scales = trial
                    improved = True
        if not improved:
            break
    for n in collapsed:
        scales[n] = 1.0
    set_weights(scales)
    return scales
