"""Masked SGD training and the three-step pipeline.

The pipeline: (1) train the dense net, checkpointing its initialization and
the rewind epoch; (2) derive masks by iterative or one-shot global magnitude
pruning, always with the vanilla architecture and recipe so the tweaks can
never leak into mask finding; (3) retrain each selected sparsity level from
the lottery init with the configured tweaks (skip injection, activation
swap, rescaled init, soft/distilled labels, rewinding).

Determinism contract: everything is a function of the config seed. Batch
order depends only on (seed, epoch), never on the stage, so a sparsity-0
retrain replays dense training bit for bit.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .datasets import load_dataset, split_train_val
from .models import build_graph, build_model, make_arch
from .pruning import (PruneSchedule, apply_mask, detect_layer_collapse,
                      full_mask, global_magnitude_prune)
from .rand import rng_for
from .recipe import (DEFAULT_REWIND_FRACTION, InitPolicy, LossSpec,
                     rescale_init, rewind_epoch, smooth_label_matrix)

MIN_BATCH = 2  # batch-norm needs at least two samples for a batch variance


class TrainError(RuntimeError):
    pass


@dataclass
class OptState:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    schedule: list = field(default_factory=list)   # [(epoch, multiplier)]
    buffers: dict = field(default_factory=dict)     # name -> ndarray


def lr_at(schedule, epoch, lr0=0.1):
    """lr0 times every multiplier whose trigger epoch has passed."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    lr = float(lr0)
    for e, mult in schedule:
        if e <= epoch:
            lr *= mult
    return lr


def decay_schedule(total_epochs, factor=0.1, fractions=(0.5, 0.75)):
    """Drop points at the given fractions of the run (90/135 for 180)."""
    return [(math.floor(f * total_epochs), factor) for f in fractions]


def sgd_step(model, grads, mask, opt, lr):
    """v <- momentum*v + (g + wd*w); w <- w - lr*v; masked positions pinned
    to exactly 0 in both w and v. Rejects non-finite gradients by name
    before touching anything."""
    for name, g in grads.items():
        arr = g.data if isinstance(g, Tensor) else g
        if not np.all(np.isfinite(arr)):
            raise TrainError(f"non-finite gradient in block {name}; step aborted")
    lr = np.float32(lr)
    mom = np.float32(opt.momentum)
    wd = np.float32(opt.weight_decay)
    for name, g in grads.items():
        garr = g.data if isinstance(g, Tensor) else g
        p = model.params[name]
        v = opt.buffers.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mom * v + (garr + wd * p.data)
        p.data = p.data - lr * v
        if mask is not None and name in mask.prunable:
            m = mask.blocks[name]
            p.data = p.data * m
            v = v * m
        opt.buffers[name] = v
    return model, opt


@dataclass
class ExperimentConfig:
    arch: str = "mlp-300-100"
    dataset: str = "digits"
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    split_ratio: float = 0.9
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    decay_fractions: tuple = (0.5, 0.75)
    decay_factor: float = 0.1
    prune: PruneSchedule = field(default_factory=PruneSchedule)
    # tweaks; all of them apply to the retraining stage only
    skips: bool = False
    activation: str = "relu"
    rescale: bool = False
    rescale_passes: int = 5
    loss: LossSpec = field(default_factory=LossSpec)
    rewind: bool = False
    rewind_fraction: float = DEFAULT_REWIND_FRACTION
    checkpoint_epochs: tuple = ()
    retrain_rounds: tuple = ()      # empty = every round

    def __post_init__(self):
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split ratio must be in (0,1), got "
                             f"{self.split_ratio}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < MIN_BATCH:
            raise ValueError(f"batch size must be >= {MIN_BATCH}")

    def schedule(self):
        return decay_schedule(self.epochs, self.decay_factor,
                              self.decay_fractions)

    def rewind_target(self):
        return rewind_epoch(self.rewind_fraction, self.epochs) if self.rewind else 0

    def is_vanilla_retrain(self):
        return (not self.skips and self.activation == "relu"
                and not self.rescale and self.loss.kind == "hard"
                and not self.rewind)


@dataclass
class TrainResult:
    metrics: list                 # rows: epoch, split, loss, accuracy, lr
    best_val_accuracy: float
    best_epoch: int
    best_state: dict              # params + bn state at the best val epoch
    final_state: dict
    checkpoints: dict             # epoch -> state copies
    warnings: list


def _state_copy(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if idx.shape[0] >= MIN_BATCH:
            yield idx


def model_logits(model, x, batch_size=256):
    """Inference-mode logits, evaluated in fixed-size chunks."""
    g, logits = build_graph(model)
    g.mark_loss(g.mean(logits))
    outs = []
    for start in range(0, x.shape[0], batch_size):
        g.forward({"x": x[start:start + batch_size]}, training=False)
        outs.append(g.value_of(g.nodes[logits.id]).copy())
    return np.concatenate(outs)


def evaluate(model, x, y, batch_size=256):
    """(mean hard-CE loss, accuracy) in inference mode."""
    logits = model_logits(model, x, batch_size)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(y.shape[0]), y].mean())
    acc = float((logits.argmax(axis=1) == y).mean())
    return loss, acc


def _build_loss_graph(model, loss_spec, tau_compensate=True):
    """Graph with input-bound targets so one graph serves every batch.
    Inputs: x, t (targets or teacher soft probs), and for kd additionally h
    (the teacher entropy term of the KL)."""
    g, logits = build_graph(model)
    t = g.input("t")
    if loss_spec.kind == "kd":
        tau = loss_spec.tau
        ls = g.log_softmax(g.scale(logits, 1.0 / tau), axis=1)
        cross = g.mean(g.sum(g.mul(ls, t), axis=1))
        kl = g.add(g.neg(cross), g.input("h"))
        loss = g.scale(kl, tau * tau) if tau_compensate else kl
    else:
        ls = g.log_softmax(logits, axis=1)
        loss = g.neg(g.mean(g.sum(g.mul(ls, t), axis=1)))
    g.mark_loss(loss)
    return g, logits


def _targets_for(loss_spec, y_batch, num_classes, teacher_logits_batch=None):
    """(t, h) inputs for the loss graph."""
    if loss_spec.kind == "hard":
        return np.eye(num_classes, dtype=np.float32)[y_batch], None
    if loss_spec.kind == "label_smooth":
        return (smooth_label_matrix(y_batch, num_classes,
                                    loss_spec.alpha).astype(np.float32), None)
    z = teacher_logits_batch.astype(np.float64) / loss_spec.tau
    z = z - z.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.exp(logq)
    h = np.float32((q * logq).sum(axis=1).mean())
    return q.astype(np.float32), h


def train(model, mask, data, config, loss_spec=None, teacher_logits=None,
          collect_epochs=()):
    """SGD training of (optionally masked) `model`.

    data = (x_train, y_train, x_val, y_val). Batch order is a function of
    (config.seed, epoch) only. Checkpoints are captured at epoch 0 (the
    incoming weights), every epoch in `collect_epochs`, and the final epoch.
    Best-val weights (by accuracy) are retained separately.
    """
    x_tr, y_tr, x_val, y_val = data
    if x_tr.shape[0] == 0 or x_val.shape[0] == 0:
        raise TrainError("empty dataset split")
    loss_spec = loss_spec or LossSpec()
    if loss_spec.kind == "kd" and teacher_logits is None:
        raise TrainError("kd loss needs teacher logits")
    K = model.spec.num_classes

    warnings = []
    if mask is not None:
        dead = detect_layer_collapse(mask)
        if dead:
            warnings.append(f"collapsed blocks at start: {dead}")
        apply_mask(model, mask)

    opt = OptState(lr0=config.lr0, momentum=config.momentum,
                   weight_decay=config.weight_decay,
                   schedule=config.schedule())
    g, logits_node = _build_loss_graph(model, loss_spec)
    leaves = {leaf.name: leaf for leaf in g.trainable_leaves()}

    checkpoints = {0: _state_copy(model)}
    metrics = []
    best_acc, best_epoch = -1.0, 0
    best_state = _state_copy(model)
    n = x_tr.shape[0]

    for epoch in range(1, config.epochs + 1):
        lr = lr_at(opt.schedule, epoch - 1, opt.lr0)
        order = rng_for(config.seed, "batches", epoch - 1).permutation(n)
        epoch_losses = []
        epoch_hits = 0
        epoch_count = 0
        for idx in _batches(n, config.batch_size, order):
            t, h = _targets_for(loss_spec, y_tr[idx], K,
                                None if teacher_logits is None
                                else teacher_logits[idx])
            inputs = {"x": x_tr[idx], "t": t}
            if h is not None:
                inputs["h"] = np.asarray(h)
            out = g.forward(inputs, training=True)
            if not g.output_finite:
                raise TrainError(f"non-finite training loss at epoch {epoch}")
            grads = g.backward()
            sgd_step(model, grads, mask, opt, lr)
            epoch_losses.append(float(out.data))
            batch_logits = g.value_of(g.nodes[logits_node.id])
            epoch_hits += int((batch_logits.argmax(axis=1) == y_tr[idx]).sum())
            epoch_count += idx.shape[0]
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0
        train_acc = epoch_hits / max(epoch_count, 1)
        val_loss, val_acc = evaluate(model, x_val, y_val, config.batch_size)
        metrics.append({"epoch": epoch, "split": "train", "loss": train_loss,
                        "accuracy": train_acc, "lr": lr})
        metrics.append({"epoch": epoch, "split": "val", "loss": val_loss,
                        "accuracy": val_acc, "lr": lr})
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = _state_copy(model)
        if epoch in collect_epochs:
            checkpoints[epoch] = _state_copy(model)

    if config.epochs == 0:
        _, best_acc = evaluate(model, x_val, y_val, config.batch_size)
        best_state = _state_copy(model)
    checkpoints[config.epochs] = _state_copy(model)
    return TrainResult(metrics=metrics, best_val_accuracy=float(best_acc),
                       best_epoch=best_epoch, best_state=best_state,
                       final_state=_state_copy(model), checkpoints=checkpoints,
                       warnings=warnings)


# -- pipeline stages ---------------------------------------------------------

@dataclass
class DenseStage:
    result: TrainResult
    init_state: dict
    rewind_state: dict
    rewind_epoch: int


@dataclass
class LevelResult:
    round_index: int
    sparsity: float
    best_val_accuracy: float
    test_accuracy: float
    collapsed: list
    rescale_scales: dict
    train_result: TrainResult


def _vanilla_arch(config, dataset):
    return make_arch(config.arch, dataset.input_shape, dataset.num_classes,
                     activation_kind="relu", injected_skips=False)


def _tweaked_arch(config, dataset):
    return make_arch(config.arch, dataset.input_shape, dataset.num_classes,
                     activation_kind=config.activation,
                     injected_skips=config.skips)


def train_dense(config, dataset=None, data=None):
    """Stage 1: vanilla-architecture dense training, hard CE. Records the
    epoch-0 initialization and the rewind checkpoint."""
    dataset = dataset or load_dataset(config.dataset)
    data = data or split_train_val(dataset, config.split_ratio, config.seed)
    spec = _vanilla_arch(config, dataset)
    model = build_model(spec, config.seed)
    rew = rewind_epoch(config.rewind_fraction, config.epochs)
    collect = {rew} | set(config.checkpoint_epochs)
    result = train(model, None, data, config, LossSpec(kind="hard"),
                   collect_epochs=sorted(collect))
    return DenseStage(result=result, init_state=result.checkpoints[0],
                      rewind_state=result.checkpoints[rew],
                      rewind_epoch=rew)


def find_masks(config, dense, dataset=None, data=None):
    """Stage 2: mask derivation. Always vanilla architecture and recipe.

    IMP: train -> prune per_round -> reset to init, repeated; round 1 prunes
    the stage-1 dense weights directly (no retraining). OMP: one cut from
    the trained dense weights to the target sparsity. Returns a list of
    (cumulative_sparsity, Mask) per round, final weights taken at the last
    epoch of each round's training.
    """
    dataset = dataset or load_dataset(config.dataset)
    data = data or split_train_val(dataset, config.split_ratio, config.seed)
    spec = _vanilla_arch(config, dataset)
    probe = build_model(spec, config.seed)
    probe.load_state(dense.result.final_state)

    if config.prune.mode == "omp":
        mask = global_magnitude_prune(probe, full_mask(probe),
                                      config.prune.target_sparsity)
        return [(mask.sparsity(), mask)]

    masks = []
    mask = global_magnitude_prune(probe, full_mask(probe),
                                  config.prune.per_round_fraction)
    masks.append((mask.sparsity(), mask))
    for _ in range(1, config.prune.rounds):
        model = build_model(spec, config.seed)
        model.load_state(dense.init_state)
        result = train(model, mask, data, config, LossSpec(kind="hard"))
        model.load_state(result.final_state)
        mask = global_magnitude_prune(model, mask,
                                      config.prune.per_round_fraction)
        masks.append((mask.sparsity(), mask))
    return masks


def retrain_level(config, dense, mask, round_index, dataset=None, data=None):
    """Stage 3: retrain one sparsity level from the lottery init with the
    configured tweaks."""
    dataset = dataset or load_dataset(config.dataset)
    data = data or split_train_val(dataset, config.split_ratio, config.seed)
    spec = _tweaked_arch(config, dataset)
    model = build_model(spec, config.seed)

    source = dense.rewind_state if config.rewind else dense.init_state
    model.load_state(_reset_bn(source, model))
    apply_mask(model, mask)

    scales = {}
    if config.rescale:
        x_tr, y_tr = data[0], data[1]
        r = rng_for(config.seed, "rescale", round_index)
        idx = r.permutation(x_tr.shape[0])
        b = config.batch_size
        if x_tr.shape[0] < 2 * b:
            b = max(MIN_BATCH, x_tr.shape[0] // 2)
        policy = InitPolicy(kind="rescaled", inner_lr=config.lr0,
                            passes=config.rescale_passes)
        scales = rescale_init(model, mask,
                              (x_tr[idx[:b]], y_tr[idx[:b]]),
                              (x_tr[idx[b:2 * b]], y_tr[idx[b:2 * b]]),
                              policy)

    teacher_logits = None
    if config.loss.kind == "kd":
        teacher = build_model(_vanilla_arch(config, dataset), config.seed)
        teacher.load_state(dense.result.best_state)
        teacher_logits = model_logits(teacher, data[0], config.batch_size)

    result = train(model, mask, data, config, config.loss,
                   teacher_logits=teacher_logits)
    best = build_model(spec, config.seed)
    best.load_state(result.best_state)
    _, test_acc = evaluate(best, dataset.x_test, dataset.y_test,
                           config.batch_size)
    return LevelResult(round_index=round_index, sparsity=mask.sparsity(),
                       best_val_accuracy=result.best_val_accuracy,
                       test_accuracy=test_acc,
                       collapsed=detect_layer_collapse(mask),
                       rescale_scales=scales, train_result=result)


def _reset_bn(state, model):
    """Lottery inits carry weights, not normalization statistics: BN running
    state restarts from scratch for every retraining."""
    out = dict(state)
    for k in model.bn_state:
        base = np.zeros_like(model.bn_state[k].data)
        if k.endswith(".var"):
            base = np.ones_like(base)
        out[k] = base
    return out


@dataclass
class PipelineResult:
    config: "ExperimentConfig"
    dense: DenseStage
    masks: list                   # [(sparsity, Mask)]
    levels: list                  # [LevelResult]
    dense_test_accuracy: float
    wall_clock: float


def run_pipeline(config, progress=None, flush=None):
    """The full three-step procedure. Returns every stage's artifacts.

    `flush`, if given, receives the partial PipelineResult before any
    mid-run exception propagates, so callers can persist what finished.
    """
    t0 = time.time()
    dataset = load_dataset(config.dataset)
    data = split_train_val(dataset, config.split_ratio, config.seed)

    def say(msg):
        if progress:
            progress(msg)

    partial = PipelineResult(config=config, dense=None, masks=[], levels=[],
                             dense_test_accuracy=float("nan"), wall_clock=0.0)
    try:
        say(f"dense: {config.arch} on {config.dataset}, {config.epochs} epochs")
        partial.dense = train_dense(config, dataset, data)
        dense_best = build_model(_vanilla_arch(config, dataset), config.seed)
        dense_best.load_state(partial.dense.result.best_state)
        _, partial.dense_test_accuracy = evaluate(
            dense_best, dataset.x_test, dataset.y_test, config.batch_size)

        say(f"masks: {config.prune.mode}, "
            f"{len(config.prune.sparsity_levels())} level(s)")
        partial.masks = find_masks(config, partial.dense, dataset, data)

        chosen = config.retrain_rounds or tuple(range(1, len(partial.masks) + 1))
        for ridx in chosen:
            if not 1 <= ridx <= len(partial.masks):
                raise ValueError(
                    f"retrain round {ridx} outside 1..{len(partial.masks)}")
            sparsity, mask = partial.masks[ridx - 1]
            say(f"retrain round {ridx}: sparsity {sparsity:.4f}")
            partial.levels.append(
                retrain_level(config, partial.dense, mask, ridx, dataset, data))
    except BaseException:
        partial.wall_clock = time.time() - t0
        if flush is not None:
            flush(partial)
        raise
    partial.wall_clock = time.time() - t0
    return partial
