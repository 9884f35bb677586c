"""Magnitude pruning: iterative and one-shot mask derivation.

Masks are binary tensors keyed by parameter-block name. Pruning pools every
conv and dense weight block globally (including the classifier head; BN
parameters and biases are never pruned) and removes the smallest-magnitude
survivors. Ties at the cut are broken by (block name, flat index) so the
mask is a pure function of the weights.
"""

import math
from dataclasses import dataclass, field

import numpy as np


class MaskError(ValueError):
    pass


@dataclass
class Mask:
    blocks: dict                      # name -> uint8 ndarray in {0,1}
    prunable: tuple = ()              # block names subject to pruning

    def __post_init__(self):
        self.prunable = tuple(self.prunable) or tuple(sorted(self.blocks))
        for name in self.prunable:
            if name not in self.blocks:
                raise MaskError(f"prunable block {name} has no mask tensor")
        for name, m in self.blocks.items():
            arr = np.asarray(m)
            if not np.isin(arr, (0, 1)).all():
                raise MaskError(f"mask {name} has values outside {{0,1}}")
            self.blocks[name] = arr.astype(np.uint8)

    def sparsity(self):
        ones = sum(int(self.blocks[n].sum()) for n in self.prunable)
        total = sum(self.blocks[n].size for n in self.prunable)
        return 1.0 - ones / total

    def density(self):
        return 1.0 - self.sparsity()

    def copy(self):
        return Mask({k: v.copy() for k, v in self.blocks.items()},
                    self.prunable)

    def is_subset_of(self, other):
        """Elementwise <= on every block (monotone shrinkage check)."""
        return all(np.all(self.blocks[n] <= other.blocks[n])
                   for n in self.prunable)


@dataclass
class PruneSchedule:
    mode: str = "imp"                 # imp | omp
    per_round_fraction: float = 0.2
    rounds: int = 1
    target_sparsity: float = 0.0     # omp only

    def __post_init__(self):
        if self.mode not in ("imp", "omp"):
            raise MaskError(f"unknown prune mode {self.mode!r}")
        if self.mode == "imp":
            if not 0.0 < self.per_round_fraction < 1.0:
                raise MaskError("per-round fraction must be in (0,1), got "
                                f"{self.per_round_fraction}")
            if self.rounds < 1:
                raise MaskError("rounds must be >= 1")
        else:
            if not 0.0 < self.target_sparsity < 1.0:
                raise MaskError("target sparsity must be in (0,1), got "
                                f"{self.target_sparsity}")

    def sparsity_levels(self):
        if self.mode == "imp":
            return imp_schedule(self.per_round_fraction, self.rounds)
        return [self.target_sparsity]


def imp_schedule(per_round, rounds):
    """Cumulative sparsity after each round: 1 - (1 - per_round)^n."""
    if not 0.0 < per_round < 1.0:
        raise MaskError(f"per-round fraction must be in (0,1), got {per_round}")
    if int(rounds) != rounds or rounds < 1:
        raise MaskError(f"rounds must be a positive integer, got {rounds}")
    return [1.0 - (1.0 - per_round) ** n for n in range(1, int(rounds) + 1)]


def full_mask(model):
    """All-ones mask over the model's prunable (conv/dense weight) blocks."""
    names = model.weight_block_names()
    return Mask({n: np.ones(model.params[n].data.shape, dtype=np.uint8)
                 for n in names}, tuple(names))


def _check_mask_matches(model, mask):
    missing = [n for n in mask.prunable if n not in model.params]
    if missing:
        raise MaskError(f"mask blocks missing from model: {missing}")
    bad = [n for n in mask.prunable
           if mask.blocks[n].shape != model.params[n].data.shape]
    if bad:
        raise MaskError(f"mask shape mismatch on blocks: {bad}")


def global_magnitude_prune(model, mask, fraction):
    """Prune the smallest-magnitude `fraction` of currently-surviving
    weights, pooled globally across prunable blocks. Already-pruned weights
    stay pruned. Returns a new Mask."""
    if not 0.0 < fraction < 1.0:
        raise MaskError(f"prune fraction must be in (0,1), got {fraction}")
    _check_mask_matches(model, mask)
    names = sorted(mask.prunable)
    mags = []
    alive = []
    for n in names:
        w = np.abs(model.params[n].data.reshape(-1))
        m = mask.blocks[n].reshape(-1).astype(bool)
        mags.append(np.where(m, w, np.inf))  # dead weights never re-compete
        alive.append(m)
    flat_mag = np.concatenate(mags)
    flat_alive = np.concatenate(alive)
    survivors = int(flat_alive.sum())
    if survivors == 0:
        raise MaskError("mask has no surviving weights left to prune")
    k = math.floor(fraction * survivors)
    if k >= survivors:
        raise MaskError("fraction would prune every surviving weight")
    new_flat = flat_alive.copy()
    if k > 0:
        # stable sort on the (block-name-sorted, flat-index) concatenation
        # realizes the documented tie-break
        order = np.argsort(flat_mag, kind="stable")
        new_flat[order[:k]] = False
    out = {}
    pos = 0
    for n in names:
        size = mask.blocks[n].size
        out[n] = new_flat[pos:pos + size].astype(np.uint8).reshape(
            mask.blocks[n].shape)
        pos += size
    blocks = {k2: v.copy() for k2, v in mask.blocks.items()}
    blocks.update(out)
    return Mask(blocks, mask.prunable)


def apply_mask(model, mask):
    """Zero every masked weight in place; unmasked weights untouched.
    Returns the model for chaining."""
    _check_mask_matches(model, mask)
    missing = [n for n in mask.prunable if n not in model.params]
    if missing:
        raise MaskError(f"mask blocks missing from model: {missing}")
    for n in mask.prunable:
        p = model.params[n]
        p.data = p.data * mask.blocks[n]
    return model


def detect_layer_collapse(mask):
    """Names of prunable blocks whose mask is entirely zero."""
    return [n for n in mask.prunable if not mask.blocks[n].any()]


def mask_entries(mask):
    """Mask as archive entries: `<block>.mask` -> uint8 tensor."""
    return {f"{n}.mask": mask.blocks[n] for n in mask.prunable}


def mask_from_entries(entries):
    blocks = {}
    for key, arr in entries.items():
        if key.endswith(".mask"):
            blocks[key[:-len(".mask")]] = np.asarray(arr, dtype=np.uint8)
    if not blocks:
        raise MaskError("no .mask entries found")
    return Mask(blocks, tuple(sorted(blocks)))
