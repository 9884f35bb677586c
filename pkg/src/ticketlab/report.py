"""Run reports, metrics/diagnostics CSV export, and checkpoint files.

All 32-bit reals are printed with np.format_float_positional(unique=True) so
the decimal text parses back to the identical float32. Checkpoints are
tensor archives carrying weights, masks, and a JSON meta entry (epoch, seed,
dataset, arch spec and its hash), enough to rebuild the model with no other
inputs.
"""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .archive import load_archive, pack_text, save_archive, unpack_text
from .models import ArchSpec, build_model
from .pruning import mask_entries, mask_from_entries


class ReportError(ValueError):
    pass


def fmt32(x):
    """Shortest decimal string that round-trips the float32 value."""
    return np.format_float_positional(np.float32(x), unique=True, trim="0")


def _fmtcell(v):
    if isinstance(v, (float, np.floating)):
        return fmt32(v)
    return str(v)


@dataclass
class RunReport:
    config_echo: str
    seed: int
    rows: list = field(default_factory=list)  # {round, sparsity, best_val_accuracy, test_accuracy}
    dense_test_accuracy: float = float("nan")
    diagnostics: list = field(default_factory=list)  # file refs
    wall_clock: float = 0.0
    partial: bool = False

    def __post_init__(self):
        sps = [r["sparsity"] for r in self.rows]
        if any(b <= a for a, b in zip(sps, sps[1:])):
            raise ReportError(f"sparsities must be strictly increasing, got {sps}")

    def to_dict(self):
        return {"config_echo": self.config_echo, "seed": self.seed,
                "rows": self.rows,
                "dense_test_accuracy": self.dense_test_accuracy,
                "diagnostics": list(self.diagnostics),
                "wall_clock": self.wall_clock, "partial": self.partial}

    @staticmethod
    def from_dict(d):
        return RunReport(config_echo=d["config_echo"], seed=d["seed"],
                         rows=d["rows"],
                         dense_test_accuracy=d["dense_test_accuracy"],
                         diagnostics=d["diagnostics"],
                         wall_clock=d["wall_clock"],
                         partial=d.get("partial", False))


def build_report(pipeline_result, config_echo, diagnostics=(), partial=False):
    rows = [{"round": l.round_index, "sparsity": l.sparsity,
             "best_val_accuracy": l.best_val_accuracy,
             "test_accuracy": l.test_accuracy}
            for l in pipeline_result.levels]
    return RunReport(config_echo=config_echo,
                     seed=pipeline_result.config.seed, rows=rows,
                     dense_test_accuracy=pipeline_result.dense_test_accuracy,
                     diagnostics=list(diagnostics),
                     wall_clock=pipeline_result.wall_clock, partial=partial)


def save_report(path, report):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def load_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


# -- CSV schemas --------------------------------------------------------------

def _write_csv(path, header, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmtcell(c) for c in row])
    os.replace(tmp, path)


def write_metrics_csv(path, metrics):
    """Per-epoch training metrics: epoch, split, loss, accuracy, lr."""
    _write_csv(path, ["epoch", "split", "loss", "accuracy", "lr"],
               [(m["epoch"], m["split"], m["loss"], m["accuracy"], m["lr"])
                for m in metrics])


def write_sparsity_csv(path, reports, names=None):
    """Accuracy-vs-sparsity rows merged across runs; the dense accuracy
    appears as the sparsity-0 anchor row of each run."""
    names = names or [str(i) for i in range(len(reports))]
    rows = []
    for name, rep in zip(names, reports):
        rows.append((name, 0, 0.0, "", rep.dense_test_accuracy))
        for r in rep.rows:
            rows.append((name, r["round"], r["sparsity"],
                         r["best_val_accuracy"], r["test_accuracy"]))
    _write_csv(path, ["run", "round", "sparsity", "best_val_accuracy",
                      "test_accuracy"], rows)


def write_landscape_csv(path, matrix, grid):
    """Loss grid as (i, j, a, b, loss) rows."""
    res = matrix.shape[0]
    if res == 1:
        aoffs = boffs = np.array([0.0])
    else:
        aoffs = np.linspace(-grid.extents[0], grid.extents[0], res)
        boffs = np.linspace(-grid.extents[1], grid.extents[1], matrix.shape[1])
    rows = [(i, j, aoffs[i], boffs[j], matrix[i, j])
            for i in range(matrix.shape[0]) for j in range(matrix.shape[1])]
    _write_csv(path, ["i", "j", "a", "b", "loss"], rows)


def write_eigenvalue_csv(path, rows):
    """Eigenvalue trajectory rows: (epoch, batch_id, lambda)."""
    _write_csv(path, ["epoch", "batch_id", "lambda"], rows)


def write_curve_csv(path, pairs):
    """Perturbation curve rows: (distance, loss)."""
    _write_csv(path, ["distance", "loss"], pairs)


# -- checkpoints ---------------------------------------------------------------

_META_KEY = "meta.json"


def save_checkpoint(path, model, epoch, seed, mask=None, dataset=""):
    """Weights + BN state + optional mask + meta, in one tensor archive."""
    entries = {f"weights.{k}": v for k, v in model.state_dict().items()}
    if mask is not None:
        entries.update(mask_entries(mask))
    meta = {"epoch": int(epoch), "seed": int(seed), "dataset": dataset,
            "arch": model.spec.to_dict(), "arch_hash": model.spec.arch_hash()}
    entries[_META_KEY] = pack_text(json.dumps(meta, sort_keys=True))
    save_archive(path, entries)


def load_checkpoint(path):
    """-> (model, mask or None, meta dict). The model is rebuilt from the
    stored arch spec and loaded with the stored weights."""
    entries = load_archive(path)
    if _META_KEY not in entries:
        raise ReportError(f"{path}: not a checkpoint (no {_META_KEY} entry)")
    meta = json.loads(unpack_text(entries[_META_KEY]))
    spec = ArchSpec.from_dict(meta["arch"])
    if spec.arch_hash() != meta["arch_hash"]:
        raise ReportError(f"{path}: arch hash mismatch")
    model = build_model(spec, meta["seed"])
    state = {k[len("weights."):]: v for k, v in entries.items()
             if k.startswith("weights.")}
    model.load_state(state)
    mask_keys = {k: v for k, v in entries.items() if k.endswith(".mask")}
    mask = mask_from_entries(mask_keys) if mask_keys else None
    if mask is not None:
        names = set(model.weight_block_names())
        if not set(mask.prunable) <= names:
            raise ReportError(f"{path}: mask blocks not in model")
    return model, mask, meta


def save_mask(path, mask, meta=None):
    entries = dict(mask_entries(mask))
    payload = {"sparsity": mask.sparsity()}
    payload.update(meta or {})
    entries[_META_KEY] = pack_text(json.dumps(payload, sort_keys=True))
    save_archive(path, entries)


def load_mask(path):
    entries = load_archive(path)
    mask = mask_from_entries({k: v for k, v in entries.items()
                              if k.endswith(".mask")})
    meta = {}
    if _META_KEY in entries:
        meta = json.loads(unpack_text(entries[_META_KEY]))
    return mask, meta
