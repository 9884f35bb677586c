"""Flat key=value experiment configs with dotted section names.

One option per line (`trainer.epochs = 20`), `#` comments, blank lines
ignored. Every knob has a spelled-out default; parse_config returns a fully
resolved ExperimentConfig and echo_config renders it back as a complete,
re-parseable file (the reproducibility echo embedded in run reports).
"""

from .models import ACTIVATION_KINDS
from .pruning import PruneSchedule
from .recipe import LossSpec
from .training import ExperimentConfig

LOSS_NAMES = {"hard": "hard", "ls": "label_smooth", "kd": "kd"}
_LOSS_BACK = {v: k for k, v in LOSS_NAMES.items()}


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    if s == "true":
        return True
    if s == "false":
        return False
    raise ValueError(f"expected true or false, got {s!r}")


def _parse_int(s):
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}")


def _parse_float(s):
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"expected a number, got {s!r}")


def _parse_rounds(s):
    """'all' or a comma list of 1-based round indices."""
    if s == "all":
        return ()
    try:
        return tuple(int(p) for p in s.split(","))
    except ValueError:
        raise ValueError(f"expected 'all' or a comma list of integers, got {s!r}")


def _parse_epoch_list(s):
    if s == "none":
        return ()
    try:
        return tuple(int(p) for p in s.split(","))
    except ValueError:
        raise ValueError(f"expected 'none' or a comma list of integers, got {s!r}")


def _fmt_rounds(v):
    return "all" if not v else ",".join(str(i) for i in v)


def _fmt_epochs(v):
    return "none" if not v else ",".join(str(i) for i in v)


def _fmt_bool(v):
    return "true" if v else "false"


def _fmt_plain(v):
    return repr(v) if isinstance(v, float) else str(v)


# key -> (parser, formatter, default or REQUIRED)
_REQUIRED = object()
_SCHEMA = {
    "model.arch": (str, str, _REQUIRED),
    "data.dataset": (str, str, _REQUIRED),
    "data.split_ratio": (_parse_float, _fmt_plain, 0.9),
    "trainer.epochs": (_parse_int, str, _REQUIRED),
    "trainer.batch_size": (_parse_int, str, 128),
    "trainer.seed": (_parse_int, str, 0),
    "trainer.lr0": (_parse_float, _fmt_plain, 0.1),
    "trainer.momentum": (_parse_float, _fmt_plain, 0.9),
    "trainer.weight_decay": (_parse_float, _fmt_plain, 2e-4),
    "trainer.decay_factor": (_parse_float, _fmt_plain, 0.1),
    "trainer.checkpoint_epochs": (_parse_epoch_list, _fmt_epochs, ()),
    "prune.mode": (str, str, "imp"),
    "prune.per_round": (_parse_float, _fmt_plain, 0.2),
    "prune.rounds": (_parse_int, str, 1),
    "prune.target_sparsity": (_parse_float, _fmt_plain, 0.0),
    "prune.retrain_rounds": (_parse_rounds, _fmt_rounds, ()),
    "recipe.skips": (_parse_bool, _fmt_bool, False),
    "recipe.activation": (str, str, "relu"),
    "recipe.rescale_init": (_parse_bool, _fmt_bool, False),
    "recipe.rescale_passes": (_parse_int, str, 5),
    "recipe.loss": (str, str, "hard"),
    "recipe.alpha": (_parse_float, _fmt_plain, 0.1),
    "recipe.tau": (_parse_float, _fmt_plain, 4.0),
    "recipe.rewind": (_parse_bool, _fmt_bool, False),
    "recipe.rewind_fraction": (_parse_float, _fmt_plain, 0.18),
}


def _read_pairs(text):
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key}")
        pairs[key] = (value, lineno)
    return pairs


def _check(key, cond, message):
    if not cond:
        raise ConfigError(f"{key}: {message}")


def parse_config_text(text):
    pairs = _read_pairs(text)
    values = {}
    for key, (parser, _, default) in _SCHEMA.items():
        if key in pairs:
            raw, lineno = pairs[key]
            try:
                values[key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {key}: {exc}")
        elif default is _REQUIRED:
            raise ConfigError(f"missing required key {key}")
        else:
            values[key] = default

    v = values
    _check("data.split_ratio", 0.0 < v["data.split_ratio"] < 1.0,
           f"must be in (0,1), got {v['data.split_ratio']}")
    _check("trainer.epochs", v["trainer.epochs"] >= 0, "must be >= 0")
    _check("trainer.batch_size", v["trainer.batch_size"] >= 2, "must be >= 2")
    _check("trainer.lr0", v["trainer.lr0"] > 0, "must be positive")
    _check("trainer.weight_decay", v["trainer.weight_decay"] >= 0,
           "must be >= 0")
    _check("prune.mode", v["prune.mode"] in ("imp", "omp"),
           f"must be imp or omp, got {v['prune.mode']!r}")
    _check("recipe.activation", v["recipe.activation"] in ACTIVATION_KINDS,
           f"must be one of {'/'.join(ACTIVATION_KINDS)}, "
           f"got {v['recipe.activation']!r}")
    _check("recipe.loss", v["recipe.loss"] in LOSS_NAMES,
           f"must be one of {'/'.join(LOSS_NAMES)}, got {v['recipe.loss']!r}")
    _check("recipe.alpha", 0.0 <= v["recipe.alpha"] <= 1.0,
           f"must be in [0,1], got {v['recipe.alpha']}")
    _check("recipe.tau", v["recipe.tau"] > 0, "must be positive")
    _check("recipe.rewind_fraction",
           0.0 < v["recipe.rewind_fraction"] <= 1.0,
           f"must be in (0,1], got {v['recipe.rewind_fraction']}")
    _check("recipe.rescale_passes", v["recipe.rescale_passes"] >= 1,
           "must be >= 1")
    _check("prune.retrain_rounds",
           all(i >= 1 for i in v["prune.retrain_rounds"]),
           "round indices are 1-based")
    _check("trainer.checkpoint_epochs",
           all(e >= 0 for e in v["trainer.checkpoint_epochs"]),
           "epochs must be >= 0")

    try:
        prune = PruneSchedule(mode=v["prune.mode"],
                              per_round_fraction=v["prune.per_round"],
                              rounds=v["prune.rounds"],
                              target_sparsity=v["prune.target_sparsity"])
    except ValueError as exc:
        raise ConfigError(f"prune: {exc}")
    loss = LossSpec(kind=LOSS_NAMES[v["recipe.loss"]],
                    alpha=v["recipe.alpha"], tau=v["recipe.tau"])
    try:
        return ExperimentConfig(
            arch=v["model.arch"], dataset=v["data.dataset"],
            epochs=v["trainer.epochs"], batch_size=v["trainer.batch_size"],
            seed=v["trainer.seed"], split_ratio=v["data.split_ratio"],
            lr0=v["trainer.lr0"], momentum=v["trainer.momentum"],
            weight_decay=v["trainer.weight_decay"],
            decay_factor=v["trainer.decay_factor"], prune=prune,
            skips=v["recipe.skips"], activation=v["recipe.activation"],
            rescale=v["recipe.rescale_init"],
            rescale_passes=v["recipe.rescale_passes"], loss=loss,
            rewind=v["recipe.rewind"],
            rewind_fraction=v["recipe.rewind_fraction"],
            checkpoint_epochs=v["trainer.checkpoint_epochs"],
            retrain_rounds=v["prune.retrain_rounds"])
    except ValueError as exc:
        raise ConfigError(str(exc))


def parse_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config_text(text)


def echo_config(config):
    """Complete key=value rendering; parse_config_text(echo_config(c)) == c."""
    values = {
        "model.arch": config.arch,
        "data.dataset": config.dataset,
        "data.split_ratio": config.split_ratio,
        "trainer.epochs": config.epochs,
        "trainer.batch_size": config.batch_size,
        "trainer.seed": config.seed,
        "trainer.lr0": config.lr0,
        "trainer.momentum": config.momentum,
        "trainer.weight_decay": config.weight_decay,
        "trainer.decay_factor": config.decay_factor,
        "trainer.checkpoint_epochs": tuple(config.checkpoint_epochs),
        "prune.mode": config.prune.mode,
        "prune.per_round": config.prune.per_round_fraction,
        "prune.rounds": config.prune.rounds,
        "prune.target_sparsity": config.prune.target_sparsity,
        "prune.retrain_rounds": tuple(config.retrain_rounds),
        "recipe.skips": config.skips,
        "recipe.activation": config.activation,
        "recipe.rescale_init": config.rescale,
        "recipe.rescale_passes": config.rescale_passes,
        "recipe.loss": _LOSS_BACK[config.loss.kind],
        "recipe.alpha": config.loss.alpha,
        "recipe.tau": config.loss.tau,
        "recipe.rewind": config.rewind,
        "recipe.rewind_fraction": config.rewind_fraction,
    }
    lines = []
    for key, (_, fmt, _default) in _SCHEMA.items():
        lines.append(f"{key} = {fmt(values[key])}")
    return "\n".join(lines) + "\n"
