"""Command-line driver: ``logo-ssl {train,eval,affinity,plot,make-synth}``.

Configuration is a flat ``key = value`` file with dotted namespaces
(``train.lam``, ``augment.global_scale_min``, ``data.path`` ...), overridden
by ``key=value`` arguments. A bare key such as ``variant`` resolves to the
namespaced key ending in it (``train`` then ``augment`` win ties); ``lambda`` is an alias of ``train.lam``.
Unknown or ambiguous keys are errors. The resolved configuration is written
to ``<out>/config.resolved`` in the same format and can be fed back through
``--config`` to repeat the run.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationConfig, crop_and_resize, sample_crop_rect
from .data import (
    DataError, SynthConfig, export_image_folder, generate_synthetic, load_cifar_binary,
    load_image_folder, read_image, split_dataset,
)
from .errors import CheckpointError, ContractError, NonFiniteError
from .evaluate import ProbeConfig, affinity_compare, knn_top1, linear_probe, make_bank
from .trainer import MetricsLog, TrainConfig, fit, init_state, load_checkpoint, save_checkpoint

log = logging.getLogger("logo_ssl")

COMMANDS = ("train", "eval", "affinity", "plot", "make-synth")


class ConfigError(ValueError):
    pass


# -- schema ----------------------------------------------------------------

class Kind:
    INT, FLOAT, BOOL, STR, PAIR, INTS, PATHS = "int", "float", "bool", "str", "pair", "ints", "paths"


def _kind_of(value, hint=None):
    if hint:
        return hint
    if isinstance(value, bool):
        return Kind.BOOL
    if isinstance(value, int):
        return Kind.INT
    if isinstance(value, float):
        return Kind.FLOAT
    if isinstance(value, tuple):
        return Kind.PAIR if len(value) == 2 and all(isinstance(v, float) for v in value) else Kind.INTS
    return Kind.STR


# (kind, optional) for fields whose default does not reveal the type
_HINTS = {
    "train.lam": Kind.FLOAT, "train.lr_max": Kind.FLOAT, "train.regressor_seed": Kind.INT,
    "train.backbone_widths": Kind.INTS, "synth.class_hue_jitter": Kind.FLOAT,
    "synth.primary_size": Kind.PAIR, "synth.secondary_size": Kind.PAIR,
}
_OPTIONAL = {"train.lam", "train.lr_max", "train.regressor_seed", "synth.class_hue_jitter",
             "data.image_size", "train.resume", "eval.checkpoint", "affinity.checkpoint"}

_EXTRA = {
    # key: (kind, default)
    "seed": (Kind.INT, 0),
    "out": (Kind.STR, ""),
    "data.path": (Kind.STR, ""),
    "data.format": (Kind.STR, "auto"),
    "data.image_size": (Kind.INT, None),
    "data.val_path": (Kind.STR, ""),
    "data.val_fraction": (Kind.FLOAT, 0.2),
    "train.resume": (Kind.STR, None),
    "eval.checkpoint": (Kind.STR, None),
    "eval.mode": (Kind.STR, "knn"),
    "eval.k": (Kind.INT, 20),
    "eval.temperature": (Kind.FLOAT, 0.07),
    "affinity.checkpoint": (Kind.STR, None),
    "affinity.images": (Kind.PATHS, ()),
    "affinity.crops": (Kind.INT, 10),
    "affinity.reference": (Kind.INT, 0),
    "affinity.chart": (Kind.BOOL, True),
    "plot.logs": (Kind.PATHS, ()),
}

# keys that inherit the top-level seed unless set explicitly
_SEEDED = ("train.seed", "synth.seed", "probe.seed")


def _dataclass_entries(prefix, cls, skip=()):
    inst = cls() if cls is not TrainConfig else None
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        key = f"{prefix}.{f.name}"
        if inst is not None:
            default = getattr(inst, f.name)
        elif f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = f.default_factory()
        yield key, (_kind_of(default, _HINTS.get(key)), default)


def build_schema() -> dict:
    schema = dict(_EXTRA)
    schema.update(_dataclass_entries("train", TrainConfig, skip=("augment",)))
    schema.update(_dataclass_entries("augment", AugmentationConfig))
    schema.update(_dataclass_entries("synth", SynthConfig))
    schema.update(_dataclass_entries("probe", ProbeConfig, skip=("seed",)))
    schema["probe.seed"] = (Kind.INT, 0)
    return dict(sorted(schema.items()))


SCHEMA = build_schema()
ALIASES = {"lambda": "train.lam", "lambda_mode": "train.lam_mode"}
# a bare key matching several namespaces goes to the first of these that has it
_BARE_PRECEDENCE = ("train.", "augment.")


def resolve_key(key: str) -> str:
    """Map a user-supplied key to its schema key (exact, alias, ``_min``/``_max`` or bare suffix)."""
    if key in SCHEMA:
        return key
    if key in ALIASES:
        return ALIASES[key]
    for suffix in ("_min", "_max"):
        base = key[: -len(suffix)]
        if key.endswith(suffix) and resolve_key_or_none(base, pairs_only=True):
            return key
    if "." not in key:
        hits = [k for k in SCHEMA if k.rsplit(".", 1)[-1] == key]
        for ns in _BARE_PRECEDENCE:
            if len(hits) > 1 and any(h.startswith(ns) for h in hits):
                hits = [h for h in hits if h.startswith(ns)]
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise ConfigError(f"ambiguous key {key!r}: could be any of {', '.join(hits)}")
    raise ConfigError(f"unknown configuration key {key!r}")


def resolve_key_or_none(key, pairs_only=False):
    try:
        k = resolve_key(key)
    except ConfigError:
        return None
    if pairs_only and (k not in SCHEMA or SCHEMA[k][0] != Kind.PAIR):
        return None
    return k


def parse_value(key: str, raw: str):
    kind, _ = SCHEMA[key]
    text = raw.strip()
    if text.lower() in ("none", "null", "") and (key in _OPTIONAL or kind in (Kind.STR, Kind.PATHS)):
        return None if key in _OPTIONAL else ("" if kind == Kind.STR else ())
    try:
        if kind == Kind.INT:
            return int(text)
        if kind == Kind.FLOAT:
            return float(text)
        if kind == Kind.BOOL:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (Kind.PAIR, Kind.INTS, Kind.PATHS):
            parts = [p.strip() for p in text.strip("()[]").split(",") if p.strip()]
            if kind == Kind.PATHS:
                return tuple(parts)
            if kind == Kind.INTS:
                return tuple(int(p) for p in parts)
            if len(parts) != 2:
                raise ValueError("expected two comma-separated numbers")
            return tuple(float(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> list:
    """``(key, raw_value)`` pairs from a ``key = value`` file; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve_config(pairs, seed=None, out=None) -> dict:
    """Apply ``(key, raw)`` pairs in order over the schema defaults."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    explicit = set()
    for raw_key, raw_value in pairs:
        key = resolve_key(raw_key)
        if key not in SCHEMA:  # a _min/_max component of a pair
            base = resolve_key(key[:-4])
            lo, hi = values[base]
            v = float(raw_value)
            values[base] = (v, hi) if key.endswith("_min") else (lo, v)
            explicit.add(base)
            continue
        values[key] = parse_value(key, raw_value)
        explicit.add(key)
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out"] = out
    for key in _SEEDED:
        if key not in explicit:
            values[key] = values["seed"]
    return values


def write_resolved(values: dict, out_dir: Path, command: str) -> Path:
    path = out_dir / "config.resolved"
    lines = [f"# logo-ssl {command}"] + [f"{k} = {format_value(v)}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def _namespace(values, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in values.items() if k.startswith(prefix + ".")}


def train_config(values) -> TrainConfig:
    try:
        kw = {k: v for k, v in _namespace(values, "train").items() if k != "resume"}
        return TrainConfig(augment=AugmentationConfig(**_namespace(values, "augment")), **kw)
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def synth_config(values) -> SynthConfig:
    try:
        return SynthConfig(**_namespace(values, "synth"))
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


# -- datasets --------------------------------------------------------------

def _load_one(path, fmt, size):
    p = Path(path)
    if fmt == "auto":
        fmt = "folder" if p.is_dir() else "cifar"
    if fmt == "folder":
        return load_image_folder(p, size)
    if fmt == "cifar":
        if not p.exists():
            raise ConfigError(f"data.path {p} does not exist")
        return load_cifar_binary(p)
    raise ConfigError(f"data.format must be auto, folder, cifar or synth, got {fmt!r}")


def load_data(values):
    """``(train_dataset, monitor)``: ``monitor`` is what ``knn_monitor`` takes."""
    fmt = values["data.format"]
    if fmt == "synth":
        ds = generate_synthetic(synth_config(values))
    else:
        if not values["data.path"]:
            raise ConfigError("data.path is required (or set data.format=synth)")
        ds = _load_one(values["data.path"], fmt, values["data.image_size"])
    if values["data.val_path"]:
        val = _load_one(values["data.val_path"], "auto" if fmt == "synth" else fmt, values["data.image_size"])
        return ds, (ds, val)
    if "train" not in ds.splits:
        ds = split_dataset(ds, values["data.val_fraction"], values["seed"])
    return ds, ds


def _banks(encoder, monitor, size):
    if isinstance(monitor, tuple):
        return make_bank(encoder, monitor[0], size=size), make_bank(encoder, monitor[1], size=size)
    return make_bank(encoder, monitor, "train", size=size), make_bank(encoder, monitor, "val", size=size)


# -- commands --------------------------------------------------------------

def cmd_train(values, out_dir: Path) -> int:
    cfg = train_config(values)
    dataset, monitor = load_data(values)
    resume = values["train.resume"]
    if resume:
        state = load_checkpoint(resume)
        if state.cfg.to_dict() != cfg.to_dict():
            raise ConfigError(f"train.resume: checkpoint {resume} was written with a different config")
    else:
        state = init_state(cfg)
    metrics = MetricsLog(out_dir / "metrics.jsonl")
    fit(state, dataset, cfg, val=monitor, metrics=metrics, out_dir=out_dir)
    save_checkpoint(state, out_dir / "last.ckpt")
    print(f"trained {state.step} steps; artifacts in {out_dir}")
    return 0


def cmd_eval(values, out_dir: Path) -> int:
    ckpt = values["eval.checkpoint"]
    if not ckpt:
        raise ConfigError("eval.checkpoint is required")
    mode = values["eval.mode"]
    if mode not in ("knn", "linear"):
        raise ConfigError(f"eval.mode must be knn or linear, got {mode!r}")
    state = load_checkpoint(ckpt)
    _, monitor = load_data(values)
    size = state.cfg.augment.output_size_global
    try:
        bank_train, bank_val = _banks(state.encoder, monitor, size)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {ckpt} is incompatible with the dataset: {exc}") from None
    if mode == "knn":
        acc = knn_top1(bank_train, bank_val, values["eval.k"], values["eval.temperature"])
    else:
        acc = linear_probe(bank_train, bank_val, ProbeConfig(**_namespace(values, "probe")))
    key = f"{mode}_top1"
    record = {"mode": mode, key: acc, "checkpoint": str(ckpt), "step": state.step,
              "train_size": int(bank_train.features.shape[0]), "val_size": int(bank_val.features.shape[0])}
    (out_dir / "eval.json").write_text(json.dumps(record, indent=1) + "\n")
    print(f"{key}={100 * acc:.2f}")
    return 0


def sample_crops(image: torch.Tensor, n: int, aug: AugmentationConfig, rng) -> torch.Tensor:
    """``n`` local-scale crops of one ``[3, H, W]`` image, without photometric changes."""
    H, W = image.shape[-2:]
    rects = [sample_crop_rect(rng, (H, W), aug.local_scale, aug.aspect_ratio) for _ in range(n)]
    return torch.cat([crop_and_resize(image.unsqueeze(0), [r], aug.output_size_local) for r in rects])


def cmd_affinity(values, out_dir: Path) -> int:
    ckpt = values["affinity.checkpoint"]
    if not ckpt:
        raise ConfigError("affinity.checkpoint is required")
    paths = list(values["affinity.images"])
    if len(paths) < 2:
        raise ConfigError("affinity.images needs at least two images (cross-image candidates)")
    n_crops = values["affinity.crops"]
    ref = values["affinity.reference"]
    if n_crops < 1:
        raise ConfigError("affinity.crops must be positive")
    if not 0 <= ref < len(paths):
        raise ConfigError(f"affinity.reference must index affinity.images (0..{len(paths) - 1})")
    state = load_checkpoint(ckpt)
    aug = state.cfg.augment
    errors, images = [], []
    for p in paths:
        try:
            images.append(torch.from_numpy(read_image(p)).permute(2, 0, 1).contiguous())
        except Exception as exc:  # noqa: BLE001 - collected and reported together
            errors.append(f"{p}: {exc}")
    if errors:
        raise DataError("could not read: " + "; ".join(errors))
    rng = np.random.default_rng(values["seed"])
    reference = sample_crops(images[ref], 1, aug, rng)[0]
    crops, ids = [], []
    for p, img in zip(paths, images):
        crops.append(sample_crops(img, n_crops, aug, rng))
        ids += [f"{Path(p).stem}#{j}" for j in range(n_crops)]
    report = affinity_compare(state.encoder, state.regressor, reference, torch.cat(crops), ids,
                              reference_id=f"{Path(paths[ref]).stem}#ref")
    (out_dir / "affinity.txt").write_text(report.to_text())
    if values["affinity.chart"]:
        report.plot(out_dir / "affinity.png")
    print(f"affinity report for {len(report)} crops in {out_dir}")
    return 0


def read_knn_curve(path):
    """``(steps, knn_top1)`` from a metrics log; malformed lines warn and are skipped."""
    steps, accs = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "knn_top1" in rec:
                    steps.append(int(rec["step"]))
                    accs.append(float(rec["knn_top1"]))
            except (ValueError, KeyError, TypeError) as exc:
                warnings.warn(f"{path}:{n}: skipping malformed record ({exc})")
    return steps, accs


def _curve_label(path: Path) -> str:
    return path.parent.name if path.stem == "metrics" and path.parent.name else path.stem


def plot_knn_curves(paths, out_path):
    """Overlay knn_top1-vs-step curves; returns ``{label: (steps, values)}`` read back from the figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for p in paths:
        p = Path(p)
        steps, accs = read_knn_curve(p)
        ax.plot(steps, accs, marker="o", markersize=3, label=_curve_label(p))
    ax.set_xlabel("step")
    ax.set_ylabel("knn_top1")
    if paths:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    drawn = {ln.get_label(): (list(ln.get_xdata()), list(ln.get_ydata())) for ln in ax.get_lines()}
    plt.close(fig)
    return drawn


def cmd_plot(values, out_dir: Path) -> int:
    logs = list(values["plot.logs"])
    if not logs:
        raise ConfigError("plot.logs needs at least one metrics log")
    missing = [p for p in logs if not Path(p).is_file()]
    if missing:
        raise ConfigError(f"plot.logs: no such file(s): {', '.join(missing)}")
    plot_knn_curves(logs, out_dir / "knn_top1.png")
    print(f"wrote {out_dir / 'knn_top1.png'}")
    return 0


def cmd_make_synth(values, out_dir: Path) -> int:
    ds = generate_synthetic(synth_config(values))
    root = export_image_folder(ds, out_dir / "images")
    print(f"wrote {len(ds)} images to {root}")
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "affinity": cmd_affinity, "plot": cmd_plot,
            "make-synth": cmd_make_synth}


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--out", help="output directory (default: runs/<command>-<timestamp>)")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("overrides", nargs="*", metavar="key=value")
    parser = argparse.ArgumentParser(prog="logo-ssl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _split_override(text):
    if "=" not in text:
        raise ConfigError(f"overrides must look like key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v


def _output_dir(values, command) -> Path:
    if values["out"]:
        out = Path(values["out"])
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{command}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        # overrides may follow the flags, which argparse leaves unparsed
        args, extra = parser.parse_known_args(argv)
        stray = [a for a in extra if a.startswith("-") or "=" not in a]
        if stray:
            parser.error(f"unrecognized arguments: {' '.join(stray)}")
    except SystemExit as exc:
        return int(exc.code or 0)
    args.overrides = list(args.overrides) + extra
    try:
        pairs = read_config_file(args.config) if args.config else []
        pairs += [_split_override(o) for o in args.overrides]
        values = resolve_config(pairs, seed=args.seed, out=args.out)
        if args.command == "train":
            # validate before touching the disk, and echo variant-dependent defaults as resolved
            cfg = train_config(values)
            values.update({f"train.{k}": v for k, v in dataclasses.asdict(cfg).items() if k != "augment"})
        out_dir = _output_dir(values, args.command)
        write_resolved(values, out_dir, args.command)
        return HANDLERS[args.command](values, out_dir)
    except NonFiniteError as exc:
        print(f"error: {exc} (last checkpoint: {exc.last_checkpoint})", file=sys.stderr)
        return 1
    except (ConfigError, ContractError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime abort
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
