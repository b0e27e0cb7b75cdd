"""Command-line entry point.

Subcommands: synth, optimize, train, eval, inspect.  Runs are driven by a
TOML config file with [synth], [ceo], [train], and [paths] sections plus a
top-level seed; any value can be overridden on the command line with
flags like ``--ceo.alpha 0.7``.  The fully materialized config is echoed
as JSON before the run so every defaulted hyperparameter is visible.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import avla, ceo, evaluation, store, synthdata

__all__ = ["main", "dispatch", "validate_config", "RunConfig", "ConfigError"]

SUBCOMMANDS = ("synth", "optimize", "train", "eval", "inspect")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    seed: int
    out_dir: str
    synth: synthdata.SynthConfig
    ceo: ceo.CeoConfig
    train: avla.TrainConfig
    use_initial: bool
    paths: dict

    def echo_dict(self):
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "use_initial": self.use_initial,
            "synth": dataclasses.asdict(self.synth),
            "ceo": dataclasses.asdict(self.ceo),
            "train": dataclasses.asdict(self.train),
            "paths": dict(sorted(self.paths.items())),
        }


_PATH_KEYS = ("bank", "features", "model", "report")


def _coerce(value, target_type, key):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


_OPTIONAL_INTS = {"triplet_budget"}


def _build_section(cls, section_name, raw, overrides, global_seed):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    seen_keys = set()
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key [{section_name}].{key}")
        seen_keys.add(key)
        values[key] = value
    for key, value in overrides.items():
        if key not in fields:
            raise ConfigError(f"unknown key [{section_name}].{key}")
        seen_keys.add(key)
        values[key] = value
    kwargs = {}
    for name, f in fields.items():
        if name in values:
            target = {"float": float, "int": int, "str": str, "bool": bool}.get(
                f.type if isinstance(f.type, str) else getattr(f.type, "__name__", ""),
                None,
            )
            v = values[name]
            if name in _OPTIONAL_INTS:
                kwargs[name] = None if v in (None, "none") else _coerce(v, int, name)
            elif target is not None:
                kwargs[name] = _coerce(v, target, f"[{section_name}].{name}")
            else:
                kwargs[name] = v
        elif name == "seed":
            kwargs[name] = global_seed
    try:
        cfg = cls(**kwargs)
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"[{section_name}]: {exc}") from exc
    return cfg


def validate_config(path=None, overrides=None):
    """Parse and fully validate a run config; unknown keys are rejected and
    all defaults are materialized."""
    overrides = overrides or {}
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    known_top = {"seed", "out_dir", "use_initial", "synth", "ceo", "train", "paths"}
    for key in raw:
        if key not in known_top:
            raise ConfigError(f"unknown key {key!r} in config")
    top_over = overrides.get("", {})
    seed = _coerce(top_over.get("seed", raw.get("seed", 0)), int, "seed")
    out_dir = _coerce(top_over.get("out_dir", raw.get("out_dir", ".")), str, "out_dir")
    use_initial = _coerce(
        top_over.get("use_initial", raw.get("use_initial", False)), bool, "use_initial"
    )
    synth_cfg = _build_section(
        synthdata.SynthConfig, "synth", raw.get("synth", {}), overrides.get("synth", {}), seed
    )
    ceo_cfg = _build_section(
        ceo.CeoConfig, "ceo", raw.get("ceo", {}), overrides.get("ceo", {}), seed
    )
    train_cfg = _build_section(
        avla.TrainConfig, "train", raw.get("train", {}), overrides.get("train", {}), seed
    )
    paths = {}
    for key, value in {**raw.get("paths", {}), **overrides.get("paths", {})}.items():
        if key not in _PATH_KEYS:
            raise ConfigError(f"unknown key [paths].{key}")
        paths[key] = _coerce(value, str, f"[paths].{key}")
    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        synth=synth_cfg,
        ceo=ceo_cfg,
        train=train_cfg,
        use_initial=use_initial,
        paths=paths,
    )


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _require_path(cfg, key, must_exist=True):
    if key not in cfg.paths:
        raise ConfigError(f"missing [paths].{key} for this subcommand")
    p = Path(cfg.paths[key])
    if must_exist and not p.is_file():
        raise ConfigError(f"[paths].{key} does not exist: {p}")
    return p


def _out(cfg, name):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _write_json(path, payload):
    path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def _cmd_synth(cfg):
    bank, split, dataset = synthdata.generate_benchmark(cfg.synth)
    bank_path = Path(cfg.paths.get("bank", _out(cfg, "bank.ezb")))
    feat_path = Path(cfg.paths.get("features", _out(cfg, "data.ezf")))
    bank_path.parent.mkdir(parents=True, exist_ok=True)
    feat_path.parent.mkdir(parents=True, exist_ok=True)
    store.save_embedding_bank(bank, bank_path)
    store.save_feature_dataset(dataset, feat_path)
    print(f"wrote {bank_path} ({bank.n_classes} classes, dim {bank.dim})")
    print(f"wrote {feat_path} ({dataset.n_samples} samples)")
    return 0


def _cmd_optimize(cfg):
    bank_path = _require_path(cfg, "bank")
    bank = store.load_embedding_bank(bank_path)
    result = ceo.optimize_class_embeddings(bank, cfg.ceo)
    out_bank = bank.with_optimized(result.optimized)
    out_path = _out(cfg, "bank_optimized.ezb")
    store.save_embedding_bank(out_bank, out_path)
    trace_path = _out(cfg, "ceo_trace.json")
    _write_json(
        trace_path,
        {
            "loss_trace": result.trace_dicts(),
            "min_distance_before": result.min_distance_before,
            "min_distance_after": result.min_distance_after,
            "kendall_tau": result.kendall_tau,
            "diverged": result.diverged,
        },
    )
    print(f"wrote {out_path}")
    print(f"wrote {trace_path}")
    print(
        f"min pairwise distance {result.min_distance_before:.4f} -> "
        f"{result.min_distance_after:.4f}, kendall tau {result.kendall_tau:.4f}"
    )
    if result.diverged:
        print("warning: optimization aborted on non-finite loss", file=sys.stderr)
    return 0


def _cmd_train(cfg):
    bank = store.load_embedding_bank(_require_path(cfg, "bank"))
    dataset = store.load_feature_dataset(_require_path(cfg, "features"), bank)
    split = store.ClassSplit.from_dataset(
        dataset.labels, dataset.partition, bank.n_classes
    )
    dataset_checked = store.load_feature_dataset(
        cfg.paths["features"], bank, split=split
    )
    model, curve = avla.train_alignment(
        dataset_checked, bank, cfg.train, use_initial=cfg.use_initial
    )
    model_path = Path(cfg.paths.get("model", _out(cfg, "model.ezm")))
    model_path.parent.mkdir(parents=True, exist_ok=True)
    avla.save_model(model, cfg.train, model_path)
    curve_path = _out(cfg, "loss_curve.json")
    _write_json(curve_path, {"epoch_mean_loss": curve})
    print(f"wrote {model_path}")
    print(f"wrote {curve_path}")
    if curve:
        print(f"final epoch mean loss {curve[-1]:.6f}")
    return 0


def _cmd_eval(cfg):
    bank = store.load_embedding_bank(_require_path(cfg, "bank"))
    model, train_cfg = avla.load_model(_require_path(cfg, "model"))
    dataset = store.load_feature_dataset(
        _require_path(cfg, "features"),
        bank,
        expect_dims=(model.d_v, model.d_a),
    )
    split = store.ClassSplit.from_dataset(
        dataset.labels, dataset.partition, bank.n_classes
    )
    digest = evaluation.settings_digest(
        {
            "seed": cfg.seed,
            "use_initial": cfg.use_initial,
            "train": dataclasses.asdict(train_cfg),
        }
    )
    report = evaluation.evaluate(
        model, bank, dataset, split, use_initial=cfg.use_initial, config_digest=digest
    )
    report_path = Path(cfg.paths.get("report", _out(cfg, "report.json")))
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(evaluation.report_to_json(report))
    print(evaluation.render_report(report))
    print(f"wrote {report_path}")
    return 0


def _cmd_inspect(cfg):
    if "bank" in cfg.paths:
        bank = store.load_embedding_bank(_require_path(cfg, "bank"))
        rows = ceo.nearest_neighbor_report(bank, cfg.ceo.metric)
        _write_json(_out(cfg, "nn_report.json"), rows)
        print(ceo.render_nn_report(rows))
        return 0
    if "report" in cfg.paths:
        payload = json.loads(_require_path(cfg, "report").read_text())
        import numpy as np

        report = evaluation.EvalReport(
            seen_acc=payload["seen_acc"],
            unseen_acc=payload["unseen_acc"],
            harmonic_mean=payload["harmonic_mean"],
            zsl_acc=payload["zsl_acc"],
            per_class_acc=payload["per_class_acc"],
            confusion=np.asarray(payload["confusion"], dtype=np.int64),
            config_digest=payload["config_digest"],
        )
        print(evaluation.render_report(report))
        print()
        print(evaluation.render_confusion(report, sorted(payload["per_class_acc"])))
        return 0
    raise ConfigError("inspect needs [paths].bank or [paths].report")


_COMMANDS = {
    "synth": _cmd_synth,
    "optimize": _cmd_optimize,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _usage():
    return (
        "usage: ezgzl {synth|optimize|train|eval|inspect} [--config FILE] "
        "[--seed N] [--out-dir DIR] [--SECTION.KEY VALUE ...]\n"
    )


def _parse_override(token, value):
    # "--ceo.alpha" -> ("ceo", "alpha"); "--seed" -> ("", "seed")
    name = token[2:]
    section, _, key = name.partition(".")
    if not key:
        section, key = "", name.replace("-", "_")
    else:
        key = key.replace("-", "_")
    # values come in as strings; try TOML-ish literals
    for conv in (int, float):
        try:
            return section, key, conv(value)
        except ValueError:
            continue
    if value in ("true", "false"):
        return section, key, value == "true"
    return section, key, value


def dispatch(argv):
    """Run one subcommand; returns the process exit code."""
    argv = list(argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(_usage(), end="")
        return 0 if argv else 1
    command = argv[0]
    if command not in SUBCOMMANDS:
        print(f"error: unknown subcommand {command!r}", file=sys.stderr)
        print(_usage(), end="", file=sys.stderr)
        return 1
    config_path = None
    overrides = {}
    rest = argv[1:]
    try:
        i = 0
        while i < len(rest):
            tok = rest[i]
            if not tok.startswith("--"):
                raise ConfigError(f"unexpected argument {tok!r}")
            if "=" in tok:
                tok, value = tok.split("=", 1)
            else:
                if i + 1 >= len(rest):
                    raise ConfigError(f"flag {tok} needs a value")
                i += 1
                value = rest[i]
            if tok == "--config":
                config_path = value
            else:
                section, key, parsed = _parse_override(tok, value)
                overrides.setdefault(section, {})[key] = parsed
            i += 1
        cfg = validate_config(config_path, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(cfg.echo_dict(), sort_keys=True))
    try:
        return _COMMANDS[command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
