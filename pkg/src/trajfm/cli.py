"""Command-line entry point: synth, preprocess, pretrain, eval, gradcheck."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .config import ConfigError, dump_kv, from_kv, read_kv
from .data import DataError, PoiIndex, SynthConfig, generate_synthetic, load_dataset_dir, preprocess, write_dataset_dir
from .embedding import FilePoiProvider, SyntheticPoiProvider
from .geo import GeoError
from .numerics import NumericalError
from .pretrain import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    featurize_all,
    full_loss_gradcheck,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .strformer import ModelConfig
from .tasks import REPORT_SCHEMA, TASKS, evaluate

log = logging.getLogger("trajfm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig}
GRADCHECK_MODEL = {"d": "16", "L": "2"}


@dataclass
class RunConfig:
    seed: int = 0
    data: str = ""
    out: str = ""
    task: str = ""
    checkpoint: str = ""
    split: str = "test"
    poi_vectors: str = ""
    provider_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_kv(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in SECTIONS:
                for k, v in dataclasses.asdict(value).items():
                    if not (f.name == "train" and k == "seed"):
                        out[f"{f.name}.{k}"] = v
            else:
                out[f.name] = value
        return out

    def provider(self):
        if self.poi_vectors:
            return FilePoiProvider.load(self.poi_vectors)
        return SyntheticPoiProvider(dim=self.model.poi_dim, seed=self.provider_seed)


TOP_LEVEL = {f.name for f in dataclasses.fields(RunConfig)} - set(SECTIONS)


def _route(values: dict[str, str]) -> tuple[dict[str, str], dict[str, dict[str, str]]]:
    """Split flat keys into top-level and per-section dictionaries.

    Keys may be qualified (``model.d``) or bare when the name is unambiguous.
    """
    top: dict[str, str] = {}
    sections: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    owners: dict[str, list[str]] = {}
    for name, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            owners.setdefault(f.name, []).append(name)
    for key, value in values.items():
        if "." in key:
            section, _, sub = key.partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section in {key!r}")
            sections[section][sub] = value
        elif key in TOP_LEVEL:
            top[key] = value
        elif len(owners.get(key, [])) == 1:
            sections[owners[key][0]][key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return top, sections


def resolve_config(config_path: str | None, overrides: dict[str, str], defaults: dict[str, str] | None = None) -> RunConfig:
    values = dict(defaults or {})
    if config_path:
        try:
            values.update(read_kv(config_path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc.strerror}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    top, sections = _route(values)
    seed = top.get("seed", "0")
    sections["train"]["seed"] = seed
    try:
        built = {name: from_kv(cls, sections[name]) for name, cls in SECTIONS.items()}
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = from_kv(RunConfig, top)
    for name, value in built.items():
        setattr(cfg, name, value)
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    return cfg


def print_config(cfg: RunConfig) -> None:
    sys.stdout.write("# resolved run config\n" + dump_kv(cfg.to_kv()))
    sys.stdout.flush()


def require(value: str, flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


# --------------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(require(cfg.out, "--out"))
    ds = generate_synthetic(cfg.synth, cfg.seed)
    write_dataset_dir(out, ds)
    print(f"wrote {len(ds.trajectories)} trajectories and {len(ds.pois)} POIs to {out}")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig) -> int:
    src = require(cfg.data, "--data")
    out = Path(require(cfg.out, "--out"))
    ds = preprocess(load_dataset_dir(src))
    write_dataset_dir(out, ds, PoiIndex(ds.pois))
    counts = {s: len(ds.subset(s)) for s in ("train", "val", "test")}
    print(f"kept {len(ds.trajectories)} trajectories {counts} -> {out}")
    return EXIT_OK


def _load_split(cfg: RunConfig, name: str, region=None):
    ds = load_dataset_dir(require(cfg.data, "--data"))
    if not ds.split:
        raise DataError(f"{cfg.data}: no split file; run 'preprocess' first")
    trajs = ds.subset(name)
    if not trajs:
        raise DataError(f"{cfg.data}: empty {name} split")
    idx = PoiIndex(ds.pois)
    provider = cfg.provider()
    return ds, idx, provider, featurize_all(trajs, region or ds.region, idx, provider)


def cmd_pretrain(cfg: RunConfig) -> int:
    out = Path(require(cfg.out, "--out"))
    ds, _, _, train = _load_split(cfg, "train")
    res = pretrain(
        train,
        cfg.model,
        cfg.train,
        progress=lambda epoch, loss: log.info("epoch %d/%d loss %.4f", epoch, cfg.train.epochs, loss),
    )
    extra = {
        "run_config": {k: v for k, v in cfg.to_kv().items()},
        "history": res.history,
        "region": {"center_lng": ds.region.center.lng, "center_lat": ds.region.center.lat},
    }
    save_checkpoint(out, Checkpoint.from_model(res.model, cfg.seed, res.state.step, extra))
    history_path = out.with_name(out.name + ".history.json")
    history_path.write_text(json.dumps({"loss": res.history, "seconds": res.seconds}, indent=2) + "\n", encoding="utf-8")
    print(f"trained {len(res.history)} epochs in {res.seconds:.1f}s, final loss {res.history[-1]:.4f}")
    print(f"checkpoint {out}, history {history_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    task = require(cfg.task, "--task")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    ckpt_path = require(cfg.checkpoint, "--checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.build_model()
    cfg.model = ckpt.model_config()
    ds, idx, provider, fs = _load_split(cfg, cfg.split)
    result = evaluate(task, fs, model, ds.region, idx, provider)
    report = result.report(str(ckpt_path))
    jsonschema.validate(report, REPORT_SCHEMA)
    text = json.dumps(report, indent=2)
    print(text)
    if cfg.out:
        Path(cfg.out).write_text(text + "\n", encoding="utf-8")
        pred_path = Path(cfg.out).with_suffix(".predictions.jsonl")
        pred_path.write_text("".join(json.dumps(p) + "\n" for p in result.predictions), encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = full_loss_gradcheck(cfg.model, seed=cfg.seed)
    status = "PASS" if report.passed else "FAIL"
    worst = f"{report.worst[0]}[{report.worst[1]}]" if report.worst else "-"
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_coords} coordinates (worst {worst}): {status} at {report.tolerance:g}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajfm", description="Trajectory foundation model: data, pre-training and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth": "generate one synthetic region",
        "preprocess": "resample, filter, split and POI-annotate a dataset directory",
        "pretrain": "pre-train on the train split of a preprocessed directory",
        "eval": "evaluate a checkpoint on a downstream task",
        "gradcheck": "finite-difference check of the full loss in 64-bit precision",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", help="64-bit unsigned seed")
        p.add_argument("--out", help="output path")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name in ("preprocess", "pretrain", "eval"):
            p.add_argument("--data", help="dataset directory")
        if name == "pretrain":
            p.add_argument("--epochs", help="override train.epochs")
        if name == "eval":
            p.add_argument("--task", help=f"one of {', '.join(TASKS)}")
            p.add_argument("--checkpoint", help="checkpoint file")
            p.add_argument("--split", help="split to evaluate (default test)")
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for key in ("seed", "out", "data", "task", "checkpoint", "split"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    if getattr(args, "epochs", None) is not None:
        out["train.epochs"] = args.epochs
    return out


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        defaults = {f"model.{k}": v for k, v in GRADCHECK_MODEL.items()} if args.command == "gradcheck" else None
        cfg = resolve_config(args.config, _overrides(args), defaults)
        print_config(cfg)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GeoError, CheckpointError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except jsonschema.ValidationError as exc:
        print(f"data error: report failed schema validation: {exc.message}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
