"""Command-line entry point.

Configuration is a JSON document (``schema_version`` 1)::

    {
      "schema_version": 1,
      "seed": 7,
      "data": {"source": "synthetic", "n": 5000, "correlation": 0.8, ...}
              | {"source": "csv", "dir": "path/with/train.csv,test.csv[,aux.csv]"},
      "train": {"measure": "gaussian_w", "lam": 1.0, "steps": 2000, ...},
      "probe": {"hidden": 64, "steps": 2000, ...},
      "measures": ["gaussian_w", "sinkhorn"],
      "lambdas": [0.001, 0.01, 0.1, 1, 10],
      "out": "runs/example"
    }

Every section is optional. Precedence: built-in defaults, then the config
file, then command-line flags. The single top-level ``seed`` drives data
generation, parameter initialization, batch sampling and probes; seeds are not
accepted inside sections. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from condreg.data import DatasetSplit, SynthSpec, generate, read_csv, write_csv
from condreg.errors import CondRegError, ConfigError
from condreg.evaluation import ProbeConfig, correlation_analysis, evaluate
from condreg.model import encode, load_checkpoint, save_checkpoint
from condreg.stats import LabeledBatch
from condreg.training import DEFAULT_LAMBDAS, TRAIN_MEASURES, TrainConfig, sweep, train

SCHEMA_VERSION = 1
_TOP_KEYS = {"schema_version", "seed", "data", "train", "probe", "measures", "lambdas", "out"}


def _section(cls, raw, name, exclude=("seed",)):
    raw = dict(raw or {})
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    return raw


@dataclass
class ExperimentConfig:
    seed: int = 7
    data: dict = field(default_factory=lambda: {"source": "synthetic"})
    train: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    measures: list = field(default_factory=lambda: ["gaussian_w"])
    lambdas: list = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    out: Optional[str] = None
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        cfg = cls()
        for key in ("seed", "measures", "lambdas", "out"):
            if key in raw:
                setattr(cfg, key, raw[key])
        if "data" in raw:
            cfg.data = dict(raw["data"])
        if "train" in raw:
            cfg.train = dict(raw["train"])
        if "probe" in raw:
            cfg.probe = dict(raw["probe"])
        return cfg

    def validate(self) -> "ExperimentConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        source = self.data.get("source", "synthetic")
        if source == "synthetic":
            spec = {k: v for k, v in self.data.items() if k != "source"}
            _section(SynthSpec, spec, "data")
            self.synth_spec()
        elif source == "csv":
            if set(self.data) - {"source", "dir"} or "dir" not in self.data:
                raise ConfigError("csv data section takes exactly 'source' and 'dir'")
        else:
            raise ConfigError(f"unknown data source {source!r}")
        _section(TrainConfig, self.train, "train")
        _section(ProbeConfig, self.probe, "probe")
        if not isinstance(self.measures, list) or not self.measures:
            raise ConfigError("measures must be a nonempty list")
        for m in self.measures:
            if m not in TRAIN_MEASURES:
                raise ConfigError(f"unknown measure {m!r}")
        if not isinstance(self.lambdas, list) or not self.lambdas:
            raise ConfigError("lambda grid must be a nonempty list")
        if any(not isinstance(v, (int, float)) or v < 0 for v in self.lambdas):
            raise ConfigError("lambdas must be nonnegative numbers")
        for m in self.measures:
            self.train_config(m)
        ProbeConfig(**self.probe, seed=self.seed)
        return self

    def synth_spec(self) -> SynthSpec:
        spec = {k: v for k, v in self.data.items() if k != "source"}
        try:
            return SynthSpec(**spec, seed=self.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid data section: {exc}") from None

    def train_config(self, measure=None, lam=None) -> TrainConfig:
        kw = dict(self.train)
        if measure is not None:
            kw["measure"] = measure
        if lam is not None:
            kw["lam"] = float(lam)
        return TrainConfig(**kw, seed=self.seed)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(**self.probe, seed=self.seed)

    def resolved(self) -> dict:
        """Config with every default filled in, as echoed into output dirs."""
        out = asdict(self)
        if self.data.get("source", "synthetic") == "synthetic":
            out["data"] = {"source": "synthetic", **self.synth_spec().to_dict()}
        tc = self.train_config(self.measures[0]).to_dict()
        out["train"] = {k: v for k, v in tc.items() if k != "seed"}
        out["probe"] = {k: v for k, v in asdict(self.probe_config()).items() if k != "seed"}
        return out


# ------------------------------------------------------------------ helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _load_data(cfg: ExperimentConfig) -> DatasetSplit:
    if cfg.data.get("source", "synthetic") == "csv":
        root = Path(cfg.data["dir"])
        train_b = read_csv(root / "train.csv")
        test_b = read_csv(root / "test.csv")
        aux_path = root / "aux.csv"
        aux_b = read_csv(aux_path) if aux_path.exists() else train_b
        return DatasetSplit(train_b, test_b, aux_b)
    return generate(cfg.synth_spec())


def _out_dir(cfg: ExperimentConfig) -> Path:
    if not cfg.out:
        raise ConfigError("an output directory is required (--out or 'out')")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_run(run_dir: Path, result, split: DatasetSplit, probe_cfg: ProbeConfig) -> dict:
    _write_jsonl(run_dir / "records.jsonl", (r.to_dict() for r in result.records))
    save_checkpoint(result.params, run_dir / "final.ckpt")
    report = evaluate(result.params, split.test, probe_cfg)
    summary = {
        "measure": result.config.measure,
        "lambda": result.config.lam,
        "main_acc": report.main_acc,
        "sensitive_acc": report.sensitive_acc,
        "reg_value": result.records[-1].reg_value,
        "diag_distance": report.diag_distance,
        "n_eval": report.n_eval,
        "counters": result.counters,
    }
    _write_json(run_dir / "summary.json", summary)
    return summary


# ----------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig) -> Path:
    out = _out_dir(cfg)
    _write_json(out / "config.json", cfg.resolved())
    if cfg.data.get("source", "synthetic") != "synthetic":
        raise ConfigError("generate needs a synthetic data section")
    spec = cfg.synth_spec()
    split = generate(spec)
    for name in ("train", "test", "aux"):
        write_csv(getattr(split, name), out / f"{name}.csv")
    manifest = {
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "rows": {name: len(getattr(split, name)) for name in ("train", "test", "aux")},
    }
    _write_json(out / "manifest.json", manifest)
    return out


def cmd_train(cfg: ExperimentConfig) -> Path:
    out = _out_dir(cfg)
    _write_json(out / "config.json", cfg.resolved())
    tc = cfg.train_config(cfg.measures[0])
    split = _load_data(cfg)
    result = train(split, tc, checkpoint_dir=out / "checkpoints")
    _save_run(out, result, split, cfg.probe_config())
    return out


def cmd_sweep(cfg: ExperimentConfig, jobs: int = 1) -> Path:
    out = _out_dir(cfg)
    _write_json(out / "config.json", cfg.resolved())
    split = _load_data(cfg)
    probe_cfg = cfg.probe_config()
    rows = []
    for measure in sorted(set(cfg.measures)):
        base = cfg.train_config(measure)
        mdir = out / measure
        for lam, result in sweep(split, base, cfg.lambdas, jobs=jobs, out_dir=mdir):
            summary = _save_run(mdir / f"lambda_{lam:g}", result, split, probe_cfg)
            rows.append((measure, lam, summary["main_acc"], summary["sensitive_acc"]))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["measure", "lambda", "main_acc", "sensitive_acc"])
        writer.writerows(rows)
    return out


def cmd_evaluate(cfg: ExperimentConfig, checkpoint) -> Path:
    out = _out_dir(cfg)
    _write_json(out / "config.json", cfg.resolved())
    params = load_checkpoint(checkpoint)
    split = _load_data(cfg)
    report = evaluate(params, split.test, cfg.probe_config())
    _write_json(out / "report.json", report.to_dict())
    return out


def cmd_correlate(cfg: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    out = Path(cfg.out) if cfg.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "correlate_config.json", cfg.resolved())
    records = [
        json.loads(line)
        for line in (run_dir / "records.jsonl").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    usable = [r for r in records if r.get("checkpoint_path") and r.get("reg_value") is not None]
    if len(usable) < 2:
        raise ConfigError(
            f"insufficient checkpoints: {len(usable)} usable, at least 2 required"
        )
    split = _load_data(cfg)
    checkpoints = [(load_checkpoint(run_dir / r["checkpoint_path"]), r["reg_value"]) for r in usable]
    report = correlation_analysis(
        checkpoints, split.test, cfg.probe_config(), steps=[r["step"] for r in usable]
    )
    _write_json(out / "correlation.json", report.to_dict())
    return out


def cmd_export_embeddings(cfg: ExperimentConfig, checkpoint, split_name="test") -> Path:
    out = _out_dir(cfg)
    _write_json(out / "config.json", cfg.resolved())
    params = load_checkpoint(checkpoint)
    split = _load_data(cfg)
    batch = getattr(split, split_name)
    z, _ = encode(params, batch.samples)
    return write_csv(LabeledBatch(z, batch.sensitive, batch.main), out / "embeddings.csv")


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condreg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    names = ["generate", "train", "sweep", "evaluate", "correlate", "export-embeddings"]
    for name in names:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--measure", action="append", dest="measures",
                       help="measure name; repeatable for sweep")
        p.add_argument("--lambda", type=float, action="append", dest="lambdas",
                       help="trade-off weight; repeatable for sweep")
        p.add_argument("--unroll", type=int, help="inner steps for the adversarial baseline")
        p.add_argument("--steps", type=int, help="training steps")
        if name in ("evaluate", "export-embeddings"):
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "export-embeddings":
            p.add_argument("--split", choices=["train", "test", "aux"], default="test")
        if name == "correlate":
            p.add_argument("--run", type=Path, required=True, help="training run directory")
    return parser


def resolve_config(args) -> ExperimentConfig:
    raw = {}
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = ExperimentConfig.from_dict(raw)
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.measures:
        cfg.measures = list(args.measures)
    if args.unroll is not None:
        cfg.train["unroll"] = args.unroll
    if args.steps is not None:
        cfg.train["steps"] = args.steps
    if args.lambdas:
        if args.command == "sweep":
            cfg.lambdas = list(args.lambdas)
        else:
            cfg.train["lam"] = args.lambdas[-1]
    if "measure" in cfg.train and args.measures is None and "measures" not in raw:
        cfg.measures = [cfg.train.pop("measure")]
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = args.out
    try:
        cfg = resolve_config(args)
        out_dir = cfg.out
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "sweep":
            cmd_sweep(cfg, jobs=args.jobs)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint)
        elif args.command == "correlate":
            cmd_correlate(cfg, args.run)
        else:
            cmd_export_embeddings(cfg, args.checkpoint, args.split)
    except (CondRegError, OSError, json.JSONDecodeError, TypeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        if out_dir:
            try:
                _write_json(Path(out_dir) / "error.json", err)
            except OSError:
                pass
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
