"""Command-line harness: generate data, train, evaluate, sweep r, dump weight maps.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data, metrics, tensorio
from . import networks as nw
from . import trainer as tr

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MODES = ("mcpm", "baseline", "both")
REPORT_COLUMNS = ["method", "r", "miou", "dice", "hausdorff", "seed", "status",
                  "weight_band", "weight_clean"]


class ConfigError(ValueError):
    pass


# -- configuration --------------------------------------------------------------

@dataclass
class SweepSpec:
    r: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    seeds: list = field(default_factory=lambda: [0])
    overrides: dict = field(default_factory=dict)  # str(r) -> partial train config

    def validate(self) -> None:
        if not self.r or any(not 0.0 <= float(v) <= 1.0 for v in self.r):
            raise ConfigError(f"sweep r values must lie in [0, 1], got {self.r}")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        for key, ov in self.overrides.items():
            _check_keys(ov, tr.TrainConfig, f"sweep.overrides[{key}]")


@dataclass
class ExperimentConfig:
    synthetic: data.SyntheticSpec = field(default_factory=data.SyntheticSpec)
    corruption: data.CorruptionSpec = field(default_factory=data.CorruptionSpec)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    output_dir: str = "runs/default"
    mode: str = "both"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, synthetic=replace(self.synthetic, seed=seed),
                       corruption=replace(self.corruption, seed=seed),
                       train=replace(self.train, seed=seed))

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            self.synthetic.validate()
            self.corruption.validate()
            self.train.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        self.sweep.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = tr.config_dict(self.train)
        return json.loads(json.dumps(d))  # tuples -> lists


def _check_keys(d, cls, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _build(cls, d, where):
    _check_keys(d, cls, where)
    try:
        return cls(**d)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    _check_keys(d, ExperimentConfig, "config")
    corruption = dict(d.get("corruption", {}))
    if "elastic" in corruption:
        corruption["elastic"] = _build(data.ElasticParams, corruption["elastic"],
                                       "corruption.elastic")
    cfg = ExperimentConfig(
        synthetic=_build(data.SyntheticSpec, d.get("synthetic", {}), "synthetic"),
        corruption=_build(data.CorruptionSpec, corruption, "corruption"),
        train=_build(tr.TrainConfig, d.get("train", {}), "train"),
        sweep=_build(SweepSpec, d.get("sweep", {}), "sweep"),
        output_dir=d.get("output_dir", "runs/default"),
        mode=d.get("mode", "both"),
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    return config_from_dict(raw)


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def echo_config(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())


# -- helpers ----------------------------------------------------------------------

def make_splits(cfg: ExperimentConfig, clean=None) -> dict[str, data.Dataset]:
    train, meta, test = clean if clean is not None else data.generate(cfg.synthetic)
    train = data.corrupt(train, cfg.corruption)
    return {"train": train, "meta": meta, "test": test}


def _load_data(args, cfg) -> dict[str, data.Dataset]:
    if args.data is None:
        return make_splits(cfg)
    try:
        splits, _ = data.load(args.data)
    except (OSError, KeyError, ValueError) as err:
        raise ConfigError(f"cannot load dataset {args.data}: {err}") from None
    return splits


def _modes(mode: str) -> list[str]:
    return ["mcpm", "baseline"] if mode == "both" else [mode]


def run_method(method: str, config: tr.TrainConfig, splits, out: Path | None = None,
               log=None) -> dict:
    """Train one method and return its final metrics; writes artifacts under ``out``."""
    train, meta, test = splits["train"], splits["meta"], splits["test"]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    theta = None
    try:
        if method == "mcpm":
            W, theta, hist = tr.fit(config, train, meta, test, out_dir=out, log=log)
        else:
            W, hist = tr.baseline_fit(config, train, test, meta, out_dir=out, log=log)
    except tr.DivergenceError as err:
        if out is not None and err.history is not None:
            err.history.to_csv(out / "history.csv")
        raise
    result = {}
    if len(test):
        rep = metrics.evaluate(W, test)
        result.update(rep.summary())
        if out is not None:
            rep.to_csv(out / "test_metrics.csv")
    if theta is not None:
        stats = tr.weight_stats(W, theta, train, normalize=config.normalize_loss)
        result["weight_band"] = stats["mean_weight_corrupted"]
        result["weight_clean"] = stats["mean_weight_clean"]
    if out is not None:
        hist.to_csv(out / "history.csv")
        tensors = {"seg": W} if theta is None else {"seg": W, "mask": theta}
        nw.save_checkpoint(out / "final.mpck", tensors,
                           {"method": method, "train": tr.config_dict(config)})
    return result


# -- commands ---------------------------------------------------------------------

def cmd_generate(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out or cfg.output_dir)
    splits = make_splits(cfg)
    data.save(out, splits, cfg.synthetic, cfg.corruption)
    echo_config(out, cfg)
    counts = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"wrote dataset to {out} ({counts}, r={cfg.corruption.r})")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out or cfg.output_dir)
    splits = _load_data(args, cfg)
    echo_config(out, cfg)
    final = {}
    status = EXIT_OK
    for method in _modes(args.mode or cfg.mode):
        try:
            final[method] = run_method(method, cfg.train, splits, out / method,
                                       log=lambda s, m=method: print(f"[{m}] {s}"))
        except tr.DivergenceError as err:
            print(f"error: {method} diverged: {err}", file=sys.stderr)
            final[method] = {"status": "diverged"}
            status = EXIT_RUNTIME
    write_json(out / "final_metrics.json", final)
    return status


def _checkpoint(path):
    if path is None:
        raise ConfigError("--checkpoint is required")
    try:
        return nw.load_checkpoint(path)
    except (OSError, ValueError) as err:
        raise ConfigError(f"cannot read checkpoint {path}: {err}") from None


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    tensors, _ = _checkpoint(args.checkpoint)
    splits = _load_data(args, cfg)
    ds = splits[args.split]
    rep = metrics.evaluate(tensors["seg"], ds)
    summary = rep.summary()
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        out = Path(args.out)
        echo_config(out, cfg)
        rep.to_csv(out / "metrics.csv")
        write_json(out / "metrics.json", summary)
    return EXIT_OK


def cmd_weights(args, cfg: ExperimentConfig) -> int:
    tensors, meta = _checkpoint(args.checkpoint)
    if "mask" not in tensors:
        raise ConfigError("checkpoint holds no mask-network parameters")
    ds = _load_data(args, cfg)[args.split]
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"index {args.index} out of range for {len(ds)} {args.split} samples")
    normalize = bool(meta.get("train", {}).get("normalize_loss", False))
    s = ds[args.index]
    sp = tr.SegPass(tensors["seg"], s.image[None], s.label[None])
    loss = sp.loss_map[0, 0]
    r = tr.weight_map(tensors["mask"], sp.loss_map, normalize=normalize)[0, 0]
    band = s.band

    out = Path(args.out or cfg.output_dir)
    echo_config(out, cfg)
    stem = f"{args.split}_{args.index:05d}"
    for name, arr in (("R", r), ("L", loss), ("prediction", sp.prob[0]), ("label", s.label),
                      ("clean_label", s.clean_label)):
        tensorio.save(out / f"{stem}_{name}.mptd", arr)
    inside = f"{r[band].mean():.6f}" if band.any() else "N/A"
    outside = f"{r[~band].mean():.6f}" if (~band).any() else "N/A"
    print(f"mean weight inside band: {inside}")
    print(f"mean weight outside band: {outside}")
    return EXIT_OK


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out or cfg.output_dir)
    echo_config(out, cfg)
    seeds = [args.seed] if args.seed is not None else list(cfg.sweep.seeds)
    rows, timing = [], []
    for seed in seeds:
        base = cfg.with_seed(seed)
        clean = data.generate(base.synthetic)  # shared across r for this seed
        for r in cfg.sweep.r:
            r = float(r)
            cell = replace(base, corruption=replace(base.corruption, r=r))
            tcfg = replace(cell.train, **cfg.sweep.overrides.get(repr(r), {}))
            splits = make_splits(cell, clean)
            for method in _modes(args.mode or cfg.mode):
                cell_dir = out / f"seed{seed}" / f"r{r:g}" / method
                echo_config(cell_dir, replace(cell, train=tcfg, mode=method))
                t0 = time.perf_counter()
                try:
                    res = run_method(method, tcfg, splits, cell_dir)
                    status = "ok"
                except tr.DivergenceError as err:
                    print(f"warning: {method} r={r} seed={seed} diverged: {err}", file=sys.stderr)
                    res, status = {}, "diverged"
                elapsed = time.perf_counter() - t0
                rows.append({"method": method, "r": r, "seed": seed, "status": status, **res})
                timing.append((method, r, seed, elapsed))
                print(f"{method:8s} r={r:g} seed={seed} miou={res.get('miou', float('nan')):.4f} "
                      f"({elapsed:.0f}s)")
    with open(out / "sweep_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in REPORT_COLUMNS])
    # wall time kept apart so the report itself is reproducible byte for byte
    with open(out / "sweep_timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "r", "seed", "wall_time_s"])
        for method, r, seed, elapsed in timing:
            writer.writerow([method, repr(r), seed, f"{elapsed:.3f}"])
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcpm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("--seed", type=int, help="overrides every seed in the config")

    g = sub.add_parser("generate", help="write a synthetic dataset container")
    common(g)
    t = sub.add_parser("train", help="train MCPM and/or the baseline")
    common(t)
    t.add_argument("--data", help="dataset directory (default: generate from config)")
    t.add_argument("--mode", choices=MODES)
    e = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(e)
    e.add_argument("--data")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=data.SPLITS, default="test")
    s = sub.add_parser("sweep", help="train both methods over a list of r values")
    common(s)
    s.add_argument("--mode", choices=MODES)
    w = sub.add_parser("weights", help="dump R and L maps for one sample")
    common(w)
    w.add_argument("--data")
    w.add_argument("--checkpoint")
    w.add_argument("--index", type=int, default=0)
    w.add_argument("--split", choices=data.SPLITS, default="train")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "weights": cmd_weights}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None and args.command != "sweep":
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except tr.DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError, np.linalg.LinAlgError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
