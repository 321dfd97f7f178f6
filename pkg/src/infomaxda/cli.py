"""Command-line front end.

Experiments read a flat config file of dotted keys::

    # comments and blank lines are ignored
    data.kind = two_moons
    data.rotation_deg = 45
    train.alpha = 1.0
    train.max_epochs = 5

Any ``--section.key value`` argument overrides the file. Artifacts go to
``--out`` (default ``$INFOMAXDA_OUT/<subcommand>`` or ``runs/<subcommand>``) and
every run leaves a ``manifest.json`` there.

Exit codes: 0 ok, 1 check failed, 2 invalid input, 3 numerical abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import oracle, synthdata, trainer
from .numerics import NumericalError
from .trainer import ConfigError, TrainConfig

log = logging.getLogger("infomaxda")

EXIT_OK, EXIT_CHECK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4

ALPHA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
BETA_GRID = (1e-4, 1e-3, 1e-2, 0.1, 1.0)

DATA_DEFAULTS = {
    "kind": "two_moons",
    "n": 1000,
    "noise": 0.1,
    "source_rotation_deg": 0.0,
    "rotation_deg": 45.0,
    "third_rotation_deg": 60.0,
    "source_seed": 1,
    "target_seed": 2,
    "third_seed": 3,
    "dims": 2,
    "classes": 3,
    "shift": 2.0,
    "seed": 0,
    "source_path": None,
    "target_path": None,
    "third_path": None,
}
RUN_DEFAULTS = {"seeds": "0,1,2,3,4", "alphas": ALPHA_GRID, "betas": BETA_GRID, "jobs": 1}
COMMAND_DEFAULTS = {"cross-eval": {"data.rotation_deg": 30.0}}
SECTIONS = {"train": {f.name for f in fields(TrainConfig)}, "data": set(DATA_DEFAULTS), "run": set(RUN_DEFAULTS)}


class InputError(ValueError):
    """Bad flag, config key or data file contents (exit 2)."""


# ---------------------------------------------------------------------------
# Config parsing


def parse_value(text: str):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{origin}: line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        _check_key(key, f"{origin}: line {lineno}")
        out[key] = parse_value(value)
    return out


def _check_key(key: str, where: str) -> None:
    section, _, name = key.partition(".")
    if section not in SECTIONS or name not in SECTIONS[section]:
        raise InputError(f"{where}: unknown config key {key!r}")


def load_config(path) -> dict:
    """Flat dotted-key dict from a config file or from a previous run's manifest.json."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            flat = json.loads(text)["config"]
        except (ValueError, KeyError, TypeError):
            raise InputError(f"{path}: not a run manifest") from None
        for key in flat:
            _check_key(key, str(path))
        return dict(flat)
    flat = parse_config_text(text, str(path))
    # data paths are relative to the config file
    for key in ("data.source_path", "data.target_path", "data.third_path"):
        if isinstance(flat.get(key), str):
            flat[key] = str((path.parent / flat[key]).resolve())
    return flat


def parse_overrides(tokens: list[str]) -> dict:
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise InputError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise InputError(f"--{key} needs a value")
            value = tokens[i + 1]
            i += 1
        _check_key(key, "command line")
        out[key] = parse_value(value)
        i += 1
    return out


def resolve_config(command: str, file_values: dict, overrides: dict) -> dict:
    """Defaults, then command defaults, then file, then command line."""
    flat = {f"train.{f.name}": _plain(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}
    flat.update({f"data.{k}": v for k, v in DATA_DEFAULTS.items()})
    flat.update({f"run.{k}": _plain(v) for k, v in RUN_DEFAULTS.items()})
    flat.update(COMMAND_DEFAULTS.get(command, {}))
    flat.update(file_values)
    flat.update(overrides)
    return flat


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _section(flat: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def _number_list(value, what: str) -> list:
    if isinstance(value, (int, float)):
        return [value]
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        return [parse_value(str(v)) if isinstance(v, str) else v for v in value]
    except TypeError:
        raise InputError(f"{what} must be a comma-separated list") from None


def train_config(flat: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(_section(flat, "train"))
    except (TypeError, ValueError) as exc:
        raise InputError(f"train config: {exc}") from None


# ---------------------------------------------------------------------------
# Data


def load_domains(flat: dict, need_target_labels: bool, with_third: bool = False):
    """(source, target, third) as LabeledSets; target/third may be UnlabeledSet for csv data."""
    d = _section(flat, "data")
    kind = d["kind"]
    if kind == "two_moons":
        def moons(seed, angle):
            return synthdata.DomainSpec("two_moons", {
                "n": int(d["n"]), "noise": float(d["noise"]), "seed": int(seed), "rotation_deg": float(angle),
            }).build()
        source = moons(d["source_seed"], d["source_rotation_deg"])
        target = moons(d["target_seed"], d["rotation_deg"])
        third = moons(d["third_seed"], d["third_rotation_deg"]) if with_third else None
    elif kind == "blob_shift":
        dims = int(d["dims"])
        shift = _number_list(d["shift"], "data.shift")
        if len(shift) == 1:
            shift = shift * dims
        source, target = synthdata.DomainSpec("blob_shift", {
            "n": int(d["n"]), "dims": dims, "classes": int(d["classes"]), "shift": shift, "seed": int(d["seed"]),
        }).build()
        third = None
        if with_third:
            doubled = [2 * s for s in shift]
            _, third = synthdata.gen_blob_shift(int(d["n"]), dims, int(d["classes"]), doubled, int(d["seed"]))
    elif kind == "csv":
        paths = {"source": d["source_path"], "target": d["target_path"]}
        if with_third:
            paths["third"] = d["third_path"]
        missing = [k for k, v in paths.items() if not v]
        if missing:
            raise InputError(f"data.kind = csv needs data.{missing[0]}_path")
        loaded = {k: synthdata.load_csv(v) for k, v in paths.items()}
        source, target, third = loaded["source"], loaded["target"], loaded.get("third")
        if not isinstance(source, synthdata.LabeledSet):
            raise InputError(f"{paths['source']}: source data needs a label column")
    else:
        raise InputError(f"data.kind must be two_moons, blob_shift or csv, got {kind!r}")
    if need_target_labels and not isinstance(target, synthdata.LabeledSet):
        raise InputError("this command scores the target domain and needs target labels")
    if with_third and not isinstance(third, synthdata.LabeledSet):
        raise InputError("cross evaluation needs a labeled third domain")
    return source, target, third


def _unlabeled(data):
    return data.unlabeled() if isinstance(data, synthdata.LabeledSet) else data


def _eval_sets(target, third=None) -> dict:
    out = {}
    if isinstance(target, synthdata.LabeledSet):
        out["target"] = target
    if third is not None:
        out["third"] = third
    return out


# ---------------------------------------------------------------------------
# Artifact writing


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


class RunDir:
    """Output directory that writes every file atomically and remembers what it wrote."""

    def __init__(self, path: Path):
        self.path = path
        self.artifacts: list[str] = []

    def write_text(self, name: str, text: str) -> Path:
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if name != "manifest.json" and name not in self.artifacts:
            self.artifacts.append(name)
        return target

    def write_csv(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
        return self.write_text(name, buf.getvalue())

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")

    def write_metrics(self, name: str, history) -> Path:
        return self.write_csv(name, trainer.METRIC_COLUMNS, trainer.iter_rows(history))


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def default_out_root() -> Path:
    return Path(os.environ.get("INFOMAXDA_OUT", "runs"))


# ---------------------------------------------------------------------------
# Subcommands. Each returns an exit code and may raise; ``main`` maps
# exceptions to codes and always writes the manifest.


def cmd_gaussian_mi(args, run: RunDir, state: dict) -> int:
    if not abs(args.rho) < 1:
        raise InputError(f"--rho must satisfy |rho| < 1, got {args.rho}")
    if args.dims < 1 or args.n < 2 or args.epochs < 0:
        raise InputError("--dims and --n must be positive and --epochs non-negative")
    settings = dict(trainer.MI_RUN_SETTINGS)
    for key in ("lr", "momentum", "batch_size", "max_steps", "hinge_lambda"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    try:
        cfg = TrainConfig(estimator=args.estimator, seed=args.seed, max_epochs=args.epochs, **settings)
    except ConfigError as exc:
        raise InputError(str(exc)) from None
    state["config"] = {"gaussian_mi." + k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}
    state["config"].update({f"train.{k}": v for k, v in cfg.to_dict().items()})
    true_mi = oracle.gaussian_mi(args.rho, args.dims)
    x, z = synthdata.gen_correlated_gaussians(args.n, args.dims, args.rho, args.data_seed)
    t0 = time.perf_counter()
    curve = trainer.estimate_mi_run(cfg, x, z, on_epoch=lambda e, v: log.info("epoch %d: estimate %.4f", e, v))
    wall = time.perf_counter() - t0
    run.write_csv("mi_curve.csv", ("epoch", "estimate", "true_mi"),
                  ((e, v, true_mi) for e, v in zip(curve.epochs, curve.estimates)))
    run.write_json("summary.json", {
        "estimator": args.estimator, "rho": args.rho, "dims": args.dims, "true_mi": true_mi,
        "final_estimate": curve.final if curve.estimates else None, "critic_steps": curve.steps,
        "final_constraint_gap": curve.gaps[-1] if curve.gaps else None, "wall_time_s": wall,
    })
    print(f"true MI {true_mi:.4f}  final estimate {curve.final:.4f}  ({curve.steps} critic steps, {wall:.1f}s)")
    return EXIT_OK


def cmd_train(args, run: RunDir, state: dict) -> int:
    flat = state["config"]
    cfg = train_config(flat)
    source, target, _ = load_domains(flat, need_target_labels=False)
    t0 = time.perf_counter()
    model = trainer.train_dpn(cfg, source, _unlabeled(target), _eval_sets(target),
                              on_epoch=lambda r: log.info("%s", r))
    wall = time.perf_counter() - t0
    run.write_metrics("metrics.csv", model.history)
    summary = {"source_acc": trainer.evaluate(model, source), "wall_time_s": wall, "epochs": len(model.history),
               "target_acc": trainer.evaluate(model, target) if isinstance(target, synthdata.LabeledSet) else None}
    run.write_json("summary.json", summary)
    print(f"source acc {summary['source_acc']:.4f}  target acc {_fmt(summary['target_acc'])}")
    return EXIT_OK


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _write_cells(run: RunDir, histories: dict, name) -> None:
    # written from the parent process only, so artifact bookkeeping stays serial
    for key, history in histories.items():
        run.write_metrics(f"cells/{name(*key)}/metrics.csv", history)


def _seeds(flat: dict) -> list[int]:
    seeds = [int(s) for s in _number_list(flat["run.seeds"], "run.seeds")]
    if not seeds:
        raise InputError("run.seeds must name at least one seed")
    return seeds


def cmd_ablate(args, run: RunDir, state: dict) -> int:
    flat = state["config"]
    cfg = train_config(flat)
    seeds = _seeds(flat)
    source, target, _ = load_domains(flat, need_target_labels=True)
    t0 = time.perf_counter()
    table = trainer.ablation_run(cfg, source, target, seeds, jobs=int(flat["run.jobs"]))
    wall = time.perf_counter() - t0
    _write_cells(run, table.histories, lambda mode, seed: f"{mode}-seed{seed}")
    run.write_csv("ablation.csv", ["mode", *(f"seed_{s}" for s in seeds)],
                  ([mode, *accs] for mode, accs in table.accuracies.items()))
    summary = table.summary()
    run.write_json("summary.json", {"modes": summary, "seeds": seeds, "wall_time_s": wall})
    for mode, st in summary.items():
        print(f"{mode:>5}: {st['mean']:.4f} +/- {st['std']:.4f}")
    return EXIT_OK


def cmd_sweep(args, run: RunDir, state: dict) -> int:
    flat = state["config"]
    cfg = train_config(flat)
    alphas = [float(a) for a in _number_list(flat["run.alphas"], "run.alphas")]
    betas = [float(b) for b in _number_list(flat["run.betas"], "run.betas")]
    source, target, _ = load_domains(flat, need_target_labels=True)
    t0 = time.perf_counter()
    try:
        result = trainer.sensitivity_sweep(cfg, source, target, alphas, betas, jobs=int(flat["run.jobs"]))
    except ConfigError as exc:
        raise InputError(str(exc)) from None
    wall = time.perf_counter() - t0
    _write_cells(run, result.histories, lambda a, b: f"alpha{a!r}-beta{b!r}")
    run.write_csv("matrix.csv", ["alpha\\beta", *(repr(b) for b in betas)],
                  ([repr(a), *row] for a, row in zip(alphas, result.matrix.tolist())))
    run.write_json("summary.json", {"alphas": alphas, "betas": betas, "matrix": result.matrix.tolist(),
                                    "aborted": result.aborted, "wall_time_s": wall})
    print(f"{len(alphas)}x{len(betas)} sweep, {result.aborted} aborted cells")
    return EXIT_NUMERICAL if result.aborted else EXIT_OK


def cmd_compare(args, run: RunDir, state: dict) -> int:
    flat = state["config"]
    cfg = train_config(flat)
    seeds = _seeds(flat)
    source, target, _ = load_domains(flat, need_target_labels=True)
    t0 = time.perf_counter()
    table = trainer.estimator_comparison(cfg, source, target, seeds, jobs=int(flat["run.jobs"]))
    wall = time.perf_counter() - t0
    _write_cells(run, table.histories, lambda arm, seed: f"{arm}-seed{seed}")
    run.write_csv("comparison.csv", ["estimator", *(f"seed_{s}" for s in seeds)],
                  ([arm, *accs] for arm, accs in table.accuracies.items()))
    summary = table.summary()
    ranking = sorted(summary, key=lambda arm: -summary[arm]["mean"])
    run.write_json("summary.json", {"estimators": summary, "ranking": ranking, "seeds": seeds, "wall_time_s": wall})
    for arm in ranking:
        print(f"{arm:>12}: {summary[arm]['mean']:.4f} +/- {summary[arm]['std']:.4f}")
    return EXIT_OK


def cmd_cross_eval(args, run: RunDir, state: dict) -> int:
    flat = state["config"]
    cfg = train_config(flat)
    source, target, third = load_domains(flat, need_target_labels=True, with_third=True)
    if third.dim != source.dim:
        raise InputError("third domain feature dim does not match the source")
    t0 = time.perf_counter()
    model = trainer.train_dpn(cfg, source, target.unlabeled(), _eval_sets(target, third))
    wall = time.perf_counter() - t0
    result = trainer.cross_eval(model, third)
    run.write_metrics("metrics.csv", model.history)
    run.write_csv("curves.csv", ("epoch", "target_acc", "third_acc"),
                  zip(range(1, len(model.history) + 1), model.curves["target"], model.curves["third"]))
    result.update(target_acc=trainer.evaluate(model, target), wall_time_s=wall)
    run.write_json("summary.json", result)
    r = result["pearson_r"]
    print(f"target acc {result['target_acc']:.4f}  third acc {result['third_acc']:.4f}  "
          f"pearson r {'null (' + result['reason'] + ')' if r is None else f'{r:.4f}'}")
    return EXIT_OK


def cmd_oracle(args, run: RunDir, state: dict) -> int:
    if args.instances < 1:
        raise InputError("--instances must be >= 1")
    state["config"] = {"oracle.suite": args.suite, "oracle.instances": args.instances, "oracle.seed": args.seed}
    names = list(oracle.SUITES) if args.suite == "all" else [args.suite]
    reports = {}
    for name in names:
        kwargs = {} if args.tolerance is None else {"tol": args.tolerance}
        t0 = time.perf_counter()
        rep = oracle.SUITES[name](args.instances, args.seed, **kwargs)
        out = rep.to_dict()
        out["wall_time_s"] = time.perf_counter() - t0
        reports[name] = out
        print(json.dumps({name: _json_safe(out)}, sort_keys=True))
    run.write_json("oracle.json", reports)
    return EXIT_OK if all(r["passed"] for r in reports.values()) else EXIT_CHECK


def cmd_gradcheck(args, run: RunDir, state: dict) -> int:
    state["config"] = {"gradcheck.loss": args.loss, "gradcheck.seed": args.seed}
    report = oracle.gradcheck_loss(args.loss, args.seed)
    out = report.to_dict()
    run.write_json("gradcheck.json", out)
    print(json.dumps(_json_safe(out), sort_keys=True))
    return EXIT_OK if report.passed else EXIT_CHECK


CONFIG_COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "sweep": cmd_sweep,
                   "compare": cmd_compare, "cross-eval": cmd_cross_eval}


class _Parser(argparse.ArgumentParser):
    # raise instead of exiting so a bad flag still leaves a manifest behind
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _peek_out(argv: list[str]):
    for i, tok in enumerate(argv):
        if tok == "--out" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--out="):
            return tok.split("=", 1)[1]
    return None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="infomaxda", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gaussian-mi", help="MI convergence run on correlated Gaussian pairs")
    g.add_argument("--rho", type=float, default=0.9)
    g.add_argument("--dims", type=int, default=1)
    g.add_argument("--estimator", choices=("two_critic", "mine_single"), default="two_critic")
    g.add_argument("--epochs", type=int, default=trainer.MI_RUN_EPOCHS)
    g.add_argument("--seed", type=int, default=0, help="critic init and batching seed")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--n", type=int, default=100_000, help="sample pairs")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--hinge-lambda", type=float)
    g.add_argument("--max-steps", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gaussian_mi)

    for name, func in CONFIG_COMMANDS.items():
        c = sub.add_parser(name, help=f"{name} experiment from a config file",
                           epilog="Any --section.key value pair overrides the config file.")
        c.add_argument("config", nargs="?", help="flat key = value file, or a previous manifest.json")
        c.add_argument("--out")
        c.add_argument("--jobs", type=int, help="parallel runs (run.jobs)")
        if name in ("ablate", "compare"):
            c.add_argument("--seeds", help="comma-separated seeds (run.seeds)")
        if name == "sweep":
            c.add_argument("--alphas", help="comma-separated alpha grid (run.alphas)")
            c.add_argument("--betas", help="comma-separated beta grid (run.betas)")
        c.set_defaults(func=func)

    o = sub.add_parser("oracle", help="exact discrete checks of the bound identities")
    o.add_argument("--suite", choices=(*oracle.SUITES, "all"), default="all")
    o.add_argument("--instances", type=int, default=1000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--tolerance", type=float, help=argparse.SUPPRESS)  # test hook for the failure path
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    gc = sub.add_parser("gradcheck", help="finite-difference check of one loss")
    gc.add_argument("--loss", choices=oracle.GRADCHECK_LOSSES, required=True)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    started = _now()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        command = next((a for a in argv if not a.startswith("-")), None)
        if command not in (*CONFIG_COMMANDS, "gaussian-mi", "oracle", "gradcheck"):
            return EXIT_INVALID
        args = argparse.Namespace(command=command, out=_peek_out(argv), config=None, verbose=False,
                                  func=lambda *a: EXIT_INVALID)
        extra = []
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.out) if args.out else default_out_root() / args.command
    run = RunDir(out_dir)
    state = {"config": {}, "config_path": getattr(args, "config", None)}
    try:
        if args.command in CONFIG_COMMANDS:
            overrides = parse_overrides(extra)
            for flag, key in (("jobs", "run.jobs"), ("seeds", "run.seeds"), ("alphas", "run.alphas"),
                              ("betas", "run.betas")):
                if getattr(args, flag, None) is not None:
                    overrides[key] = getattr(args, flag)
            file_values = load_config(args.config) if args.config else {}
            state["config"] = resolve_config(args.command, file_values, overrides)
        elif extra:
            raise InputError(f"unrecognized arguments: {' '.join(extra)}")
        out_dir.mkdir(parents=True, exist_ok=True)
        code = args.func(args, run, state)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    except OSError as exc:
        where = f": {exc.filename}" if exc.filename else ""
        print(f"I/O error{where}: {exc.strerror or exc}", file=sys.stderr)
        code = EXIT_IO
    except ValueError as exc:  # malformed data files and similar
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INVALID
    manifest = {
        "subcommand": args.command, "config_path": state["config_path"], "config": state["config"],
        "out_dir": str(out_dir.resolve()), "started": started, "finished": _now(),
        "artifacts": run.artifacts, "exit_status": code,
    }
    try:
        run.write_json("manifest.json", manifest)
    except OSError as exc:
        print(f"I/O error: could not write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
