"""Command-line interface: ``lagcausal <command> [options]``.

Every command accepts ``--config FILE`` (a JSON object of option values);
explicit flags override the file.  Randomized commands need ``--seed`` or
``--entropy``.  Exit codes: 0 success, 2 configuration error, 3 I/O error,
4 degenerate statistic.
"""
from __future__ import annotations

import argparse
import importlib.resources
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (SCORE_SUFFIX, BaselineError, BootstrapConfig, ScoreTensor, bootstrap_probabilities,
                        get_scorer, read_scores, write_scores)
from .container import ContainerError
from .corpus import SYNTHETIC, CorpusError, CorpusSpec, build_corpus, read_corpus, read_manifest
from .model import (CHECKPOINT_SUFFIX, ArchConfig, LossConfig, ToyPredictor, TrainConfig, TrainingError,
                    param_count, predict, train)
from .rng import derive_seed, entropy_seed
from .stats import DegenerateStatisticError, EvalReport, auc, bonferroni, format_table, wilcoxon_signed_rank
from .tscm import Kind, MechanismPolicy

log = logging.getLogger("lagcausal")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DEGENERATE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _range(text: str, cast):
    parts = str(text).split(":")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ConfigError(f"expected LO:HI, got {text!r}")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError as exc:
        raise ConfigError(f"bad range {text!r}: {exc}") from exc


def _pairs(text, cast=str) -> list[tuple[str, object]]:
    """``"a=0.5,b=0.5"`` (or an already-parsed list) as ``[(a, 0.5), (b, 0.5)]``."""
    if isinstance(text, (list, tuple)):
        return [(str(k), cast(v)) for k, v in text]
    out = []
    for item in str(text).split(","):
        if "=" not in item:
            raise ConfigError(f"expected NAME=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), cast(v.strip())))
    return out


# command -> option defaults; the keys double as the accepted config-file keys
DEFAULTS = {
    "generate": {"count": 100, "vars": "3:5", "density": "0.1:0.4", "steps": 500, "max_lag": 3, "min_lag": 1,
                 "warmup": 100, "kinds": None, "no_self_lag": False, "mixture": None, "external": None,
                 "no_normalize": False, "max_attempts": 1000},
    "baseline": {"method": "corr", "max_lag": None, "ridge": 1e-3, "bootstrap": 0, "block_len": 25,
                 "row_bootstrap": False, "threshold": None, "top_q": 0.15, "out": None, "report": None},
    "train": {"v_max": None, "max_lag": None, "l_max": 500, "hidden": 64, "epochs": 30, "lr": 0.05,
              "batch_size": 32, "momentum": 0.9, "val_fraction": 0.1, "patience": 5, "lambda_edge": 1.0,
              "lambda_corr": 0.75, "gamma": 2.0, "no_augment": False, "history": None},
    "predict": {"out": None, "report": None},
    "eval": {"method": None, "report": None},
    "stats": {"alpha": 0.05, "exact_max_n": 20},
    "params": {"blocks": 8, "d_model": 1024, "n_heads": 8, "d_ff": 1024, "kernel": 3, "train_aids": 1,
               "distil": 1, "v_max": 12, "max_lag": 3},
}
RANDOMIZED = {"generate", "train"}
SCHEMAS = {"generate": "generate", "baseline": "report", "predict": "report", "eval": "report",
           "train": "train", "stats": "stats", "params": "params"}


def load_schema(command: str) -> dict:
    """JSON schema of the ``--json`` output of ``command``."""
    res = importlib.resources.files("lagcausal") / "schemas" / f"{SCHEMAS[command]}.json"
    return json.loads(res.read_text())


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        unknown = set(file_cfg) - set(cfg) - {"seed"}
        if unknown:
            raise ConfigError(f"{args.config}: unknown options for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS[command]:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    seed = cfg.pop("seed", None)
    if args.seed is not None:
        seed = args.seed
    if command in RANDOMIZED or (command == "baseline" and cfg["bootstrap"]):
        if seed is None:
            if not args.entropy:
                raise ConfigError(f"{command} is randomized: pass --seed N (or --entropy to draw one)")
            seed = entropy_seed()
    cfg["seed"] = seed
    return cfg


def _out_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {p}")
    return p


def _eval_instance(scores: ScoreTensor, inst) -> float:
    v = scores.values.shape[0]
    mask = np.arange(v) < inst.num_vars
    return auc(scores, inst.graph, mask)


def _evaluate(method: str, pairs) -> tuple[EvalReport, list[str]]:
    """AUC per instance; instances whose AUC is undefined (no edges) are skipped."""
    report, skipped = EvalReport(method), []
    for inst, scores in pairs:
        try:
            report.per_dataset_auc.append((inst.id, _eval_instance(scores, inst)))
        except DegenerateStatisticError:
            skipped.append(inst.id)
    if skipped:
        log.warning("%d instance(s) without a defined AUC skipped", len(skipped))
    return report, skipped


def _report_output(report: EvalReport, skipped, cfg) -> dict:
    if cfg.get("report"):
        report.save(cfg["report"])
    return {**report.to_json(), "skipped": skipped, "config": cfg}


def cmd_generate(args, cfg) -> dict:
    out = _out_dir(args.out_dir)
    policy = MechanismPolicy()
    if cfg["kinds"]:
        kinds = cfg["kinds"].split(",") if isinstance(cfg["kinds"], str) else cfg["kinds"]
        by_name = {k.value.lower(): k for k in Kind}
        try:
            policy = MechanismPolicy(kinds=tuple(by_name[k.strip().lower()] for k in kinds))
        except KeyError as exc:
            raise ConfigError(f"unknown mechanism kind {exc}; choose from {[k.value for k in Kind]}") from exc
    mixture = _pairs(cfg["mixture"], float) if cfg["mixture"] else [(SYNTHETIC, 1.0)]
    external = _pairs(cfg["external"]) if cfg["external"] else []
    spec = CorpusSpec(
        count=int(cfg["count"]), vars=_range(cfg["vars"], int), density=_range(cfg["density"], float),
        policy=policy, num_steps=int(cfg["steps"]), max_lag=int(cfg["max_lag"]), min_lag=int(cfg["min_lag"]),
        allow_self_lagged=not cfg["no_self_lag"], warmup=int(cfg["warmup"]), mixture=tuple(mixture),
        external=tuple(external), normalize=not cfg["no_normalize"], max_attempts=int(cfg["max_attempts"]),
        seed=int(cfg["seed"]))
    manifest = build_corpus(spec, out, jobs=args.jobs, extra={"run": {"command": "generate", **cfg}})
    return {"count": manifest["count"], "rejections": manifest["rejections"],
            "content_hash": manifest["content_hash"], "manifest": str(out / "manifest.json"), "config": cfg}


def _score_one(args):
    inst, scorer, boot, max_lag = args
    if boot is None:
        return scorer(inst)
    return bootstrap_probabilities(inst, scorer, boot, max_lag)


def cmd_baseline(args, cfg) -> dict:
    instances = read_corpus(args.corpus)
    out = _out_dir(cfg["out"]) if cfg["out"] else None
    max_lag = cfg["max_lag"] or _corpus_max_lag(args.corpus, instances)
    kw = {"ridge": float(cfg["ridge"])} if cfg["method"] == "var" else {}
    try:
        scorer = get_scorer(cfg["method"], int(max_lag), **kw)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    boot = None
    if cfg["bootstrap"]:
        boot = BootstrapConfig(n=int(cfg["bootstrap"]), block_len=int(cfg["block_len"]),
                               threshold=cfg["threshold"], top_q=float(cfg["top_q"]),
                               mode="row" if cfg["row_bootstrap"] else "block", seed=int(cfg["seed"]))
        boot.validate(int(max_lag))
    jobs = [(inst, scorer, _seeded(boot, k), int(max_lag)) for k, inst in enumerate(instances)]
    scores = _map(_score_one, jobs, args.jobs)
    if out is not None:
        for inst, s in zip(instances, scores):
            write_scores(s, out / f"{inst.id}{SCORE_SUFFIX}", inst.id, {"method": cfg["method"]})
    label = cfg["method"] + ("+bootstrap" if boot else "")
    report, skipped = _evaluate(label, zip(instances, scores))
    return _report_output(report, skipped, cfg)


def _seeded(boot: BootstrapConfig | None, k: int):
    if boot is None:
        return None
    return replace(boot, seed=derive_seed(boot.seed, "instance", k))


def _map(fn, items, jobs: int):
    """Ordered map, on worker processes when ``jobs > 1``."""
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _corpus_max_lag(corpus_dir, instances) -> int:
    spec = read_manifest(corpus_dir).get("spec") or {}
    if "max_lag" in spec:
        return int(spec["max_lag"])
    return max((inst.graph.max_lag for inst in instances), default=1)


def cmd_train(args, cfg) -> dict:
    instances = read_corpus(args.corpus)
    if not instances:
        raise ConfigError("cannot train on an empty corpus")
    v_max = int(cfg["v_max"] or max(inst.num_vars for inst in instances))
    max_lag = int(cfg["max_lag"] or _corpus_max_lag(args.corpus, instances))
    model = ToyPredictor.init(v_max, max_lag, int(cfg["hidden"]), seed=int(cfg["seed"]), l_max=int(cfg["l_max"]))
    loss_cfg = LossConfig(float(cfg["lambda_edge"]), float(cfg["lambda_corr"]), float(cfg["gamma"]))
    tcfg = TrainConfig(lr=float(cfg["lr"]), epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                       momentum=float(cfg["momentum"]), val_fraction=float(cfg["val_fraction"]),
                       patience=int(cfg["patience"]), seed=int(cfg["seed"]),
                       augment=not cfg["no_augment"])
    model, hist = train(instances, model, loss_cfg, tcfg)
    model.save(args.model, extra={"config": cfg})
    if cfg["history"]:
        hist.write_csv(cfg["history"])
    last = hist.rows[-1] if hist.rows else {}
    best = max((r["val_auc"] for r in hist.rows if r["val_auc"] == r["val_auc"]), default=None)
    return {"model": str(args.model), "epochs_run": len(hist), "final": last, "best_val_auc": best,
            "history": hist.rows, "config": {**cfg, "v_max": v_max, "max_lag": max_lag}}


def cmd_predict(args, cfg) -> dict:
    model = ToyPredictor.load(args.model)
    instances = read_corpus(args.corpus)
    out = _out_dir(cfg["out"]) if cfg["out"] else None
    scores = [predict(model, inst) for inst in instances]
    if out is not None:
        for inst, s in zip(instances, scores):
            write_scores(s, out / f"{inst.id}{SCORE_SUFFIX}", inst.id, {"method": "toy"})
    report, skipped = _evaluate("toy", zip(instances, scores))
    return _report_output(report, skipped, cfg)


def cmd_eval(args, cfg) -> dict:
    instances = read_corpus(args.corpus)
    score_dir = Path(args.scores)
    if not score_dir.is_dir():
        raise FileNotFoundError(f"score directory does not exist: {score_dir}")
    pairs = []
    for inst in instances:
        s, _ = read_scores(score_dir / f"{inst.id}{SCORE_SUFFIX}")
        pairs.append((inst, s))
    report, skipped = _evaluate(cfg["method"] or score_dir.name, pairs)
    return _report_output(report, skipped, cfg)


def cmd_stats(args, cfg) -> dict:
    ref = EvalReport.load(args.reference)
    others = [EvalReport.load(p) for p in args.others]
    alpha = float(cfg["alpha"])
    comparisons = []
    for other in others:
        a, b = dict(ref.per_dataset_auc), dict(other.per_dataset_auc)
        common = sorted(set(a) & set(b))
        res = wilcoxon_signed_rank([a[k] for k in common], [b[k] for k in common],
                                   exact_max_n=int(cfg["exact_max_n"]))
        comparisons.append({"method": other.method, "n_pairs": len(common), "statistic": res.statistic,
                            "p_value": res.p_value, "n_effective": res.n_effective, "test": res.method})
    verdicts = bonferroni([c["p_value"] for c in comparisons], alpha)
    for c, v in zip(comparisons, verdicts):
        c["significant_at"] = alpha / len(comparisons)
        c["significant"] = v
    return {"reference": ref.method, "alpha": alpha, "comparisons": comparisons,
            "table": [r.to_json() for r in [ref, *others]], "config": cfg}


def cmd_params(args, cfg) -> dict:
    arch = ArchConfig(**{k: int(cfg[k]) for k in DEFAULTS["params"]})
    try:
        out = param_count(arch)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return {**out, "config": cfg}


def _text(command: str, res: dict) -> str:
    if command == "generate":
        return (f"instances: {res['count']}\nrejections: {res['rejections']}\n"
                f"content hash: {res['content_hash']}")
    if command in ("baseline", "predict", "eval"):
        return format_table([EvalReport.from_json(res)])
    if command == "train":
        f = res["final"]
        line = f"epochs: {res['epochs_run']}, best validation AUC: {res['best_val_auc']}"
        return line + (f"\nfinal train loss: {f['train_loss']:.5f}" if f else "")
    if command == "stats":
        rows = [format_table([EvalReport.from_json(t) for t in res["table"]]), ""]
        for c in res["comparisons"]:
            verdict = "significant" if c["significant"] else "not significant"
            rows.append(f"{res['reference']} vs {c['method']}: W={c['statistic']:g} p={c['p_value']:.4g} "
                        f"({c['test']}) {verdict} "
                        f"at {c['significant_at']:.4g}")
        return "\n".join(rows)
    if command == "params":
        lines = [f"{k:<12} {res[k]:>14,}" for k in ("A", "embedding", "encoder", "distil", "projection",
                                                     "head", "total")]
        return "\n".join(lines + [f"note: {n}" for n in res["notes"]])
    return json.dumps(res)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--config", help="JSON file of option values (flags override it)")
    common.add_argument("--seed", type=int, help="base seed for randomized commands")
    common.add_argument("--entropy", action="store_true", help="draw a fresh seed when --seed is absent")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-instance work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lagcausal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="build a synthetic corpus")
    g.add_argument("out_dir")
    g.add_argument("--count", type=int)
    g.add_argument("--vars", help="variable count range LO:HI")
    g.add_argument("--density", help="edge density range LO:HI")
    g.add_argument("--steps", type=int, help="time steps per instance")
    g.add_argument("--max-lag", type=int)
    g.add_argument("--min-lag", type=int)
    g.add_argument("--warmup", type=int)
    g.add_argument("--kinds", help="comma-separated mechanism kinds, e.g. Linear,Tanh")
    g.add_argument("--no-self-lag", action="store_true", help="forbid X^i_{t-l} -> X^i_t edges")
    g.add_argument("--mixture", help="source proportions, e.g. synthetic=0.8,ext=0.2")
    g.add_argument("--external", help="external sources, e.g. ext=path/to/dir")
    g.add_argument("--no-normalize", action="store_true")
    g.add_argument("--max-attempts", type=int)

    b = sub.add_parser("baseline", parents=[common], help="score a corpus with a classical method")
    b.add_argument("corpus")
    b.add_argument("--method", help="corr or var")
    b.add_argument("--max-lag", type=int)
    b.add_argument("--ridge", type=float)
    b.add_argument("--bootstrap", type=int, help="number of bootstrap resamples (0 = off)")
    b.add_argument("--block-len", type=int)
    b.add_argument("--row-bootstrap", action="store_true")
    b.add_argument("--threshold", type=float)
    b.add_argument("--top-q", type=float)
    b.add_argument("--out", help="directory for per-instance score files")
    b.add_argument("--report", help="write the EvalReport JSON here")

    t = sub.add_parser("train", parents=[common], help="train the correlation-feature model")
    t.add_argument("corpus")
    t.add_argument("model", help=f"checkpoint path ({CHECKPOINT_SUFFIX})")
    for name, typ in (("v-max", int), ("max-lag", int), ("l-max", int), ("hidden", int), ("epochs", int),
                      ("lr", float), ("batch-size", int), ("momentum", float), ("val-fraction", float),
                      ("patience", int), ("lambda-edge", float), ("lambda-corr", float), ("gamma", float)):
        t.add_argument(f"--{name}", type=typ)
    t.add_argument("--no-augment", action="store_true",
                   help="disable per-epoch random relabelling of variables")
    t.add_argument("--history", help="write the per-epoch history CSV here")

    pr = sub.add_parser("predict", parents=[common], help="score a corpus with a trained model")
    pr.add_argument("model")
    pr.add_argument("corpus")
    pr.add_argument("--out")
    pr.add_argument("--report")

    e = sub.add_parser("eval", parents=[common], help="AUC of stored score files")
    e.add_argument("corpus")
    e.add_argument("scores")
    e.add_argument("--method", help="label for the report (default: score directory name)")
    e.add_argument("--report")

    s = sub.add_parser("stats", parents=[common], help="paired Wilcoxon tests against a reference report")
    s.add_argument("reference")
    s.add_argument("others", nargs="+")
    s.add_argument("--alpha", type=float)
    s.add_argument("--exact-max-n", type=int)

    pa = sub.add_parser("params", parents=[common], help="closed-form parameter count")
    for name in ("blocks", "d-model", "n-heads", "d-ff", "kernel", "train-aids", "distil", "v-max", "max-lag"):
        pa.add_argument(f"--{name}", type=int)
    return p


COMMANDS = {"generate": cmd_generate, "baseline": cmd_baseline, "train": cmd_train, "predict": cmd_predict,
            "eval": cmd_eval, "stats": cmd_stats, "params": cmd_params}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = resolve(args.command, args)
        res = COMMANDS[args.command](args, cfg)
    except DegenerateStatisticError as exc:
        print(f"error: degenerate statistic: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, CorpusError, BaselineError, TrainingError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps(_clean(res), sort_keys=True, allow_nan=False))
    else:
        print(_text(args.command, res))
    return EXIT_OK


def _clean(x):
    """JSON-safe copy: numpy scalars to Python, NaN to null."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


if __name__ == "__main__":
    sys.exit(main())
