"""Command-line entry point: ``tga <subcommand> [options]``.

Settings come from three layers, later ones winning: built-in defaults,
``--config FILE`` (flat ``section.key = value`` lines, ``#`` comments) and
flags (dedicated flags or ``--set section.key=value``).  Sections are
``gen`` (data generator), ``model`` and ``train``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .data import GeneratorConfig, bayes_optimal_auc, generate, load_jsonl, write_jsonl
from .events import DEFAULT_MAX_SEQ_LEN
from .graph import TransitionView, build_graph, edge_stats
from .model import Model
from .training import Evaluator, TrainConfig, train

log = logging.getLogger("tga")

SECTIONS = {"gen": GeneratorConfig, "model": ModelConfig, "train": TrainConfig}
ABLATIONS = ("full", "minus-item", "minus-category", "minus-neighbor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# configuration

def _coerce(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(int(t) if t.lstrip("-").isdigit() else t for t in items)
    if default is None:
        if text.lower() == "none":
            return None
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
        return tuple(t.strip() for t in text.split(",") if t.strip()) if "," in text or text == "" else text
    return text


def _set(overrides: dict, assignment: str, origin: str):
    if "=" not in assignment:
        raise UsageError(f"{origin}: expected section.key=value, got {assignment!r}")
    key, value = (s.strip() for s in assignment.split("=", 1))
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise UsageError(f"{origin}: unknown setting {key!r} (sections: {', '.join(SECTIONS)})")
    known = {f.name: f for f in fields(SECTIONS[section])}
    if name not in known:
        raise UsageError(f"{origin}: unknown setting {key!r}")
    default = known[name].default
    if name == "enabled_views":
        default = ()
    try:
        overrides.setdefault(section, {})[name] = _coerce(value, default)
    except ValueError as exc:
        raise UsageError(f"{origin}: bad value for {key}: {exc}") from None


def read_config_file(path) -> dict:
    overrides: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            _set(overrides, line, f"{path}:{lineno}")
    return overrides


def effective_config(args) -> dict:
    """Merge defaults < config file < flags into one dict per section."""
    merged: dict = {s: {} for s in SECTIONS}
    if args.config:
        for s, vals in read_config_file(args.config).items():
            merged[s].update(vals)
    flags: dict = {}
    for assignment in args.set or []:
        _set(flags, assignment, "--set")
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set(flags, f"{key}={value}", f"--{dest.replace('_', '-')}")
    for s, vals in flags.items():
        merged[s].update(vals)
    if args.seed is not None:
        merged["gen"]["seed"] = args.seed
        merged["train"]["seed"] = args.seed
    return merged


def build_configs(merged: dict) -> tuple[GeneratorConfig, ModelConfig, TrainConfig]:
    try:
        gen = GeneratorConfig(**merged["gen"])
        mc = ModelConfig(**merged["model"])
        tc = TrainConfig(**merged["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    if tc.layers is not None:
        mc = replace(mc, layers=tc.layers)
    return gen, mc, tc


# dedicated flags and the setting each one maps to
FLAG_KEYS = {
    "n_users": "gen.n_users",
    "pattern": "gen.pattern",
    "d": "model.d",
    "heads": "model.heads",
    "layers": "train.layers",
    "precision": "model.precision",
    "views": "train.enabled_views",
    "lr": "train.lr",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "optimizer": "train.optimizer",
    "eval_every": "train.eval_every",
}


def _common(p: argparse.ArgumentParser, settings: bool = True):
    p.add_argument("--seed", type=int, default=None, help="seed for data, parameters and shuffling")
    p.add_argument("--out", type=Path, default=None, help="directory for every output file")
    if settings:
        p.add_argument("--config", type=Path, default=None, help="flat key=value settings file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one setting")


def _model_flags(p):
    p.add_argument("--d", type=int, help="per-field embedding width (node width is 4d)")
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--precision", choices=("float32", "float64"))


def _train_flags(p):
    p.add_argument("--train", type=Path, help="training JSONL (generated when omitted)")
    p.add_argument("--valid", type=Path, help="validation JSONL (generated when omitted)")
    p.add_argument("--n-valid", type=int, default=None, help="held-out samples when generating")
    p.add_argument("--n-users", type=int, help="generated training samples")
    p.add_argument("--pattern", choices=("click_cart", "two_hop"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--eval-every", type=int)
    _model_flags(p)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tga", description="Transition-aware graph attention for behavior sequences.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic train/valid JSONL")
    _common(p)
    p.add_argument("--n-users", type=int, help="training samples")
    p.add_argument("--n-valid", type=int, default=None, help="validation samples (default: a fifth of --n-users)")
    p.add_argument("--pattern", choices=("click_cart", "two_hop"))

    p = sub.add_parser("build-graph", help="build transition graphs for a JSONL file")
    _common(p, settings=False)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--dump", action="store_true", help="print every edge")
    p.add_argument("--views", default="item,category,neighbor", help="comma-separated views to keep")

    p = sub.add_parser("train", help="train a model, keep the best checkpoint")
    _common(p)
    _train_flags(p)
    p.add_argument("--views", help="comma-separated enabled views (empty string for none)")

    p = sub.add_parser("eval", help="score a JSONL file with a checkpoint")
    _common(p, settings=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)

    p = sub.add_parser("bench", help="training and inference speed vs sequence length")
    _common(p)
    _model_flags(p)
    p.add_argument("--lengths", default="256,512,1024,2048")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=4, help="sequences per timed batch")
    p.add_argument("--memory-cap", type=float, default=2e9, help="baseline attention bytes above which it is skipped")
    p.add_argument("--models", default="tga,transformer")

    p = sub.add_parser("ablate", help="full model vs each view removed, paired seeds")
    _common(p)
    _train_flags(p)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed or 0)")

    p = sub.add_parser("grad-check", help="finite-difference check of every module's gradients")
    _common(p)
    p.add_argument("--probes", type=int, default=200, help="coordinates probed per module")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--layers", type=int)
    return parser


# --------------------------------------------------------------------------
# helpers

def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _write(out: Path | None, name: str, text: str):
    if out is not None:
        (out / name).write_text(text)


def _load(path: Path, max_len: int) -> list:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return list(load_jsonl(path, max_seq_len=max_len))


def _datasets(args, gen: GeneratorConfig, mc: ModelConfig):
    max_len = min(mc.max_positions, DEFAULT_MAX_SEQ_LEN)
    if args.train is not None:
        tr = _load(args.train, max_len)
        va = _load(args.valid, max_len) if args.valid is not None else []
        return tr, va, None
    n_valid = args.n_valid if args.n_valid is not None else max(gen.n_users // 5, 1)
    gcfg = replace(gen, n_users=gen.n_users + n_valid)
    samples = list(generate(gcfg))
    tr, va = samples[:gen.n_users], samples[gen.n_users:]
    ceiling, prevalence = bayes_optimal_auc(va, gcfg)
    return tr, va, {"bayes_auc": ceiling, "prevalence": prevalence}


def _header(merged: dict, gen, mc, tc, extra: dict | None = None) -> dict:
    out = {"generator": asdict(gen), "model": mc.to_dict(), "train": asdict(tc)}
    out["overrides"] = {s: {k: list(v) if isinstance(v, tuple) else v for k, v in vals.items()}
                        for s, vals in merged.items() if vals}
    out.update(extra or {})
    return out


def _echo(header: dict):
    print("# config " + json.dumps(header, sort_keys=True, default=str), flush=True)


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    merged = effective_config(args)
    gen, _, _ = build_configs(merged)
    n_valid = args.n_valid if args.n_valid is not None else max(gen.n_users // 5, 1)
    gcfg = replace(gen, n_users=gen.n_users + n_valid)
    samples = list(generate(gcfg))
    tr, va = samples[:gen.n_users], samples[gen.n_users:]
    ceiling, prevalence = bayes_optimal_auc(va, gcfg)
    info = {"generator": asdict(gcfg), "n_train": len(tr), "n_valid": len(va),
            "bayes_auc_valid": ceiling, "prevalence_valid": prevalence}
    out = _out_dir(args) or Path(".")
    write_jsonl(tr, out / "train.jsonl")
    write_jsonl(va, out / "valid.jsonl")
    (out / "generator.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(json.dumps(info, sort_keys=True))
    return 0


def cmd_build_graph(args) -> int:
    try:
        views = frozenset(TransitionView.parse(v) for v in args.views.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lines = []
    for i, sample in enumerate(_load(args.input, DEFAULT_MAX_SEQ_LEN)):
        g = build_graph(sample.sequence, views)
        if args.dump:
            lines.append(f"# sample {i}: {g.num_nodes} nodes, {g.num_edges} edges\n")
            lines.append(g.dump())
        else:
            stats = {v.label: round(x, 4) for v, x in edge_stats(g).items()}
            lines.append(json.dumps({"sample": i, "nodes": g.num_nodes, "edges": g.num_edges,
                                     "mean_degree": stats}) + "\n")
    text = "".join(lines)
    sys.stdout.write(text)
    _write(_out_dir(args), "graph_dump.txt" if args.dump else "graph_stats.jsonl", text)
    return 0


def cmd_train(args) -> int:
    merged = effective_config(args)
    gen, mc, tc = build_configs(merged)
    tr, va, ceiling = _datasets(args, gen, mc)
    header = _header(merged, gen, mc, tc, {"data": ceiling})
    _echo(header)
    model = Model(tc.model_config(mc), seed=tc.seed)
    result = train(tr, va, model, tc, out_dir=_out_dir(args))
    result.header["cli"] = header
    out = _out_dir(args)
    if out is not None:
        (out / "header.json").write_text(json.dumps(result.header, indent=2, sort_keys=True, default=str) + "\n")
    summary = {"best_valid_auc": result.best_auc, "best_step": result.best_step,
               "steps": len(result.rows), "final_loss": result.rows[-1].loss}
    if ceiling:
        summary["bayes_auc"] = ceiling["bayes_auc"]
    print(json.dumps(summary, sort_keys=True))
    return 0


def model_from_checkpoint(path: Path) -> Model:
    header = nx.read_header(path)
    model_cfg = header.get("meta", {}).get("model")
    if model_cfg is None:
        raise nx.CheckpointError(f"{path}: no model config in checkpoint metadata")
    model = Model(ModelConfig.from_dict(model_cfg), seed=header.get("seed", 0))
    nx.load_checkpoint(path, model.params)
    return model


def cmd_eval(args) -> int:
    model = model_from_checkpoint(args.checkpoint)
    samples = _load(args.input, min(model.cfg.max_positions, DEFAULT_MAX_SEQ_LEN))
    report = Evaluator(model, samples).evaluate()
    text = json.dumps(report, sort_keys=True)
    print(text)
    _write(_out_dir(args), "eval.json", text + "\n")
    return 0


def cmd_bench(args) -> int:
    from .bench import measure_ti_speed, parity_report, ratio_table, speed_csv

    merged = effective_config(args)
    _, mc, _ = build_configs(merged)
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from None
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    if not lengths or any(L <= 0 for L in lengths) or set(models) - {"tga", "transformer"}:
        raise UsageError("need positive --lengths and --models from {tga, transformer}")
    _echo({"model": mc.to_dict(), "lengths": lengths, "repeats": args.repeats, "batch_size": args.batch_size})
    rows = measure_ti_speed(mc, lengths, repeats=args.repeats, batch_size=args.batch_size,
                            memory_cap_bytes=args.memory_cap, models=models,
                            seed=args.seed if args.seed is not None else 0)
    csv_text, ratios, parity = speed_csv(rows), ratio_table(rows), parity_report(mc)
    print(csv_text, end="")
    print()
    print(ratios, end="")
    print()
    print("parameter counts")
    print(parity, end="")
    out = _out_dir(args)
    _write(out, "bench.csv", csv_text)
    _write(out, "ratios.txt", ratios)
    _write(out, "parity.csv", parity)
    return 0


def ablation_views(variant: str) -> tuple[str, ...]:
    all_views = tuple(v.label for v in TransitionView)
    if variant == "full":
        return all_views
    removed = variant.removeprefix("minus-")
    return tuple(v for v in all_views if v != removed)


def cmd_ablate(args) -> int:
    merged = effective_config(args)
    gen, mc, tc = build_configs(merged)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    else:
        seeds = [tc.seed]
    tr, va, ceiling = _datasets(args, gen, mc)
    _echo(_header(merged, gen, mc, tc, {"data": ceiling, "seeds": seeds}))
    out = _out_dir(args)
    results: dict[tuple[str, int], float] = {}
    for seed in seeds:
        for variant in ABLATIONS:
            run_cfg = replace(tc, seed=seed, enabled_views=ablation_views(variant))
            model = Model(run_cfg.model_config(mc), seed=seed)
            run_dir = out / f"{variant}_seed{seed}" if out is not None else None
            res = train(tr, va, model, run_cfg, out_dir=run_dir)
            results[variant, seed] = res.best_auc
            log.info("%s seed %d: best valid AUC %.6f", variant, seed, res.best_auc)
    report = ablation_report(results, seeds)
    print(report, end="")
    _write(out, "ablation.csv", report)
    return 0


def ablation_report(results: dict[tuple[str, int], float], seeds) -> str:
    """Per-seed best AUC and delta against the full model (negative = worse)."""
    lines = ["variant,seed,best_auc,delta_vs_full"]
    for variant in ABLATIONS:
        for seed in seeds:
            a = results[variant, seed]
            lines.append(f"{variant},{seed},{a:.6f},{a - results['full', seed]:+.6f}")
    lines.append("")
    lines.append("variant,mean_best_auc,mean_delta,worse_in")
    for variant in ABLATIONS:
        deltas = [results[variant, s] - results["full", s] for s in seeds]
        mean_auc = float(np.mean([results[variant, s] for s in seeds]))
        worse = sum(d < 0 for d in deltas)
        lines.append(f"{variant},{mean_auc:.6f},{float(np.mean(deltas)):+.6f},{worse}/{len(seeds)}")
    return "\n".join(lines) + "\n"


def module_of(name: str) -> str:
    if name.startswith("emb."):
        return "embedding"
    if name.startswith("head."):
        return "head"
    return name.split(".", 1)[0]


def cmd_grad_check(args) -> int:
    merged = effective_config(args)
    merged["model"].setdefault("precision", "float64")
    for key, value in dict(d=4, heads=2, d_k=4, d_v=4, v_item=256, v_cat=32, max_positions=64,
                           mlp_hidden=(16, 8), profile_dim=4).items():
        merged["model"].setdefault(key, value)
    _, mc, _ = build_configs(merged)
    if mc.precision != "float64":
        raise UsageError("grad-check needs model.precision=float64")
    seed = args.seed if args.seed is not None else 0
    samples = list(generate(GeneratorConfig(n_users=3, seq_len_min=6, seq_len_max=24, n_items=24, n_categories=4,
                              profile_dim=mc.profile_dim, seed=seed)))
    model = Model(mc, seed=seed)
    # move off the zero-initialised biases so every block carries gradient
    rng = np.random.default_rng(seed)
    for v in model.params.values.values():
        v += rng.normal(0, 0.1, v.shape)
    batch = model.batch(samples)
    groups: dict[str, list[str]] = {}
    for name in model.params:
        groups.setdefault(module_of(name), []).append(name)
    _echo({"model": mc.to_dict(), "probes": args.probes, "eps": args.eps, "tol": args.tol, "seed": seed})
    lines = ["module,probes,max_rel_error,status"]
    ok = True
    for module, names in groups.items():
        report = nx.grad_check(lambda: model.loss(batch), model.params, n_probe=args.probes,
                               eps=args.eps, tol=args.tol, seed=seed, names=names)
        ok &= report.passed
        lines.append(f"{module},{len(report.probes)},{report.max_rel_error:.3e},{'ok' if report.passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    _write(_out_dir(args), "grad_check.csv", text)
    if not ok:
        print("grad-check: gradient mismatch above tolerance", file=sys.stderr)
        return 2
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "tga: error: a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    except Exception as exc:       # runtime failure
        print(f"tga: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
