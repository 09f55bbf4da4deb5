"""Command-line entry point: ``lasoftmoe <command> [options]``.

Commands: gen-data, train, eval, ablate, gradcheck, dump-embeddings.

Configuration files are flat UTF-8 ``key = value`` lines with ``#`` comments.
Keys are dotted by section (``data.gap``, ``encoder.depth``, ``train.epochs``,
``ablation.seeds``, ``run.variant``); ``--set key=value`` and the dedicated
flags override the file.  Every command that takes ``--out`` writes the fully
resolved configuration there before any work starts.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error (also a partial evaluation report), 3 numeric failure (divergence or a
failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, checks, plots
from . import data as data_mod
from . import tensor as T
from . import trainkit
from .encoder import ConfigError, DualEncoder, EncoderConfig, PromptSet
from .metrics import MetricError, compute_metrics, eer_threshold
from .trainkit import REFERENCE_ABLATION, TrainConfig, TrainingError

log = logging.getLogger("lasoftmoe")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.lsmt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _seeds(value) -> tuple[int, ...]:
    if isinstance(value, (tuple, list)):
        return tuple(int(v) for v in value)
    parts = [p.strip() for p in str(value).split(",") if p.strip()]
    if not parts:
        raise ValueError("seed list is empty")
    return tuple(int(p) for p in parts)


@dataclass
class RunConfig:
    """Merged view of the dataset, encoder and training settings plus run-level options."""

    data: data_mod.SyntheticDatasetSpec = field(default_factory=data_mod.SyntheticDatasetSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    jobs: int = 1
    variant: str = "la_softmoe"
    data_dir: str = ""

    SECTIONS = {"data": "data", "encoder": "encoder", "train": "train"}
    RUN_KEYS = {"ablation.seeds": "seeds", "ablation.jobs": "jobs", "run.variant": "variant", "run.data": "data_dir"}

    @classmethod
    def keys(cls) -> list[str]:
        base = cls()
        out = []
        for section in cls.SECTIONS:
            out += [f"{section}.{f.name}" for f in fields(getattr(base, section))]
        return out + list(cls.RUN_KEYS)

    def with_values(self, values: dict[str, str]) -> "RunConfig":
        """Apply string-valued overrides; unknown keys and unparsable values raise ConfigError."""
        known = set(self.keys())
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        out = self
        for section in self.SECTIONS:
            current = getattr(self, section)
            changes = {}
            for f in fields(current):
                key = f"{section}.{f.name}"
                if key in values:
                    changes[f.name] = _coerce(key, values[key], getattr(current, f.name))
            if changes:
                try:
                    out = replace(out, **{section: current.replace(**changes)})
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {section} settings: {exc}") from exc
        for key, attr in self.RUN_KEYS.items():
            if key in values:
                try:
                    value = _seeds(values[key]) if attr == "seeds" else _coerce(key, values[key], getattr(self, attr))
                except ValueError as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
                out = replace(out, **{attr: value})
        if out.variant not in trainkit.VARIANTS:
            raise ConfigError(f"run.variant must be one of {trainkit.VARIANTS}, got {out.variant!r}")
        if out.jobs < 1:
            raise ConfigError("ablation.jobs must be >= 1")
        return out

    def to_text(self) -> str:
        lines = [f"# resolved configuration (lasoftmoe {__version__})"]
        for section in self.SECTIONS:
            for k, v in asdict(getattr(self, section)).items():
                lines.append(f"{section}.{k} = {_format(v)}")
        lines.append(f"ablation.seeds = {','.join(str(s) for s in self.seeds)}")
        lines.append(f"ablation.jobs = {self.jobs}")
        lines.append(f"run.variant = {self.variant}")
        lines.append(f"run.data = {self.data_dir}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, text: str, default):
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def load_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def resolve_config(args, extra: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    values.update({k: v for k, v in (extra or {}).items() if v is not None})
    return RunConfig().with_values(values)


# ---------------------------------------------------------------------------
# Run directories and helpers
# ---------------------------------------------------------------------------


def prepare_out(out, cfg: RunConfig, log_name: str | None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")
    if log_name:
        handler = logging.FileHandler(out / log_name, mode="w", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
    return out


def load_splits(path) -> dict[str, data_mod.Split]:
    if not path:
        raise UsageError("a dataset directory is required (--data or run.data)")
    return data_mod.read_splits(path)


def load_model(checkpoint, cfg: RunConfig) -> DualEncoder:
    model = DualEncoder(cfg.encoder.replace(variant=cfg.variant), cfg.train.seed)
    values = T.load_checkpoint(checkpoint)
    try:
        model.load_parameters(values, strict=True)
    except (KeyError, ValueError) as exc:
        raise T.CheckpointError(f"{checkpoint}: does not match the configured model ({exc})") from exc
    return model


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return "nan" if x is None else f"{x:.6g}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args, {"data.seed": args.seed})
    out = prepare_out(args.out, cfg, None)
    splits = data_mod.generate(cfg.data)
    data_mod.write_splits(splits, out)
    print(f"{'split':<6} {'live':>6} {'phys':>6} {'digital':>8} {'total':>6}")
    for name in data_mod.SPLITS:
        c = splits[name].counts()
        print(f"{name:<6} {c['live']:>6} {c['phys']:>6} {c['digital']:>8} {len(splits[name]):>6}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args, {"train.seed": args.seed, "run.variant": args.variant, "run.data": args.data})
    out = prepare_out(args.out, cfg, "train.log")
    splits = load_splits(cfg.data_dir)
    log.info("training %s for %d epochs on %d samples", cfg.variant, cfg.train.epochs, len(splits["train"]))
    t0 = time.perf_counter()
    result = trainkit.train(cfg.variant, splits, cfg.train, cfg.encoder)
    log.info("trained %d steps in %.1fs", result.steps, time.perf_counter() - t0)
    T.save_checkpoint(result.model.parameters(), out / CHECKPOINT_NAME)
    write_csv(out / "loss_curve.csv", ["epoch", "loss"], [(i + 1, repr(v)) for i, v in enumerate(result.loss_curve)])
    if result.loss_curve:
        plots.loss_curves({cfg.variant: result.loss_curve}, out / "loss_curve.png")
    report = trainkit.evaluate(result.model, splits, cfg.train, "test")
    (out / "metrics.json").write_text(
        report.to_json(variant=cfg.variant, split="test", template_id=cfg.train.template_id, policy=report.policy) + "\n",
        encoding="utf-8",
    )
    log.info("test ACER %.4f ACC %.4f AUC %.4f EER %.4f", report.acer, report.acc, report.auc, report.eer)
    print(report.to_json(variant=cfg.variant, split="test"))
    return EXIT_OK


def _checkpoint_config(args) -> RunConfig:
    """Configuration for a saved model: --config, else the config.txt next to the checkpoint."""
    if not args.config:
        sibling = Path(args.checkpoint).parent / CONFIG_NAME
        if sibling.exists():
            args.config = str(sibling)
    return resolve_config(args, {"train.seed": args.seed, "run.variant": args.variant, "run.data": args.data})


def cmd_eval(args) -> int:
    cfg = _checkpoint_config(args)
    model = load_model(args.checkpoint, cfg)
    splits = load_splits(cfg.data_dir)
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}")
    split = splits[args.split]
    if args.subtype:
        split = split.subset(np.flatnonzero(split.subtypes == data_mod.SUBTYPES.index(args.subtype)))
    template_ids = PromptSet().ids() if args.all_templates else [args.template or cfg.train.template_id]
    out = prepare_out(args.out, cfg, None) if args.out else None
    rows, status = [], EXIT_OK
    for tid in template_ids:
        scores = trainkit.score_split(model, split, tid)
        threshold, policy = 0.5, "fixed"
        if cfg.train.threshold_policy == "eer-on-eval":
            threshold, policy = eer_threshold(trainkit.score_split(model, splits["eval"], tid)), "eer-on-eval"
        try:
            report = compute_metrics(scores, threshold, policy)
            extra = {}
        except MetricError as exc:
            report, extra, status = exc.partial, {"warning": str(exc)}, EXIT_DATA
            print(f"warning: {exc}; threshold metrics only", file=sys.stderr)
        print(report.to_json(template_id=tid, split=args.split, subtype=args.subtype or "all", policy=policy, **extra))
        rows.append((tid, report))
    if args.all_templates:
        accs = [r.acc for _, r in rows]
        print(f"ACC across {len(rows)} templates: min {min(accs):.4f} max {max(accs):.4f} spread {max(accs) - min(accs):.4f}")
    if out is not None:
        write_csv(
            out / "templates.csv",
            ["template_id", "acer", "apcer", "bpcer", "acc", "auc", "eer", "threshold"],
            [(tid, *(_fmt(getattr(r, k)) for k in ("acer", "apcer", "bpcer", "acc", "auc", "eer", "threshold"))) for tid, r in rows],
        )
        if len(rows) > 1:
            plots.template_spread([(tid, r.acc) for tid, r in rows], out / "templates.png")
    return status


SUMMARY_COLUMNS = ("acer", "acc", "auc", "eer")


def cmd_ablate(args) -> int:
    extra = {"train.seed": args.seed, "run.data": args.data, "ablation.jobs": args.jobs}
    if args.seeds:
        extra["ablation.seeds"] = args.seeds
    cfg = resolve_config(args, extra)
    out = prepare_out(args.out, cfg, "ablation.log")
    if len(cfg.seeds) == 1:
        msg = "only one seed: medians equal single runs and carry no variance information"
        log.warning(f"warning: {msg}")
    splits = load_splits(cfg.data_dir)
    t0 = time.perf_counter()

    def progress(row):
        r = row.report
        log.info("seed %d %-10s ACER %.4f ACC %.4f AUC %.4f (%.0fs)", row.seed, row.variant, r.acer, r.acc, r.auc, time.perf_counter() - t0)

    rows = trainkit.run_ablation(splits, cfg.train, cfg.encoder, cfg.seeds, progress=progress, jobs=cfg.jobs)
    write_csv(
        out / "ablation_runs.csv",
        ["variant", "seed", "acer", "apcer", "bpcer", "acc", "auc", "eer", "threshold", "final_loss"],
        [
            (r.variant, r.seed, *(_fmt(getattr(r.report, k)) for k in ("acer", "apcer", "bpcer", "acc", "auc", "eer", "threshold")), _fmt(r.final_loss))
            for r in rows
        ],
    )
    table = trainkit.median_table(rows)
    summary = [(v, *(f"{100 * table[v][k]:.2f}" for k in SUMMARY_COLUMNS)) for v in table]
    write_csv(out / "ablation_summary.csv", ["variant", "ACER(%)", "ACC(%)", "AUC(%)", "EER(%)"], summary)
    reference = " / ".join(f"{v} {REFERENCE_ABLATION[v]['acer']:.2f}" for v in trainkit.VARIANTS)
    with open(out / "ablation_summary.csv", "a", encoding="utf-8") as fh:
        fh.write(f"# reference ACER(%): {reference}\n")
    plots.ablation_bars(table, out / "ablation.png", REFERENCE_ABLATION)
    plots.loss_curves(
        {v: list(np.mean([r.loss_curve for r in rows if r.variant == v], axis=0)) for v in table if any(r.loss_curve for r in rows)},
        out / "ablation_losses.png",
        "mean over seeds",
    )
    print(f"{'variant':<12} {'ACER(%)':>8} {'ACC(%)':>8} {'AUC(%)':>8} {'EER(%)':>8}   median over {len(cfg.seeds)} seed(s)")
    for row in summary:
        print(f"{row[0]:<12} " + " ".join(f"{x:>8}" for x in row[1:]))
    print(f"{'reference':<12} ACER(%) {reference}")
    log.info("ablation finished in %.0fs", time.perf_counter() - t0)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args, {"train.seed": args.seed})
    if args.out:
        prepare_out(args.out, cfg, None)
    scopes = checks.SCOPES if args.scope == "all" else (args.scope,)
    seed = cfg.train.seed
    cases = []
    for scope in scopes:
        cases += checks.full_cases(seed, cfg.encoder) if scope == "full" else checks.cases_for(scope, seed)
    if args.corrupt:
        with T.inject_grad_fault(args.corrupt, args.corrupt_scale):
            results = checks.run_cases(cases, h=args.h, tol=args.tol, seed=seed)
    else:
        results = checks.run_cases(cases, h=args.h, tol=args.tol, seed=seed)
    print(f"{'component':<28} {'max_rel_error':>13} {'checked':>8} {'seconds':>8}  result")
    for r in results:
        print(f"{r.name:<28} {r.max_rel_error:>13.3e} {r.checked:>8} {r.seconds:>8.2f}  {'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed at tol {args.tol:g} (h={args.h:g})")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_dump_embeddings(args) -> int:
    cfg = _checkpoint_config(args)
    model = load_model(args.checkpoint, cfg)
    splits = load_splits(cfg.data_dir)
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vecs = trainkit.dump_embeddings(model, splits[args.split], out)
    print(f"wrote {vecs.shape[0]} x {vecs.shape[1]} embeddings to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lasoftmoe",
        description="Soft MoE and La-SoftMoE dual encoders on a synthetic unified attack-detection benchmark.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True, out_help="output directory"):
        sp.add_argument("--config", metavar="PATH", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key (repeatable)")
        sp.add_argument("--seed", type=int, default=None, help="seed override (data.seed for gen-data, train.seed otherwise)")
        sp.add_argument("--out", metavar="DIR", required=out_required, help=out_help)
        # also accepted after the subcommand; SUPPRESS keeps the top-level value when absent
        sp.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="only warnings on stderr")

    def fmt(sp):
        sp.formatter_class = argparse.ArgumentDefaultsHelpFormatter

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(sp, out_help="dataset directory to create")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one variant and evaluate it on the test split")
    common(sp, out_help="run directory")
    sp.add_argument("--variant", choices=trainkit.VARIANTS, default=None, help="model variant (default: run.variant)")
    sp.add_argument("--data", metavar="DIR", default=None, help="dataset directory (default: run.data)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint; JSON report per template on stdout")
    common(sp, out_required=False, out_help="optional directory for templates.csv/png")
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("--data", metavar="DIR", default=None)
    sp.add_argument("--variant", choices=trainkit.VARIANTS, default=None)
    sp.add_argument("--split", default="test", choices=data_mod.SPLITS)
    sp.add_argument("--subtype", default=None, choices=data_mod.SUBTYPES, help="restrict to one subtype")
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--template", default=None, help="prompt template id, e.g. T-8 (default: train.template_id)")
    group.add_argument("--all-templates", action="store_true", help="evaluate every prompt template T-1..T-8")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train vanilla, softmoe and la_softmoe over several seeds")
    common(sp, out_help="ablation directory")
    sp.add_argument("--data", metavar="DIR", default=None)
    sp.add_argument("--seeds", default=None, help="comma-separated seeds (default: ablation.seeds)")
    sp.add_argument("--jobs", type=int, default=None, help="parallel training processes (default: ablation.jobs)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(sp, out_required=False, out_help="optional directory for the resolved config")
    sp.add_argument("--scope", choices=checks.SCOPES + ("all",), default="ops")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    sp.add_argument("--corrupt-scale", type=float, default=1.01, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("dump-embeddings", help="write image embeddings of one split for external 2-D projection")
    common(sp, out_help="output file")
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("--data", metavar="DIR", default=None)
    sp.add_argument("--variant", choices=trainkit.VARIANTS, default=None)
    sp.add_argument("--split", default="test", choices=data_mod.SPLITS)
    sp.set_defaults(func=cmd_dump_embeddings)

    for action in sub.choices.values():
        fmt(action)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO)
    handler.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.FormatError, T.CheckpointError, FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"error: training diverged ({exc.variant or 'model'}) at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        for h in log.handlers[:]:
            h.close()
        log.handlers[:] = []


if __name__ == "__main__":
    sys.exit(main())
