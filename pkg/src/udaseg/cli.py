"""Command-line entry point: ``udaseg gen-toy | train | eval | ablate``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import datetime as dt
import json
import logging
import shutil
import subprocess
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from . import config as cfgmod
from .data import (DataError, ToyDomainSpec, domain_gap, generate_toy_domains, load_dataset,
                   read_meta, save_dataset, write_meta)
from .evaluation import EvalReport, render_report
from .losses import NumericError
from .taxonomy import (TaxonomyError, builtin_taxonomy_path, load_taxonomy, resolve_taxonomy)

log = logging.getLogger("udaseg")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


# ---------------------------------------------------------------------------
# gen-toy

def cmd_gen_toy(args) -> Path:
    base = ToyDomainSpec(seed=args.seed)
    spec = ToyDomainSpec(
        canvas=args.canvas, num_shapes=args.num_shapes, seed=args.seed,
        hue_deg=base.hue_deg if args.hue is None else args.hue,
        hue_spread_deg=base.hue_spread_deg if args.hue_spread is None else args.hue_spread,
        noise_sigma=base.noise_sigma if args.noise is None else args.noise,
        brightness=base.brightness if args.brightness is None else args.brightness,
    )
    if args.shift == "none":
        spec = spec.null_shift()
    out = Path(args.out)
    tax_src = builtin_taxonomy_path("toy")
    taxonomy = load_taxonomy(tax_src)
    splits = generate_toy_domains(spec, args.n_source, args.n_target, taxonomy,
                                  n_target_val=args.n_val)
    source, target = splits[:2]
    val = splits[2] if len(splits) > 2 else None
    if out.exists():
        for split in ("source", "target", "target_val"):
            shutil.rmtree(out / split, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(tax_src, out / "taxonomy.yaml")
    save_dataset(source, out, "source")
    # target labels are written for evaluation only; training never reads them
    save_dataset(target, out, "target")
    if val is not None:
        save_dataset(val, out, "target_val")
    gap = domain_gap(source, target)
    write_meta(out, "taxonomy.yaml",
               {"source": "source", "target": "target", "target_val": "target"},
               {"generator": spec.to_dict(), "train_splits": ["source", "target"],
                "domain_gap": round(gap, 6)})
    print(f"wrote toy benchmark to {out} (domain gap {gap:.4f})")
    return out


# ---------------------------------------------------------------------------
# shared helpers

def _revision() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config_with_overrides(ref, overrides: List[str]) -> cfgmod.TrainConfig:
    cfg = cfgmod.resolve_config(ref)
    return cfgmod.apply_overrides(cfg, overrides or [])


def load_taxonomy_for(root: Path, cfg: cfgmod.TrainConfig):
    meta = read_meta(root)
    ref = meta.get("taxonomy")
    if ref is not None:
        path = root / ref
        tax = load_taxonomy(path) if path.exists() else resolve_taxonomy(ref)
        configured = resolve_taxonomy(cfg.data.taxonomy)
        if configured.names != tax.names:
            raise DataError(f"dataset taxonomy {ref} does not match configured taxonomy "
                            f"{cfg.data.taxonomy!r}")
        return tax
    return resolve_taxonomy(cfg.data.taxonomy)


def load_run_data(cfg: cfgmod.TrainConfig):
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist (run `udaseg gen-toy` first?)")
    tax = load_taxonomy_for(root, cfg)
    source = load_dataset(root, cfg.data.source_split, tax, domain_tag="source", labeled=True)
    target = load_dataset(root, cfg.data.target_split, tax, domain_tag="target", validate=False)
    val = None
    if cfg.data.val_split and (root / cfg.data.val_split / "labels").is_dir():
        val = load_dataset(root, cfg.data.val_split, tax, domain_tag="target", labeled=True)
    return tax, source, target, val


def run_training(cfg: cfgmod.TrainConfig, run_dir: Path, resume: Optional[str] = None,
                 dump_every: int = 0) -> Path:
    from .trainer import train

    tax, source, target, val = load_run_data(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        manifest = {
            "format_version": 1,
            "config": cfgmod.to_dict(cfg),
            "config_hash": cfgmod.config_hash(cfg),
            "revision": _revision(),
            "seed": cfg.seed,
            "started": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
            "layout": {"manifest": "manifest.json", "metrics": "metrics.log",
                       "eval": "eval.log", "checkpoints": "ckpt/", "report": "report/"},
        }
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    (run_dir / "config.yaml").write_text(cfgmod.dump_config(cfg))
    result = train(cfg, source, target, run_dir, val=val, resume_from=resume,
                   dump_every=dump_every, progress=True)
    if result.final_report is not None:
        render_report({"student": result.final_report}, run_dir / "report")
    (run_dir / "finished.json").write_text(json.dumps({
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "iterations": result.state.iteration,
        "target_label_reads": result.target_label_reads,
        "teacher_grad_touches": result.state.teacher_grad_touches,
    }, indent=2) + "\n")
    return run_dir


def default_run_dir(cfg: cfgmod.TrainConfig, base="runs") -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path(base) / f"{stamp}-{cfgmod.config_hash(cfg)[:10]}"


# ---------------------------------------------------------------------------
# train / eval

def cmd_train(args) -> Path:
    cfg = load_config_with_overrides(args.config, args.set)
    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(cfg, args.runs_root)
    out = run_training(cfg, run_dir, args.resume, args.dump_every)
    print(f"run directory: {out}")
    rep = out / "report" / "report.txt"
    if rep.exists():
        print(rep.read_text(), end="")
    return out


def cmd_eval(args) -> EvalReport:
    from .model import load_checkpoint
    from .trainer import evaluate_model

    root = Path(args.data_root)
    meta = read_meta(root)
    if args.split in meta.get("train_splits", []):
        if not args.allow_train_split:
            raise DataError(f"split {args.split!r} was used for training; "
                            "pass --allow-train-split to evaluate on it anyway")
        warnings.warn(f"evaluating on training split {args.split!r}")
        print(f"warning: evaluating on training split {args.split!r}", file=sys.stderr)
    tax_ref = meta.get("taxonomy")
    if args.taxonomy:
        tax = resolve_taxonomy(args.taxonomy)
    elif tax_ref and (root / tax_ref).exists():
        tax = load_taxonomy(root / tax_ref)
    else:
        tax = resolve_taxonomy("toy")
    ds = load_dataset(root, args.split, tax, labeled=True)
    bundle, _ = load_checkpoint(args.checkpoint)
    model = bundle.teacher if args.model == "teacher" else bundle.student
    report = evaluate_model(model, ds, limit=args.limit)
    out = Path(args.out)
    render_report({args.model: report}, out)
    print((out / "report.txt").read_text(), end="")
    return report


# ---------------------------------------------------------------------------
# ablations

COMPONENT_GRID = {
    "PG ClassMix+Contrastive learning": ["mask.enabled=false"],
    "Masking+Contrastive learning": ["mix.prior_guided=false"],
    "Masking+PG ClassMix": ["contrastive.enabled=false"],
    "Masking+PG ClassMix+Contrastive learning": [],
}
COARSE_GRID = {
    "Flat, Nature": ["mix.active_groups=[flat, nature]"],
    "Objects, Human-Vehicle": ["mix.active_groups=[objects, human_vehicle]"],
    "Construction, Nature": ["mix.active_groups=[construction, nature]"],
}
STAGE_GRID = {
    "Source domain": ["contrastive.stages=[source]"],
    "Source domain+Masking": ["contrastive.stages=[source, masked]"],
    "Source domain+Mixing": ["contrastive.stages=[source, mix]"],
    "Source domain+Mixing+Masking": ["contrastive.stages=[source, mix, masked]"],
}
COMPONENTS = {
    "full": [],
    "no-mask": ["mask.enabled=false"],
    "no-prior": ["mix.prior_guided=false"],
    "no-contrastive": ["contrastive.enabled=false"],
    "mix-only": ["mask.enabled=false", "mix.prior_guided=false", "contrastive.enabled=false"],
    "source-only": ["adapt=false", "contrastive.enabled=false"],
    "baseline": ["mix.prior_guided=false", "contrastive.enabled=false"],
}
GRIDS = {"components": COMPONENT_GRID, "coarse": COARSE_GRID, "contrastive": STAGE_GRID}
REFERENCE_ROW = {"components": "Masking+PG ClassMix+Contrastive learning",
                 "coarse": "Construction, Nature",
                 "contrastive": "Source domain+Mixing+Masking"}


def ablation_grid(grid: Optional[str], components: Optional[List[str]]) -> Dict[str, List[str]]:
    if components:
        unknown = [c for c in components if c not in COMPONENTS]
        if unknown:
            raise cfgmod.ConfigError(f"unknown components {unknown}; choose from {sorted(COMPONENTS)}")
        return {c: COMPONENTS[c] for c in components}
    return dict(GRIDS[grid or "components"])


def _slug(name: str) -> str:
    keep = "".join(ch.lower() if ch.isalnum() else "-" for ch in name)
    return "-".join(p for p in keep.split("-") if p) or "row"


def cmd_ablate(args) -> Dict[str, EvalReport]:
    base = load_config_with_overrides(args.config, args.set)
    rows = ablation_grid(args.grid, args.components)
    if args.baseline:
        rows["baseline"] = COMPONENTS["baseline"]
    out = Path(args.out)
    reports: Dict[str, EvalReport] = {}
    for name, overrides in rows.items():
        cfg = cfgmod.apply_overrides(base, overrides)
        run_dir = out / _slug(name)
        if run_dir.exists():
            shutil.rmtree(run_dir)
        log.info("ablation row %r: %s", name, overrides or "(full)")
        run_training(cfg, run_dir)
        doc = json.loads((run_dir / "report" / "report.json").read_text())
        reports[name] = EvalReport.from_dict(doc["reports"]["student"])
    if args.components:
        reference = "full" if "full" in reports else None
    else:
        reference = REFERENCE_ROW[args.grid or "components"]
    render_report(reports, out / "report", baseline="baseline" if args.baseline else None,
                  reference=reference, delta_names={reference: "full"} if reference else None,
                  hide=["baseline"] if args.baseline else [])
    print((out / "report" / "report.txt").read_text(), end="")
    return reports


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udaseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="render the synthetic two-domain benchmark")
    g.add_argument("--out", default="data/toy", help="output root (default: data/toy)")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--n-source", type=int, default=200)
    g.add_argument("--n-target", type=int, default=200)
    g.add_argument("--n-val", type=int, default=50, help="held-out labelled target images")
    g.add_argument("--canvas", type=int, default=128)
    g.add_argument("--num-shapes", type=int, default=6)
    g.add_argument("--shift", choices=["default", "none"], default="default",
                   help="'none' renders both domains without appearance shift")
    g.add_argument("--hue", type=float, help="target hue rotation in degrees")
    g.add_argument("--hue-spread", type=float, help="per-image hue jitter in degrees")
    g.add_argument("--noise", type=float, help="target additive noise sigma")
    g.add_argument("--brightness", type=float, help="target brightness scale")
    g.set_defaults(func=cmd_gen_toy)

    def config_args(q):
        q.add_argument("--config", default="toy", help="config file or builtin name (default: toy)")
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. --set mask.ratio=0 (repeatable)")

    t = sub.add_parser("train", help="run self-training and write a run directory")
    config_args(t)
    t.add_argument("--run-dir", help="explicit run directory (default: runs/<time>-<hash>)")
    t.add_argument("--runs-root", default="runs")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--dump-every", type=int, default=0,
                   help="write a source|target|mixed|mask strip every N iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labelled split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-root", default="data/toy")
    e.add_argument("--split", default="target_val")
    e.add_argument("--taxonomy", help="taxonomy file or builtin name (default: from dataset.meta)")
    e.add_argument("--model", choices=["student", "teacher"], default="student")
    e.add_argument("--limit", type=int)
    e.add_argument("--allow-train-split", action="store_true",
                   help="permit evaluation on a split used for training (prints a warning)")
    e.add_argument("--out", required=True, help="directory for report.txt/json/png")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid and render a comparison table")
    config_args(a)
    a.add_argument("--grid", choices=sorted(GRIDS), default=None,
                   help="components (learning modules), coarse (group combinations) or "
                        "contrastive (loss stages)")
    a.add_argument("--components", nargs="+",
                   help=f"explicit component list instead of a grid: {sorted(COMPONENTS)}")
    a.add_argument("--baseline", action="store_true",
                   help="also run the masking+ClassMix baseline (no prior, no contrastive) and add "
                        "a delta_baseline column; the baseline itself gets no row")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        args.func(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TaxonomyError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
