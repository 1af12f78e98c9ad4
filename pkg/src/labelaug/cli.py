"""Command line entry point.

    labelaug synth    --output DIR                      synthetic raw set + truth.json
    labelaug curate   --input raw.jsonl --output curated.jsonl
    labelaug train    --input curated.jsonl --output head.vhp [--trace trace.csv]
    labelaug augment  --input curated.jsonl --head head.vhp --output augmented.jsonl
    labelaug eval     --input manifest.jsonl --truth truth.json [--output metrics.json]
    labelaug run-all  --output DIR

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import augment as aug
from .config import RunConfig, load_config, save_config
from .data_model import DatasetManifest, Stage, atomic_write, read_manifest, require_stage, write_manifest
from .errors import ConfigError, LabelaugError
from .noise_reduction import curate_dataset, format_report
from .synthetic import GroundTruth, Metrics, generate_curation_set, generate_multilabel_maps, score_run
from .uncertainty_head import load_head, save_head, train, write_trace_csv

log = logging.getLogger("labelaug")


def _common(p: argparse.ArgumentParser, needs_input: bool = True) -> None:
    p.add_argument("--config", help="JSON config file with pipeline/train/synth sections")
    if needs_input:
        p.add_argument("--input", required=True, help="input manifest")
    p.add_argument("--output", required=True, help="output path")
    p.add_argument("--seed", type=int, help="seed for every stage (overrides the config)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: all cores; 1 = fully serial)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set one config field, e.g. pipeline.prob_threshold=0.6 (repeatable)")
    p.add_argument("--json", action="store_true", help="machine-readable stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelaug", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    _common(p, needs_input=False)
    p.add_argument("--kind", choices=("curation", "multilabel"), default="curation",
                   help="raw noisy search results, or a curated set with planted collisions")

    p = sub.add_parser("curate", help="anchor-guided noise reduction of a raw manifest")
    _common(p)

    p = sub.add_parser("train", help="train the classifier/uncertainty head")
    _common(p)
    p.add_argument("--trace", help="CSV file for the per-epoch training loss")

    p = sub.add_parser("augment", help="add CAM-supported labels")
    _common(p)
    p.add_argument("--head", required=True, help="trained head (VHP1)")
    p.add_argument("--dump-cams", metavar="DIR", help="write label probability grids as PGM files")

    p = sub.add_parser("eval", help="score a manifest against ground truth")
    _common(p)
    p.add_argument("--truth", required=True, help="ground truth JSON from `synth`")

    p = sub.add_parser("run-all", help="synth -> curate -> train -> augment -> eval")
    _common(p, needs_input=False)
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = cfg.with_seed(args.seed)
    cfg = cfg.with_overrides(args.override)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def _with_config(manifest: DatasetManifest, cfg: RunConfig) -> DatasetManifest:
    prov = dict(manifest.provenance)
    prov["config"] = cfg.to_dict()
    return DatasetManifest(manifest.classes, manifest.samples, manifest.stage, prov, root=manifest.root)


def _emit(args: argparse.Namespace, human: str, machine: dict[str, Any]) -> None:
    if args.json:
        print(json.dumps(machine, sort_keys=True, separators=(",", ":")))
    else:
        print(human)


def _relocate(manifest: DatasetManifest, out_path: Path) -> DatasetManifest:
    """Rewrite relative feature paths so they resolve from the output manifest's directory."""
    if manifest.root is None:
        return manifest
    src, dst = manifest.root.resolve(), out_path.resolve().parent
    if src == dst:
        return manifest
    from dataclasses import replace

    samples = []
    for s in manifest.samples:
        p = Path(s.feature_path)
        if not p.is_absolute():
            p = Path(os.path.relpath(src / p, dst))
        samples.append(replace(s, feature_path=p.as_posix()))
    return DatasetManifest(manifest.classes, samples, manifest.stage, manifest.provenance, root=dst)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def do_synth(out_dir: Path, cfg: RunConfig, kind: str = "curation") -> tuple[Path, Path, DatasetManifest, GroundTruth]:
    gen = generate_curation_set if kind == "curation" else generate_multilabel_maps
    manifest, truth = gen(cfg.synth, out_dir)
    manifest = _with_config(manifest, cfg)
    name = "raw.jsonl" if kind == "curation" else "curated.jsonl"
    write_manifest(manifest, out_dir / name)
    truth.save(out_dir / "truth.json")
    return out_dir / name, out_dir / "truth.json", manifest, truth


def do_curate(manifest: DatasetManifest, out: Path, cfg: RunConfig, threads: int):
    require_stage(manifest, Stage.RAW)
    curated, reports = curate_dataset(manifest, cfg.pipeline, threads=threads)
    curated = _relocate(_with_config(curated, cfg), out)
    write_manifest(curated, out)
    return curated, reports


def do_train(manifest: DatasetManifest, out: Path, cfg: RunConfig, trace_path: Path | None):
    trace: list[float] = []
    params = train(manifest, cfg.train, trace)
    save_head(params, out)
    if trace_path is not None:
        write_trace_csv(trace, trace_path)
    return params, trace


def do_augment(manifest: DatasetManifest, params, out: Path, cfg: RunConfig, threads: int, dump=None):
    augmented = aug.augment_labels(manifest, params, cfg.pipeline, threads=threads, dump_dir=dump)
    augmented = _relocate(_with_config(augmented, cfg), out)
    write_manifest(augmented, out)
    return augmented


def do_eval(manifest: DatasetManifest, truth: GroundTruth, out: Path | None) -> Metrics:
    metrics = score_run(truth, manifest)
    if out is not None:
        with atomic_write(out, "w") as fh:
            fh.write(metrics.to_json() + "\n")
    return metrics


def _augment_report(manifest: DatasetManifest) -> tuple[str, dict]:
    summary = aug.addition_summary(manifest)
    lines = [f"labels before: {summary['labels_before']}  after: {summary['labels_after']}  "
             f"added: {summary['labels_added_pct']:.2f}%"]
    for name, n in summary["added_per_class"].items():
        lines.append(f"  {name:<20} +{n}")
    return "\n".join(lines), summary


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except LabelaugError as exc:
        print(f"labelaug: error: {exc}", file=sys.stderr)
        return exc.exit_code


def _dispatch(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    out = Path(args.output)
    cmd = args.command

    if cmd == "synth":
        manifest_path, truth_path, manifest, _ = do_synth(out, cfg, args.kind)
        _emit(args, f"wrote {len(manifest.samples)} samples to {manifest_path} (truth: {truth_path})",
              {"manifest": str(manifest_path), "truth": str(truth_path), "samples": len(manifest.samples)})
    elif cmd == "curate":
        manifest = read_manifest(args.input)
        curated, reports = do_curate(manifest, out, cfg, args.threads)
        _emit(args, format_report(reports),
              {"kept": len(curated.samples), "total": len(manifest.samples),
               "classes": [r.__dict__ for r in reports]})
    elif cmd == "train":
        manifest = read_manifest(args.input)
        params, trace = do_train(manifest, out, cfg, Path(args.trace) if args.trace else None)
        _emit(args, f"trained head K={params.num_classes} C={params.channels}; final mean loss {trace[-1]:.6f}",
              {"classes": params.num_classes, "channels": params.channels, "final_loss": trace[-1]})
    elif cmd == "augment":
        manifest = read_manifest(args.input)
        require_stage(manifest, Stage.CURATED)
        augmented = do_augment(manifest, load_head(args.head), out, cfg, args.threads, args.dump_cams)
        human, summary = _augment_report(augmented)
        _emit(args, human, summary)
    elif cmd == "eval":
        manifest = read_manifest(args.input)
        metrics = do_eval(manifest, GroundTruth.load(args.truth), out)
        _emit(args, metrics.table(), json.loads(metrics.to_json()))
    elif cmd == "run-all":
        run_all(out, cfg, args)
    return 0


def run_all(out: Path, cfg: RunConfig, args: argparse.Namespace) -> Metrics:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    _, _, raw, truth = do_synth(out, cfg, "curation")
    curated, reports = do_curate(raw, out / "curated.jsonl", cfg, args.threads)
    params, _ = do_train(curated, out / "head.vhp", cfg, out / "train_trace.csv")
    augmented = do_augment(curated, params, out / "augmented.jsonl", cfg, args.threads)
    metrics = do_eval(augmented, truth, out / "metrics.json")
    human, summary = _augment_report(augmented)
    _emit(args, "\n\n".join([format_report(reports), human, metrics.table()]),
          {"metrics": json.loads(metrics.to_json()), "augment": summary})
    return metrics


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
