"""Command-line front end: ``weakstrong {synth,train,benchmark,verify,gradcheck}``.

Exit codes are a stable contract for scripting: 0 success, 2 configuration
error, 3 numeric failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, NumericError
from .evalmetrics import (
    FoldResult,
    RunReport,
    config_hash,
    confidence_by_concordance,
    fold_metrics,
    folds_csv,
    format_table,
    holdout_split,
    run_fold,
    score_slides,
)
from .model import ModelConfig, grad_check_report, predict, save_checkpoint
from .numerics import Rng
from .schemes import SchemeConfig, TrainData, train_run
from .shift import SHIFT_MODES, ShiftConfig, color_jitter, stain_transfer
from .synthdata import (
    Bag,
    Instance,
    StainParams,
    export_csv,
    generate_strong_dataset,
    generate_weak_dataset,
    load_dataset,
    render_candidate_patches,
    render_synthetic_patch,
    save_dataset,
    select_top_patches,
    strong_arrays,
    weak_arrays,
    write_ppm,
)
from .verify import ARCHITECTURES, GRAD_TOL, buggy_backward, run_verification

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

MANIFEST_FORMAT = "weakstrong-manifest"
MANIFEST_VERSION = 1
FOLD_FORMAT = "weakstrong-fold"

SHIFT_ROW_LABELS = {
    "none": "w/o color augm.",
    "color_jitter": "w/ color augm.",
    "stain_transfer": "stain transfer",
    "mmd": "MMD",
    "coral": "CORAL",
    "adversarial": "adversarial",
}
TABLES = ("shift", "integration")
TABLE_TITLES = {
    "shift": "Covariate shift benchmark (source-only training, 5-fold CV)",
    "integration": "Data integration benchmark (5-fold CV)",
}


class VerificationFailed(Exception):
    pass


# -- shared plumbing ----------------------------------------------------------------------


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    return {
        "weakstrong": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pyyaml": yaml.__version__,
    }


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dumps(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_manifest(
    out_dir: Path, cfg: ExperimentConfig, command: str, inputs: dict[str, Path], outputs: list[str], extra=None
) -> Path:
    """Record everything needed to rerun ``command`` and check its outputs."""
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seeds": {
            "experiment": cfg.seed,
            "dataset": cfg.gen.seed,
            "derivation": "fold split Rng(seed).spawn(100); fold training seed ^ fold; train holdout Rng(seed).spawn(200)",
        },
        "versions": versions(),
        "inputs": {name: file_sha256(p) for name, p in sorted(inputs.items())},
        "outputs": {name: file_sha256(out_dir / name) for name in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    _write(path, _dumps(manifest))
    return path


def load_data(cfg: ExperimentConfig, dataset: str | Path | None = None) -> tuple[list[Bag], list[Instance], dict]:
    """Bags and strong instances from the dataset file if given, else generated."""
    path = dataset or cfg.dataset
    if path is None:
        return generate_weak_dataset(cfg.gen), generate_strong_dataset(cfg.gen), {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file {path} does not exist (run `weakstrong synth` first)", "dataset")
    gen, bags, strong = load_dataset(path)
    if gen.input_dim != cfg.gen.input_dim:
        raise ConfigError(f"dataset has input_dim {gen.input_dim}, config says {cfg.gen.input_dim}", "gen.input_dim")
    return bags, strong, {"dataset": path}


# -- synth -----------------------------------------------------------------------------------


def cmd_synth(config_path: str | Path, out_path: str | Path | None = None, csv_path: str | Path | None = None) -> Path:
    cfg = load_config(config_path)
    out = Path(out_path) if out_path else cfg.resolved_output_dir() / "dataset.json"
    bags, strong = generate_weak_dataset(cfg.gen), generate_strong_dataset(cfg.gen)
    save_dataset(out, cfg.gen, bags, strong)
    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        export_csv(csv_path, bags, strong)
    return out


# a deliberately different stain basis so the transfer is visible
TARGET_STAIN = StainParams(hematoxylin=(0.45, 0.80, 0.40), eosin=(0.15, 0.90, 0.35), background_e=0.5)


def dump_images(cfg: ExperimentConfig, out_dir: str | Path, n_candidates: int = 64, top_n: int = 16) -> list[Path]:
    """Write image-mode samples as binary PPM files.

    Renders ``n_candidates`` patches of one synthetic slide, keeps the
    ``top_n`` with the highest blue-ratio score, and writes each kept patch
    as ``patchNN.ppm`` together with ``patchNN-jitter.ppm`` (colour jitter at
    ``shift.jitter_strength``) and ``patchNN-stain.ppm`` (stain colours
    transferred from ``target.ppm``, a patch rendered with another stain basis).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed).spawn(300)
    patches, _ = render_candidate_patches(rng.spawn(0), n_candidates)
    target = render_synthetic_patch(rng.spawn(1), 0.5, TARGET_STAIN)
    written = [out_dir / "target.ppm"]
    write_ppm(written[0], target)
    for rank, idx in enumerate(select_top_patches(patches, top_n)):
        img = patches[idx]
        variants = {
            "": img,
            "-jitter": color_jitter(img, rng.spawn(2 + rank), cfg.shift.jitter_strength),
            "-stain": stain_transfer(img, target).image,
        }
        for suffix, data in variants.items():
            path = out_dir / f"patch{rank:02d}{suffix}.ppm"
            write_ppm(path, data)
            written.append(path)
    return written


# -- train -----------------------------------------------------------------------------------


def _shift_for(scheme: SchemeConfig, shift: ShiftConfig) -> ShiftConfig:
    # shift strategies act on the strong source; weak-only schemes have none
    return shift if scheme.use_strong else ShiftConfig()


def cmd_train(config_path: str | Path, dataset: str | Path | None = None) -> Path:
    """Train one model on all bags minus a stratified holdout used for early stopping."""
    cfg = load_config(config_path)
    bags, strong, inputs = load_data(cfg, dataset)
    held_rng = Rng(cfg.seed).spawn(200)
    train_pos, held_pos = holdout_split(bags, np.arange(len(bags)), cfg.cv.holdout_fraction, held_rng)
    train_bags = [bags[i] for i in train_pos]
    held_bags = [bags[i] for i in held_pos]
    dim = cfg.gen.input_dim
    shift = _shift_for(cfg.scheme, cfg.shift)
    data = TrainData(
        weak=weak_arrays(train_bags, dim),
        strong=strong_arrays(strong, dim) if cfg.scheme.use_strong else None,
        holdout=weak_arrays(held_bags, dim) if held_bags else None,
    )
    params, history = train_run(data, cfg.scheme, cfg.train.stopping(), cfg.seed, cfg.model_config(shift), shift)

    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "checkpoint.json")
    _write(out / "history.csv", history.to_csv())
    summary = {
        "scheme": cfg.scheme.label,
        "best_epoch": history.best_epoch,
        "epochs_run": len(history.records),
        "n_train_bags": len(train_bags),
        "n_holdout_bags": len(held_bags),
        "holdout": None,
        "confidence": None,
    }
    if held_bags and len({b.weak_label for b in held_bags}) == 2:
        auc, acc, tau = fold_metrics(score_slides(held_bags, lambda b: predict(params, b.features())), cfg.cv.threshold)
        summary["holdout"] = {"auc": auc, "accuracy": acc, "kendall_tau": tau}
    try:
        summary["confidence"] = asdict(confidence_by_concordance(params, train_bags))
    except ValueError:
        pass  # every training instance agrees with its bag label
    _write(out / "summary.json", _dumps(summary))
    if config_path is not None:
        inputs = {**inputs, "config": Path(config_path)}
    write_manifest(out, cfg, "train", inputs, ["checkpoint.json", "history.csv", "summary.json"])
    return out


# -- benchmark ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkRow:
    label: str
    scheme: SchemeConfig
    shift: ShiftConfig
    model: ModelConfig


def table_rows(cfg: ExperimentConfig, table: str) -> list[BenchmarkRow]:
    """The six rows of the chosen table, in the published order."""
    if table == "shift":
        scheme = replace(cfg.scheme, use_strong=True, weak_mode="none")
        rows = []
        for mode in SHIFT_MODES:
            shift = replace(cfg.shift, mode=mode)
            rows.append(BenchmarkRow(SHIFT_ROW_LABELS[mode], scheme, shift, cfg.model_config(shift)))
        return rows
    if table == "integration":
        rows = []
        for use_strong in (False, True):
            for mode in ("plain", "mil_ws", "sw_ws"):
                scheme = replace(cfg.scheme, use_strong=use_strong, weak_mode=mode)
                shift = _shift_for(scheme, cfg.shift)
                rows.append(BenchmarkRow(scheme.label, scheme, shift, cfg.model_config(shift)))
        return rows
    raise ConfigError(f"unknown table {table!r}; expected one of {TABLES}", "table")


def _row_hash(cfg: ExperimentConfig, row: BenchmarkRow, data_digest: str) -> str:
    return config_hash(
        {
            "scheme": asdict(row.scheme),
            "shift": asdict(row.shift),
            "model": row.model.to_dict(),
            "stop": asdict(cfg.train.stopping()),
            "cv": {k: v for k, v in asdict(cfg.cv).items() if k != "workers"},
            "seed": cfg.seed,
            "data": data_digest,
        }
    )


def _data_digest(bags: list[Bag], strong: list[Instance]) -> str:
    h = hashlib.sha256()
    for arr in (weak_arrays(bags).x, strong_arrays(strong).x if strong else np.empty(0)):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.array([b.weak_label for b in bags]).tobytes())
    return h.hexdigest()[:16]


def _fold_task(args) -> tuple[int, FoldResult]:
    row_index, bags, strong, fold, row, seed, stop, cv = args
    return row_index, run_fold(bags, strong, fold, row.scheme, row.shift, seed, row.model, stop, cv)


def cmd_benchmark(config_path: str | Path, table: str, workers: int | None = None, log=None) -> Path:
    """Run the 6-row x k-fold sweep for one table; completed folds are reused on rerun."""
    cfg = load_config(config_path)
    rows = table_rows(cfg, table)
    bags, strong, inputs = load_data(cfg)
    out = cfg.resolved_output_dir() / table
    fold_dir = out / "folds"
    fold_dir.mkdir(parents=True, exist_ok=True)
    digest = _data_digest(bags, strong)
    hashes = [_row_hash(cfg, row, digest) for row in rows]
    stop = cfg.train.stopping()

    results: dict[tuple[int, int], FoldResult] = {}
    pending = []
    for i, row in enumerate(rows):
        for fold in range(cfg.cv.folds):
            path = fold_dir / f"row{i}-fold{fold}.json"
            if path.exists():
                try:
                    saved = json.loads(path.read_text())
                except json.JSONDecodeError:
                    saved = None  # interrupted mid-write; recompute
                if saved and saved.get("row_hash") == hashes[i]:
                    results[(i, fold)] = FoldResult(**saved["result"])
                    continue
            pending.append((i, bags, strong, fold, row, cfg.seed, stop, cfg.cv))

    def record(i: int, res: FoldResult) -> None:
        # single writer: only this process touches the output directory
        results[(i, res.fold)] = res
        payload = {
            "format": FOLD_FORMAT,
            "version": 1,
            "row": rows[i].label,
            "row_hash": hashes[i],
            "result": asdict(res),
        }
        _write(fold_dir / f"row{i}-fold{res.fold}.json", _dumps(payload))
        if log:
            log(f"{rows[i].label:<22s} fold {res.fold}  auc {res.auc:.3f}")

    n_workers = workers or cfg.cv.workers
    if n_workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(_fold_task, task) for task in pending]
            for fut in as_completed(futures):
                record(*fut.result())
    else:
        for task in pending:
            record(*_fold_task(task))

    reports = [
        RunReport(row.label, [results[(i, f)] for f in range(cfg.cv.folds)], hashes[i], cfg.seed)
        for i, row in enumerate(rows)
    ]
    _write(out / "table.txt", format_table(reports, TABLE_TITLES[table]))
    _write(out / "folds.csv", folds_csv(reports))
    report = {"table": table, "config_hash": cfg.hash(), "data_digest": digest, "rows": [r.to_dict() for r in reports]}
    _write(out / "report.json", _dumps(report))
    fold_files = [f"folds/row{i}-fold{f}.json" for i in range(len(rows)) for f in range(cfg.cv.folds)]
    if config_path is not None:
        inputs = {**inputs, "config": Path(config_path)}
    write_manifest(
        out,
        cfg,
        f"benchmark --table {table}",
        inputs,
        ["table.txt", "folds.csv", "report.json", *fold_files],
        {"table": table, "rows": [r.label for r in rows], "row_hashes": hashes},
    )
    return out


# -- verify / gradcheck --------------------------------------------------------------------------


def cmd_verify(inject_grad_bug: str | None = None, out=print) -> bool:
    results = run_verification(inject_grad_bug)
    for r in results:
        out(r.line())
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    out(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    return not failed


def cmd_gradcheck(seed: int = 0, inject_grad_bug: str | None = None, out=print) -> bool:
    backward_fn = buggy_backward(inject_grad_bug) if inject_grad_bug else None
    ok = True
    for cfg in ARCHITECTURES:
        kwargs = {"backward_fn": backward_fn} if backward_fn else {}
        report = grad_check_report(cfg, seed, **kwargs)
        passed = report.max_relative_error < GRAD_TOL
        ok &= passed
        status = "PASS" if passed else "FAIL"
        out(
            f"{status}  hidden={str(cfg.hidden_dims):<12s} classes={cfg.num_classes} domain_head={cfg.domain_head!s:<5s} "
            f"max rel err {report.max_relative_error:.2e} (worst: {report.worst_tensor}, kinks skipped: {report.skipped_kinks})"
        )
    return ok


# -- entry point ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakstrong", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset file")
    p.add_argument("config")
    p.add_argument("-o", "--out", help="dataset path (default: <output_dir>/dataset.json)")
    p.add_argument("--csv", metavar="PATH", help="also write a flat per-instance CSV")
    p.add_argument("--images", metavar="DIR", help="also dump top-ranked image patches with jitter and stain transfer as PPM")

    p = sub.add_parser("train", help="train one model; writes checkpoint, history and summary")
    p.add_argument("config")
    p.add_argument("--dataset", help="dataset file from `synth` (overrides the config's `dataset`)")

    p = sub.add_parser("benchmark", help="run a 6-row cross-validated benchmark table")
    p.add_argument("config")
    p.add_argument("--table", choices=TABLES, required=True)
    p.add_argument("--workers", type=int, help="parallel (row, fold) workers (overrides cv.workers)")
    p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("verify", help="run the oracle and invariant suite")
    p.add_argument("--inject-grad-bug", metavar="PARAM", help="testing hook: mis-scale one parameter's gradient")

    p = sub.add_parser("gradcheck", help="finite-difference check across the architecture matrix")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-grad-bug", metavar="PARAM", help="testing hook: mis-scale one parameter's gradient")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            print(cmd_synth(args.config, args.out, args.csv))
            if args.images:
                files = dump_images(load_config(args.config), args.images)
                print(f"wrote {len(files)} images to {args.images}")
        elif args.command == "train":
            print(cmd_train(args.config, args.dataset))
        elif args.command == "benchmark":
            t0 = time.perf_counter()
            log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
            out = cmd_benchmark(args.config, args.table, args.workers, log)
            print((out / "table.txt").read_text(), end="")
            print(f"wrote {out} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        elif args.command == "verify":
            if not cmd_verify(args.inject_grad_bug):
                raise VerificationFailed
        elif args.command == "gradcheck":
            if not cmd_gradcheck(args.seed, args.inject_grad_bug):
                raise VerificationFailed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailed:
        print("verification failed", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
