"""``sift`` command-line entry point.

Stages::

    sift generate      --config desk --out data/raw
    sift preprocess    --manifest data/raw/manifest.csv --out data/pp --short-side 128
    sift split         --manifest data/pp/manifest.csv --out data/split
    sift pretrain      --manifest data/split/train.csv --config desk --out runs/pre
    sift finetune      --ckpt runs/pre --manifest data/split/train.csv --val data/split/val.csv --out runs/fin
    sift evaluate      --ckpt runs/fin --manifest data/split/test.csv --n-patches 8 --out runs/test
    sift report        --scores runs/test --val-scores runs/val --out runs/report
    sift sweep-patches --ckpt runs/fin --manifest data/split/test.csv --n 1,2,4,8 --out runs/sweep
    sift plot-roc      --in runs/report/roc_volume.csv --out runs/report/roc_volume.svg
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
from pathlib import Path

import click

from .config import ConfigError, RunConfig, num_workers, write_provenance

log = logging.getLogger("sift")


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _stage(fn):
    """Common options and error handling: any failure exits non-zero with a message."""

    @click.option("--config", "config_path", default=None, help="JSON config file or preset name (desk, full).")
    @click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override a config key.")
    @click.option("--seed", type=int, default=None, help="Global seed (overrides config 'seed').")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, seed, **kwargs):
        try:
            cfg = RunConfig.load(config_path, overrides)
            if seed is not None:
                cfg.tree["seed"] = seed
            return fn(cfg, **kwargs)
        except (ConfigError, ValueError, FileNotFoundError, FloatingPointError) as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
def main(verbose: int) -> None:
    """Contrastive pre-training, multi-patch fine-tuning and volume scoring."""
    level = logging.WARNING if verbose == 0 else (logging.INFO if verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


@main.command()
@click.option("--out", "--out-dir", "out", required=True, type=click.Path(path_type=Path))
@_stage
def generate(cfg: RunConfig, out: Path):
    """Render a synthetic dataset (config section [synth])."""
    from .synthetic import generate_dataset

    tree_synth = cfg.tree["synth"]
    tree_synth["seed"] = cfg.seed
    manifest = generate_dataset(cfg.synth(), out, workers=num_workers())
    write_provenance(out, "generate", cfg, cfg.seed, extra={"summary": manifest.summary()})
    click.echo(json.dumps(manifest.summary()))


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "--out-dir", "out", required=True, type=click.Path(path_type=Path))
@click.option("--short-side", type=int, default=None)
@click.option("--pad", type=int, default=None)
@_stage
def preprocess(cfg: RunConfig, manifest: Path, out: Path, short_side, pad):
    """Resize to a fixed short side and crop background per volume."""
    from .data import load_manifest
    from .preprocess import preprocess_manifest

    section = cfg.section("preprocess")
    if short_side is not None:
        section["short_side"] = short_side
    if pad is not None:
        section["pad"] = pad
    new = preprocess_manifest(load_manifest(manifest), out, int(section["short_side"]), int(section["pad"]))
    write_provenance(out, "preprocess", cfg, cfg.seed, inputs=[manifest])
    click.echo(json.dumps(new.summary()))


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "--out-dir", "out", required=True, type=click.Path(path_type=Path))
@click.option("--stratify/--no-stratify", default=None, help="Stratify patients by abnormal status.")
@_stage
def split(cfg: RunConfig, manifest: Path, out: Path, stratify):
    """Subject-wise train/val/test split."""
    from .data import SplitSpec, load_manifest, split_subjectwise, write_split

    section = cfg.section("split")
    if stratify is not None:
        section["stratify"] = stratify
    spec = SplitSpec(tuple(section["ratios"]), cfg.seed)
    parts = split_subjectwise(load_manifest(manifest), spec, stratify=bool(section["stratify"]))
    summary = write_split(parts, out)
    write_provenance(out, "split", cfg, cfg.seed, inputs=[manifest])
    click.echo(json.dumps(summary))


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--policy", type=click.Choice(["sift", "same_image_only", "same_patient_any", "inter_slice_only"]),
              default=None, help="Positive-pair policy (overrides policy.kind).")
@_stage
def pretrain(cfg: RunConfig, manifest: Path, out: Path, policy):
    """Momentum-contrast pre-training; writes a checkpoint directory."""
    from .contrastive import pretrain as run_pretrain
    from .data import load_manifest
    from .models import save_checkpoint

    if policy is not None:
        cfg.section("policy")["kind"] = policy
    spec = cfg.encoder()
    result = run_pretrain(load_manifest(manifest), cfg.policy(), cfg.pretrain(), spec, cfg.seed, cfg.augment())
    last = result.history[-1]
    save_checkpoint(out, result.model, spec, "pretrain", len(result.history), cfg.hash,
                    {"mean_loss": last["mean_loss"]})
    _write_rows(out / "history.csv", result.history)
    write_provenance(out, "pretrain", cfg, cfg.seed, inputs=[manifest])
    click.echo(json.dumps({"epochs": len(result.history), "final_loss": last["mean_loss"]}))


@main.command()
@click.option("--ckpt", type=click.Path(exists=True, path_type=Path), default=None,
              help="Pre-training checkpoint directory (omit with --init random).")
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--val", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--mode", type=click.Choice(["linear_probe", "full", "discriminative"]), default=None)
@click.option("--init", "init", type=click.Choice(["pretrained", "random"]), default=None)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@_stage
def finetune(cfg: RunConfig, ckpt, manifest: Path, val, mode, init, out: Path):
    """Multi-patch supervised fine-tuning; keeps the best validation-AUC epoch."""
    from .data import load_manifest
    from .finetune import finetune as run_finetune
    from .models import load_checkpoint, save_checkpoint

    section = cfg.section("finetune")
    if mode is not None:
        section["mode"] = mode
    if init is not None:
        section["init"] = init
    state, spec = None, cfg.encoder()
    if section["init"] == "pretrained":
        if ckpt is None:
            raise click.UsageError("--ckpt is required unless --init random")
        state, meta = load_checkpoint(ckpt)
        spec = meta["spec"]
    result = run_finetune(
        load_manifest(manifest), cfg.finetune(), spec, cfg.seed, state,
        load_manifest(val) if val is not None else None,
    )
    save_checkpoint(out, result.model, spec, "finetune", result.best_epoch, cfg.hash,
                    {"best_val_auc": None if math.isnan(result.best_val_auc) else result.best_val_auc})
    _write_rows(out / "history.csv", result.history)
    write_provenance(out, "finetune", cfg, cfg.seed, inputs=[p for p in (ckpt, manifest, val) if p])
    click.echo(json.dumps({"best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc}))


def _score_paths(out: Path) -> tuple[Path, Path]:
    if out.suffix == ".csv":
        return out, out.with_name("volumes.csv")
    out.mkdir(parents=True, exist_ok=True)
    return out / "scores.csv", out / "volumes.csv"


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--n-patches", type=int, default=None)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@_stage
def evaluate(cfg: RunConfig, ckpt: Path, manifest: Path, n_patches, out: Path):
    """Score every slice (mean of N patches) and every volume (max slice)."""
    from .data import load_manifest
    from .inference import evaluate as run_evaluate
    from .models import load_classifier

    n = int(n_patches if n_patches is not None else cfg.section("evaluate")["n_patches"])
    model, _ = load_classifier(ckpt)
    ft = cfg.finetune()
    table = run_evaluate(model, load_manifest(manifest), n, ft.patch_size, cfg.seed, ft.label_window)
    slices_path, volumes_path = _score_paths(out)
    table.write(slices_path, volumes_path)
    write_provenance(slices_path.parent, "evaluate", cfg, cfg.seed, inputs=[ckpt, manifest],
                     extra={"n_patches": n})
    click.echo(json.dumps({"slices": len(table), "volumes": len(table.volume_rollup)}))


def _load_scores(path: Path):
    from .inference import ScoreTable

    slices_path, volumes_path = (path, path.with_name("volumes.csv")) if path.suffix == ".csv" else (
        path / "scores.csv", path / "volumes.csv")
    return ScoreTable.read(slices_path, volumes_path)


def build_report(test, val=None) -> tuple[dict, dict]:
    """Slice- and volume-level reports; thresholds are fitted on ``val`` when given."""
    from .metrics import metric_report, roc_curve, select_threshold

    levels = {
        "slice": (lambda t: (t.scores, t.labels)),
        "volume": (lambda t: (t.volume_scores, t.volume_labels)),
    }
    report, rocs = {"threshold_source": "val" if val is not None else "self"}, {}
    for level, get in levels.items():
        scores, labels = get(test)
        threshold = select_threshold(*get(val)) if val is not None else None
        report[level] = metric_report(scores, labels, threshold).to_dict()
        rocs[level] = roc_curve(scores, labels)
    return report, rocs


@main.command()
@click.option("--scores", required=True, type=click.Path(exists=True, path_type=Path),
              help="Evaluation directory (or scores.csv) to report on.")
@click.option("--val-scores", type=click.Path(exists=True, path_type=Path), default=None,
              help="Validation scores used to fit the operating thresholds.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@_stage
def report(cfg: RunConfig, scores: Path, val_scores, out: Path):
    """Write report.json and ROC curves (roc_slice.csv, roc_volume.csv)."""
    from .metrics import write_roc_csv

    out.mkdir(parents=True, exist_ok=True)
    rep, rocs = build_report(_load_scores(scores), _load_scores(val_scores) if val_scores else None)
    (out / "report.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    for level, curve in rocs.items():
        write_roc_csv(curve, out / f"roc_{level}.csv")
    write_provenance(out, "report", cfg, cfg.seed, inputs=[p for p in (scores, val_scores) if p])
    click.echo(json.dumps({"slice_auc": rep["slice"]["auc"], "volume_auc": rep["volume"]["auc"]}))


@main.command("sweep-patches")
@click.option("--ckpt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--n", "n_list", default=None, help="Comma-separated patch counts, e.g. 1,2,4,8,16,20.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@_stage
def sweep_patches(cfg: RunConfig, ckpt: Path, manifest: Path, n_list, out: Path):
    """Slice/volume metrics as a function of the number of test patches."""
    from .data import VolumeStore, load_manifest
    from .inference import evaluate as run_evaluate
    from .metrics import auc, specificity_at_sensitivity
    from .models import load_classifier

    counts = [int(v) for v in n_list.split(",")] if n_list else [int(v) for v in cfg.section("evaluate")["sweep"]]
    model, _ = load_classifier(ckpt)
    m = load_manifest(manifest)
    store = VolumeStore(m)
    ft = cfg.finetune()
    rows = []
    for n in counts:
        t = run_evaluate(model, m, n, ft.patch_size, cfg.seed, ft.label_window, store)
        row = {"n_patches": n}
        for level, (s, y) in {"slice": (t.scores, t.labels), "volume": (t.volume_scores, t.volume_labels)}.items():
            row[f"{level}_auc"] = auc(s, y)
            row[f"{level}_sp87"] = specificity_at_sensitivity(s, y, 0.87)
            row[f"{level}_sp80"] = specificity_at_sensitivity(s, y, 0.80)
        rows.append(row)
        log.info("N=%d slice_auc=%.4f volume_auc=%.4f", n, row["slice_auc"], row["volume_auc"])
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "sweep.csv", rows)
    write_provenance(out, "sweep-patches", cfg, cfg.seed, inputs=[ckpt, manifest])
    for row in rows:
        click.echo(f"N={row['n_patches']:>3}  slice AUC {row['slice_auc']:.4f}  volume AUC {row['volume_auc']:.4f}")


@main.command("plot-roc")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
def plot_roc(in_path: Path, out: Path):
    """Render an ROC csv (fpr,tpr,threshold) to an image, annotated with its AUC."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import read_roc_csv, trapezoid_auc

    curve = read_roc_csv(in_path)
    area = trapezoid_auc(curve)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([p[0] for p in curve], [p[1] for p in curve], lw=1.5, label=f"AUC = {area:.4f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.legend(loc="lower right")
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, metadata={"Date": None} if out.suffix == ".svg" else None)
    plt.close(fig)
    click.echo(f"AUC = {area:.4f}")


if __name__ == "__main__":
    main()
