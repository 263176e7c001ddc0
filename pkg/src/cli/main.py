"""
``fanet`` command line: train, eval, explain, project, gradcheck.

Exit codes: 0 ok, 1 config, 2 data, 3 numerical, 4 incompatible checkpoint,
5 gradient-check failure. Failures print one ``error kind=... code=...`` line
to stderr; results go to stdout.
"""
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import coloredlogs
import numpy as np
import pandas as pd
import typer
from PIL import Image
from rich.console import Console
from rich.table import Table

from src.autograd.tensor import Tensor
from src.cli.gradcheck_suite import assert_passed, run_suite
from src.config import load_run_config, log_level_from_env
from src.data.dataset import (
    DatasetIndex,
    batch_iter,
    export_split_manifest,
    index_dataset,
    load_and_preprocess,
    read_split_manifest,
    split_validation,
)
from src.error_handling import ConfigError, DataError, IncompatibleCheckpointError, with_error_handling
from src.evaluation.metrics import (
    classification_metrics,
    confusion_matrix,
    multiclass_roc_auc,
    pca_project,
    projection_frame,
)
from src.model.fanet import FaNet, extract_attention_diagnostics, extract_gap_features, predict
from src.train.checkpoint import CheckpointBundle, load_checkpoint
from src.train.trainer import fit

logger = logging.getLogger(__name__)

app = typer.Typer(help="FA-Net: CNN classification with fuzzy channel-selective spatial attention.", add_completion=False)
console = Console()

SPLIT_MANIFEST = "split_manifest.csv"
RUN_CONFIG_COPY = "run_config.json"
EVAL_BATCH_SIZE = 32


def setup_logging(level: Optional[str] = None) -> None:
    coloredlogs.install(
        level=(level or log_level_from_env()).upper(),
        stream=sys.stderr,
        fmt="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@app.callback()
def main(log_level: Optional[str] = typer.Option(None, "--log-level", help="Overrides FANET_LOG_LEVEL.")):
    setup_logging(log_level)


def _image_size(bundle: CheckpointBundle) -> Tuple[int, int]:
    backbone = bundle.model.config.backbone
    if backbone is None:
        raise ConfigError("checkpoint has no backbone: it expects precomputed feature maps, not images")
    return backbone.input_height, backbone.input_width


def _check_classes(bundle: CheckpointBundle, index: DatasetIndex) -> None:
    expected = bundle.model.config.num_classes
    if index.num_classes != expected:
        raise IncompatibleCheckpointError(
            f"checkpoint was trained on {expected} classes, dataset has {index.num_classes}"
        )
    if bundle.class_names and bundle.class_names != index.class_names:
        raise IncompatibleCheckpointError(
            f"class names differ: checkpoint {bundle.class_names}, dataset {index.class_names}"
        )


def _predict_index(model: FaNet, index: DatasetIndex, size: Tuple[int, int]):
    labels, probabilities = [], []
    for batch in batch_iter(index, EVAL_BATCH_SIZE, None, size):
        prediction = predict(model, batch.images)
        labels.append(batch.labels)
        probabilities.append(prediction.probabilities)
    return np.concatenate(labels), np.concatenate(probabilities)


@with_error_handling
def run_train(config: Path, resume: Optional[Path] = None) -> int:
    cfg = load_run_config(config)
    index = index_dataset(cfg.data_root)
    train_index, val_index = split_validation(index, cfg.validation_fraction, cfg.seed)
    model_config = cfg.model_config_for(index.num_classes)

    optimizer_state, start_epoch, best_val_loss, stale_epochs = None, 0, float("inf"), 0
    if resume is not None:
        bundle = load_checkpoint(resume)
        if bundle.model.config != model_config:
            raise IncompatibleCheckpointError(f"{resume}: architecture differs from {config}")
        _check_classes(bundle, index)
        if bundle.optimizer is None:
            raise IncompatibleCheckpointError(f"{resume}: no optimizer state; resume from last.fant")
        model = bundle.model
        optimizer_state = bundle.optimizer
        optimizer_state.lr = cfg.learning_rate
        start_epoch, best_val_loss, stale_epochs = bundle.epoch + 1, bundle.best_val_loss, bundle.stale_epochs
        logger.info(f"Resuming from {resume} at epoch {start_epoch} (step {optimizer_state.t})")
    else:
        model = FaNet.build(model_config, seed=cfg.seed)

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    export_split_manifest([train_index, val_index], cfg.output_dir / SPLIT_MANIFEST, root=cfg.data_root)
    (cfg.output_dir / RUN_CONFIG_COPY).write_text(cfg.model_dump_json(indent=2), encoding="utf-8")

    log = fit(
        model,
        train_index,
        val_index,
        cfg.train_config(),
        cfg.image_size,
        augment_cfg=cfg.augment_config(),
        output_dir=cfg.output_dir,
        optimizer_state=optimizer_state,
        start_epoch=start_epoch,
        best_val_loss=best_val_loss,
        stale_epochs=stale_epochs,
    )
    typer.echo(f"trained {len(log.records)} epoch(s); best epoch {log.best_epoch}; outputs in {cfg.output_dir}")
    return 0


@with_error_handling
def run_eval(checkpoint: Path, data: Path, split: Optional[Path], subset: str, out: Optional[Path], average: str) -> int:
    if average not in ("macro", "micro"):
        raise ConfigError(f"--average must be macro or micro, got {average}")
    bundle = load_checkpoint(checkpoint)
    size = _image_size(bundle)
    index = index_dataset(data, split="eval")
    _check_classes(bundle, index)
    if split is not None:
        index = read_split_manifest(split, index.class_names, subset, root=data)

    labels, probabilities = _predict_index(bundle.model, index, size)
    cm = confusion_matrix(labels, probabilities.argmax(axis=1), index.num_classes)
    report = classification_metrics(cm, average=average, class_names=index.class_names)
    try:
        report.auc = multiclass_roc_auc(probabilities, labels)
    except DataError as e:
        logger.warning(f"AUC not reported: {str(e)}")

    table = Table(title=f"Evaluation of {checkpoint.name} on {len(index)} samples")
    table.add_column("metric")
    table.add_column("value", justify="right")
    for name, value in report.summary().items():
        table.add_row(name, repr(value))
    console.print(table)

    report.to_csv(out if out is not None else checkpoint.parent / "eval")
    return 0


def _write_pgm(path: Path, heatmap: np.ndarray) -> None:
    Image.fromarray(np.round(heatmap * 255.0).astype(np.uint8), mode="L").save(path, format="PPM")


@with_error_handling
def run_explain(checkpoint: Path, image: Path, out: Path) -> int:
    bundle = load_checkpoint(checkpoint)
    pixels = load_and_preprocess(image, _image_size(bundle))
    diagnostics = extract_attention_diagnostics(bundle.model, pixels)
    prediction = predict(bundle.model, Tensor(pixels.data[None]))

    out.mkdir(parents=True, exist_ok=True)
    if diagnostics.cam_weights is not None:
        weights = diagnostics.cam_weights
        pd.DataFrame({"channel": np.arange(len(weights)), "weight": weights}).to_csv(out / "cam_weights.csv", index=False)
    if diagnostics.sam_avg_map is not None:
        _write_pgm(out / "sam_avg.pgm", diagnostics.sam_avg_map)
        _write_pgm(out / "sam_max.pgm", diagnostics.sam_max_map)
    if diagnostics.gate_values is not None:
        gates = diagnostics.gate_values
        channels = np.arange(len(gates))
        selected = np.isin(channels, diagnostics.selected_indices).astype(int)
        pd.DataFrame({"channel": channels, "gate": gates, "selected": selected}).to_csv(out / "gates.csv", index=False)
        (out / "selected_indices.txt").write_text(
            "".join(f"{i}\n" for i in diagnostics.selected_indices), encoding="utf-8"
        )

    label = int(prediction.labels[0])
    name = bundle.class_names[label] if bundle.class_names else str(label)
    payload = {"label": label, "class": name, "probabilities": prediction.probabilities[0].tolist()}
    (out / "prediction.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    typer.echo(f"predicted {name} (p={prediction.probabilities[0, label]:.6f}); maps in {out}")
    return 0


@with_error_handling
def run_project(checkpoint: Path, data: Path, out: Path) -> int:
    bundle = load_checkpoint(checkpoint)
    size = _image_size(bundle)
    index = index_dataset(data, split="eval")
    _check_classes(bundle, index)
    if len(index) < 4:
        raise DataError(f"PCA projection to 3 dimensions needs at least 4 samples, {data} has {len(index)}")

    features: List[np.ndarray] = []
    for batch in batch_iter(index, EVAL_BATCH_SIZE, None, size):
        features.append(extract_gap_features(bundle.model, batch.images).data)
    result = pca_project(np.concatenate(features), dims=3)

    frame = projection_frame(result.projection, [index.class_names[s.label] for s in index.samples])
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    ratios = ", ".join(f"{r:.4f}" for r in result.explained_variance_ratio)
    typer.echo(f"projected {len(frame)} samples; explained variance ratios {ratios}; wrote {out}")
    return 0


@with_error_handling
def run_gradcheck(seed: int, corrupt: Optional[str]) -> int:
    results = run_suite(seed=seed, corrupt=corrupt)
    for result in results:
        typer.echo(f"{result.op:<22} {result.error:.6e} floor={result.floor:.0e} {'ok' if result.passed else 'FAIL'}")
    assert_passed(results)
    return 0


@app.command()
def train(
    config: Path = typer.Option(..., "--config", help="Run config (key = value)."),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint with optimizer state, e.g. last.fant."),
):
    """Train FA-Net on a class-per-directory dataset."""
    raise typer.Exit(code=run_train(config, resume))


@app.command("eval")
def evaluate(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    data: Path = typer.Option(..., "--data", help="Dataset root (class-per-directory)."),
    split: Optional[Path] = typer.Option(None, "--split", help="Split manifest CSV written by train."),
    subset: str = typer.Option("val", "--subset", help="Manifest split to evaluate."),
    out: Optional[Path] = typer.Option(None, "--out", help="Directory for metrics CSVs."),
    average: str = typer.Option("macro", "--average", help="macro or micro."),
):
    """Confusion matrix, precision/recall/F1, accuracy and AUC."""
    raise typer.Exit(code=run_eval(checkpoint, data, split, subset, out, average))


@app.command()
def explain(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    image: Path = typer.Option(..., "--image"),
    out: Path = typer.Option(..., "--out"),
):
    """Export attention maps, gate values and the prediction for one image."""
    raise typer.Exit(code=run_explain(checkpoint, image, out))


@app.command()
def project(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    data: Path = typer.Option(..., "--data"),
    out: Path = typer.Option(..., "--out", help="CSV with columns x,y,z,label."),
):
    """3-D PCA projection of pooled features."""
    raise typer.Exit(code=run_project(checkpoint, data, out))


@app.command()
def gradcheck(
    seed: int = typer.Option(0, "--seed"),
    corrupt: Optional[str] = typer.Option(None, "--corrupt", hidden=True),
):
    """Finite-difference check of every op and of the full model."""
    raise typer.Exit(code=run_gradcheck(seed, corrupt))


if __name__ == "__main__":
    app()
