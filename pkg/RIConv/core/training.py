"""
Training, evaluation and ablation loops driven by a ``RunConfig``.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .autodiff import NonFiniteError, Tape, backward, check_finite, clip_gradients, sgd_step
from .config.run_config import RunConfig
from .data import (
    PARTS_PER_CLASS,
    AugmentationSpec,
    Dataset,
    Sample,
    augment,
    load_manifest,
    preprocess_dataset,
    synth_shapes,
)
from .network import (
    ArchitectureError,
    Model,
    Pyramid,
    build,
    build_pyramid,
    forward,
    load_checkpoint,
    save_checkpoint,
    total_loss,
)
from .utils.timing import TimingContext

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.10g"
ABLATION_VARIANTS = ("full", "no_merge", "one_local", "one_global")


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def load_datasets(config: RunConfig) -> Tuple[Dataset, Dataset]:
    """Preprocessed train and test sets for the configured source."""
    if config.dataset == "synthetic":
        train = synth_shapes(config.n_per_class, config.points_per_shape, config.seed,
                             split="train", parallelism=config.parallelism)
        test = synth_shapes(config.n_test_per_class, config.points_per_shape, config.seed + 1,
                            split="test", parallelism=config.parallelism)
    else:
        source = Path(config.dataset)
        train_manifest = source / "train_manifest.txt" if source.is_dir() else source
        test_manifest = train_manifest.parent / "test_manifest.txt"
        train = load_manifest(train_manifest, "train", parallelism=config.parallelism)
        test = load_manifest(test_manifest, "test", train.num_classes, config.parallelism)
    return (
        preprocess_dataset(train, config.grid_size, config.input_feature, config.parallelism),
        preprocess_dataset(test, config.grid_size, config.input_feature, config.parallelism),
    )


def output_classes(config: RunConfig, dataset: Dataset) -> int:
    return dataset.num_parts if config.task == "segment" else dataset.num_classes


def rotate_dataset(dataset: Dataset, mode: str, seed: int) -> Dataset:
    """Rotate every cloud by a rotation drawn for the given scenario mode."""
    if mode == "none":
        return dataset
    rng = np.random.default_rng(seed)
    spec = AugmentationSpec(rotation=mode)
    samples = [Sample(augment(s.cloud, spec, rng), s.label) for s in dataset.samples]
    return Dataset(samples, dataset.split, dataset.num_classes, dict(dataset.preprocessing))


def _batch_labels(task: str, samples: Sequence[Sample]) -> np.ndarray:
    if task == "classify":
        return np.array([s.label for s in samples], dtype=np.int64)
    if any(s.cloud.labels is None for s in samples):
        raise ValueError("Segmentation needs per-point part labels on every cloud")
    return np.concatenate([s.cloud.labels for s in samples])


@dataclass
class EvalResult:
    metric: str
    value: float
    per_class: pd.DataFrame
    predictions: List[np.ndarray] = field(default_factory=list)


def segmentation_ious(prediction: np.ndarray, truth: np.ndarray, category: int) -> float:
    """Mean part IoU of one shape; a part absent from both counts as 1."""
    ious = []
    for part in range(PARTS_PER_CLASS * category, PARTS_PER_CLASS * (category + 1)):
        union = np.sum((prediction == part) | (truth == part))
        inter = np.sum((prediction == part) & (truth == part))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def evaluate(model: Model, dataset: Dataset, batch: int = 8) -> EvalResult:
    """Overall accuracy (classification) or class mIoU (segmentation)."""
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate on an empty dataset")
    task = model.spec.task
    expected = dataset.num_parts if task == "segment" else dataset.num_classes
    if model.spec.num_classes != expected:
        raise ArchitectureError(
            f"Model predicts {model.spec.num_classes} classes, dataset has {expected}"
        )

    predictions = []
    for start in range(0, len(dataset), batch):
        samples = dataset.samples[start:start + batch]
        out = forward(model, [s.cloud for s in samples], "eval")
        logits = out.logits.data
        if task == "classify":
            predictions.extend(np.argmax(logits, axis=1))
            continue
        for index, sample in enumerate(samples):
            rows = logits[out.cloud_ids == index]
            first = PARTS_PER_CLASS * sample.label
            local = np.argmax(rows[:, first:first + PARTS_PER_CLASS], axis=1)
            predictions.append(first + local)

    labels = dataset.labels
    classes = range(dataset.num_classes)
    if task == "classify":
        predicted = np.array(predictions)
        correct = predicted == labels
        per_class = pd.DataFrame({
            "class": list(classes),
            "count": [int(np.sum(labels == c)) for c in classes],
            "accuracy": [
                float(np.mean(correct[labels == c])) if np.any(labels == c) else np.nan
                for c in classes
            ],
        })
        return EvalResult("accuracy", float(np.mean(correct)), per_class, [predicted])

    shape_ious = np.array([
        segmentation_ious(p, s.cloud.labels, s.label)
        for p, s in zip(predictions, dataset.samples)
    ])
    class_means = [
        float(np.mean(shape_ious[labels == c])) if np.any(labels == c) else np.nan
        for c in classes
    ]
    per_class = pd.DataFrame({
        "class": list(classes),
        "count": [int(np.sum(labels == c)) for c in classes],
        "mIoU": class_means,
    })
    return EvalResult("mIoU", float(np.nanmean(class_means)), per_class, predictions)


def mean_ortho_error(model: Model, dataset: Dataset, batch: int = 8) -> float:
    """Mean ``||I - U Uᵀ||_F`` of the LRF updates over a dataset (eval mode)."""
    errors = []
    for start in range(0, len(dataset), batch):
        samples = dataset.samples[start:start + batch]
        errors.append(forward(model, [s.cloud for s in samples], "eval").ortho_error)
    return float(np.mean(errors))


class Trainer:
    """Momentum SGD over packed batches with per-epoch metrics and checkpoints."""

    def __init__(self, config: RunConfig, model: Model, train: Dataset, test: Dataset,
                 output_dir: Optional[Path] = None):
        self.config = config
        self.model = model
        self.train = train
        self.test = test
        self.output_dir = Path(output_dir or config.output_dir)
        self.rng = np.random.default_rng(config.seed)
        self.lr = config.lr
        self.augmentation = AugmentationSpec(
            config.train_rotation, config.jitter, (config.scale_min, config.scale_max)
        )
        self._static = (
            self.augmentation.rotation == "none"
            and self.augmentation.jitter == 0
            and config.scale_min == config.scale_max == 1.0
        )
        self._pyramids: Dict[int, Pyramid] = {}
        self.history: List[Dict[str, float]] = []

    @property
    def metrics_path(self) -> Path:
        return self.output_dir / "metrics.csv"

    def _pyramid(self, index: int) -> Pyramid:
        sample = self.train.samples[index]
        if not self._static:
            return build_pyramid(augment(sample.cloud, self.augmentation, self.rng),
                                 self.model.spec)
        if index not in self._pyramids:
            self._pyramids[index] = build_pyramid(sample.cloud, self.model.spec)
        return self._pyramids[index]

    def train_step(self, indices: Sequence[int]) -> Tuple[float, float]:
        """One SGD step; returns (total loss, ortho-loss)."""
        samples = [self.train.samples[i] for i in indices]
        pyramids = [self._pyramid(i) for i in indices]
        labels = _batch_labels(self.config.task, samples)
        params = self.model.parameters()
        with Tape() as tape:
            out = forward(self.model, pyramids, "train")
            loss = total_loss(out.logits, labels, out.ortho_loss)
        check_finite(loss, "training loss")
        grads = backward(tape, loss, params)
        for name, grad in grads.items():
            check_finite(grad, f"gradient of {name}")
        clip_gradients(grads, self.config.grad_clip)
        sgd_step(params, grads, self.lr, self.config.momentum)
        self.model.zero_grad()
        return loss.item(), out.ortho_loss.item()

    def run_epoch(self, epoch: int) -> Dict[str, float]:
        order = self.rng.permutation(len(self.train))
        losses, orthos = [], []
        batches = range(0, len(order), self.config.batch)
        for start in tqdm(batches, desc=f"Epoch {epoch}", leave=False,
                          disable=not logger.isEnabledFor(logging.INFO)):
            loss, ortho = self.train_step(order[start:start + self.config.batch])
            losses.append(loss)
            orthos.append(ortho)
        result = evaluate(self.model, self.test, self.config.batch)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "ortho_loss": float(np.mean(orthos)),
            "ortho_error": mean_ortho_error(self.model, self.test, self.config.batch),
            f"test_{result.metric}": result.value,
            "lr": self.lr,
        }
        self.lr *= self.config.lr_decay
        return row

    def fit(self) -> pd.DataFrame:
        """Train for the configured epochs; best and last checkpoints are kept.

        A non-finite loss or gradient aborts the run; the checkpoints written
        before it stay untouched.
        """
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config.save(self.output_dir / "config.txt")
        best = -np.inf
        for epoch in range(1, self.config.epochs + 1):
            with TimingContext(f"epoch {epoch}", logger):
                try:
                    row = self.run_epoch(epoch)
                except NonFiniteError:
                    logger.error(
                        f"Non-finite values in epoch {epoch}; keeping checkpoints "
                        f"from epoch {epoch - 1}"
                    )
                    raise
            self.history.append(row)
            metric = [v for k, v in row.items() if k.startswith("test_")][0]
            save_checkpoint(self.model, self.output_dir / "last.ckpt")
            if metric > best:
                best = metric
                save_checkpoint(self.model, self.output_dir / "best.ckpt")
            _write_csv(pd.DataFrame(self.history), self.metrics_path)
            logger.info(
                f"Epoch {epoch}: loss {row['train_loss']:.4f}, ortho {row['ortho_loss']:.4f}, "
                f"test {metric:.4f}"
            )
        return pd.DataFrame(self.history)


def train_model(config: RunConfig, datasets: Optional[Tuple[Dataset, Dataset]] = None,
                output_dir: Optional[Path] = None) -> Tuple[Model, pd.DataFrame]:
    train, test = datasets or load_datasets(config)
    spec = config.architecture(output_classes(config, train))
    model = build(spec, config.seed, cache_dir=config.cache_dir)
    history = Trainer(config, model, train, test, output_dir).fit()
    return model, history


def evaluate_checkpoint(config: RunConfig, checkpoint: Path,
                        test: Optional[Dataset] = None,
                        output_dir: Optional[Path] = None) -> EvalResult:
    """Evaluate under the configured test rotation; writes the per-class CSV."""
    model = load_checkpoint(checkpoint, cache_dir=config.cache_dir)
    if test is None:
        _, test = load_datasets(config)
    rotated = rotate_dataset(test, config.test_rotation, config.seed + 2)
    result = evaluate(model, rotated, config.batch)
    scenario = f"{config.train_rotation}/{config.test_rotation}"
    output_dir = Path(output_dir or config.output_dir)
    per_class = result.per_class.copy()
    per_class.insert(0, "scenario", scenario)
    _write_csv(per_class, output_dir / "eval_per_class.csv")
    summary = pd.DataFrame({"scenario": [scenario], result.metric: [result.value]})
    _write_csv(summary, output_dir / "eval.csv")
    logger.info(f"Scenario {scenario}: {result.metric} {result.value:.4f}")
    return result


def run_ablation(config: RunConfig, datasets: Optional[Tuple[Dataset, Dataset]] = None,
                 variants: Sequence[str] = ABLATION_VARIANTS,
                 audit_clouds: int = 4) -> pd.DataFrame:
    """Train every variant on the same data and seed and audit its invariance."""
    from .verify import audit_network

    train, test = datasets or load_datasets(config)
    rotated_test = rotate_dataset(test, "so3", config.seed + 2)
    root = Path(config.output_dir) / "ablation"
    rows = []
    for variant in variants:
        with TimingContext(f"ablation variant {variant}", logger):
            variant_config = config.model_copy(update={"variant": variant})
            model, history = train_model(variant_config, (train, test), root / variant)
            final = history.iloc[-1]
            metric = [c for c in history.columns if c.startswith("test_")][0]
            audit = audit_network(model, [s.cloud for s in test.samples[:audit_clouds]],
                                  rotations=config.network_audit_rotations, seed=config.seed)
            rows.append({
                "variant": variant,
                "parameters": model.parameter_count(),
                "kernel_width": model.blocks[0].conv.kernel_input_width,
                "final_train_loss": final["train_loss"],
                metric: final[metric],
                f"{metric}_so3": evaluate(model, rotated_test, config.batch).value,
                "ortho_error": final["ortho_error"],
                "invariance_max_dev": audit.max_deviation,
                "invariance_pass": audit.passed,
            })
    table = pd.DataFrame(rows)
    _write_csv(table, root / "ablation.csv")
    return table


def run_omega_sweep(config: RunConfig,
                    datasets: Optional[Tuple[Dataset, Dataset]] = None) -> pd.DataFrame:
    """Train the full variant once per configured omega."""
    train, test = datasets or load_datasets(config)
    root = Path(config.output_dir) / "omega_sweep"
    rows = []
    for omega in config.omega_sweep:
        variant_config = config.model_copy(update={"variant": "full", "omega": float(omega)})
        _, history = train_model(variant_config, (train, test), root / f"omega_{omega:g}")
        final = history.iloc[-1]
        metric = [c for c in history.columns if c.startswith("test_")][0]
        rows.append({"omega": float(omega), metric: final[metric],
                     "ortho_error": final["ortho_error"]})
    table = pd.DataFrame(rows)
    _write_csv(table, root / "omega_sweep.csv")
    return table
