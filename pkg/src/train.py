"""
Training harness: source-only and DANN objectives over any normalizer,
optimized with momentum SGD plus projection onto parameter bounds.
"""

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from src.config import OUTPUT_DIR, ExperimentConfig, dump_config
from src.data import (
    DomainDataset,
    batch_iter,
    load_csv,
    make_channel_permuted,
    make_shifted_gaussians,
    make_two_moons_shift,
)
from src.models import DomainAdversarialNet, Mlp, MlpSpec, ModelCheckpoint, dann_lambda
from src.norms import ReciprocalNorm
from src.numerics import InvalidInputError, Parameter, Tensor, backward, cross_entropy

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "split", "class_loss", "domain_loss", "accuracy"]


class TrainingDiverged(RuntimeError):
    """Loss or gradient went non-finite; the last good checkpoint stays on disk."""


class MetricsRow(BaseModel):
    epoch: int = Field(ge=0)
    split: str = Field(description="train_s, eval_s or eval_t")
    class_loss: float
    domain_loss: Optional[float] = None
    accuracy: float = Field(ge=0, le=1)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


def sgd_step(
    params: Iterable[Parameter],
    grads: Dict[Tensor, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[Dict[int, np.ndarray]] = None,
    decay_all: bool = False,
    lr_scale_free: float = 1.0,
) -> None:
    """
    One projected momentum-SGD update, in place.

    v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v;  p <- clamp(p, bounds)

    Weight decay applies to parameters flagged `decay` (or to all with
    decay_all). Parameters without the flag are normalizer parameters and use
    lr * lr_scale_free. Parameters absent from `grads` are skipped.
    """
    if lr <= 0:
        raise InvalidInputError(f"learning rate must be positive, got {lr}")
    velocity = velocity if velocity is not None else {}
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {p.name or 'parameter'} {p.shape}")
        step = g + weight_decay * p.data if (p.decay or decay_all) else g.copy()
        if momentum:
            v = velocity.get(id(p))
            step = step if v is None else momentum * v + step
            velocity[id(p)] = step
        rate = lr if p.decay else lr * lr_scale_free
        p.data = p.data - rate * step
        if p.bounds is not None:
            p.data = np.clip(p.data, p.bounds[0], p.bounds[1])


class ProjectedSGD:
    def __init__(
        self,
        params: List[Parameter],
        lr: float,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
        decay_norm_params: bool = False,
        norm_lr_scale: float = 1.0,
    ):
        if lr <= 0:
            raise InvalidInputError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_norm_params = decay_norm_params
        self.norm_lr_scale = norm_lr_scale
        self.velocity: Dict[int, np.ndarray] = {}

    def step(self, grads: Dict[Tensor, np.ndarray]) -> None:
        sgd_step(
            self.params, grads, self.lr, self.momentum, self.weight_decay,
            velocity=self.velocity, decay_all=self.decay_norm_params, lr_scale_free=self.norm_lr_scale,
        )


# ----------------------------------------------------------------------
# data and evaluation
# ----------------------------------------------------------------------


def make_datasets(config: ExperimentConfig) -> Tuple[DomainDataset, DomainDataset]:
    if config.generator == "channel_permuted":
        return make_channel_permuted(
            config.classes, config.features, config.permutation_indices(), config.per_feature("shift"),
            config.per_class, config.seed, config.spread,
        )
    if config.generator == "shifted_gaussians":
        return make_shifted_gaussians(
            config.classes, config.features, config.per_feature("shift"), config.per_feature("scale"),
            config.per_class, config.seed, config.spread,
        )
    if config.generator == "two_moons":
        return make_two_moons_shift(config.samples, config.rotation, config.noise, config.seed)
    source, target = load_csv(config.data_path)
    if source is None or target is None:
        raise InvalidInputError(f"{config.data_path} must hold both a source and a target domain")
    return source, target


def evaluate(model: Union[DomainAdversarialNet, Mlp], dataset: DomainDataset, domain: Optional[str] = None) -> Tuple[float, float]:
    """Accuracy and mean cross-entropy of the running-statistics (eval) path; never mutates the model."""
    backbone = model.backbone if isinstance(model, DomainAdversarialNet) else model
    domain = domain or dataset.domain
    x = Tensor(dataset.features)
    if domain == "source":
        logits = backbone.forward(x, None, "eval").logits_s
    else:
        logits = backbone.forward(None, x, "eval").logits_t
    loss = cross_entropy(logits, dataset.labels).item()
    accuracy = float(np.mean(np.argmax(logits.data, axis=1) == dataset.labels))
    return accuracy, loss


# ----------------------------------------------------------------------
# the loop
# ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DomainAdversarialNet
    metrics: pd.DataFrame
    reports: Dict[int, list] = field(default_factory=dict)
    run_dir: Optional[Path] = None


def build_model(config: ExperimentConfig, features: int, classes: int) -> DomainAdversarialNet:
    spec = MlpSpec(
        widths=[features, *config.hidden, classes],
        normalizer=config.normalizer,
        norm_options=config.norm_options(),
    )
    return DomainAdversarialNet(
        spec, seed=config.seed, discriminator_hidden=config.discriminator_hidden,
        epsilon=config.epsilon, alpha=config.alpha,
    )


def default_run_dir(config: ExperimentConfig) -> Path:
    return Path(config.out or os.path.join(OUTPUT_DIR, f"{config.normalizer}-s{config.seed}"))


def write_table(rows: List[BaseModel], path: Path, columns: List[str]) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in rows], columns=columns)
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    return frame


class TimingRow(BaseModel):
    epoch: int
    seconds: float


def _correlation_records(model: DomainAdversarialNet) -> list:
    return [
        norm.last_report.record(layer=i)
        for i, norm in enumerate(model.backbone.norms)
        if isinstance(norm, ReciprocalNorm) and norm.last_report is not None
    ]


def train_run(
    config: ExperimentConfig,
    data: Optional[Tuple[DomainDataset, DomainDataset]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Train one seeded run and write its artifacts.

    Each step minimizes CE(source logits, source labels); when dann_lambda > 0
    a discriminator classifies the concatenated bottleneck features by domain
    through gradient reversal, so the discriminator minimizes the domain loss
    and the features receive -lambda times its gradient. Target labels are
    never passed to the loop; they are read only by evaluate().

    Writes to the run directory:
        config.cfg, metrics.csv, timings.csv,
        checkpoints/epoch_XXX.json, reports/epoch_XXX.json
    """
    source, target = data if data is not None else make_datasets(config)
    run_dir = Path(out_dir) if out_dir is not None else default_run_dir(config)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "reports").mkdir(parents=True, exist_ok=True)
    dump_config(config, run_dir / "config.cfg")

    model = build_model(config, source.num_features, max(source.num_classes, target.num_classes))
    optimizer = ProjectedSGD(
        model.parameters(), config.lr, config.momentum, config.weight_decay,
        decay_norm_params=config.decay_norm_params, norm_lr_scale=config.norm_lr_scale,
    )
    unlabeled_target = target.unlabeled()
    steps_per_epoch = max(len(source), len(unlabeled_target)) // config.batch_size
    total_steps = config.epochs * steps_per_epoch

    rows: List[MetricsRow] = []
    timings: List[TimingRow] = []
    reports: Dict[int, list] = {}
    step = 0
    logger.info("training %s on %d/%d samples for %d epochs -> %s",
                config.normalizer, len(source), len(target), config.epochs, run_dir)
    try:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            class_losses, domain_losses, correct, seen = [], [], 0, 0
            for x_s, y_s, x_t in batch_iter(source, unlabeled_target, config.batch_size, config.seed, epoch):
                out = model.backbone.forward(Tensor(x_s), Tensor(x_t), "train")
                class_loss = cross_entropy(out.logits_s, y_s)
                loss = class_loss
                if config.dann_lambda > 0:
                    progress = step / max(total_steps, 1)
                    lam = dann_lambda(progress, config.dann_lambda) if config.anneal else config.dann_lambda
                    domain_labels = np.concatenate([np.zeros(len(x_s), dtype=np.int64), np.ones(len(x_t), dtype=np.int64)])
                    domain_loss = cross_entropy(model.domain_logits(out.features_s, out.features_t, lam), domain_labels)
                    loss = class_loss + domain_loss
                    domain_losses.append(domain_loss.item())
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"loss is {loss.item()} at epoch {epoch}, step {step}")

                grads = backward(loss)
                optimizer.step(grads)
                class_losses.append(class_loss.item())
                correct += int(np.sum(np.argmax(out.logits_s.data, axis=1) == y_s))
                seen += len(y_s)
                step += 1

            rows.append(MetricsRow(
                epoch=epoch, split="train_s", class_loss=float(np.mean(class_losses)),
                domain_loss=float(np.mean(domain_losses)) if domain_losses else None,
                accuracy=correct / max(seen, 1),
            ))
            for split, dataset in (("eval_s", source), ("eval_t", target)):
                accuracy, mean_loss = evaluate(model, dataset)
                rows.append(MetricsRow(epoch=epoch, split=split, class_loss=mean_loss, accuracy=accuracy))

            name = f"epoch_{epoch:03d}.json"
            (run_dir / "checkpoints" / name).write_text(model.checkpoint().model_dump_json(indent=2), encoding="utf-8")
            records = _correlation_records(model)
            reports[epoch] = records
            (run_dir / "reports" / name).write_text(
                "[" + ",\n".join(r.model_dump_json() for r in records) + "]\n", encoding="utf-8"
            )
            timings.append(TimingRow(epoch=epoch, seconds=time.perf_counter() - started))
            logger.info("epoch %d: train loss %.4f, eval_s %.3f, eval_t %.3f",
                        epoch, rows[-3].class_loss, rows[-2].accuracy, rows[-1].accuracy)
    finally:
        metrics = write_table(rows, run_dir / "metrics.csv", METRIC_COLUMNS)
        write_table(timings, run_dir / "timings.csv", ["epoch", "seconds"])

    return TrainResult(model=model, metrics=metrics, reports=reports, run_dir=run_dir)


def load_model(path: Union[str, Path]) -> DomainAdversarialNet:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"checkpoint not found: {path}")
    return DomainAdversarialNet.from_checkpoint(ModelCheckpoint.model_validate_json(path.read_text(encoding="utf-8")))
