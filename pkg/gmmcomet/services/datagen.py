# gmmcomet/services/datagen.py
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from ..core.errors import ConfigurationError, ContractViolation, ScenarioTooHardError
from ..schemas.config_schemas import PretrainConfig, ScenarioConfig, ShiftSpec
from . import losses
from .netcore import OptimizerState, ParamSet, backward, forward, iter_minibatches, OutputGrads, sgd_step

logger = logging.getLogger(__name__)


@dataclass
class SourceData:
    inputs: np.ndarray   # (n, D)
    labels: np.ndarray   # (n,) in 0..num_source_classes-1


@dataclass
class Batch:
    inputs: np.ndarray       # (N_b, D)
    true_labels: np.ndarray  # (N_b,) ground truth, metrics only
    domain_id: int


def class_means(total_classes: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Class centres spread on a sphere of the given radius."""
    directions = rng.standard_normal((total_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return radius * directions


def sample_blobs(means: np.ndarray, labels: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    return means[labels] + std * rng.standard_normal((labels.shape[0], means.shape[1]))


def rotation_matrix(dim: int, angle: float, plane: Tuple[int, int]) -> np.ndarray:
    rot = np.eye(dim)
    i, j = plane
    c, s = np.cos(angle), np.sin(angle)
    rot[i, i], rot[i, j] = c, -s
    rot[j, i], rot[j, j] = s, c
    return rot


def apply_shift(points: np.ndarray, spec: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    """x -> scale * R(theta) x + translation + noise_std * eta."""
    points = np.asarray(points, dtype=np.float64)
    dim = points.shape[1]
    if max(spec.rotation_plane) >= dim:
        raise ConfigurationError("rotation_plane axis out of range", field="rotation_plane")
    shifted = points
    if spec.rotation != 0.0:
        shifted = shifted @ rotation_matrix(dim, spec.rotation, spec.rotation_plane).T
    if spec.scale != 1.0:
        shifted = spec.scale * shifted
    if spec.translation is not None:
        shifted = shifted + np.asarray(spec.translation, dtype=np.float64)
    if spec.noise_std > 0.0:
        shifted = shifted + spec.noise_std * rng.standard_normal(shifted.shape)
    return shifted if shifted is not points else points.copy()


def augment(inputs: np.ndarray, sigma_aug: float, rng: np.random.Generator,
            scale: Optional[np.ndarray] = None) -> np.ndarray:
    """Input-space Gaussian jitter x + sigma_aug * scale * eta (scale defaults to 1 per dimension)."""
    if sigma_aug < 0:
        raise ContractViolation("sigma_aug must be non-negative")
    inputs = np.asarray(inputs, dtype=np.float64)
    if sigma_aug == 0.0:
        return inputs.copy()
    noise = rng.standard_normal(inputs.shape)
    if scale is not None:
        noise = noise * scale
    return inputs + sigma_aug * noise


class DomainStream:
    """
    Single-pass stream over contiguous target domains. Each domain is sampled
    and shuffled when the stream reaches it; every batch is yielded once.
    """

    def __init__(self, cfg: ScenarioConfig, means: np.ndarray, rng: np.random.Generator):
        self.cfg = cfg
        self.means = means
        self.rng = rng
        self.target_classes = np.asarray(cfg.split.target_classes(), dtype=np.int64)
        self.batch_counts = cfg.domain_batch_counts()
        self._domain = 0
        self._queue: List[Batch] = []
        self._yielded = 0

    def __len__(self) -> int:
        return sum(self.batch_counts)

    @property
    def num_domains(self) -> int:
        return len(self.batch_counts)

    @property
    def yielded(self) -> int:
        return self._yielded

    def __iter__(self) -> Iterator[Batch]:
        return self

    def __next__(self) -> Batch:
        while not self._queue:
            if self._domain >= self.num_domains:
                raise StopIteration
            self._queue = self._make_domain(self._domain)
            self._domain += 1
        self._yielded += 1
        return self._queue.pop(0)

    def _make_domain(self, domain_id: int) -> List[Batch]:
        n_batches = self.batch_counts[domain_id]
        n_b = self.cfg.batch_size
        n = n_batches * n_b
        if n == 0:
            return []
        labels = np.resize(self.target_classes, n)
        labels = labels[self.rng.permutation(n)]
        points = sample_blobs(self.means, labels, self.cfg.class_std, self.rng)
        points = apply_shift(points, self.cfg.domains[domain_id], self.rng)
        return [
            Batch(points[k * n_b:(k + 1) * n_b], labels[k * n_b:(k + 1) * n_b], domain_id)
            for k in range(n_batches)
        ]


def make_scenario(cfg: ScenarioConfig, rng: np.random.Generator) -> Tuple[SourceData, DomainStream]:
    split = cfg.split
    if split.num_source_classes < 1 or split.num_target_classes < 1:
        raise ConfigurationError("split leaves an empty label set", field="split")
    means = class_means(split.total_classes, cfg.input_dim, cfg.class_radius, rng)
    source_labels = np.repeat(np.asarray(split.source_classes(), dtype=np.int64), cfg.pretrain.samples_per_class)
    source_labels = source_labels[rng.permutation(source_labels.shape[0])]
    source = SourceData(sample_blobs(means, source_labels, cfg.class_std, rng), source_labels)
    logger.debug("Scenario %s: %d classes, %d source samples, %d target batches",
                 cfg.kind.value, split.total_classes, source_labels.shape[0], sum(cfg.domain_batch_counts()))
    return source, DomainStream(cfg, means, rng)


def accuracy(params: ParamSet, data: SourceData) -> float:
    if data.labels.shape[0] == 0:
        return 1.0
    predictions = np.argmax(forward(params, data.inputs).logits, axis=1)
    return float(np.mean(predictions == data.labels))


def pretrain_source(net: ParamSet, source_data: SourceData, cfg: PretrainConfig,
                    rng: np.random.Generator) -> Tuple[ParamSet, float]:
    """Label-smoothed cross-entropy training of the trunk and classifier; returns (source model, train accuracy)."""
    if source_data.labels.shape[0] == 0:
        raise ContractViolation("source data is empty")
    if np.any(source_data.labels < 0) or np.any(source_data.labels >= net.arch.num_classes):
        raise ContractViolation("source labels fall outside the source label set")
    params = net.copy(frozen=False)
    opt = OptimizerState.for_params(params, cfg.lr, cfg.momentum)
    train_acc = accuracy(params, source_data)
    epoch = 0
    while epoch < cfg.epochs and train_acc < cfg.target_accuracy:
        for idx in iter_minibatches(source_data.labels.shape[0], cfg.batch_size, rng):
            trace = forward(params, source_data.inputs[idx])
            loss, d_logits = losses.smoothed_cross_entropy(trace.logits, source_data.labels[idx], cfg.label_smoothing)
            grads = backward(params, trace, OutputGrads(loss=loss, logits=d_logits))
            sgd_step(params, grads, opt)
        epoch += 1
        train_acc = accuracy(params, source_data)
    logger.info("Source pretraining finished after %d epochs, train accuracy %.4f", epoch, train_acc)
    if train_acc < cfg.min_accuracy:
        raise ScenarioTooHardError(train_acc, cfg.min_accuracy)
    return params, train_acc


def dump_csv(source: SourceData, stream: DomainStream, out_dir: Union[str, Path]) -> List[Path]:
    """Write source.csv and target.csv (domain_id, label, x0..x{D-1}). Consumes the stream."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = source.inputs.shape[1]
    header = ["domain_id", "label", *[f"x{i}" for i in range(dim)]]
    source_path, target_path = out / "source.csv", out / "target.csv"
    with source_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for x, y in zip(source.inputs, source.labels):
            writer.writerow([-1, int(y), *map(repr, x.tolist())])
    with target_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for batch in stream:
            for x, y in zip(batch.inputs, batch.true_labels):
                writer.writerow([batch.domain_id, int(y), *map(repr, x.tolist())])
    return [source_path, target_path]
