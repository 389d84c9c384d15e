# gmmcomet/services/netcore.py
"""
Dense feed-forward stack used for the feature extractor, the projection head and
the classifier head, together with its hand-written reverse pass, an SGD optimizer
with heavy-ball momentum and a finite-difference gradient checker.

Layout of one network copy:

    x --[tanh dense]*--> [linear dense] = features --+--> reduced   (projection)
                                                    +--> logits    (classifier)

All arrays are float64.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax as _scipy_softmax

from ..core.errors import ConfigurationError, ContractViolation, NonFiniteGradientError

logger = logging.getLogger(__name__)

DTYPE = np.float64


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: Tuple[int, ...]
    feature_dim: int
    reduced_dim: int
    num_classes: int

    def __post_init__(self):
        dims = (self.input_dim, self.feature_dim, self.reduced_dim, self.num_classes, *self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"all layer sizes must be positive, got {self}")

    def trunk_shapes(self) -> List[Tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_dims, self.feature_dim]
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy())


@dataclass
class ParamSet:
    arch: Architecture
    trunk: List[DenseLayer]
    projection: DenseLayer
    classifier: DenseLayer
    frozen: bool = False

    def named_arrays(self) -> List[Tuple[str, np.ndarray]]:
        named: List[Tuple[str, np.ndarray]] = []
        for i, layer in enumerate(self.trunk):
            named += [(f"trunk.{i}.weight", layer.weight), (f"trunk.{i}.bias", layer.bias)]
        named += [("projection.weight", self.projection.weight), ("projection.bias", self.projection.bias)]
        named += [("classifier.weight", self.classifier.weight), ("classifier.bias", self.classifier.bias)]
        return named

    def arrays(self) -> List[np.ndarray]:
        return [array for _, array in self.named_arrays()]

    def copy(self, frozen: Optional[bool] = None) -> "ParamSet":
        return ParamSet(
            arch=self.arch,
            trunk=[layer.copy() for layer in self.trunk],
            projection=self.projection.copy(),
            classifier=self.classifier.copy(),
            frozen=self.frozen if frozen is None else frozen,
        )

    def zeros_like(self) -> "ParamSet":
        grads = self.copy(frozen=False)
        for array in grads.arrays():
            array.fill(0.0)
        return grads

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(array)) for array in self.arrays())

    def equals(self, other: "ParamSet") -> bool:
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def max_abs_diff(self, other: "ParamSet") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    hidden: List[np.ndarray]  # tanh activations, one per hidden layer
    features: np.ndarray
    reduced: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class OutputGrads:
    """Scalar loss value plus its gradient w.r.t. the three network outputs."""
    loss: float
    features: Optional[np.ndarray] = None
    reduced: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


@dataclass
class OptimizerState:
    velocity: List[np.ndarray]
    learning_rate: float
    momentum: float

    @classmethod
    def for_params(cls, params: ParamSet, learning_rate: float, momentum: float) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in params.arrays()], float(learning_rate), float(momentum))

    def copy(self) -> "OptimizerState":
        return OptimizerState([v.copy() for v in self.velocity], self.learning_rate, self.momentum)


def _glorot(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(DTYPE)


def init_params(arch: Architecture, rng: np.random.Generator) -> ParamSet:
    trunk = [DenseLayer(_glorot(rng, o, i), np.zeros(o, dtype=DTYPE)) for o, i in arch.trunk_shapes()]
    projection = DenseLayer(_glorot(rng, arch.reduced_dim, arch.feature_dim), np.zeros(arch.reduced_dim, dtype=DTYPE))
    classifier = DenseLayer(_glorot(rng, arch.num_classes, arch.feature_dim), np.zeros(arch.num_classes, dtype=DTYPE))
    return ParamSet(arch, trunk, projection, classifier)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max-subtraction."""
    return _scipy_softmax(np.asarray(logits, dtype=DTYPE), axis=-1)


def forward(params: ParamSet, batch: np.ndarray) -> ForwardTrace:
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != params.arch.input_dim:
        raise ConfigurationError(
            f"batch shape {x.shape} does not match input dimension {params.arch.input_dim}"
        )
    hidden: List[np.ndarray] = []
    a = x
    for layer in params.trunk[:-1]:
        a = np.tanh(a @ layer.weight.T + layer.bias)
        hidden.append(a)
    last = params.trunk[-1]
    features = a @ last.weight.T + last.bias
    reduced = features @ params.projection.weight.T + params.projection.bias
    logits = features @ params.classifier.weight.T + params.classifier.bias
    return ForwardTrace(x, hidden, features, reduced, logits, softmax(logits))


def backward(params: ParamSet, trace: ForwardTrace, out: OutputGrads) -> ParamSet:
    """Gradients of `out.loss` w.r.t. every array of `params` (same layout)."""
    if np.ndim(out.loss) != 0:
        raise ContractViolation(f"loss must be a scalar, got shape {np.shape(out.loss)}")
    if params.frozen:
        raise ContractViolation("gradients are never produced for a frozen parameter set")

    grads = params.zeros_like()

    def _upstream(grad: Optional[np.ndarray], like: np.ndarray, name: str) -> np.ndarray:
        if grad is None:
            return np.zeros_like(like)
        if grad.shape != like.shape:
            raise ContractViolation(f"{name} gradient shape {grad.shape} != output shape {like.shape}")
        return grad

    d_features = _upstream(out.features, trace.features, "features").copy()
    d_reduced = _upstream(out.reduced, trace.reduced, "reduced")
    d_logits = _upstream(out.logits, trace.logits, "logits")

    grads.projection.weight[...] = d_reduced.T @ trace.features
    grads.projection.bias[...] = d_reduced.sum(axis=0)
    d_features += d_reduced @ params.projection.weight

    grads.classifier.weight[...] = d_logits.T @ trace.features
    grads.classifier.bias[...] = d_logits.sum(axis=0)
    d_features += d_logits @ params.classifier.weight

    # Trunk, last (linear) layer first.
    layer_inputs = [trace.inputs, *trace.hidden]
    delta = d_features
    for idx in range(len(params.trunk) - 1, -1, -1):
        layer = params.trunk[idx]
        a_in = layer_inputs[idx]
        grads.trunk[idx].weight[...] = delta.T @ a_in
        grads.trunk[idx].bias[...] = delta.sum(axis=0)
        if idx == 0:
            break
        d_a = delta @ layer.weight
        delta = d_a * (1.0 - a_in ** 2)  # tanh'
    return grads


def sgd_step(params: ParamSet, grads: ParamSet, opt: OptimizerState) -> ParamSet:
    """Heavy-ball momentum: v <- momentum * v + g; theta <- theta - lr * v. Updates in place."""
    if params.frozen:
        raise ContractViolation("cannot step a frozen parameter set")
    param_arrays = params.named_arrays()
    grad_arrays = grads.arrays()
    if len(param_arrays) != len(grad_arrays) or len(opt.velocity) != len(grad_arrays):
        raise ContractViolation("parameter, gradient and velocity layouts differ")
    for (name, p), g, v in zip(param_arrays, grad_arrays, opt.velocity):
        if p.shape != g.shape or v.shape != g.shape:
            raise ContractViolation(f"shape mismatch for {name}: {p.shape}, {g.shape}, {v.shape}")
        if not np.all(np.isfinite(g)):
            logger.warning("Non-finite gradient in %s, skipping optimizer step", name)
            raise NonFiniteGradientError(name)
    for p, g, v in zip(params.arrays(), grad_arrays, opt.velocity):
        v *= opt.momentum
        v += g
        p -= opt.learning_rate * v
    return params


def grad_check(
    loss_fn: Callable[[ParamSet], Tuple[float, ParamSet]],
    params: ParamSet,
    eps: float = 1e-5,
    num_samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Max relative error between analytic and central-difference gradients.

    `loss_fn(params)` must return (loss value, gradient ParamSet). Coordinates are
    all checked when `num_samples` is None, otherwise `num_samples` are drawn at
    random. The relative error of one coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    work = params.copy(frozen=False)
    _, analytic = loss_fn(work)
    arrays = work.arrays()
    grad_arrays = analytic.arrays()

    coords: Sequence[Tuple[int, int]] = [
        (k, j) for k, a in enumerate(arrays) for j in range(a.size)
    ]
    if num_samples is not None and num_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=num_samples, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for k, j in coords:
        flat = arrays[k].reshape(-1)
        original = flat[j]
        flat[j] = original + eps
        plus, _ = loss_fn(work)
        flat[j] = original - eps
        minus, _ = loss_fn(work)
        flat[j] = original
        numeric = (plus - minus) / (2.0 * eps)
        exact = float(grad_arrays[k].reshape(-1)[j])
        rel = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
        worst = max(worst, rel)
    return worst


def iter_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
