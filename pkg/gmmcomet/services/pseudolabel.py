# gmmcomet/services/pseudolabel.py
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import xlogy

from ..core.errors import CalibrationError, ConfigurationError, ContractViolation
from ..schemas.config_schemas import OodMetricKind
from .gmmstream import GmmState, log_likelihoods_batch, mahalanobis_batch, responsibilities_from_log

logger = logging.getLogger(__name__)

IGNORED = -1
SIMPLEX_TOL = 1e-6


class LabelKind(str, Enum):
    KNOWN = "known"
    UNKNOWN = "unknown"
    IGNORED = "ignored"


@dataclass(frozen=True)
class PseudoLabel:
    kind: LabelKind
    class_index: Optional[int] = None

    @classmethod
    def known(cls, class_index: int) -> "PseudoLabel":
        return cls(LabelKind.KNOWN, int(class_index))

    @classmethod
    def unknown(cls) -> "PseudoLabel":
        return cls(LabelKind.UNKNOWN)

    @classmethod
    def ignored(cls) -> "PseudoLabel":
        return cls(LabelKind.IGNORED)

    def encode(self, num_classes: int) -> int:
        """Integer code: class index, `num_classes` for unknown, -1 for ignored."""
        if self.kind == LabelKind.KNOWN:
            return self.class_index
        return num_classes if self.kind == LabelKind.UNKNOWN else IGNORED

    @classmethod
    def decode(cls, code: int, num_classes: int) -> "PseudoLabel":
        if code == IGNORED:
            return cls.ignored()
        if code == num_classes:
            return cls.unknown()
        if 0 <= code < num_classes:
            return cls.known(code)
        raise ContractViolation(f"invalid pseudo-label code {code} for {num_classes} classes")


def _argmax_lowest(values: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index.
    return np.argmax(values, axis=-1)


def score_mahalanobis(state: GmmState, reduced_feat: np.ndarray) -> float:
    """Min over initialized classes of the squared Mahalanobis distance (no square root)."""
    return float(score_mahalanobis_batch(state, np.asarray(reduced_feat).reshape(1, -1))[0])


def score_mahalanobis_batch(state: GmmState, reduced_feats: np.ndarray) -> np.ndarray:
    if not np.any(state.initialized):
        raise CalibrationError("no GMM class is initialized yet")
    return np.min(mahalanobis_batch(state, reduced_feats), axis=1)


def _check_simplex(p: np.ndarray) -> None:
    if np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ContractViolation("input is not a probability vector")


def score_entropy(p: np.ndarray) -> float:
    """Normalized entropy of a responsibility vector, in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    _check_simplex(p)
    return float(score_entropy_batch(p.reshape(1, -1))[0])


def score_entropy_batch(p: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    num_classes = p.shape[1]
    if num_classes < 2:
        raise ConfigurationError("normalized entropy needs at least two classes")
    h = -np.sum(xlogy(p, p), axis=1) / np.log(num_classes)
    return np.clip(h, 0.0, 1.0)


def ood_scores(state: GmmState, reduced_feats: np.ndarray, metric: OodMetricKind) -> Tuple[np.ndarray, np.ndarray]:
    """OOD score per sample plus the GMM responsibilities used for pseudo-labels."""
    if not np.any(state.initialized):
        raise CalibrationError("no GMM class is initialized yet")
    resp = responsibilities_from_log(log_likelihoods_batch(state, reduced_feats))
    if metric == OodMetricKind.MAHALANOBIS:
        scores = score_mahalanobis_batch(state, reduced_feats)
    else:
        scores = score_entropy_batch(resp)
    return scores, resp


def quantile(values: np.ndarray, level: float) -> float:
    """Linear interpolation between order statistics."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), level, method="linear"))


@dataclass
class ThresholdCalibrator:
    p_reject: float
    n_init: int
    lower_quantiles: List[float] = field(default_factory=list)
    upper_quantiles: List[float] = field(default_factory=list)
    frozen: bool = False
    tau_lower: Optional[float] = None
    tau_upper: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.p_reject < 1.0:
            raise ConfigurationError(f"must lie in (0, 1), got {self.p_reject}", field="p_reject")
        if self.n_init < 1:
            raise ConfigurationError(f"must be >= 1, got {self.n_init}", field="n_init")

    @property
    def levels(self) -> Tuple[float, float]:
        tail = (1.0 - self.p_reject) / 2.0
        return tail, 1.0 - tail

    def provisional(self) -> Tuple[float, float]:
        """Thresholds in use: frozen values, or running means of the quantiles seen so far."""
        if self.frozen:
            return self.tau_lower, self.tau_upper
        if not self.lower_quantiles:
            raise ContractViolation("no calibration batch observed yet")
        return _ordered(float(np.mean(self.lower_quantiles)), float(np.mean(self.upper_quantiles)))

    def copy(self) -> "ThresholdCalibrator":
        return ThresholdCalibrator(
            self.p_reject, self.n_init, list(self.lower_quantiles), list(self.upper_quantiles),
            self.frozen, self.tau_lower, self.tau_upper,
        )


def _ordered(tau_lower: float, tau_upper: float) -> Tuple[float, float]:
    if tau_lower > tau_upper:
        mid = 0.5 * (tau_lower + tau_upper)
        return mid, mid
    return tau_lower, tau_upper


def calibrate_observe(cal: ThresholdCalibrator, batch_scores: np.ndarray) -> ThresholdCalibrator:
    if cal.frozen:
        raise ContractViolation("calibrator is already frozen")
    scores = np.asarray(batch_scores, dtype=np.float64).reshape(-1)
    if scores.size < 2:
        raise ContractViolation("calibration needs at least two scores per batch")
    low, high = cal.levels
    cal.lower_quantiles.append(quantile(scores, low))
    cal.upper_quantiles.append(quantile(scores, high))
    if len(cal.lower_quantiles) >= cal.n_init:
        cal.tau_lower, cal.tau_upper = _ordered(
            float(np.mean(cal.lower_quantiles)), float(np.mean(cal.upper_quantiles))
        )
        cal.frozen = True
        logger.info("OOD thresholds frozen after %d batches: tau_l=%.6g tau_u=%.6g",
                    cal.n_init, cal.tau_lower, cal.tau_upper)
    return cal


def assign(p: np.ndarray, score: float, tau_lower: float, tau_upper: float) -> PseudoLabel:
    if tau_lower > tau_upper:
        raise ContractViolation("tau_lower must not exceed tau_upper")
    if score <= tau_lower:
        return PseudoLabel.known(int(_argmax_lowest(np.asarray(p))))
    if score >= tau_upper:
        return PseudoLabel.unknown()
    return PseudoLabel.ignored()


def assign_batch(resp: np.ndarray, scores: np.ndarray, tau_lower: float, tau_upper: float) -> np.ndarray:
    """Vectorized `assign`, returning integer codes (see PseudoLabel.encode)."""
    if tau_lower > tau_upper:
        raise ContractViolation("tau_lower must not exceed tau_upper")
    num_classes = resp.shape[1]
    codes = np.full(scores.shape[0], IGNORED, dtype=np.int64)
    known = scores <= tau_lower
    codes[known] = _argmax_lowest(resp[known])
    codes[(scores >= tau_upper) & ~known] = num_classes
    return codes


def decide_inference(student_probs: np.ndarray, teacher_probs: np.ndarray, score: float,
                     tau_lower: float, tau_upper: float) -> int:
    """Known-class argmax of the summed student+teacher probabilities, or unknown above the mean threshold."""
    student_probs = np.asarray(student_probs, dtype=np.float64)
    return int(decide_inference_batch(
        student_probs.reshape(1, -1), np.asarray(teacher_probs, dtype=np.float64).reshape(1, -1),
        np.array([score]), tau_lower, tau_upper,
    )[0])


def decide_inference_batch(student_probs: np.ndarray, teacher_probs: Optional[np.ndarray], scores: np.ndarray,
                           tau_lower: float, tau_upper: float) -> np.ndarray:
    tau_inf = 0.5 * (tau_lower + tau_upper)
    combined = student_probs if teacher_probs is None else student_probs + teacher_probs
    labels = _argmax_lowest(combined).astype(np.int64)
    labels[scores > tau_inf] = student_probs.shape[1]
    return labels
