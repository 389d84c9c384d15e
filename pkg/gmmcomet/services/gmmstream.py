# gmmcomet/services/gmmstream.py
"""
Class-conditional Gaussian mixture over reduced teacher features, updated
recursively batch by batch.

For each class, with w the teacher probability of that class and z the reduced
feature of a sample, and alpha the forgetting factor:

    s     <- alpha * s + sum(w)
    mu    <- (alpha * s_old * mu + sum(w * z)) / s
    sigma <- (alpha * s_old * sigma + sum(w * (z - mu)(z - mu)^T)) / s

The stored covariance is the raw recursion above; densities and Mahalanobis
terms use sigma + cov_reg * I.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import orjson
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from ..core.errors import ConfigurationError, ContractViolation, DegenerateInputError, NumericalError

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
S_MIN = 1e-8
DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = float(np.log(DENSITY_FLOOR))


@dataclass
class GmmState:
    num_classes: int
    dim: int
    s: np.ndarray          # (C,)
    mu: np.ndarray         # (C, d)
    sigma: np.ndarray      # (C, d, d)
    alpha_gmm: float
    cov_reg: float = 1e-4
    initialized: np.ndarray = None  # (C,) bool

    @classmethod
    def empty(cls, num_classes: int, dim: int, alpha_gmm: float, cov_reg: float = 1e-4) -> "GmmState":
        if not 0.0 <= alpha_gmm <= 1.0:
            raise ConfigurationError(f"must lie in [0, 1], got {alpha_gmm}", field="alpha_gmm")
        if cov_reg <= 0:
            raise ConfigurationError(f"must be positive, got {cov_reg}", field="cov_reg")
        return cls(
            num_classes=num_classes,
            dim=dim,
            s=np.zeros(num_classes),
            mu=np.zeros((num_classes, dim)),
            sigma=np.zeros((num_classes, dim, dim)),
            alpha_gmm=float(alpha_gmm),
            cov_reg=float(cov_reg),
            initialized=np.zeros(num_classes, dtype=bool),
        )

    def copy(self) -> "GmmState":
        return GmmState(
            self.num_classes, self.dim, self.s.copy(), self.mu.copy(), self.sigma.copy(),
            self.alpha_gmm, self.cov_reg, self.initialized.copy(),
        )

    def equals(self, other: "GmmState") -> bool:
        return (
            np.array_equal(self.s, other.s) and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.sigma, other.sigma)
            and np.array_equal(self.initialized, other.initialized)
            and self.alpha_gmm == other.alpha_gmm and self.cov_reg == other.cov_reg
        )


def gmm_update(state: GmmState, teacher_probs: np.ndarray, reduced_feats: np.ndarray) -> GmmState:
    """One recursive E/M update from a batch of teacher softmax outputs and reduced features."""
    w = np.asarray(teacher_probs, dtype=np.float64)
    z = np.asarray(reduced_feats, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != state.num_classes:
        raise ContractViolation(f"teacher_probs shape {w.shape} does not match {state.num_classes} classes")
    if z.ndim != 2 or z.shape != (w.shape[0], state.dim):
        raise ContractViolation(f"reduced_feats shape {z.shape} does not match ({w.shape[0]}, {state.dim})")
    if not np.all(np.isfinite(z)):
        raise NumericalError("reduced features contain NaN or Inf")

    new = state.copy()
    a = state.alpha_gmm
    carried = a * state.s
    new.s = carried + w.sum(axis=0)

    for c in range(state.num_classes):
        s_c = new.s[c]
        if s_c <= S_MIN:
            # No evidence yet: keep previous (possibly unset) parameters.
            new.initialized[c] = False
            continue
        wc = w[:, c]
        mu_c = (carried[c] * state.mu[c] + wc @ z) / s_c
        diff = z - mu_c
        scatter = (diff * wc[:, None]).T @ diff
        sigma_c = (carried[c] * state.sigma[c] + scatter) / s_c
        new.mu[c] = mu_c
        new.sigma[c] = 0.5 * (sigma_c + sigma_c.T)
        new.initialized[c] = True
    return new


def regularize_cov(sigma: np.ndarray, eps: float) -> np.ndarray:
    """sigma + eps * I, verified positive definite via Cholesky."""
    reg = np.asarray(sigma, dtype=np.float64) + eps * np.eye(sigma.shape[-1])
    try:
        np.linalg.cholesky(reg)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"regularized covariance is not positive definite: {exc}") from exc
    return reg


def _cholesky_factors(state: GmmState) -> Dict[int, np.ndarray]:
    factors: Dict[int, np.ndarray] = {}
    for c in np.flatnonzero(state.initialized):
        reg = state.sigma[c] + state.cov_reg * np.eye(state.dim)
        try:
            factors[int(c)] = cholesky(reg, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"covariance is not positive definite: {exc}", class_index=int(c)) from exc
    return factors


def _mahalanobis_terms(state: GmmState, feats: np.ndarray,
                       factors: Dict[int, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Squared Mahalanobis distances (N, C) and log-determinants (C,); inf / nan for uninitialized classes."""
    n = feats.shape[0]
    maha = np.full((n, state.num_classes), np.inf)
    logdet = np.full(state.num_classes, np.nan)
    for c, chol in factors.items():
        diff = feats - state.mu[c]
        y = solve_triangular(chol, diff.T, lower=True)
        maha[:, c] = np.sum(y * y, axis=0)
        logdet[c] = 2.0 * np.sum(np.log(np.diag(chol)))
    return maha, logdet


def log_likelihoods_batch(state: GmmState, reduced_feats: np.ndarray) -> np.ndarray:
    """Log-densities (N, C); uninitialized classes sit at log(DENSITY_FLOOR)."""
    feats = np.atleast_2d(np.asarray(reduced_feats, dtype=np.float64))
    factors = _cholesky_factors(state)
    maha, logdet = _mahalanobis_terms(state, feats, factors)
    out = np.full((feats.shape[0], state.num_classes), LOG_DENSITY_FLOOR)
    const = state.dim * np.log(2.0 * np.pi)
    for c in factors:
        log_p = -0.5 * (const + logdet[c] + maha[:, c])
        bad = ~np.isfinite(log_p)
        if np.any(bad):
            raise NumericalError("non-finite density", class_index=c)
        out[:, c] = np.maximum(log_p, LOG_DENSITY_FLOOR)
    return out


def likelihoods(state: GmmState, reduced_feat: np.ndarray) -> np.ndarray:
    """Multivariate normal densities of one feature under every class (floor for uninitialized classes)."""
    feat = np.asarray(reduced_feat, dtype=np.float64).reshape(1, -1)
    return np.exp(log_likelihoods_batch(state, feat)[0])


def mahalanobis_batch(state: GmmState, reduced_feats: np.ndarray) -> np.ndarray:
    """Squared Mahalanobis distances (N, C) under regularized covariances; inf for uninitialized classes."""
    feats = np.atleast_2d(np.asarray(reduced_feats, dtype=np.float64))
    maha, _ = _mahalanobis_terms(state, feats, _cholesky_factors(state))
    return maha


def responsibilities(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ContractViolation("likelihoods must be non-negative")
    total = p.sum()
    if total <= 0:
        raise DegenerateInputError("all likelihoods are zero")
    return p / total


def responsibilities_from_log(log_p: np.ndarray) -> np.ndarray:
    """Row-normalized responsibilities computed in log space (N, C)."""
    log_p = np.atleast_2d(log_p)
    return np.exp(log_p - logsumexp(log_p, axis=1, keepdims=True))


def to_snapshot(state: GmmState) -> Dict[str, Any]:
    return {
        "snapshot_version": SNAPSHOT_VERSION,
        "num_classes": state.num_classes,
        "dim": state.dim,
        "alpha_gmm": state.alpha_gmm,
        "cov_reg": state.cov_reg,
        "s": state.s.tolist(),
        "mu": state.mu.tolist(),
        "sigma": state.sigma.tolist(),
        "initialized": state.initialized.tolist(),
    }


def from_snapshot(data: Dict[str, Any]) -> GmmState:
    version = data.get("snapshot_version")
    if version != SNAPSHOT_VERSION:
        raise ConfigurationError(f"unsupported snapshot version {version!r}", field="snapshot_version")
    c, d = int(data["num_classes"]), int(data["dim"])
    state = GmmState(
        num_classes=c,
        dim=d,
        s=np.asarray(data["s"], dtype=np.float64).reshape(c),
        mu=np.asarray(data["mu"], dtype=np.float64).reshape(c, d),
        sigma=np.asarray(data["sigma"], dtype=np.float64).reshape(c, d, d),
        alpha_gmm=float(data["alpha_gmm"]),
        cov_reg=float(data["cov_reg"]),
        initialized=np.asarray(data["initialized"], dtype=bool).reshape(c),
    )
    return state


def save_snapshot(state: GmmState, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_bytes(orjson.dumps(to_snapshot(state), option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    logger.debug("GMM snapshot written to %s", path)
    return path


def load_snapshot(path: Union[str, Path]) -> GmmState:
    return from_snapshot(orjson.loads(Path(path).read_bytes()))
