# gmmcomet/services/engine.py
"""
Single-pass adaptation loop. Per batch:

  1. teacher forward -> softmax outputs and reduced features
  2. GMM update
  3. likelihoods -> responsibilities -> OOD scores
  4. threshold calibration (first n_init batches) / frozen thresholds
  5. pseudo-labels
  6. originals + jittered copies through the student, source and teacher features
  7. total loss, backward, SGD step
  8. EMA teacher update
  9. prediction

The engine only ever sees inputs; ground truth stays with the caller.
"""
import copy
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from ..core.errors import GmmCometError, NonFiniteGradientError, NonFiniteLossError, NumericalError, StreamError
from ..schemas.config_schemas import EngineConfig, PredictionTiming, ScenarioConfig
from ..schemas.report_schemas import LossValues, RunReport, ScoreSummary, StepLog
from . import losses
from .datagen import augment, make_scenario, pretrain_source
from .gmmstream import GmmState, gmm_update
from .meanteacher import ModelPair, ema_update, init_pair, sync_teacher
from .metrics import MetricsAccumulator, metric_name, per_domain_average, record_batch
from .netcore import Architecture, OptimizerState, OutputGrads, ParamSet, backward, forward, init_params, sgd_step
from .pseudolabel import (
    IGNORED, ThresholdCalibrator, assign_batch, calibrate_observe, decide_inference_batch, ood_scores,
    score_entropy_batch,
)

logger = logging.getLogger(__name__)


@dataclass
class _Snapshot:
    student: ParamSet
    teacher: ParamSet
    optimizer: OptimizerState
    gmm: GmmState
    calibrator: ThresholdCalibrator
    rng_state: Dict


class AdaptationEngine:
    def __init__(self, cfg: EngineConfig, source_params: ParamSet, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.num_classes = source_params.arch.num_classes
        self.pair: ModelPair = init_pair(source_params, cfg.alpha_mt, share_projection=cfg.share_projection)
        self.optimizer = OptimizerState.for_params(self.pair.student, cfg.lr, cfg.momentum)
        self.gmm = GmmState.empty(self.num_classes, source_params.arch.reduced_dim, cfg.alpha_gmm, cfg.cov_reg)
        self.calibrator = ThresholdCalibrator(cfg.p_reject, cfg.n_init)
        self.step_index = 0

        switches = cfg.switches
        self.weights = cfg.weights.model_copy(update={
            "lambda_src": cfg.weights.lambda_src if switches.consistency_src else 0.0,
            "lambda_mt": cfg.weights.lambda_mt if switches.consistency_mt else 0.0,
        })

    # -- state handling -------------------------------------------------------

    @property
    def teacher_for_reads(self) -> ParamSet:
        """The teacher, or the student itself when the mean teacher is disabled."""
        return self.pair.teacher if self.cfg.switches.mean_teacher else self.pair.student

    def _snapshot(self) -> _Snapshot:
        return _Snapshot(
            student=self.pair.student.copy(),
            teacher=self.pair.teacher.copy(),
            optimizer=self.optimizer.copy(),
            gmm=self.gmm,  # replaced, never mutated, by gmm_update
            calibrator=self.calibrator.copy(),
            rng_state=copy.deepcopy(self.rng.bit_generator.state),
        )

    def _restore(self, snap: _Snapshot) -> None:
        self.pair.student = snap.student
        self.pair.teacher = snap.teacher
        self.optimizer = snap.optimizer
        self.gmm = snap.gmm
        self.calibrator = snap.calibrator
        self.rng.bit_generator.state = snap.rng_state

    # -- steps -----------------------------------------------------------------

    def adapt_step(self, inputs: np.ndarray) -> Tuple[np.ndarray, StepLog]:
        inputs = np.asarray(inputs, dtype=np.float64)
        k = self.step_index
        self.step_index += 1
        if not self.cfg.switches.adapt:
            return self._source_only_step(k, inputs)

        snap = self._snapshot()
        try:
            return self._adapt(k, inputs)
        except (NonFiniteLossError, NonFiniteGradientError, NumericalError) as exc:
            logger.warning("Step %d skipped and rolled back: %s", k, exc)
            self._restore(snap)
            return self._skipped_step(k, inputs, str(exc))

    def _adapt(self, k: int, inputs: np.ndarray) -> Tuple[np.ndarray, StepLog]:
        cfg = self.cfg
        n = inputs.shape[0]

        # (1) teacher inference
        teacher_trace = forward(self.teacher_for_reads, inputs)
        # (2) GMM update
        self.gmm = gmm_update(self.gmm, teacher_trace.probs, teacher_trace.reduced)
        # (3) OOD scores
        scores, resp = ood_scores(self.gmm, teacher_trace.reduced, cfg.metric)
        # (4) thresholds
        if not self.calibrator.frozen:
            calibrate_observe(self.calibrator, scores)
        tau_l, tau_u = self.calibrator.provisional()
        # (5) pseudo-labels
        labels = assign_batch(resp, scores, tau_l, tau_u)

        # (6) forwards for the losses
        scale = inputs.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        augmented = augment(inputs, cfg.sigma_aug, self.rng, scale)
        student = self.pair.student
        student_trace = forward(student, np.vstack([inputs, augmented]))
        source_features = forward(self.pair.source, inputs).features

        emb = losses.LabeledEmbeddings(
            reduced=student_trace.reduced,
            labels=np.concatenate([labels, labels]),
            means=self.gmm.mu,
            mean_mask=self.gmm.initialized,
        )
        l_c, d_reduced = losses.contrastive_loss(emb, cfg.weights.temperature, cfg.weights.exclude_self_pairs)
        l_e, d_logits_orig = losses.entropy_loss(student_trace.probs[:n], labels)
        l_src, d_feat_src = losses.consistency_src(student_trace.features[:n], source_features)
        l_mt, d_feat_mt = losses.consistency_mt(student_trace.features[:n], teacher_trace.features)
        parts = {"contrastive": l_c, "entropy": l_e, "consistency_src": l_src, "consistency_mt": l_mt}

        # (7) optimization
        w = self.weights
        total = losses.total_loss(parts, w)
        d_logits = np.zeros_like(student_trace.logits)
        d_logits[:n] = w.lambda_entropy * d_logits_orig
        d_features = np.zeros_like(student_trace.features)
        d_features[:n] = w.lambda_src * d_feat_src + w.lambda_mt * d_feat_mt
        grads = backward(student, student_trace, OutputGrads(total, d_features, d_reduced, d_logits))
        sgd_step(student, grads, self.optimizer)

        # (8) teacher
        if cfg.switches.mean_teacher:
            ema_update(self.pair)
        else:
            sync_teacher(self.pair)

        # (9) prediction
        if cfg.prediction_timing == PredictionTiming.POST:
            student_probs = forward(student, inputs).probs
            post_teacher = forward(self.teacher_for_reads, inputs)
            teacher_probs = post_teacher.probs
            pred_scores, _ = ood_scores(self.gmm, post_teacher.reduced, cfg.metric)
        else:
            student_probs = student_trace.probs[:n]
            teacher_probs = teacher_trace.probs
            pred_scores = scores
        tau_l, tau_u = self.calibrator.provisional()
        predictions = decide_inference_batch(
            student_probs, teacher_probs if cfg.switches.ensembling else None, pred_scores, tau_l, tau_u,
        )

        log = self._log(k, labels, scores, predictions,
                        LossValues(contrastive=l_c, entropy=l_e, consistency_src=l_src,
                                   consistency_mt=l_mt, total=total))
        logger.debug("step %d: known=%s unknown=%d ignored=%d total_loss=%.5f",
                     k, log.known_counts, log.unknown_count, log.ignored_count, total)
        return predictions, log

    def _source_only_step(self, k: int, inputs: np.ndarray) -> Tuple[np.ndarray, StepLog]:
        """Frozen source model; OOD score is the normalized entropy of its softmax output."""
        probs = forward(self.pair.source, inputs).probs
        scores = score_entropy_batch(probs)
        if not self.calibrator.frozen:
            calibrate_observe(self.calibrator, scores)
        tau_l, tau_u = self.calibrator.provisional()
        labels = assign_batch(probs, scores, tau_l, tau_u)
        predictions = decide_inference_batch(probs, None, scores, tau_l, tau_u)
        return predictions, self._log(k, labels, scores, predictions, LossValues())

    def _skipped_step(self, k: int, inputs: np.ndarray, reason: str) -> Tuple[np.ndarray, StepLog]:
        """Predict with the restored pre-step state; no adaptation happens."""
        n = inputs.shape[0]
        student_probs = forward(self.pair.student, inputs).probs
        teacher_trace = forward(self.teacher_for_reads, inputs)
        teacher_probs = teacher_trace.probs if self.cfg.switches.ensembling else None
        labels = np.full(n, IGNORED, dtype=np.int64)
        if np.any(self.gmm.initialized) and self.calibrator.lower_quantiles:
            scores, _ = ood_scores(self.gmm, teacher_trace.reduced, self.cfg.metric)
            tau_l, tau_u = self.calibrator.provisional()
            predictions = decide_inference_batch(student_probs, teacher_probs, scores, tau_l, tau_u)
        else:
            scores = np.zeros(n)
            tau_l = tau_u = float("nan")
            combined = student_probs if teacher_probs is None else student_probs + teacher_probs
            predictions = np.argmax(combined, axis=1).astype(np.int64)
        log = self._log(k, labels, scores, predictions, LossValues(), tau=(tau_l, tau_u))
        log.skipped = True
        log.skip_reason = reason
        return predictions, log

    def _log(self, k: int, labels: np.ndarray, scores: np.ndarray, predictions: np.ndarray,
             loss_values: LossValues, tau: Optional[Tuple[float, float]] = None) -> StepLog:
        c = self.num_classes
        known = labels[(labels >= 0) & (labels < c)]
        tau_l, tau_u = tau if tau is not None else self.calibrator.provisional()
        return StepLog(
            batch_index=k,
            known_counts=np.bincount(known, minlength=c).tolist(),
            unknown_count=int(np.sum(labels == c)),
            ignored_count=int(np.sum(labels == IGNORED)),
            losses=loss_values,
            scores=ScoreSummary(min=float(np.min(scores)), median=float(np.median(scores)),
                                max=float(np.max(scores))),
            tau_lower=tau_l,
            tau_upper=tau_u,
            thresholds_frozen=self.calibrator.frozen,
            predictions=predictions.tolist(),
        )


def architecture_for(cfg: EngineConfig, scenario: ScenarioConfig) -> Architecture:
    net = cfg.network
    return Architecture(
        input_dim=scenario.input_dim,
        hidden_dims=tuple(net.hidden_dims),
        feature_dim=net.feature_dim,
        reduced_dim=net.reduced_dim,
        num_classes=scenario.split.num_source_classes,
    )


def seed_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (data, init, adaptation) generators derived from one seed."""
    data_seq, init_seq, engine_seq = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(data_seq), np.random.default_rng(init_seq), np.random.default_rng(engine_seq)


def run(cfg: EngineConfig, scenario: ScenarioConfig, seed: int, name: str = "run",
        engine_hook: Optional[Callable[["AdaptationEngine"], None]] = None) -> RunReport:
    """
    Generate the scenario, pretrain the source model and stream every batch
    through one engine. Data, initialization and adaptation randomness come
    from independent children of `seed`, so variants that share a scenario and
    seed share the same source model and the same stream.
    """
    data_rng, init_rng, engine_rng = seed_streams(seed)
    source_data, stream = make_scenario(scenario, data_rng)
    net = init_params(architecture_for(cfg, scenario), init_rng)
    source_params, train_acc = pretrain_source(net, source_data, scenario.pretrain, init_rng)

    engine = AdaptationEngine(cfg, source_params, engine_rng)
    acc = MetricsAccumulator(scenario.split.num_source_classes)
    report = RunReport(name=name, scenario=scenario.kind.value, seed=seed,
                       metric_name=metric_name(scenario.kind), source_train_accuracy=train_acc)

    for batch_index, batch in enumerate(stream):
        try:
            predictions, log = engine.adapt_step(batch.inputs)
        except GmmCometError as exc:
            raise StreamError(f"{type(exc).__name__}: {exc}", batch_index) from exc
        log.domain_id = batch.domain_id
        record_batch(acc, predictions, batch.true_labels, batch.domain_id)
        report.steps.append(log)

    report.num_batches = len(report.steps)
    report.skipped_steps = sum(1 for log in report.steps if log.skipped)
    if acc.domains:
        report.per_domain, report.average = per_domain_average(acc, scenario.kind)
    if engine.calibrator.frozen or engine.calibrator.lower_quantiles:
        report.tau_lower, report.tau_upper = engine.calibrator.provisional()
    if engine_hook is not None:
        engine_hook(engine)
    logger.info("Run %s seed=%d finished: %s=%s over %d batches", name, seed, report.metric_name,
                report.average, report.num_batches)
    return report
