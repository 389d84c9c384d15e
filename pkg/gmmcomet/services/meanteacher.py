# gmmcomet/services/meanteacher.py
from dataclasses import dataclass

from ..core.errors import ConfigurationError, ContractViolation
from .netcore import ParamSet


@dataclass
class ModelPair:
    student: ParamSet
    teacher: ParamSet
    source: ParamSet
    alpha_mt: float
    share_projection: bool = False


def init_pair(source_params: ParamSet, alpha_mt: float, share_projection: bool = False) -> ModelPair:
    """Student and teacher start as independent deep copies of the source model."""
    if not 0.0 <= alpha_mt <= 1.0:
        raise ConfigurationError(f"must lie in [0, 1], got {alpha_mt}", field="alpha_mt")
    source = source_params.copy(frozen=True)
    pair = ModelPair(
        student=source.copy(frozen=False),
        teacher=source.copy(frozen=True),
        source=source,
        alpha_mt=float(alpha_mt),
        share_projection=share_projection,
    )
    return pair


def ema_update(pair: ModelPair) -> ParamSet:
    """
    teacher <- alpha_mt * teacher + (1 - alpha_mt) * student, elementwise on
    every array. With `share_projection` the teacher's projection layer is
    replaced by the student's instead of being averaged.
    """
    alpha = pair.alpha_mt
    teacher_arrays = pair.teacher.named_arrays()
    student_arrays = pair.student.arrays()
    if len(teacher_arrays) != len(student_arrays):
        raise ContractViolation("student and teacher architectures differ")
    for (name, t), s in zip(teacher_arrays, student_arrays):
        if t.shape != s.shape:
            raise ContractViolation(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        if pair.share_projection and name.startswith("projection."):
            t[...] = s
            continue
        t *= alpha
        t += (1.0 - alpha) * s
    return pair.teacher


def sync_teacher(pair: ModelPair) -> ParamSet:
    """Make the teacher an exact copy of the student (mean teacher disabled)."""
    for t, s in zip(pair.teacher.arrays(), pair.student.arrays()):
        t[...] = s
    return pair.teacher
