"""Hybrid online knowledge distillation for lightweight image classifiers."""
from .distill_objectives import LossBreakdown, LossWeights, student_total, teacher_loss
from .student_net import HybridBlockConfig, StageConfig, build_student
from .teacher_net import TeacherConfig, build_teacher, load_pretrained
from .train_engine import TrainConfig, fit, train_step_sequential

__all__ = [
    "HybridBlockConfig", "LossBreakdown", "LossWeights", "StageConfig", "TeacherConfig",
    "TrainConfig", "build_student", "build_teacher", "fit", "load_pretrained",
    "student_total", "teacher_loss", "train_step_sequential",
]
__version__ = "0.1.0"
