"""Asymmetric student-teacher anomaly detection.

A conditional normalizing-flow teacher is trained by maximum likelihood on
normal data; a conventional convolutional student then learns to regress the
teacher's outputs.  The per-pixel squared distance between the two is the
anomaly score.
"""

from .tensor import Tensor, gradcheck
from .flow import TeacherModel, nll_map, teacher_loss, teacher_score_map
from .student import StudentModel, distance_map, image_score, student_loss
from .data import Sample, SynthSpec, positional_encoding, synth_corpus
from .training import TrainConfig, score_corpus, train_student, train_teacher
from .evaluate import MetricsReport, ToySpec, auroc, pixel_auroc, toy_experiment

__all__ = [
    "Tensor", "gradcheck",
    "TeacherModel", "nll_map", "teacher_loss", "teacher_score_map",
    "StudentModel", "distance_map", "image_score", "student_loss",
    "Sample", "SynthSpec", "positional_encoding", "synth_corpus",
    "TrainConfig", "score_corpus", "train_student", "train_teacher",
    "MetricsReport", "ToySpec", "auroc", "pixel_auroc", "toy_experiment",
]
