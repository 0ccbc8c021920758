"""Response-based knowledge distillation on numpy: teachers, students, soft-label analysis."""

__version__ = "0.1.0"
