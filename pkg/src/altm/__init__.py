"""Continual-learning experiments on small dense networks: sequential,
interleaved, multi-task and teacher-distillation (A-LTM) regimes over
synthetic hierarchical environments."""

__version__ = "0.1.0"
