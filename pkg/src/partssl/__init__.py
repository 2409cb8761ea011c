"""Part-aware self-distillation pre-training and person retrieval, desk scale."""

__version__ = "0.1.0"
