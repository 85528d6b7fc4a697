"""softrec: desk-scale self-optimized fine-tuning for sequential recommendation."""

__version__ = "0.1.0"
