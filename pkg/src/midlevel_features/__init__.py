"""Mid-level perceptual music features: DSP frontend, extractors, annotation
statistics, shallow models and a toy-scale transfer-learning stack."""

__version__ = "0.1.0"
