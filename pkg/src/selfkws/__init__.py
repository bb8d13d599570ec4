"""Self-learning personalized keyword spotting: few-shot prototype
enrollment, streaming pseudo-labeling, triplet-loss incremental training and
an on-device resource cost model, all runnable at desk scale."""

__version__ = "0.1.0"
