"""Replay-regularized continual learning for small decoder-only language
models: numpy autodiff, transformer, synthetic tasks, replay objectives,
and the experiment harness."""

__version__ = "0.1.0"
