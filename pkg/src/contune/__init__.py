"""Rehearsal-free continual instruction tuning on a tiny frozen model.

The package trains a pool of (proxy key, low-rank increment) pairs over a
stream of synthetic instruction tasks: instructions select pool entries
by cosine similarity, the selected increments blend into per-instance and
per-task additive updates of a frozen attention projection, and standard
continual-learning metrics (average accuracy / average forgetting)
quantify how much less the method forgets than full fine-tuning.
"""

__version__ = "0.1.0"
