"""Gradient-accumulated alternating training of a content encoder and a
collaborative filter, at desk scale.

The package provides:

* ``autodiff`` — a minimal reverse-mode engine over dense numpy tensors;
* ``model`` — a toy transformer-style content encoder plus recurrent and
  attention-based response predictors;
* ``dataset`` — a synthetic interaction-sequence generator, cold-start
  splits, and the plain-text interchange formats;
* ``training`` — end-to-end backprop, the accumulated alternating
  scheme, ablation baselines, and the step-by-step equivalence verifier;
* ``metrics`` — AUC / cold-start AUC / MRR / nDCG;
* ``instrument`` — call counters, an activation-memory accountant, and
  wall-clock benchmarking;
* ``cli`` — the ``gram`` command line.
"""

__version__ = "0.1.0"
