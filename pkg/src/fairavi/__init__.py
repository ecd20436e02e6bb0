"""Multimodal hireability scoring with adversarial debiasing.

Subpackages: autodiff (reverse-mode engine), layers, model, training,
data (synthetic corpus + compression), evaluation (probes and fairness
metrics), cli.
"""

__version__ = "0.1.0"
