"""antforge: a desk-scale laboratory for noise-robust classifier training.

Gaussian noise training, learned adversarial noise distributions, joint
adversarial noise training with experience replay, and a corruption-
robustness evaluation stack, all on a small self-contained tensor core.
"""

__version__ = "0.1.0"
