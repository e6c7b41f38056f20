"""Asymmetric hierarchical anchoring for audio-visual discrete representations.

Desk-scale implementation on synthetic factorized data: a minimal autodiff
substrate, a residual vector quantizer with a shared semantic prefix,
bimodal EMA codebook updates, a gradient-reversal adversarial decoupler,
local sliding alignment, cross-modal predictive coding, and a training /
probing harness.
"""

__version__ = "0.1.0"
