"""Adversarial auxiliary-network classification framework.

A residual feature extractor and classifier trained jointly with a
reconstruction generator (R-Net) and a two-headed patch discriminator
(D-Net). Only the feature extractor and classifier are used at inference;
the auxiliary networks exist to regularize training.
"""

__version__ = "0.1.0"
