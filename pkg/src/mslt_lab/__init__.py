"""Desk-scale laboratory for multi-stage layerwise training of BERT-style encoders.

Trains small encoders under three regimes (multi-stage layerwise training,
progressive stacking, joint from scratch), enforces the frozen-bottom /
trainable-top split inside the backward pass itself, and instruments
compute cost, communication volume, and attention-distribution drift.
"""

__version__ = "0.1.0"
