"""Spatio-temporal capsule network for gait classification.

A small reverse-mode autodiff core (:mod:`astcaps.tensor`) backs a recurrent
memory cell, convolutional feature maps, capsule routing, a relationship
layer, four classifier heads and a naive-Bayes fusion of their votes.
"""

__version__ = "0.1.0"
