"""Operator-network surrogates for stiff reaction kinetics.

Library + CLI covering dataset generation with a built-in implicit
integrator, DeepONet/DeepOKAN surrogates with partition-of-unity trunks and
bounded outputs, gradient-free adaptive loss weighting, one-step and
two-step (QR/least-squares) training, an exactly mass-conserving coordinate
map, and autoregressive long-horizon prediction.
"""

__version__ = "0.1.0"
