"""Digital semantic-communication simulator.

A convolutional encoder/decoder transmits images over noisy channels either
as continuous ("analog") symbols or through a digital modulator: scalar,
symbol-constellation, vector or probabilistic quantisation bridged with a
straight-through, soft-to-hard, uniform-noise or Gumbel-softmax gradient.
"""
from .errors import DigiscError

__version__ = "0.1.0"

__all__ = ["DigiscError", "__version__"]
