"""Wheat head blight segmentation with a hierarchical transformer.

Library layout:

- ``bfseg.tensor``: minimal autodiff tensor core (numpy storage)
- ``bfseg.layers``: patch embedding / merging / expanding, efficient
  self-attention, mix-FFN, transformer blocks
- ``bfseg.model``: encoder, multi-scale token bridge, decoder, checkpoints
- ``bfseg.metrics``: confusion-matrix metrics and report formatting
- ``bfseg.data``: dataset I/O, mask color coding, splits, synthetic generator
- ``bfseg.train``: loss, optimizer, training loop with early stopping
- ``bfseg.cli``: the ``bfseg`` command line
"""

from bfseg.tensor import ConfigError, GradError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "ConfigError", "GradError", "__version__"]
