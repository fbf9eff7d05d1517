"""Label-efficient multi-task 3D segmentation at desk scale.

Core pieces: synthetic volumetric phantoms (`volgrid`), differentiable
objectives (`losses`), evaluation metrics (`metrics`), the encoder-decoder
with pluggable regularization branches (`model`), the semi-supervised
trainer (`trainer`), and the experiment harness (`experiments`).  A FastAPI
service (`multiseg.service`) wraps the harness; the CLI is a thin client.
"""

__version__ = "0.1.0"
