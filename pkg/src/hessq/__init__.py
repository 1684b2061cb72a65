"""Hessian-guided mixed-precision quantization for small transformer encoders.

Submodules:
  tensor      autodiff engine with exact Hessian-vector products
  kernels     compiled/numpy quantization kernels
  quantizer   uniform affine quantization primitives and observers
  groups      output-neuron group schemes (layerwise / per-head / bucketed)
  hessian     power iteration, eigenvalue shard statistics, loss landscapes
  allocation  sensitivity-ranked bit assignment and size accounting
  model       toy post-norm transformer classifier
  data        synthetic classification tasks and CSV ingestion
  training    baseline SGD, quantization-aware fine-tuning, direct quantization
  reporting   attention KL divergence and artifact emission
  cli         command line entry points
"""

__version__ = "0.1.0"
