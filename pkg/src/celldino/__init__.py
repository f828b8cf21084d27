"""Desk-scale self-distillation pipeline for multi-channel microscopy images.

Subpackages by stage: ``tensor``/``optim`` (numerics), ``vit`` (backbone),
``dino`` (self-supervised pretraining), ``adapters`` (channel handling),
``embed`` (feature extraction), ``head`` (supervised classifier),
``evaluate`` (metrics and cross-validation), ``data`` (formats and the
synthetic generator), ``cli`` (command-line entry point).
"""

__version__ = "0.1.0"
