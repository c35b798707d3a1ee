"""Inter-resolution knowledge distillation with Grad-CAM attention matching."""

__version__ = "0.1.0"
