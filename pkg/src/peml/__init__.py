"""Joint LoRA fine-tuning and differentiable prefix-architecture search on a numpy toy transformer."""

__version__ = "0.1.0"
