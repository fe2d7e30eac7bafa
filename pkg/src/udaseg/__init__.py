"""Domain-adaptive semantic segmentation with an EMA teacher, prior-guided
class mixing, masked-image consistency and pixel contrastive learning."""

__version__ = "0.1.0"
