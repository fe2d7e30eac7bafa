"""Random patch masks for masked-image consistency training."""

from dataclasses import dataclass

import numpy as np


@dataclass
class PatchMask:
    mask: np.ndarray  # H x W float32, 1 = kept, 0 = masked out
    patch_size: int
    ratio: float
    grid: np.ndarray  # ceil(H/a) x ceil(W/a) uniform draws

    @property
    def masked_fraction(self) -> float:
        return float(1.0 - self.mask.mean())


def generate_patch_mask(h: int, w: int, patch_size: int, ratio: float,
                        rng: np.random.Generator) -> PatchMask:
    """Keep each ``patch_size`` square iff its uniform draw exceeds ``ratio``.

    When ``patch_size`` does not divide the image the grid is extended to
    cover it and the mask is cropped, so border patches are partial.
    """
    if patch_size <= 0:
        raise ValueError(f"patch size must be positive, got {patch_size}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    gh, gw = -(-h // patch_size), -(-w // patch_size)
    u = rng.random((gh, gw))
    keep = (u > ratio).astype(np.float32)
    mask = np.kron(keep, np.ones((patch_size, patch_size), dtype=np.float32))[:h, :w]
    return PatchMask(mask, patch_size, ratio, u)


def apply_mask(x_t: np.ndarray, pm: PatchMask) -> np.ndarray:
    """Zero out masked pixels of an H x W x C image."""
    if x_t.shape[:2] != pm.mask.shape:
        raise ValueError(f"image size {x_t.shape[:2]} != mask size {pm.mask.shape}")
    m = pm.mask[..., None] if x_t.ndim == 3 else pm.mask
    return (x_t * m).astype(x_t.dtype, copy=False)
