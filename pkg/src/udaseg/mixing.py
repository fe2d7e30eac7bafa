"""ClassMix and prior-guided ClassMix.

Masks follow the copy-paste convention: 1 takes the source pixel, 0 keeps
the target pixel.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .taxonomy import ClassTaxonomy, expand_with_related


@dataclass
class MixMask:
    mask: np.ndarray  # H x W uint8 in {0, 1}
    selected_classes: List[int]


def present_classes(label: np.ndarray, ignore_id: int) -> List[int]:
    return [int(c) for c in np.unique(label) if c != ignore_id]


def select_classes(y_s: np.ndarray, fraction: float, rng: np.random.Generator,
                   ignore_id: int = 255) -> List[int]:
    """Draw ceil(fraction * #present) distinct classes uniformly from those in ``y_s``."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    present = present_classes(y_s, ignore_id)
    if not present:
        return []
    k = math.ceil(fraction * len(present))
    chosen = rng.choice(len(present), size=k, replace=False)
    return sorted(present[i] for i in chosen)


def prior_guided_select(y_s: np.ndarray, taxonomy: ClassTaxonomy, fraction: float,
                        rng: np.random.Generator) -> List[int]:
    """Base ClassMix selection widened by classes related through active coarse groups.

    Related classes are only added when they occur in ``y_s``.
    """
    base = select_classes(y_s, fraction, rng, taxonomy.ignore_id)
    present = set(present_classes(y_s, taxonomy.ignore_id))
    return sorted(expand_with_related(base, taxonomy) & present)


def build_mix_mask(y_s: np.ndarray, classes: Sequence[int], ignore_id: int = 255) -> MixMask:
    classes = [int(c) for c in classes if c != ignore_id]
    mask = np.isin(y_s, classes) & (y_s != ignore_id)
    return MixMask(mask.astype(np.uint8), list(classes))


def apply_mix(x_s: np.ndarray, y_s: np.ndarray, x_t: np.ndarray, y_t: np.ndarray,
              m: MixMask) -> Tuple[np.ndarray, np.ndarray]:
    """Paste masked source pixels (image and label alike) over the target pair."""
    mask = m.mask.astype(bool)
    hw = mask.shape
    for name, arr in (("x_s", x_s), ("y_s", y_s), ("x_t", x_t), ("y_t", y_t)):
        if arr.shape[:2] != hw:
            raise ValueError(f"{name} has spatial size {arr.shape[:2]}, mask has {hw}")
    x_mix = np.where(mask[..., None], x_s, x_t) if x_s.ndim == 3 else np.where(mask, x_s, x_t)
    y_mix = np.where(mask, y_s, y_t)
    return x_mix, y_mix


def dump_mix_strip(path, x_s, x_t, x_mix, m: MixMask):
    """Save source | target | mixed | mask side by side as a PNG."""
    from PIL import Image

    mask_rgb = np.repeat(m.mask[..., None].astype(np.float32), 3, axis=2)
    strip = np.concatenate([x_s, x_t, x_mix, mask_rgb], axis=1)
    img = np.clip(np.rint(strip * 255), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, "RGB").save(path)
