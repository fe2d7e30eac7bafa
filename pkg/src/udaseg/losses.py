"""Training objectives: pixel cross-entropy, pseudo-labelling, the pixel
contrastive loss and the combined objective."""

import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

COMPONENTS = ("l_src", "l_mix", "l_masked", "l_pix")
CONTRASTIVE_STAGES = frozenset({"source", "mix", "masked"})


class NumericError(FloatingPointError):
    pass


def _as_bchw(logits: torch.Tensor) -> torch.Tensor:
    if logits.dim() == 3:
        return logits.unsqueeze(0)
    if logits.dim() != 4:
        raise ValueError(f"expected C x H x W or B x C x H x W logits, got shape {tuple(logits.shape)}")
    return logits


def _as_label_tensor(label, device=None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(label) if not torch.is_tensor(label) else label,
                        dtype=torch.long, device=device)
    return t.unsqueeze(0) if t.dim() == 2 else t


def cross_entropy(logits: torch.Tensor, label, pixel_weight=None, ignore_id: int = 255,
                  return_valid: bool = False):
    """Mean over labelled pixels of ``-w * log softmax(logits)[label]``.

    ``pixel_weight`` may be a scalar or an H x W array. If every pixel is
    ignored the loss is a graph-connected zero and ``valid`` is 0.
    """
    logits = _as_bchw(logits)
    y = _as_label_tensor(label, logits.device)
    if y.shape != logits.shape[:1] + logits.shape[2:]:
        raise ValueError(f"label shape {tuple(y.shape)} does not match logits {tuple(logits.shape)}")
    valid = y != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        loss = logits.sum() * 0.0
        return (loss, 0) if return_valid else loss
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, torch.where(valid, y, 0).unsqueeze(1)).squeeze(1)
    if pixel_weight is not None:
        w = torch.as_tensor(pixel_weight, dtype=logits.dtype, device=logits.device)
        nll = nll * w
    loss = nll[valid].sum() / n_valid
    return (loss, n_valid) if return_valid else loss


@dataclass
class PseudoLabel:
    label: np.ndarray  # H x W int64
    confidence: float
    per_pixel_max_prob: np.ndarray


@torch.no_grad()
def pseudo_label(teacher_logits: torch.Tensor, threshold: float = 0.968) -> PseudoLabel:
    """Per-pixel argmax (ties go to the lowest class id) and the fraction of
    pixels whose top softmax probability reaches ``threshold``."""
    logits = teacher_logits
    if logits.dim() == 4:
        if logits.shape[0] != 1:
            raise ValueError("pseudo_label expects a single image")
        logits = logits[0]
    probs = torch.softmax(logits.double(), dim=0).cpu().numpy()
    label = np.argmax(probs, axis=0).astype(np.int64)
    pmax = probs.max(axis=0)
    confidence = float((pmax >= threshold).mean())
    return PseudoLabel(label, confidence, pmax)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    max_anchors_per_class: int = 128
    max_pixels_total: int = 1024
    stages: FrozenSet[str] = CONTRASTIVE_STAGES

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.max_anchors_per_class < 1 or self.max_pixels_total < 1:
            raise ValueError("sampling caps must be >= 1")
        unknown = set(self.stages) - CONTRASTIVE_STAGES
        if unknown:
            raise ValueError(f"unknown contrastive stages {sorted(unknown)}")


def downsample_labels(label: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample sampling each output cell at its centre."""
    h, w = label.shape
    oh, ow = size
    rows = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
    return label[np.ix_(rows, cols)]


def sample_pixels(label: np.ndarray, cfg: ContrastiveConfig, rng: np.random.Generator,
                  ignore_id: int = 255) -> np.ndarray:
    """Flat pixel indices: up to ``max_anchors_per_class`` per class, at most
    ``max_pixels_total`` overall, drawn uniformly without replacement."""
    flat = label.reshape(-1)
    picks = []
    for c in np.unique(flat):
        if c == ignore_id:
            continue
        idx = np.flatnonzero(flat == c)
        if len(idx) > cfg.max_anchors_per_class:
            idx = np.sort(rng.choice(idx, size=cfg.max_anchors_per_class, replace=False))
        picks.append(idx)
    if not picks:
        return np.zeros(0, dtype=np.int64)
    idx = np.concatenate(picks)
    if len(idx) > cfg.max_pixels_total:
        idx = np.sort(rng.choice(idx, size=cfg.max_pixels_total, replace=False))
    return idx


def pixel_contrastive(emb: torch.Tensor, classes, temperature: float, return_valid: bool = False):
    """Contrastive loss over an explicit set of N pixel embeddings (N x E).

    For anchor i and positive j (same class, j != i) the term is
    ``-log(exp(s_ij / T) / sum_{k != i} exp(s_ik / T))`` with cosine
    similarity s; the result is the mean over all positive pairs.
    """
    y = torch.as_tensor(np.asarray(classes), dtype=torch.long, device=emb.device)
    n = emb.shape[0]
    same = (y[:, None] == y[None, :])
    eye = torch.eye(n, dtype=torch.bool, device=emb.device)
    pos = same & ~eye
    n_pos = int(pos.sum())
    if n_pos == 0:
        loss = emb.sum() * 0.0
        return (loss, 0) if return_valid else loss
    z = emb / (emb.norm(dim=1, keepdim=True) + 1e-12)
    logits = (z @ z.T) / temperature
    logits = logits.masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    loss = -log_prob[pos].sum() / n_pos
    return (loss, n_pos) if return_valid else loss


def contrastive_loss(em: torch.Tensor, label: np.ndarray, cfg: ContrastiveConfig,
                     rng: np.random.Generator, ignore_id: int = 255, return_valid: bool = False):
    """Sampled pixel contrastive loss on an E x H'' x W'' embedding map.

    ``label`` must already live on the embedding grid (see ``downsample_labels``).
    """
    if em.dim() == 4:
        if em.shape[0] != 1:
            raise ValueError("contrastive_loss expects a single embedding map")
        em = em[0]
    e, h, w = em.shape
    label = np.asarray(label)
    if label.shape != (h, w):
        raise ValueError(f"label grid {label.shape} does not match embedding grid {(h, w)}")
    idx = sample_pixels(label, cfg, rng, ignore_id)
    flat = em.reshape(e, -1).T
    idx_t = torch.as_tensor(idx, dtype=torch.long, device=em.device)
    return pixel_contrastive(flat[idx_t], label.reshape(-1)[idx], cfg.temperature, return_valid)


@dataclass
class LossReport:
    l_src: float
    l_mix: float
    l_masked: float
    l_pix: float
    total: float
    lambda_pix: float = 0.0
    confidence: float = float("nan")
    lr: float = 0.0
    total_tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def as_dict(self) -> Dict[str, float]:
        return {"l_src": self.l_src, "l_mix": self.l_mix, "l_masked": self.l_masked,
                "l_pix": self.l_pix, "total": self.total}


def combine(losses: Dict[str, object], lambda_pix: float = 0.1) -> LossReport:
    """Sum the three segmentation terms plus ``lambda_pix`` times the contrastive term.

    Missing components count as zero. Tensor components are summed into
    ``total_tensor`` for backpropagation.
    """
    unknown = set(losses) - set(COMPONENTS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    values = {}
    for name in COMPONENTS:
        v = losses.get(name, 0.0)
        f = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(f):
            raise NumericError(f"loss component {name} is not finite ({f})")
        values[name] = f
    total = values["l_src"] + values["l_mix"] + values["l_masked"] + lambda_pix * values["l_pix"]
    tensor = None
    weights = {"l_src": 1.0, "l_mix": 1.0, "l_masked": 1.0, "l_pix": lambda_pix}
    for name in COMPONENTS:
        v = losses.get(name)
        if torch.is_tensor(v) and v.requires_grad and weights[name] != 0.0:
            term = v * weights[name] if weights[name] != 1.0 else v
            tensor = term if tensor is None else tensor + term
    return LossReport(**values, total=total, lambda_pix=lambda_pix, total_tensor=tensor)
