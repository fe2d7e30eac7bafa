"""Network contracts (feature extractor, segmentation head, projection head),
the desk-scale backbone, EMA teacher bookkeeping and checkpoints."""

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1
NORM_EPS = 1e-12


class Encoder(nn.Module):
    """Adapter contract for feature extractors.

    Subclasses map ``B x 3 x H x W`` images to ``B x out_channels x H/stride x W/stride``.
    An external pretrained backbone only needs to honor ``stride`` and
    ``out_channels`` to plug in.
    """

    stride: int = 1
    out_channels: int = 0


class TinyEncoder(Encoder):
    """Four conv stages, two of them strided: output stride 4."""

    stride = 4

    def __init__(self, widths=(16, 32, 32, 64)):
        super().__init__()
        w1, w2, w3, w4 = widths
        self.stages = nn.Sequential(
            nn.Conv2d(3, w1, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w2, w3, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
            nn.Conv2d(w3, w4, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w4, w4, 3, padding=2, dilation=2), nn.ReLU(inplace=True),
        )
        self.out_channels = w4

    def forward(self, x):
        return self.stages(x)


class ProjectionHead(nn.Module):
    def __init__(self, in_channels: int, embed_dim: int = 32, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, embed_dim, 1),
        )

    def forward(self, f):
        return self.net(f)


class SegModel(nn.Module):
    def __init__(self, encoder: Encoder, num_classes: int, embed_dim: Optional[int] = 32):
        super().__init__()
        self.encoder = encoder
        self.cls_head = nn.Conv2d(encoder.out_channels, num_classes, 1)
        self.proj_head = ProjectionHead(encoder.out_channels, embed_dim) if embed_dim else None

    @property
    def stride(self):
        return self.encoder.stride

    def forward(self, x):
        return predict_logits(self, x)


@dataclass
class FeatureMap:
    features: torch.Tensor  # B x D x H' x W'
    stride: int
    input_size: Tuple[int, int]  # (H, W) before stride padding


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")


def forward_features(model: SegModel, x: torch.Tensor) -> FeatureMap:
    """Run the feature extractor; inputs are reflect-padded to a multiple of the stride."""
    _check_finite(x, "input image")
    h, w = x.shape[-2:]
    s = model.stride
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return FeatureMap(model.encoder(x), s, (h, w))


def segment(model: SegModel, f: FeatureMap, out_size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Class scores bilinearly upsampled to ``out_size`` (default: the input size)."""
    logits = model.cls_head(f.features)
    if out_size is None:
        out_size = f.input_size
    out_size = tuple(out_size)
    if tuple(logits.shape[-2:]) == out_size:
        return logits
    fh, fw = logits.shape[-2:]
    ih, iw = f.input_size
    if out_size == (ih, iw) and (fh * f.stride, fw * f.stride) != (ih, iw):
        # input was padded; upsample to the padded extent then crop
        full = F.interpolate(logits, size=(fh * f.stride, fw * f.stride),
                             mode="bilinear", align_corners=False)
        return full[..., :ih, :iw]
    return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


def normalize_embeddings(e: torch.Tensor, dim: int = 1) -> torch.Tensor:
    # eps added to the norm so all-zero vectors map to zero instead of NaN
    return e / (e.norm(dim=dim, keepdim=True) + NORM_EPS)


def project(model: SegModel, f: FeatureMap) -> torch.Tensor:
    """Unit-norm per-pixel embeddings, ``B x E x H' x W'``."""
    if model.proj_head is None:
        raise ValueError("model has no projection head")
    return normalize_embeddings(model.proj_head(f.features), dim=1)


def predict_logits(model: SegModel, x: torch.Tensor) -> torch.Tensor:
    return segment(model, forward_features(model, x))


def build_model(architecture_id: str, num_classes: int, embed_dim: Optional[int] = 32,
                seed: int = 0) -> SegModel:
    if architecture_id != "tiny-cnn-s4":
        raise ValueError(f"unknown architecture {architecture_id!r}")
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = SegModel(TinyEncoder(), num_classes, embed_dim)
    finally:
        torch.random.set_rng_state(state)
    return model


class ModelBundle:
    """Student with all three heads plus an EMA teacher (extractor and segmentation head)."""

    def __init__(self, student: SegModel, architecture_id: str = "tiny-cnn-s4"):
        self.architecture_id = architecture_id
        self.student = student
        teacher = copy.deepcopy(student)
        teacher.proj_head = None
        for p in teacher.parameters():
            p.requires_grad_(False)
        self.teacher = teacher.eval()

    @classmethod
    def create(cls, architecture_id: str, num_classes: int, embed_dim: int = 32, seed: int = 0):
        return cls(build_model(architecture_id, num_classes, embed_dim, seed), architecture_id)

    def shared_parameter_names(self):
        return [n for n, _ in self.teacher.named_parameters()]

    def teacher_grad_touches(self) -> int:
        return sum(p.grad is not None for p in self.teacher.parameters())


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float):
    """teacher <- alpha * teacher + (1 - alpha) * student, for every shared parameter."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"EMA alpha must be in [0, 1), got {alpha}")
    s_params = dict(student.named_parameters())
    for name, t in teacher.named_parameters():
        if name not in s_params:
            raise ValueError(f"student has no parameter {name!r}")
        s = s_params[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if alpha == 0.0:
            t.copy_(s)
        else:
            # t + (1 - alpha)(s - t): algebraically the same, and exact when s == t
            t.add_(s - t, alpha=1.0 - alpha)


def save_checkpoint(path, bundle: ModelBundle, optimizer_state: Optional[dict], iteration: int,
                    rng_states: Optional[dict] = None, extra: Optional[dict] = None):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture_id": bundle.architecture_id,
        "num_classes": bundle.student.cls_head.out_channels,
        "embed_dim": (bundle.student.proj_head.net[-1].out_channels
                      if bundle.student.proj_head is not None else None),
        "student": bundle.student.state_dict(),
        "teacher": bundle.teacher.state_dict(),
        "optimizer": optimizer_state,
        "iteration": iteration,
        "rng_states": rng_states or {},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[ModelBundle, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version!r}")
    student = build_model(payload["architecture_id"], payload["num_classes"], payload["embed_dim"])
    student.load_state_dict(payload["student"])
    bundle = ModelBundle(student, payload["architecture_id"])
    bundle.teacher.load_state_dict(payload["teacher"])
    return bundle, payload
