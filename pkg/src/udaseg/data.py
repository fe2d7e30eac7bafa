"""Image/label-map datasets, training-pair sampling and the synthetic
two-domain benchmark."""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .taxonomy import ClassTaxonomy

DATASET_FORMAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class SegSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: np.ndarray  # H x W int64
    id: str

    def validate(self, taxonomy: ClassTaxonomy):
        if self.image.shape[:2] != self.label.shape:
            raise DataError(
                f"{self.id}: image {self.image.shape[:2]} and label {self.label.shape} differ in size")
        bad = (self.label >= taxonomy.num_classes) & (self.label != taxonomy.ignore_id)
        if bad.any() or (self.label < 0).any():
            raise DataError(f"{self.id}: label values out of range: "
                            f"{sorted(set(np.unique(self.label[bad]).tolist()))}")


class Dataset:
    """Ordered, immutable collection of samples with lazy decoding.

    Images and labels are fetched through separate loaders so that label
    access can be counted; training code only ever reads target images.
    """

    def __init__(self, ids: Sequence[str], image_loader: Callable[[str], np.ndarray],
                 label_loader: Optional[Callable[[str], np.ndarray]],
                 taxonomy: ClassTaxonomy, domain_tag: str = "source"):
        if domain_tag not in ("source", "target"):
            raise DataError(f"domain_tag must be 'source' or 'target', got {domain_tag!r}")
        self.ids = list(ids)
        self._image_loader = image_loader
        self._label_loader = label_loader
        self.taxonomy = taxonomy
        self.domain_tag = domain_tag
        self.label_reads = 0

    def __len__(self):
        return len(self.ids)

    @property
    def size(self):
        return len(self.ids)

    @property
    def has_labels(self):
        return self._label_loader is not None

    def image(self, i: int) -> np.ndarray:
        return self._image_loader(self.ids[i])

    def label(self, i: int) -> np.ndarray:
        self.label_reads += 1
        if self._label_loader is None:
            h, w = self.image(i).shape[:2]
            return np.full((h, w), self.taxonomy.ignore_id, dtype=np.int64)
        return self._label_loader(self.ids[i])

    def __getitem__(self, i: int) -> SegSample:
        s = SegSample(self.image(i), self.label(i), self.ids[i])
        s.validate(self.taxonomy)
        return s

    def unlabeled(self, i: int) -> SegSample:
        """Sample with its label replaced by ``ignore_id`` everywhere (no label read)."""
        img = self.image(i)
        lbl = np.full(img.shape[:2], self.taxonomy.ignore_id, dtype=np.int64)
        return SegSample(img, lbl, self.ids[i])


def in_memory_dataset(samples: Sequence[SegSample], taxonomy: ClassTaxonomy,
                      domain_tag: str = "source") -> Dataset:
    by_id = {s.id: s for s in samples}
    if len(by_id) != len(samples):
        raise DataError("duplicate sample ids")
    for s in samples:
        s.validate(taxonomy)
    return Dataset(sorted(by_id), lambda k: by_id[k].image, lambda k: by_id[k].label,
                   taxonomy, domain_tag)


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<split>/images/<id>.png, <root>/<split>/labels/<id>.png

def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _read_label(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DataError(f"{path}: label map must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def load_dataset(root, split: str, taxonomy: ClassTaxonomy, domain_tag: Optional[str] = None,
                 labeled: Optional[bool] = None, validate: bool = True) -> Dataset:
    """Index ``<root>/<split>`` and return a lazily decoded dataset.

    ``labeled=None`` infers labels from the presence of a ``labels`` directory;
    ``labeled=True`` makes a missing label file an error. Unlabeled datasets
    yield labels filled with ``ignore_id``.
    """
    root = Path(root)
    split_dir = root / split
    img_dir, lbl_dir = split_dir / "images", split_dir / "labels"
    if not img_dir.is_dir():
        raise DataError(f"{img_dir} does not exist")
    meta = read_meta(root)
    if domain_tag is None:
        domain_tag = meta.get("domains", {}).get(split, "source")
    ids = sorted(p.stem for p in img_dir.glob("*.png"))
    if labeled is None:
        labeled = lbl_dir.is_dir()
    if labeled:
        missing = [i for i in ids if not (lbl_dir / f"{i}.png").exists()]
        if missing:
            raise DataError(f"missing label for {lbl_dir / (missing[0] + '.png')}")

    def image_loader(k):
        return _read_image(img_dir / f"{k}.png")

    def label_loader(k):
        path = lbl_dir / f"{k}.png"
        lbl = _read_label(path)
        bad = (lbl >= taxonomy.num_classes) & (lbl != taxonomy.ignore_id)
        if bad.any():
            raise DataError(f"{path}: label value {int(lbl[bad].max())} out of range "
                            f"(num_classes={taxonomy.num_classes}, ignore_id={taxonomy.ignore_id})")
        return lbl

    ds = Dataset(ids, image_loader, label_loader if labeled else None, taxonomy, domain_tag)
    if validate and labeled:
        for i in range(len(ds)):
            with Image.open(img_dir / f"{ds.ids[i]}.png") as a, \
                    Image.open(lbl_dir / f"{ds.ids[i]}.png") as b:
                if a.size != b.size:
                    raise DataError(f"{lbl_dir / ds.ids[i]}.png: size {b.size} "
                                    f"does not match image size {a.size}")
            label_loader(ds.ids[i])
    return ds


def read_meta(root) -> dict:
    path = Path(root) / "dataset.meta"
    if not path.exists():
        return {}
    meta = json.loads(path.read_text())
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format_version {meta.get('format_version')!r}")
    return meta


def save_dataset(ds: Dataset, root, split: str, with_labels: bool = True):
    """Write ``ds`` under ``<root>/<split>``. Label maps are stored losslessly as 8-bit PNG."""
    root = Path(root)
    img_dir = root / split / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    if with_labels:
        (root / split / "labels").mkdir(parents=True, exist_ok=True)
    for i, k in enumerate(ds.ids):
        img = np.clip(np.rint(ds.image(i) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(img_dir / f"{k}.png")
        if with_labels:
            lbl = ds.label(i)
            if lbl.max() > 255 or lbl.min() < 0:
                raise DataError(f"{k}: label values do not fit in 8 bits")
            Image.fromarray(lbl.astype(np.uint8), "L").save(root / split / "labels" / f"{k}.png")


def write_meta(root, taxonomy_ref: str, domains: dict, extra: Optional[dict] = None):
    meta = {"format_version": DATASET_FORMAT_VERSION, "taxonomy": str(taxonomy_ref),
            "domains": domains}
    if extra:
        meta.update(extra)
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / "dataset.meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# augmentation

def reflect_pad(sample: SegSample, min_h: int, min_w: int) -> SegSample:
    h, w = sample.label.shape
    ph, pw = max(0, min_h - h), max(0, min_w - w)
    if not ph and not pw:
        return sample
    pads = ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2))
    img = np.pad(sample.image, pads + ((0, 0),), mode="reflect")
    lbl = np.pad(sample.label, pads, mode="reflect")
    return SegSample(img, lbl, sample.id)


def crop_sample(sample: SegSample, top: int, left: int, size: int) -> SegSample:
    sl = (slice(top, top + size), slice(left, left + size))
    return SegSample(sample.image[sl].copy(), sample.label[sl].copy(), sample.id)


def hflip(sample: SegSample) -> SegSample:
    return SegSample(sample.image[:, ::-1].copy(), sample.label[:, ::-1].copy(), sample.id)


def random_crop_flip(sample: SegSample, crop: int, rng: np.random.Generator,
                     flip_prob: float = 0.5) -> Tuple[SegSample, dict]:
    """Random ``crop``x``crop`` window plus optional horizontal flip.

    Returns the augmented sample and the drawn transform parameters.
    """
    sample = reflect_pad(sample, crop, crop)
    h, w = sample.label.shape
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip = bool(rng.random() < flip_prob)
    out = crop_sample(sample, top, left, crop)
    if flip:
        out = hflip(out)
    return out, {"top": top, "left": left, "flip": flip}


def sample_training_pair(source: Dataset, target: Dataset, crop: int, rng: np.random.Generator,
                         flip_prob: float = 0.5) -> Tuple[SegSample, SegSample]:
    """One augmented labeled source sample and one augmented target sample.

    The target sample never touches the target labels; its label map is all
    ``ignore_id``.
    """
    if len(source) == 0 or len(target) == 0:
        raise DataError("cannot sample from an empty dataset")
    i = int(rng.integers(len(source)))
    j = int(rng.integers(len(target)))
    src, _ = random_crop_flip(source[i], crop, rng, flip_prob)
    tgt, _ = random_crop_flip(target.unlabeled(j), crop, rng, flip_prob)
    return src, tgt


# ---------------------------------------------------------------------------
# synthetic benchmark

# toy class ids, in the order of the shipped toy taxonomy
ROAD, SKY, BUILDING, WALL, VEGETATION, TERRAIN, RIDER, BICYCLE = range(8)

DEFAULT_PALETTE = (
    (0.38, 0.38, 0.40),  # road
    (0.70, 0.82, 0.95),  # sky
    (0.62, 0.36, 0.28),  # building
    (0.88, 0.84, 0.66),  # wall
    (0.14, 0.36, 0.14),  # vegetation
    (0.66, 0.60, 0.36),  # terrain
    (0.92, 0.22, 0.22),  # rider
    (0.18, 0.20, 0.58),  # bicycle
)


@dataclass
class ToyDomainSpec:
    canvas: int = 128
    num_shapes: int = 6
    palette: Tuple[Tuple[float, float, float], ...] = DEFAULT_PALETTE
    # default shift is dominated by sensor-like noise plus a mild color cast:
    # a from-scratch encoder keys on color, and a large hue rotation makes its
    # target errors confident and systematic, which self-training cannot undo
    hue_deg: float = 10.0
    # per-image hue rotation is uniform in hue_deg +/- hue_spread_deg
    hue_spread_deg: float = 0.0
    noise_sigma: float = 0.15
    brightness: float = 0.85
    seed: int = 7

    def validate(self):
        if self.canvas < 64:
            raise DataError(f"canvas must be >= 64, got {self.canvas}")
        if self.num_shapes < 1:
            raise DataError("num_shapes must be >= 1")
        if len(self.palette) != 8:
            raise DataError("palette needs one color per toy class (8)")
        for v in (self.hue_deg, self.hue_spread_deg, self.noise_sigma, self.brightness):
            if not math.isfinite(v):
                raise DataError("shift parameters must be finite")
        if self.noise_sigma < 0 or self.brightness <= 0 or self.hue_spread_deg < 0:
            raise DataError("noise_sigma and hue_spread_deg must be >= 0, brightness > 0")

    def null_shift(self) -> "ToyDomainSpec":
        return ToyDomainSpec(self.canvas, self.num_shapes, self.palette, 0.0, 0.0, 0.0, 1.0,
                             self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["palette"] = [list(c) for c in self.palette]
        return d


def hue_rotation_matrix(deg: float) -> np.ndarray:
    """Linear RGB rotation about the gray axis by ``deg`` degrees."""
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


def apply_shift(image: np.ndarray, spec: ToyDomainSpec, rng: np.random.Generator) -> np.ndarray:
    out = image.astype(np.float64)
    hue = spec.hue_deg
    if spec.hue_spread_deg:
        hue += rng.uniform(-spec.hue_spread_deg, spec.hue_spread_deg)
    if hue:
        out = out @ hue_rotation_matrix(hue).T
    out = out * spec.brightness
    if spec.noise_sigma:
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _disc(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _texture(cls: int, yy, xx, rng) -> np.ndarray:
    """Per-class brightness modulation giving each class a color-free cue."""
    if cls == BUILDING:  # window grid
        return np.where(((yy % 8) < 4) & ((xx % 8) < 4), 0.7, 1.0)
    if cls == WALL:  # horizontal courses
        return np.where((yy % 4) == 0, 0.75, 1.0)
    if cls == ROAD:
        return np.ones_like(yy, dtype=np.float64)
    if cls == TERRAIN:  # diagonal stripes
        return np.where(((yy + xx) % 6) < 2, 0.8, 1.0)
    if cls == VEGETATION:  # speckle
        return 0.8 + 0.4 * rng.random(yy.shape)
    if cls == BICYCLE:
        return np.where((xx % 3) == 0, 0.8, 1.0)
    return np.ones_like(yy, dtype=np.float64)


def render_scene(spec: ToyDomainSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw one street-like scene; returns (image, label)."""
    n = spec.canvas
    yy, xx = np.mgrid[0:n, 0:n]
    label = np.full((n, n), ROAD, dtype=np.int64)
    horizon = int(rng.uniform(0.3, 0.5) * n)
    label[:horizon] = SKY

    # terrain strips along the road sides
    for side in (0, 1):
        if rng.random() < 0.7:
            width = rng.uniform(0.1, 0.3) * n
            slope = rng.uniform(0.2, 0.8)
            edge = width + slope * (yy - horizon)
            reg = (yy >= horizon) & ((xx < edge) if side == 0 else (xx > n - 1 - edge))
            label[reg] = TERRAIN

    shapes = rng.integers(max(1, spec.num_shapes - 2), spec.num_shapes + 3)
    for _ in range(shapes):
        kind = rng.choice(["building", "wall", "tree", "bush"], p=[0.35, 0.2, 0.3, 0.15])
        if kind == "building":
            w = rng.uniform(0.12, 0.3) * n
            h = rng.uniform(0.15, 0.4) * n
            x0 = rng.uniform(0, n - w)
            base = horizon + rng.uniform(0.0, 0.08) * n
            reg = (xx >= x0) & (xx < x0 + w) & (yy < base) & (yy >= base - h)
            label[reg] = BUILDING
        elif kind == "wall":
            w = rng.uniform(0.2, 0.45) * n
            h = rng.uniform(0.05, 0.1) * n
            x0 = rng.uniform(0, n - w)
            base = horizon + rng.uniform(0.03, 0.12) * n
            reg = (xx >= x0) & (xx < x0 + w) & (yy < base) & (yy >= base - h)
            label[reg] = WALL
        elif kind == "tree":
            cx = rng.uniform(0, n)
            r = rng.uniform(0.06, 0.12) * n
            cy = horizon - rng.uniform(0.0, 0.1) * n
            trunk = (abs(xx - cx) < max(1.5, r / 5)) & (yy >= cy) & (yy < horizon + 0.06 * n)
            label[trunk | _disc(yy, xx, cy, cx, r)] = VEGETATION
        else:
            cx = rng.uniform(0, n)
            cy = rng.uniform(horizon + 0.1 * n, n)
            r = rng.uniform(0.04, 0.08) * n
            label[_disc(yy, xx, cy, cx, r)] = VEGETATION

    # riders always sit on a bicycle
    for _ in range(rng.integers(0, 3)):
        s = rng.uniform(0.7, 1.3)
        cx = rng.uniform(0.15 * n, 0.85 * n)
        ground = rng.uniform(horizon + 0.2 * n, 0.95 * n)
        wr = 0.045 * n * s
        bike = (_disc(yy, xx, ground - wr, cx - 1.6 * wr, wr)
                | _disc(yy, xx, ground - wr, cx + 1.6 * wr, wr)
                | ((abs(yy - (ground - 1.6 * wr)) < 1.2) & (abs(xx - cx) < 1.6 * wr)))
        body_h = 0.12 * n * s
        body = ((abs(xx - cx) < 0.02 * n * s + 1) & (yy < ground - 1.6 * wr)
                & (yy >= ground - 1.6 * wr - body_h))
        head = _disc(yy, xx, ground - 1.6 * wr - body_h - 0.02 * n * s, cx, 0.025 * n * s + 0.5)
        label[bike] = BICYCLE
        label[body | head] = RIDER

    palette = np.asarray(spec.palette, dtype=np.float64)
    jitter = rng.uniform(-0.04, 0.04, size=palette.shape)
    image = np.empty((n, n, 3), dtype=np.float64)
    for c in range(len(palette)):
        m = label == c
        if m.any():
            tex = _texture(c, yy, xx, rng)[m]
            image[m] = (palette[c] + jitter[c])[None, :] * tex[:, None]
    image += rng.normal(0.0, 0.01, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def _toy_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def generate_toy_domains(spec: ToyDomainSpec, n_source: int, n_target: int,
                         taxonomy: ClassTaxonomy, n_target_val: int = 0):
    """Render source scenes and appearance-shifted target scenes.

    Both domains share the scene distribution; only target images get the
    hue rotation, brightness scaling and additive noise. Returns
    ``(source, target)`` or ``(source, target, target_val)`` when
    ``n_target_val > 0``.
    """
    spec.validate()
    if n_source < 1 or n_target < 1:
        raise DataError("n_source and n_target must be >= 1")
    src_rng, tgt_rng, val_rng, shift_rng = _toy_streams(spec.seed)

    def build(count, rng, prefix, shifted, tag):
        samples = []
        for i in range(count):
            img, lbl = render_scene(spec, rng)
            if shifted:
                img = apply_shift(img, spec, shift_rng)
            samples.append(SegSample(img, lbl, f"{prefix}_{i:05d}"))
        return in_memory_dataset(samples, taxonomy, tag)

    source = build(n_source, src_rng, "src", False, "source")
    target = build(n_target, tgt_rng, "tgt", True, "target")
    if n_target_val > 0:
        val = build(n_target_val, val_rng, "val", True, "target")
        return source, target, val
    return source, target


def channel_means(ds: Dataset, limit: Optional[int] = None) -> np.ndarray:
    n = len(ds) if limit is None else min(limit, len(ds))
    return np.stack([ds.image(i).reshape(-1, 3).mean(axis=0) for i in range(n)])


def class_channel_means(ds: Dataset, num_classes: int, limit: Optional[int] = None) -> np.ndarray:
    """Per-class mean RGB over the first ``limit`` images (NaN for absent classes).

    Reads labels, so it is a generator diagnostic, not something a training
    run may call on its target split.
    """
    n = len(ds) if limit is None else min(limit, len(ds))
    sums = np.zeros((num_classes, 3))
    counts = np.zeros(num_classes)
    for i in range(n):
        x, y = ds.image(i).reshape(-1, 3), ds.label(i).reshape(-1)
        keep = y < num_classes
        counts += np.bincount(y[keep], minlength=num_classes)
        for ch in range(3):
            sums[:, ch] += np.bincount(y[keep], weights=x[keep, ch], minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None]


def domain_gap(source: Dataset, target: Dataset, limit: int = 100) -> float:
    """Mean absolute per-channel color difference between domains, per class.

    Conditioning on the class separates the appearance shift from differences
    in scene layout (which classes cover how much of the canvas).
    """
    c = source.taxonomy.num_classes
    a = class_channel_means(source, c, limit)
    b = class_channel_means(target, c, limit)
    return float(np.nanmean(np.abs(a - b)))
