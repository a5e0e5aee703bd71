"""
Synthetic shapes dataset, class splits and N-way K-shot episode sampling.

Every class is a (shape, hue band, texture) triple; position, size,
rotation, exact hue and background noise are per-image nuisances drawn
from a (seed, class, index) substream, so regenerating from the same spec
gives bit-identical pixels.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageColor, ImageDraw

from archive import read_archive, write_archive
from numerics import EFSLError, RngState
from schemas import EpisodeSpec, SyntheticDatasetSpec

logger = logging.getLogger(__name__)

DATASET_MAGIC = b'EFSLDATA'

SHAPES = ('circle', 'square', 'triangle', 'cross', 'ring')
HUE_BANDS = 8
TEXTURE_FREQS = (0.0, 2.0, 4.0, 6.0)  # stripe periods across the rendered image
MAX_CLASSES = len(SHAPES) * HUE_BANDS * len(TEXTURE_FREQS)


class SamplingError(EFSLError):
    """A split cannot supply the requested episode"""


class SplitError(EFSLError):
    """Class split leaves one side unable to form an N-way episode"""


# ============================================================
# CLASS FACTORS AND RENDERING
# ============================================================

@dataclass(frozen=True)
class ClassFactors:
    shape: str
    hue_band: int
    texture: int


def class_factors(class_id: int) -> ClassFactors:
    """Injective over 0..159: shape cycles fastest, then hue band, then texture offset."""
    if not 0 <= class_id < MAX_CLASSES:
        raise ValueError(f"class id {class_id} outside 0..{MAX_CLASSES - 1}")
    return ClassFactors(
        shape=SHAPES[class_id % len(SHAPES)],
        hue_band=(class_id // len(SHAPES)) % HUE_BANDS,
        texture=(class_id // (len(SHAPES) * HUE_BANDS) + class_id) % len(TEXTURE_FREQS),
    )


def _rotate(points, cx: float, cy: float, angle: float) -> list[tuple[float, float]]:
    c, s = math.cos(angle), math.sin(angle)
    return [(cx + x * c - y * s, cy + x * s + y * c) for x, y in points]


def _shape_mask(shape: str, size: int, cx: float, cy: float, radius: float, angle: float) -> np.ndarray:
    mask = Image.new('L', (size, size), 0)
    draw = ImageDraw.Draw(mask)
    r = radius
    if shape == 'circle':
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif shape == 'ring':
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=255, width=max(1, int(round(r * 0.35))))
    elif shape == 'square':
        corners = [(-r, -r), (r, -r), (r, r), (-r, r)]
        draw.polygon(_rotate([(x * 0.8, y * 0.8) for x, y in corners], cx, cy, angle), fill=255)
    elif shape == 'triangle':
        corners = [(r * math.cos(a), r * math.sin(a)) for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
        draw.polygon(_rotate(corners, cx, cy, angle), fill=255)
    elif shape == 'cross':
        w = r * 0.35
        outline = [(-w, -r), (w, -r), (w, -w), (r, -w), (r, w), (w, w),
                   (w, r), (-w, r), (-w, w), (-r, w), (-r, -w), (-w, -w)]
        draw.polygon(_rotate(outline, cx, cy, angle), fill=255)
    else:
        raise ValueError(f"unknown shape {shape}")
    return np.asarray(mask, dtype=np.float32) / 255.0


def render_image(spec: SyntheticDatasetSpec, class_id: int, index: int) -> np.ndarray:
    """One [3, S, S] float32 image in [0, 1], rendered at render_size and center-cropped."""
    factors = class_factors(class_id)
    gen = RngState(spec.seed).child(f"image:{class_id}:{index}").generator()
    size = spec.render_size

    cx = size / 2 + gen.uniform(-1, 1) * spec.position_jitter * size
    cy = size / 2 + gen.uniform(-1, 1) * spec.position_jitter * size
    radius = 0.28 * size * (1.0 + gen.uniform(-1, 1) * spec.scale_jitter)
    angle = gen.uniform(0, 2 * math.pi)
    hue = (factors.hue_band + 0.5) * (360.0 / HUE_BANDS) + gen.uniform(-8, 8)
    noise = gen.uniform(0, spec.noise_level, size=(3, size, size))

    mask = _shape_mask(factors.shape, size, cx, cy, radius, angle)
    rgb = np.array(ImageColor.getrgb(f"hsv({int(hue) % 360},90%,95%)"), dtype=np.float64) / 255.0

    freq = TEXTURE_FREQS[factors.texture]
    ys, xs = np.mgrid[0:size, 0:size]
    along = (xs * math.cos(angle) + ys * math.sin(angle)) / size
    texture = 0.6 + 0.4 * np.cos(2 * math.pi * freq * along) if freq else np.ones((size, size))

    fg = rgb[:, None, None] * texture[None]
    image = noise * (1.0 - mask) + fg * mask
    off = (size - spec.image_size) // 2
    crop = image[:, off:off + spec.image_size, off:off + spec.image_size]
    return np.clip(crop, 0.0, 1.0).astype(np.float32)


# ============================================================
# DATASET
# ============================================================

@dataclass
class SyntheticDataset:
    """Images stored class-major: class c occupies rows class_index[c, 0] .. + class_index[c, 1]"""
    spec: SyntheticDatasetSpec
    images: np.ndarray
    labels: np.ndarray
    class_index: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.class_index.shape[0])

    def class_indices(self, class_id: int) -> np.ndarray:
        start, count = self.class_index[class_id]
        return np.arange(start, start + count)

    def tensors(self) -> dict[str, np.ndarray]:
        return {'images': self.images, 'labels': self.labels, 'class_index': self.class_index}


def build_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    n = spec.num_classes * spec.images_per_class
    images = np.empty((n, spec.channels, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.images_per_class)
    for c in range(spec.num_classes):
        for i in range(spec.images_per_class):
            images[c * spec.images_per_class + i] = render_image(spec, c, i)
        logger.debug(f"Rendered class {c} ({class_factors(c)})")
    starts = np.arange(spec.num_classes, dtype=np.int64) * spec.images_per_class
    class_index = np.stack([starts, np.full_like(starts, spec.images_per_class)], axis=1)
    return SyntheticDataset(spec, images, labels, class_index)


def _spec_metadata(spec: SyntheticDatasetSpec) -> dict[str, str]:
    return {f"spec.{key}": repr(value) if isinstance(value, float) else str(value)
            for key, value in spec.model_dump().items()}


def generate_dataset(spec: SyntheticDatasetSpec, path) -> tuple[SyntheticDataset, str]:
    """Render every image and write the container; returns the dataset and the file digest."""
    logger.info(f"Generating {spec.num_classes} classes x {spec.images_per_class} images "
                f"({spec.render_size}px -> {spec.image_size}px, seed {spec.seed})")
    dataset = build_dataset(spec)
    digest = write_archive(path, DATASET_MAGIC, _spec_metadata(spec), dataset.tensors())
    return dataset, digest


def load_dataset(path) -> SyntheticDataset:
    metadata, tensors = read_archive(path, DATASET_MAGIC)
    fields = {key[len('spec.'):]: value for key, value in metadata.items() if key.startswith('spec.')}
    spec = SyntheticDatasetSpec(**fields)
    images = tensors['images'].astype(np.float32, copy=False)
    expected = (spec.num_classes * spec.images_per_class, spec.channels, spec.image_size, spec.image_size)
    if images.shape != expected:
        raise SamplingError(f"{path}: images {images.shape} do not match spec {expected}")
    return SyntheticDataset(spec, images, tensors['labels'], tensors['class_index'])


# ============================================================
# SPLITS AND EPISODES
# ============================================================

@dataclass(frozen=True)
class ClassSplit:
    dataset: SyntheticDataset = field(repr=False)
    class_ids: tuple[int, ...]
    name: str = ''

    def __len__(self) -> int:
        return len(self.class_ids)

    def indices(self) -> np.ndarray:
        return np.concatenate([self.dataset.class_indices(c) for c in self.class_ids])


def split_classes(
    dataset: SyntheticDataset,
    base_fraction: float,
    rng: RngState,
    ways: int = 2,
) -> tuple[ClassSplit, ClassSplit]:
    """Class-disjoint (base, novel) partition; both sides must hold at least `ways` classes."""
    if not 0.0 < base_fraction < 1.0:
        raise SplitError(f"base_fraction must lie in (0, 1), got {base_fraction}")
    total = dataset.num_classes
    num_base = int(round(total * base_fraction))
    num_novel = total - num_base
    if num_base < ways or num_novel < ways:
        raise SplitError(
            f"{total} classes at base_fraction {base_fraction} give {num_base} base / "
            f"{num_novel} novel classes, need at least {ways} on each side"
        )
    order = rng.generator().permutation(total)
    base = tuple(sorted(int(c) for c in order[:num_base]))
    novel = tuple(sorted(int(c) for c in order[num_base:]))
    logger.info(f"Split {total} classes into {len(base)} base / {len(novel)} novel")
    return ClassSplit(dataset, base, 'base'), ClassSplit(dataset, novel, 'novel')


@dataclass
class Episode:
    """Support rows are class-major (class 0's K shots first); so are query rows"""
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: dict[int, int]
    support_indices: np.ndarray
    query_indices: np.ndarray

    @property
    def ways(self) -> int:
        return len(self.class_map)

    @property
    def classes(self) -> list[int]:
        """Original class ids in episode label order."""
        return sorted(self.class_map, key=self.class_map.get)

    def digest(self) -> str:
        h = hashlib.sha256()
        for array in (self.support_indices, self.support_labels, self.query_indices, self.query_labels):
            h.update(np.ascontiguousarray(array, dtype='<i8').tobytes())
        h.update(np.asarray(self.classes, dtype='<i8').tobytes())
        return h.hexdigest()


def sample_episode(split: ClassSplit, spec: EpisodeSpec, rng: RngState) -> Episode:
    ways, shots, queries = spec.ways, spec.shots, spec.queries
    if len(split) < ways:
        raise SamplingError(f"{split.name or 'split'} has {len(split)} classes, {ways}-way episode impossible")
    gen = rng.generator()
    chosen = gen.choice(np.asarray(split.class_ids), size=ways, replace=False)

    support, query = [], []
    for c in chosen:
        pool = split.dataset.class_indices(int(c))
        if len(pool) < shots + queries:
            raise SamplingError(f"class {int(c)} has {len(pool)} images, needs {shots + queries}")
        picked = gen.choice(pool, size=shots + queries, replace=False)
        support.append(picked[:shots])
        query.append(picked[shots:])
    support_idx = np.concatenate(support)
    query_idx = np.concatenate(query)
    images = split.dataset.images
    return Episode(
        support_images=images[support_idx],
        support_labels=np.repeat(np.arange(ways, dtype=np.int64), shots),
        query_images=images[query_idx],
        query_labels=np.repeat(np.arange(ways, dtype=np.int64), queries),
        class_map={int(c): i for i, c in enumerate(chosen)},
        support_indices=support_idx,
        query_indices=query_idx,
    )


def random_flip(images: np.ndarray, gen: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Horizontal flip per image with probability p (pretraining only)."""
    flip = gen.random(len(images)) < p
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out
