"""Seeded synthetic greenhouse-like scenes and simulated source-model predictions.

Scenes are Ground background with Artificial_object rectangles and Plant
ellipses drawn on top, colored from per-class Gaussians. Each simulated
source renders the ground truth in its own taxonomy, resamples every pixel
from a per-class confusion row, then overwrites a few random disks with
random source classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .rng import Stream, derive_seed
from .taxonomy import Config, Taxonomy, load_config
from .tensor_io import write_image, write_labelmap

PLANT, ARTIFICIAL, GROUND, OTHER = 0, 1, 2, 3
TEST_INDEX_BASE = 1 << 20

_TAG_SCENE = 0x5CE9E
_TAG_SOURCE = 0x50C5


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    plant_blobs: tuple[int, int] = (2, 5)
    artificial_blobs: tuple[int, int] = (1, 3)
    plant_radius: tuple[int, int] = (4, 12)
    artificial_size: tuple[int, int] = (8, 24)
    # (R, G, B) means per target class id; Other never appears in scenes
    color_mean: tuple = ((60.0, 140.0, 50.0), (165.0, 160.0, 170.0), (120.0, 90.0, 60.0))
    color_std: tuple = (25.0, 25.0, 25.0)
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.plant_blobs, self.artificial_blobs):
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid blob count range ({lo}, {hi})")
        for mean in self.color_mean:
            if any(not 0 <= c <= 255 for c in mean):
                raise ValueError(f"color mean {mean} outside [0, 255]")


@dataclass(frozen=True)
class SourceSimSpec:
    """A simulated source model.

    ``representative_map`` sends each target class id to the source class it
    renders as; ``confusion[s]`` is the distribution of the source's
    prediction for a pixel rendered as ``s``.
    """

    taxonomy: str
    representative_map: dict
    confusion: np.ndarray
    blob_count: int = 3
    blob_radius: tuple[int, int] = (3, 8)
    seed_offset: int = 0
    short_name: str = ""

    def __post_init__(self):
        conf = np.asarray(self.confusion, dtype=np.float64)
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
            raise ValueError(f"confusion must be square, got {conf.shape}")
        if np.any(conf < 0) or np.any(np.abs(conf.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("confusion rows must be non-negative and sum to 1")
        for t, s in self.representative_map.items():
            if not 0 <= s < conf.shape[0]:
                raise ValueError(f"representative class {s} for target {t} is not a source id")
        object.__setattr__(self, "confusion", conf)


def gen_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (rgb image, target-space ground truth) for scene ``index``."""
    w, h = spec.width, spec.height
    if w <= 0 or h <= 0:
        raise DataError(f"zero-area canvas {w}x{h}")
    rng = Stream(derive_seed(spec.seed, index, _TAG_SCENE))
    gt = np.full((h, w), GROUND, dtype=np.uint8)

    n_rect = rng.integers(spec.artificial_blobs[0], spec.artificial_blobs[1] + 1)
    for _ in range(n_rect):
        rw = min(w, rng.integers(spec.artificial_size[0], spec.artificial_size[1] + 1))
        rh = min(h, rng.integers(spec.artificial_size[0], spec.artificial_size[1] + 1))
        x0 = rng.integers(0, w - rw + 1)
        y0 = rng.integers(0, h - rh + 1)
        gt[y0 : y0 + rh, x0 : x0 + rw] = ARTIFICIAL

    yy, xx = np.mgrid[0:h, 0:w]
    n_ell = rng.integers(spec.plant_blobs[0], spec.plant_blobs[1] + 1)
    for _ in range(n_ell):
        cx = rng.integers(0, w)
        cy = rng.integers(0, h)
        rx = rng.integers(spec.plant_radius[0], spec.plant_radius[1] + 1)
        ry = rng.integers(spec.plant_radius[0], spec.plant_radius[1] + 1)
        gt[((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0] = PLANT

    mean = np.asarray(spec.color_mean, dtype=np.float64)
    std = np.asarray(spec.color_std, dtype=np.float64)
    noise = rng.normal(h * w * 3).reshape(h, w, 3)
    rgb = mean[gt] + std[gt][..., None] * noise
    image = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return image, gt


def simulate_source(gt: np.ndarray, spec: SourceSimSpec, index: int, seed: int = 0) -> np.ndarray:
    """Noisy prediction of ``gt`` in the source's own label space."""
    gt = np.asarray(gt)
    k = spec.confusion.shape[0]
    lut = np.full(256, -1, dtype=np.int64)
    for t, s in spec.representative_map.items():
        lut[t] = s
    rendered = lut[gt]
    if (rendered < 0).any():
        missing = sorted(set(np.unique(gt[rendered < 0]).tolist()))
        raise DataError(f"source {spec.taxonomy}: representative_map has no entry for target classes {missing}")

    rng = Stream(derive_seed(seed, spec.seed_offset, index, _TAG_SOURCE))
    h, w = gt.shape
    u = rng.uniform(h * w).reshape(h, w)
    cdf = np.cumsum(spec.confusion, axis=1)
    pred = np.minimum(np.sum(u[..., None] >= cdf[rendered], axis=-1), k - 1)

    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(spec.blob_count):
        cx = rng.integers(0, w)
        cy = rng.integers(0, h)
        r = rng.integers(spec.blob_radius[0], spec.blob_radius[1] + 1)
        cls = rng.integers(0, k)
        pred[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = cls
    return pred.astype(np.uint8)


def confusion_from_rows(taxonomy: Taxonomy, rows: dict[str, dict[str, float]]) -> np.ndarray:
    """Identity confusion with the named rows replaced by the given distributions."""
    k = len(taxonomy)
    conf = np.eye(k)
    for src, dist in rows.items():
        row = np.zeros(k)
        for cls, p in dist.items():
            row[taxonomy.id_of(cls)] = p
        conf[taxonomy.id_of(src)] = row
    return conf


def default_sources(config: Config | None = None) -> list[SourceSimSpec]:
    """Three sources with complementary failure modes.

    * camvid: decent on Plant, confuses Ground with Artificial_object
    * cityscapes: clean Ground and Artificial_object, but calls Plant Ground
    * forest: accurate on Plant, calls Artificial_object Plant
    """
    config = config or load_config()
    cv, cs, fr = (config.taxonomy(n) for n in ("camvid", "cityscapes", "forest"))
    return [
        SourceSimSpec(
            "camvid",
            {PLANT: cv.id_of("Tree"), ARTIFICIAL: cv.id_of("Building"), GROUND: cv.id_of("Road"), OTHER: cv.id_of("Sky")},
            confusion_from_rows(cv, {
                "Tree": {"Tree": 0.65, "Building": 0.10, "Road": 0.10, "Sky": 0.15},
                "Building": {"Building": 0.45, "Pole": 0.05, "Car": 0.05, "Fence": 0.05,
                             "Tree": 0.15, "Road": 0.10, "Sky": 0.15},
                "Road": {"Road": 0.30, "Pavement": 0.05, "Building": 0.25, "Car": 0.10,
                         "Fence": 0.05, "Tree": 0.05, "Sky": 0.10, "Unlabeled": 0.10},
            }),
            seed_offset=1,
            short_name="CV",
        ),
        SourceSimSpec(
            "cityscapes",
            {PLANT: cs.id_of("Vegetation"), ARTIFICIAL: cs.id_of("Building"), GROUND: cs.id_of("Road"), OTHER: cs.id_of("Sky")},
            confusion_from_rows(cs, {
                "Vegetation": {"Vegetation": 0.30, "Terrain": 0.25, "Road": 0.15, "Building": 0.10,
                               "Sky": 0.10, "Person": 0.05, "Background": 0.05},
                "Building": {"Building": 0.60, "Wall": 0.05, "Car": 0.05, "Pole": 0.05,
                             "Road": 0.10, "Vegetation": 0.05, "Sky": 0.10},
                "Road": {"Road": 0.80, "Sidewalk": 0.10, "Building": 0.04, "Vegetation": 0.03, "Sky": 0.03},
            }),
            seed_offset=2,
            short_name="CS",
        ),
        SourceSimSpec(
            "forest",
            {PLANT: fr.id_of("Tree"), ARTIFICIAL: fr.id_of("Obstacle"), GROUND: fr.id_of("Road"), OTHER: fr.id_of("Sky")},
            confusion_from_rows(fr, {
                "Tree": {"Tree": 0.80, "Grass": 0.08, "Road": 0.06, "Obstacle": 0.03, "Sky": 0.03},
                "Obstacle": {"Obstacle": 0.30, "Tree": 0.30, "Grass": 0.12, "Road": 0.13, "Sky": 0.15},
                "Road": {"Road": 0.70, "Grass": 0.12, "Obstacle": 0.08, "Sky": 0.10},
            }),
            seed_offset=3,
            short_name="FR",
        ),
    ]


@dataclass
class ManifestEntry:
    split: str
    index: int
    image: str
    gt: str
    sources: dict[str, str] = field(default_factory=dict)


@dataclass
class Manifest:
    seed: int
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def files(self) -> list[str]:
        out = []
        for e in self.entries:
            out += [e.image, e.gt] + [e.sources[k] for k in sorted(e.sources)]
        return out

    def to_text(self) -> str:
        lines = [f"# seed={self.seed}"]
        for e in self.entries:
            srcs = " ".join(f"src:{k}={e.sources[k]}" for k in e.sources)
            lines.append(f"split={e.split} index={e.index} image={e.image} gt={e.gt} {srcs}".rstrip())
        return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> Manifest:
    seed = 0
    entries = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if tok.startswith("seed="):
                    seed = int(tok[5:])
            continue
        fields = {}
        srcs = {}
        for tok in line.split():
            key, sep, val = tok.partition("=")
            if not sep:
                raise DataError(f"manifest line {line_no}: malformed token {tok!r}")
            if key.startswith("src:"):
                srcs[key[4:]] = val
            else:
                fields[key] = val
        try:
            entries.append(ManifestEntry(
                fields.get("split", "train"), int(fields.get("index", len(entries))),
                fields["image"], fields["gt"], srcs,
            ))
        except KeyError as exc:
            raise DataError(f"manifest line {line_no}: missing {exc.args[0]}") from None
    return Manifest(seed, entries)


def gen_dataset(
    scene: SceneSpec,
    sources: Sequence[SourceSimSpec],
    n_train: int,
    n_test: int,
    out_dir,
) -> Manifest:
    """Write images, ground truth and per-source predictions plus ``manifest.txt``.

    Layout under ``out_dir``: ``<split>/images/NNNN.ppm``, ``<split>/gt/NNNN.pgm``
    and ``<split>/sources/<taxonomy>/NNNN.pgm`` for split in train/test.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("train and test counts must be >= 1")
    out_dir = Path(out_dir)
    entries = []
    for split, count, base in (("train", n_train, 0), ("test", n_test, TEST_INDEX_BASE)):
        try:
            for sub in ["images", "gt"] + [f"sources/{s.taxonomy}" for s in sources]:
                (out_dir / split / sub).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
        for i in range(count):
            index = base + i
            image, gt = gen_scene(scene, index)
            entry = ManifestEntry(split, index, f"{split}/images/{i:04d}.ppm", f"{split}/gt/{i:04d}.pgm")
            write_image(image, out_dir / entry.image)
            write_labelmap(gt, out_dir / entry.gt)
            for src in sources:
                rel = f"{split}/sources/{src.taxonomy}/{i:04d}.pgm"
                write_labelmap(simulate_source(gt, src, index, seed=scene.seed), out_dir / rel)
                entry.sources[src.taxonomy] = rel
            entries.append(entry)
    manifest = Manifest(scene.seed, entries)
    (out_dir / "manifest.txt").write_text(manifest.to_text(), encoding="utf-8")
    return manifest
