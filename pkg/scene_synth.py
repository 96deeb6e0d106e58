"""
Synthetic revisit sequences.

Every class owns one procedural texture family defined in ground (meter)
coordinates, so a frame rendered at a coarser ground sample distance really
shows more ground. Each frame then receives the nuisances a satellite revisit
brings: scale, sun-driven brightness, seasonal hue drift, registration jitter
and cloud blobs. Every nuisance is recorded in the frame metadata exactly as
applied.
"""

import colorsys
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm.auto import tqdm

from errors import ConfigError, DataValidationError, UsageError
from geodata import (FrameMetadata, ImageChip, SceneSequence, iter_sequence_dirs,
                     load_sequence, save_sequence, write_json, read_json)

logger = logging.getLogger(__name__)

TEXTURE_FAMILIES = ("stripes", "blobs", "grid", "gradient", "checker", "rings")
DATASET_MANIFEST = "dataset.json"
SPLITS = ("train", "val")
_EPOCH = datetime(2019, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SynthConfig:
    class_count: int = 6
    sequences_per_class: int = 20
    frames: int = 8
    chip_size: int = 64
    gsd_range: Tuple[float, float] = (0.4, 1.2)
    sun_elevation_range: Tuple[float, float] = (60.0, 85.0)
    off_nadir_range: Tuple[float, float] = (0.0, 25.0)
    brightness_coefficients: Tuple[float, float] = (0.7, 0.3)  # scale = a + b * sin(elevation)
    hue_drift_amplitude: float = 0.04                           # fraction of a hue turn
    jitter_px: int = 2
    cloud_probability: float = 0.25
    cloud_radius_range: Tuple[float, float] = (0.08, 0.2)       # fraction of chip size
    revisit_days_range: Tuple[int, int] = (15, 60)
    pixel_noise: float = 0.02
    val_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("gsd_range", "sun_elevation_range", "off_nadir_range",
                     "brightness_coefficients", "cloud_radius_range", "revisit_days_range"):
            value = tuple(getattr(self, name))
            if len(value) != 2:
                raise ConfigError(f"synth.{name} must have two entries, got {value}")
            object.__setattr__(self, name, value)
        if self.class_count < 2:
            raise ConfigError(f"synth.class_count must be >= 2, got {self.class_count}")
        if self.sequences_per_class < 1 or self.frames < 1 or self.chip_size < 1:
            raise ConfigError("synth.sequences_per_class, synth.frames and synth.chip_size must be positive")
        g_min, g_max = self.gsd_range
        if not 0 < g_min <= g_max:
            raise ConfigError(f"synth.gsd_range must satisfy 0 < g_min <= g_max, got {self.gsd_range}")
        if self.jitter_px < 0:
            raise ConfigError(f"synth.jitter_px must be >= 0, got {self.jitter_px}")
        if not 0 < self.sun_elevation_range[0] <= self.sun_elevation_range[1] <= 90:
            raise ConfigError(f"synth.sun_elevation_range must lie in (0, 90], got {self.sun_elevation_range}")
        if not 0 <= self.off_nadir_range[0] <= self.off_nadir_range[1] < 90:
            raise ConfigError(f"synth.off_nadir_range must lie in [0, 90), got {self.off_nadir_range}")
        if not 0 <= self.cloud_probability <= 1:
            raise ConfigError(f"synth.cloud_probability must lie in [0, 1], got {self.cloud_probability}")
        if not 1 <= self.revisit_days_range[0] <= self.revisit_days_range[1]:
            raise ConfigError(f"synth.revisit_days_range must be >= 1 day, got {self.revisit_days_range}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"synth.val_fraction must lie in [0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        return cls(**data)


# -- textures --------------------------------------------------------------

def _texture_params(family: str, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    theta = rng.uniform(0, math.pi)
    if family == "stripes":
        return {"theta": theta, "period": rng.uniform(6.0, 10.0), "phase": rng.uniform(0, 1)}
    if family == "blobs":
        return {"centers": rng.uniform(-60.0, 60.0, size=(14, 2)), "radii": rng.uniform(4.0, 9.0, size=14)}
    if family == "grid":
        return {"period": rng.uniform(12.0, 18.0), "width": rng.uniform(2.0, 3.0),
                "offset": rng.uniform(0, 10.0, size=2)}
    if family == "gradient":
        return {"theta": 2 * theta, "length": rng.uniform(50.0, 80.0)}
    if family == "checker":
        return {"period": rng.uniform(6.0, 10.0), "offset": rng.uniform(0, 10.0, size=2)}
    return {"period": rng.uniform(8.0, 12.0), "center": rng.uniform(-10.0, 10.0, size=2)}


def _texture(family: str, p: dict, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Pattern intensity in [0, 1] at ground coordinates (meters)."""
    if family == "stripes":
        u = xx * math.cos(p["theta"]) + yy * math.sin(p["theta"])
        t = 0.5 + 0.5 * np.sin(2 * math.pi * (u / p["period"] + p["phase"]))
    elif family == "blobs":
        d2 = (yy[..., None] - p["centers"][:, 0]) ** 2 + (xx[..., None] - p["centers"][:, 1]) ** 2
        t = np.clip(np.exp(-d2 / (2 * p["radii"] ** 2)).sum(axis=-1), 0, 1)
    elif family == "grid":
        on_x = np.mod(xx + p["offset"][1], p["period"]) < p["width"]
        on_y = np.mod(yy + p["offset"][0], p["period"]) < p["width"]
        t = (on_x | on_y).astype(np.float64)
    elif family == "gradient":
        u = xx * math.cos(p["theta"]) + yy * math.sin(p["theta"])
        t = np.clip(0.5 + u / p["length"], 0, 1)
    elif family == "checker":
        cells = np.floor((xx + p["offset"][1]) / p["period"]) + np.floor((yy + p["offset"][0]) / p["period"])
        t = np.mod(cells, 2)
    else:
        r = np.hypot(yy - p["center"][0], xx - p["center"][1])
        t = 0.5 + 0.5 * np.cos(2 * math.pi * r / p["period"])
    return np.broadcast_to(t, np.broadcast_shapes(yy.shape, xx.shape))


def _palette(class_index: int, class_count: int, hue_shift: float) -> Tuple[np.ndarray, np.ndarray]:
    hue = class_index / class_count + hue_shift
    dark = colorsys.hsv_to_rgb(hue % 1.0, 0.55, 0.35)
    light = colorsys.hsv_to_rgb((hue + 0.06) % 1.0, 0.45, 0.90)
    return np.array(dark), np.array(light)


def _cloud_mask(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    size = config.chip_size
    if rng.random() >= config.cloud_probability:
        return np.zeros((size, size), dtype=bool)
    cy, cx = rng.uniform(0, size, size=2)
    radius = rng.uniform(*config.cloud_radius_range) * size
    rows, cols = np.mgrid[0:size, 0:size]
    return (rows + 0.5 - cy) ** 2 + (cols + 0.5 - cx) ** 2 <= radius ** 2


# -- generation ------------------------------------------------------------

def scene_seed(master_seed: int, class_index: int, index: int) -> int:
    """Per-scene seed, independent of generation order."""
    return int(np.random.SeedSequence([master_seed, class_index, index]).generate_state(1)[0])


def generate_scene(class_index: int, seed: int, config: SynthConfig,
                   scene_id: Optional[str] = None) -> SceneSequence:
    if not 0 <= class_index < config.class_count:
        raise ConfigError(f"class {class_index} outside 0..{config.class_count - 1}")
    rng = np.random.default_rng(seed)
    family = TEXTURE_FAMILIES[class_index % len(TEXTURE_FAMILIES)]
    params = _texture_params(family, rng)
    size, bound = config.chip_size, config.jitter_px
    idx = np.arange(size) - size / 2 + 0.5
    a, b = config.brightness_coefficients

    timestamp = _EPOCH + timedelta(days=int(rng.integers(0, 365)), minutes=int(rng.integers(0, 24 * 60)))
    frames: List[ImageChip] = []
    for i in range(config.frames):
        if i:
            timestamp += timedelta(days=int(rng.integers(config.revisit_days_range[0],
                                                           config.revisit_days_range[1] + 1)))
        gsd = float(rng.uniform(*config.gsd_range))
        elevation = float(rng.uniform(*config.sun_elevation_range))
        off_nadir = float(rng.uniform(*config.off_nadir_range))
        offset = tuple(int(v) for v in rng.integers(-bound, bound + 1, size=2))

        season = timestamp.timetuple().tm_yday / 365.25
        dark, light = _palette(class_index, config.class_count,
                               config.hue_drift_amplitude * math.sin(2 * math.pi * season))
        yy = ((idx - offset[0]) * gsd)[:, None]
        xx = ((idx - offset[1]) * gsd)[None, :]
        t = _texture(family, params, yy, xx)[..., None]
        pixels = (dark * (1 - t) + light * t) * (a + b * math.sin(math.radians(elevation)))
        pixels = pixels + rng.normal(0.0, config.pixel_noise, size=pixels.shape)

        clouds = _cloud_mask(rng, config)
        pixels[clouds] = 0.95
        metadata = FrameMetadata(
            gsd_m_per_px=gsd,
            off_nadir_deg=off_nadir,
            cloud_cover_frac=float(clouds.mean()),
            sun_elevation_deg=elevation,
            timestamp=timestamp,
            bbox=(0, 0, size, size),
            registration_offset_px=offset,
        )
        frames.append(ImageChip(np.clip(pixels, 0, 1).astype(np.float32), metadata))

    return SceneSequence(scene_id or f"class{class_index:02d}_seed{seed}", class_index, tuple(frames))


@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    class_index: int
    seed: int
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    config: SynthConfig
    scenes: Tuple[SceneEntry, ...] = field(default_factory=tuple)

    def split(self, name: str) -> List[SceneEntry]:
        return [s for s in self.scenes if s.split == name]

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "scenes": [asdict(s) for s in self.scenes]}


def plan_dataset(config: SynthConfig) -> DatasetManifest:
    """Scene ids, seeds and the by-scene train/val split."""
    split_rng = np.random.default_rng([config.seed, config.class_count, config.sequences_per_class])
    per_class = config.sequences_per_class
    n_val = int(round(config.val_fraction * per_class)) if per_class > 1 else 0
    entries = []
    for c in range(config.class_count):
        val = set(int(i) for i in split_rng.choice(per_class, size=n_val, replace=False))
        for i in range(per_class):
            entries.append(SceneEntry(f"class{c:02d}_scene{i:03d}", c, scene_seed(config.seed, c, i),
                                      "val" if i in val else "train"))
    return DatasetManifest(config, tuple(entries))


def _generate_and_save(task) -> str:
    entry, config, root = task
    seq = generate_scene(entry.class_index, entry.seed, config, scene_id=entry.scene_id)
    save_sequence(seq, Path(root) / entry.split / entry.scene_id)
    return entry.scene_id


def generate_dataset(config: SynthConfig, out, force: bool = False, jobs: int = 1,
                     progress: bool = False) -> DatasetManifest:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        for name in SPLITS:
            shutil.rmtree(out / name, ignore_errors=True)
        (out / DATASET_MANIFEST).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)

    manifest = plan_dataset(config)
    tasks = [(entry, config, str(out)) for entry in manifest.scenes]
    logger.info("generating %d scenes (%d classes x %d) into %s",
                len(tasks), config.class_count, config.sequences_per_class, out)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for _ in tqdm(ex.map(_generate_and_save, tasks), total=len(tasks), disable=not progress):
                pass
    else:
        for task in tqdm(tasks, disable=not progress):
            _generate_and_save(task)

    write_json(manifest.to_dict(), out / DATASET_MANIFEST)
    logger.info("wrote %d train and %d val scenes", len(manifest.split("train")), len(manifest.split("val")))
    return manifest


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / DATASET_MANIFEST
    data = read_json(path)
    try:
        return DatasetManifest(SynthConfig.from_dict(data["config"]),
                               tuple(SceneEntry(**s) for s in data["scenes"]))
    except (KeyError, TypeError, ConfigError) as exc:
        raise DataValidationError(f"{path}: malformed dataset manifest: {exc}") from exc


def load_split(root, split: str) -> List[SceneSequence]:
    """All sequences of one split, in scene-id order."""
    if split not in SPLITS:
        raise UsageError(f"unknown split {split!r}, expected one of {SPLITS}")
    directory = Path(root) / split
    if not directory.is_dir():
        raise DataValidationError(f"{directory}: split directory is missing")
    return [load_sequence(d) for d in iter_sequence_dirs(directory)]
