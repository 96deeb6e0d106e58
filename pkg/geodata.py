"""
Temporal sequences of geolocated image chips: data model, on-disk format,
admissibility filtering and bounding-box preprocessing.

On disk a scene is a directory holding ``scene.json`` (scene id, label, frame
order), one binary PPM per frame and one JSON sidecar per frame carrying the
FrameMetadata fields. See ``schemas/geodata_schema.json``.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import DataValidationError

logger = logging.getLogger(__name__)

SCENE_MANIFEST = "scene.json"
METADATA_FIELDS = (
    "gsd_m_per_px",
    "off_nadir_deg",
    "cloud_cover_frac",
    "sun_elevation_deg",
    "timestamp",
    "bbox",
    "registration_offset_px",
)


def _parse_timestamp(value: Union[str, datetime]) -> datetime:
    if isinstance(value, datetime):
        ts = value
    else:
        ts = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if ts.tzinfo is None:
        raise DataValidationError(f"timestamp {value!r} has no UTC offset")
    return ts.astimezone(timezone.utc)


def _format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class FrameMetadata:
    gsd_m_per_px: float
    off_nadir_deg: float
    cloud_cover_frac: float
    sun_elevation_deg: float
    timestamp: datetime
    bbox: Tuple[int, int, int, int]  # x, y, width, height in the source image
    registration_offset_px: Optional[Tuple[int, int]] = None  # (rows, cols), synthetic ground truth

    def __post_init__(self):
        object.__setattr__(self, "timestamp", _parse_timestamp(self.timestamp))
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        if self.registration_offset_px is not None:
            object.__setattr__(self, "registration_offset_px", tuple(int(v) for v in self.registration_offset_px))
        if not self.gsd_m_per_px > 0:
            raise DataValidationError(f"gsd_m_per_px must be > 0, got {self.gsd_m_per_px}")
        if not 0 <= self.off_nadir_deg < 90:
            raise DataValidationError(f"off_nadir_deg must lie in [0, 90), got {self.off_nadir_deg}")
        if not 0 <= self.cloud_cover_frac <= 1:
            raise DataValidationError(f"cloud_cover_frac must lie in [0, 1], got {self.cloud_cover_frac}")
        if not 0 < self.sun_elevation_deg <= 90:
            raise DataValidationError(f"sun_elevation_deg must lie in (0, 90], got {self.sun_elevation_deg}")
        if len(self.bbox) != 4:
            raise DataValidationError(f"bbox must be [x, y, width, height], got {self.bbox}")
        if self.registration_offset_px is not None and len(self.registration_offset_px) != 2:
            raise DataValidationError(f"registration_offset_px must be a pair, got {self.registration_offset_px}")

    def to_dict(self) -> dict:
        return {
            "gsd_m_per_px": float(self.gsd_m_per_px),
            "off_nadir_deg": float(self.off_nadir_deg),
            "cloud_cover_frac": float(self.cloud_cover_frac),
            "sun_elevation_deg": float(self.sun_elevation_deg),
            "timestamp": _format_timestamp(self.timestamp),
            "bbox": list(self.bbox),
            "registration_offset_px": None if self.registration_offset_px is None
            else list(self.registration_offset_px),
        }

    @classmethod
    def from_dict(cls, data: dict, source: str = "<metadata>") -> "FrameMetadata":
        missing = [k for k in METADATA_FIELDS[:-1] if k not in data]
        unknown = sorted(set(data) - set(METADATA_FIELDS))
        if missing or unknown:
            raise DataValidationError(f"{source}: missing fields {missing}, unknown fields {unknown}")
        try:
            return cls(**data)
        except DataValidationError as exc:
            raise DataValidationError(f"{source}: {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise DataValidationError(f"{source}: malformed metadata: {exc}") from exc


@dataclass(frozen=True)
class ImageChip:
    pixels: np.ndarray  # S x S x 3, values in [0, 1]
    metadata: FrameMetadata

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataValidationError(f"chip pixels must be S x S x 3, got {px.shape}")
        if px.shape[0] != px.shape[1]:
            raise DataValidationError(f"chip must be square, got {px.shape[0]}x{px.shape[1]}")
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise DataValidationError("chip pixel values must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class SceneSequence:
    scene_id: str
    true_label: int
    frames: Tuple[ImageChip, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        stamps = [f.metadata.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise DataValidationError(f"scene {self.scene_id}: frame timestamps must strictly increase")
        if len({f.size for f in self.frames}) > 1:
            raise DataValidationError(f"scene {self.scene_id}: frames have different chip sizes")

    def __len__(self) -> int:
        return len(self.frames)

    def with_frames(self, frames: Sequence[ImageChip]) -> "SceneSequence":
        return replace(self, frames=tuple(frames))


# -- image files -----------------------------------------------------------

def write_ppm(pixels: np.ndarray, path) -> None:
    """8-bit binary PPM (P6)."""
    arr = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PPM")


def read_ppm(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.format != "PPM":
                raise DataValidationError(f"{path}: expected a PPM image, found {img.format}")
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataValidationError(f"{path}: unreadable image: {exc}") from exc
    return arr / np.float32(255.0)


def write_pbm(mask: np.ndarray, path) -> None:
    """Binary PBM (P4) of a boolean mask, for inspection."""
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path, format="PPM")


def read_pbm(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("1"), dtype=bool)


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory and os.replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(data: dict, path) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> dict:
    if not path.exists():
        raise DataValidationError(f"{path}: file is missing")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataValidationError(f"{path}: unreadable JSON: {exc}") from exc


# -- sequences on disk -----------------------------------------------------

def save_sequence(seq: SceneSequence, directory) -> Path:
    """Write frames (time order) as frame_XXX.ppm + frame_XXX.json and the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, chip in enumerate(seq.frames):
        name = f"frame_{i:03d}"
        write_ppm(chip.pixels, directory / f"{name}.ppm")
        write_json(chip.metadata.to_dict(), directory / f"{name}.json")
        names.append(name)
    write_json({"scene_id": seq.scene_id, "true_label": int(seq.true_label), "frames": names},
                directory / SCENE_MANIFEST)
    return directory


def load_sequence(directory) -> SceneSequence:
    """Validated, time-sorted sequence; every error names the offending file."""
    directory = Path(directory)
    manifest_path = directory / SCENE_MANIFEST
    manifest = read_json(manifest_path)
    for key in ("scene_id", "true_label", "frames"):
        if key not in manifest:
            raise DataValidationError(f"{manifest_path}: missing field {key!r}")

    frames = []
    for name in manifest["frames"]:
        sidecar = directory / f"{name}.json"
        metadata = FrameMetadata.from_dict(read_json(sidecar), source=str(sidecar))
        image_path = directory / f"{name}.ppm"
        pixels = read_ppm(image_path)
        try:
            frames.append(ImageChip(pixels, metadata))
        except DataValidationError as exc:
            raise DataValidationError(f"{image_path}: {exc}") from exc

    frames.sort(key=lambda c: c.metadata.timestamp)
    try:
        return SceneSequence(str(manifest["scene_id"]), int(manifest["true_label"]), tuple(frames))
    except DataValidationError as exc:
        raise DataValidationError(f"{manifest_path}: {exc}") from exc


def iter_sequence_dirs(root) -> Iterator[Path]:
    """Scene directories under ``root`` in sorted order."""
    for manifest in sorted(Path(root).glob(f"*/{SCENE_MANIFEST}")):
        yield manifest.parent


# -- admissibility ---------------------------------------------------------

class LabelPredictor(Protocol):
    def predict_labels(self, images: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class FilterRules:
    max_off_nadir_deg: float = 30.0        # strict
    max_cloud_cover_frac: float = 0.20     # strict
    min_sun_elevation_deg: float = 60.0    # inclusive
    min_frames: int = 8
    require_correct: bool = True


@dataclass(frozen=True)
class Rejection:
    scene_id: str
    reason: str
    surviving_frames: int


def _benign(meta: FrameMetadata, rules: FilterRules) -> bool:
    return (meta.off_nadir_deg < rules.max_off_nadir_deg
            and meta.cloud_cover_frac < rules.max_cloud_cover_frac
            and meta.sun_elevation_deg >= rules.min_sun_elevation_deg)


def filter_admissible(seq: SceneSequence, model: LabelPredictor,
                      rules: FilterRules = FilterRules()) -> Union[SceneSequence, Rejection]:
    """Keep benign, correctly classified frames; reject short survivors."""
    keep: List[ImageChip] = [f for f in seq.frames if _benign(f.metadata, rules)]
    benign = len(keep)
    if rules.require_correct and keep:
        predicted = model.predict_labels(np.stack([f.pixels for f in keep]))
        keep = [f for f, label in zip(keep, predicted) if int(label) == seq.true_label]
    if len(keep) < rules.min_frames:
        reason = (f"{len(keep)} admissible frames < {rules.min_frames} "
                  f"({len(seq)} total, {benign} under benign sensing conditions)")
        logger.info("rejecting scene %s: %s", seq.scene_id, reason)
        return Rejection(seq.scene_id, reason, len(keep))
    return seq.with_frames(keep)


# -- preprocessing ---------------------------------------------------------

def preprocess_chip(raw: np.ndarray, bbox: Sequence[int], size: int,
                    metadata: FrameMetadata) -> ImageChip:
    """Square-pad the bbox about its centre, crop, bilinear-resize to size x size.

    The ground sample distance is rescaled by bbox_side / size.
    """
    img = np.asarray(raw)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataValidationError(f"raw image must be H x W x 3, got {img.shape}")
    x, y, w, h = (int(v) for v in bbox)
    if w < 1 or h < 1:
        raise DataValidationError(f"degenerate bbox {tuple(bbox)}")
    if x < 0 or y < 0 or x + w > img.shape[1] or y + h > img.shape[0]:
        raise DataValidationError(f"bbox {tuple(bbox)} exceeds raw image {img.shape[1]}x{img.shape[0]}")
    if size < 1:
        raise DataValidationError(f"target size must be positive, got {size}")

    side = max(w, h)
    x0, y0 = x - (side - w) // 2, y - (side - h) // 2
    crop = np.zeros((side, side, 3), dtype=np.float32)
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + side, img.shape[0]), min(x0 + side, img.shape[1])
    crop[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]

    if side == size:
        pixels = crop
    else:
        channels = [
            np.asarray(Image.fromarray(crop[:, :, c]).resize((size, size), Image.Resampling.BILINEAR))
            for c in range(3)
        ]
        pixels = np.clip(np.stack(channels, axis=-1), 0, 1)

    updated = replace(metadata, gsd_m_per_px=metadata.gsd_m_per_px * side / size,
                      bbox=(x0, y0, side, side))
    return ImageChip(pixels, updated)
