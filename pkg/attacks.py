"""
Attack optimizers.

``fgs`` and ``iterative_fgs`` are the digital per-image baselines.
``attack_sequence`` optimizes one physical patch jointly over the leading
frames of a revisit sequence: each epoch renders the patch at every attacked
frame's ground sample distance, overlays it at a freshly jittered centre,
and takes one projected gradient step on the mean classification loss plus
the mean subtlety penalty.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

import autodiff as ad
from classifier import Model, loss_and_input_grad, predict
from edge_penalty import PenaltyWeights, dump_edge_mask, edge_mask_for, penalty_d
from errors import (BelowResolutionError, ConfigError, DataValidationError, FootprintError, LabelError,
                    ShapeError, UsageError)
from evaluation import AttackResult, EpochTrace, evaluate_attack
from geodata import ImageChip, SceneSequence
from patch_model import (Placement, PhysicalPatch, covered_means, dump_composite, overlay,
                         raster_side, render)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    target_label: Optional[int] = None
    targeted: bool = True
    frames_attacked: int = 4
    n: int = 14
    element_size_m: float = 0.5
    weights: PenaltyWeights = PenaltyWeights()
    phases: Tuple[Tuple[int, float], ...] = ((1000, 100.0), (1000, 20.0))  # (epochs, learning rate)
    jitter_px: int = 2
    seed: int = 0
    canny_sigma: float = 2.0
    canny_low: float = 0.1
    canny_high: float = 0.2

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", PenaltyWeights(**self.weights))
        object.__setattr__(self, "phases", tuple((int(e), float(lr)) for e, lr in self.phases))
        if self.targeted and self.target_label is None:
            raise ConfigError("a targeted attack needs a target label")
        if self.frames_attacked < 1:
            raise ConfigError(f"attack.frames_attacked must be >= 1, got {self.frames_attacked}")
        if self.n < 1 or not self.element_size_m > 0:
            raise ConfigError(f"attack patch needs n >= 1 and element_size_m > 0, got {self.n}, {self.element_size_m}")
        if any(e < 0 or not lr > 0 for e, lr in self.phases):
            raise ConfigError(f"attack.phases need epochs >= 0 and learning rates > 0, got {self.phases}")
        if self.jitter_px < 0:
            raise ConfigError(f"attack.jitter_px must be >= 0, got {self.jitter_px}")
        if not 0 <= self.canny_low < self.canny_high:
            raise ConfigError(f"canny thresholds must satisfy 0 <= low < high, got {self.canny_low}, {self.canny_high}")

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.phases)

    def check_sequence(self, seq: SceneSequence, class_count: int) -> None:
        if self.frames_attacked > len(seq):
            raise UsageError(f"frames_attacked={self.frames_attacked} exceeds the {len(seq)} frames of {seq.scene_id}")
        if self.targeted:
            if not 0 <= self.target_label < class_count:
                raise LabelError(f"target label {self.target_label} out of range for {class_count} classes")
            if self.target_label == seq.true_label:
                raise UsageError(f"target label {self.target_label} equals the true label of {seq.scene_id}")

    def to_dict(self) -> dict:
        return {
            "target_label": self.target_label,
            "targeted": self.targeted,
            "frames_attacked": self.frames_attacked,
            "n": self.n,
            "element_size_m": self.element_size_m,
            "weights": self.weights.to_dict(),
            "phases": [list(p) for p in self.phases],
            "jitter_px": self.jitter_px,
            "seed": self.seed,
            "canny_sigma": self.canny_sigma,
            "canny_low": self.canny_low,
            "canny_high": self.canny_high,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AttackConfig":
        return cls(**data)


class TransformSampler:
    """Per-epoch integer translations, uniform over [-J, J]^2."""

    def __init__(self, jitter_px: int, seed: int):
        if jitter_px < 0:
            raise ConfigError(f"jitter bound must be >= 0, got {jitter_px}")
        self.jitter_px = jitter_px
        self._rng = np.random.default_rng(seed)

    def sample(self, frames: int) -> np.ndarray:
        if self.jitter_px == 0:
            return np.zeros((frames, 2), dtype=np.int64)
        return self._rng.integers(-self.jitter_px, self.jitter_px + 1, size=(frames, 2))


# -- digital baselines -----------------------------------------------------

def _as_pixels(chip) -> np.ndarray:
    return chip.pixels if isinstance(chip, ImageChip) else np.asarray(chip)


def _rewrap(chip, pixels: np.ndarray):
    if isinstance(chip, ImageChip):
        return ImageChip(pixels, chip.metadata)
    return pixels


def fgs(model: Model, chip, eps: float, label: Optional[int] = None, project: bool = True,
        precision: ad.Precision = ad.Precision.COMPUTE):
    """x' = clamp01(x + eps * sign(dJ/dx)) against the model's own prediction."""
    if eps < 0:
        raise ConfigError(f"fgs step must be >= 0, got {eps}")
    x = _as_pixels(chip)
    if label is None:
        label = predict(model, x)[0]
    _, grad = loss_and_input_grad(model, x, label, precision)
    adv = x + eps * np.sign(grad)
    if project:
        adv = np.clip(adv, 0, 1)
    return _rewrap(chip, adv.astype(grad.dtype))


def iterative_fgs(model: Model, chip, eps: float, alpha: float, iterations: int,
                  label: Optional[int] = None, precision: ad.Precision = ad.Precision.COMPUTE):
    """Signed steps of size alpha, each projected onto the eps l-inf ball and [0, 1]."""
    if eps < 0:
        raise ConfigError(f"iterative_fgs radius must be >= 0, got {eps}")
    if not alpha > 0 or iterations < 1:
        raise ConfigError(f"iterative_fgs needs alpha > 0 and iterations >= 1, got {alpha}, {iterations}")
    x0 = _as_pixels(chip).astype(precision.dtype)
    if label is None:
        label = predict(model, x0)[0]
    lower, upper = x0 - eps, x0 + eps
    x = x0
    for _ in range(iterations):
        _, grad = loss_and_input_grad(model, x, label, precision)
        x = np.clip(np.clip(x + alpha * np.sign(grad), lower, upper), 0, 1)
    return _rewrap(chip, x)


# -- physical patch attack -------------------------------------------------

def squared_l2(a: np.ndarray, b: np.ndarray) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sum(diff * diff))


def eot_distance(originals: Sequence[np.ndarray], composites: Sequence[np.ndarray],
                 metric: Callable[[np.ndarray, np.ndarray], float] = squared_l2) -> float:
    """Mean metric over explicit (original, composite) samples."""
    if len(originals) != len(composites):
        raise ShapeError(f"eot_distance: {len(originals)} originals but {len(composites)} composites")
    if len(originals) == 0:
        raise DataValidationError("eot_distance: empty sample set")
    return float(np.mean([metric(o, c) for o, c in zip(originals, composites)]))


def attack_objective(model: Model, frames: Sequence[ImageChip], edges, patch: PhysicalPatch,
                     elements: ad.Tensor, offsets: np.ndarray, label: int, targeted: bool,
                     weights: PenaltyWeights) -> Tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """(objective, mean classification loss, mean penalty) for one jitter draw."""
    images, penalty = [], None
    for frame, edge, (dy, dx) in zip(frames, edges, offsets):
        raster, _ = render(patch, frame.metadata.gsd_m_per_px, elements)
        comp = overlay(frame, raster, Placement.centered(frame.size).shifted(int(dy), int(dx)))
        d = penalty_d(comp.image, frame, comp.mask, edge, weights)
        penalty = d if penalty is None else ad.add(penalty, d)
        images.append(comp.image)
    loss = ad.softmax_cross_entropy(model.logits(ad.stack(images)), [label] * len(images))
    penalty = ad.scale(penalty, 1.0 / len(images))
    signed = loss if targeted else ad.scale(loss, -1.0)
    return ad.add(signed, penalty), loss, penalty


def attack_sequence(model: Model, seq: SceneSequence, cfg: AttackConfig,
                    sampler: Optional[TransformSampler] = None,
                    progress: bool = False) -> Tuple[PhysicalPatch, AttackResult]:
    cfg.check_sequence(seq, model.config.class_count)
    sampler = sampler or TransformSampler(cfg.jitter_px, cfg.seed)
    frames = seq.frames[:cfg.frames_attacked]
    patch = PhysicalPatch.uniform(cfg.n, cfg.element_size_m)
    for frame in frames:
        raster_side(patch, frame.metadata.gsd_m_per_px)

    first = frames[0]
    elements = covered_means(first.pixels, patch, first.metadata.gsd_m_per_px, Placement.centered(first.size))
    edges = [edge_mask_for(f, cfg.canny_sigma, cfg.canny_low, cfg.canny_high) for f in frames]
    label = cfg.target_label if cfg.targeted else seq.true_label
    logger.info("attacking %s (label %d) %s over %d frame(s): n=%d, %g m/element, %d epochs",
                seq.scene_id, seq.true_label,
                f"to target {label}" if cfg.targeted else "non-targeted",
                len(frames), cfg.n, cfg.element_size_m, cfg.total_epochs)

    trace: List[EpochTrace] = []
    bar = tqdm(total=cfg.total_epochs, desc=seq.scene_id, disable=not progress)
    epoch = 0
    for epochs, lr in cfg.phases:
        step = np.float32(lr)
        for _ in range(epochs):
            tape = ad.Tape()
            leaf = tape.leaf(elements)
            objective, loss, penalty = attack_objective(
                model, frames, edges, patch, leaf, sampler.sample(len(frames)), label, cfg.targeted, cfg.weights)
            tape.backward(objective)
            elements = np.clip(elements - step * leaf.grad, 0, 1)
            trace.append(EpochTrace(epoch, loss.item(), penalty.item(), objective.item()))
            logger.debug("%s epoch %d: J=%.5f d=%.5f", seq.scene_id, epoch, loss.item(), penalty.item())
            epoch += 1
            bar.update(1)
    bar.close()

    patch = patch.with_elements(elements)
    result = evaluate_attack(model, seq, patch, cfg)
    originals, composites = [], []
    for frame, record in zip(seq.frames, result.records):
        if record.evaluable:
            raster, _ = render(patch, frame.metadata.gsd_m_per_px)
            originals.append(frame.pixels)
            composites.append(overlay(frame, raster, Placement.centered(frame.size)).image.data)
    delta = eot_distance(originals, composites) if originals else None
    result = replace(result, objective_trace=tuple(trace), eot_distance=delta)
    hits = sum(r.success for r in result.records)
    logger.info("%s: %d/%d frames %s after the attack", seq.scene_id, hits, len(result.records),
                "reach the target" if cfg.targeted else "misclassified")
    return patch, result


def dump_inspection(seq: SceneSequence, patch: PhysicalPatch, cfg: AttackConfig, directory) -> List[Path]:
    """Centre-placed composite PPMs for every frame and edge-mask PBMs for attacked frames."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, frame in enumerate(seq.frames):
        if i < cfg.frames_attacked:
            path = directory / f"edges_{i:03d}.pbm"
            dump_edge_mask(edge_mask_for(frame, cfg.canny_sigma, cfg.canny_low, cfg.canny_high), path)
            written.append(path)
        try:
            raster, _ = render(patch, frame.metadata.gsd_m_per_px)
            comp = overlay(frame, raster, Placement.centered(frame.size))
        except (BelowResolutionError, FootprintError) as exc:
            logger.warning("no composite for %s frame %d: %s", seq.scene_id, i, exc)
            continue
        path = directory / f"composite_{i:03d}.ppm"
        dump_composite(comp, path)
        written.append(path)
    return written
