"""
Post-attack evaluation and aggregation.

A frame counts as a targeted success when the classifier outputs the target
label on the composited frame, and as an error whenever the output differs
from the sequence's true label. Non-targeted runs count a success on any
error. Rates are reported per frame and, separately, per sequence (majority
of in-scope frames).
"""

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from errors import BelowResolutionError, DataValidationError, FootprintError, UsageError
from geodata import SceneSequence, read_json, write_json
from patch_model import Placement, PhysicalPatch, overlay, render

logger = logging.getLogger(__name__)

SCOPES = ("all", "held-out")
# config fields that must agree across results pooled into one report
_POOLED_FIELDS = ("targeted", "n", "element_size_m", "frames_attacked", "weights", "phases",
                  "jitter_px", "canny_sigma", "canny_low", "canny_high")


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    attacked: bool
    evaluable: bool
    pre_label: int
    post_label: Optional[int] = None
    pixel_count: int = 0
    loss: Optional[float] = None
    success: bool = False
    error: bool = False
    note: Optional[str] = None


@dataclass(frozen=True)
class EpochTrace:
    epoch: int
    loss: float      # mean classification term
    penalty: float   # mean subtlety penalty
    objective: float


@dataclass(frozen=True)
class AttackResult:
    scene_id: str
    true_label: int
    target_label: Optional[int]
    targeted: bool
    records: Tuple[FrameRecord, ...]
    config: dict
    seed: int
    patch_file: Optional[str] = None
    objective_trace: Tuple[EpochTrace, ...] = ()
    eot_distance: Optional[float] = None

    @property
    def frame_count(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["records"] = [asdict(r) for r in self.records]
        data["objective_trace"] = [asdict(t) for t in self.objective_trace]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "AttackResult":
        data = dict(data)
        data["records"] = tuple(FrameRecord(**r) for r in data["records"])
        data["objective_trace"] = tuple(EpochTrace(**t) for t in data.get("objective_trace", ()))
        return cls(**data)


def save_result(result: AttackResult, path) -> Path:
    path = Path(path)
    write_json(result.to_dict(), path)
    return path


def load_result(path) -> AttackResult:
    data = read_json(Path(path))
    try:
        return AttackResult.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise DataValidationError(f"{path}: malformed attack result: {exc}") from exc


def _outcome(post: int, true_label: int, target: Optional[int], targeted: bool) -> Tuple[bool, bool]:
    error = post != true_label
    return (post == target if targeted else error), error


def evaluate_attack(model, seq: SceneSequence, patch: PhysicalPatch, cfg) -> AttackResult:
    """Overlay the patch at the chip centre of every frame (no jitter) and classify."""
    label = cfg.target_label if cfg.targeted else seq.true_label
    pre_labels = model.predict_labels(np.stack([f.pixels for f in seq.frames]))

    composites, pixel_counts, failures = {}, {}, {}
    for i, frame in enumerate(seq.frames):
        try:
            raster, _ = render(patch, frame.metadata.gsd_m_per_px)
            comp = overlay(frame, raster, Placement.centered(frame.size))
        except (BelowResolutionError, FootprintError) as exc:
            logger.warning("scene %s frame %d unevaluable: %s", seq.scene_id, i, exc)
            failures[i] = str(exc)
            continue
        composites[i] = comp.image.data
        pixel_counts[i] = comp.footprint.pixel_count

    probs = {}
    if composites:
        order = sorted(composites)
        logits = model.logits(ad.Tensor(np.stack([composites[i] for i in order]))).data.astype(np.float64)
        probs = {i: ad.softmax(z) for i, z in zip(order, logits)}

    records = []
    for i in range(len(seq.frames)):
        attacked = i < cfg.frames_attacked
        pre = int(pre_labels[i])
        if pre != seq.true_label:
            logger.warning("scene %s frame %d was misclassified before the attack", seq.scene_id, i)
        if i in failures:
            records.append(FrameRecord(i, attacked, False, pre, note=failures[i]))
            continue
        post = int(np.argmax(probs[i]))
        success, error = _outcome(post, seq.true_label, cfg.target_label, cfg.targeted)
        loss = float(-np.log(max(probs[i][label], np.finfo(np.float64).tiny)))
        records.append(FrameRecord(i, attacked, True, pre, post, pixel_counts[i], loss, success, error))

    return AttackResult(
        scene_id=seq.scene_id,
        true_label=seq.true_label,
        target_label=cfg.target_label,
        targeted=cfg.targeted,
        records=tuple(records),
        config=cfg.to_dict(),
        seed=cfg.seed,
    )


# -- aggregation -----------------------------------------------------------

@dataclass(frozen=True)
class MatrixCell:
    true_label: int
    target_label: Optional[int]  # None for non-targeted runs
    successes: int
    frames: int

    @property
    def rate(self) -> float:
        return self.successes / self.frames if self.frames else 0.0


@dataclass(frozen=True)
class HistogramBin:
    bin_start: int
    bin_end: int
    successes: int
    failures: int
    errors: int = 0    # frames no longer showing the true label
    correct: int = 0


@dataclass(frozen=True)
class EvalReport:
    exp_id: str
    scope: str
    targeted: bool
    n: int
    element_size_m: float
    frames_attacked: int
    result_count: int
    frame_count: int
    success_rate: float
    error_rate: float
    sequence_count: int
    sequence_success_rate: float
    sequence_error_rate: float
    class_matrix: Tuple[MatrixCell, ...] = ()
    row_order: Tuple[int, ...] = ()
    histogram: Tuple[HistogramBin, ...] = ()
    bin_width: int = 100
    mean_pixels_success: Optional[float] = None
    mean_pixels_failure: Optional[float] = None
    all_frames_count: int = 0
    mixed: bool = False

    @property
    def mode(self) -> str:
        return "targeted" if self.targeted else "non-targeted"

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mode"] = self.mode
        data["class_matrix"] = [dict(asdict(c), rate=c.rate) for c in self.class_matrix]
        return data


def _in_scope(record: FrameRecord, scope: str) -> bool:
    return record.evaluable and (scope == "all" or not record.attacked)


def _pooled_key(result: AttackResult) -> tuple:
    return tuple(repr(result.config.get(k)) for k in _POOLED_FIELDS)


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def aggregate(results: Sequence[AttackResult], scope: str = "all", exp_id: str = "",
              allow_mixed: bool = False, bin_width: int = 100,
              class_count: Optional[int] = None) -> EvalReport:
    if not results:
        raise DataValidationError("aggregate: no attack results given")
    if scope not in SCOPES:
        raise UsageError(f"unknown evaluation scope {scope!r}, expected one of {SCOPES}")
    if bin_width < 1:
        raise UsageError(f"histogram bin width must be positive, got {bin_width}")
    mixed = len({_pooled_key(r) for r in results}) > 1
    if mixed and not allow_mixed:
        raise UsageError(f"experiment {exp_id or '?'}: results were produced with different attack "
                         "configurations (pass --allow-mixed to pool them)")

    frames = [(r, rec) for r in results for rec in r.records if _in_scope(rec, scope)]
    success = [rec.success for _, rec in frames]
    error = [rec.error for _, rec in frames]

    seq_success, seq_error = [], []
    for r in results:
        in_scope = [rec for rec in r.records if _in_scope(rec, scope)]
        if not in_scope:
            continue
        seq_success.append(sum(rec.success for rec in in_scope) * 2 > len(in_scope))
        seq_error.append(sum(rec.error for rec in in_scope) * 2 > len(in_scope))

    k = class_count or 1 + max(max(r.true_label for r in results),
                               max((r.target_label for r in results if r.target_label is not None), default=0))
    cells: Dict[Tuple[int, Optional[int]], List[int]] = defaultdict(lambda: [0, 0])
    pixels_by_class: Dict[int, List[int]] = defaultdict(list)
    for r, rec in frames:
        cell = cells[(r.true_label, r.target_label)]
        cell[0] += int(rec.success)
        cell[1] += 1
        pixels_by_class[r.true_label].append(rec.pixel_count)
    matrix = tuple(MatrixCell(t, g, s, f) for (t, g), (s, f) in
                   sorted(cells.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])))
    row_order = tuple(sorted(range(k), key=lambda c: (-(_mean(pixels_by_class[c]) or 0.0), c)))

    hits = [rec.pixel_count for _, rec in frames if rec.success]
    misses = [rec.pixel_count for _, rec in frames if not rec.success]
    histogram = ()
    if frames:
        top = max(rec.pixel_count for _, rec in frames) // bin_width
        counts = np.zeros((top + 1, 4), dtype=np.int64)
        for _, rec in frames:
            b = rec.pixel_count // bin_width
            counts[b, 0 if rec.success else 1] += 1
            counts[b, 2 if rec.error else 3] += 1
        histogram = tuple(HistogramBin(b * bin_width, (b + 1) * bin_width, *(int(c) for c in row))
                          for b, row in enumerate(counts))

    first = results[0].config
    return EvalReport(
        exp_id=exp_id,
        scope=scope,
        targeted=results[0].targeted,
        n=int(first.get("n", 0)),
        element_size_m=float(first.get("element_size_m", 0.0)),
        frames_attacked=int(first.get("frames_attacked", 0)),
        result_count=len(results),
        frame_count=len(frames),
        success_rate=_mean(success) or 0.0,
        error_rate=_mean(error) or 0.0,
        sequence_count=len(seq_success),
        sequence_success_rate=_mean(seq_success) or 0.0,
        sequence_error_rate=_mean(seq_error) or 0.0,
        class_matrix=matrix,
        row_order=row_order,
        histogram=histogram,
        bin_width=bin_width,
        mean_pixels_success=_mean(hits),
        mean_pixels_failure=_mean(misses),
        all_frames_count=sum(r.frame_count for r in results),
        mixed=mixed,
    )
