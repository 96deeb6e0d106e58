"""
Desk-scale convolutional classifier: the white-box target of every attack.

Architecture: ``conv(3x3, same) -> bias -> relu -> maxpool2`` blocks, a flatten,
relu dense layers and a k-way linear head. With no conv blocks and no dense
layers the model degenerates to a linear-softmax classifier over pixels.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm.auto import trange

import autodiff as ad
from errors import CheckpointError, ConfigError, DataValidationError, LabelError, ShapeError
from geodata import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_HEADER_END = b"\n\n"


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    channels: int = 3
    class_count: int = 6
    conv_filters: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    dense_widths: Tuple[int, ...] = (128,)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if self.class_count < 2:
            raise ConfigError(f"model.class_count must be at least 2, got {self.class_count}")
        if self.input_size < 1 or self.channels < 1 or self.kernel_size < 1:
            raise ConfigError("model.input_size, channels and kernel_size must be positive")
        reduction = 2 ** len(self.conv_filters)
        if self.input_size % reduction:
            raise ConfigError(
                f"model.input_size {self.input_size} is not divisible by 2^{len(self.conv_filters)} "
                f"(one halving per conv block)"
            )
        if any(f < 1 for f in self.conv_filters + self.dense_widths):
            raise ConfigError("model layer widths must be positive")

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.input_size, self.input_size, self.channels)

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Parameter names and shapes in checkpoint order."""
        shapes = []
        k, cin = self.kernel_size, self.channels
        for i, filters in enumerate(self.conv_filters):
            shapes.append((f"conv{i}.kernel", (k, k, cin, filters)))
            shapes.append((f"conv{i}.bias", (filters,)))
            cin = filters
        side = self.input_size // 2 ** len(self.conv_filters)
        width = side * side * cin
        for j, units in enumerate(self.dense_widths):
            shapes.append((f"dense{j}.weights", (width, units)))
            shapes.append((f"dense{j}.bias", (units,)))
            width = units
        shapes.append(("head.weights", (width, self.class_count)))
        shapes.append(("head.bias", (self.class_count,)))
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class Model:
    """Parameters plus the forward pass. Read-only outside ``train``."""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        expected = dict(config.layer_shapes())
        if list(params) != list(expected):
            raise ShapeError(f"model parameters {list(params)} do not match layers {list(expected)}")
        for name, arr in params.items():
            if arr.shape != expected[name]:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, expected {expected[name]}")
        self.config = config
        self._params: Dict[str, np.ndarray] = {}
        self._constants: Dict[np.dtype, Dict[str, ad.Tensor]] = {}
        self._set_params(params)

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return dict(self._params)

    @property
    def parameter_count(self) -> int:
        return sum(arr.size for arr in self._params.values())

    def _set_params(self, params: Dict[str, np.ndarray]) -> None:
        fresh = {}
        for name, arr in params.items():
            a = np.array(arr, dtype=np.float32)
            a.flags.writeable = False
            fresh[name] = a
        self._params = fresh
        self._constants.clear()

    def _as_constants(self, dtype: np.dtype) -> Dict[str, ad.Tensor]:
        if dtype not in self._constants:
            self._constants[dtype] = {n: ad.Tensor(a, dtype) for n, a in self._params.items()}
        return self._constants[dtype]

    def logits(self, x: ad.Tensor, params: Optional[Dict[str, ad.Tensor]] = None) -> ad.Tensor:
        """Forward pass on [S,S,C] or [N,S,S,C]; ``params`` overrides for training."""
        if x.shape[-3:] != self.config.input_shape:
            raise ShapeError(f"model expects images of shape {self.config.input_shape}, got {x.shape}")
        p = params if params is not None else self._as_constants(x.dtype)
        h = x
        for i in range(len(self.config.conv_filters)):
            h = ad.conv2d(h, p[f"conv{i}.kernel"], stride=1, padding="same")
            h = ad.maxpool2(ad.relu(ad.add_channel_bias(h, p[f"conv{i}.bias"])))
        batched = x.ndim == 4
        h = ad.reshape(h, (x.shape[0], -1) if batched else (-1,))
        for j in range(len(self.config.dense_widths)):
            h = ad.relu(ad.dense(h, p[f"dense{j}.weights"], p[f"dense{j}.bias"]))
        return ad.dense(h, p["head.weights"], p["head.bias"])

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        """Argmax labels for a [N,S,S,C] stack (lowest index wins ties)."""
        if len(images) == 0:
            return np.zeros(0, dtype=np.int64)
        z = self.logits(ad.Tensor(np.asarray(images, dtype=np.float32))).data
        return np.argmax(z, axis=-1)


def build_model(config: ModelConfig) -> Model:
    """Deterministic He-uniform weights (fan-in scaling) and zero biases."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in config.layer_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        limit = np.sqrt(6.0 / int(np.prod(shape[:-1])))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    model = Model(config, params)
    logger.debug("built model with %d parameters", model.parameter_count)
    return model


def _pixels(chip) -> np.ndarray:
    return chip.pixels if hasattr(chip, "pixels") else np.asarray(chip)


def predict(model: Model, chip) -> Tuple[int, np.ndarray]:
    """Argmax label and softmax probabilities for one chip."""
    pixels = _pixels(chip)
    if pixels.shape != model.config.input_shape:
        raise ShapeError(f"predict: chip shape {pixels.shape} != model input {model.config.input_shape}")
    z = model.logits(ad.Tensor(pixels, np.float32)).data.astype(np.float64)
    probs = ad.softmax(z)
    return int(np.argmax(probs)), probs


def loss_and_input_grad(model: Model, chip, label: int,
                        precision: ad.Precision = ad.Precision.COMPUTE) -> Tuple[float, np.ndarray]:
    """J(x, label, theta) and dJ/dx with theta frozen."""
    pixels = _pixels(chip)
    if pixels.shape != model.config.input_shape:
        raise ShapeError(f"loss_and_input_grad: chip shape {pixels.shape} != model input {model.config.input_shape}")
    if not 0 <= label < model.config.class_count:
        raise LabelError(f"label {label} out of range for {model.config.class_count} classes")
    tape = ad.Tape(precision)
    x = tape.leaf(pixels)
    loss = ad.softmax_cross_entropy(model.logits(x), label)
    tape.backward(loss)
    return loss.item(), x.grad


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_sequences(cls, sequences: Sequence) -> "Dataset":
        images, labels = [], []
        for seq in sequences:
            for frame in seq.frames:
                images.append(frame.pixels)
                labels.append(seq.true_label)
        if not images:
            return cls(np.zeros((0, 0, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64))
        return cls(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64))


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ConfigError("training needs epochs >= 0, batch_size >= 1 and learning_rate >= 0")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: Optional[float]


@dataclass
class TrainingLog:
    epochs: List[EpochStats] = field(default_factory=list)

    @property
    def final_val_accuracy(self) -> Optional[float]:
        return self.epochs[-1].val_accuracy if self.epochs else None

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs]}


def _check_dataset(model: Model, data: Dataset, what: str) -> None:
    if data.images.shape[1:] != model.config.input_shape:
        raise DataValidationError(f"{what}: images {data.images.shape[1:]} != model input {model.config.input_shape}")
    if data.images.min() < 0 or data.images.max() > 1:
        raise DataValidationError(f"{what}: pixel values outside [0,1]")
    if data.labels.min() < 0 or data.labels.max() >= model.config.class_count:
        raise DataValidationError(f"{what}: labels outside 0..{model.config.class_count - 1}")


def accuracy(model: Model, data: Dataset, batch_size: int = 64) -> float:
    if len(data) == 0:
        raise DataValidationError("accuracy: empty dataset")
    hits = 0
    for start in range(0, len(data), batch_size):
        predicted = model.predict_labels(data.images[start:start + batch_size])
        hits += int(np.sum(predicted == data.labels[start:start + batch_size]))
    return hits / len(data)


def train(model: Model, dataset: Dataset, epochs: int, lr: float, batch: int, seed: int,
          validation: Optional[Dataset] = None, progress: bool = False) -> TrainingLog:
    """Plain minibatch SGD on cross-entropy; deterministic for a given seed."""
    if len(dataset) == 0:
        raise DataValidationError("train: empty dataset")
    _check_dataset(model, dataset, "train")
    if validation is not None and len(validation):
        _check_dataset(model, validation, "validation")

    rng = np.random.default_rng(seed)
    names = [n for n, _ in model.config.layer_shapes()]
    logger.info("training on %d chips for %d epochs (lr=%g, batch=%d)", len(dataset), epochs, lr, batch)
    log = TrainingLog()
    for epoch in trange(epochs, desc="train", disable=not progress):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            current = model.params
            tape = ad.Tape()
            leaves = {n: tape.leaf(current[n]) for n in names}
            logits = model.logits(ad.Tensor(dataset.images[idx]), leaves)
            loss = ad.softmax_cross_entropy(logits, dataset.labels[idx])
            tape.backward(loss)
            step = np.float32(lr)
            model._set_params({n: current[n] - step * leaves[n].grad for n in names})
            total += loss.item() * len(idx)
        val_acc = accuracy(model, validation) if validation is not None and len(validation) else None
        stats = EpochStats(epoch, total / len(dataset), val_acc)
        log.epochs.append(stats)
        logger.info("epoch %d: loss %.4f val_acc %s", epoch, stats.train_loss,
                    "n/a" if val_acc is None else f"{val_acc:.3f}")
    return log


# -- checkpoints -----------------------------------------------------------

@dataclass(frozen=True)
class Checkpoint:
    header: dict
    blob: bytes

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.header["config"])


def save_checkpoint(model: Model, path) -> Checkpoint:
    """JSON header, a blank line, then little-endian float32 parameters."""
    layers = [{"name": n, "shape": list(s)} for n, s in model.config.layer_shapes()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "layers": layers,
        "parameter_count": model.parameter_count,
    }
    blob = b"".join(model.params[l["name"]].astype("<f4").tobytes() for l in layers)
    payload = json.dumps(header, indent=2, sort_keys=True).encode("utf-8") + _HEADER_END + blob
    atomic_write_bytes(Path(path), payload)
    logger.info("saved checkpoint %s (%d parameters)", path, model.parameter_count)
    return Checkpoint(header, blob)


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head, sep, blob = raw.partition(_HEADER_END)
    if not sep:
        raise CheckpointError(f"{path}: missing blank line after the JSON header")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header must be a JSON object, got {type(header).__name__}")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != supported {CHECKPOINT_VERSION}")
    count = header.get("parameter_count")
    if not isinstance(count, int) or isinstance(count, bool) or count < 0:
        raise CheckpointError(f"{path}: header field parameter_count is missing or invalid: {count!r}")
    expected = count * 4
    if len(blob) != expected:
        raise CheckpointError(f"{path}: parameter blob has {len(blob)} bytes, header declares {expected}")
    return Checkpoint(header, blob)


def load_checkpoint(path) -> Model:
    """Rebuild a model bit-exactly; nothing is returned on any inconsistency."""
    ckpt = read_checkpoint(path)
    try:
        config = ckpt.config
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    try:
        declared = [(l["name"], tuple(l["shape"])) for l in ckpt.header["layers"]]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed layer table: {exc}") from exc
    if declared != config.layer_shapes():
        raise CheckpointError(f"{path}: layer table does not match the stored config")
    flat = np.frombuffer(ckpt.blob, dtype="<f4")
    params, offset = {}, 0
    for name, shape in declared:
        count = int(np.prod(shape))
        params[name] = flat[offset:offset + count].reshape(shape).astype(np.float32)
        offset += count
    return Model(config, params)
