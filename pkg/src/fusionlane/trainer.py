"""Optimization loop: weighted cross-entropy over frame sequences, Adam or
momentum updates, per-epoch learning-rate decay, validation scoring, and
deterministic checkpointing."""

from __future__ import annotations

import csv
import math
import struct
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .dataset import SequenceSample, center_crop_sequence, random_crop_sequence, to_network_inputs
from .metrics import ConfusionMatrix, NUM_CLASSES
from .network import MODES, FusionLaneModel
from .optim import optimizer_step
from .tensor import backward, no_grad, weighted_cross_entropy

__all__ = [
    "TrainConfig",
    "TrainLog",
    "EpochRecord",
    "TrainingDivergedError",
    "CheckpointError",
    "parse_config",
    "parse_config_text",
    "format_config",
    "compute_class_weights",
    "train",
    "evaluate_sequences",
    "serialize_checkpoint",
    "deserialize_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; carries epoch, batch, and recent losses."""

    def __init__(self, epoch, batch, recent_losses):
        self.epoch = epoch
        self.batch = batch
        self.recent_losses = list(recent_losses)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; "
            f"recent losses: {self.recent_losses}")


class CheckpointError(ValueError):
    """A checkpoint blob is malformed or incompatible."""


@dataclass
class TrainConfig:
    time_step: int = 4
    batch_size: int = 2
    learning_rate: float = 1e-4
    lr_decay: float = 0.95
    epochs: int = 10
    class_weights: tuple = (1.0,) * NUM_CLASSES
    optimizer: str = "adam"
    seed: int = 0
    crop: int = 321
    mode: str = "fusionlane"
    width_multiplier: float = 1.0
    loss_frames: str = "all"

    def __post_init__(self):
        if self.time_step < 1:
            raise ValueError(f"time_step must be >= 1, got {self.time_step}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if len(self.class_weights) != NUM_CLASSES:
            raise ValueError(f"class_weights needs {NUM_CLASSES} values, got {len(self.class_weights)}")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"optimizer must be adam or momentum, got {self.optimizer!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss_frames not in ("all", "last"):
            raise ValueError(f"loss_frames must be 'all' or 'last', got {self.loss_frames!r}")


def parse_config_text(text: str) -> TrainConfig:
    """Parse plain-text ``key = value`` lines; keys match TrainConfig fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key == "class_weights":
            values[key] = tuple(float(v) for v in val.split(","))
        elif key in ("time_step", "batch_size", "epochs", "seed", "crop"):
            values[key] = int(val)
        elif key in ("learning_rate", "lr_decay", "width_multiplier"):
            values[key] = float(val)
        else:
            values[key] = val
    return TrainConfig(**values)


def parse_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "class_weights":
            v = ",".join(f"{w:g}" for w in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_miou: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "val_miou", "lr", "seconds"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.loss:.8f}", f"{r.val_miou:.6f}",
                                 f"{r.lr:.8g}", f"{r.seconds:.3f}"])

    def deterministic_rows(self):
        """Per-epoch values that must reproduce bit-identically under a fixed
        seed (wall time excluded)."""
        return [(r.epoch, r.loss, r.val_miou, r.lr) for r in self.records]


def compute_class_weights(gt_maps) -> np.ndarray:
    """Median-frequency class weights, clamped to [0.1, 10].

    Classes absent from the training labels get the clamp maximum; the median
    is taken over the frequencies of the classes that do occur.
    """
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    total = 0
    for m in gt_maps:
        m = np.asarray(m)
        counts += np.bincount(m.reshape(-1).astype(np.int64), minlength=NUM_CLASSES)[:NUM_CLASSES]
        total += m.size
    if total == 0:
        raise ValueError("compute_class_weights needs a nonempty training set")
    freq = counts / total
    present = counts > 0
    median = np.median(freq[present])
    weights = np.full(NUM_CLASSES, 10.0)
    weights[present] = np.clip(median / freq[present], 0.1, 10.0)
    return weights


# ---------------------------------------------------------------------------
# batching


def _stack_frames(seqs):
    """Batch a list of equal-length sequences into per-frame input arrays."""
    t_steps = len(seqs[0].frames)
    lbev_frames, c_frames, gt_frames = [], [], []
    for t in range(t_steps):
        lbevs, cregs, gts = [], [], []
        for seq in seqs:
            lbev, creg = to_network_inputs(seq.frames[t])
            lbevs.append(lbev)
            cregs.append(creg)
            gts.append(seq.frames[t].gt)
        lbev_frames.append(np.stack(lbevs))
        c_frames.append(np.stack(cregs))
        gt_frames.append(np.stack(gts))
    return lbev_frames, c_frames, gt_frames


def evaluate_sequences(model: FusionLaneModel, seqs) -> ConfusionMatrix:
    """Confusion matrix of argmax predictions over every frame of ``seqs``."""
    cm = ConfusionMatrix(model.num_classes)
    with no_grad():
        for seq in seqs:
            lbev_frames, c_frames, gt_frames = _stack_frames([seq])
            logits = model.forward_sequence(lbev_frames, c_frames, train=False)
            for lg, gt in zip(logits, gt_frames):
                pred = np.argmax(lg.data, axis=1).astype(np.uint8)
                cm.accumulate(pred, gt)
    return cm


def train(model: FusionLaneModel, train_sequences, val_sequences, config: TrainConfig):
    """Run the optimization loop; returns (best checkpoint bytes, TrainLog).

    Each epoch shuffles sequences with the seeded generator, crops each batch
    sequence once, averages the weighted cross entropy over the configured
    frames, steps the optimizer, and scores validation MIOU. The checkpoint
    with the best validation MIOU is retained (the final one when no
    validation sequences are given).
    """
    if not train_sequences:
        raise ValueError("train needs at least one training sequence")
    for seq in train_sequences:
        if seq.time_step != config.time_step:
            raise ValueError(
                f"sequence length {seq.time_step} != configured time_step {config.time_step}")
    weights = np.asarray(config.class_weights, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    val_cropped = [center_crop_sequence(s, min(config.crop, s.frames[0].size))
                   for s in val_sequences]

    log = TrainLog()
    lr = config.learning_rate
    best_miou = -math.inf
    best_blob = None
    recent = []

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_sequences))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            seqs = [random_crop_sequence(train_sequences[i], config.crop, rng)
                    for i in batch_idx]
            lbev_frames, c_frames, gt_frames = _stack_frames(seqs)
            logits = model.forward_sequence(lbev_frames, c_frames, train=True)
            if config.loss_frames == "last":
                pairs = [(logits[-1], gt_frames[-1])]
            else:
                pairs = list(zip(logits, gt_frames))
            loss = None
            for lg, gt in pairs:
                fl = weighted_cross_entropy(lg, gt, weights)
                loss = fl if loss is None else loss + fl
            loss = loss * (1.0 / len(pairs))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, start // config.batch_size, recent[-10:])
            backward(loss)
            optimizer_step(model.params, config.optimizer, lr)
            epoch_losses.append(value)
            recent.append(value)
        val_miou = float("nan")
        if val_cropped:
            val_miou = evaluate_sequences(model, val_cropped).miou()
        seconds = time.perf_counter() - t0
        log.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_miou, lr, seconds))
        if val_cropped and val_miou > best_miou:
            best_miou = val_miou
            best_blob = serialize_checkpoint(model)
        lr *= config.lr_decay

    if best_blob is None:
        best_blob = serialize_checkpoint(model)
    return best_blob, log


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"FLNE"
FORMAT_VERSION = 1
_META_NAME = "!meta"


def _meta_array(model: FusionLaneModel) -> np.ndarray:
    return np.array(
        [
            MODES.index(model.mode),
            model.width_multiplier,
            -1.0 if model.input_size is None else model.input_size,
            model.num_classes,
            *model.block_counts,
            model.lstm_layers,
            1.0 if model.tanh_cell_output else 0.0,
        ],
        dtype=np.float32,
    )


def _collect_records(model: FusionLaneModel, include_optimizer: bool) -> dict:
    records = {_META_NAME: _meta_array(model)}
    for name, t in model.params.items():
        records[name] = t.data
    for bn_name, stats in model.bn_stats.items():
        records[f"{bn_name}.running_mean"] = stats.mean
        records[f"{bn_name}.running_var"] = stats.var
    if include_optimizer:
        for pname, st in model.params.state.items():
            for key, val in st.items():
                records[f"optim.{pname}.{key}"] = np.asarray(val, dtype=np.float32)
    return records


def serialize_checkpoint(model: FusionLaneModel, include_optimizer: bool = True) -> bytes:
    """Binary blob: magic, format version, then name/shape/float32 records
    sorted by name (so identical models serialize bit-identically)."""
    records = _collect_records(model, include_optimizer)
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    for name in sorted(records):
        arr = np.ascontiguousarray(records[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", arr.ndim)
        if arr.ndim:
            buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    return bytes(buf)


def _read_records(blob: bytes) -> dict:
    if len(blob) < 8:
        raise CheckpointError(f"checkpoint truncated at byte {len(blob)}: missing header")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r} at byte 0")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    records = {}
    off = 8
    total = len(blob)

    def need(nbytes, what):
        nonlocal off
        if off + nbytes > total:
            raise CheckpointError(f"checkpoint truncated at byte {off}: incomplete {what}")
        chunk = blob[off:off + nbytes]
        off += nbytes
        return chunk

    while off < total:
        (name_len,) = struct.unpack("<I", need(4, "record name length"))
        name = need(name_len, "record name").decode("utf-8")
        (rank,) = struct.unpack("<I", need(4, "record rank"))
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "record dims")) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        payload = need(4 * count, f"payload of record {name!r}")
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return records


def deserialize_checkpoint(blob: bytes) -> FusionLaneModel:
    records = _read_records(blob)
    if _META_NAME not in records:
        raise CheckpointError("checkpoint has no model metadata record")
    meta = records.pop(_META_NAME)
    if meta.size != 10:
        raise CheckpointError(f"unexpected metadata length {meta.size}")
    input_size = None if meta[2] < 0 else int(meta[2])
    model = FusionLaneModel(
        mode=MODES[int(meta[0])],
        width_multiplier=float(meta[1]),
        input_size=input_size,
        num_classes=int(meta[3]),
        block_counts=tuple(int(b) for b in meta[4:8]),
        lstm_layers=max(1, int(meta[8])),
        tanh_cell_output=bool(meta[9]),
        seed=0,
    )

    assigned = set()
    for name, arr in records.items():
        if name.startswith("optim."):
            pname, key = name[len("optim."):].rsplit(".", 1)
            if pname not in model.params:
                raise CheckpointError(f"optimizer state for unknown parameter {pname!r}")
            if key == "t":
                model.params.state.setdefault(pname, {})[key] = int(arr.reshape(())[()])
            else:
                model.params.state.setdefault(pname, {})[key] = arr.astype(np.float32)
        elif name.endswith(".running_mean") or name.endswith(".running_var"):
            bn_name, stat = name.rsplit(".", 1)
            if bn_name not in model.bn_stats:
                raise CheckpointError(f"running stats for unknown layer {bn_name!r}")
            setattr(model.bn_stats[bn_name], stat.removeprefix("running_"),
                    arr.astype(np.float32))
        elif name in model.params:
            t = model.params[name]
            if t.data.shape != arr.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {arr.shape} in the checkpoint, "
                    f"model expects {t.data.shape}")
            t.data = arr.astype(np.float32)
            assigned.add(name)
        else:
            raise CheckpointError(f"unexpected record {name!r}")
    missing = set(model.params.names()) - assigned
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
    return model


def save_checkpoint(model: FusionLaneModel, path, include_optimizer: bool = True) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_checkpoint(model, include_optimizer))


def load_checkpoint(path) -> FusionLaneModel:
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())
