"""AdamW + polynomial decay training loop, evaluation and checkpoints.

Randomness is stateless: the epoch's sample order comes from
``SeedSequence(seed, spawn_key=(epoch,))`` and each sample's augmentation
from :func:`kvseg.data.sample_seed`, so resuming at any step needs only the
step counter.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, parse_config
from .data import JaccardAccumulator, JaccardScores, NUM_ORGANS, Sample, augment, sample_seed
from .errors import FormatError, NumericError, ScheduleError
from .model import SegmentationModel, build_model
from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

LR0 = 1e-4
POLY_POWER = 0.9


def poly_lr(step: int, total_steps: int, lr0: float = LR0, power: float = POLY_POWER) -> float:
    if total_steps < 1 or step < 0:
        raise ScheduleError(f"need 0 <= step and total_steps >= 1, got step={step}, total={total_steps}")
    if step > total_steps:
        raise ScheduleError(f"step {step} is past the end of a {total_steps}-step schedule")
    return lr0 * (1.0 - step / total_steps) ** power


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
    decay: Mapping[str, bool] | None = None,
) -> None:
    """One in-place AdamW update.

    Decay is decoupled: ``w <- w - lr*wd*w`` first, then the bias-corrected
    Adam step. Parameters flagged ``False`` in ``decay`` skip the decay.
    A missing gradient counts as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericError(f"non-finite gradient ({bad} entries) at optimizer step {state.step + 1}", name)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decay is None or decay.get(name, True):
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# schedule and records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = LR0
    power: float = POLY_POWER
    weight_decay: float = 0.01
    augment: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ScheduleError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ScheduleError(f"batch size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ScheduleError(f"eval_every must be >= 1, got {self.eval_every}")
        if not self.lr >= 0.0:
            raise ScheduleError(f"learning rate must be >= 0, got {self.lr}")

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def total_steps(self, n: int) -> int:
        return self.epochs * self.steps_per_epoch(n)


@dataclass(frozen=True)
class RunRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    jaccard: float | None = None
    weighted_jaccard: float | None = None
    seed: int = 0


METRIC_FIELDS = ("epoch", "step", "lr", "loss", "jaccard", "weighted_jaccard")


def append_metrics(path, records: Sequence[RunRecord]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRIC_FIELDS)
        for r in records:
            writer.writerow([
                r.epoch, r.step, repr(r.lr), repr(r.loss),
                "" if r.jaccard is None else repr(r.jaccard),
                "" if r.weighted_jaccard is None else repr(r.weighted_jaccard),
            ])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# batching and evaluation
# ---------------------------------------------------------------------------


def to_batch(images: Sequence[np.ndarray], dtype) -> Tensor:
    """Greyscale ``(H, W)`` images -> ``(N, 3, H, W)`` with the channel repeated."""
    stacked = np.stack([np.broadcast_to(im, (3, *im.shape[-2:])) if im.ndim == 2 else im for im in images])
    return Tensor(stacked.astype(dtype))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,))).permutation(n)


@dataclass(frozen=True)
class EvalSummary:
    scores: JaccardScores
    loss: float
    samples: int

    @property
    def mean(self) -> float:
        return self.scores.mean

    @property
    def weighted(self) -> float:
        return self.scores.weighted


def evaluate(model: SegmentationModel, dataset: Sequence[Sample], batch_size: int = 8) -> EvalSummary:
    """Batch-norm in eval mode, no augmentation; restores the previous mode."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    acc = JaccardAccumulator(min(NUM_ORGANS, model.cfg.num_classes - 1))
    loss_sum = 0.0
    dtype = model.parameters()[0].dtype
    try:
        with T.no_grad():
            for start in range(0, len(dataset), batch_size):
                chunk = dataset[start : start + batch_size]
                logits = model(to_batch([s.image for s in chunk], dtype))
                masks = np.stack([s.mask for s in chunk])
                loss_sum += float(T.cross_entropy(logits, masks).data) * len(chunk)
                for pred, gt in zip(logits.data.argmax(axis=1), masks):
                    acc.update(pred, gt)
    finally:
        model.train(was_training)
    return EvalSummary(acc.result(), loss_sum / len(dataset), len(dataset))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"KVSEGCKP"
CKPT_VERSION = 1


def save_checkpoint(path, meta: dict, tensors: Mapping[str, np.ndarray]) -> None:
    """``magic | u32 version | u64 len | JSON meta | u64 count | (u32 len, name, u64 len, tensor)*``."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(meta_bytes)), meta_bytes, struct.pack("<Q", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode()
        blob = tensor_to_bytes(np.asarray(arr))
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<Q", len(blob)), blob]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<IQ", raw, 8)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 20
        meta = json.loads(raw[pos : pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + nlen].decode()
            pos += 4 + nlen
            (blen,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            tensors[name] = tensor_from_bytes(raw[pos : pos + blen]).data
            pos += blen
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return meta, tensors


def load_model(path) -> tuple[SegmentationModel, dict]:
    """Rebuild the model stored in a checkpoint, in the checkpoint's precision."""
    meta, tensors = load_checkpoint(path)
    cfg = parse_config(meta["config"])
    with T.precision(meta["precision"]):
        model = build_model(cfg, seed=meta["seed"])
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
    return model, meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Trainer:
    """Single-threaded, deterministic given ``seed`` and the data."""

    def __init__(
        self,
        cfg: ModelConfig,
        data: Sequence[Sample],
        schedule: ScheduleConfig,
        seed: int = 0,
        val_data: Sequence[Sample] | None = None,
    ):
        if not data:
            raise ValueError("training needs at least one sample")
        self.cfg = cfg
        self.data = list(data)
        self.val_data = list(val_data) if val_data else None
        self.schedule = schedule
        self.seed = seed
        self.precision = T.get_precision()
        self.model = build_model(cfg, seed=seed)
        self.model.train()
        self.decay = self.model.decay_flags()
        self.opt = OptimizerState(weight_decay=schedule.weight_decay)
        self.step = 0
        self.steps_per_epoch = schedule.steps_per_epoch(len(self.data))
        self.total_steps = schedule.total_steps(len(self.data))

    # -- state ------------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "config": self.cfg.canonical_text(),
            "config_hash": self.cfg.config_hash(),
            "step": self.step,
            "total_steps": self.total_steps,
            "seed": self.seed,
            "precision": self.precision,
            "schedule": asdict(self.schedule),
            "optimizer": {"step": self.opt.step, "betas": list(self.opt.betas), "eps": self.opt.eps,
                          "weight_decay": self.opt.weight_decay},
            "rng": {"scheme": "order=SeedSequence(seed, spawn_key=(epoch,)); sample=SeedSequence([seed, epoch, index])",
                    "seed": self.seed, "next_step": self.step},
        }

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": np.array(v) for k, v in self.model.state_dict().items()}
        out.update({f"opt/m/{k}": v.copy() for k, v in self.opt.m.items()})
        out.update({f"opt/v/{k}": v.copy() for k, v in self.opt.v.items()})
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.metadata(), self.tensors())

    @classmethod
    def resume(cls, path, data, schedule: ScheduleConfig | None = None, val_data=None) -> "Trainer":
        meta, tensors = load_checkpoint(path)
        cfg = parse_config(meta["config"])
        if cfg.config_hash() != meta["config_hash"]:
            raise FormatError(f"{path}: config hash mismatch")
        schedule = schedule or ScheduleConfig(**meta["schedule"])
        with T.precision(meta["precision"]):
            trainer = cls(cfg, data, schedule, meta["seed"], val_data)
        if trainer.total_steps != meta["total_steps"]:
            raise ScheduleError("resumed schedule has a different total step count")
        trainer.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
        opt = meta["optimizer"]
        trainer.opt = OptimizerState(
            m={k[6:]: v.copy() for k, v in tensors.items() if k.startswith("opt/m/")},
            v={k[6:]: v.copy() for k, v in tensors.items() if k.startswith("opt/v/")},
            step=opt["step"], betas=tuple(opt["betas"]), eps=opt["eps"], weight_decay=opt["weight_decay"],
        )
        trainer.step = meta["step"]
        return trainer

    # -- stepping ---------------------------------------------------------

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        order = epoch_order(self.seed, epoch, len(self.data))
        bs = self.schedule.batch_size
        return order[k * bs : (k + 1) * bs]

    def train_step(self) -> RunRecord:
        epoch = self.step // self.steps_per_epoch
        images, masks = [], []
        for idx in self.batch_indices(self.step):
            s = self.data[idx]
            img, msk = s.image, s.mask
            if self.schedule.augment:
                img, msk = augment(img, msk, sample_seed(self.seed, epoch, int(idx)))
            images.append(img)
            masks.append(msk)
        lr = poly_lr(self.step, self.total_steps, self.schedule.lr, self.schedule.power)
        with T.precision(self.precision):
            buffers = {k: v.copy() for k, v in self.model.named_buffers()}
            try:
                self.model.zero_grad()
                logits = self.model(to_batch(images, T.PRECISIONS[self.precision]))
                loss = T.cross_entropy(logits, np.stack(masks))
                loss.backward()
                params = dict(self.model.named_parameters())
                adamw_step(params, {k: p.grad for k, p in params.items()}, self.opt, lr, self.decay)
            except NumericError:
                for name, buf in self.model.named_buffers():
                    buf[...] = buffers[name]
                raise
        self.step += 1
        return RunRecord(epoch, self.step, lr, float(loss.data), seed=self.seed)

    def run(self, out_dir=None, stop_at: int | None = None) -> Iterator[RunRecord]:
        """Yield one record per step; epoch-final records carry validation Jaccard.

        With ``out_dir``, metrics are appended to ``metrics.csv`` and the
        checkpoint is rewritten to ``checkpoint.kvck`` after every epoch and
        at the end. A non-finite loss or gradient leaves ``last_good.kvck``
        (the state before the failing step) and re-raises.
        """
        out = Path(out_dir) if out_dir is not None else None
        end = self.total_steps if stop_at is None else min(stop_at, self.total_steps)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            append_metrics(out / "metrics.csv", [])
        pending = []
        while self.step < end:
            try:
                record = self.train_step()
            except NumericError:
                if out is not None:
                    if pending:
                        append_metrics(out / "metrics.csv", pending)
                    self.save(out / "last_good.kvck")
                raise
            epoch_done = self.step % self.steps_per_epoch == 0
            if epoch_done and self.val_data and (record.epoch + 1) % self.schedule.eval_every == 0:
                summary = evaluate(self.model, self.val_data, self.schedule.batch_size)
                record = RunRecord(record.epoch, record.step, record.lr, record.loss,
                                   summary.mean, summary.weighted, self.seed)
            pending.append(record)
            if out is not None and (epoch_done or self.step == end):
                append_metrics(out / "metrics.csv", pending)
                pending = []
                self.save(out / "checkpoint.kvck")
            yield record
        if out is not None:
            if pending:
                append_metrics(out / "metrics.csv", pending)
            self.save(out / "checkpoint.kvck")


def train(
    cfg: ModelConfig,
    data: Sequence[Sample],
    schedule: ScheduleConfig,
    seed: int = 0,
    val_data: Sequence[Sample] | None = None,
    out_dir=None,
) -> Iterator[RunRecord]:
    return Trainer(cfg, data, schedule, seed, val_data).run(out_dir)
