"""Optimization loop, schedule, evaluation, checkpoints and the ablation runner."""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses, metrics
from .data import AugmentConfig, LabelMask, Sample, Volume, augment, kfold_split
from .model import ModelConfig, NetworkState, build_network, config_from_text, config_to_text, forward_full, table2_configs
from .ops import RunningStats
from .tensor import DTYPE, Tensor, no_grad, tensor_from_bytes, tensor_to_bytes

THRESHOLD = 0.5


class NumericError(RuntimeError):
    """Non-finite loss during training."""


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


# -- optimizer --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.003
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState) -> None:
    """One Adam update with bias correction and decoupled weight decay, in place."""
    missing = [k for k, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise ValueError(f"parameter {missing[0]!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if g.shape != p.shape:
            raise ValueError(f"gradient of {name!r} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - state.lr * update


# -- schedule ---------------------------------------------------------------------

@dataclass
class ScheduleState:
    """Cosine annealing with warm restarts; ``t`` counts epochs."""

    base_lr: float = 0.003
    t_0: int = 50
    t_mult: int = 2
    eta_min: float = 0.0
    t: int = 0

    def __post_init__(self):
        if self.t_0 < 1 or self.t_mult < 1:
            raise ValueError("t_0 and t_mult must be positive integers")
        if not 0.0 <= self.eta_min <= self.base_lr:
            raise ValueError("need 0 <= eta_min <= base_lr")


def cycle_position(s: ScheduleState, t: int) -> Tuple[int, int]:
    """``(t_cur, t_i)`` for iteration ``t``."""
    if t < 0:
        raise ValueError(f"iteration must be non-negative, got {t}")
    t_i = s.t_0
    if s.t_mult == 1:
        return t % t_i, t_i
    while t >= t_i:
        t -= t_i
        t_i *= s.t_mult
    return t, t_i


def lr_at(s: ScheduleState, t: int) -> float:
    t_cur, t_i = cycle_position(s, t)
    if t_cur == 0:
        return s.base_lr
    lr = s.eta_min + 0.5 * (s.base_lr - s.eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))
    return min(max(lr, s.eta_min), s.base_lr)


# -- run description ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 2
    lr: float = 0.003
    weight_decay: float = 1e-6
    t_0: int = 50
    t_mult: int = 2
    eta_min: float = 0.0
    lam: float = losses.DEFAULT_LAMBDA
    epsilon: float = losses.DEFAULT_EPSILON
    augment: Optional[AugmentConfig] = AugmentConfig()
    val_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.val_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and val_every >= 1 are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = None if self.augment is None else asdict(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("augment") is not None:
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_wce: float
    l_dice: float
    total: float
    val_dice: float = float("nan")

    def log_line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr!r} l_wce={self.l_wce!r} l_dice={self.l_dice!r} "
                f"total={self.total!r} val_dice={self.val_dice!r}")


@dataclass
class TrainRun:
    model: ModelConfig
    train: TrainConfig = TrainConfig()
    history: List[EpochRecord] = field(default_factory=list)
    optimizer: Optional[AdamState] = None
    schedule: Optional[ScheduleState] = None
    best_dice: float = -1.0
    best_epoch: int = -1
    best_params: Optional[Dict[str, np.ndarray]] = None
    best_buffers: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None

    def __post_init__(self):
        t = self.train
        if self.optimizer is None:
            self.optimizer = AdamState(lr=t.lr, weight_decay=t.weight_decay)
        if self.schedule is None:
            self.schedule = ScheduleState(t.lr, t.t_0, t.t_mult, t.eta_min)

    @property
    def next_epoch(self) -> int:
        return len(self.history)


# -- batches ------------------------------------------------------------------------

def stack_batch(samples: Sequence[Sample]) -> Tuple[Tensor, np.ndarray]:
    x = np.stack([s.volume.intensities for s in samples])[:, None]
    y = np.stack([s.mask.values for s in samples]).astype(DTYPE)[:, None]
    return Tensor(x), y


def epoch_batches(samples: Sequence[Sample], cfg: TrainConfig, epoch: int) -> List[List[Sample]]:
    """Shuffled, augmented batches for ``epoch``; depends only on (seed, epoch)."""
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(samples))
    items = []
    for i in order:
        s = samples[int(i)]
        items.append(augment(s, rng, cfg.augment) if cfg.augment is not None else s)
    return [items[i:i + cfg.batch_size] for i in range(0, len(items), cfg.batch_size)]


def train_step(net: NetworkState, batch: Sequence[Sample], run: TrainRun) -> losses.LossTerms:
    x, y = stack_batch(batch)
    net.train()
    net.zero_grad()
    terms = losses.combined_loss(forward_full(net, x), y, run.train.lam, run.train.epsilon)
    if not math.isfinite(terms.total):
        return terms
    terms.tensor.backward()
    adam_step(net.params, run.optimizer)
    return terms


def train(run: TrainRun, dataset: Sequence[Sample], net: NetworkState,
          val_samples: Optional[Sequence[Sample]] = None, until: Optional[int] = None,
          log: Optional[Callable[[str], None]] = None,
          on_epoch: Optional[Callable[[TrainRun, NetworkState], bool]] = None) -> TrainRun:
    """Train ``net`` in place from ``run.next_epoch`` to ``until`` (default: the configured epochs).

    ``on_epoch`` may return True to stop after the current epoch.
    """
    if not dataset:
        raise ValueError("training set is empty")
    if net.config != run.model:
        raise ValueError("network configuration does not match the run configuration")
    last = run.train.epochs if until is None else min(until, run.train.epochs)
    for epoch in range(run.next_epoch, last):
        run.optimizer.lr = lr_at(run.schedule, epoch)
        run.schedule.t = epoch
        sums = np.zeros(3)
        count = 0
        for b, batch in enumerate(epoch_batches(dataset, run.train, epoch)):
            terms = train_step(net, batch, run)
            if not math.isfinite(terms.total):
                raise NumericError(f"non-finite loss {terms.total} at epoch {epoch}, batch {b}")
            sums += (terms.l_wce, terms.l_dice, terms.total)
            count += 1
        run.schedule.t = epoch + 1
        rec = EpochRecord(epoch, float(run.optimizer.lr), *(float(v) for v in sums / count))
        if val_samples and (epoch + 1) % run.train.val_every == 0:
            rec.val_dice = float(evaluate(net, val_samples).raw.dice)
            if rec.val_dice > run.best_dice:
                run.best_dice, run.best_epoch = rec.val_dice, epoch
                run.best_params = {k: p.data.copy() for k, p in net.params.items()}
                run.best_buffers = {k: (s.mean.copy(), s.var.copy()) for k, s in net.buffers.items()}
        run.history.append(rec)
        if log is not None:
            log(rec.log_line())
        if on_epoch is not None and on_epoch(run, net):
            break
    return run


# -- inference and evaluation --------------------------------------------------------

def predict_proba(net: NetworkState, volume: Volume) -> np.ndarray:
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            logits = forward_full(net, Tensor(volume.intensities[None, None]))
    finally:
        net.training = was_training
    return 1.0 / (1.0 + np.exp(-logits.data[0, 0]))


def predict(net: NetworkState, volume: Volume, postprocess: bool = False) -> LabelMask:
    mask = predict_proba(net, volume) >= THRESHOLD
    if postprocess:
        mask = metrics.postprocess(mask)
    return LabelMask(mask.astype(np.uint8), volume.spacing, volume.origin)


@dataclass
class EvalResult:
    raw: metrics.MetricsReport
    post: metrics.MetricsReport
    per_sample: List[Tuple[str, metrics.MetricsReport, metrics.MetricsReport]]


def evaluate(net: NetworkState, samples: Sequence[Sample]) -> EvalResult:
    """Threshold at 0.5, score with and without post-processing, average over samples."""
    raw, post, rows = [], [], []
    for s in samples:
        mask = predict_proba(net, s.volume) >= THRESHOLD
        r = metrics.compute_report(mask, s.mask.values, s.volume.spacing)
        q = metrics.compute_report(metrics.postprocess(mask), s.mask.values, s.volume.spacing)
        raw.append(r)
        post.append(q)
        rows.append((s.id, r, q))
    return EvalResult(metrics.mean_report(raw), metrics.mean_report(post), rows)


# -- checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AGCK"
CHECKPOINT_VERSION = 1


def _records(arrays: Sequence[np.ndarray]) -> bytes:
    return b"".join(tensor_to_bytes(np.asarray(a, dtype=DTYPE)) for a in arrays)


def checkpoint_bytes(net: NetworkState, run: TrainRun) -> bytes:
    """Serialize config, parameters, statistics, optimizer, schedule and history."""
    names = sorted(net.params)
    bnames = sorted(net.buffers)
    opt = run.optimizer
    has_moments = bool(opt.m)
    has_best = run.best_params is not None
    header = {
        "model": config_to_text(net.config),
        "train": run.train.to_dict(),
        "params": names,
        "buffers": bnames,
        "buffer_initialized": [bool(net.buffers[b].initialized) for b in bnames],
        "optimizer": {k: getattr(opt, k) for k in ("lr", "weight_decay", "beta1", "beta2", "eps", "step")},
        "has_moments": has_moments,
        "schedule": asdict(run.schedule),
        "history": [asdict(r) for r in run.history],
        "best": {"dice": run.best_dice, "epoch": run.best_epoch, "stored": has_best},
    }
    arrays = [net.params[n].data for n in names]
    arrays += [a for b in bnames for a in (net.buffers[b].mean, net.buffers[b].var)]
    if has_moments:
        arrays += [opt.m[n] for n in names] + [opt.v[n] for n in names]
    if has_best:
        arrays += [run.best_params[n] for n in names]
        arrays += [a for b in bnames for a in run.best_buffers[b]]
    head = json.dumps(header, sort_keys=True, allow_nan=True).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head + _records(arrays)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_save(net: NetworkState, run: TrainRun, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, run))


def checkpoint_load(path) -> Tuple[NetworkState, TrainRun]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointCorruptError(f"{path}: checksum mismatch (truncated or modified)")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        body, offset = raw[:-4], 12 + hlen

        def take(n):
            nonlocal offset
            out = []
            for _ in range(n):
                arr, offset = tensor_from_bytes(body, offset)
                out.append(arr)
            return out

        cfg = config_from_text(header["model"])
        names, bnames = header["params"], header["buffers"]
        params = dict(zip(names, take(len(names))))
        stats = take(2 * len(bnames))
        buffers = {b: (stats[2 * i], stats[2 * i + 1]) for i, b in enumerate(bnames)}
        opt = AdamState(**header["optimizer"])
        if header["has_moments"]:
            opt.m = dict(zip(names, take(len(names))))
            opt.v = dict(zip(names, take(len(names))))
        best = header["best"]
        run = TrainRun(cfg, TrainConfig.from_dict(header["train"]),
                       [EpochRecord(**r) for r in header["history"]], opt,
                       ScheduleState(**header["schedule"]), best["dice"], best["epoch"])
        if best["stored"]:
            run.best_params = dict(zip(names, take(len(names))))
            bs = take(2 * len(bnames))
            run.best_buffers = {b: (bs[2 * i], bs[2 * i + 1]) for i, b in enumerate(bnames)}
        if offset != len(body):
            raise CheckpointCorruptError(f"{path}: {len(body) - offset} unexpected trailing bytes")
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, struct.error) as exc:
        raise CheckpointCorruptError(f"{path}: {exc}") from None
    net = build_network(cfg, seed=0)
    net.load_arrays(params, buffers)
    for b, flag in zip(bnames, header["buffer_initialized"]):
        net.buffers[b].initialized = flag
    return net, run


def best_network(run: TrainRun, net: NetworkState) -> NetworkState:
    """Copy of ``net`` holding the best-validation weights (or ``net`` itself if none were kept)."""
    if run.best_params is None:
        return net
    out = net.clone()
    out.load_arrays(run.best_params, run.best_buffers)
    return out


# -- ablation ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    name: str
    status: str
    dice: float = float("nan")
    recall: float = float("nan")
    precision: float = float("nan")
    hd95_mm: float = float("nan")
    params: int = 0


def split_for_ablation(samples: Sequence[Sample], seed: int) -> Tuple[List[Sample], List[Sample]]:
    """First fold of a k-fold split (k = min(5, n)); validation ids are folded back into training."""
    by_id = {s.id: s for s in samples}
    if len(samples) < 2:
        raise ValueError("ablation needs at least two samples")
    fold = kfold_split(list(by_id), k=min(5, len(samples)), seed=seed)[0]
    return [by_id[i] for i in fold.train + fold.val], [by_id[i] for i in fold.test]


def run_ablation(samples: Sequence[Sample], train_cfg: TrainConfig, base_channels: int = 8,
                 log: Optional[Callable[[str], None]] = None) -> List[AblationRow]:
    """Train and score every ablation configuration on one shared split and seed."""
    train_set, test_set = split_for_ablation(samples, train_cfg.seed)
    rows = []
    for name, cfg in table2_configs(base_channels):
        try:
            net = build_network(cfg, train_cfg.seed)
            run = train(TrainRun(cfg, train_cfg), train_set, net)
            rep = evaluate(net, test_set).raw
            rows.append(AblationRow(name, "ok", rep.dice, rep.recall, rep.precision, rep.hd95_mm, net.num_parameters()))
        except (NumericError, ValueError, ArithmeticError) as exc:
            rows.append(AblationRow(name, f"failed: {exc}"))
        if log is not None:
            r = rows[-1]
            log(f"{r.name}: {r.status} dice={r.dice:.4f}")
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    """Plain-text table, one row per configuration, scores as fractions in [0, 1]."""
    head = f"{'Method':<10} {'Dice':>8} {'Recall':>8} {'Precision':>10} {'HD95(mm)':>9} {'Params':>9}  Status"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.name:<10} {r.dice:>8.4f} {r.recall:>8.4f} {r.precision:>10.4f} "
                     f"{r.hd95_mm:>9.3f} {r.params:>9d}  {r.status}")
    return "\n".join(lines) + "\n"


def ablation_json(rows: Sequence[AblationRow]) -> str:
    clean = [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(r).items()} for r in rows]
    return json.dumps({"rows": clean}, indent=2, sort_keys=True) + "\n"
