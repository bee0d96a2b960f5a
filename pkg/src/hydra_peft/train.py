"""Optimisers, learning-rate schedules, datasets and the training loops."""

from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from hydra_peft.errors import ContractError, DivergenceError
from hydra_peft.linalg import Rng
from hydra_peft.model import CLS_ID, MicroTransformer

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "cosine_warmup", "linear_warmup_decay")
OPTIMIZERS = ("sgd", "adamw")


# ---------------------------------------------------------------- optimisers


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """In-place SGD: ``v <- momentum v + g + wd p``; ``p <- p - lr v``."""
    for name, g in grads.items():
        p = params[name]
        v = velocity.get(name)
        step = g + weight_decay * p
        v = step if v is None else momentum * v + step
        velocity[name] = v
        p -= lr * v


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0, t: int = 1) -> None:
    """In-place AdamW: decoupled decay ``p <- p - lr wd p`` then the bias-corrected Adam step."""
    if t < 1:
        raise ContractError(f"adamw_step: t must be >= 1, got {t}")
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if weight_decay:
            p -= lr * weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def schedule_lr(schedule: str, step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    if schedule not in SCHEDULES:
        raise ContractError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * step / warmup_steps
    if schedule == "constant":
        return lr_max
    span = total_steps - warmup_steps
    if span <= 0:
        return lr_max
    frac = (step - warmup_steps) / span
    if schedule == "cosine_warmup":
        return lr_max * 0.5 * (1.0 + math.cos(math.pi * frac))
    return lr_max * (1.0 - frac)


# ------------------------------------------------------------------- configs


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine_warmup"
    warmup: int = 0
    warmup_unit: str = "steps"
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    dropout: float | None = None  # overrides the adapters' dropout rate when set

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.warmup_unit not in ("steps", "epochs"):
            raise ContractError(f"warmup_unit must be 'steps' or 'epochs', got {self.warmup_unit!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("lr and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup < 0:
            raise ContractError("batch_size must be >= 1; epochs and warmup must be >= 0")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")

    def warmup_steps(self, steps_per_epoch: int) -> int:
        return self.warmup * steps_per_epoch if self.warmup_unit == "epochs" else self.warmup


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    tokens: np.ndarray  # (n, seq_len) int64, position 0 is [CLS]
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Motif classification over a small vocabulary.

    Token 0 is ``[CLS]``. The remaining ids are split into a filler range and
    two disjoint motif alphabets, ``source`` and ``target``. Each class owns one
    ordered motif of ``motif_len`` alphabet tokens; an example is filler plus
    that motif at a random offset, then each body token is replaced by a random
    non-CLS token with probability ``noise_rate``. The target domain draws
    motifs from the other alphabet and relabels motif ``m`` as
    ``label_permutation[m]``.
    """

    vocab: int = 32
    seq_len: int = 17
    num_classes: int = 4
    motif_len: int = 3
    noise_rate: float = 0.1
    seed: int = 0
    domain: str = "source"
    label_permutation: tuple | None = None
    filler: int = 8

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ContractError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if not 1 <= self.motif_len <= self.seq_len - 1:
            raise ContractError(f"motif_len must be in [1, seq_len - 1], got {self.motif_len}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ContractError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")
        if self.filler < 1 or self.alphabet_size < 1:
            raise ContractError("vocabulary too small for filler range plus two motif alphabets")
        if self.num_classes > self.alphabet_size**self.motif_len:
            raise ContractError(f"{self.num_classes} classes exceed available motifs")
        if self.label_permutation is not None:
            perm = tuple(int(v) for v in self.label_permutation)
            if sorted(perm) != list(range(self.num_classes)):
                raise ContractError(f"label_permutation {perm} is not a permutation of {self.num_classes} classes")
            object.__setattr__(self, "label_permutation", perm)

    @property
    def alphabet_size(self) -> int:
        return (self.vocab - 1 - self.filler) // 2

    def alphabet(self) -> np.ndarray:
        start = 1 + self.filler + (self.alphabet_size if self.domain == "target" else 0)
        return np.arange(start, start + self.alphabet_size)

    def motifs(self) -> np.ndarray:
        """(num_classes, motif_len) token ids; distinct rows with no repeated token inside a motif."""
        rng = Rng(self.seed).spawn(0x4D4F54, 1 if self.domain == "target" else 0)
        alpha = self.alphabet()
        chosen: list[tuple] = []
        while len(chosen) < self.num_classes:
            if self.motif_len <= len(alpha):
                cand = tuple(alpha[rng.permutation(len(alpha))[: self.motif_len]])
            else:
                cand = tuple(alpha[rng.integers(len(alpha), self.motif_len)])
            if cand not in chosen:
                chosen.append(cand)
        return np.array(chosen, dtype=np.int64)

    def shifted(self, permutation=None) -> "SyntheticTaskSpec":
        """Target-domain twin: other alphabet, permuted labels (reversal by default)."""
        if permutation is None:
            permutation = tuple(reversed(range(self.num_classes)))
        return replace(self, domain="target", label_permutation=tuple(permutation))


SPLIT_CODES = {"train": 1, "test": 2}


def generate_task(spec: SyntheticTaskSpec, split: str, n: int) -> Dataset:
    """Deterministic in ``(spec.seed, domain, split, index)``."""
    if split not in SPLIT_CODES:
        raise ContractError(f"split must be one of {sorted(SPLIT_CODES)}, got {split!r}")
    motifs = spec.motifs()
    perm = spec.label_permutation or tuple(range(spec.num_classes))
    body = spec.seq_len - 1
    root = Rng(spec.seed).spawn(SPLIT_CODES[split], 1 if spec.domain == "target" else 0)
    tokens = np.empty((n, spec.seq_len), dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = root.spawn(i)
        motif_id = int(rng.integers(spec.num_classes, 1)[0])
        seq = 1 + rng.integers(spec.filler, body)
        offset = int(rng.integers(body - spec.motif_len + 1, 1)[0])
        seq[offset : offset + spec.motif_len] = motifs[motif_id]
        corrupt = rng.uniform(body) < spec.noise_rate
        seq[corrupt] = 1 + rng.integers(spec.vocab - 1, int(corrupt.sum()))
        tokens[i, 0] = CLS_ID
        tokens[i, 1:] = seq
        labels[i] = perm[motif_id]
    return Dataset(tokens, labels)


def oracle_predict(spec: SyntheticTaskSpec, tokens: np.ndarray) -> np.ndarray:
    """Best-alignment motif matcher: the class whose motif agrees with the most tokens at some offset."""
    motifs = spec.motifs()
    perm = spec.label_permutation or tuple(range(spec.num_classes))
    body = np.asarray(tokens)[:, 1:]
    length = spec.motif_len
    windows = np.lib.stride_tricks.sliding_window_view(body, length, axis=1)  # (n, offsets, L)
    scores = (windows[:, None, :, :] == motifs[None, :, None, :]).sum(axis=3).max(axis=2)
    return np.asarray(perm)[scores.argmax(axis=1)]


# ----------------------------------------------------------- file ingestion

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (``0x0000 <dtype> <ndim>`` magic, big-endian u32 dims, raw data)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ContractError(f"{path}: not an IDX file")
    dtype, ndim = raw[2], raw[3]
    if dtype not in _IDX_DTYPES:
        raise ContractError(f"{path}: unsupported IDX dtype code 0x{dtype:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ContractError(f"{path}: payload holds {data.size} values, header promises {dims}")
    return data.reshape(dims)


def quantize_bytes(values: np.ndarray, vocab: int) -> np.ndarray:
    """Map byte values 0..255 to token ids 1..vocab-1 (0 stays reserved for [CLS])."""
    buckets = vocab - 1
    return 1 + (np.asarray(values, dtype=np.int64) * buckets) // 256


def load_idx_dataset(images_path, labels_path, vocab: int) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64).reshape(-1)
    flat = images.reshape(images.shape[0], -1)
    if len(flat) != len(labels):
        raise ContractError(f"{len(flat)} images but {len(labels)} labels")
    body = quantize_bytes(flat, vocab)
    tokens = np.concatenate([np.full((len(body), 1), CLS_ID), body], axis=1)
    return Dataset(tokens, labels)


def load_csv_dataset(path) -> Dataset:
    """CSV with header ``label,tok_0..tok_{L-1}``; a [CLS] column is prepended."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label" or header[1:] != [f"tok_{i}" for i in range(len(header) - 1)]:
            raise ContractError(f"{path}: header must be label,tok_0..tok_{{L-1}}")
        rows = [[int(v) for v in row] for row in reader if row]
    arr = np.array(rows, dtype=np.int64).reshape(len(rows), len(header))
    tokens = np.concatenate([np.full((len(arr), 1), CLS_ID), arr[:, 1:]], axis=1)
    return Dataset(tokens, arr[:, 0])


# ----------------------------------------------------------------- training


@dataclass
class RunRecord:
    train_loss: list = field(default_factory=list)
    eval_accuracy: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    adapter_params: int = 0
    head_params: int = 0
    total_params: int = 0
    wall_seconds: float = 0.0

    @property
    def final_accuracy(self) -> float | None:
        return self.eval_accuracy[-1] if self.eval_accuracy else None

    @property
    def sec_per_epoch(self) -> float | None:
        return float(np.mean(self.epoch_seconds)) if self.epoch_seconds else None

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "eval_accuracy": self.eval_accuracy,
            "epoch_seconds": self.epoch_seconds,
            "lr_trace": self.lr_trace,
            "adapter_params": self.adapter_params,
            "head_params": self.head_params,
            "total_params": self.total_params,
            "wall_seconds": self.wall_seconds,
            "final_accuracy": self.final_accuracy,
            "sec_per_epoch": self.sec_per_epoch,
        }


def evaluate(model: MicroTransformer, data: Dataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(model.predict(data.tokens, batch_size) == data.labels))


def _fit(model: MicroTransformer, train: Dataset, test: Dataset | None, cfg: TrainConfig) -> RunRecord:
    counts = model.count_by_role()
    record = RunRecord(
        adapter_params=counts["adapter"],
        head_params=counts["head"],
        total_params=sum(counts.values()),
    )
    if cfg.epochs == 0:
        return record
    if cfg.dropout is not None:
        for lin in model.linears.values():
            if hasattr(lin, "spec"):
                lin.spec = replace(lin.spec, adapter_dropout=cfg.dropout)

    trainable = model.trainable_names()
    params = {name: arr for name, (arr, _) in model.named_parameters().items() if name in trainable}
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = cfg.warmup_steps(steps_per_epoch)
    if warmup >= total and warmup > 0:
        raise ContractError(f"warmup ({warmup} steps) must be shorter than training ({total} steps)")
    rng = Rng(cfg.seed)
    shuffle_rng, dropout_rng = rng.spawn(1), rng.spawn(2)
    velocity: dict = {}
    adam = AdamState()
    step = 0
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, grads = model.loss_and_grads(train.tokens[idx], train.labels[idx], dropout_rng)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}, step {step}")
            lr = schedule_lr(cfg.schedule, step, total, warmup, cfg.lr)
            record.lr_trace.append(lr)
            grads = {k: g for k, g in grads.items() if k in params}
            if cfg.optimizer == "sgd":
                sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            else:
                adamw_step(params, grads, adam, lr, cfg.betas, cfg.eps, cfg.weight_decay, step + 1)
            losses.append(loss)
            step += 1
        record.epoch_seconds.append(time.perf_counter() - t0)
        record.train_loss.append(float(np.mean(losses)))
        record.eval_accuracy.append(evaluate(model, test) if test is not None else float("nan"))
        log.info("epoch %d loss %.4f acc %.4f", epoch, record.train_loss[-1], record.eval_accuracy[-1])
    record.wall_seconds = time.perf_counter() - start
    return record


def finetune(model: MicroTransformer, train: Dataset, test: Dataset | None, cfg: TrainConfig) -> RunRecord:
    """Train adapter factors and head only; base weights are never touched."""
    if model.mode != "finetune":
        raise ContractError(f"finetune requires the model in 'finetune' mode, not {model.mode!r}")
    return _fit(model, train, test, cfg)


def pretrain(model: MicroTransformer, train: Dataset, test: Dataset | None, cfg: TrainConfig) -> RunRecord:
    """Train every base parameter; adapter branches are bypassed."""
    if model.mode != "pretrain":
        raise ContractError(f"pretrain requires the model in 'pretrain' mode, not {model.mode!r}")
    return _fit(model, train, test, cfg)
