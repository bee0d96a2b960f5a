"""Experiment configuration and the pretrain -> finetune -> merge -> bench pipeline.

Configs are JSON objects; every key is optional and falls back to the defaults
below, which reproduce the desk-scale LoRA / SeqLoRA / Hydra comparison.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hydra_peft import checkpoint
from hydra_peft.adapters import AdapterSpec
from hydra_peft.errors import CheckpointError, ContractError, HydraError
from hydra_peft.linalg import Rng
from hydra_peft.model import MicroTransformer, ModelConfig, build, fold_all
from hydra_peft.train import (
    Dataset,
    RunRecord,
    SyntheticTaskSpec,
    TrainConfig,
    evaluate,
    finetune,
    generate_task,
    pretrain,
)

log = logging.getLogger(__name__)

THREADS_ENV = "HYDRA_PEFT_THREADS"


@dataclass(frozen=True)
class Variant:
    name: str
    adapter: AdapterSpec
    placement: frozenset


def default_variants() -> list[Variant]:
    place = frozenset({"mlp_out", "msa_proj"})
    return [
        Variant("head_only", AdapterSpec(), frozenset()),
        Variant("lora", AdapterSpec.lora(4), place),
        Variant("seqlora", AdapterSpec.seqlora(4), place),
        Variant("hydra", AdapterSpec.hydra(4), place),
    ]


@dataclass(frozen=True)
class DataSizes:
    pretrain_train: int = 2000
    pretrain_test: int = 500
    train: int = 1000
    test: int = 500


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, epochs=3, warmup=20))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-2, epochs=4, warmup=10))
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    data: DataSizes = field(default_factory=DataSizes)
    variants: tuple = field(default_factory=lambda: tuple(default_variants()))
    seeds: tuple = (0, 1, 2)
    pretrain_seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.variants:
            raise ContractError("config needs at least one variant")
        if not self.seeds:
            raise ContractError("config needs at least one seed")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate variant names in {names}")

    def variant(self, name: str) -> Variant:
        for v in self.variants:
            if v.name == name:
                return v
        raise ContractError(f"unknown variant {name!r}; known: {[v.name for v in self.variants]}")

    @property
    def source_task(self) -> SyntheticTaskSpec:
        return dataclasses.replace(self.task, vocab=self.model.vocab, seq_len=self.model.seq_len,
                                   num_classes=self.model.num_classes)

    @property
    def target_task(self) -> SyntheticTaskSpec:
        return self.source_task.shifted()


# ------------------------------------------------------------ (de)serialise


def _only(cls, d: dict, where: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(d) - known
    if extra:
        raise ContractError(f"unknown key(s) in {where}: {sorted(extra)}")
    return d


def adapter_from_dict(d: dict | None) -> AdapterSpec:
    return AdapterSpec(**_only(AdapterSpec, d or {}, "adapter"))


def model_config_from_dict(d: dict | None) -> ModelConfig:
    d = dict(_only(ModelConfig, d or {}, "model"))
    if "adapter" in d:
        d["adapter"] = adapter_from_dict(d["adapter"])
    if "placement" in d:
        d["placement"] = frozenset(d["placement"])
    return ModelConfig(**d)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["placement"] = sorted(cfg.placement)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(_only(ExperimentConfig, d, "config"))
    kw = {}
    if "model" in d:
        kw["model"] = model_config_from_dict(d["model"])
    for key in ("pretrain", "train"):
        if key in d:
            kw[key] = TrainConfig(**_only(TrainConfig, d[key], key))
    if "task" in d:
        kw["task"] = SyntheticTaskSpec(**_only(SyntheticTaskSpec, d["task"], "task"))
    if "data" in d:
        kw["data"] = DataSizes(**_only(DataSizes, d["data"], "data"))
    if "variants" in d:
        kw["variants"] = tuple(
            Variant(v["name"], adapter_from_dict(v.get("adapter")), frozenset(v.get("placement", ("mlp_out",))))
            for v in d["variants"]
        )
    if "seeds" in d:
        kw["seeds"] = tuple(int(s) for s in d["seeds"])
    for key in ("pretrain_seed", "output_dir"):
        if key in d:
            kw[key] = d[key]
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ContractError(f"config {path} must be a JSON object")
    try:
        return config_from_dict(raw)
    except (TypeError, KeyError) as exc:
        raise ContractError(f"invalid config {path}: {exc}") from exc


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "model": model_config_to_dict(cfg.model),
        "pretrain": dataclasses.asdict(cfg.pretrain),
        "train": dataclasses.asdict(cfg.train),
        "task": dataclasses.asdict(cfg.task),
        "data": dataclasses.asdict(cfg.data),
        "variants": [
            {"name": v.name, "adapter": dataclasses.asdict(v.adapter), "placement": sorted(v.placement)}
            for v in cfg.variants
        ],
        "seeds": list(cfg.seeds),
        "pretrain_seed": cfg.pretrain_seed,
        "output_dir": cfg.output_dir,
    }


# ------------------------------------------------------- model checkpoints


def save_model(model: MicroTransformer, path, meta: dict | None = None, dtype: str = "f32") -> None:
    meta = dict(meta or {})
    meta["model_config"] = model_config_to_dict(model.config)
    meta["folded"] = not model.adapted_layer_names() and model.mode == "inference"
    checkpoint.save(path, model.named_parameters(), meta, dtype)


def model_from_tensors(tensors: dict, meta: dict) -> MicroTransformer:
    if "model_config" not in meta:
        raise CheckpointError("checkpoint meta lacks model_config")
    model = build(model_config_from_dict(meta["model_config"]), Rng(0))
    params = model.named_parameters()
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors do not match model: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, (arr, _) in params.items():
        src = tensors[name][0]
        if src.shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} has shape {src.shape}, model expects {arr.shape}")
        arr[...] = src
    return model


def load_model(path) -> tuple[MicroTransformer, dict]:
    tensors, meta = checkpoint.load(path)
    return model_from_tensors(tensors, meta), meta


# ------------------------------------------------------------------ stages


def datasets(cfg: ExperimentConfig, domain: str) -> tuple[Dataset, Dataset]:
    if domain == "source":
        spec = cfg.source_task
        return (generate_task(spec, "train", cfg.data.pretrain_train),
                generate_task(spec, "test", cfg.data.pretrain_test))
    spec = cfg.target_task
    return generate_task(spec, "train", cfg.data.train), generate_task(spec, "test", cfg.data.test)


def run_pretrain(cfg: ExperimentConfig, seed: int | None = None) -> tuple[MicroTransformer, RunRecord]:
    seed = cfg.pretrain_seed if seed is None else seed
    base_cfg = dataclasses.replace(cfg.model, placement=frozenset(), adapter=AdapterSpec())
    model = build(base_cfg, Rng(seed))
    model.set_mode("pretrain")
    train, test = datasets(cfg, "source")
    record = pretrain(model, train, test, dataclasses.replace(cfg.pretrain, seed=seed))
    return model, record


def prepare_variant(base: MicroTransformer, variant: Variant, seed: int) -> MicroTransformer:
    """Frozen copy of ``base`` with the variant's adapters and a fresh head."""
    model = base.install_adapters(variant.adapter, variant.placement, Rng(seed).spawn(0xADA))
    model.reset_head(Rng(seed).spawn(0x4EAD))
    model.set_mode("finetune")
    return model


def run_finetune(cfg: ExperimentConfig, base: MicroTransformer, variant_name: str,
                 seed: int) -> tuple[MicroTransformer, RunRecord]:
    variant = cfg.variant(variant_name)
    model = prepare_variant(base, variant, seed)
    train, test = datasets(cfg, "target")
    record = finetune(model, train, test, dataclasses.replace(cfg.train, seed=seed))
    return model, record


def merge_self_test(adapted: MicroTransformer, merged: MicroTransformer, probes: int = 64,
                    seed: int = 0) -> float:
    """Max |logit difference| between the adapted and merged models on seeded random sequences."""
    cfg = adapted.config
    rng = Rng(seed).spawn(0x3E46E)
    tokens = rng.integers(cfg.vocab - 1, probes * cfg.seq_len).reshape(probes, cfg.seq_len) + 1
    tokens[:, 0] = 0
    adapted = adapted.copy()
    adapted.set_mode("inference")
    a = adapted.forward(tokens).logits
    b = merged.forward(tokens).logits
    return float(np.max(np.abs(a - b)))


def merge_model(adapted: MicroTransformer) -> MicroTransformer:
    if not adapted.adapted_layer_names():
        raise ContractError("model carries no adapters to merge")
    return fold_all(adapted)


# -------------------------------------------------------------------- bench


def _cell(args):
    cfg, base, variant_name, seed = args
    try:
        model, record = run_finetune(cfg, base, variant_name, seed)
    except HydraError as exc:
        return {"variant": variant_name, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}
    return {"variant": variant_name, "seed": seed, "record": record.to_dict(),
            "trainable_millions": (record.adapter_params + record.head_params) / 1e6}


def bench_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_bench(cfg: ExperimentConfig, base: MicroTransformer | None = None) -> dict:
    """Pretrain once (unless ``base`` is given), then fine-tune every (variant, seed) cell."""
    pre_record = None
    if base is None:
        base, pre_record = run_pretrain(cfg)
    jobs = [(cfg, base, v.name, s) for v in cfg.variants for s in cfg.seeds]
    threads = bench_threads()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_cell, jobs))
    else:
        cells = [_cell(job) for job in jobs]

    rows = []
    for v in cfg.variants:
        ok = [c for c in cells if c["variant"] == v.name and "record" in c]
        accs = np.array([c["record"]["final_accuracy"] for c in ok])
        epoch_secs = [s for c in ok for s in c["record"]["epoch_seconds"]]
        rec0 = ok[0]["record"] if ok else None
        rows.append({
            "variant": v.name,
            "params_m": ok[0]["trainable_millions"] if ok else None,
            "adapter_params": rec0["adapter_params"] if rec0 else None,
            "total_params": rec0["total_params"] if rec0 else None,
            "acc_mean": float(accs.mean()) if len(accs) else None,
            "acc_std": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0 if len(accs) else None,
            "accuracies": accs.tolist(),
            "sec_per_epoch": float(np.mean(epoch_secs)) if epoch_secs else None,
            "failed_seeds": [c["seed"] for c in cells if c["variant"] == v.name and "error" in c],
        })
    return {
        "pretrain": pre_record.to_dict() if pre_record else None,
        "source_accuracy": pre_record.final_accuracy if pre_record else None,
        "rows": rows,
        "cells": cells,
        "all_failed": all("error" in c for c in cells),
    }


def format_table(summary: dict) -> str:
    lines = [
        "| variant | params (M) | accuracy (%) | sec/epoch |",
        "|---|---|---|---|",
    ]
    for r in summary["rows"]:
        if r["acc_mean"] is None:
            lines.append(f"| {r['variant']} | - | failed | - |")
            continue
        lines.append(
            f"| {r['variant']} | {r['params_m']:.4f} | {100 * r['acc_mean']:.2f} ± {100 * r['acc_std']:.2f} "
            f"| {r['sec_per_epoch']:.2f} |"
        )
    return "\n".join(lines) + "\n"


def evaluate_checkpoint(model: MicroTransformer, cfg: ExperimentConfig, domain: str = "target") -> float:
    _, test = datasets(cfg, domain)
    model = model.copy()
    model.set_mode("inference")
    return evaluate(model, test)
