"""Pre-norm micro transformer encoder with pluggable Hydra layers.

Each block is ``x + MSA(LN(x))`` followed by ``x + MLP(LN(x))``; the MLP is
``mlp_out(gelu(mlp_in(.)))``. Every linear layer is a :class:`HydraLinear`;
the placement policy decides which of them carry non-zero adapter ranks.
The classification head reads the final-layer-normed ``[CLS]`` embedding at
position 0 of every sequence.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from hydra_peft.adapters import (
    FACTORS,
    AdapterSpec,
    HydraLinear,
    MergedLinear,
    adapter_param_count,
    fold,
    forward_train,
    init_hydra_linear,
)
from hydra_peft.autodiff import Node, Tape
from hydra_peft.errors import ContractError, ShapeError
from hydra_peft.linalg import Rng, gaussian

CLS_ID = 0
BASE_INIT_SIGMA = 0.02

PLACEMENTS = {
    "mlp_out": ("mlp_out",),
    "msa_proj": ("attn_proj",),
    "msa_qkv": ("attn_q", "attn_k", "attn_v"),
}
LAYER_ORDER = ("attn_q", "attn_k", "attn_v", "attn_proj", "mlp_in", "mlp_out")
MODES = ("pretrain", "finetune", "inference")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    mlp_hidden: int | None = None
    heads: int = 4
    blocks: int = 4
    seq_len: int = 17
    vocab: int = 32
    num_classes: int = 4
    placement: frozenset = field(default_factory=lambda: frozenset({"mlp_out", "msa_proj"}))
    adapter: AdapterSpec = field(default_factory=lambda: AdapterSpec.hydra(4))

    def __post_init__(self):
        object.__setattr__(self, "placement", frozenset(self.placement))
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.embed_dim)
        for name in ("embed_dim", "mlp_hidden", "heads", "blocks", "seq_len", "vocab", "num_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.heads:
            raise ContractError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        unknown = self.placement - set(PLACEMENTS)
        if unknown:
            raise ContractError(f"unknown placement(s) {sorted(unknown)}; choose from {sorted(PLACEMENTS)}")

    @property
    def adapted_layers(self) -> frozenset:
        return frozenset(layer for p in self.placement for layer in PLACEMENTS[p])

    def layer_shape(self, layer: str) -> tuple[int, int]:
        d, hid = self.embed_dim, self.mlp_hidden
        return {"mlp_in": (hid, d), "mlp_out": (d, hid)}.get(layer, (d, d))

    def adapter_param_count(self) -> int:
        """Adapter parameters implied by the placement, without building the model."""
        per_block = sum(adapter_param_count(*self.layer_shape(layer), self.adapter) for layer in self.adapted_layers)
        return per_block * self.blocks


@dataclass
class ForwardResult:
    logits: np.ndarray
    branch_features: dict | None = None


class MicroTransformer:
    """Parameters live in numpy arrays that optimisers update in place."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], linears: dict):
        self.config = config
        self.params = params
        self.linears = linears
        self.mode = "finetune"

    # ----------------------------------------------------------------- params

    def named_parameters(self) -> dict[str, tuple[np.ndarray, str]]:
        """Name -> (array, role) with role in {frozen, adapter, head}, in a stable order."""
        out = {}
        for name in ("tok_emb", "pos_emb"):
            out[name] = (self.params[name], "frozen")
        for i in range(self.config.blocks):
            for ln in ("ln1", "ln2"):
                for part in ("gain", "bias"):
                    key = f"blocks.{i}.{ln}.{part}"
                    out[key] = (self.params[key], "frozen")
            for layer in LAYER_ORDER:
                lname = f"blocks.{i}.{layer}"
                for pname, arr in self.linears[lname].named_arrays().items():
                    out[f"{lname}.{pname}"] = (arr, "adapter" if pname in FACTORS else "frozen")
        for key in ("ln_f.gain", "ln_f.bias"):
            out[key] = (self.params[key], "frozen")
        for key in ("head.w", "head.b"):
            out[key] = (self.params[key], "head")
        return out

    def trainable_names(self) -> set[str]:
        roles = {"pretrain": {"frozen", "head"}, "finetune": {"adapter", "head"}, "inference": set()}[self.mode]
        return {name for name, (_, role) in self.named_parameters().items() if role in roles}

    def count_by_role(self) -> dict[str, int]:
        counts = {"frozen": 0, "adapter": 0, "head": 0}
        for arr, role in self.named_parameters().values():
            counts[role] += arr.size
        return counts

    def adapted_layer_names(self) -> list[str]:
        return [
            name
            for name, lin in self.linears.items()
            if isinstance(lin, HydraLinear) and lin.spec.is_trainable
        ]

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}; choose from {MODES}")
        self.mode = mode

    def copy(self) -> "MicroTransformer":
        return copy.deepcopy(self)

    # ---------------------------------------------------------------- forward

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != self.config.seq_len:
            raise ShapeError(f"tokens must have shape (batch, {self.config.seq_len}), got {tokens.shape}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab):
            raise ContractError(f"token id out of range [0, {self.config.vocab})")
        return tokens.astype(np.int64)

    def _linear(self, tape, name, x, leaves, training, rng, capture):
        lin = self.linears[name]
        nodes = {p: leaves[f"{name}.{p}"] for p in lin.named_arrays()}
        if isinstance(lin, MergedLinear) or self.mode == "pretrain":
            return tape.add_bias_rowwise(tape.matmul_nt(x, nodes["w0"]), nodes["b0"])
        out = forward_train(lin, tape, x, nodes, training and self.mode == "finetune", rng)
        if capture is not None and lin.spec.is_trainable:
            capture["layer"] = name
            capture["branches"] = out
        return out.output

    def build_graph(self, tape: Tape, tokens, training: bool = False, rng: Rng | None = None,
                    capture: dict | None = None) -> tuple[Node, dict[str, Node]]:
        """Record the forward pass on ``tape``; returns (logits node, leaves by name)."""
        cfg = self.config
        tokens = self._check_tokens(tokens)
        batch, s = tokens.shape
        trainable = self.trainable_names()
        leaves = {
            name: tape.leaf(arr, requires_grad=name in trainable)
            for name, (arr, _) in self.named_parameters().items()
        }
        h = tape.add(
            tape.select_rows(leaves["tok_emb"], tokens.reshape(-1)),
            tape.select_rows(leaves["pos_emb"], np.tile(np.arange(s), batch)),
        )
        dh = cfg.embed_dim // cfg.heads
        for i in range(cfg.blocks):
            pre = f"blocks.{i}"

            def lin(layer, x):
                return self._linear(tape, f"{pre}.{layer}", x, leaves, training, rng, capture)

            a = tape.layernorm_rows(h, leaves[f"{pre}.ln1.gain"], leaves[f"{pre}.ln1.bias"])
            q, k, v = lin("attn_q", a), lin("attn_k", a), lin("attn_v", a)
            heads = []
            for j in range(cfg.heads):
                sl = (j * dh, (j + 1) * dh)
                scores = tape.seq_matmul_nt(tape.slice_cols(q, *sl), tape.slice_cols(k, *sl), s)
                probs = tape.softmax_rows(tape.scale(scores, 1.0 / math.sqrt(dh)))
                heads.append(tape.seq_matmul(probs, tape.slice_cols(v, *sl), s))
            attn = heads[0] if len(heads) == 1 else tape.concat_cols(heads)
            h = tape.add(h, lin("attn_proj", attn))
            m = tape.layernorm_rows(h, leaves[f"{pre}.ln2.gain"], leaves[f"{pre}.ln2.bias"])
            h = tape.add(h, lin("mlp_out", tape.gelu(lin("mlp_in", m))))
        cls = tape.select_rows(h, np.arange(batch) * s)
        cls = tape.layernorm_rows(cls, leaves["ln_f.gain"], leaves["ln_f.bias"])
        logits = tape.add_bias_rowwise(tape.matmul_nt(cls, leaves["head.w"]), leaves["head.b"])
        return logits, leaves

    def forward(self, tokens, training: bool = False, rng: Rng | None = None,
                branch_features: bool = False) -> ForwardResult:
        tape = Tape()
        capture = {} if branch_features else None
        logits, _ = self.build_graph(tape, tokens, training, rng, capture)
        feats = None
        if capture:
            cls_rows = np.arange(logits.shape[0]) * self.config.seq_len
            br = capture["branches"]
            zeros = np.zeros((len(cls_rows), br.output.shape[1]))
            feats = {
                "layer": capture["layer"],
                "pretrained": br.pretrained.value[cls_rows],
                "parallel": br.parallel.value[cls_rows] if br.parallel is not None else zeros,
                "sequential": br.sequential.value[cls_rows] if br.sequential is not None else zeros.copy(),
                "output": br.output.value[cls_rows],
            }
        return ForwardResult(logits.value, feats)

    def loss_and_grads(self, tokens, labels, rng: Rng | None = None, training: bool = True):
        """Mean cross-entropy and gradients for every trainable parameter (by name)."""
        tape = Tape()
        logits, leaves = self.build_graph(tape, tokens, training, rng)
        loss = tape.cross_entropy_mean(logits, labels)
        grads = tape.backward(loss) if loss.requires_grad else {}
        params = self.named_parameters()
        out = {}
        for name, node in leaves.items():
            if node.id in grads:
                out[name] = grads[node.id].reshape(params[name][0].shape)
        return float(loss.value[0, 0]), out

    def predict(self, tokens, batch_size: int = 256) -> np.ndarray:
        tokens = np.asarray(tokens)
        preds = [
            self.forward(tokens[i : i + batch_size]).logits.argmax(axis=1)
            for i in range(0, len(tokens), batch_size)
        ]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    # ------------------------------------------------------------ adaptation

    def install_adapters(self, spec: AdapterSpec, placement: Iterable[str], rng: Rng) -> "MicroTransformer":
        """Copy of this model with fresh adapters on ``placement``; base weights shared by value."""
        config = replace(self.config, adapter=spec, placement=frozenset(placement))
        linears = {}
        for i in range(config.blocks):
            for layer in LAYER_ORDER:
                name = f"blocks.{i}.{layer}"
                old = self.linears[name]
                w0 = old.w if isinstance(old, MergedLinear) else old.w0
                b0 = old.b if isinstance(old, MergedLinear) else old.b0
                layer_spec = spec if layer in config.adapted_layers else AdapterSpec()
                linears[name] = init_hydra_linear(w0, b0, layer_spec, rng.spawn(i, LAYER_ORDER.index(layer)))
        model = MicroTransformer(config, {k: v.copy() for k, v in self.params.items()}, linears)
        model.mode = self.mode
        return model

    def reset_head(self, rng: Rng, num_classes: int | None = None) -> None:
        c = num_classes or self.config.num_classes
        self.config = replace(self.config, num_classes=c)
        self.params["head.w"] = gaussian(rng, c, self.config.embed_dim, BASE_INIT_SIGMA)
        self.params["head.b"] = np.zeros(c)


def build(config: ModelConfig, rng: Rng) -> MicroTransformer:
    """Base weights ~ N(0, 0.02^2), layernorm gains 1, biases 0; adapters per placement.

    Base weights and adapters come from separate sub-streams of ``rng``, so the
    base network does not depend on the placement or adapter ranks.
    """
    base = rng.spawn(1)
    d, hid = config.embed_dim, config.mlp_hidden
    params = {
        "tok_emb": gaussian(base, config.vocab, d, BASE_INIT_SIGMA),
        "pos_emb": gaussian(base, config.seq_len, d, BASE_INIT_SIGMA),
    }
    plain = {}
    for i in range(config.blocks):
        for ln in ("ln1", "ln2"):
            params[f"blocks.{i}.{ln}.gain"] = np.ones(d)
            params[f"blocks.{i}.{ln}.bias"] = np.zeros(d)
        for layer in LAYER_ORDER:
            rows, cols = config.layer_shape(layer)
            plain[f"blocks.{i}.{layer}"] = MergedLinear(gaussian(base, rows, cols, BASE_INIT_SIGMA), np.zeros(rows))
    params["ln_f.gain"] = np.ones(d)
    params["ln_f.bias"] = np.zeros(d)
    params["head.w"] = gaussian(base, config.num_classes, d, BASE_INIT_SIGMA)
    params["head.b"] = np.zeros(config.num_classes)
    skeleton = MicroTransformer(config, params, plain)
    model = skeleton.install_adapters(config.adapter, config.placement, rng.spawn(2))
    model.mode = "finetune"
    return model


def fold_all(model: MicroTransformer) -> MicroTransformer:
    """Inference copy with every linear layer folded to a single affine map."""
    linears = {
        name: fold(lin) if isinstance(lin, HydraLinear) else MergedLinear(lin.w.copy(), lin.b.copy())
        for name, lin in model.linears.items()
    }
    config = replace(model.config, placement=frozenset(), adapter=AdapterSpec())
    folded = MicroTransformer(config, {k: v.copy() for k, v in model.params.items()}, linears)
    folded.mode = "inference"
    return folded
