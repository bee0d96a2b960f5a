"""Linear layers with parallel and sequential low-rank branches.

For a frozen affine map ``f(x) = W0 x + b0`` (``W0`` is d x k) a Hydra layer
computes::

    h = f(x) + s * A_up A_down x + s * B_up B_down f(x)

where the parallel factors are ``A_up`` (d x r_a), ``A_down`` (r_a x k) and the
sequential factors ``B_up`` (d x r_b), ``B_down`` (r_b x d). ``r_b = 0`` gives
plain LoRA, ``r_a = 0`` gives SeqLoRA. Because every branch is linear, the layer
folds into a single affine map::

    W = W0 + A + B W0,   b = b0 + B b0,   A = s A_up A_down,  B = s B_up B_down

Activations are row-major on the tape: a batch of n inputs is an n x k matrix,
so ``W0 x`` is evaluated as ``X @ W0.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hydra_peft.autodiff import Node, Tape
from hydra_peft.errors import ContractError, ShapeError
from hydra_peft.linalg import Rng, gaussian

FACTORS = ("a_up", "a_down", "b_up", "b_down")


@dataclass(frozen=True)
class AdapterSpec:
    parallel_rank: int = 0
    sequential_rank: int = 0
    init_sigma: float = 0.02
    adapter_dropout: float = 0.0
    scaling: float = 1.0

    def __post_init__(self):
        if self.parallel_rank < 0 or self.sequential_rank < 0:
            raise ContractError(f"ranks must be >= 0, got r_a={self.parallel_rank}, r_b={self.sequential_rank}")
        if self.init_sigma < 0:
            raise ContractError(f"init_sigma must be >= 0, got {self.init_sigma}")
        if not 0.0 <= self.adapter_dropout < 1.0:
            raise ContractError(f"adapter_dropout must lie in [0, 1), got {self.adapter_dropout}")

    @classmethod
    def lora(cls, rank: int, **kw) -> "AdapterSpec":
        return cls(parallel_rank=rank, sequential_rank=0, **kw)

    @classmethod
    def seqlora(cls, rank: int, **kw) -> "AdapterSpec":
        return cls(parallel_rank=0, sequential_rank=rank, **kw)

    @classmethod
    def hydra(cls, rank: int, **kw) -> "AdapterSpec":
        """Hydra at parameter parity with a single-branch adapter of ``rank``."""
        if rank % 2:
            raise ContractError(f"hydra parity split needs an even rank, got {rank}")
        return cls(parallel_rank=rank // 2, sequential_rank=rank // 2, **kw)

    @property
    def is_trainable(self) -> bool:
        return self.parallel_rank > 0 or self.sequential_rank > 0


@dataclass
class MergedLinear:
    """Plain affine map produced by :func:`fold`."""

    w: np.ndarray
    b: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.T + self.b

    def forward(self, tape: Tape, x: Node, nodes: dict[str, Node] | None = None) -> Node:
        if nodes is None:
            nodes = {"w0": tape.leaf(self.w), "b0": tape.leaf(self.b)}
        return tape.add_bias_rowwise(tape.matmul_nt(x, nodes["w0"]), nodes["b0"])

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"w0": self.w, "b0": self.b}

    @property
    def out_features(self) -> int:
        return self.w.shape[0]

    @property
    def in_features(self) -> int:
        return self.w.shape[1]


@dataclass
class BranchOutputs:
    """Per-branch outputs of one Hydra forward, rows aligned with the input."""

    pretrained: Node
    parallel: Node | None
    sequential: Node | None
    output: Node


@dataclass
class HydraLinear:
    w0: np.ndarray
    b0: np.ndarray
    a_up: np.ndarray
    a_down: np.ndarray
    b_up: np.ndarray
    b_down: np.ndarray
    spec: AdapterSpec

    @property
    def out_features(self) -> int:
        return self.w0.shape[0]

    @property
    def in_features(self) -> int:
        return self.w0.shape[1]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"w0": self.w0, "b0": self.b0}
        if self.spec.parallel_rank:
            out["a_up"], out["a_down"] = self.a_up, self.a_down
        if self.spec.sequential_rank:
            out["b_up"], out["b_down"] = self.b_up, self.b_down
        return out

    def leaves(self, tape: Tape, trainable: bool = True) -> dict[str, Node]:
        """Tape leaves for every array; only adapter factors may require grad."""
        return {
            name: tape.leaf(arr, requires_grad=trainable and name in FACTORS)
            for name, arr in self.named_arrays().items()
        }

    def forward(
        self,
        tape: Tape,
        x: Node,
        nodes: dict[str, Node] | None = None,
        training: bool = False,
        rng: Rng | None = None,
    ) -> Node:
        return forward_train(self, tape, x, nodes, training, rng).output

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode forward on a plain array."""
        tape = Tape()
        return forward_train(self, tape, tape.leaf(x)).output.value


def init_hydra_linear(w0, b0, spec: AdapterSpec, rng: Rng) -> HydraLinear:
    """Wrap a frozen ``(w0, b0)`` with freshly initialised branches.

    Down-projections are Gaussian (parallel drawn before sequential), up-projections
    are zero, so the new layer computes exactly ``w0 x + b0``.
    """
    w0 = np.array(w0, dtype=np.float64)
    b0 = np.array(b0, dtype=np.float64).reshape(-1)
    if w0.ndim != 2 or b0.shape != (w0.shape[0],):
        raise ShapeError(f"init_hydra_linear: weight {w0.shape} and bias {b0.shape} are inconsistent")
    d, k = w0.shape
    r_a, r_b = spec.parallel_rank, spec.sequential_rank
    if r_a > min(d, k):
        raise ContractError(f"parallel rank {r_a} exceeds min(d, k) = {min(d, k)}")
    if r_b > d:
        raise ContractError(f"sequential rank {r_b} exceeds d = {d}")
    return HydraLinear(
        w0=w0,
        b0=b0,
        a_up=np.zeros((d, r_a)),
        a_down=gaussian(rng, r_a, k, spec.init_sigma),
        b_up=np.zeros((d, r_b)),
        b_down=gaussian(rng, r_b, d, spec.init_sigma),
        spec=spec,
    )


def forward_train(
    layer: HydraLinear,
    tape: Tape,
    x: Node,
    nodes: dict[str, Node] | None = None,
    training: bool = False,
    rng: Rng | None = None,
) -> BranchOutputs:
    """Three-branch forward. Dropout hits each branch's input only when training."""
    if x.shape[1] != layer.in_features:
        raise ShapeError(f"HydraLinear expects {layer.in_features} input features, got {x.shape[1]}")
    if nodes is None:
        nodes = layer.leaves(tape)
    spec = layer.spec
    f = tape.add_bias_rowwise(tape.matmul_nt(x, nodes["w0"]), nodes["b0"])
    h = f
    parallel = sequential = None
    if spec.parallel_rank:
        xin = tape.dropout(x, spec.adapter_dropout, rng, training)
        parallel = tape.matmul_nt(tape.matmul_nt(xin, nodes["a_down"]), nodes["a_up"])
        if spec.scaling != 1.0:
            parallel = tape.scale(parallel, spec.scaling)
        h = tape.add(h, parallel)
    if spec.sequential_rank:
        fin = tape.dropout(f, spec.adapter_dropout, rng, training)
        sequential = tape.matmul_nt(tape.matmul_nt(fin, nodes["b_down"]), nodes["b_up"])
        if spec.scaling != 1.0:
            sequential = tape.scale(sequential, spec.scaling)
        h = tape.add(h, sequential)
    return BranchOutputs(pretrained=f, parallel=parallel, sequential=sequential, output=h)


def effective_updates(layer: HydraLinear) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(A, B W0)`` as seen by the input; includes ``spec.scaling``."""
    s = layer.spec.scaling
    d, k = layer.w0.shape
    a = s * (layer.a_up @ layer.a_down) if layer.spec.parallel_rank else np.zeros((d, k))
    bw0 = s * (layer.b_up @ layer.b_down) @ layer.w0 if layer.spec.sequential_rank else np.zeros((d, k))
    return a, bw0


def fold(layer: HydraLinear) -> MergedLinear:
    s = layer.spec.scaling
    w = layer.w0.copy()
    b = layer.b0.copy()
    if layer.spec.parallel_rank:
        w = w + s * (layer.a_up @ layer.a_down)
    if layer.spec.sequential_rank:
        big_b = s * (layer.b_up @ layer.b_down)
        w = w + big_b @ layer.w0
        b = b + big_b @ layer.b0
    return MergedLinear(w=w, b=b)


def trainable_param_count(layer: HydraLinear) -> int:
    d, k = layer.w0.shape
    return layer.spec.parallel_rank * (d + k) + layer.spec.sequential_rank * 2 * d


def adapter_param_count(d: int, k: int, spec: AdapterSpec) -> int:
    """Same count as :func:`trainable_param_count` without building a layer."""
    return spec.parallel_rank * (d + k) + spec.sequential_rank * 2 * d


# Single-branch reference layers, written directly from their own equations.


def lora_forward(tape: Tape, x: Node, nodes: dict[str, Node], dropout: float = 0.0,
                 rng: Rng | None = None, training: bool = False, scaling: float = 1.0) -> Node:
    """h = W0 x + b0 + A_up A_down x."""
    base = tape.add_bias_rowwise(tape.matmul_nt(x, nodes["w0"]), nodes["b0"])
    delta = tape.matmul_nt(tape.matmul_nt(tape.dropout(x, dropout, rng, training), nodes["a_down"]), nodes["a_up"])
    if scaling != 1.0:
        delta = tape.scale(delta, scaling)
    return tape.add(base, delta)


def seqlora_forward(tape: Tape, x: Node, nodes: dict[str, Node], dropout: float = 0.0,
                    rng: Rng | None = None, training: bool = False, scaling: float = 1.0) -> Node:
    """h = f(x) + B_up B_down f(x) with f(x) = W0 x + b0."""
    base = tape.add_bias_rowwise(tape.matmul_nt(x, nodes["w0"]), nodes["b0"])
    delta = tape.matmul_nt(tape.matmul_nt(tape.dropout(base, dropout, rng, training), nodes["b_down"]), nodes["b_up"])
    if scaling != 1.0:
        delta = tape.scale(delta, scaling)
    return tape.add(base, delta)
