"""The trainable scorer: embeddings, feature-extraction network, project network.

Scoring a batch of (head, relation) queries against every entity:

    v   = feature_stack(BN+dropout(h || r))     batch x d
    t'  = project_stack(entity_table)           |E| x d
    psi = v t'^T                                batch x |E|

The feature stack is DeepE blocks by default (the first maps 2d -> d through
a Ws projection, the rest are d -> d); it can be swapped for ResNet blocks to
compare trainability at depth. The project stack is ResNet blocks, at most
two, or nothing at all, in which case t' is the entity table unchanged.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import BatchNormLayer, DeepEBlock, DropoutLayer, ResNetBlock
from .numkernel import Rng, matmul, resolve_dtype, xavier_normal_init

FEATURE_BLOCK_KINDS = ("deepe", "resnet")


@dataclass
class DropoutSpec:
    """Dropout ratios: input layer, block FC layers, identity mapping, project FC layers."""

    p_input: float = 0.0
    p_fc: float = 0.0
    p_identity: float = 0.0
    p_resnet_fc: float = 0.0

    def __post_init__(self):
        for name, p in asdict(self).items():
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {p}")


@dataclass
class ModelConfig:
    dim: int
    n_deepe_blocks: int = 1
    n_resnet_blocks: int = 1
    resnet_inner_layers: int = 2
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    seed: int = 0
    feature_block_kind: str = "deepe"
    gate_linear: bool = True
    gate_nonlinear: bool = True
    activation: str = "relu"
    precision: int = 32

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.n_deepe_blocks < 1:
            raise ValueError(
                "n_deepe_blocks must be >= 1: the first block carries the 2d -> d projection"
            )
        if not 0 <= self.n_resnet_blocks <= 2:
            raise ValueError(
                f"n_resnet_blocks must be 0, 1 or 2, got {self.n_resnet_blocks}"
            )
        if self.resnet_inner_layers < 1:
            raise ValueError(
                f"resnet_inner_layers must be >= 1, got {self.resnet_inner_layers}"
            )
        if self.feature_block_kind not in FEATURE_BLOCK_KINDS:
            raise ValueError(f"feature_block_kind must be one of {FEATURE_BLOCK_KINDS}")
        resolve_dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["dropout"] = DropoutSpec(**d.get("dropout", {}))
        return cls(**d)


class DeepEModel:
    def __init__(self, config: ModelConfig, n_entities: int, n_relations: int):
        if n_entities < 1 or n_relations < 1:
            raise ValueError("model needs at least one entity and one relation")
        self.config = config
        self.n_entities = n_entities
        self.n_relations = n_relations
        self.dtype = resolve_dtype(config.precision)
        d = config.dim
        drop = config.dropout
        init = Rng(config.seed).child(0)

        self.entity_emb = xavier_normal_init(n_entities, d, init, self.dtype)
        self.relation_emb = xavier_normal_init(2 * n_relations, d, init, self.dtype)
        self.entity_grad = np.zeros_like(self.entity_emb)
        self.relation_grad = np.zeros_like(self.relation_emb)

        self.input_bn = BatchNormLayer(2 * d, dtype=self.dtype)
        self.input_drop = DropoutLayer(drop.p_input)

        self.feature_blocks = []
        for i in range(config.n_deepe_blocks):
            in_dim = 2 * d if i == 0 else d
            if config.feature_block_kind == "deepe":
                block = DeepEBlock(
                    in_dim,
                    d,
                    init,
                    self.dtype,
                    p_fc=drop.p_fc,
                    p_identity=drop.p_identity,
                    gate_linear=config.gate_linear,
                    gate_nonlinear=config.gate_nonlinear,
                    activation=config.activation,
                )
            else:
                block = ResNetBlock(
                    in_dim, d, 2, init, self.dtype,
                    p_fc=drop.p_fc, activation=config.activation,
                )
            self.feature_blocks.append(block)

        self.project_blocks = [
            ResNetBlock(
                d, d, config.resnet_inner_layers, init, self.dtype,
                p_fc=drop.p_resnet_fc, activation=config.activation,
            )
            for _ in range(config.n_resnet_blocks)
        ]

        self._heads = None
        self._rels = None
        self._v = None
        self._tprime = None

    # -- forward ----------------------------------------------------------

    def _check_ids(self, ids: np.ndarray, bound: int, what: str):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= bound):
            raise ValueError(f"{what} id out of range [0, {bound})")
        return ids

    def feature_stack_forward(self, x: np.ndarray, mode: str, rng: Rng | None = None) -> np.ndarray:
        """Input BN -> input dropout -> stacked feature blocks, on a raw (h || r) batch."""
        h = self.input_bn.forward(x, mode)
        h = self.input_drop.forward(h, mode, rng)
        for block in self.feature_blocks:
            h = block.forward(h, mode, rng)
        return h

    def feature_forward(self, heads, rels, mode: str, rng: Rng | None = None) -> np.ndarray:
        heads = self._check_ids(heads, self.n_entities, "entity")
        rels = self._check_ids(rels, 2 * self.n_relations, "relation")
        x = np.concatenate([self.entity_emb[heads], self.relation_emb[rels]], axis=1)
        v = self.feature_stack_forward(x, mode, rng)
        self._heads, self._rels, self._v = heads, rels, v
        return v

    def project_forward(self, mode: str, rng: Rng | None = None) -> np.ndarray:
        t = self.entity_emb
        for block in self.project_blocks:
            t = block.forward(t, mode, rng)
        self._tprime = t
        return t

    def score_all(self, heads, rels, mode: str, rng: Rng | None = None) -> np.ndarray:
        v = self.feature_forward(heads, rels, mode, rng)
        tprime = self.project_forward(mode, rng)
        return matmul(v, tprime.T)

    # -- backward ---------------------------------------------------------

    def backward(self, dscores: np.ndarray):
        """Accumulate exact gradients of score_all into every parameter buffer."""
        if self._v is None or self._tprime is None:
            raise RuntimeError("model backward called before score_all")
        dv = dscores @ self._tprime
        dtprime = dscores.T @ self._v

        dt = dtprime.astype(self.dtype, copy=False)
        for block in reversed(self.project_blocks):
            dt = block.backward(dt)
        self.entity_grad += dt

        dx = dv.astype(self.dtype, copy=False)
        for block in reversed(self.feature_blocks):
            dx = block.backward(dx)
        dx = self.input_drop.backward(dx)
        dx = self.input_bn.backward(dx)
        d = self.config.dim
        np.add.at(self.entity_grad, self._heads, dx[:, :d])
        np.add.at(self.relation_grad, self._rels, dx[:, d:])

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self):
        out = [
            ("entity_emb", self.entity_emb, self.entity_grad),
            ("relation_emb", self.relation_emb, self.relation_grad),
        ]
        out.extend(self.input_bn.named_params("input_bn"))
        for i, block in enumerate(self.feature_blocks):
            out.extend(block.named_params(f"feature.{i}"))
        for i, block in enumerate(self.project_blocks):
            out.extend(block.named_params(f"project.{i}"))
        return out

    def named_state(self):
        out = list(self.input_bn.named_state("input_bn"))
        for i, block in enumerate(self.feature_blocks):
            out.extend(block.named_state(f"feature.{i}"))
        for i, block in enumerate(self.project_blocks):
            out.extend(block.named_state(f"project.{i}"))
        return out

    def zero_grad(self):
        self.entity_grad.fill(0)
        self.relation_grad.fill(0)
        self.input_bn.zero_grad()
        for block in self.feature_blocks + self.project_blocks:
            block.zero_grad()

    def state_dict(self) -> dict:
        state = {name: p.copy() for name, p, _ in self.named_parameters()}
        state.update({name: s.copy() for name, s in self.named_state()})
        return state

    def load_state_dict(self, state: dict):
        own = {name: p for name, p, _ in self.named_parameters()}
        own.update(dict(self.named_state()))
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name} has shape {src.shape}, expected {arr.shape}")
            arr[...] = src.astype(arr.dtype)

    # -- audit --------------------------------------------------------------

    def parameter_count_audit(self) -> dict:
        """Count every learnable scalar two independent ways and insist they agree."""
        embedding = self.entity_emb.size + self.relation_emb.size
        block = sum(p.size for name, p, _ in self.named_parameters()) - embedding

        d = self.config.dim
        closed = self.n_entities * d + 2 * self.n_relations * d
        closed += 2 * (2 * d)  # input BN scale/shift
        # Both block kinds carry two weight layers plus per-layer BN; the first
        # block additionally needs the 2d -> d shortcut projection.
        for i in range(self.config.n_deepe_blocks):
            in_dim = 2 * d if i == 0 else d
            ws = (d * in_dim + d) if in_dim != d else 0
            closed += ws + (d * in_dim + d) + (d * d + d) + 2 * (2 * d)
        m = self.config.resnet_inner_layers
        closed += self.config.n_resnet_blocks * m * (d * d + d + 2 * d)

        total = embedding + block
        if total != closed:
            raise AssertionError(
                f"parameter audit mismatch: enumerated {total}, closed form {closed}"
            )
        return {
            "embedding_params": embedding,
            "block_params": block,
            "total": total,
            "closed_form": closed,
        }
