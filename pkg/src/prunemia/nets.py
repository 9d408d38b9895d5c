"""Fully-connected classifiers and the self-attention attack network.

Parameters live in plain ``dict[str, Tensor]`` maps keyed ``"<layer>.<kind>"``;
linear weights are stored ``(out_features, in_features)`` so a row is one
neuron's incoming weights.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor, ShapeError, concat, dropout, layer_norm, matmul, no_grad

CHECKPOINT_MAGIC = b"PRUNEMIA-CKPT-1\n"


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_in = shape[1]
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(x: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    w = params[f"{name}.weight"]
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear[{name}]", x.shape, w.shape)
    return matmul(x, w.swap_last()) + params[f"{name}.bias"]


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _leaf_params(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


# ---------------------------------------------------------------------------
# Target / shadow classifier


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (256, 128)
    activation: str = "relu"
    use_scales: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or self.num_classes <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"all layer widths must be positive: {self}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def hidden_layers(self) -> list[str]:
        return [f"fc{i}" for i in range(len(self.hidden))]


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    widths = [spec.input_dim, *spec.hidden, spec.num_classes]
    params: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"fc{i}.weight"] = kaiming_uniform(rng, (fan_out, fan_in))
        params[f"fc{i}.bias"] = np.zeros(fan_out)
        if spec.use_scales and i < len(spec.hidden):
            params[f"fc{i}.scale"] = np.ones(fan_out)
    return params


def mlp_logits(
    params: Mapping[str, Tensor],
    x: Tensor,
    num_layers: int,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    h = x
    for i in range(num_layers):
        h = linear(h, params, f"fc{i}")
        if i < num_layers - 1:
            scale = params.get(f"fc{i}.scale")
            if scale is not None:
                h = h * scale
            h = dropout(h.relu(), dropout_rate, rng, training)
    return h


def mlp_forward(params: Mapping[str, np.ndarray], batch: np.ndarray) -> np.ndarray:
    """Posterior rows for ``batch`` under frozen parameters."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ShapeError("mlp_forward", batch.shape)
    num_layers = sum(1 for k in params if k.endswith(".weight"))
    with no_grad():
        tensors = {k: Tensor(v) for k, v in params.items()}
        return mlp_logits(tensors, Tensor(batch), num_layers).softmax().data


class MLP:
    """A classifier: spec plus trainable parameters."""

    def __init__(self, spec: MlpSpec, params: Mapping[str, np.ndarray]):
        self.spec = spec
        self.params = _leaf_params(params)
        expected = set(init_mlp(spec, np.random.default_rng(0)))
        if set(self.params) != expected:
            raise ValueError(f"parameter names {sorted(self.params)} do not match spec")
        widths = [spec.input_dim, *spec.hidden, spec.num_classes]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if self.params[f"fc{i}.weight"].shape != (fan_out, fan_in):
                raise ShapeError("MLP", self.params[f"fc{i}.weight"].shape, (fan_out, fan_in))

    @classmethod
    def initialise(cls, spec: MlpSpec, rng: np.random.Generator) -> "MLP":
        return cls(spec, init_mlp(spec, rng))

    def logits(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = _as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError("mlp_forward", x.shape, (None, self.spec.input_dim))
        return mlp_logits(self.params, x, self.spec.num_layers, self.spec.dropout, training, rng)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.logits(np.asarray(x, dtype=np.float64)).softmax().data

    __call__ = predict_proba

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def copy(self) -> "MLP":
        return MLP(self.spec, self.state_dict())


# ---------------------------------------------------------------------------
# Self-attention attack network


@dataclass(frozen=True)
class AttentionAttackSpec:
    num_classes: int
    model_dim: int = 64
    heads: int = 4
    blocks: int = 3
    dropout: float = 0.2
    activation: str = "gelu"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")


TOKEN_NAMES = ("posterior", "sensitivity", "label")


def init_samia(spec: AttentionAttackSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, k = spec.model_dim, spec.num_classes
    params: dict[str, np.ndarray] = {}

    def add_linear(name: str, fan_in: int, fan_out: int) -> None:
        params[f"{name}.weight"] = kaiming_uniform(rng, (fan_out, fan_in))
        params[f"{name}.bias"] = np.zeros(fan_out)

    for token in TOKEN_NAMES:
        add_linear(f"embed_{token}", k, d)
    for b in range(spec.blocks):
        for proj in ("q", "k", "v", "o"):
            add_linear(f"block{b}.{proj}", d, d)
        add_linear(f"block{b}.ff", d, d)
        for ln in ("ln1", "ln2"):
            params[f"block{b}.{ln}.gamma"] = np.ones(d)
            params[f"block{b}.{ln}.beta"] = np.zeros(d)
    add_linear("head1", d, d)
    add_linear("head2", d, 2)
    return params


def multi_head_attention(
    tokens: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over the token axis.

    ``tokens`` is ``(L, D)`` or ``(B, L, D)``. Returns the output projection
    and the attention weights ``(..., heads, L, L)``.
    """
    single = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if single else tokens
    batch, length, dim = x.shape
    dh = dim // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, length, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, params, f"{prefix}.q"))
    k = split(linear(x, params, f"{prefix}.k"))
    v = split(linear(x, params, f"{prefix}.v"))
    weights = (matmul(q, k.swap_last()) * (1.0 / math.sqrt(dh))).softmax()
    mixed = matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, length, dim)
    out = linear(mixed, params, f"{prefix}.o")
    w = weights.data
    if single:
        return out.reshape(length, dim), w[0]
    return out, w


def attention_block(
    tokens: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    spec: AttentionAttackSpec,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if not np.all(np.isfinite(tokens.data)):
        raise ValueError("attention_block: non-finite input tokens")
    attended, _ = multi_head_attention(tokens, params, prefix, spec.heads)
    h = layer_norm(
        tokens + dropout(attended, spec.dropout, rng, training),
        params[f"{prefix}.ln1.gamma"],
        params[f"{prefix}.ln1.beta"],
    )
    ff = linear(h, params, f"{prefix}.ff").gelu()
    return layer_norm(
        h + dropout(ff, spec.dropout, rng, training),
        params[f"{prefix}.ln2.gamma"],
        params[f"{prefix}.ln2.beta"],
    )


class SamiaNet:
    """Attack network over (posterior, sensitivity, one-hot label) tokens."""

    def __init__(self, spec: AttentionAttackSpec, params: Mapping[str, np.ndarray]):
        self.spec = spec
        self.params = _leaf_params(params)

    @classmethod
    def initialise(cls, spec: AttentionAttackSpec, rng: np.random.Generator) -> "SamiaNet":
        return cls(spec, init_samia(spec, rng))

    def logits(
        self,
        posterior,
        sensitivity,
        label_onehot,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        k = self.spec.num_classes
        features = [_as_tensor(posterior), _as_tensor(sensitivity), _as_tensor(label_onehot)]
        for name, f in zip(TOKEN_NAMES, features):
            if f.ndim != 2 or f.shape[1] != k:
                raise ShapeError(f"samia_forward[{name}]", f.shape, (None, k))
        batch = features[0].shape[0]
        tokens = concat(
            [
                linear(f, self.params, f"embed_{name}").reshape(batch, 1, self.spec.model_dim)
                for name, f in zip(TOKEN_NAMES, features)
            ],
            axis=1,
        )
        for b in range(self.spec.blocks):
            tokens = attention_block(tokens, self.params, f"block{b}", self.spec, training, rng)
        pooled = tokens.mean(axis=1)
        hidden = dropout(linear(pooled, self.params, "head1").relu(), self.spec.dropout, rng, training)
        return linear(hidden, self.params, "head2")

    def predict_proba(self, posterior, sensitivity, label_onehot) -> np.ndarray:
        """Membership posterior; column 1 is the member probability."""
        with no_grad():
            return self.logits(posterior, sensitivity, label_onehot).softmax().data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}


def samia_forward(spec: AttentionAttackSpec, params: Mapping[str, np.ndarray], posterior,
                  sensitivity, label_onehot) -> np.ndarray:
    return SamiaNet(spec, params).predict_proba(
        np.atleast_2d(posterior), np.atleast_2d(sensitivity), np.atleast_2d(label_onehot)
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path: str | Path,
    spec: MlpSpec | AttentionAttackSpec,
    params: Mapping[str, np.ndarray],
    mask: Mapping[str, np.ndarray] | None = None,
    extra: dict | None = None,
) -> None:
    """Write magic header + npz payload (params, optional mask, JSON metadata)."""
    meta = {
        "kind": type(spec).__name__,
        "spec": asdict(spec),
        "has_mask": mask is not None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    if mask is not None:
        arrays.update({f"mask/{k}": np.asarray(v) for k, v in mask.items()})
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(buf.getvalue())


@dataclass
class Checkpoint:
    spec: MlpSpec | AttentionAttackSpec
    params: dict[str, np.ndarray]
    mask: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a PRUNEMIA-CKPT-1 checkpoint")
    with np.load(io.BytesIO(blob[len(CHECKPOINT_MAGIC):])) as npz:
        meta = json.loads(npz["__meta__"].tobytes().decode())
        params = {k[6:]: npz[k] for k in npz.files if k.startswith("param/")}
        mask = {k[5:]: npz[k] for k in npz.files if k.startswith("mask/")} if meta["has_mask"] else None
    spec_cls = {"MlpSpec": MlpSpec, "AttentionAttackSpec": AttentionAttackSpec}[meta["kind"]]
    fields = dict(meta["spec"])
    if "hidden" in fields:
        fields["hidden"] = tuple(fields["hidden"])
    return Checkpoint(spec_cls(**fields), params, mask, meta["extra"])
