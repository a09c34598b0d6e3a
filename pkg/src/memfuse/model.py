"""The memorability predictor: per-modality projection, pooling, cross-modal
attention and a sigmoid fusion head.

Pipeline for a batch, with k configured modalities and latent width D::

    x_m (B, L_m, d_m) --Linear/LayerNorm/Dropout--> (B, L_m, D)
        --pool (self-attention+mean | mean | max)--> p_m (B, D)
        --[cross modes] p_m attends over {p_o : o != m}--> c_m (B, D)
    concat_m c_m (B, k*D) --fusion head--> sigmoid --> (B,)

Parameter census (``param_count``), with H the fusion hidden width::

    per modality  d_m*D + D          projection linear
                  2*D                layer norm
                  4*(D*D + D)        self-attention block   (self_and_cross, self_only)
                  4*(D*D + D)        cross-attention block  (self_and_cross, cross_with_average)
    fusion        k*D*H + H + H + 1  head="mlp"
                  k*D + 1            head="literal"
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import MODALITIES, Batch, Sample, canonical_modalities, collate
from .errors import ChecksumError, ConfigError, ConfigMismatchError, DataError, FormatError, TruncationError, VersionError
from .layers import Dropout, LayerNorm, Linear, MultiHeadAttention, Projection, pool
from .tensor import Tensor

ATTENTION_MODES = ("self_and_cross", "self_only", "cross_with_average", "average_only", "max_only")
FUSION_HEADS = ("mlp", "literal")
_POOL_FOR_MODE = {
    "self_and_cross": "self_attention",
    "self_only": "self_attention",
    "cross_with_average": "average",
    "average_only": "average",
    "max_only": "max",
}
_CROSS_MODES = ("self_and_cross", "cross_with_average")


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...] = MODALITIES
    input_dims: dict[str, int] = field(default_factory=dict)
    latent_dim: int = 1024
    num_heads: int = 8
    dropout_rate: float = 0.1
    attention_mode: str = "self_and_cross"
    fusion_hidden_dim: int = 512
    fusion_head: str = "mlp"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        mods = tuple(self.modalities)
        if len(set(mods)) == len(mods) and set(mods) <= set(MODALITIES):
            mods = canonical_modalities(mods)
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "input_dims", {k: int(v) for k, v in dict(self.input_dims).items()})

    @property
    def pool_mode(self) -> str:
        return _POOL_FOR_MODE[self.attention_mode]

    @property
    def uses_self_attention(self) -> bool:
        return self.pool_mode == "self_attention"

    @property
    def uses_cross_attention(self) -> bool:
        return self.attention_mode in _CROSS_MODES

    def violations(self) -> list[str]:
        errs = []
        mods = self.modalities
        if not mods:
            errs.append("modalities must be a non-empty subset of video/audio/text")
        bad = [m for m in mods if m not in MODALITIES]
        if bad:
            errs.append(f"unknown modalities {bad}")
        if len(set(mods)) != len(mods):
            errs.append("modalities contain duplicates")
        if set(self.input_dims) != set(mods):
            errs.append(f"input_dims keys {sorted(self.input_dims)} must equal modalities {sorted(mods)}")
        for m, d in self.input_dims.items():
            if d <= 0:
                errs.append(f"input_dims[{m}] must be positive, got {d}")
        if self.latent_dim <= 0:
            errs.append(f"latent_dim must be positive, got {self.latent_dim}")
        if self.num_heads <= 0:
            errs.append(f"num_heads must be positive, got {self.num_heads}")
        elif self.latent_dim > 0 and self.latent_dim % self.num_heads:
            errs.append(f"latent_dim {self.latent_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            errs.append(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.attention_mode not in ATTENTION_MODES:
            errs.append(f"attention_mode {self.attention_mode!r} not one of {ATTENTION_MODES}")
        elif self.attention_mode in _CROSS_MODES and len(mods) < 2:
            errs.append(f"attention_mode {self.attention_mode!r} needs at least 2 modalities")
        if self.fusion_hidden_dim <= 0:
            errs.append(f"fusion_hidden_dim must be positive, got {self.fusion_hidden_dim}")
        if self.fusion_head not in FUSION_HEADS:
            errs.append(f"fusion_head {self.fusion_head!r} not one of {FUSION_HEADS}")
        if self.layer_norm_eps <= 0:
            errs.append("layer_norm_eps must be positive")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.violations()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["input_dims"] = {m: self.input_dims[m] for m in sorted(self.input_dims)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        d = dict(d)
        if "modalities" in d:
            d["modalities"] = tuple(d["modalities"])
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def replace(self, **changes) -> "ModelConfig":
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)


def param_count(config: ModelConfig) -> int:
    D, H, k = config.latent_dim, config.fusion_hidden_dim, len(config.modalities)
    block = 4 * (D * D + D)
    total = 0
    for m in config.modalities:
        total += config.input_dims[m] * D + D + 2 * D
        total += block * config.uses_self_attention + block * config.uses_cross_attention
    total += k * D * H + 2 * H + 1 if config.fusion_head == "mlp" else k * D + 1
    return total


@dataclass
class ModelParams:
    projections: dict[str, Projection]
    self_attention: dict[str, MultiHeadAttention]
    cross_attention: dict[str, MultiHeadAttention]
    fusion: list[Linear]
    fusion_dropout: Dropout

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every learned tensor in the fixed checkpoint order."""
        out = []
        for m in MODALITIES:
            if m in self.projections:
                out += [(p.name, p) for p in self.projections[m].parameters()]
            if m in self.self_attention:
                out += [(p.name, p) for p in self.self_attention[m].parameters()]
            if m in self.cross_attention:
                out += [(p.name, p) for p in self.cross_attention[m].parameters()]
        for lin in self.fusion:
            out += [(p.name, p) for p in lin.parameters()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        clone = _skeleton(self)
        for (_, dst), (_, src) in zip(clone.named_parameters(), self.named_parameters()):
            dst.data = src.data.copy()
        return clone


def _skeleton(params: ModelParams) -> ModelParams:
    def lin(l: Linear) -> Linear:
        return Linear(Tensor.param(l.weight.data.copy(), l.weight.name), Tensor.param(l.bias.data.copy(), l.bias.name))

    def mha(a: MultiHeadAttention) -> MultiHeadAttention:
        return MultiHeadAttention(a.num_heads, lin(a.w_q), lin(a.w_k), lin(a.w_v), lin(a.w_o))

    proj = {
        m: Projection(lin(p.linear), LayerNorm(Tensor.param(p.norm.gain.data.copy(), p.norm.gain.name),
                                               Tensor.param(p.norm.shift.data.copy(), p.norm.shift.name), p.norm.eps),
                      Dropout(p.dropout.rate))
        for m, p in params.projections.items()
    }
    return ModelParams(
        proj,
        {m: mha(a) for m, a in params.self_attention.items()},
        {m: mha(a) for m, a in params.cross_attention.items()},
        [lin(l) for l in params.fusion],
        Dropout(params.fusion_dropout.rate),
    )


def build(config: ModelConfig, seed: int) -> ModelParams:
    """Initialize parameters deterministically from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    D = config.latent_dim
    proj, self_attn, cross_attn = {}, {}, {}
    for m in config.modalities:
        proj[m] = Projection(
            Linear.init(rng, config.input_dims[m], D, f"{m}.proj"),
            LayerNorm.init(D, config.layer_norm_eps, f"{m}.norm"),
            Dropout(config.dropout_rate),
        )
        if config.uses_self_attention:
            self_attn[m] = MultiHeadAttention.init(rng, D, config.num_heads, f"{m}.self_attn")
        if config.uses_cross_attention:
            cross_attn[m] = MultiHeadAttention.init(rng, D, config.num_heads, f"{m}.cross_attn")
    k = len(config.modalities)
    if config.fusion_head == "mlp":
        fusion = [Linear.init(rng, k * D, config.fusion_hidden_dim, "fusion.hidden"),
                  Linear.init(rng, config.fusion_hidden_dim, 1, "fusion.out")]
    else:
        fusion = [Linear.init(rng, k * D, 1, "fusion.out")]
    return ModelParams(proj, self_attn, cross_attn, fusion, Dropout(config.dropout_rate))


# ----------------------------------------------------------------- forward

def forward_batch(params: ModelParams, config: ModelConfig, batch: Batch, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Predictions in (0, 1) for every sample of a padded batch, shape (B,)."""
    b = len(batch)
    pooled = {}
    for m in config.modalities:
        if m not in batch.x:
            raise DataError(f"batch has no {m} embeddings")
        x = batch.x[m]
        if x.shape[-1] != config.input_dims[m]:
            raise DataError(f"{m} embeddings have width {x.shape[-1]}, model expects {config.input_dims[m]}")
        h = params.projections[m](Tensor(x), rng, training)
        pooled[m] = pool(h, batch.mask[m], config.pool_mode, params.self_attention.get(m))

    D = config.latent_dim
    if config.uses_cross_attention:
        attended = []
        for m in config.modalities:
            query = T.reshape(pooled[m], (b, 1, D))
            context = T.concat([T.reshape(pooled[o], (b, 1, D)) for o in config.modalities if o != m], axis=1)
            attended.append(T.reshape(params.cross_attention[m](query, context), (b, D)))
    else:
        attended = [pooled[m] for m in config.modalities]
    fused = T.concat(attended, axis=-1) if len(attended) > 1 else attended[0]

    drop = params.fusion_dropout
    if config.fusion_head == "mlp":
        hidden = drop(T.relu(params.fusion[0](fused)), rng, training)
        logit = params.fusion[1](hidden)
    else:
        logit = params.fusion[0](T.relu(drop(fused, rng, training)))
    return T.reshape(T.sigmoid(logit), (b,))


def forward(params: ModelParams, config: ModelConfig, sample: Sample, mode: str = "eval",
            rng: np.random.Generator | None = None) -> float:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    missing = [m for m in config.modalities if m not in sample.sequences]
    if missing:
        raise DataError(f"sample {sample.id!r} lacks modalities {missing}")
    batch = collate([sample], config.modalities)
    return float(forward_batch(params, config, batch, mode == "train", rng).data[0])


def predict(params: ModelParams, config: ModelConfig, samples, batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions for a list of samples, in input order."""
    out = np.empty(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        for s in chunk:
            missing = [m for m in config.modalities if m not in s.sequences]
            if missing:
                raise DataError(f"sample {s.id!r} lacks modalities {missing}")
        out[start:start + len(chunk)] = forward_batch(params, config, collate(chunk, config.modalities)).data
    return out


# -------------------------------------------------------------------- loss

def _check_labels(labels: np.ndarray) -> None:
    if np.any((labels < 0.0) | (labels > 1.0)) or not np.isfinite(labels).all():
        raise DataError(f"labels must lie in [0, 1]; got range [{labels.min()}, {labels.max()}]")


def mse_loss(pred: Tensor, labels) -> Tensor:
    """Batch-mean squared error as a differentiable scalar."""
    y = np.asarray(labels, dtype=np.float64).reshape(pred.shape)
    _check_labels(y)
    diff = T.sub(pred, Tensor(y))
    return T.mean(T.mul(diff, diff))


def loss(prediction: float, label: float) -> float:
    if not 0.0 <= prediction <= 1.0:
        raise DataError(f"prediction {prediction} outside [0, 1]")
    _check_labels(np.array([label], dtype=np.float64))
    return (prediction - label) ** 2


# ------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"MMEM"
CHECKPOINT_VERSION = 1


def serialize(params: ModelParams, config: ModelConfig) -> bytes:
    """Checkpoint bytes (little-endian).

    ``"MMEM"`` | u16 version | u32 n + n bytes canonical config JSON |
    u32 tensor count | per tensor in ``named_parameters`` order:
    u16 n + name, u8 ndim, u32 extents..., u64 count, count float64 |
    u32 CRC-32 of all preceding bytes.
    """
    cfg = config.canonical_json().encode()
    named = params.named_parameters()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(cfg)), cfg, struct.pack("<I", len(named))]
    for name, p in named:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape))
        parts.append(struct.pack("<Q", p.data.size))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, blob: bytes, end: int):
        self.blob, self.pos, self.end = blob, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncationError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _parse(blob: bytes):
    r = _Reader(blob, len(blob) - 4)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<HI")
    cfg_text = r.take(cfg_len).decode("utf-8", errors="replace")
    (count,) = r.unpack("<I")
    tensors = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (size,) = r.unpack("<Q")
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64)
        tensors.append((name, tuple(shape), data))
    if r.pos != r.end:
        raise FormatError(f"checkpoint has {r.end - r.pos} unexpected trailing bytes")
    return version, cfg_text, tensors


def deserialize(blob: bytes, expected: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    if len(blob) < 4 + 6 + 4 + 4:
        raise TruncationError(f"checkpoint of {len(blob)} bytes is too short")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        # Distinguish a cut-off file from corrupted content where the structure allows it.
        try:
            _parse(blob)
        except TruncationError:
            raise
        except FormatError:
            pass
        raise ChecksumError("checkpoint CRC-32 mismatch")
    version, cfg_text, tensors = _parse(blob)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        config = ModelConfig.from_dict(json.loads(cfg_text))
    except (json.JSONDecodeError, TypeError) as e:
        raise FormatError(f"checkpoint config block unreadable: {e}") from e
    config.validate()
    if expected is not None:
        mine, theirs = config.to_dict(), expected.to_dict()
        diff = {k: (mine[k], theirs[k]) for k in mine if mine[k] != theirs[k]}
        if diff:
            raise ConfigMismatchError(diff)
    params = build(config, seed=0)
    named = params.named_parameters()
    if [n for n, _ in named] != [t[0] for t in tensors]:
        raise FormatError("checkpoint tensor names do not match the census implied by its config")
    for (name, p), (_, shape, data) in zip(named, tensors):
        if shape != p.shape or data.size != p.data.size:
            raise FormatError(f"tensor {name}: checkpoint shape {shape}, config implies {p.shape}")
        p.data = data.reshape(shape)
    return params, config


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    Path(path).write_bytes(serialize(params, config))


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    return deserialize(Path(path).read_bytes(), expected)
