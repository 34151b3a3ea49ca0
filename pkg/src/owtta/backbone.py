"""Frozen toy vision transformer with per-layer token traces.

Pre-norm blocks, MLP ratio 2, a prepended class token and learned position
embeddings. The patch embedding is a fixed linear map from raw token
features to ``dim``. Everything except the LayerNorm affine parameters is
frozen; the adapters live alongside the backbone in :class:`ModelState`.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .aan import AANParams, affine_params, apply_affine, pool_and_combine
from .hln import LadderAggregator, OODExtractor
from .tensor import ShapeError, Tensor

MLP_RATIO = 2
MAGIC = b"OWTTA001"


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    dim: int = 32
    heads: int = 2
    patches: int = 16
    classes: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "dim", "heads", "patches", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"BackboneConfig.{name} must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass
class Classifier:
    """Affine head shared by the class-token path and the OOD-token path."""

    w: Tensor  # (d, C)
    b: Tensor  # (C,)

    def __call__(self, x: Tensor) -> Tensor:
        return classify(self, x)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


def classify(head: Classifier, token) -> Tensor:
    token = T.as_tensor(token)
    if token.shape[-1] != head.w.shape[0]:
        raise ShapeError(f"classify: token dim {token.shape[-1]} != {head.w.shape[0]}")
    if token.ndim == 1:
        out = T.reshape(token, (1, token.shape[0])) @ head.w + head.b
        return T.reshape(out, (out.shape[-1],))
    return token @ head.w + head.b


@dataclass
class LayerTrace:
    cls: list[Tensor] = field(default_factory=list)  # L x (N, d)
    patches: list[Tensor] = field(default_factory=list)  # L x (N, P, d)
    qkv: list[tuple[Tensor, Tensor, Tensor]] = field(default_factory=list)  # pre-affine

    def __len__(self) -> int:
        return len(self.cls)


def _frozen_names(cfg: BackboneConfig) -> list[str]:
    names = ["patch_embed.w", "patch_embed.b", "cls_token", "pos_embed"]
    for l in range(cfg.layers):
        names += [f"blocks.{l}.{n}" for n in ("qkv.w", "qkv.b", "proj.w", "proj.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b")]
    return names


def _norm_names(cfg: BackboneConfig) -> list[str]:
    return [f"blocks.{l}.{n}" for l in range(cfg.layers) for n in ("ln1.g", "ln1.b", "ln2.g", "ln2.b")]


@dataclass
class ModelState:
    cfg: BackboneConfig
    frozen: dict[str, Tensor]
    norm: dict[str, Tensor]
    classifier: Classifier
    aan: AANParams
    psi: OODExtractor
    ladder: LadderAggregator

    GROUP_ORDER = ("frozen", "norm", "classifier", "aan", "psi", "ladder")

    def group(self, name: str) -> list[Tensor]:
        if name == "frozen":
            return [self.frozen[k] for k in _frozen_names(self.cfg)]
        if name == "norm":
            return [self.norm[k] for k in _norm_names(self.cfg)]
        if name in ("classifier", "aan", "psi", "ladder"):
            return getattr(self, name).parameters()
        raise KeyError(name)

    def trainable_groups(self) -> dict[str, list[Tensor]]:
        return {g: self.group(g) for g in ("norm", "aan", "psi", "ladder")}

    def checksum(self, groups=("frozen", "classifier")) -> str:
        h = hashlib.sha256()
        for g in groups:
            for t in self.group(g):
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelState":
        blob = _pack(self)
        return _unpack(blob)


def init_backbone(cfg: BackboneConfig) -> ModelState:
    """Seeded random backbone and head plus freshly initialised adapters."""
    rng = np.random.default_rng(cfg.seed)
    d, P, C = cfg.dim, cfg.patches, cfg.classes
    hidden = MLP_RATIO * d

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out))

    frozen = {
        "patch_embed.w": dense(d, d),
        "patch_embed.b": np.zeros(d),
        "cls_token": rng.normal(0.0, 1.0, d),
        "pos_embed": rng.normal(0.0, 0.1, (P + 1, d)),
    }
    for l in range(cfg.layers):
        frozen.update(
            {
                f"blocks.{l}.qkv.w": dense(d, 3 * d),
                f"blocks.{l}.qkv.b": np.zeros(3 * d),
                f"blocks.{l}.proj.w": dense(d, d),
                f"blocks.{l}.proj.b": np.zeros(d),
                f"blocks.{l}.fc1.w": dense(d, hidden),
                f"blocks.{l}.fc1.b": np.zeros(hidden),
                f"blocks.{l}.fc2.w": dense(hidden, d),
                f"blocks.{l}.fc2.b": np.zeros(d),
            }
        )
    norm = {}
    for l in range(cfg.layers):
        for ln in ("ln1", "ln2"):
            norm[f"blocks.{l}.{ln}.g"] = np.ones(d)
            norm[f"blocks.{l}.{ln}.b"] = np.zeros(d)
    head = Classifier(T.constant(dense(d, C)), T.constant(np.zeros(C)))
    aan = AANParams.init(d, rng)
    return ModelState(
        cfg=cfg,
        frozen={k: T.Tensor(v, name=k) for k, v in frozen.items()},
        norm={k: T.parameter(v, k) for k, v in norm.items()},
        classifier=head,
        aan=aan,
        psi=OODExtractor.init(d),
        ladder=LadderAggregator.init(cfg.layers, d),
    )


def _tokens_of(batch) -> np.ndarray:
    return batch.tokens if hasattr(batch, "tokens") else np.asarray(batch, dtype=float)


def forward_collect(state: ModelState, batch, aan: AANParams | None = None, collect_qkv: bool = False):
    """Run the backbone on a batch of raw token grids (N, P, d).

    Returns ``(trace, logits)``: per-layer class tokens and patch tokens
    (layer outputs), and the head applied to the last class token. With
    ``aan`` given, each layer's Q/K/V are affined before attention using the
    layer's input class and patch tokens.
    """
    cfg = state.cfg
    x_raw = _tokens_of(batch)
    if x_raw.ndim != 3 or x_raw.shape[1:] != (cfg.patches, cfg.dim):
        raise ShapeError(f"batch tokens {x_raw.shape} do not match (N, {cfg.patches}, {cfg.dim})")
    N, d, H = x_raw.shape[0], cfg.dim, cfg.heads
    dh = d // H
    S = cfg.patches + 1
    fz, nm = state.frozen, state.norm

    x = T.constant(x_raw) @ fz["patch_embed.w"] + fz["patch_embed.b"]
    cls = T.constant(np.zeros((N, 1, d))) + fz["cls_token"]
    x = T.concat([cls, x], axis=1) + fz["pos_embed"]

    trace = LayerTrace()
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        h = T.layer_norm(x, nm[p + "ln1.g"], nm[p + "ln1.b"])
        qkv = h @ fz[p + "qkv.w"] + fz[p + "qkv.b"]
        q, k, v = qkv[:, :, :d], qkv[:, :, d : 2 * d], qkv[:, :, 2 * d :]
        if collect_qkv:
            trace.qkv.append((q, k, v))
        if aan is not None:
            feature = pool_and_combine(x[:, 1:, :], x[:, 0, :], aan)
            q, k, v = apply_affine(q, k, v, affine_params(feature, aan))
        q = T.transpose(T.reshape(q, (N, S, H, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(k, (N, S, H, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(v, (N, S, H, dh)), (0, 2, 1, 3))
        attn = T.softmax((q @ k) * (1.0 / math.sqrt(dh)), axis=-1)
        o = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (N, S, d))
        x = x + (o @ fz[p + "proj.w"] + fz[p + "proj.b"])
        h2 = T.layer_norm(x, nm[p + "ln2.g"], nm[p + "ln2.b"])
        x = x + (T.gelu(h2 @ fz[p + "fc1.w"] + fz[p + "fc1.b"]) @ fz[p + "fc2.w"] + fz[p + "fc2.b"])
        trace.cls.append(x[:, 0, :])
        trace.patches.append(x[:, 1:, :])
    logits = classify(state.classifier, trace.cls[-1])
    return trace, logits


def attention_weights(q: np.ndarray, k: np.ndarray, heads: int) -> np.ndarray:
    """Post-softmax attention (N, H, S, S) from token-major q, k (N, S, d); plain numpy."""
    N, S, d = q.shape
    dh = d // heads
    qh = q.reshape(N, S, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(N, S, heads, dh).transpose(0, 2, 1, 3)
    s = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    return s / s.sum(axis=-1, keepdims=True)


# -- checkpoint --------------------------------------------------------------
#
# magic "OWTTA001"
# int64 LE x 6: layers, dim, heads, patches, classes, seed
# per group in ModelState.GROUP_ORDER: int64 LE count, then count float64 LE
# values (the group's tensors flattened C-order, in ModelState.group order)


def _pack(state: ModelState) -> bytes:
    c = state.cfg
    parts = [MAGIC, struct.pack("<6q", c.layers, c.dim, c.heads, c.patches, c.classes, c.seed)]
    for g in ModelState.GROUP_ORDER:
        flat = np.concatenate([t.data.reshape(-1) for t in state.group(g)]).astype("<f8")
        parts.append(struct.pack("<q", flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def _unpack(blob: bytes) -> ModelState:
    if blob[:8] != MAGIC:
        raise ValueError("not an OWTTA001 checkpoint")
    vals = struct.unpack_from("<6q", blob, 8)
    cfg = BackboneConfig(*vals)
    state = init_backbone(cfg)
    off = 8 + 48
    for g in ModelState.GROUP_ORDER:
        (n,) = struct.unpack_from("<q", blob, off)
        off += 8
        flat = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        tensors = state.group(g)
        expected = sum(t.size for t in tensors)
        if n != expected:
            raise ValueError(f"checkpoint group {g!r}: {n} values, expected {expected}")
        pos = 0
        for t in tensors:
            t.data = flat[pos : pos + t.size].reshape(t.shape).copy()
            pos += t.size
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return state


def save_checkpoint(state: ModelState, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(_pack(state))
    except OSError as err:
        raise OSError(f"cannot write checkpoint {path}: {err}") from err


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as err:
        raise OSError(f"cannot read checkpoint {path}: {err}") from err
    return _unpack(blob)
