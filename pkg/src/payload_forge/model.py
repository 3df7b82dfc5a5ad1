"""Gated-convolution detector over raw bytes, with hand-derived gradients.

Architecture: byte embedding, non-overlapping stride-c 1-D convolution
through a gated linear unit, global max pooling over window positions,
one ReLU hidden layer, sigmoid output. Because the convolution does not
overlap and pooling is a global max, permuting whole c-byte blocks of
the (padded) input leaves the score bitwise unchanged; several
experiments lean on that.

All math is float64 numpy. Forward, backward, and training are pure
functions of their inputs and seeds.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import ByteFile, Manifest

log = logging.getLogger("payload_forge.model")

LOSS_CLAMP = 1e-7

CHECKPOINT_MAGIC = b"MCFK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 8     # D
    window: int = 64       # c, convolution width and stride
    filters: int = 16      # F
    hidden: int = 16       # H
    alphabet: int = 256    # N, fixed by the byte domain
    pad_byte: int = 0

    def __post_init__(self):
        if self.alphabet != 256:
            raise ValueError("alphabet size is fixed at 256")
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if min(self.embed_dim, self.filters, self.hidden) < 1:
            raise ValueError("embed_dim, filters, and hidden must be positive")
        if not 0 <= self.pad_byte <= 255:
            raise ValueError("pad_byte must be a byte value")

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls(embed_dim=8, window=64, filters=16, hidden=16)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(embed_dim=8, window=500, filters=128, hidden=128)


TENSOR_FIELDS = ("embedding", "conv_a_w", "conv_a_b", "conv_b_w", "conv_b_b",
                 "fc_w", "fc_b", "out_w", "out_b")


@dataclass
class ModelParams:
    cfg: ModelConfig
    embedding: np.ndarray  # (256, D)
    conv_a_w: np.ndarray   # (F, c*D)
    conv_a_b: np.ndarray   # (F,)
    conv_b_w: np.ndarray   # (F, c*D)
    conv_b_b: np.ndarray   # (F,)
    fc_w: np.ndarray       # (H, F)
    fc_b: np.ndarray       # (H,)
    out_w: np.ndarray      # (H,)
    out_b: np.ndarray      # (1,)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_FIELDS}

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, *(getattr(self, n).copy() for n in TENSOR_FIELDS))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seeded init: embedding rows uniform in [-1, 1], weights scaled by
    1/sqrt(fan_in), biases zero."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d, c, f, h = cfg.embed_dim, cfg.window, cfg.filters, cfg.hidden

    def scaled(shape, fan_in):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    return ModelParams(
        cfg=cfg,
        embedding=rng.uniform(-1.0, 1.0, size=(cfg.alphabet, d)),
        conv_a_w=scaled((f, c * d), c * d),
        conv_a_b=np.zeros(f),
        conv_b_w=scaled((f, c * d), c * d),
        conv_b_b=np.zeros(f),
        fc_w=scaled((h, f), f),
        fc_b=np.zeros(h),
        out_w=scaled((h,), h),
        out_b=np.zeros(1),
    )


@dataclass
class EmbeddedSeq:
    rows: np.ndarray                 # (L', D) with L' a multiple of c
    original_length: int
    padded_bytes: np.ndarray | None  # uint8 (L',), None for synthetic rows


def pad_to_window(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    if x.size == 0:
        raise ValueError("cannot embed an empty byte sequence")
    c = cfg.window
    padded_len = -(-x.size // c) * c
    if padded_len == x.size:
        return x
    out = np.full(padded_len, cfg.pad_byte, dtype=np.uint8)
    out[:x.size] = x
    return out


def embed(params: ModelParams, file: ByteFile | bytes) -> EmbeddedSeq:
    data = file.data if isinstance(file, ByteFile) else file
    x = np.frombuffer(data, dtype=np.uint8)
    xp = pad_to_window(x, params.cfg)
    return EmbeddedSeq(params.embedding[xp], x.size, xp)


@dataclass
class ForwardCache:
    z: EmbeddedSeq
    windows: np.ndarray    # (nw, c*D)
    pre_a: np.ndarray      # (nw, F)
    pre_b: np.ndarray
    gate: np.ndarray
    gated: np.ndarray
    argmax: np.ndarray     # (F,) winning window per filter
    pooled: np.ndarray     # (F,)
    hidden_pre: np.ndarray
    hidden: np.ndarray
    logit: float
    score: float


def window_activations(params: ModelParams, rows: np.ndarray):
    """Per-window GLU pre-activations and gated outputs, shape (nw, F)."""
    c, d = params.cfg.window, params.cfg.embed_dim
    if rows.ndim != 2 or rows.shape[1] != d or rows.shape[0] % c:
        raise ValueError(f"embedded rows have shape {rows.shape}, "
                         f"expected (k*{c}, {d})")
    windows = rows.reshape(-1, c * d)
    pre_a = windows @ params.conv_a_w.T + params.conv_a_b
    pre_b = windows @ params.conv_b_w.T + params.conv_b_b
    gate = sigmoid(pre_b)
    return windows, pre_a, pre_b, gate, pre_a * gate


def forward(params: ModelParams, z: EmbeddedSeq) -> tuple[float, ForwardCache]:
    windows, pre_a, pre_b, gate, gated = window_activations(params, z.rows)
    argmax = gated.argmax(axis=0)
    pooled = gated[argmax, np.arange(gated.shape[1])]
    hidden_pre = params.fc_w @ pooled + params.fc_b
    hidden = np.maximum(hidden_pre, 0.0)
    logit = float(params.out_w @ hidden + params.out_b[0])
    score = float(sigmoid(logit))
    return score, ForwardCache(z, windows, pre_a, pre_b, gate, gated,
                               argmax, pooled, hidden_pre, hidden, logit, score)


def predict_file(params: ModelParams, file: ByteFile | bytes) -> float:
    score, _ = forward(params, embed(params, file))
    return score


def is_malicious(score: float) -> bool:
    return score > 0.5


def loss(score: float, y: int) -> float:
    """Binary cross-entropy with the score clamped away from 0 and 1."""
    s = min(max(score, LOSS_CLAMP), 1.0 - LOSS_CLAMP)
    return float(-(y * np.log(s) + (1 - y) * np.log(1.0 - s)))


def backward(params: ModelParams, cache: ForwardCache, y: int, *,
             want_param_grads: bool = True, want_input_grad: bool = True,
             ) -> tuple[dict[str, np.ndarray] | None, np.ndarray | None]:
    """Exact gradients of loss(forward(z), y).

    Max pooling routes each filter's gradient to its argmax window only.
    When the score sits inside the loss clamp the gradient is exactly
    zero, matching what finite differences of the clamped loss see.
    """
    cfg = params.cfg
    if cache.windows.shape[1] != cfg.window * cfg.embed_dim:
        raise ValueError("cache does not match these parameters")

    s = cache.score
    if s < LOSS_CLAMP or s > 1.0 - LOSS_CLAMP:
        dlogit = 0.0
    else:
        dlogit = s - y

    dhidden = dlogit * params.out_w
    dhidden_pre = dhidden * (cache.hidden_pre > 0)
    dpooled = params.fc_w.T @ dhidden_pre

    dgated = np.zeros_like(cache.gated)
    dgated[cache.argmax, np.arange(cfg.filters)] = dpooled
    dpre_a = dgated * cache.gate
    dpre_b = dgated * cache.pre_a * cache.gate * (1.0 - cache.gate)

    grads = None
    if want_param_grads:
        if cache.z.padded_bytes is None:
            raise ValueError("parameter gradients need the original byte sequence")
        d_embedding = np.zeros_like(params.embedding)
        dwin = dpre_a @ params.conv_a_w + dpre_b @ params.conv_b_w
        np.add.at(d_embedding, cache.z.padded_bytes,
                  dwin.reshape(-1, cfg.embed_dim))
        grads = {
            "embedding": d_embedding,
            "conv_a_w": dpre_a.T @ cache.windows,
            "conv_a_b": dpre_a.sum(axis=0),
            "conv_b_w": dpre_b.T @ cache.windows,
            "conv_b_b": dpre_b.sum(axis=0),
            "fc_w": np.outer(dhidden_pre, cache.pooled),
            "fc_b": dhidden_pre,
            "out_w": dlogit * cache.hidden,
            "out_b": np.array([dlogit]),
        }

    input_grad = None
    if want_input_grad:
        dwin = dpre_a @ params.conv_a_w + dpre_b @ params.conv_b_w
        input_grad = dwin.reshape(-1, cfg.embed_dim)
    return grads, input_grad


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 20
    min_epochs: int = 6     # keep sharpening the boundary past the first easy fit
    target_val_acc: float = 0.98
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def _load_padded(manifest: Manifest, data_dir: Path | str, cfg: ModelConfig):
    root = Path(data_dir)
    items = []
    for e in manifest.entries:
        x = np.frombuffer((root / e.path).read_bytes(), dtype=np.uint8)
        items.append((pad_to_window(x, cfg), e.label))
    return items


def _eval_set(params: ModelParams, items) -> tuple[float, float]:
    total_loss, correct = 0.0, 0
    for xp, y in items:
        z = EmbeddedSeq(params.embedding[xp], xp.size, xp)
        s, _ = forward(params, z)
        total_loss += loss(s, y)
        correct += int(is_malicious(s) == bool(y))
    n = max(len(items), 1)
    return total_loss / n, correct / n


def train(params: ModelParams, train_manifest: Manifest, val_manifest: Manifest,
          hyper: TrainConfig, data_dir: Path | str,
          ) -> tuple[ModelParams, list[EpochStats]]:
    """Adam on shuffled mini-batches, early-stopped at the target
    validation accuracy. Deterministic for a given seed: batches are
    processed sequentially and gradients summed in index order."""
    train_items = _load_padded(train_manifest, data_dir, params.cfg)
    val_items = _load_padded(val_manifest, data_dir, params.cfg)
    if not train_items:
        raise ValueError("empty training set")

    params = params.copy()
    rng = np.random.Generator(np.random.PCG64(hyper.seed))
    m = {k: np.zeros_like(v) for k, v in params.tensors().items()}
    v = {k: np.zeros_like(t) for k, t in params.tensors().items()}
    t_step = 0
    history: list[EpochStats] = []

    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(len(train_items))
        ep_loss, ep_correct = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            acc = {k: np.zeros_like(t) for k, t in params.tensors().items()}
            for idx in batch:
                xp, y = train_items[idx]
                z = EmbeddedSeq(params.embedding[xp], xp.size, xp)
                s, cache = forward(params, z)
                grads, _ = backward(params, cache, y, want_input_grad=False)
                for k in acc:
                    acc[k] += grads[k]
                ep_loss += loss(s, y)
                ep_correct += int(is_malicious(s) == bool(y))
            t_step += 1
            bias1 = 1.0 - hyper.beta1 ** t_step
            bias2 = 1.0 - hyper.beta2 ** t_step
            for k, tensor in params.tensors().items():
                g = acc[k] / len(batch)
                m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g
                v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g * g
                tensor -= hyper.lr * (m[k] / bias1) / (np.sqrt(v[k] / bias2) + hyper.adam_eps)

        val_loss, val_acc = _eval_set(params, val_items)
        stats = EpochStats(epoch, ep_loss / len(train_items),
                           ep_correct / len(train_items), val_loss, val_acc)
        history.append(stats)
        log.info("epoch %d: train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
                 epoch, stats.train_loss, stats.train_acc, val_loss, val_acc)
        if epoch >= hyper.min_epochs and val_acc >= hyper.target_val_acc:
            break

    return params, history


def save_history_csv(history: list[EpochStats], path: Path | str) -> None:
    with open(path, "w") as f:
        f.write("epoch,train_loss,train_acc,val_loss,val_acc\n")
        for h in history:
            f.write(f"{h.epoch},{h.train_loss!r},{h.train_acc!r},"
                    f"{h.val_loss!r},{h.val_acc!r}\n")


def _dedup_embedding_rows(emb32: np.ndarray) -> np.ndarray:
    """Nudge exactly-equal embedding rows apart (first coordinate, +2^-20)
    so nearest-row reconstruction has a unique answer."""
    emb32 = emb32.copy()
    for _ in range(64):
        _, first = np.unique(emb32, axis=0, return_index=True)
        dupes = np.setdiff1d(np.arange(emb32.shape[0]), first)
        if dupes.size == 0:
            return emb32
        emb32[dupes, 0] += np.float32(2.0 ** -20)
    raise ValueError("could not separate duplicate embedding rows")


def save_checkpoint(params: ModelParams, path: Path | str) -> None:
    """Binary checkpoint: magic, version, dims, then each tensor as
    little-endian float32 row-major, then CRC-32 of everything before it."""
    cfg = params.cfg
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<5I", cfg.alphabet, cfg.embed_dim, cfg.window,
                       cfg.filters, cfg.hidden)
    for name in TENSOR_FIELDS:
        tensor = getattr(params, name).astype("<f4")
        if name == "embedding":
            tensor = _dedup_embedding_rows(tensor)
        out += tensor.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: Path | str) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(raw) < 28 + 4:
        raise CheckpointError("truncated checkpoint header")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(raw[:-4]) != struct.unpack_from("<I", raw, len(raw) - 4)[0]:
        raise CheckpointError("checkpoint CRC mismatch")

    n, d, c, f, h = struct.unpack_from("<5I", raw, 8)
    cfg = ModelConfig(embed_dim=d, window=c, filters=f, hidden=h, alphabet=n)
    shapes = {
        "embedding": (n, d),
        "conv_a_w": (f, c * d), "conv_a_b": (f,),
        "conv_b_w": (f, c * d), "conv_b_b": (f,),
        "fc_w": (h, f), "fc_b": (h,),
        "out_w": (h,), "out_b": (1,),
    }
    offset = 28
    tensors = {}
    for name in TENSOR_FIELDS:
        shape = shapes[name]
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(raw) - 4:
            raise CheckpointError("checkpoint truncated inside tensor data")
        tensors[name] = (np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)),
                                       offset=offset)
                         .astype(np.float64).reshape(shape))
        offset += nbytes
    if offset != len(raw) - 4:
        raise CheckpointError("checkpoint has trailing bytes")
    return ModelParams(cfg=cfg, **tensors)
