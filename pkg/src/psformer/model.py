"""Model definition: RevIN, segment transform, PS blocks, encoder stack and head.

Data flow for one forward pass (shapes per sample)::

    x (M, L) -> RevIN -> segments (C, N) -> n x encoder -> (M, L)
      -> linear head (L -> F) -> inverse RevIN -> (M, F)

with P = L / N and C = M * P. Segment rows are ordered variable-major,
row c = m * P + p, so channel m owns rows [m*P, (m+1)*P).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SLOTS = ("Q1", "K1", "V1", "Q2", "K2", "V2", "Final")
SHARING_MODES = ("in-encoder", "cross-encoders", "all", "none")

CHECKPOINT_FORMAT = "psformer-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_channels: int
    seq_len: int = 512
    n_segments: int = 32
    horizon: int = 96
    n_encoders: int = 1
    sharing: str = "in-encoder"
    revin_window: int | None = None  # None means the whole look-back window
    revin_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_channels", "seq_len", "n_segments", "horizon", "n_encoders"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seq_len % self.n_segments:
            raise ConfigError(
                f"segment count {self.n_segments} does not divide look-back {self.seq_len}")
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"unknown sharing mode {self.sharing!r}; expected one of {SHARING_MODES}")
        if self.revin_window is not None and not 1 <= self.revin_window <= self.seq_len:
            raise ConfigError(f"revin_window must be in [1, {self.seq_len}], got {self.revin_window}")

    @property
    def patch_len(self):
        return self.seq_len // self.n_segments

    @property
    def seg_len(self):
        return self.n_channels * self.patch_len

    @property
    def d_k(self):
        return self.n_segments

    @property
    def stat_window(self):
        return self.revin_window or self.seq_len

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------- parameters

@dataclass
class PSBlockParams:
    """Weights of one PS block: three N x N layers with biases."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor

    NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def tensors(self):
        return [getattr(self, n) for n in self.NAMES]

    def count(self):
        return sum(t.size for t in self.tensors())


def n_distinct_blocks(sharing, n_encoders):
    return {
        "in-encoder": n_encoders,
        "all": 1,
        "cross-encoders": len(SLOTS),
        "none": len(SLOTS) * n_encoders,
    }[sharing]


def placement_map(sharing, n_encoders):
    """Map (encoder, slot) -> block index for a sharing mode."""
    if sharing not in SHARING_MODES:
        raise ConfigError(f"unknown sharing mode {sharing!r}")
    out = {}
    for e in range(n_encoders):
        for s, slot in enumerate(SLOTS):
            if sharing == "in-encoder":
                out[e, slot] = e
            elif sharing == "all":
                out[e, slot] = 0
            elif sharing == "cross-encoders":
                out[e, slot] = s
            else:
                out[e, slot] = e * len(SLOTS) + s
    return out


@dataclass
class PSformerParams:
    blocks: list
    placement: dict
    head_w: Tensor
    head_b: Tensor
    seed: int | None = None

    def encoder_blocks(self, e):
        """Slot name -> PSBlockParams for encoder ``e``."""
        try:
            return {slot: self.blocks[self.placement[e, slot]] for slot in SLOTS}
        except KeyError as exc:
            raise ConfigError(f"encoder {e} has an unmapped slot {exc}") from None

    def named_tensors(self):
        out = []
        for i, blk in enumerate(self.blocks):
            for n in PSBlockParams.NAMES:
                out.append((f"block{i}.{n}", getattr(blk, n)))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def tensors(self):
        return [t for _, t in self.named_tensors()]

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()

    @property
    def dtype(self):
        return self.head_w.dtype


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def init_params(cfg: ModelConfig, seed=1, dtype=np.float32) -> PSformerParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    n = cfg.n_segments
    blocks = []
    for _ in range(n_distinct_blocks(cfg.sharing, cfg.n_encoders)):
        parts = {}
        for k in ("1", "2", "3"):
            parts["w" + k] = _uniform(rng, n, (n, n), dtype)
            parts["b" + k] = Tensor(np.zeros(n), requires_grad=True, dtype=dtype)
        blocks.append(PSBlockParams(**parts))
    head_w = _uniform(rng, cfg.seq_len, (cfg.seq_len, cfg.horizon), dtype)
    head_b = Tensor(np.zeros(cfg.horizon), requires_grad=True, dtype=dtype)
    return PSformerParams(blocks, placement_map(cfg.sharing, cfg.n_encoders), head_w, head_b, seed)


def count_parameters(cfg: ModelConfig):
    """Return (total, {"encoder": ..., "head": ...}) trainable parameter counts."""
    n = cfg.n_segments
    per_block = 3 * (n * n + n)
    encoder = n_distinct_blocks(cfg.sharing, cfg.n_encoders) * per_block
    head = cfg.seq_len * cfg.horizon + cfg.horizon
    return encoder + head, {"encoder": encoder, "head": head}


def count_tensors(params: PSformerParams):
    """Same split as count_parameters, measured on instantiated tensors."""
    encoder = sum(b.count() for b in params.blocks)
    head = params.head_w.size + params.head_b.size
    return encoder + head, {"encoder": encoder, "head": head}


# ---------------------------------------------------------------- RevIN

@dataclass
class RevinState:
    mean: np.ndarray  # (B, M, 1)
    std: np.ndarray  # (B, M, 1)


def revin_normalize(x, window=None, eps=1e-5):
    """Normalize each (sample, channel) row by stats of its last ``window`` steps.

    Returns the normalized array and the state needed to invert it. The
    statistics are constants; no gradient flows through them.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    L = xd.shape[-1]
    w = window or L
    if not 1 <= w <= L:
        raise ConfigError(f"RevIN window {w} outside [1, {L}]")
    tail = xd[..., L - w:]
    mu = tail.mean(axis=-1, keepdims=True)
    std = np.sqrt(tail.var(axis=-1, keepdims=True) + eps).astype(xd.dtype)
    return (xd - mu) / std, RevinState(mu, std)


def revin_denormalize(y: Tensor, state: RevinState) -> Tensor:
    if y.data.ndim != 3 or state.mean.shape != y.shape[:2] + (1,):
        raise ShapeError(f"RevIN state {state.mean.shape} does not match output {y.shape}")
    std = state.std.astype(y.dtype)
    return T.custom_op((y,), y.data * std + state.mean.astype(y.dtype), lambda g: (g * std,))


# ---------------------------------------------------------------- segments

def _segment_np(x, n_segments):
    B, M, L = x.shape
    P = L // n_segments
    # (B, M, N, P) -> (B, M, P, N) -> (B, M*P, N)
    return np.ascontiguousarray(
        x.reshape(B, M, n_segments, P).transpose(0, 1, 3, 2)).reshape(B, M * P, n_segments)


def _unsegment_np(s, n_channels):
    B, C, N = s.shape
    P = C // n_channels
    return np.ascontiguousarray(
        s.reshape(B, n_channels, P, N).transpose(0, 1, 3, 2)).reshape(B, n_channels, N * P)


def segment_transform(x: Tensor, cfg: ModelConfig) -> Tensor:
    """(B, M, L) -> (B, C, N) with out[b, m*P+p, n] = x[b, m, n*P+p]."""
    if x.data.ndim != 3 or x.shape[1:] != (cfg.n_channels, cfg.seq_len):
        raise ShapeError(f"segment_transform: expected (B, {cfg.n_channels}, {cfg.seq_len}), got {x.shape}")
    if cfg.seq_len % cfg.n_segments:
        raise ShapeError(f"segment count {cfg.n_segments} does not divide {cfg.seq_len}")
    M = cfg.n_channels
    return T.custom_op((x,), _segment_np(x.data, cfg.n_segments),
                       lambda g: (_unsegment_np(g, M),))


def segment_inverse(s: Tensor, cfg: ModelConfig) -> Tensor:
    if s.data.ndim != 3 or s.shape[1:] != (cfg.seg_len, cfg.n_segments):
        raise ShapeError(f"segment_inverse: expected (B, {cfg.seg_len}, {cfg.n_segments}), got {s.shape}")
    N = cfg.n_segments
    return T.custom_op((s,), _unsegment_np(s.data, cfg.n_channels),
                       lambda g: (_segment_np(g, N),))


# ---------------------------------------------------------------- layers

def ps_block_forward(x: Tensor, p: PSBlockParams) -> Tensor:
    """(GeLU(x W1 + b1) W2 + b2 + x) W3 + b3, row-wise over the last axis."""
    if x.shape[-1] != p.w1.shape[0]:
        raise ShapeError(f"PS block expects trailing axis {p.w1.shape[0]}, got {x.shape}")
    h = T.gelu(T.add_bias(T.matmul(x, p.w1), p.b1))
    h = T.add(T.add_bias(T.matmul(h, p.w2), p.b2), x)
    return T.add_bias(T.matmul(h, p.w3), p.b3)


def seg_attention(x: Tensor, q_block, k_block=None, v_block=None, d_k=None, scores=None):
    """Scaled dot-product attention over the segment (C) axis.

    With one block (the shared modes) Q = K = V is a single PS-block
    evaluation. If ``scores`` is a list, the pre- and post-softmax C x C
    matrices are appended to it as numpy arrays.
    """
    k_block = k_block or q_block
    v_block = v_block or q_block
    d_k = d_k or x.shape[-1]
    q = ps_block_forward(x, q_block)
    k = q if k_block is q_block else ps_block_forward(x, k_block)
    v = q if v_block is q_block else ps_block_forward(x, v_block)
    s = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d_k))
    a = T.softmax_rows(s)
    if scores is not None:
        scores.append((s.data.copy(), a.data.copy()))
    return T.matmul(a, v)


def encoder_forward(x: Tensor, blocks: dict, d_k=None, scores=None) -> Tensor:
    """(Attn2(ReLU(Attn1(x))) + x) passed through the Final-slot block."""
    missing = [s for s in SLOTS if s not in blocks]
    if missing:
        raise ConfigError(f"encoder slots not mapped: {missing}")
    o1 = seg_attention(x, blocks["Q1"], blocks["K1"], blocks["V1"], d_k, scores)
    o2 = seg_attention(T.relu(o1), blocks["Q2"], blocks["K2"], blocks["V2"], d_k, scores)
    return ps_block_forward(T.add(o2, x), blocks["Final"])


def model_forward(x, params: PSformerParams, cfg: ModelConfig, scores=None) -> Tensor:
    """Forecast (B, M, F) from a look-back batch (B, M, L)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    xd = xd.astype(params.dtype, copy=False)
    if xd.ndim != 3 or xd.shape[1:] != (cfg.n_channels, cfg.seq_len):
        raise ShapeError(f"input: expected (B, {cfg.n_channels}, {cfg.seq_len}), got {xd.shape}")
    stage = "revin"
    try:
        xn, state = revin_normalize(xd, cfg.stat_window, cfg.revin_eps)
        stage = "segment"
        h = segment_transform(Tensor._wrap(xn), cfg)
        for e in range(cfg.n_encoders):
            stage = f"encoder {e}"
            h = encoder_forward(h, params.encoder_blocks(e), cfg.d_k, scores)
        stage = "segment inverse"
        h = segment_inverse(h, cfg)
        stage = "head"
        y = T.add_bias(T.matmul(h, params.head_w), params.head_b)
        stage = "revin inverse"
        return revin_denormalize(y, state)
    except (ShapeError, ConfigError) as exc:
        raise type(exc)(f"{stage}: {exc}") from exc


# ---------------------------------------------------------------- attention export

def export_attention(x, params: PSformerParams, cfg: ModelConfig):
    """Score matrices for one sample.

    Returns a list of dicts with keys encoder, stage (1 or 2), pre, post;
    ``pre`` is Q K^T / sqrt(d_k) and ``post`` its row softmax, both C x C.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xd.ndim != 3 or xd.shape[0] != 1:
        raise ShapeError(f"export_attention takes a single sample (1, M, L), got {xd.shape}")
    scores = []
    model_forward(xd, params, cfg, scores=scores)
    out = []
    for i, (pre, post) in enumerate(scores):
        out.append({"encoder": i // 2, "stage": i % 2 + 1, "pre": pre[0], "post": post[0]})
    return out


def channel_submatrix(mat, channel, patch_len):
    """Attention among the P segment rows of one channel."""
    sl = slice(channel * patch_len, (channel + 1) * patch_len)
    return mat[sl, sl]


def cross_channel_submatrix(mat, row_channel, col_channel, patch_len):
    r = slice(row_channel * patch_len, (row_channel + 1) * patch_len)
    c = slice(col_channel * patch_len, (col_channel + 1) * patch_len)
    return mat[r, c]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: PSformerParams, cfg: ModelConfig, extra=None):
    """Write an .npz checkpoint; all weights are stored as little-endian float64."""
    arrays = {
        "format": np.array(CHECKPOINT_FORMAT),
        "version": np.array(CHECKPOINT_VERSION, dtype="<i8"),
        "config": np.array(json.dumps(cfg.to_dict(), sort_keys=True)),
        "seed": np.array(-1 if params.seed is None else params.seed, dtype="<i8"),
        "dtype": np.array(str(params.dtype)),
        "extra": np.array(json.dumps(extra or {}, sort_keys=True)),
        "placement": np.array(
            [[params.placement[e, s] for s in SLOTS] for e in range(cfg.n_encoders)], dtype="<i8"),
    }
    for name, t in params.named_tensors():
        arrays[name] = t.data.astype("<f8")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, dtype=None):
    """Return (params, cfg, extra) from a checkpoint file."""
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a PSformer checkpoint")
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        cfg = ModelConfig.from_dict(json.loads(str(z["config"])))
        dtype = dtype or np.dtype(str(z["dtype"]))
        seed = int(z["seed"])
        extra = json.loads(str(z["extra"]))
        table = z["placement"]
        placement = {(e, s): int(table[e, j]) for e in range(cfg.n_encoders) for j, s in enumerate(SLOTS)}
        blocks = []
        for i in range(n_distinct_blocks(cfg.sharing, cfg.n_encoders)):
            blocks.append(PSBlockParams(**{
                n: Tensor(z[f"block{i}.{n}"], requires_grad=True, dtype=dtype)
                for n in PSBlockParams.NAMES}))
        head_w = Tensor(z["head.w"], requires_grad=True, dtype=dtype)
        head_b = Tensor(z["head.b"], requires_grad=True, dtype=dtype)
    params = PSformerParams(blocks, placement, head_w, head_b, None if seed < 0 else seed)
    return params, cfg, extra
