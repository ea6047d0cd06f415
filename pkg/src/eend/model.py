"""Diarization network architectures.

Two networks map a (T, F) feature sequence to per-frame, per-speaker speech
posteriors in (0, 1):

* the self-attention encoder: linear input projection, a stack of encoder
  blocks (layer norm, multi-head dot-product self-attention, optional
  residual, layer norm, position-wise ReLU feed-forward, optional residual),
  then a final layer norm and a sigmoid output layer. No positional encoding
  anywhere, so the forward pass is equivariant to permuting frames in time.
* a stacked bidirectional LSTM whose last layer feeds the sigmoid output
  layer, with unit-norm embeddings tapped from an intermediate layer through
  a tanh projection (used by the clustering auxiliary loss).

Forward passes accept `n_valid` so that batch-padded trailing frames are
provably inert: attention columns beyond n_valid are masked out and the LSTM
recurrence stops at n_valid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tt
from .rng import Rng, derive
from .tensor import Tensor

# Sigmoid outputs are nudged into the open interval so saturated logits can
# never yield exactly 0 or 1 (the clamp region has zero gradient anyway).
POSTERIOR_EPS = 1e-12


@dataclass
class SaEendConfig:
    in_dim: int = 345
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    blocks: int = 2
    speakers: int = 2
    residual: bool = False

    def __post_init__(self):
        if min(self.in_dim, self.model_dim, self.heads, self.ffn_dim,
               self.blocks, self.speakers) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def kind(self) -> str:
        return "sa"


@dataclass
class BlstmConfig:
    in_dim: int = 345
    layers: int = 5
    hidden: int = 256
    dc_layer: int = 2      # 1-indexed tap for the embedding head
    embed_dim: int = 256
    speakers: int = 2

    def __post_init__(self):
        if min(self.in_dim, self.layers, self.hidden, self.embed_dim, self.speakers) < 1:
            raise ValueError("all dimensions must be >= 1")
        if not (1 <= self.dc_layer <= self.layers):
            raise ValueError(
                f"dc_layer {self.dc_layer} outside 1..{self.layers}")

    @property
    def kind(self) -> str:
        return "blstm"


Config = SaEendConfig | BlstmConfig


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _uniform_fan(rng: Rng, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform_array(rows * cols, -limit, limit).reshape(rows, cols)


def init_params(config: Config, seed: int) -> dict[str, Tensor]:
    """Fan-scaled uniform weights, zero biases, unit layer-norm gains.

    One splitmix64 stream fills tensors in construction order, so identical
    (config, seed) pairs always produce bit-identical parameters.
    """
    rng = Rng(derive(seed, 0))
    p: dict[str, Tensor] = {}

    def weight(name, rows, cols):
        p[name] = Tensor(_uniform_fan(rng, rows, cols), requires_grad=True)

    def zeros(name, n):
        p[name] = Tensor(np.zeros(n), requires_grad=True)

    def ones(name, n):
        p[name] = Tensor(np.ones(n), requires_grad=True)

    if isinstance(config, SaEendConfig):
        d, h, dd = config.model_dim, config.heads, config.head_dim
        weight("w0", config.in_dim, d)
        zeros("b0", d)
        for b in range(config.blocks):
            ones(f"block{b}.ln1.gain", d)
            zeros(f"block{b}.ln1.bias", d)
            for i in range(h):
                for role in ("q", "k", "v"):
                    weight(f"block{b}.head{i}.w{role}", d, dd)
                    zeros(f"block{b}.head{i}.b{role}", dd)
            weight(f"block{b}.wo", d, d)
            zeros(f"block{b}.bo", d)
            ones(f"block{b}.ln2.gain", d)
            zeros(f"block{b}.ln2.bias", d)
            weight(f"block{b}.w1", d, config.ffn_dim)
            zeros(f"block{b}.b1", config.ffn_dim)
            weight(f"block{b}.w2", config.ffn_dim, d)
            zeros(f"block{b}.b2", d)
        ones("ln_f.gain", d)
        zeros("ln_f.bias", d)
        weight("w3", d, config.speakers)
        zeros("b3", config.speakers)
    elif isinstance(config, BlstmConfig):
        hid = config.hidden
        for layer in range(config.layers):
            in_dim = config.in_dim if layer == 0 else 2 * hid
            for direction in ("fwd", "bwd"):
                prefix = f"layer{layer}.{direction}"
                weight(f"{prefix}.wx", in_dim, 4 * hid)
                weight(f"{prefix}.wh", hid, 4 * hid)
                bias = np.zeros(4 * hid)
                bias[hid:2 * hid] = 1.0   # forget gate starts open
                p[f"{prefix}.b"] = Tensor(bias, requires_grad=True)
        weight("out.w", 2 * hid, config.speakers)
        zeros("out.b", config.speakers)
        weight("dc.w", 2 * hid, config.embed_dim)
        zeros("dc.b", config.embed_dim)
    else:
        raise TypeError(f"unknown config type {type(config)!r}")
    return p


# ---------------------------------------------------------------------------
# self-attention network
# ---------------------------------------------------------------------------

def multi_head_self_attention(e_bar: Tensor, params: dict[str, Tensor], prefix: str,
                              config: SaEendConfig, n_valid: int | None = None
                              ) -> tuple[Tensor, np.ndarray]:
    """One attention sub-layer; returns output and (H, T, T) weights."""
    scale = 1.0 / np.sqrt(config.head_dim)
    contexts = []
    weights = []
    for i in range(config.heads):
        hp = f"{prefix}.head{i}"
        q = tt.add_row_bias(tt.matmul(e_bar, params[f"{hp}.wq"]), params[f"{hp}.bq"])
        k = tt.add_row_bias(tt.matmul(e_bar, params[f"{hp}.wk"]), params[f"{hp}.bk"])
        v = tt.add_row_bias(tt.matmul(e_bar, params[f"{hp}.wv"]), params[f"{hp}.bv"])
        a = tt.matmul(q, tt.transpose(k))
        a_hat = tt.scaled_softmax_rows(a, scale, n_valid=n_valid)
        if n_valid is None:
            contexts.append(tt.matmul(a_hat, v))
        else:
            contexts.append(tt.matmul_valid(a_hat, v, n_valid))
        weights.append(a_hat.data)
    out = tt.add_row_bias(tt.matmul(tt.concat_cols(contexts), params[f"{prefix}.wo"]),
                          params[f"{prefix}.bo"])
    return out, np.stack(weights)


def encoder_block(e_in: Tensor, params: dict[str, Tensor], prefix: str,
                  config: SaEendConfig, n_valid: int | None = None
                  ) -> tuple[Tensor, np.ndarray]:
    e_bar = tt.layer_norm(e_in, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    e_sa, attn = multi_head_self_attention(e_bar, params, prefix, config, n_valid)
    if config.residual:
        e_sa = tt.add(e_bar, e_sa)
    e_sa_bar = tt.layer_norm(e_sa, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    ff = tt.relu(tt.add_row_bias(tt.matmul(e_sa_bar, params[f"{prefix}.w1"]),
                                 params[f"{prefix}.b1"]))
    ff = tt.add_row_bias(tt.matmul(ff, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    out = tt.add(e_sa_bar, ff) if config.residual else ff
    return out, attn


def sa_eend_forward(x: Tensor | np.ndarray, params: dict[str, Tensor],
                    config: SaEendConfig, n_valid: int | None = None
                    ) -> tuple[Tensor, list[np.ndarray]]:
    """Posteriors (T, C) and per-block attention weights (H, T, T)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != config.in_dim:
        raise tt.DimensionError(
            f"input {x.data.shape} does not match in_dim {config.in_dim}")
    e = tt.add_row_bias(tt.matmul(x, params["w0"]), params["b0"])
    attentions = []
    for b in range(config.blocks):
        e, attn = encoder_block(e, params, f"block{b}", config, n_valid)
        attentions.append(attn)
    e = tt.layer_norm(e, params["ln_f.gain"], params["ln_f.bias"])
    logits = tt.add_row_bias(tt.matmul(e, params["w3"]), params["b3"])
    z = tt.clamp(tt.sigmoid(logits), POSTERIOR_EPS, 1.0 - POSTERIOR_EPS)
    return z, attentions


# ---------------------------------------------------------------------------
# BLSTM network
# ---------------------------------------------------------------------------

def _lstm_pass(x: Tensor, params: dict[str, Tensor], prefix: str, hidden: int,
               n_valid: int, reverse: bool) -> Tensor:
    """One LSTM direction over rows [0, n_valid); padded rows emit zeros."""
    wx, wh, b = params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"]
    total = x.data.shape[0]
    h = Tensor(np.zeros((1, hidden)))
    c = Tensor(np.zeros((1, hidden)))
    steps = range(n_valid - 1, -1, -1) if reverse else range(n_valid)
    outs: list[Tensor] = [Tensor(np.zeros((1, hidden)))] * total
    for t in steps:
        gates = tt.add_row_bias(
            tt.add(tt.matmul(tt.row(x, t), wx), tt.matmul(h, wh)), b)
        i = tt.sigmoid(tt.take_cols(gates, 0, hidden))
        f = tt.sigmoid(tt.take_cols(gates, hidden, 2 * hidden))
        g = tt.tanh(tt.take_cols(gates, 2 * hidden, 3 * hidden))
        o = tt.sigmoid(tt.take_cols(gates, 3 * hidden, 4 * hidden))
        c = tt.add(tt.mul(f, c), tt.mul(i, g))
        h = tt.mul(o, tt.tanh(c))
        outs[t] = h
    return tt.stack_rows(outs)


def blstm_layer(x: Tensor, params: dict[str, Tensor], layer: int, hidden: int,
                n_valid: int) -> Tensor:
    fwd = _lstm_pass(x, params, f"layer{layer}.fwd", hidden, n_valid, reverse=False)
    bwd = _lstm_pass(x, params, f"layer{layer}.bwd", hidden, n_valid, reverse=True)
    return tt.concat_cols([fwd, bwd])


def blstm_eend_forward(x: Tensor | np.ndarray, params: dict[str, Tensor],
                       config: BlstmConfig, n_valid: int | None = None
                       ) -> tuple[Tensor, Tensor]:
    """Posteriors (T, C) and unit-norm embeddings (T, V)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != config.in_dim:
        raise tt.DimensionError(
            f"input {x.data.shape} does not match in_dim {config.in_dim}")
    v = x.data.shape[0] if n_valid is None else n_valid
    h = x
    tap = None
    for layer in range(config.layers):
        h = blstm_layer(h, params, layer, config.hidden, v)
        if layer + 1 == config.dc_layer:
            tap = h
    logits = tt.add_row_bias(tt.matmul(h, params["out.w"]), params["out.b"])
    z = tt.clamp(tt.sigmoid(logits), POSTERIOR_EPS, 1.0 - POSTERIOR_EPS)
    emb = tt.l2_normalize_rows(
        tt.tanh(tt.add_row_bias(tt.matmul(tap, params["dc.w"]), params["dc.b"])))
    return z, emb


def forward(x, params: dict[str, Tensor], config: Config, n_valid: int | None = None):
    """Posteriors for either architecture (attention/embeddings dropped)."""
    if isinstance(config, SaEendConfig):
        return sa_eend_forward(x, params, config, n_valid)[0]
    return blstm_eend_forward(x, params, config, n_valid)[0]


# ---------------------------------------------------------------------------
# parameter file format
# ---------------------------------------------------------------------------
# "EEND" magic, u16 version, then a u64-length-prefixed key=value config
# block, a u64 tensor count, and per-tensor records of
#   u64 name length, name, u64 rank, u64 dims..., float64 values
# with all integers and floats little-endian.

MAGIC = b"EEND"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class ConfigMismatchError(FormatError):
    pass


def config_to_text(config: Config) -> str:
    lines = [f"kind={config.kind}"]
    for f in fields(config):
        lines.append(f"{f.name}={getattr(config, f.name)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> Config:
    kv = {}
    for line in text.strip().splitlines():
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    kind = kv.pop("kind", None)
    if kind == "sa":
        cls = SaEendConfig
    elif kind == "blstm":
        cls = BlstmConfig
    else:
        raise FormatError(f"unknown model kind {kind!r} in config header")
    args = {}
    for f in fields(cls):
        if f.name not in kv:
            raise FormatError(f"config header missing field {f.name!r}")
        raw = kv[f.name]
        args[f.name] = (raw == "True") if f.type == "bool" else int(raw)
    return cls(**args)


def save_params(path: str | Path, params: dict[str, Tensor], config: Config) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<H", FORMAT_VERSION)
    cfg = config_to_text(config).encode()
    buf += struct.pack("<Q", len(cfg)) + cfg
    buf += struct.pack("<Q", len(params))
    for name, t in params.items():
        nb = name.encode()
        buf += struct.pack("<Q", len(nb)) + nb
        buf += struct.pack("<Q", t.data.ndim)
        for dim in t.data.shape:
            buf += struct.pack("<Q", dim)
        buf += t.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_params(path: str | Path, expect_config: Config | None = None
                ) -> tuple[Config, dict[str, Tensor]]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated while reading {what}")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic, not a parameter file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (cfg_len,) = struct.unpack("<Q", take(8, "config length"))
    config = config_from_text(take(cfg_len, "config block").decode())
    if expect_config is not None and config != expect_config:
        raise ConfigMismatchError(
            f"{path}: stored config {config} does not match expected {expect_config}")
    (n_tensors,) = struct.unpack("<Q", take(8, "tensor count"))
    params: dict[str, Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<Q", take(8, "tensor name length"))
        name = take(name_len, "tensor name").decode()
        (rank,) = struct.unpack("<Q", take(8, f"rank of tensor {name!r}"))
        dims = tuple(struct.unpack("<Q", take(8, f"dims of tensor {name!r}"))[0]
                     for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * count, f"values of tensor {name!r}"),
                             dtype="<f8").reshape(dims)
        params[name] = Tensor(data.copy(), requires_grad=True)
    return config, params
