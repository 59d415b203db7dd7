"""Compact trainable token encoder and the external-embedding path.

A small pre-norm-free (post-layer-norm) transformer over wordpiece ids:
token + segment + position embeddings, stacked self-attention blocks with
residual connections, GELU feed-forward layers. All training-path
arithmetic is float64 so analytic gradients check cleanly against finite
differences. Parameters live in a flat name -> array mapping with an
explicit frozen-name set; backward passes are written out by hand and
return gradients keyed the same way.

Precomputed per-token states can be substituted for the encoder through
``ExternalEmbeddings`` (binary format, magic ``CSEM1``).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Mapping, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    BadRange,
    ConfigError,
    CorruptHeader,
    DimensionMismatch,
    MissingExample,
    SequenceTooLong,
)
from .tokenization import EncodedInput

_LN_EPS = 1e-12
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    ffn_dim: Optional[int] = None  # defaults to 4 * hidden_dim
    max_positions: int = 300
    vocab_size: int = 0
    frozen_layers: frozenset[int] = field(default_factory=frozenset)
    output_layer: Optional[int] = None  # which layer's states to return; None = last
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1 or self.num_heads < 1:
            raise ConfigError("num_layers, hidden_dim and num_heads must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        bad = set(self.frozen_layers) - set(range(1, self.num_layers + 1))
        if bad:
            raise BadRange(f"frozen layers {sorted(bad)} outside 1..{self.num_layers}")
        if self.output_layer is not None and not (
            1 <= self.output_layer <= self.num_layers
        ):
            raise BadRange(f"output_layer {self.output_layer} outside layers")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def states_layer(self) -> int:
        return self.output_layer if self.output_layer is not None else self.num_layers


@dataclass
class EncoderParams:
    """Named parameter arrays plus the set of frozen names."""

    config: EncoderConfig
    arrays: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)

    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def trainable_names(self) -> list[str]:
        return [name for name in self.arrays if name not in self.frozen]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            config=self.config,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            frozen=set(self.frozen),
        )


def _layer_prefix(layer: int) -> str:
    return f"layer{layer:02d}."


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Flat name -> shape map, in deterministic creation order."""
    H, F = config.hidden_dim, config.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "emb.tok": (config.vocab_size, H),
        "emb.seg": (2, H),
        "emb.pos": (config.max_positions, H),
        "emb.ln.g": (H,),
        "emb.ln.b": (H,),
    }
    for layer in range(1, config.num_layers + 1):
        p = _layer_prefix(layer)
        shapes[p + "attn.wq"] = (H, H)
        shapes[p + "attn.bq"] = (H,)
        shapes[p + "attn.wk"] = (H, H)
        shapes[p + "attn.bk"] = (H,)
        shapes[p + "attn.wv"] = (H, H)
        shapes[p + "attn.bv"] = (H,)
        shapes[p + "attn.wo"] = (H, H)
        shapes[p + "attn.bo"] = (H,)
        shapes[p + "attn.ln.g"] = (H,)
        shapes[p + "attn.ln.b"] = (H,)
        shapes[p + "ffn.w1"] = (H, F)
        shapes[p + "ffn.b1"] = (F,)
        shapes[p + "ffn.w2"] = (F, H)
        shapes[p + "ffn.b2"] = (H,)
        shapes[p + "ffn.ln.g"] = (H,)
        shapes[p + "ffn.ln.b"] = (H,)
    return shapes


def init_params(config: EncoderConfig) -> EncoderParams:
    """Deterministic initialization: scaled uniform matrices, zero biases,
    unit normalization gains."""
    if config.vocab_size < 1:
        raise ValueError("config.vocab_size must be set before init")
    rng = np.random.default_rng(np.uint64(config.seed))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("ln.g"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    frozen = _frozen_names(config, config.frozen_layers)
    return EncoderParams(config=config, arrays=arrays, frozen=frozen)


def _frozen_names(config: EncoderConfig, layers: Sequence[int]) -> set[str]:
    names: set[str] = set()
    for layer in layers:
        prefix = _layer_prefix(layer)
        names.update(n for n in parameter_shapes(config) if n.startswith(prefix))
    # Freezing the bottom block without the embedding tables beneath it
    # would be incoherent, so layer 1 drags the embeddings along.
    if 1 in layers:
        names.update(n for n in parameter_shapes(config) if n.startswith("emb."))
    return names


def freeze_layers(params: EncoderParams, layers: Sequence[int]) -> EncoderParams:
    """Mark the given 1-based layer indices as frozen (in place)."""
    layers = list(layers)
    bad = set(layers) - set(range(1, params.config.num_layers + 1))
    if bad:
        raise BadRange(
            f"layers {sorted(bad)} outside 1..{params.config.num_layers}"
        )
    params.frozen.update(_frozen_names(params.config, layers))
    return params


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / _SQRT_2PI
    return cdf + x * pdf


def _ln_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _ln_backward(dy, cache):
    xhat, inv, gain = cache
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dbias


def _split_heads(x, num_heads):
    B, T, H = x.shape
    return x.reshape(B, T, num_heads, H // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, nh, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, nh * dh)


def _masked_softmax(scores, key_bias):
    """Softmax over the last axis with an additive -inf key bias.

    Fully masked rows (padding queries) get an all-zero distribution rather
    than NaN, so padding can never leak into real positions.
    """
    s = scores + key_bias
    row_max = s.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(s - row_max)
    z = e.sum(axis=-1, keepdims=True)
    return np.where(z > 0.0, e / np.where(z == 0.0, 1.0, z), 0.0)


def forward_batch(
    params: EncoderParams,
    ids: np.ndarray,
    segment_ids: np.ndarray,
    mask: np.ndarray,
    want_cache: bool = False,
):
    """Run the encoder over a padded batch.

    ids, segment_ids, mask: int arrays of shape (B, T). Returns states of
    shape (B, T, H) from the configured output layer, plus a cache for
    backward when requested.
    """
    cfg = params.config
    a = params.arrays
    B, T = ids.shape
    if T > cfg.max_positions:
        raise SequenceTooLong(f"sequence length {T} > {cfg.max_positions}")

    x0 = a["emb.tok"][ids] + a["emb.seg"][segment_ids] + a["emb.pos"][:T]
    h, emb_ln_cache = _ln_forward(x0, a["emb.ln.g"], a["emb.ln.b"])

    key_bias = np.where(mask[:, None, None, :] == 1, 0.0, -np.inf)
    scale = 1.0 / np.sqrt(cfg.head_dim)

    layer_caches = []
    for layer in range(1, cfg.states_layer + 1):
        p = _layer_prefix(layer)
        h_in = h
        q = h_in @ a[p + "attn.wq"] + a[p + "attn.bq"]
        k = h_in @ a[p + "attn.wk"] + a[p + "attn.bk"]
        v = h_in @ a[p + "attn.wv"] + a[p + "attn.bv"]
        qh, kh, vh = (_split_heads(t, cfg.num_heads) for t in (q, k, v))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        probs = _masked_softmax(scores, key_bias)
        ctx = _merge_heads(probs @ vh)
        attn_out = ctx @ a[p + "attn.wo"] + a[p + "attn.bo"]
        h_attn, attn_ln_cache = _ln_forward(
            h_in + attn_out, a[p + "attn.ln.g"], a[p + "attn.ln.b"]
        )
        f1 = h_attn @ a[p + "ffn.w1"] + a[p + "ffn.b1"]
        g1 = _gelu(f1)
        f2 = g1 @ a[p + "ffn.w2"] + a[p + "ffn.b2"]
        h, ffn_ln_cache = _ln_forward(
            h_attn + f2, a[p + "ffn.ln.g"], a[p + "ffn.ln.b"]
        )
        if want_cache:
            layer_caches.append(
                dict(
                    h_in=h_in, qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx,
                    attn_ln=attn_ln_cache, h_attn=h_attn, f1=f1, g1=g1,
                    ffn_ln=ffn_ln_cache,
                )
            )

    cache = None
    if want_cache:
        cache = dict(
            ids=ids, segment_ids=segment_ids, T=T,
            emb_ln=emb_ln_cache, layers=layer_caches, key_bias=key_bias,
        )
    return h, cache


def backward_batch(
    params: EncoderParams, cache: dict, d_states: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt every encoder parameter reached in
    forward, given d(loss)/d(states)."""
    cfg = params.config
    a = params.arrays
    grads: dict[str, np.ndarray] = {}
    scale = 1.0 / np.sqrt(cfg.head_dim)

    dh = d_states
    for layer in range(cfg.states_layer, 0, -1):
        p = _layer_prefix(layer)
        lc = cache["layers"][layer - 1]

        d_res2, grads[p + "ffn.ln.g"], grads[p + "ffn.ln.b"] = _ln_backward(
            dh, lc["ffn_ln"]
        )
        # f2 = gelu(f1) @ w2 + b2 over h_attn residual
        dg1 = d_res2 @ a[p + "ffn.w2"].T
        g1_2 = lc["g1"].reshape(-1, cfg.ffn)
        grads[p + "ffn.w2"] = g1_2.T @ d_res2.reshape(-1, cfg.hidden_dim)
        grads[p + "ffn.b2"] = d_res2.reshape(-1, cfg.hidden_dim).sum(axis=0)
        df1 = dg1 * _gelu_grad(lc["f1"])
        dh_attn = df1 @ a[p + "ffn.w1"].T
        grads[p + "ffn.w1"] = (
            lc["h_attn"].reshape(-1, cfg.hidden_dim).T @ df1.reshape(-1, cfg.ffn)
        )
        grads[p + "ffn.b1"] = df1.reshape(-1, cfg.ffn).sum(axis=0)
        dh_attn = dh_attn + d_res2

        d_res1, grads[p + "attn.ln.g"], grads[p + "attn.ln.b"] = _ln_backward(
            dh_attn, lc["attn_ln"]
        )
        d_attn_out = d_res1
        dctx = d_attn_out @ a[p + "attn.wo"].T
        grads[p + "attn.wo"] = (
            lc["ctx"].reshape(-1, cfg.hidden_dim).T
            @ d_attn_out.reshape(-1, cfg.hidden_dim)
        )
        grads[p + "attn.bo"] = d_attn_out.reshape(-1, cfg.hidden_dim).sum(axis=0)

        dctx_h = _split_heads(dctx, cfg.num_heads)
        probs, vh, qh, kh = lc["probs"], lc["vh"], lc["qh"], lc["kh"]
        dprobs = dctx_h @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx_h
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale

        dq, dk, dv = (_merge_heads(t) for t in (dqh, dkh, dvh))
        h_in2 = lc["h_in"].reshape(-1, cfg.hidden_dim)
        dh_in = d_res1.copy()
        for d, w_name, b_name in (
            (dq, p + "attn.wq", p + "attn.bq"),
            (dk, p + "attn.wk", p + "attn.bk"),
            (dv, p + "attn.wv", p + "attn.bv"),
        ):
            d2 = d.reshape(-1, cfg.hidden_dim)
            grads[w_name] = h_in2.T @ d2
            grads[b_name] = d2.sum(axis=0)
            dh_in += d @ a[w_name].T
        dh = dh_in

    dx0, grads["emb.ln.g"], grads["emb.ln.b"] = _ln_backward(dh, cache["emb_ln"])

    H = cfg.hidden_dim
    dtok = np.zeros_like(a["emb.tok"])
    np.add.at(dtok, cache["ids"].ravel(), dx0.reshape(-1, H))
    grads["emb.tok"] = dtok
    dseg = np.zeros_like(a["emb.seg"])
    np.add.at(dseg, cache["segment_ids"].ravel(), dx0.reshape(-1, H))
    grads["emb.seg"] = dseg
    dpos = np.zeros_like(a["emb.pos"])
    dpos[: cache["T"]] = dx0.sum(axis=0)
    grads["emb.pos"] = dpos
    return grads


def encoder_forward(params: EncoderParams, encoded: EncodedInput) -> np.ndarray:
    """Per-token states (len(encoded) x H) for a single encoded input."""
    ids = np.asarray([encoded.ids], dtype=np.int64)
    segs = np.asarray([encoded.segment_ids], dtype=np.int64)
    mask = np.asarray([encoded.mask], dtype=np.int64)
    states, _ = forward_batch(params, ids, segs, mask)
    return states[0]


def pad_batch(encodeds: Sequence[EncodedInput], pad_id: int):
    """Stack variable-length encoded inputs into padded (B, T) arrays."""
    T = max(len(e) for e in encodeds)
    B = len(encodeds)
    ids = np.full((B, T), pad_id, dtype=np.int64)
    segs = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.int64)
    for i, e in enumerate(encodeds):
        n = len(e)
        ids[i, :n] = e.ids
        segs[i, :n] = e.segment_ids
        mask[i, :n] = e.mask
    return ids, segs, mask


# --------------------------------------------------------------------------
# external embeddings
# --------------------------------------------------------------------------

_MAGIC = b"CSEM1"


def write_external_embeddings(
    target, matrices: Mapping[str, np.ndarray]
) -> None:
    """Write id -> (tokens x H) float32 matrices in the CSEM1 format.

    Header: magic, H (u32 LE), example count (u32 LE). Per example:
    id length (u32), UTF-8 id, token count (u32), row-major float32 LE.
    """
    if not matrices:
        raise ValueError("nothing to write")
    widths = {m.shape[1] for m in matrices.values()}
    if len(widths) != 1:
        raise DimensionMismatch(f"inconsistent hidden widths {sorted(widths)}")
    hidden = widths.pop()

    def _write(fh: BinaryIO):
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", hidden, len(matrices)))
        for key, matrix in matrices.items():
            data = np.ascontiguousarray(matrix, dtype="<f4")
            encoded = key.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.shape[0]))
            fh.write(data.tobytes())

    if hasattr(target, "write"):
        _write(target)
    else:
        with open(target, "wb") as fh:
            _write(fh)


class ExternalEmbeddings:
    """Precomputed per-token states keyed by example id."""

    def __init__(self, hidden_dim: int, matrices: dict[str, np.ndarray]):
        self.hidden_dim = hidden_dim
        self._matrices = matrices

    @classmethod
    def from_bytes(cls, data: bytes) -> "ExternalEmbeddings":
        return cls._read(io.BytesIO(data))

    @classmethod
    def from_file(cls, path) -> "ExternalEmbeddings":
        with open(path, "rb") as fh:
            return cls._read(fh)

    @classmethod
    def _read(cls, fh: BinaryIO) -> "ExternalEmbeddings":
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CorruptHeader(f"bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise CorruptHeader("truncated header")
        hidden, count = struct.unpack("<II", header)
        if hidden == 0:
            raise CorruptHeader("hidden width 0")
        matrices: dict[str, np.ndarray] = {}
        for _ in range(count):
            raw = fh.read(4)
            if len(raw) != 4:
                raise CorruptHeader("truncated example id length")
            (id_len,) = struct.unpack("<I", raw)
            key = fh.read(id_len).decode("utf-8")
            raw = fh.read(4)
            if len(raw) != 4:
                raise CorruptHeader("truncated token count")
            (tokens,) = struct.unpack("<I", raw)
            payload = fh.read(tokens * hidden * 4)
            if len(payload) != tokens * hidden * 4:
                raise CorruptHeader(f"truncated matrix for {key!r}")
            matrices[key] = np.frombuffer(payload, dtype="<f4").reshape(tokens, hidden)
        return cls(hidden, matrices)

    @property
    def ids(self) -> list[str]:
        return list(self._matrices)

    def __contains__(self, example_id: str) -> bool:
        return example_id in self._matrices

    def get(self, example_id: str) -> np.ndarray:
        """Stored (tokens x H) float32 matrix, exactly as written."""
        try:
            return self._matrices[example_id]
        except KeyError:
            raise MissingExample(example_id) from None


class InMemoryEmbeddings:
    """Dict-backed provider with the same interface as ExternalEmbeddings."""

    def __init__(self, matrices: Mapping[str, np.ndarray]):
        widths = {np.asarray(m).shape[1] for m in matrices.values()}
        if len(widths) > 1:
            raise DimensionMismatch(f"inconsistent hidden widths {sorted(widths)}")
        self.hidden_dim = widths.pop() if widths else 0
        self._matrices = {k: np.asarray(v) for k, v in matrices.items()}

    @property
    def ids(self) -> list[str]:
        return list(self._matrices)

    def __contains__(self, example_id: str) -> bool:
        return example_id in self._matrices

    def get(self, example_id: str) -> np.ndarray:
        try:
            return self._matrices[example_id]
        except KeyError:
            raise MissingExample(example_id) from None
