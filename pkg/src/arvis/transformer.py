"""Decoder-only causal transformer over the unified text+image vocabulary.

Pre-norm blocks with rms_norm, rotary positions (1D sequence index or 2D axial
row/col), SwiGLU feed-forward, untied unembedding. The forward pass comes in
three flavors sharing one set of weights:

  * forward_batch   - full sequences, optional activation tape for the
                      hand-written backward pass (training);
  * forward_cached  - n new tokens against a paged KV cache handle (decoding,
                      speculative windows);
  * forward_step_batch - one token for each of B independent streams in
                      lockstep (batched decoding, rollouts).

Checkpoints are a flat binary format: magic "SAR1", version, a key=value
config record, then every tensor in canonical declaration order as
little-endian float32 with a length-prefixed name.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import (CacheError, CapacityError, CheckpointConsistencyError,
                     CheckpointMagicError, CheckpointTruncatedError,
                     CheckpointVersionError, ConfigError)
from .kv_cache import BlockPool, CacheHandle

ROPE_MODES = ("1d", "2d")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    total_vocab: int = 93
    max_seq_len: int = 600
    rope_mode: str = "1d"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ConfigError("model_dim must be divisible by n_heads")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary pairs")
        if self.rope_mode == "2d" and self.head_dim % 4:
            raise ConfigError("2d rope needs head_dim divisible by 4")
        if self.rope_mode not in ROPE_MODES:
            raise ConfigError(f"rope_mode must be one of {ROPE_MODES}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


def param_order(config: ModelConfig) -> list[str]:
    names = ["embed"]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        names += [p + "norm_attn", p + "wq", p + "wk", p + "wv", p + "wo",
                  p + "norm_ffn", p + "wg", p + "wu", p + "wd"]
    names += ["norm_out", "unembed"]
    return names


def param_shape(name: str, config: ModelConfig) -> tuple[int, ...]:
    d, f, v = config.model_dim, config.ffn_dim, config.total_vocab
    leaf = name.rsplit(".", 1)[-1]
    return {
        "embed": (v, d), "unembed": (d, v),
        "norm_attn": (d,), "norm_ffn": (d,), "norm_out": (d,),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "wg": (d, f), "wu": (d, f), "wd": (f, d),
    }[leaf]


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded N(0, 0.02) matrices, unit norm gains, zero block output projections."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name in param_order(config):
        shape = param_shape(name, config)
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("norm"):
            params[name] = np.ones(shape, dtype=nm.DTYPE)
        elif leaf in ("wo", "wd"):
            params[name] = np.zeros(shape, dtype=nm.DTYPE)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape).astype(nm.DTYPE)
    return params


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


def new_model(config: ModelConfig | None = None, seed: int = 0) -> Model:
    config = config or ModelConfig()
    return Model(config, init_params(config, seed))


# ---------------------------------------------------------------------------
# positions and rotary encoding
# ---------------------------------------------------------------------------

def sequence_positions(total_len: int, prefix_len: int, h: int, w: int) -> np.ndarray:
    """(L, 3) position table [row, col, scan] for a [prefix | image | tail] layout.

    The scan column is the plain sequence index (what 1d rope rotates by).
    For 2d rope, prefix tokens (BOS, prompt, BOI) sit at (i, 0), image token j
    at (prefix_len + j // w, j % w), and tail tokens (EOI, padding) continue on
    the row axis at column 0 -- one defensible layout that keeps text causal
    order on the row axis and gives image tokens true grid coordinates.
    """
    pos = np.zeros((total_len, 3), dtype=np.int64)
    for i in range(total_len):
        if i < prefix_len:
            rc = (i, 0)
        elif i < prefix_len + h * w:
            j = i - prefix_len
            rc = (prefix_len + j // w, j % w)
        else:
            rc = (prefix_len + h + (i - prefix_len - h * w), 0)
        pos[i] = (rc[0], rc[1], i)
    return pos


def rope_angles(positions: np.ndarray, head_dim: int, mode: str, base: float,
                dtype=nm.DTYPE) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) tables of shape (N, head_dim // 2).

    1d: pair j rotates by scan_index * base^(-2j/d).
    2d: the first half of the pairs rotates by the row coordinate, the second
    half by the column, each half on the 1d frequency schedule of a head of
    half width.
    """
    n = positions.shape[0]
    half = head_dim // 2
    if mode == "1d":
        freqs = base ** (-2.0 * np.arange(half) / head_dim)
        ang = positions[:, 2][:, None].astype(np.float64) * freqs[None, :]
    elif mode == "2d":
        quarter = half // 2
        freqs = base ** (-2.0 * np.arange(quarter) / (head_dim // 2))
        ang = np.empty((n, half), dtype=np.float64)
        ang[:, :quarter] = positions[:, 0:1].astype(np.float64) * freqs[None, :]
        ang[:, quarter:] = positions[:, 1:2].astype(np.float64) * freqs[None, :]
    else:
        raise ConfigError(f"unknown rope mode {mode}")
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, n_heads: int) -> np.ndarray:
    """Rotate every head of x (N, n_heads*head_dim) by the per-row angle table."""
    n, d = x.shape
    hd = d // n_heads
    x3 = x.reshape(n, n_heads, hd)
    even = x3[:, :, 0::2]
    odd = x3[:, :, 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x3)
    out[:, :, 0::2] = even * c - odd * s
    out[:, :, 1::2] = even * s + odd * c
    return out.reshape(n, d)


def rope_rotate(vec: np.ndarray, position, mode: str, base: float = 10000.0) -> np.ndarray:
    """Rotate one head vector by its position (int for 1d, (row, col) for 2d)."""
    vec = np.asarray(vec)
    if vec.ndim != 1 or vec.shape[0] % 2:
        raise ConfigError("rope_rotate expects an even-length vector")
    if mode == "1d":
        pos = np.array([[0, 0, int(position)]], dtype=np.int64)
    else:
        pos = np.array([[position[0], position[1], 0]], dtype=np.int64)
    cos, sin = rope_angles(pos, vec.shape[0], mode, base, dtype=vec.dtype)
    return apply_rope(vec[None, :], cos, sin, n_heads=1)[0]


# ---------------------------------------------------------------------------
# full forward with tape (training)
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    ids: np.ndarray
    slices: list[tuple[int, int]]
    cos: np.ndarray
    sin: np.ndarray
    layers: list[dict]
    x_final: np.ndarray
    inv_final: np.ndarray
    xf: np.ndarray
    logits: np.ndarray


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)  # (H, T, hd)


def _unheads(x3: np.ndarray) -> np.ndarray:
    h, t, hd = x3.shape
    return x3.transpose(1, 0, 2).reshape(t, h * hd)


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def _causal_bias(t: int, dtype) -> np.ndarray:
    """Additive causal mask: 0 on/below the diagonal, -inf above. Cached per (t, dtype)."""
    key = (t, np.dtype(dtype).str)
    bias = _MASK_CACHE.get(key)
    if bias is None:
        bias = np.where(np.triu(np.ones((t, t), dtype=bool), k=1),
                        np.array(-np.inf, dtype=dtype), np.array(0.0, dtype=dtype))
        _MASK_CACHE[key] = bias
    return bias


def _attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int):
    """Multi-head causal attention for one sequence. Returns (out, probs)."""
    q3, k3, v3 = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    t, hd = q3.shape[1], q3.shape[2]
    scale = 1.0 / np.sqrt(np.asarray(hd, dtype=q.dtype))
    scores = np.matmul(q3, k3.transpose(0, 2, 1)) * scale
    nm.add_flops(2 * n_heads * t * hd * t)
    scores += _causal_bias(t, q.dtype)[None]
    probs = nm.softmax_rows(scores)
    out = np.matmul(probs, v3)
    nm.add_flops(2 * n_heads * t * t * hd)
    return _unheads(out), probs


def _attention_backward(q, k, v, probs, d_out, n_heads):
    q3, k3, v3 = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    do3 = _heads(d_out, n_heads)
    hd = q3.shape[2]
    scale = 1.0 / np.sqrt(np.asarray(hd, dtype=q.dtype))
    dv3 = np.matmul(probs.transpose(0, 2, 1), do3)
    dp = np.matmul(do3, v3.transpose(0, 2, 1))
    ds = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True))
    dq3 = np.matmul(ds, k3) * scale
    dk3 = np.matmul(ds.transpose(0, 2, 1), q3) * scale
    t = q3.shape[1]
    nm.add_flops(8 * n_heads * t * t * hd)
    return _unheads(dq3), _unheads(dk3), _unheads(dv3)


def forward_batch(model: Model, seqs: list[np.ndarray],
                  positions: list[np.ndarray], want_tape: bool = False):
    """Full causal forward over a list of sequences (concatenated internally).

    Returns (logits_list, tape); logits_list[i] has one row per token of seq i.
    """
    cfg, p = model.config, model.params
    for s in seqs:
        if s.size > cfg.max_seq_len:
            raise CapacityError(f"sequence length {s.size} exceeds max {cfg.max_seq_len}")
    ids = np.concatenate(seqs)
    pos = np.concatenate(positions)
    slices = []
    ofs = 0
    for s in seqs:
        slices.append((ofs, ofs + s.size))
        ofs += s.size
    dtype = p["embed"].dtype
    cos, sin = rope_angles(pos, cfg.head_dim, cfg.rope_mode, cfg.rope_base, dtype)
    x = nm.embedding_rows(p["embed"], ids)
    layer_tapes = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        x_in = x
        h, inv1 = nm.rms_norm_rows(x_in, p[pre + "norm_attn"])
        q = apply_rope(nm.matmul(h, p[pre + "wq"]), cos, sin, cfg.n_heads)
        k = apply_rope(nm.matmul(h, p[pre + "wk"]), cos, sin, cfg.n_heads)
        v = nm.matmul(h, p[pre + "wv"])
        attn = np.empty_like(x_in)
        probs_per_seq = []
        for a, b in slices:
            out, probs = _attention_forward(q[a:b], k[a:b], v[a:b], cfg.n_heads)
            attn[a:b] = out
            probs_per_seq.append(probs if want_tape else None)
        x_mid = x_in + nm.matmul(attn, p[pre + "wo"])
        h2, inv2 = nm.rms_norm_rows(x_mid, p[pre + "norm_ffn"])
        gate = nm.matmul(h2, p[pre + "wg"])
        up = nm.matmul(h2, p[pre + "wu"])
        sig = nm.sigmoid(gate)
        sg = gate * sig
        act = sg * up
        x = x_mid + nm.matmul(act, p[pre + "wd"])
        if want_tape:
            layer_tapes.append(dict(x_in=x_in, h=h, inv1=inv1, q=q, k=k, v=v,
                                    probs=probs_per_seq, attn=attn, x_mid=x_mid,
                                    h2=h2, inv2=inv2, gate=gate, sig=sig, sg=sg,
                                    up=up, act=act))
    xf, inv3 = nm.rms_norm_rows(x, p["norm_out"])
    logits = nm.matmul(xf, p["unembed"])
    tape = None
    if want_tape:
        tape = Tape(ids, slices, cos, sin, layer_tapes, x, inv3, xf, logits)
    return [logits[a:b] for a, b in slices], tape


def backward_batch(model: Model, tape: Tape, d_logits_list: list[np.ndarray]) -> dict[str, np.ndarray]:
    """Parameter gradients for forward_batch given per-sequence dL/dlogits."""
    cfg, p = model.config, model.params
    grads = {name: np.zeros_like(p[name]) for name in param_order(cfg)}
    d_logits = np.concatenate(d_logits_list)
    grads["unembed"] += nm.matmul(tape.xf.T, d_logits)
    dxf = nm.matmul(d_logits, p["unembed"].T)
    dx, dg = nm.rms_norm_rows_backward(tape.x_final, p["norm_out"], tape.inv_final, dxf)
    grads["norm_out"] += dg
    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}."
        t = tape.layers[i]
        # ffn branch: x = x_mid + act @ wd
        grads[pre + "wd"] += nm.matmul(t["act"].T, dx)
        dact = nm.matmul(dx, p[pre + "wd"].T)
        sig = t["sig"]
        dgate = (dact * t["up"]) * (sig * (1.0 + t["gate"] * (1.0 - sig)))
        dup = dact * t["sg"]
        grads[pre + "wg"] += nm.matmul(t["h2"].T, dgate)
        grads[pre + "wu"] += nm.matmul(t["h2"].T, dup)
        dh2 = nm.matmul(dgate, p[pre + "wg"].T) + nm.matmul(dup, p[pre + "wu"].T)
        dmid_norm, dg2 = nm.rms_norm_rows_backward(t["x_mid"], p[pre + "norm_ffn"], t["inv2"], dh2)
        grads[pre + "norm_ffn"] += dg2
        dx_mid = dx + dmid_norm
        # attention branch: x_mid = x_in + attn @ wo
        grads[pre + "wo"] += nm.matmul(t["attn"].T, dx_mid)
        dattn = nm.matmul(dx_mid, p[pre + "wo"].T)
        dq = np.empty_like(t["q"])
        dk = np.empty_like(t["k"])
        dv = np.empty_like(t["v"])
        for (a, b), probs in zip(tape.slices, t["probs"]):
            dq[a:b], dk[a:b], dv[a:b] = _attention_backward(
                t["q"][a:b], t["k"][a:b], t["v"][a:b], probs, dattn[a:b], cfg.n_heads)
        # rope backward: rotate by the negated angle
        dq = apply_rope(dq, tape.cos, -tape.sin, cfg.n_heads)
        dk = apply_rope(dk, tape.cos, -tape.sin, cfg.n_heads)
        grads[pre + "wq"] += nm.matmul(t["h"].T, dq)
        grads[pre + "wk"] += nm.matmul(t["h"].T, dk)
        grads[pre + "wv"] += nm.matmul(t["h"].T, dv)
        dh = (nm.matmul(dq, p[pre + "wq"].T) + nm.matmul(dk, p[pre + "wk"].T)
              + nm.matmul(dv, p[pre + "wv"].T))
        din_norm, dg1 = nm.rms_norm_rows_backward(t["x_in"], p[pre + "norm_attn"], t["inv1"], dh)
        grads[pre + "norm_attn"] += dg1
        dx = dx_mid + din_norm
    grads["embed"] += nm.embedding_backward(tape.ids, dx, cfg.total_vocab)
    return grads


# ---------------------------------------------------------------------------
# cached incremental forward (decoding)
# ---------------------------------------------------------------------------

def make_pool(config: ModelConfig, n_tokens: int, block_size: int = 16,
              dtype=None) -> BlockPool:
    """Pool sized for n_tokens total across all handles."""
    capacity = -(-n_tokens // block_size)
    dtype = dtype or nm.DTYPE
    return BlockPool(config.n_layers, config.model_dim, capacity, block_size, dtype)


def forward_cached(model: Model, new_ids: np.ndarray, new_positions: np.ndarray,
                   handle: CacheHandle, append: bool = True,
                   expected_prefix: int | None = None):
    """Forward n new tokens on top of a cached prefix.

    Returns (logits (n, vocab), kv_rows) where kv_rows[layer] = (k, v) for the
    new tokens. With append=False the caller may later commit a verified slice
    via commit_rows().
    """
    cfg, p = model.config, model.params
    if expected_prefix is not None and handle.filled != expected_prefix:
        raise CacheError(f"cache holds {handle.filled} tokens, caller expected {expected_prefix}")
    n = new_ids.size
    prefix = handle.filled
    if prefix + n > cfg.max_seq_len:
        raise CapacityError(f"sequence length {prefix + n} exceeds max {cfg.max_seq_len}")
    dtype = p["embed"].dtype
    cos, sin = rope_angles(new_positions, cfg.head_dim, cfg.rope_mode, cfg.rope_base, dtype)
    x = nm.embedding_rows(p["embed"], new_ids)
    kv_rows = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h, _ = nm.rms_norm_rows(x, p[pre + "norm_attn"])
        q = apply_rope(nm.matmul(h, p[pre + "wq"]), cos, sin, cfg.n_heads)
        k = apply_rope(nm.matmul(h, p[pre + "wk"]), cos, sin, cfg.n_heads)
        v = nm.matmul(h, p[pre + "wv"])
        k_c, v_c = handle.pool.gather(handle, i)
        k_all = np.concatenate([k_c, k]) if prefix else k
        v_all = np.concatenate([v_c, v]) if prefix else v
        attn = np.empty_like(x)
        hd = cfg.head_dim
        q3 = _heads(q, cfg.n_heads)
        k3 = _heads(k_all, cfg.n_heads)
        v3 = _heads(v_all, cfg.n_heads)
        scale = 1.0 / np.sqrt(np.asarray(hd, dtype=dtype))
        scores = np.matmul(q3, k3.transpose(0, 2, 1)) * scale
        nm.add_flops(4 * cfg.n_heads * n * hd * k_all.shape[0])
        if n > 1:
            cols = np.arange(k_all.shape[0])[None, None, :]
            rows = np.arange(n)[None, :, None]
            scores = np.where(cols > rows + prefix, np.asarray(-np.inf, dtype=dtype), scores)
        probs = nm.softmax_rows(scores)
        attn = _unheads(np.matmul(probs, v3))
        x = x + nm.matmul(attn, p[pre + "wo"])
        h2, _ = nm.rms_norm_rows(x, p[pre + "norm_ffn"])
        act = nm.silu(nm.matmul(h2, p[pre + "wg"])) * nm.matmul(h2, p[pre + "wu"])
        x = x + nm.matmul(act, p[pre + "wd"])
        kv_rows.append((k, v))
    xf, _ = nm.rms_norm_rows(x, p["norm_out"])
    logits = nm.matmul(xf, p["unembed"])
    if append:
        handle.pool.append(handle, kv_rows)
    return logits, kv_rows


def commit_rows(handle: CacheHandle, kv_rows, n: int) -> None:
    """Append the first n of the freshly computed rows to the cache."""
    if n == 0:
        return
    handle.pool.append(handle, [(k[:n], v[:n]) for k, v in kv_rows])


def forward_step_batch(model: Model, tokens: np.ndarray, positions: np.ndarray,
                       handles: list[CacheHandle]):
    """One-token lockstep forward for B independent cached streams."""
    cfg, p = model.config, model.params
    b = tokens.size
    dtype = p["embed"].dtype
    for hd_ in handles:
        if hd_.filled + 1 > cfg.max_seq_len:
            raise CapacityError("stream exceeds max_seq_len")
    cos, sin = rope_angles(positions, cfg.head_dim, cfg.rope_mode, cfg.rope_base, dtype)
    x = nm.embedding_rows(p["embed"], tokens)
    per_stream_rows: list[list] = [[] for _ in range(b)]
    hd = cfg.head_dim
    scale = 1.0 / np.sqrt(np.asarray(hd, dtype=dtype))
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h, _ = nm.rms_norm_rows(x, p[pre + "norm_attn"])
        q = apply_rope(nm.matmul(h, p[pre + "wq"]), cos, sin, cfg.n_heads)
        k = apply_rope(nm.matmul(h, p[pre + "wk"]), cos, sin, cfg.n_heads)
        v = nm.matmul(h, p[pre + "wv"])
        attn = np.empty_like(x)
        for s in range(b):
            k_c, v_c = handles[s].pool.gather(handles[s], i)
            k_all = np.concatenate([k_c, k[s:s + 1]]) if k_c.size else k[s:s + 1]
            v_all = np.concatenate([v_c, v[s:s + 1]]) if v_c.size else v[s:s + 1]
            c = k_all.shape[0]
            q3 = q[s].reshape(cfg.n_heads, hd)
            k3 = k_all.reshape(c, cfg.n_heads, hd)
            v3 = v_all.reshape(c, cfg.n_heads, hd)
            scores = np.einsum("hd,chd->hc", q3, k3) * scale
            probs = nm.softmax_rows(scores)
            attn[s] = np.einsum("hc,chd->hd", probs, v3).reshape(-1)
            nm.add_flops(4 * cfg.n_heads * hd * c)
            per_stream_rows[s].append((k[s:s + 1], v[s:s + 1]))
        x = x + nm.matmul(attn, p[pre + "wo"])
        h2, _ = nm.rms_norm_rows(x, p[pre + "norm_ffn"])
        act = nm.silu(nm.matmul(h2, p[pre + "wg"])) * nm.matmul(h2, p[pre + "wu"])
        x = x + nm.matmul(act, p[pre + "wd"])
    for s in range(b):
        handles[s].pool.append(handles[s], per_stream_rows[s])
    xf, _ = nm.rms_norm_rows(x, p["norm_out"])
    return nm.matmul(xf, p["unembed"])


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SAR1"
CHECKPOINT_VERSION = 1

_CONFIG_FIELDS = ("n_layers", "n_heads", "model_dim", "ffn_dim", "total_vocab",
                  "max_seq_len", "rope_mode", "rope_base")


def save_checkpoint(model: Model, path: str | Path) -> None:
    cfg = model.config
    blob = "\n".join(f"{k}={getattr(cfg, k)}" for k in _CONFIG_FIELDS).encode("ascii")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in param_order(cfg):
            tensor = np.ascontiguousarray(model.params[name], dtype="<f4")
            nb = name.encode("ascii")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(tensor.tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(f"expected {n} bytes, got {len(data)}")
    return data


def load_checkpoint(path: str | Path) -> Model:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4))
        fields = {}
        for line in _read_exact(f, blob_len).decode("ascii").splitlines():
            key, val = line.split("=", 1)
            fields[key] = val
        try:
            cfg = ModelConfig(
                n_layers=int(fields["n_layers"]), n_heads=int(fields["n_heads"]),
                model_dim=int(fields["model_dim"]), ffn_dim=int(fields["ffn_dim"]),
                total_vocab=int(fields["total_vocab"]),
                max_seq_len=int(fields["max_seq_len"]),
                rope_mode=fields["rope_mode"], rope_base=float(fields["rope_base"]))
        except (KeyError, ValueError) as e:
            raise CheckpointConsistencyError(f"bad config record: {e}") from e
        params = {}
        for name in param_order(cfg):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            stored = _read_exact(f, name_len).decode("ascii")
            if stored != name:
                raise CheckpointConsistencyError(f"expected tensor {name}, found {stored}")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            if tuple(shape) != param_shape(name, cfg):
                raise CheckpointConsistencyError(
                    f"tensor {name} has shape {shape}, config implies {param_shape(name, cfg)}")
            count = int(np.prod(shape)) if shape else 1
            data = _read_exact(f, 4 * count)
            params[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(nm.DTYPE)
        if f.read(1):
            raise CheckpointConsistencyError("trailing bytes after final tensor")
    return Model(cfg, params)
