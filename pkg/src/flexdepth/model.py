"""Toy encoder-decoder transformer with per-layer residual gates.

Every layer is one gated residual unit: with its gate at 1 the layer adds
its usual contribution to the residual stream, with its gate at 0 the layer
is skipped entirely, so the stream passes through bit-identically. Gates
come either from a deterministic sub-network (training and inference use
the same layers) or from per-layer Bernoulli sampling (the stochastic
layer-drop baseline).

The network is pre-norm throughout, runs in float64, and implements its own
backward pass so that tests can check gradients against finite differences
and masked layers can be shown to receive exactly zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from flexdepth import kernels
from flexdepth.assignment import SubNetwork

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2

LN_EPS = 1e-6
MASK_FILL = -1e9


class ModelError(RuntimeError):
    """Raised when a forward or backward pass produces non-finite values."""


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int
    dec_layers: int
    width: int = 32
    heads: int = 2
    ffn_width: int = 64
    vocab_size: int = 16
    max_len: int = 32

    def __post_init__(self) -> None:
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("both stacks need at least one layer")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.vocab_size <= EOS_ID:
            raise ValueError("vocab must cover pad, bos, and eos")

    @property
    def head_width(self) -> int:
        return self.width // self.heads


@dataclass(frozen=True)
class GateVector:
    """Binary per-layer gates for one forward pass."""

    enc: tuple[int, ...]
    dec: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(g not in (0, 1) for g in self.enc + self.dec):
            raise ValueError("gates must be 0 or 1")

    @classmethod
    def full(cls, config: ModelConfig) -> "GateVector":
        return cls((1,) * config.enc_layers, (1,) * config.dec_layers)

    @classmethod
    def from_subnetworks(cls, enc_sn: SubNetwork, dec_sn: SubNetwork) -> "GateVector":
        enc = tuple(1 if i in set(enc_sn.layers) else 0 for i in range(1, enc_sn.total_depth + 1))
        dec = tuple(1 if i in set(dec_sn.layers) else 0 for i in range(1, dec_sn.total_depth + 1))
        return cls(enc, dec)

    def check(self, config: ModelConfig) -> None:
        if len(self.enc) != config.enc_layers or len(self.dec) != config.dec_layers:
            raise ValueError(
                f"gate lengths ({len(self.enc)}, {len(self.dec)}) do not match "
                f"model depths ({config.enc_layers}, {config.dec_layers})"
            )


def sample_gates(p: float, config: ModelConfig, rng) -> GateVector:
    """Draw independent Bernoulli gates with Pr(gate = 0) = p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    draws = rng.random(config.enc_layers + config.dec_layers)
    gates = tuple(int(u >= p) for u in draws)
    return GateVector(gates[: config.enc_layers], gates[config.enc_layers :])


@dataclass
class Batch:
    """One padded batch of source/target token matrices."""

    src: np.ndarray        # (B, S) int64, PAD_ID on the right
    src_mask: np.ndarray   # (B, S) bool, True at real tokens
    tgt_in: np.ndarray     # (B, T) int64, starts with BOS
    tgt_out: np.ndarray    # (B, T) int64, ends with EOS
    tgt_mask: np.ndarray   # (B, T) bool
    batch_id: int = 0

    def __post_init__(self) -> None:
        rows = {a.shape[0] for a in (self.src, self.src_mask, self.tgt_in, self.tgt_out, self.tgt_mask)}
        if len(rows) != 1:
            raise ValueError("batch arrays disagree on row count")

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_mask.sum())


class Parameters:
    """Named tensors of the model, addressable by stable dotted names."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors and value.shape != self.tensors[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def equal(self, other: "Parameters") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))


def _attn_names(prefix):
    return [f"{prefix}.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """Deterministic variance-scaled initialization."""
    rng = np.random.default_rng(seed)
    H, F, V = config.width, config.ffn_width, config.vocab_size
    t: dict[str, np.ndarray] = {}
    t["embed"] = rng.normal(0.0, 1.0 / math.sqrt(H), (V, H))

    def add_ln(prefix):
        t[f"{prefix}.g"] = np.ones(H)
        t[f"{prefix}.b"] = np.zeros(H)

    def add_attn(prefix):
        for name in ("wq", "wk", "wv", "wo"):
            t[f"{prefix}.{name}"] = _glorot(rng, H, H)
            t[f"{prefix}.{name.replace('w', 'b')}"] = np.zeros(H)

    def add_ffn(prefix):
        t[f"{prefix}.w1"] = _glorot(rng, H, F)
        t[f"{prefix}.b1"] = np.zeros(F)
        t[f"{prefix}.w2"] = _glorot(rng, F, H)
        t[f"{prefix}.b2"] = np.zeros(H)

    for i in range(config.enc_layers):
        add_ln(f"enc.{i}.ln1")
        add_attn(f"enc.{i}.attn")
        add_ln(f"enc.{i}.ln2")
        add_ffn(f"enc.{i}.ffn")
    add_ln("enc_norm")
    for j in range(config.dec_layers):
        add_ln(f"dec.{j}.ln1")
        add_attn(f"dec.{j}.self")
        add_ln(f"dec.{j}.ln2")
        add_attn(f"dec.{j}.cross")
        add_ln(f"dec.{j}.ln3")
        add_ffn(f"dec.{j}.ffn")
    add_ln("dec_norm")
    t["out.w"] = _glorot(rng, H, V)
    t["out.b"] = np.zeros(V)
    return Parameters(t)


def positional_encoding(length: int, width: int) -> np.ndarray:
    """Fixed sinusoidal position table, (length, width)."""
    pos = np.arange(length)[:, None].astype(np.float64)
    dim = np.arange(0, width, 2).astype(np.float64)
    angles = pos / np.power(10000.0, dim / width)
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


# ---------------------------------------------------------------------------
# forward / backward building blocks


def _rows(x):
    # flatten all leading axes into rows for the 2D kernels
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def _ln_forward(params, prefix, x):
    y2, mean, rstd = kernels.layer_norm_forward(
        _rows(x), params[f"{prefix}.g"], params[f"{prefix}.b"], LN_EPS
    )
    cache = (x, mean, rstd, prefix)
    return y2.reshape(x.shape), cache


def _ln_backward(params, grads, cache, dy):
    x, mean, rstd, prefix = cache
    dx2, dg, db = kernels.layer_norm_backward(
        _rows(dy), _rows(x), params[f"{prefix}.g"], mean, rstd
    )
    grads[f"{prefix}.g"] += dg
    grads[f"{prefix}.b"] += db
    return dx2.reshape(x.shape)


def _split_heads(x, heads):
    B, L, H = x.shape
    return x.reshape(B, L, heads, H // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, nh, L, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B, L, nh * hd)


def _attn_forward(params, prefix, q_in, kv_in, bias, heads):
    """Multi-head attention; bias is the additive mask, broadcast to scores."""
    wq, bq, wk, bk, wv, bv, wo, bo = (params[n] for n in _attn_names(prefix))
    q = _split_heads(q_in @ wq + bq, heads)
    k = _split_heads(kv_in @ wk + bk, heads)
    v = _split_heads(kv_in @ wv + bv, heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = q @ k.swapaxes(-1, -2) * scale + bias
    probs2 = kernels.softmax_forward(_rows(scores))
    probs = probs2.reshape(scores.shape)
    ctx = _merge_heads(probs @ v)
    out = ctx @ wo + bo
    cache = (prefix, q_in, kv_in, q, k, v, probs, ctx, scale)
    return out, cache


def _attn_backward(params, grads, cache, dout):
    prefix, q_in, kv_in, q, k, v, probs, ctx, scale = cache
    wq, _, wk, _, wv, _, wo, _ = (params[n] for n in _attn_names(prefix))
    heads = q.shape[1]

    grads[f"{prefix}.wo"] += _rows(ctx).T @ _rows(dout)
    grads[f"{prefix}.bo"] += _rows(dout).sum(axis=0)
    dctx = _split_heads(dout @ wo.T, heads)

    dprobs = dctx @ v.swapaxes(-1, -2)
    dv = probs.swapaxes(-1, -2) @ dctx
    dscores2 = kernels.softmax_backward(_rows(dprobs), _rows(probs))
    dscores = dscores2.reshape(dprobs.shape) * scale
    dq = dscores @ k
    dk = dscores.swapaxes(-1, -2) @ q

    dq_m, dk_m, dv_m = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    grads[f"{prefix}.wq"] += _rows(q_in).T @ _rows(dq_m)
    grads[f"{prefix}.bq"] += _rows(dq_m).sum(axis=0)
    grads[f"{prefix}.wk"] += _rows(kv_in).T @ _rows(dk_m)
    grads[f"{prefix}.bk"] += _rows(dk_m).sum(axis=0)
    grads[f"{prefix}.wv"] += _rows(kv_in).T @ _rows(dv_m)
    grads[f"{prefix}.bv"] += _rows(dv_m).sum(axis=0)

    dq_in = dq_m @ wq.T
    dkv_in = dk_m @ wk.T + dv_m @ wv.T
    return dq_in, dkv_in


def _ffn_forward(params, prefix, x):
    w1, b1 = params[f"{prefix}.w1"], params[f"{prefix}.b1"]
    w2, b2 = params[f"{prefix}.w2"], params[f"{prefix}.b2"]
    pre = x @ w1 + b1
    h = np.maximum(pre, 0.0)
    out = h @ w2 + b2
    return out, (prefix, x, pre, h)


def _ffn_backward(params, grads, cache, dout):
    prefix, x, pre, h = cache
    w1, w2 = params[f"{prefix}.w1"], params[f"{prefix}.w2"]
    grads[f"{prefix}.w2"] += _rows(h).T @ _rows(dout)
    grads[f"{prefix}.b2"] += _rows(dout).sum(axis=0)
    dh = (dout @ w2.T) * (pre > 0.0)
    grads[f"{prefix}.w1"] += _rows(x).T @ _rows(dh)
    grads[f"{prefix}.b1"] += _rows(dh).sum(axis=0)
    return dh @ w1.T


def _enc_layer_forward(params, config, i, x, bias):
    normed, c_ln1 = _ln_forward(params, f"enc.{i}.ln1", x)
    attn, c_attn = _attn_forward(params, f"enc.{i}.attn", normed, normed, bias, config.heads)
    x2 = x + attn
    normed2, c_ln2 = _ln_forward(params, f"enc.{i}.ln2", x2)
    ffn, c_ffn = _ffn_forward(params, f"enc.{i}.ffn", normed2)
    return x2 + ffn, (c_ln1, c_attn, c_ln2, c_ffn)


def _enc_layer_backward(params, grads, cache, dy):
    c_ln1, c_attn, c_ln2, c_ffn = cache
    dnormed2 = _ffn_backward(params, grads, c_ffn, dy)
    dx2 = dy + _ln_backward(params, grads, c_ln2, dnormed2)
    dq, dkv = _attn_backward(params, grads, c_attn, dx2)
    dx = dx2 + _ln_backward(params, grads, c_ln1, dq + dkv)
    return dx


def _dec_layer_forward(params, config, j, x, mem, self_bias, cross_bias):
    normed, c_ln1 = _ln_forward(params, f"dec.{j}.ln1", x)
    sa, c_sa = _attn_forward(params, f"dec.{j}.self", normed, normed, self_bias, config.heads)
    x2 = x + sa
    normed2, c_ln2 = _ln_forward(params, f"dec.{j}.ln2", x2)
    ca, c_ca = _attn_forward(params, f"dec.{j}.cross", normed2, mem, cross_bias, config.heads)
    x3 = x2 + ca
    normed3, c_ln3 = _ln_forward(params, f"dec.{j}.ln3", x3)
    ffn, c_ffn = _ffn_forward(params, f"dec.{j}.ffn", normed3)
    return x3 + ffn, (c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_ffn)


def _dec_layer_backward(params, grads, cache, dy):
    c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_ffn = cache
    dnormed3 = _ffn_backward(params, grads, c_ffn, dy)
    dx3 = dy + _ln_backward(params, grads, c_ln3, dnormed3)
    dnormed2, dmem = _attn_backward(params, grads, c_ca, dx3)
    dx2 = dx3 + _ln_backward(params, grads, c_ln2, dnormed2)
    dq, dkv = _attn_backward(params, grads, c_sa, dx2)
    dx = dx2 + _ln_backward(params, grads, c_ln1, dq + dkv)
    return dx, dmem


def _embed_forward(params, config, tokens):
    emb = params["embed"][tokens] * math.sqrt(config.width)
    return emb + positional_encoding(tokens.shape[1], config.width)


def _embed_backward(params, grads, config, tokens, dout):
    np.add.at(grads["embed"], tokens.ravel(), _rows(dout) * math.sqrt(config.width))


def _pad_bias(mask):
    # (B, S) bool -> additive (B, 1, 1, S)
    return np.where(mask, 0.0, MASK_FILL)[:, None, None, :]


def _causal_bias(length):
    upper = np.triu(np.full((length, length), MASK_FILL), k=1)
    return upper[None, None, :, :]


def encode(params, config, src, src_mask, enc_gates):
    """Run the gated encoder stack; returns (memory, cache)."""
    bias = _pad_bias(src_mask)
    x = _embed_forward(params, config, src)
    layer_caches = []
    for i, gate in enumerate(enc_gates):
        if gate:
            x, c = _enc_layer_forward(params, config, i, x, bias)
            layer_caches.append((i, c))
    mem, c_norm = _ln_forward(params, "enc_norm", x)
    return mem, {"src": src, "bias": bias, "layers": layer_caches, "norm": c_norm}


def decode_logits(params, config, tgt_in, mem, src_mask, dec_gates):
    """Run the gated decoder stack over a target prefix; returns (logits, cache)."""
    self_bias = _causal_bias(tgt_in.shape[1])
    cross_bias = _pad_bias(src_mask)
    x = _embed_forward(params, config, tgt_in)
    layer_caches = []
    for j, gate in enumerate(dec_gates):
        if gate:
            x, c = _dec_layer_forward(params, config, j, x, mem, self_bias, cross_bias)
            layer_caches.append((j, c))
    h, c_norm = _ln_forward(params, "dec_norm", x)
    logits = h @ params["out.w"] + params["out.b"]
    return logits, {"tgt_in": tgt_in, "layers": layer_caches, "norm": c_norm, "h": h}


def forward_loss(params, config, batch, gates, loss_scale=1.0):
    """Mean cross-entropy per real target token; also returns the cache."""
    gates.check(config)
    if batch.n_tokens == 0:
        raise ValueError("batch has no unmasked target tokens")
    mem, enc_cache = encode(params, config, batch.src, batch.src_mask, gates.enc)
    logits, dec_cache = decode_logits(
        params, config, batch.tgt_in, mem, batch.src_mask, gates.dec
    )
    targets = np.ascontiguousarray(batch.tgt_out.ravel())
    weights = np.ascontiguousarray(batch.tgt_mask.ravel().astype(np.float64))
    losses, probs = kernels.cross_entropy_forward(_rows(logits), targets, weights)
    loss = float(losses.sum() / batch.n_tokens) * loss_scale
    if not math.isfinite(loss):
        raise ModelError(f"non-finite loss for batch {batch.batch_id}")
    cache = {
        "enc": enc_cache,
        "dec": dec_cache,
        "mem": mem,
        "probs": probs,
        "targets": targets,
        "weights": weights,
        "loss_scale": loss_scale,
    }
    return loss, cache


def backward_from_cache(params, config, batch, gates, cache):
    """Gradient of the cached loss for every parameter (zeros where unused)."""
    grads = params.zeros_like()
    scale = cache["loss_scale"] / batch.n_tokens
    dlogits2 = kernels.cross_entropy_backward(
        cache["probs"], cache["targets"], cache["weights"], scale
    )
    dec_cache = cache["dec"]
    B, T = batch.tgt_in.shape
    dlogits = dlogits2.reshape(B, T, -1)

    grads["out.w"] += _rows(dec_cache["h"]).T @ dlogits2
    grads["out.b"] += dlogits2.sum(axis=0)
    dx = _ln_backward(params, grads, dec_cache["norm"], dlogits @ params["out.w"].T)

    dmem = np.zeros_like(cache["mem"])
    for j, c in reversed(dec_cache["layers"]):
        dx, dmem_j = _dec_layer_backward(params, grads, c, dx)
        dmem += dmem_j
    _embed_backward(params, grads, config, batch.tgt_in, dx)

    enc_cache = cache["enc"]
    de = _ln_backward(params, grads, enc_cache["norm"], dmem)
    for i, c in reversed(enc_cache["layers"]):
        de = _enc_layer_backward(params, grads, c, de)
    _embed_backward(params, grads, config, batch.src, de)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient in {name} for batch {batch.batch_id}")
    return grads


def loss_and_grads(params, config, batch, gates, loss_scale=1.0):
    loss, cache = forward_loss(params, config, batch, gates, loss_scale)
    return loss, backward_from_cache(params, config, batch, gates, cache)


def backward(params, config, batch, gates, loss_scale=1.0):
    """Convenience wrapper returning only the gradients."""
    return loss_and_grads(params, config, batch, gates, loss_scale)[1]


def greedy_decode(params, config, src, src_mask, gates, max_len):
    """Argmax decoding until EOS or ``max_len`` tokens, batched.

    Returns one token tuple per source row, without BOS/EOS.
    """
    gates.check(config)
    B = src.shape[0]
    if max_len <= 0:
        return [() for _ in range(B)]
    mem, _ = encode(params, config, src, src_mask, gates.enc)
    prefix = np.full((B, 1), BOS_ID, dtype=np.int64)
    finished = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        logits, _ = decode_logits(params, config, prefix, mem, src_mask, gates.dec)
        nxt = logits[:, -1, :].argmax(axis=1).astype(np.int64)
        nxt[finished] = PAD_ID
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        finished |= nxt == EOS_ID
        if finished.all():
            break
    outs = []
    for row in prefix[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            toks.append(int(t))
        outs.append(tuple(toks))
    return outs


def restack(params: Parameters, config: ModelConfig, enc_sn: SubNetwork, dec_sn: SubNetwork):
    """Physically extract a sub-model containing only the kept layers.

    Running the result at full depth is the reference for what gating is
    supposed to compute.
    """
    sub_config = ModelConfig(
        enc_layers=enc_sn.depth,
        dec_layers=dec_sn.depth,
        width=config.width,
        heads=config.heads,
        ffn_width=config.ffn_width,
        vocab_size=config.vocab_size,
        max_len=config.max_len,
    )
    tensors = {}
    for name, v in params.items():
        parts = name.split(".")
        if parts[0] == "enc" and parts[1].isdigit():
            continue
        if parts[0] == "dec" and parts[1].isdigit():
            continue
        tensors[name] = v.copy()
    for new_i, old in enumerate(enc_sn.layers):
        for name, v in params.items():
            if name.startswith(f"enc.{old - 1}."):
                tensors[name.replace(f"enc.{old - 1}.", f"enc.{new_i}.", 1)] = v.copy()
    for new_j, old in enumerate(dec_sn.layers):
        for name, v in params.items():
            if name.startswith(f"dec.{old - 1}."):
                tensors[name.replace(f"dec.{old - 1}.", f"dec.{new_j}.", 1)] = v.copy()
    return sub_config, Parameters(tensors)
