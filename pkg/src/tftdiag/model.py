"""Time-frequency Transformer: patch tokenizer, post-LN encoder, MLP classifier.

A TFR of shape (n_t, n_f, c) is cut along the time axis into n_t patches of
width n_f*c. Patches are projected to d_model, a learned class token is
prepended, a learned position encoding is added, and the sequence runs
through ``n_blocks`` attention/feed-forward blocks. The class-token output
feeds a two-layer GeLU classifier.

All functions accept an optional leading batch axis.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensor import (Rng, Tensor, broadcast_to, concat, dropout, gelu,
                     layer_norm, no_grad, softmax)

POS_MODES = ("none", "1d", "2d")
GELU_MODES = ("erf", "tanh")
CHECKPOINT_MAGIC = b"TFTC"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Model configuration or input shape is inconsistent."""


class NumericFault(FloatingPointError):
    """Non-finite activation or gradient."""


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_t: int = 32
    n_f: int = 32
    c: int = 1
    d_model: int = 32
    d_ff: int = 64
    h: int = 4
    n_blocks: int = 2
    r_dp: float = 0.1
    pos_mode: str = "1d"
    n_cla: int = 4
    gelu_mode: str = "erf"
    qkv_bias: bool = True

    def __post_init__(self):
        for name in ("n_t", "n_f", "c", "d_model", "d_ff", "h", "n_blocks", "n_cla"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.h:
            raise ConfigError(f"d_model={self.d_model} is not divisible by h={self.h}")
        if not 0.0 <= self.r_dp < 1.0:
            raise ConfigError(f"r_dp must lie in [0, 1), got {self.r_dp}")
        if self.pos_mode not in POS_MODES:
            raise ConfigError(f"pos_mode must be one of {POS_MODES}")
        if self.gelu_mode not in GELU_MODES:
            raise ConfigError(f"gelu_mode must be one of {GELU_MODES}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.h

    @property
    def seq_len(self) -> int:
        return self.n_t + 1

    def to_lines(self) -> list[str]:
        return [f"{k}={_fmt(v)}" for k, v in asdict(self).items()]

    @classmethod
    def from_lines(cls, lines) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for line in lines:
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            kw[key] = _parse(value.strip(), getattr(cls, key))
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default):
    kind = type(default)
    if kind is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


# ---------------------------------------------------------------------------
# parameters


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape of every trainable tensor, in canonical order."""
    d, f, T = config.d_model, config.d_ff, config.seq_len
    shapes: dict[str, tuple] = {"token.W": (config.n_f * config.c, d), "cls": (d,)}
    if config.pos_mode == "1d":
        shapes["pos"] = (T,)
    elif config.pos_mode == "2d":
        shapes["pos"] = (T, d)
    for l in range(1, config.n_blocks + 1):
        p = f"block{l}."
        for m in ("q", "k", "v"):
            shapes[p + f"attn.W{m}"] = (d, d)
            if config.qkv_bias:
                shapes[p + f"attn.b{m}"] = (d,)
        shapes[p + "attn.Wo"] = (d, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ff.W1"] = (d, f)
        shapes[p + "ff.b1"] = (f,)
        shapes[p + "ff.W2"] = (f, d)
        shapes[p + "ff.b2"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    shapes["head.W1"] = (d, f)
    shapes["head.b1"] = (f,)
    shapes["head.W2"] = (f, config.n_cla)
    shapes["head.b2"] = (config.n_cla,)
    return shapes


def init_parameters(config: ModelConfig, rng: Rng) -> dict[str, Tensor]:
    params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("cls", "pos"):
            data = rng.normal(0.0, 0.02, shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_parameters(config: ModelConfig) -> tuple[int, str]:
    """Closed-form trainable-parameter count and the formula that produced it."""
    d, f, T, N = config.d_model, config.d_ff, config.seq_len, config.n_blocks
    token = config.n_f * config.c * d
    pos = {"none": 0, "1d": T, "2d": T * d}[config.pos_mode]
    n_bias = 4 if config.qkv_bias else 1
    block = 4 * d * d + n_bias * d + 2 * d * f + f + d + 4 * d
    head = d * f + f + f * config.n_cla + config.n_cla
    total = token + d + pos + N * block + head
    pos_term = {"none": "0", "1d": "(n_t+1)", "2d": "(n_t+1)*d"}[config.pos_mode]
    formula = (
        f"(n_f*c)*d + d + {pos_term} + N*(4*d^2 + {n_bias}*d + 2*d*d_ff + d_ff + d + 4*d)"
        f" + d*d_ff + d_ff + d_ff*n_cla + n_cla"
        f" = {token} + {d} + {pos} + {N}*{block} + {head} = {total}"
    )
    return total, formula


def parameter_breakdown(config: ModelConfig) -> list[tuple[str, int]]:
    """Per-layer parameter totals: tokenizer, each block, classifier."""
    groups: dict[str, int] = {}
    for name, shape in parameter_shapes(config).items():
        key = name.split(".")[0] if name.startswith(("block", "head", "token")) else "embed"
        if key == "token":
            key = "embed"
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return list(groups.items())


# ---------------------------------------------------------------------------
# forward pieces


def tokenize(tfr, params: dict, config: ModelConfig) -> Tensor:
    """(..., n_t, n_f, c) -> (..., n_t, d_model); channels are flattened channel-minor."""
    x = tfr if isinstance(tfr, Tensor) else Tensor(tfr)
    want = (config.n_t, config.n_f, config.c)
    if tuple(x.shape[-3:]) != want or x.ndim not in (3, 4):
        raise ConfigError(f"input shape {x.shape} does not match model input {want}")
    patches = x.reshape(x.shape[:-2] + (config.n_f * config.c,))
    return patches @ params["token.W"]


def assemble_input(tokens: Tensor, params: dict, pos_mode: str) -> Tensor:
    """Prepend the class token and add the position encoding."""
    cls = params["cls"]
    lead = tokens.shape[:-2]
    cls_row = cls.reshape((1,) * len(lead) + (1, cls.shape[0]))
    if lead:
        cls_row = broadcast_to(cls_row, lead + (1, cls.shape[0]))
    z = concat([cls_row, tokens], axis=-2)
    if pos_mode == "1d":
        pos = params["pos"]
        z = z + pos.reshape(pos.shape[0], 1)
    elif pos_mode == "2d":
        z = z + params["pos"]
    return z


def single_head_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v; also returns the weight matrix."""
    d_k = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    weights = softmax(scores)
    return weights @ v, weights


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(tuple(lead) + (n, h, d // h))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(tuple(axes))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = x.transpose(tuple(axes))
    *lead, n, h, dk = x.shape
    return x.reshape(tuple(lead) + (n, h * dk))


def multi_head_attention(x: Tensor, bp: dict, h: int) -> tuple[Tensor, np.ndarray]:
    """Projected queries/keys/values per head, concatenated and projected by Wo.

    ``bp`` maps the suffixes ``attn.Wq`` ... ``attn.bo`` to tensors. Returns
    the output and the per-head weights, shape (..., h, n, n).
    """
    d = x.shape[-1]
    if d % h:
        raise ConfigError(f"d_model={d} is not divisible by h={h}")

    def proj(m):
        y = x @ bp[f"attn.W{m}"]
        bias = bp.get(f"attn.b{m}")
        return y + bias if bias is not None else y

    q, k, v = (_split_heads(proj(m), h) for m in ("q", "k", "v"))
    heads, weights = single_head_attention(q, k, v)
    out = _merge_heads(heads) @ bp["attn.Wo"]
    if "attn.bo" in bp:
        out = out + bp["attn.bo"]
    return out, weights.data


def feed_forward(x: Tensor, bp: dict, config: ModelConfig, rng: Rng | None, training: bool) -> Tensor:
    hidden = gelu(x @ bp["ff.W1"] + bp["ff.b1"], approximate=config.gelu_mode == "tanh")
    hidden = dropout(hidden, config.r_dp, rng, training)
    return hidden @ bp["ff.W2"] + bp["ff.b2"]


def block_params(params: dict, l: int) -> dict:
    prefix = f"block{l}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def transformer_block(z: Tensor, bp: dict, config: ModelConfig, rng: Rng | None = None,
                      training: bool = False) -> tuple[Tensor, np.ndarray]:
    """Post-LN block: z' = LN(MHA(z) + z); out = LN(FF(z') + z')."""
    a, weights = multi_head_attention(z, bp, config.h)
    a = dropout(a, config.r_dp, rng, training)
    z1 = layer_norm(a + z, bp["ln1.gamma"], bp["ln1.beta"])
    f = feed_forward(z1, bp, config, rng, training)
    return layer_norm(f + z1, bp["ln2.gamma"], bp["ln2.beta"]), weights


def classify(hidden: Tensor, params: dict, config: ModelConfig) -> Tensor:
    """Logits of the two-layer GeLU classifier on the class-token state."""
    u = gelu(hidden @ params["head.W1"] + params["head.b1"], approximate=config.gelu_mode == "tanh")
    return u @ params["head.W2"] + params["head.b2"]


class AttentionRecord:
    """Attention weights captured per block; ``weights[l-1]`` has shape (..., h, n, n)."""

    def __init__(self, weights: list[np.ndarray]):
        self.weights = weights

    def block(self, l: int) -> np.ndarray:
        if not 1 <= l <= len(self.weights):
            raise IndexError(f"block {l} outside [1, {len(self.weights)}]")
        return self.weights[l - 1]

    def __len__(self) -> int:
        return len(self.weights)


class ForwardResult(NamedTuple):
    logits: Tensor
    probabilities: Tensor
    attention: AttentionRecord
    hidden: Tensor


def _check_finite(t: Tensor, where: str) -> None:
    if not np.isfinite(t.data).all():
        raise NumericFault(f"non-finite values in {where}")


def forward(tfr, params: dict, config: ModelConfig, training: bool = False,
            rng: Rng | None = None) -> ForwardResult:
    tokens = tokenize(tfr, params, config)
    z = assemble_input(tokens, params, config.pos_mode)
    z = dropout(z, config.r_dp, rng, training)
    _check_finite(z, "tokenizer")
    record = []
    for l in range(1, config.n_blocks + 1):
        z, w = transformer_block(z, block_params(params, l), config, rng, training)
        _check_finite(z, f"block {l}")
        record.append(w)
    hidden = z[..., 0, :]
    logits = classify(hidden, params, config)
    _check_finite(logits, "classifier")
    return ForwardResult(logits, softmax(logits), AttentionRecord(record), hidden)


class TFT:
    """Parameters plus config; thin convenience wrapper around :func:`forward`."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_parameters(config, Rng(seed))

    def __call__(self, tfr, training: bool = False, rng: Rng | None = None) -> ForwardResult:
        return forward(tfr, self.params, self.config, training, rng)

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self(x[i:i + batch_size]).probabilities.data)
        return np.concatenate(out) if out else np.zeros((0, self.config.n_cla))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values() if p.requires_grad)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v


# ---------------------------------------------------------------------------
# checkpoints


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def save_checkpoint(model: TFT, path) -> None:
    blob = ("\n".join(model.config.to_lines()) + "\n").encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _u32(CHECKPOINT_VERSION), _u32(len(blob)), blob]
    for name in parameter_shapes(model.config):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"{self.path}: file ends at byte {len(self.raw)}, needed {self.pos + n}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def done(self) -> bool:
        return self.pos >= len(self.raw)


def load_checkpoint(path) -> TFT:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: not a TFT checkpoint (magic {raw[:4]!r})")
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    blob = r.take(r.u32()).decode("utf-8")
    try:
        config = ModelConfig.from_lines(blob.splitlines())
    except (ConfigError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc
    expected = parameter_shapes(config)
    params = {}
    while not r.done():
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name!r}")
        if rank > 8:
            raise CheckpointShapeError(f"{path}: tensor {name} claims rank {rank}")
        dims = tuple(r.u32() for _ in range(rank))
        if dims != expected[name]:
            raise CheckpointShapeError(f"{path}: tensor {name} has shape {dims}, config implies {expected[name]}")
        data = np.frombuffer(r.take(4 * int(np.prod(dims))), dtype="<f4").reshape(dims)
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    missing = [k for k in expected if k not in params]
    if missing:
        raise CheckpointTruncatedError(f"{path}: missing tensors {missing}")
    return TFT(config, params)
