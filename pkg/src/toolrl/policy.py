"""A tiny autoregressive actor-critic with hand-written gradients.

The model looks at the last ``W`` tokens (left-padded with PAD), adds a
token and a position embedding per slot, flattens the window, and applies one
tanh hidden layer shared by a logit head and a value head. With
``separate_critic`` the value head reads its own embedding/hidden trunk.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, InvalidToken, NumericalError

CHECKPOINT_VERSION = 1
INIT_SCALE = 0.08

ACTOR_BLOCKS = ("tok_emb", "pos_emb", "W_h", "b_h", "W_out", "b_out")
VALUE_BLOCKS = ("w_v", "b_v")
CRITIC_BLOCKS = ("c_tok_emb", "c_pos_emb", "c_W_h", "c_b_h")


@dataclass(frozen=True)
class PolicyDims:
    vocab_size: int
    window: int = 32
    d: int = 16
    h: int = 64
    separate_critic: bool = False

    def validate(self):
        for name in ("vocab_size", "window", "d", "h"):
            if int(getattr(self, name)) <= 0:
                raise DimensionError(f"{name} must be positive, got {getattr(self, name)}")

    def block_shapes(self) -> dict:
        V, W, d, h = self.vocab_size, self.window, self.d, self.h
        shapes = {
            "tok_emb": (V, d),
            "pos_emb": (W, d),
            "W_h": (W * d, h),
            "b_h": (h,),
            "W_out": (h, V),
            "b_out": (V,),
            "w_v": (h,),
            "b_v": (),
        }
        if self.separate_critic:
            shapes.update(c_tok_emb=(V, d), c_pos_emb=(W, d), c_W_h=(W * d, h), c_b_h=(h,))
        return shapes


class PolicyParams:
    """Named parameter blocks plus the dimensions they were built for."""

    def __init__(self, dims: PolicyDims, blocks: dict):
        self.dims = dims
        shapes = dims.block_shapes()
        if set(blocks) != set(shapes):
            raise DimensionError(f"expected blocks {sorted(shapes)}, got {sorted(blocks)}")
        for name, shape in shapes.items():
            if np.shape(blocks[name]) != shape:
                raise DimensionError(f"block {name} has shape {np.shape(blocks[name])}, expected {shape}")
        self.blocks = {name: np.asarray(blocks[name], dtype=np.float64) for name in shapes}

    def __getitem__(self, name):
        return self.blocks[name]

    def __iter__(self):
        return iter(self.blocks)

    def items(self):
        return self.blocks.items()

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.dims, {k: v.copy() for k, v in self.blocks.items()})

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(self.dims, {k: np.zeros_like(v) for k, v in self.blocks.items()})

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v * v) for v in self.blocks.values())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.blocks.values())

    def equals(self, other: "PolicyParams") -> bool:
        return self.dims == other.dims and all(
            np.array_equal(v, other.blocks[k]) for k, v in self.blocks.items()
        )


class PolicyOutput(NamedTuple):
    logits: np.ndarray
    value: float


def init_params(rng: np.random.Generator, dims: PolicyDims, scale: float = INIT_SCALE) -> PolicyParams:
    dims.validate()
    blocks = {
        name: rng.uniform(-scale, scale, size=shape) for name, shape in dims.block_shapes().items()
    }
    return PolicyParams(dims, blocks)


def zero_params(dims: PolicyDims) -> PolicyParams:
    dims.validate()
    return PolicyParams(dims, {n: np.zeros(s) for n, s in dims.block_shapes().items()})


def context_window(tokens, window: int, pad: int) -> np.ndarray:
    """Last ``window`` tokens, left-padded with ``pad``."""
    tail = list(tokens[-window:]) if window else []
    return np.asarray([pad] * (window - len(tail)) + tail, dtype=np.int64)


def _check_tokens(contexts, vocab_size):
    if contexts.size and (contexts.min() < 0 or contexts.max() >= vocab_size):
        raise InvalidToken("context holds a token outside the vocabulary")


def _trunk(params, contexts, prefix=""):
    emb = params[prefix + "tok_emb"][contexts] + params[prefix + "pos_emb"]
    x = emb.reshape(len(contexts), -1)
    hid = np.tanh(x @ params[prefix + "W_h"] + params[prefix + "b_h"])
    return x, hid


def forward_batch(params: PolicyParams, contexts: np.ndarray):
    """Logits ``(N, V)``, values ``(N,)`` and a cache for :func:`backward`."""
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.ndim != 2 or contexts.shape[1] != params.dims.window:
        raise DimensionError(f"contexts must have shape (N, {params.dims.window}), got {contexts.shape}")
    _check_tokens(contexts, params.dims.vocab_size)
    x, hid = _trunk(params, contexts)
    logits = hid @ params["W_out"] + params["b_out"]
    if params.dims.separate_critic:
        cx, chid = _trunk(params, contexts, "c_")
    else:
        cx, chid = x, hid
    values = chid @ params["w_v"] + params["b_v"]
    return logits, values, (contexts, x, hid, cx, chid)


def forward(params: PolicyParams, context) -> PolicyOutput:
    logits, values, _ = forward_batch(params, np.asarray(context, dtype=np.int64)[None, :])
    return PolicyOutput(logits[0], float(values[0]))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def logprob(logits, token: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= int(token) < logits.shape[-1]:
        raise InvalidToken(f"token {token} outside logits of size {logits.shape[-1]}")
    return float(log_softmax(logits)[int(token)])


def sample_token(logits, temperature: float, rng: np.random.Generator, greedy: bool = False) -> int:
    """Draw from ``softmax(logits / temperature)``; ``greedy`` takes the argmax.

    Ties in greedy mode go to the lowest index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    if greedy:
        return int(np.argmax(logits))
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}; use greedy=True")
    z = logits / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


def _trunk_backward(params, grads, dhid, x, hid, contexts, prefix=""):
    dz = dhid * (1.0 - hid * hid)
    grads[prefix + "W_h"] += x.T @ dz
    grads[prefix + "b_h"] += dz.sum(axis=0)
    dx = (dz @ params[prefix + "W_h"].T).reshape(len(contexts), params.dims.window, params.dims.d)
    grads[prefix + "pos_emb"] += dx.sum(axis=0)
    np.add.at(grads[prefix + "tok_emb"], contexts, dx)


def backward(params: PolicyParams, contexts, tokens, dlogprob, dvalue) -> PolicyParams:
    """Gradient of ``sum_i dlogprob_i * logprob_i + dvalue_i * value_i``.

    ``logprob_i`` is the log-probability of ``tokens[i]`` given ``contexts[i]``
    and ``value_i`` the critic output there.
    """
    contexts = np.asarray(contexts, dtype=np.int64)
    tokens = np.asarray(tokens, dtype=np.int64)
    dlogprob = np.asarray(dlogprob, dtype=np.float64)
    dvalue = np.asarray(dvalue, dtype=np.float64)
    n = len(contexts)
    if tokens.shape != (n,) or dlogprob.shape != (n,) or dvalue.shape != (n,):
        raise DimensionError("contexts, tokens and upstream gradients must share the batch dimension")
    if not (np.all(np.isfinite(dlogprob)) and np.all(np.isfinite(dvalue))):
        raise NumericalError("non-finite upstream gradient")
    if n and (tokens.min() < 0 or tokens.max() >= params.dims.vocab_size):
        raise InvalidToken("target token outside the vocabulary")
    logits, _, (contexts, x, hid, cx, chid) = forward_batch(params, contexts)
    grads = params.zeros_like()
    g = grads.blocks

    p = np.exp(log_softmax(logits))
    dlogits = -dlogprob[:, None] * p
    dlogits[np.arange(n), tokens] += dlogprob
    g["W_out"] += hid.T @ dlogits
    g["b_out"] += dlogits.sum(axis=0)
    g["w_v"] += chid.T @ dvalue
    g["b_v"] += dvalue.sum()

    dhid = dlogits @ params["W_out"].T
    dchid = dvalue[:, None] * params["w_v"][None, :]
    if params.dims.separate_critic:
        _trunk_backward(params, g, dchid, cx, chid, contexts, "c_")
    else:
        dhid = dhid + dchid
    _trunk_backward(params, g, dhid, x, hid, contexts)
    return grads


class MLPPolicy:
    """Callable ``tokens -> PolicyOutput`` view over a set of parameters."""

    def __init__(self, params: PolicyParams, pad: int):
        self.params = params
        self.pad = pad

    def __call__(self, tokens) -> PolicyOutput:
        ctx = context_window(tokens, self.params.dims.window, self.pad)
        return forward(self.params, ctx)


def clip_by_global_norm(grads: PolicyParams, max_norm: float | None) -> float:
    norm = grads.global_norm()
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for v in grads.blocks.values():
            v *= scale
    return norm


class SGD:
    """Plain gradient descent on a loss (ascent on the objective)."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: PolicyParams, grads: PolicyParams):
        for k, g in grads.items():
            params.blocks[k] -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: PolicyParams, grads: PolicyParams):
        if self.m is None:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params.blocks[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def save_checkpoint(params: PolicyParams, path, seed=None, step=None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "W": params.dims.window,
        "d": params.dims.d,
        "h": params.dims.h,
        "V": params.dims.vocab_size,
        "separate_critic": params.dims.separate_critic,
        "seed": seed,
        "step": step,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **params.blocks)


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        dims = PolicyDims(header["V"], header["W"], header["d"], header["h"], header["separate_critic"])
        blocks = {k: data[k] for k in dims.block_shapes()}
    return PolicyParams(dims, blocks), header


def dims_dict(dims: PolicyDims) -> dict:
    return asdict(dims)
