"""Compact 1D CNN for single-lead sleep staging.

Layout (default sizes)::

    stem      conv k=7 s=2 (1 -> 16) + BN + ReLU
    block0-2  depthwise k=5 s=2 + pointwise + BN + ReLU + SE(/4), 16->32->64->64
    attn      linear score per timestep, softmax over time, weighted sum
    fc        linear 64 -> 5

Convolutions carry no bias: each one feeds a BatchNorm whose shift subsumes it.
A 3000-sample epoch reaches the attention head as 188 timesteps.
"""

from __future__ import annotations

import copy
import enum
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from driftguard.errors import EmptyBatch, NotADistribution, StaleCache, TrainModeBatchTooSmall
from driftguard.nn import layers as L

LN5 = float(np.log(5.0))


class BNMode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Architecture:
    in_len: int = 3000
    stem_channels: int = 16
    stem_kernel: int = 7
    stem_stride: int = 2
    block_channels: tuple[int, ...] = (32, 64, 64)
    block_kernel: int = 5
    block_stride: int = 2
    se_reduction: int = 4
    n_classes: int = 5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["block_channels"] = tuple(d["block_channels"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d

    @property
    def se_hidden(self) -> tuple[int, ...]:
        return tuple(max(1, c // self.se_reduction) for c in self.block_channels)

    def time_steps(self) -> int:
        n = L._out_len(self.in_len, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        for _ in self.block_channels:
            n = L._out_len(n, self.block_kernel, self.block_stride, self.block_kernel // 2)
        return n

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {
            "stem.conv.w": (self.stem_channels, 1, self.stem_kernel),
            "stem.bn.gamma": (self.stem_channels,),
            "stem.bn.beta": (self.stem_channels,),
        }
        c_in = self.stem_channels
        for i, (c_out, hid) in enumerate(zip(self.block_channels, self.se_hidden)):
            p = f"block{i}"
            shapes[f"{p}.dw.w"] = (c_in, 1, self.block_kernel)
            shapes[f"{p}.pw.w"] = (c_out, c_in)
            shapes[f"{p}.bn.gamma"] = (c_out,)
            shapes[f"{p}.bn.beta"] = (c_out,)
            shapes[f"{p}.se.w1"] = (hid, c_out)
            shapes[f"{p}.se.b1"] = (hid,)
            shapes[f"{p}.se.w2"] = (c_out, hid)
            shapes[f"{p}.se.b2"] = (c_out,)
            c_in = c_out
        shapes["attn.w"] = (c_in,)
        shapes["fc.w"] = (c_in, self.n_classes)
        shapes["fc.b"] = (self.n_classes,)
        return shapes

    def bn_layers(self) -> list[str]:
        return ["stem.bn"] + [f"block{i}.bn" for i in range(len(self.block_channels))]


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    entropy: float

    @property
    def label(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def confidence(self) -> float:
        return float(np.max(self.probs))


@dataclass
class ForwardCache:
    model_id: int
    version: int
    mode: BNMode
    steps: list = field(default_factory=list)


@dataclass
class ForwardResult:
    logits: np.ndarray
    cache: ForwardCache

    @property
    def probs(self) -> np.ndarray:
        return L.softmax(self.logits, axis=1)

    @property
    def entropies(self) -> np.ndarray:
        return entropy_from_logits(self.logits)

    def predictions(self) -> list[Prediction]:
        probs, ent = self.probs, self.entropies
        return [Prediction(self.logits[i], probs[i], float(ent[i])) for i in range(len(probs))]


class SleepNet:
    """Parameters, BN running buffers and the forward/backward passes."""

    def __init__(self, arch: Architecture | None = None, dtype=np.float32):
        self.arch = arch or Architecture()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {
            name: np.zeros(shape, dtype=self.dtype) for name, shape in self.arch.param_shapes().items()
        }
        self.buffers: dict[str, np.ndarray] = {}
        for bn in self.arch.bn_layers():
            c = self.params[f"{bn}.gamma"].shape[0]
            self.params[f"{bn}.gamma"][:] = 1
            self.buffers[f"{bn}.running_mean"] = np.zeros(c, dtype=self.dtype)
            self.buffers[f"{bn}.running_var"] = np.ones(c, dtype=self.dtype)
        self._version = 0

    @classmethod
    def initialized(cls, arch: Architecture | None = None, seed: int = 0, dtype=np.float32) -> "SleepNet":
        model = cls(arch, dtype)
        model.init_weights(np.random.default_rng(seed))
        return model

    def init_weights(self, rng: np.random.Generator) -> None:
        """He-normal weights, zero attention scores, small classifier weights."""
        for name, p in self.params.items():
            if name.endswith((".gamma",)):
                p[:] = 1
            elif name.endswith((".beta", ".b1", ".b2", "fc.b")):
                p[:] = 0
            elif name == "attn.w":
                p[:] = 0
            elif name == "fc.w":
                p[:] = rng.normal(0.0, 0.01, p.shape)
            else:
                fan_in = int(np.prod(p.shape[1:]))
                p[:] = rng.normal(0.0, np.sqrt(2.0 / fan_in), p.shape)
        self.mark_updated()

    # -- bookkeeping -----------------------------------------------------

    def mark_updated(self) -> None:
        """Invalidate outstanding forward caches after an in-place parameter change."""
        self._version += 1

    def clone(self) -> "SleepNet":
        other = copy.deepcopy(self)
        other._version = 0
        return other

    def astype(self, dtype) -> "SleepNet":
        other = SleepNet(self.arch, dtype)
        for k, v in self.params.items():
            other.params[k][:] = v
        for k, v in self.buffers.items():
            other.buffers[k][:] = v
        return other

    @property
    def bn_param_names(self) -> list[str]:
        return [f"{bn}.{p}" for bn in self.arch.bn_layers() for p in ("gamma", "beta")]

    @property
    def non_bn_param_names(self) -> list[str]:
        bn = set(self.bn_param_names)
        return [n for n in self.params if n not in bn]

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def digest(self, names: Iterable[str] | None = None, include_buffers: bool = False) -> str:
        h = hashlib.sha256()
        names = sorted(self.params if names is None else names)
        for n in names:
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n]).tobytes())
        if include_buffers:
            for n in sorted(self.buffers):
                h.update(n.encode())
                h.update(np.ascontiguousarray(self.buffers[n]).tobytes())
        return h.hexdigest()

    def bn_state(self) -> dict[str, np.ndarray]:
        """Copies of every BN gamma/beta and running buffer."""
        state = {n: self.params[n].copy() for n in self.bn_param_names}
        state.update({n: b.copy() for n, b in self.buffers.items()})
        return state

    def load_bn_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            target = self.params[n] if n in self.params else self.buffers[n]
            target[...] = v
        self.mark_updated()

    # -- passes ----------------------------------------------------------

    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, None, :]
        elif x.ndim == 2:
            x = x[:, None, :]
        if x.shape[0] == 0:
            raise EmptyBatch("empty micro-batch")
        return x

    def forward(
        self,
        x,
        mode: BNMode | str = BNMode.EVAL,
        update_stats: bool = True,
        momentum: float | None = None,
    ) -> ForwardResult:
        """Run the network on a (batch, 1, time) or (batch, time) array.

        Train mode normalizes with batch statistics and, when `update_stats`,
        folds them into the running buffers with `momentum` (default: the
        architecture's).
        """
        mode = BNMode(mode)
        x = self._as_batch(x)
        train = mode is BNMode.TRAIN
        if train and x.shape[0] < 2:
            raise TrainModeBatchTooSmall("train-mode BN needs at least 2 samples")
        a, p, b = self.arch, self.params, self.buffers
        m = a.bn_momentum if momentum is None else momentum
        cache = ForwardCache(id(self), self._version, mode)
        steps = cache.steps

        def bn(h, name):
            out, c = L.batchnorm_forward(
                h, p[f"{name}.gamma"], p[f"{name}.beta"],
                b[f"{name}.running_mean"], b[f"{name}.running_var"],
                train, m, a.bn_eps, update_stats,
            )
            steps.append(("bn", name, c))
            return out

        h, c = L.conv1d_forward(x, p["stem.conv.w"], a.stem_stride, a.stem_kernel // 2)
        steps.append(("conv", "stem.conv", c))
        h = bn(h, "stem.bn")
        h, c = L.relu_forward(h)
        steps.append(("relu", None, c))
        for i in range(len(a.block_channels)):
            pre = f"block{i}"
            h, c = L.depthwise_forward(h, p[f"{pre}.dw.w"], a.block_stride, a.block_kernel // 2)
            steps.append(("dw", f"{pre}.dw", c))
            h, c = L.pointwise_forward(h, p[f"{pre}.pw.w"])
            steps.append(("pw", f"{pre}.pw", c))
            h = bn(h, f"{pre}.bn")
            h, c = L.relu_forward(h)
            steps.append(("relu", None, c))
            h, c = L.se_forward(h, p[f"{pre}.se.w1"], p[f"{pre}.se.b1"], p[f"{pre}.se.w2"], p[f"{pre}.se.b2"])
            steps.append(("se", f"{pre}.se", c))
        h, c = L.attention_pool_forward(h, p["attn.w"])
        steps.append(("attn", "attn", c))
        logits, c = L.linear_forward(h, p["fc.w"], p["fc.b"])
        steps.append(("fc", "fc", c))
        return ForwardResult(logits, cache)

    def backward(self, cache: ForwardCache, dlogits, wanted: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Exact gradients of a scalar loss given d(loss)/d(logits).

        `wanted` restricts the returned set (e.g. only BN gamma/beta); the
        backward sweep still runs through every layer above the deepest
        wanted parameter.
        """
        if cache.model_id != id(self) or cache.version != self._version:
            raise StaleCache("parameters changed since this forward pass")
        wanted = set(self.params) if wanted is None else set(wanted)
        unknown = wanted - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(dlogits, dtype=self.dtype)
        steps = cache.steps
        for depth in range(len(steps) - 1, -1, -1):
            kind, name, c = steps[depth]
            last = depth == 0
            if kind == "fc":
                g, dw, db = L.linear_backward(g, c)
                grads["fc.w"], grads["fc.b"] = dw, db
            elif kind == "attn":
                g, dw = L.attention_pool_backward(g, c)
                grads["attn.w"] = dw
            elif kind == "se":
                g, d = L.se_backward(g, c)
                for k, v in d.items():
                    grads[f"{name}.{k}"] = v
            elif kind == "relu":
                g = L.relu_backward(g, c)
            elif kind == "bn":
                g, dgamma, dbeta = L.batchnorm_backward(g, c)
                grads[f"{name}.gamma"], grads[f"{name}.beta"] = dgamma, dbeta
            elif kind == "pw":
                g, dw = L.pointwise_backward(g, c)
                grads[f"{name}.w"] = dw
            elif kind == "dw":
                g, dw = L.depthwise_backward(g, c)
                grads[f"{name}.w"] = dw
            elif kind == "conv":
                g, dw = L.conv1d_backward(g, c, need_dx=not last)
                grads[f"{name}.w"] = dw
            if not wanted - grads.keys():
                break
        return {k: v for k, v in grads.items() if k in wanted}


def as_micro_batch(epochs: Sequence, max_size: int | None = None) -> np.ndarray:
    """Stack epoch sample vectors (or Epoch objects) into a (B, 1, T) array."""
    if len(epochs) == 0:
        raise EmptyBatch("empty micro-batch")
    if max_size is not None and len(epochs) > max_size:
        raise ValueError(f"micro-batch of {len(epochs)} exceeds limit {max_size}")
    rows = [getattr(e, "samples", e) for e in epochs]
    return np.stack(rows)[:, None, :]


def forward(model: SleepNet, batch, bn_mode: BNMode | str = BNMode.EVAL) -> tuple[list[Prediction], ForwardCache]:
    res = model.forward(batch, bn_mode)
    return res.predictions(), res.cache


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def entropy(probs) -> float | np.ndarray:
    """Shannon entropy in nats of one distribution or a (batch, classes) array."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise NotADistribution("probabilities must be non-negative and sum to 1")
    logp = np.log(np.where(p > 0, p, 1.0))
    h = -(p * logp).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def entropy_from_logits(logits) -> np.ndarray:
    logp = log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    h = -(np.exp(logp) * logp).sum(axis=-1)
    return np.clip(h, 0.0, LN5 if np.shape(logits)[-1] == 5 else np.log(np.shape(logits)[-1]))


def mean_entropy_loss(logits) -> tuple[float, np.ndarray]:
    """Mean per-sample prediction entropy and its gradient w.r.t. the logits.

    dH/dz = p * (-log p - H) per sample, divided by the batch size.
    """
    z = np.asarray(logits, dtype=np.float64)
    logp = log_softmax(z, axis=1)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    grad = p * (-logp - h[:, None]) / len(z)
    return float(h.mean()), grad
