"""SGD with momentum and AdamW as pure functions over explicit state.

``propose_update`` never mutates its inputs. It returns the additive update
and a new state, so the caller can still snapshot the state it started from.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError, ParameterError

SGD_MOMENTUM = "sgd_momentum"
ADAMW = "adamw"

_KIND_CODES = {SGD_MOMENTUM: 1, ADAMW: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_MAGIC = b"OPT1"
_HEADER = struct.Struct("<4sBQ")
_STEP = struct.Struct("<Q")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = ADAMW
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        for name in ("momentum", "beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must lie in [0, 1)")
        if not self.eps > 0:
            raise ParameterError("eps must be > 0")
        if not self.weight_decay >= 0:
            raise ParameterError("weight_decay must be >= 0")

    @classmethod
    def sgd(cls, learning_rate: float, momentum: float = 0.9, weight_decay: float = 0.0) -> OptimizerConfig:
        return cls(kind=SGD_MOMENTUM, learning_rate=learning_rate, momentum=momentum,
                   weight_decay=weight_decay)

    @classmethod
    def adamw(cls, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.01) -> OptimizerConfig:
        return cls(kind=ADAMW, learning_rate=learning_rate, beta1=beta1, beta2=beta2,
                   eps=eps, weight_decay=weight_decay)


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Optimizer buffers. SGD keeps one (velocity); AdamW keeps (m, v)."""

    kind: str
    buffers: tuple[np.ndarray, ...]
    step_count: int = 0
    dim: int = field(init=False)

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")
        want = 1 if self.kind == SGD_MOMENTUM else 2
        if len(self.buffers) != want:
            raise ParameterError(f"{self.kind} state needs {want} buffer(s)")
        bufs = tuple(np.array(b, dtype=np.float64) for b in self.buffers)
        dims = {b.shape for b in bufs}
        if len(dims) != 1 or bufs[0].ndim != 1:
            raise DimensionError("state buffers must be 1-D and of equal length")
        for b in bufs:
            b.flags.writeable = False
        object.__setattr__(self, "buffers", bufs)
        object.__setattr__(self, "dim", int(bufs[0].size))

    def __eq__(self, other):
        if not isinstance(other, OptimizerState):
            return NotImplemented
        return serialize_state(self) == serialize_state(other)

    __hash__ = None


def init_state(config: OptimizerConfig, dim: int) -> OptimizerState:
    n = 1 if config.kind == SGD_MOMENTUM else 2
    return OptimizerState(config.kind, tuple(np.zeros(dim) for _ in range(n)), 0)


def propose_update(state: OptimizerState, config: OptimizerConfig, params: np.ndarray,
                   grad: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    """Return ``(delta, new_state)`` such that the proposal is ``params + delta``.

    Non-finite gradients flow through untouched.
    """
    if state.kind != config.kind:
        raise ParameterError(f"state is {state.kind} but config is {config.kind}")
    if not (params.shape == grad.shape == (state.dim,)):
        raise DimensionError(f"params {params.shape}, grad {grad.shape}, state dim {state.dim}")
    lr = config.learning_rate

    if config.kind == SGD_MOMENTUM:
        g = grad + config.weight_decay * params if config.weight_decay else grad
        velocity = config.momentum * state.buffers[0] + g
        return -lr * velocity, OptimizerState(SGD_MOMENTUM, (velocity,), state.step_count + 1)

    t = state.step_count + 1
    b1, b2 = config.beta1, config.beta2
    m = b1 * state.buffers[0] + (1.0 - b1) * grad
    v = b2 * state.buffers[1] + (1.0 - b2) * (grad * grad)
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    delta = -lr * (m_hat / (np.sqrt(v_hat) + config.eps))
    if config.weight_decay:
        # decoupled: the decay term never passes through the moment estimates
        delta = delta - (lr * config.weight_decay) * params
    return delta, OptimizerState(ADAMW, (m, v), t)


def serialize_state(state: OptimizerState) -> bytes:
    """``OPT1`` | kind u8 | dim u64 | buffers as f64 | step_count u64, little-endian."""
    parts = [_HEADER.pack(_MAGIC, _KIND_CODES[state.kind], state.dim)]
    parts.extend(b.astype("<f8", copy=False).tobytes() for b in state.buffers)
    parts.append(_STEP.pack(state.step_count))
    return b"".join(parts)


def deserialize_state(data: bytes) -> OptimizerState:
    state, used = _decode_state(data)
    if used != len(data):
        raise FormatError(f"{len(data) - used} trailing bytes after optimizer state")
    return state


def _decode_state(data: bytes, offset: int = 0) -> tuple[OptimizerState, int]:
    """Decode one state starting at ``offset``; return it and the end offset."""
    if len(data) - offset < _HEADER.size:
        raise FormatError("optimizer state truncated in header")
    magic, code, dim = _HEADER.unpack_from(data, offset)
    if magic != _MAGIC:
        raise FormatError(f"bad optimizer-state magic {magic!r}")
    if code not in _CODE_KINDS:
        raise FormatError(f"unknown optimizer kind code {code}")
    kind = _CODE_KINDS[code]
    nbuf = 1 if kind == SGD_MOMENTUM else 2
    pos = offset + _HEADER.size
    end = pos + nbuf * dim * 8 + _STEP.size
    if len(data) < end:
        raise FormatError("optimizer state truncated in payload")
    bufs = []
    for _ in range(nbuf):
        bufs.append(np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(np.float64))
        pos += dim * 8
    (step,) = _STEP.unpack_from(data, pos)
    return OptimizerState(kind, tuple(bufs), step), end
