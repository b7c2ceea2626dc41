"""Deterministic mixed-precision training loop.

The model is synthetic: parameters are a flat vector, gradients come from a
counter-based hash (``prng`` mode) or from a quadratic loss pulling the FP32
master weights toward a seed-derived target (``quadratic`` mode). What matters
for checkpointing is the state layout and the update arithmetic, which follow
mixed-precision AdamW: FP16 working weights and gradients, FP32 master weights
and FP32 first/second moments.

The update kernel :func:`adamw_kernel` is the single definition of the update
arithmetic. The host-side reconstructor calls it on sub-ranges, so replayed
states are bitwise equal to the states the loop produces.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from overlapckpt.clock import Clock, Seconds, WallClock
from overlapckpt.errors import ProtocolViolation, StaleGradient

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# stream tags for the hash generator
_STREAM_INIT = 1
_STREAM_TARGET = 2
_STREAM_GRAD = 3


class GradMode(str, enum.Enum):
    prng = "prng"
    quadratic = "quadratic"


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


@dataclass(frozen=True)
class PhaseTiming:
    """Wall (or virtual) duration each phase is padded to; zero means unpadded."""

    t_forward: Seconds = 0.0
    t_backward: Seconds = 0.0
    t_update: Seconds = 0.0

    def __post_init__(self) -> None:
        for name in ("t_forward", "t_backward", "t_update"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def t_step(self) -> Seconds:
        return self.t_forward + self.t_backward + self.t_update


@dataclass
class GradientBuffer:
    values: np.ndarray  # float16, reused across steps
    produced_at_step: int = 0


@dataclass
class TrainingState:
    param_count: int
    master: np.ndarray
    working: np.ndarray
    m: np.ndarray
    v: np.ndarray
    hp: Hyperparams
    seed: int
    grad_mode: GradMode
    step: int = 0
    grad: GradientBuffer | None = None
    _target: np.ndarray | None = field(default=None, repr=False)
    _in_step: bool = field(default=False, repr=False)

    @property
    def target(self) -> np.ndarray:
        if self._target is None:
            self._target = hash_uniform(stream_key(self.seed, _STREAM_TARGET, 0), self.param_count)
        return self._target

    def sections(self) -> dict[str, np.ndarray]:
        """The four checkpointed arrays, in on-disk order."""
        return {"working": self.working, "master": self.master, "m": self.m, "v": self.v}

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: a.copy() for k, a in self.sections().items()}

    def install(self, step: int, working, master, m, v) -> None:
        """Overwrite the state in place with restored arrays."""
        if self._in_step:
            raise ProtocolViolation("cannot install a checkpoint in the middle of a step")
        for dst, src in ((self.working, working), (self.master, master), (self.m, m), (self.v, v)):
            if src.shape != dst.shape or src.dtype != dst.dtype:
                raise ValueError(f"restored array {src.dtype}{src.shape} does not match {dst.dtype}{dst.shape}")
            dst[...] = src
        self.step = int(step)


def _mix64(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, stream: int, counter: int) -> int:
    """64-bit key for one (seed, stream, counter) triple."""
    return _mix64(_mix64(seed & _MASK64) ^ _mix64((stream << 48) ^ (counter & ((1 << 48) - 1))) + _GOLDEN)


def hash_uniform(key: int, n: int) -> np.ndarray:
    """``n`` float32 values uniform on [-1, 1), a pure function of ``(key, index)``."""
    z = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN) + np.uint64(key & _MASK64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    # top 24 bits -> exact float32 grid on [0, 2)
    u = (z >> np.uint64(40)).astype(np.float32) * np.float32(2.0**-23)
    return u - np.float32(1.0)


def init_state(seed: int, P: int, hp: Hyperparams | None = None, mode: GradMode | str = GradMode.prng) -> TrainingState:
    if P < 1:
        raise ValueError(f"param count must be >= 1, got {P}")
    hp = hp or Hyperparams()
    master = hash_uniform(stream_key(seed, _STREAM_INIT, 0), P)
    state = TrainingState(
        param_count=P,
        master=master,
        working=master.astype(np.float16),
        m=np.zeros(P, dtype=np.float32),
        v=np.zeros(P, dtype=np.float32),
        hp=hp,
        seed=seed,
        grad_mode=GradMode(mode),
    )
    state.grad = GradientBuffer(values=np.zeros(P, dtype=np.float16), produced_at_step=0)
    return state


def compute_gradient(state: TrainingState, out: GradientBuffer | None = None) -> GradientBuffer:
    """Gradient for update ``state.step + 1``, written into ``out`` when given."""
    t = state.step + 1
    if state.grad_mode is GradMode.prng:
        g = hash_uniform(stream_key(state.seed, _STREAM_GRAD, t), state.param_count)
    else:
        g = state.master - state.target
    if out is None:
        out = GradientBuffer(values=np.empty(state.param_count, dtype=np.float16))
    out.values[...] = g.astype(np.float16)
    out.produced_at_step = t
    return out


def adamw_kernel(master: np.ndarray, m: np.ndarray, v: np.ndarray, grad16: np.ndarray, t: int, hp: Hyperparams) -> None:
    """One AdamW update, in place, in float32.

    Operates on any aligned sub-range of the arrays. Every operation is an
    elementwise IEEE float32 op evaluated in a fixed order, so applying it to
    disjoint slices gives bitwise the same result as applying it to the whole.
    """
    f32 = np.float32
    b1, b2 = f32(hp.beta1), f32(hp.beta2)
    one_m_b1, one_m_b2 = f32(1.0) - b1, f32(1.0) - b2
    bc1 = f32(1.0) - b1 ** f32(t)
    bc2 = f32(1.0) - b2 ** f32(t)
    lr, eps, wd = f32(hp.lr), f32(hp.eps), f32(hp.weight_decay)

    g = grad16.astype(np.float32)
    m *= b1
    m += one_m_b1 * g
    v *= b2
    v += one_m_b2 * (g * g)
    m_hat = m / bc1
    v_hat = v / bc2
    upd = m_hat / (np.sqrt(v_hat) + eps)
    upd += wd * master
    master -= lr * upd


def adamw_update(state: TrainingState, g: GradientBuffer) -> None:
    t = state.step + 1
    if g.produced_at_step != t:
        raise StaleGradient(f"gradient drives update {g.produced_at_step}, state expects {t}")
    adamw_kernel(state.master, state.m, state.v, g.values, t, state.hp)
    state.working[...] = state.master.astype(np.float16)
    state.step = t


class PhaseHooks:
    """Callbacks at phase boundaries; all run on the training flow.

    ``backward_begin`` is the last point before the gradient buffer is
    overwritten, so it is where pending gradient reads must be drained.
    """

    def forward_begin(self, state: TrainingState) -> None:
        pass

    def backward_begin(self, state: TrainingState) -> None:
        pass

    def backward_end(self, state: TrainingState, grad: GradientBuffer) -> None:
        pass

    def update_begin(self, state: TrainingState) -> None:
        pass

    def update_end(self, state: TrainingState) -> None:
        pass


_NO_HOOKS = PhaseHooks()


def train_step(
    state: TrainingState,
    timing: PhaseTiming | None = None,
    hooks: PhaseHooks | None = None,
    clock: Clock | None = None,
) -> None:
    """Run forward, backward and update once; the state advances one version."""
    if state._in_step:
        raise ProtocolViolation("train_step is not reentrant")
    timing = timing or PhaseTiming()
    hooks = hooks or _NO_HOOKS
    clock = clock or WallClock()
    if state.grad is None:
        state.grad = GradientBuffer(values=np.zeros(state.param_count, dtype=np.float16))

    state._in_step = True
    try:
        hooks.forward_begin(state)
        started = clock.now()
        clock.pad(started, timing.t_forward)

        hooks.backward_begin(state)
        started = clock.now()
        compute_gradient(state, out=state.grad)
        clock.pad(started, timing.t_backward)
        hooks.backward_end(state, state.grad)

        hooks.update_begin(state)
        started = clock.now()
        adamw_update(state, state.grad)
        clock.pad(started, timing.t_update)
    finally:
        state._in_step = False
    hooks.update_end(state)


def state_digest(state: TrainingState) -> bytes:
    """Hash of the four checkpointed arrays and the step, for trajectory comparison."""
    import hashlib

    h = hashlib.blake2b(digest_size=16)
    h.update(state.step.to_bytes(8, "little"))
    for a in state.sections().values():
        h.update(a.tobytes())
    return h.digest()
