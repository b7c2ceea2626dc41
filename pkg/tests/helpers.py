"""Shared fixtures: run one checkpoint session on virtual time and trace it."""

from fractions import Fraction

from overlapckpt.clock import VirtualClock
from overlapckpt.engine import PhaseTiming, init_state, train_step
from overlapckpt.orchestrator import SchemeConfig, SnapshotOrchestrator
from overlapckpt.transfer import ChannelConfig, SimulatedChannel

MiB = 1 << 20
HALF = PhaseTiming(Fraction(1, 2), Fraction(1, 2), Fraction(0))


class Tracer(SnapshotOrchestrator):
    """Records the tasks queued at each step and the state of every version."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.emitted = {}
        self.versions = {}
        self.grads = {}

    def on_phase(self, event, state, grad=None):
        tasks = super().on_phase(event, state, grad)
        self.emitted.setdefault(state.step + 1, []).extend(tasks)
        return tasks

    def forward_begin(self, state):
        self.versions[state.step] = state.copy_arrays()
        super().forward_begin(state)

    def backward_end(self, state, grad):
        self.grads[grad.produced_at_step] = grad.values.copy()
        super().backward_end(state, grad)


def session(scheme, K, P, bandwidth=0, timing=HALF, chunk=64, t0=2, steps=None, gate=None, copy=True, cls=Tracer):
    clock = VirtualClock()
    ch = SimulatedChannel(ChannelConfig("simulated", bandwidth=bandwidth, copy_bytes=copy), clock)
    orch = cls(SchemeConfig(scheme, K, chunk, t0), ch, clock, gate=gate)
    state = init_state(1, P)
    for _ in range(steps if steps is not None else t0 + K):
        train_step(state, timing, orch, clock)
    ch.detach()
    return orch, state, clock


# criterion number -> one-line verdict, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> bool:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok
