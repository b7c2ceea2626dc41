"""Experiment runner: training with a checkpoint scheme, crash injection, recovery, reports.

A run trains a synthetic model for ``total_steps`` steps with one scheme,
persisting checkpoints under ``<output_dir>/checkpoints``. Injected crashes
discard everything in memory (state, staging, pending persists) and restore
from the newest complete checkpoint on disk, as a node restart would.

With ``channel_mode = simulated`` every duration lives on a virtual clock, so
reports are exact and repeatable. Crashes then fire at their exact virtual
time, wherever the training flow happens to be; on the wall clock they are
checked at step boundaries.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import io
import logging
import math
import random
import shutil
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

from overlapckpt.analytic import derive_t_step, optimal_interval, stall_delta, stall_model
from overlapckpt.clock import VirtualClock, WallClock, as_fraction
from overlapckpt.engine import GradMode, Hyperparams, PhaseTiming, init_state, state_digest, train_step
from overlapckpt.errors import IncompleteLedger
from overlapckpt.orchestrator import PERSIST_KINDS, Scheme, SchemeConfig, SnapshotOrchestrator, StallRecord
from overlapckpt.persistence import (
    BackgroundPersister,
    PersistKilled,
    SimulatedPersister,
    data_size,
    latest_complete,
    load,
    persist,
)
from overlapckpt.reconstruct import HostCheckpoint, reconstruct
from overlapckpt.stallsim import saturating_stall
from overlapckpt.transfer import (
    GRADIENT_PRIORITY,
    STATE_PRIORITY,
    ChannelConfig,
    Kind,
    SimulatedChannel,
    StagingArena,
    TransferTask,
    make_channel,
)

logger = logging.getLogger(__name__)

CRASH_POLICIES = ("none", "fixed", "exponential")

REPORT_COLUMNS = (
    "scheme",
    "index",
    "trigger_step",
    "target_step",
    "completed",
    "aborted",
    "transfer_stall_s",
    "persist_wait_s",
    "total_stall_s",
)

VERIFY_COLUMNS = ("property", "instances", "failures")

TABLE1 = (  # (system, T_ckpt seconds, published N_best)
    ("Deepspeed", 36.79, 472),
    ("DCP-Async", 12.226, 272),
    ("Async", 1.313, 89),
    ("Async-O", 0.988, 77),
    ("GoCkpt", 0.435, 51),
    ("GoCkpt-O", 0.175, 32),
)
TABLE1_P = 1 / 600


class InjectedCrash(Exception):
    """The simulated process died; raised out of the virtual clock."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    P: int = 4096
    grad_mode: str = "quadratic"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t_forward: float = 0.03
    t_backward: float = 0.05
    t_update: float = 0.02
    scheme: str = "GoCkpt"
    K: int = 7
    chunk_size: int = 4 << 20
    checkpoint_interval: int = 20
    channel_mode: str = "simulated"
    bandwidth: float = 0.0  # bytes/s, 0 = unthrottled
    workers: int = 1
    copy_bytes: bool = True  # simulated channel: stage real bytes so checkpoints can be persisted
    persist_bandwidth: float = 0.0  # bytes/s of the simulated disk, 0 = instant
    persist_writers: int = 4
    crash: str = "none"
    crash_period: float = 0.0  # seconds between crashes (fixed policy)
    crash_rate: float = 0.0  # failures per second (exponential policy)
    max_crashes: int = 1000
    t_load: float = 0.0  # restore cost charged on the clock after each crash
    total_steps: int = 100
    check_reference: bool = True
    output_dir: str = "overlapckpt-run"
    report: str = ""  # CSV path; default <output_dir>/report.csv

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if self.crash not in CRASH_POLICIES:
            raise ValueError(f"crash must be one of {CRASH_POLICIES}, got {self.crash!r}")
        if self.crash == "fixed" and not self.crash_period > 0:
            raise ValueError("fixed crashes need crash_period > 0")
        if self.crash == "exponential" and not self.crash_rate > 0:
            raise ValueError("exponential crashes need crash_rate > 0")
        if self.crash != "none" and not self.timing.t_step > 0:
            raise ValueError("crash injection needs a nonzero step time")
        if self.channel_mode == "simulated" and self.crash != "none" and not self.copy_bytes:
            raise ValueError("recovery needs staged bytes; set copy_bytes = true")
        # the sub-configs validate themselves
        GradMode(self.grad_mode)
        self.hp
        self.scheme_config
        self.channel_config

    @property
    def hp(self) -> Hyperparams:
        return Hyperparams(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    @property
    def timing(self) -> PhaseTiming:
        return PhaseTiming(self.t_forward, self.t_backward, self.t_update)

    @property
    def scheme_config(self) -> SchemeConfig:
        return SchemeConfig(Scheme(self.scheme), self.K, self.chunk_size, self.checkpoint_interval)

    @property
    def channel_config(self) -> ChannelConfig:
        return ChannelConfig(self.channel_mode, self.bandwidth, self.workers, self.copy_bytes)

    @property
    def simulated(self) -> bool:
        return self.channel_mode == "simulated"

    @property
    def report_path(self) -> Path:
        return Path(self.report) if self.report else Path(self.output_dir) / "report.csv"

    @property
    def summary_path(self) -> Path:
        return self.report_path.with_suffix(".summary.txt")

    @classmethod
    def from_mapping(cls, values: dict) -> ExperimentConfig:
        """Build from string (or typed) values, e.g. parsed from a config file."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(types[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> ExperimentConfig:
        return cls.from_mapping({**parse_kv(Path(path).read_text(encoding="utf-8")), **overrides})


def _coerce(type_name: str, raw):
    if not isinstance(raw, str):
        return raw
    if type_name == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(Fraction(raw.strip()))  # accepts "1/600"
    return raw.strip()


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass
class Recovery:
    crash_time: float
    crash_step: int  # step the live state had reached
    restored_step: int  # 0 when no checkpoint existed
    resume_step: int
    from_scratch: bool


@dataclass
class RunReport:
    scheme: str
    records: list[StallRecord]
    wall_seconds: float
    t_step: float
    effective_steps: int
    executed_steps: int
    total_stall: float
    transfer_stall: float
    persist_wait: float
    crashes: int
    recoveries: list[Recovery] = field(default_factory=list)
    skipped_triggers: int = 0
    checkpoints_committed: list[int] = field(default_factory=list)
    trajectory_mismatches: int = 0
    restore_mismatches: int = 0
    persist_errors: int = 0
    clock: str = "virtual"

    @property
    def resume_steps(self) -> list[int]:
        return [r.resume_step for r in self.recoveries]

    @property
    def restarts_from_zero(self) -> int:
        return sum(r.from_scratch for r in self.recoveries)

    @property
    def effective_steps_per_s(self) -> float:
        return self.effective_steps / self.wall_seconds if self.wall_seconds > 0 else math.inf

    @property
    def waste_ratio(self) -> float:
        useful = self.effective_steps * self.t_step
        return (self.wall_seconds - useful) / useful if useful > 0 else math.nan

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for i, r in enumerate(self.records):
            persist_wait = r.total(PERSIST_KINDS)
            total = r.total()
            w.writerow([
                r.scheme, i, r.trigger_step, r.target_step, int(r.completed), int(r.aborted),
                _num(total - persist_wait), _num(persist_wait), _num(total),
            ])
        return buf.getvalue()

    def summary(self, generated_at: str | None = None) -> dict[str, str]:
        return {
            "scheme": self.scheme,
            "clock": self.clock,
            "wall_seconds": _num(self.wall_seconds),
            "t_step": _num(self.t_step),
            "effective_steps": str(self.effective_steps),
            "executed_steps": str(self.executed_steps),
            "effective_steps_per_s": _num(self.effective_steps_per_s),
            "total_stall_s": _num(self.total_stall),
            "transfer_stall_s": _num(self.transfer_stall),
            "persist_wait_s": _num(self.persist_wait),
            "waste_ratio": _num(self.waste_ratio),
            "checkpoints_completed": str(sum(r.completed for r in self.records)),
            "checkpoints_aborted": str(sum(r.aborted for r in self.records)),
            "checkpoints_committed": " ".join(map(str, self.checkpoints_committed)),
            "skipped_triggers": str(self.skipped_triggers),
            "crashes": str(self.crashes),
            "restarts_from_zero": str(self.restarts_from_zero),
            "restored_steps": " ".join(str(r.restored_step) for r in self.recoveries),
            "resume_steps": " ".join(map(str, self.resume_steps)),
            "trajectory_mismatches": str(self.trajectory_mismatches),
            "restore_mismatches": str(self.restore_mismatches),
            "persist_errors": str(self.persist_errors),
            "generated_at": generated_at or _now_iso(),
        }

    def summary_text(self, generated_at: str | None = None) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.summary(generated_at).items())

    def write(self, csv_path: Path, summary_path: Path) -> None:
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(self.csv_text(), encoding="utf-8")
        summary_path.write_text(self.summary_text(), encoding="utf-8")


def _num(x) -> str:
    return repr(float(x))


def _now_iso() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class _Reference:
    """Digests of the uninterrupted trajectory, extended on demand."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        self.state = init_state(cfg.seed, cfg.P, cfg.hp, cfg.grad_mode)
        self.digests = [state_digest(self.state)]

    def at(self, step: int) -> bytes:
        while len(self.digests) <= step:
            train_step(self.state)
            self.digests.append(state_digest(self.state))
        return self.digests[step]


def _crash_schedule(cfg: ExperimentConfig):
    rng = random.Random(cfg.seed ^ 0x5EED)
    t = Fraction(0)
    while True:
        if cfg.crash == "fixed":
            t += as_fraction(cfg.crash_period)
        else:
            t += as_fraction(rng.expovariate(cfg.crash_rate))
        yield t


def _clear_checkpoints(root: Path) -> None:
    # the run owns this directory; stale checkpoints would leak into recovery
    if root.is_dir():
        for child in root.iterdir():
            if child.is_dir() and child.name.startswith("ckpt-"):
                shutil.rmtree(child)
    root.mkdir(parents=True, exist_ok=True)


def run(cfg: ExperimentConfig, write_report: bool = True) -> RunReport:
    """Train ``cfg.total_steps`` steps under one scheme, with crashes and recovery."""
    sim = cfg.simulated
    clock = VirtualClock() if sim else WallClock()
    channel = make_channel(cfg.channel_config, clock)
    root = Path(cfg.output_dir) / "checkpoints"
    _clear_checkpoints(root)
    if sim:
        persister = SimulatedPersister(root, clock, cfg.persist_bandwidth, cfg.persist_writers)
    else:
        persister = BackgroundPersister(root, cfg.persist_writers, clock)

    timing = cfg.timing
    started = clock.now()
    executed = 0

    def meta() -> dict:
        elapsed = float(clock.now() - started)
        return {
            "scheme": cfg.scheme,
            "training_seconds": elapsed,
            "throughput_steps_per_s": executed / elapsed if elapsed > 0 else 0.0,
        }

    def on_staged(staged) -> None:
        if isinstance(staged, HostCheckpoint):
            persister.submit(lambda: staged, meta)
        elif staged.arena.holds_bytes:
            persister.submit(lambda: reconstruct(staged), meta)
        else:
            persister.submit_timing(data_size(staged.arena.param_count))

    orch = SnapshotOrchestrator(cfg.scheme_config, channel, clock, on_staged, persister.gate_next)
    reference = _Reference(cfg) if cfg.check_reference else None
    state = init_state(cfg.seed, cfg.P, cfg.hp, cfg.grad_mode)
    recoveries: list[Recovery] = []
    mismatches = restore_mismatches = 0

    crashes = _crash_schedule(cfg) if cfg.crash != "none" else iter(())
    next_crash = next(crashes, None)

    def arm() -> None:
        if sim:
            clock.set_alarm(None if next_crash is None else started + next_crash, lambda: InjectedCrash())

    def recover() -> None:
        nonlocal state, next_crash, restore_mismatches
        crash_time = clock.now() - started
        crash_step = state.step
        orch.discard()
        persister.crash()
        state = init_state(cfg.seed, cfg.P, cfg.hp, cfg.grad_mode)  # volatile state is gone
        step = latest_complete(root)
        if step is not None:
            ck = load(root, step)
            state.install(ck.step, ck.working, ck.master, ck.m, ck.v)
            if reference is not None and state_digest(state) != reference.at(step):
                restore_mismatches += 1
        if cfg.t_load:
            clock.advance(cfg.t_load) if sim else clock.sleep_until(clock.now() + cfg.t_load)
        recoveries.append(Recovery(float(crash_time), crash_step, step or 0, (step or 0) + 1, step is None))
        logger.info("crash at t=%.3f step %d; resumed from checkpoint %s", float(crash_time), crash_step, step)
        while next_crash is not None and next_crash <= clock.now() - started:
            next_crash = next(crashes, None)
        if len(recoveries) >= cfg.max_crashes:
            next_crash = None
        arm()

    arm()
    try:
        while state.step < cfg.total_steps:
            try:
                train_step(state, timing, orch, clock)
            except InjectedCrash:
                recover()
                continue
            executed += 1
            if not sim and next_crash is not None and clock.now() - started >= next_crash:
                recover()
                continue
            if reference is not None and state_digest(state) != reference.at(state.step):
                mismatches += 1
        wall = clock.now() - started
        clock_kind = "virtual" if sim else "wall"
        if sim:
            clock.set_alarm(None)
        if orch.session is not None:
            orch.discard()
        persister.gate_next()  # let the last checkpoint commit; not part of the measured run
    finally:
        if sim:
            clock.set_alarm(None)
            persister.detach()
        channel.shutdown()

    records = orch.records
    total = sum((r.total() for r in records), 0)
    persist_wait = sum((r.total(PERSIST_KINDS) for r in records), 0)
    report = RunReport(
        scheme=cfg.scheme,
        records=records,
        wall_seconds=float(wall),
        t_step=float(timing.t_step),
        effective_steps=state.step,
        executed_steps=executed,
        total_stall=float(total),
        transfer_stall=float(total - persist_wait),
        persist_wait=float(persist_wait),
        crashes=len(recoveries),
        recoveries=recoveries,
        skipped_triggers=orch.skipped_triggers,
        checkpoints_committed=list(persister.committed),
        trajectory_mismatches=mismatches,
        restore_mismatches=restore_mismatches,
        persist_errors=len(persister.errors),
        clock=clock_kind,
    )
    if write_report:
        report.write(cfg.report_path, cfg.summary_path)
    return report


# property suites used by `verify`


@dataclass
class PropertyResult:
    name: str
    instances: int
    failures: int
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.failures == 0


def oracle_case(
    K: int,
    P: int,
    mode: str = "prng",
    seed: int = 0,
    t0: int = 3,
    scheme: str = "GoCkpt",
    drop_gradient_step: int | None = None,
    channel: str = "simulated",
    fill: float = 0.75,
) -> bool:
    """Reconstruct one overlapped checkpoint and compare it bitwise with a blocking copy.

    The link carries ``fill`` of a part per capture window, so part of every
    part is deferred to the blocking phase and the replay sees parts staged
    at several versions.
    """
    hp = Hyperparams()
    K = min(K, P)
    per_part = -(-P // K)
    chunk = max(16, 4 * -(-per_part // 8))  # about eight blocks per part
    timing = PhaseTiming(Fraction(1, 2), Fraction(1, 2), Fraction(1, 4))
    bandwidth = Fraction(14 * per_part) * as_fraction(fill)
    clock = VirtualClock() if channel == "simulated" else WallClock()
    if channel == "simulated":
        ch = SimulatedChannel(ChannelConfig("simulated", bandwidth=bandwidth, copy_bytes=True), clock)
        timing_used = timing
    else:
        ch = make_channel(ChannelConfig("real", workers=2), clock)
        timing_used = PhaseTiming()
    orch = SnapshotOrchestrator(SchemeConfig(Scheme(scheme), K, chunk, t0), ch, clock)
    orch.drop_gradient_step = drop_gradient_step
    state = init_state(seed, P, hp, mode)
    try:
        parts = orch.config.parts
        for _ in range(t0 + min(parts, P)):
            train_step(state, timing_used, orch, clock)
    finally:
        ch.shutdown()
    staged = orch.staged[0]
    got = reconstruct(staged)

    ref = init_state(seed, P, hp, mode)
    while ref.step < got.step:
        train_step(ref)
    return got.equals(HostCheckpoint.from_state(ref))


def check_oracle(Ks: Iterable[int], Ps: Iterable[int], modes: Iterable[str], seeds: Iterable[int], drop_gradient: bool = False) -> PropertyResult:
    n = bad = 0
    details = []
    for K in Ks:
        for P in Ps:
            for mode in modes:
                for seed in seeds:
                    n += 1
                    drop = 3 + 1 if drop_gradient and min(K, P) > 1 else None
                    try:
                        ok = oracle_case(K, P, mode, seed, drop_gradient_step=drop)
                    except IncompleteLedger as exc:
                        ok = False
                        details.append(f"K={K} P={P}: incomplete ledger ({exc})")
                    if not ok:
                        bad += 1
    return PropertyResult("oracle_equivalence", n, bad, "; ".join(details[:3]))


def check_negative_control() -> PropertyResult:
    """A withheld gradient slice must be caught before anything is persisted."""
    try:
        oracle_case(4, 64, "prng", 0, drop_gradient_step=4)
    except IncompleteLedger:
        return PropertyResult("negative_control_incomplete_ledger", 1, 0)
    return PropertyResult("negative_control_incomplete_ledger", 1, 1, "withheld slice went unnoticed")


def kill_point_labels(writers: int) -> list[str]:
    return ["mkdir", *(f"write:data[{i}]" for i in range(writers)), "flush:data", "write:meta", "flush:meta", "rename:meta", "fsync:dir"]


def check_atomicity(writers: int = 3, P: int = 257) -> PropertyResult:
    """Kill a persist at every boundary; the store must expose only complete checkpoints."""
    n = bad = 0
    with tempfile.TemporaryDirectory(prefix="overlapckpt-kill-") as tmp:
        base = init_state(1, P)
        ckpts = []
        for _ in range(3):
            train_step(base)
            ckpts.append(HostCheckpoint.from_state(base))
        for label in kill_point_labels(writers) + [None]:
            for prior in range(len(ckpts)):
                n += 1
                root = Path(tmp) / f"case-{n}"
                for ck in ckpts[:prior]:
                    persist(ck, root, writers, retain=0)
                victim = ckpts[prior]

                def fault(at: str, label=label) -> None:
                    if at == label:
                        raise PersistKilled(at)

                try:
                    persist(victim, root, writers, fault=fault, retain=0)
                    killed = False
                except PersistKilled:
                    killed = True
                if label is not None and not killed:
                    bad += 1
                    continue
                expect = victim.step if not killed or label == "fsync:dir" else (ckpts[prior - 1].step if prior else None)
                got = latest_complete(root)
                if got != expect:
                    bad += 1
                elif got is not None and not load(root, got).equals(victim if got == victim.step else ckpts[prior - 1]):
                    bad += 1
    return PropertyResult("persistence_atomicity", n, bad)


def check_priority() -> PropertyResult:
    """A gradient chunk submitted behind queued state chunks runs right after the in-flight one."""
    n = bad = 0
    for queued in (1, 3, 8):
        n += 1
        clock = VirtualClock()
        ch = SimulatedChannel(ChannelConfig("simulated", bandwidth=1), clock)
        ch.open(StagingArena(64, {1: 64}, holds_bytes=False))
        state = [TransferTask(Kind.State, 1, "master", 4 * i, 4, 0, STATE_PRIORITY) for i in range(queued + 1)]
        st = ch.submit_all([(t, None) for t in state])
        grad = ch.submit(TransferTask(Kind.Gradient, 1, "grad", 0, 2, 1, GRADIENT_PRIORITY))
        ch.wait(st + grad)
        order = ch.completion_log
        grad_id = grad.records[0].id
        # exactly one state chunk (the one already on the link) precedes the gradient
        if order.index(grad_id) != 1:
            bad += 1
        ch.shutdown()
    return PropertyResult("priority", n, bad)


def check_formulas() -> PropertyResult:
    n = bad = 0
    t_step = derive_t_step(TABLE1[0][2], TABLE1[0][1], TABLE1_P)
    for _, t_ckpt, n_best in TABLE1:
        n += 1
        if abs(optimal_interval(t_ckpt, t_step, TABLE1_P)[1] - n_best) > 2:
            bad += 1
    for N in range(2, 9):
        for scheme in ("AsyncO", "GoCkpt"):
            n += 1
            measured = saturating_stall(scheme, N).stall
            expect = stall_model(scheme, N, Fraction(1))
            tol = 0 if scheme == "AsyncO" else Fraction(1, 100) * expect
            if abs(measured - expect) > tol:
                bad += 1
    n += 1
    if stall_delta(7, Fraction(1)) != -3:
        bad += 1
    return PropertyResult("formulas", n, bad)


def verify(quick: bool = True, skip_gradient: bool = False) -> list[PropertyResult]:
    """Run the property suites. ``skip_gradient`` withholds a gradient slice in the oracle suite."""
    Ps = (64, 1000) if quick else (64, 1000, 100_000)
    seeds = range(2) if quick else range(5)
    return [
        check_oracle(range(1, 9), Ps, ("prng", "quadratic"), seeds, drop_gradient=skip_gradient),
        check_negative_control(),
        check_atomicity(),
        check_priority(),
        check_formulas(),
    ]


def verify_csv(results: list[PropertyResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(VERIFY_COLUMNS)
    for r in results:
        w.writerow([r.name, r.instances, r.failures])
    return buf.getvalue()
