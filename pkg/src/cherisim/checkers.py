"""Run-time verification of the core model against the architectural spec.

A session drives one core plus its bus model cycle by cycle.  At every
completion edge the follower evaluates the architectural step function on
the core's own projected state and the realized inputs, then checks each
visible commit (CSR writes, register writes, bus requests) against it.
Whole-trace checkers audit state continuity, observational equivalence,
capability monotonicity, cached-bounds coherence, and forward progress.
"""

import random
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

from .capability import (
    CANONICAL_CODES,
    Capability,
    EXPONENTS,
    M32,
    TOP_MAX,
    bounds_of,
    corrections_of,
    from_bits,
    is_mem_wellformed,
    to_bits,
)
from .isa import (
    ArchInput,
    ArchState,
    IRQ_ACK_ADDR,
    CSR_MSTATUS,
    Instr,
    MemEventPlan,
    SCR_MEPCC,
    cap_slot_values,
    cspec_step,
    decode,
    encode_instr,
    reset_state,
    spec_step_full,
    state_stricter_than,
)
from .microcore import (
    BuildConfig,
    CycleInputs,
    Driver,
    IDLE_PORT,
    LSU_IDLE,
    MUTATIONS,
    MicroState,
    NOP_WORD,
    PortOutputs,
    TimingSchedule,
    _port_for,
    cached_slots,
    micro_reset,
    micro_step,
    program_map,
)

CHECKER_NAMES = (
    "run_follower",
    "check_dti",
    "check_continuity",
    "check_observational",
    "check_monotonicity",
    "check_liveness",
)

# which checker is expected to flag each seeded defect
DESIGNATED = {
    "M1": "run_follower",
    "M2": "check_dti",
    "M3": "check_monotonicity",
    "M4": "check_monotonicity",
    "M5": "check_continuity",
    "M6": "check_dti",
}


@dataclass
class Verdict:
    ok: bool
    checker: str = ""
    cycle: Optional[int] = None
    expected: str = ""
    actual: str = ""
    seed: int = 0
    counterexample: Optional[dict] = None

    def message(self) -> str:
        if self.ok:
            return f"{self.checker}: pass"
        where = f" at cycle {self.cycle}" if self.cycle is not None else ""
        return (
            f"{self.checker}: FAIL{where}; expected {self.expected}; "
            f"got {self.actual} (seed {self.seed})"
        )


def _ok(checker: str, seed: int = 0) -> Verdict:
    return Verdict(True, checker, seed=seed)


def _fail(checker: str, cycle: Optional[int], expected: str, actual: str, seed: int = 0) -> Verdict:
    return Verdict(False, checker, cycle, expected, actual, seed)


# --- read-data stream -------------------------------------------------------


class ReadStream:
    """Deterministic lazily drawn bus read data, indexed by read ordinal.

    A slice of the draws are well-formed capability doublewords (the low
    word carries the tag) so that capability loads see real material,
    including the occasional wide-exponent value whose cursor sits below
    its own base.  Tags are never attached to arbitrary bit patterns.
    """

    def __init__(self, seed: int, cap_bias: float = 0.25):
        self._rng = random.Random(seed)
        self._vals: list[tuple[int, bool]] = []
        self._pending: list[tuple[int, bool]] = []
        self._bias = cap_bias

    def __call__(self, k: int) -> tuple[int, bool]:
        while len(self._vals) <= k:
            self._vals.append(self._draw())
        return self._vals[k]

    def _draw(self) -> tuple[int, bool]:
        if self._pending:
            return self._pending.pop()
        r = self._rng
        p = r.random()
        if p < self._bias:
            cap = self._draw_cap(r)
            bits = to_bits(cap)
            self._pending.append((bits >> 32 & M32, False))
            return (bits & M32, cap.tag)
        return (r.getrandbits(32), False)

    @staticmethod
    def _draw_cap(r: random.Random) -> Capability:
        codes = sorted(CANONICAL_CODES)
        if r.random() < 0.1:
            # full-exponent value addressed below its own base
            return Capability(True, 0, 0x1FF, 0x100, 24, r.choice(codes), 0)
        for _ in range(64):
            cap = Capability(
                r.random() < 0.8,
                r.getrandbits(32),
                r.getrandbits(9),
                r.getrandbits(9),
                r.choice(EXPONENTS),
                r.choice(codes),
                r.choice((0, 0, 0, r.randrange(8))),
            )
            if is_mem_wellformed(cap):
                return cap
        return Capability(True, r.getrandbits(32), 0, 0x100, 24, r.choice(codes), 0)


def fixed_stream(entries: Sequence[tuple[int, bool]]) -> Callable[[int], tuple[int, bool]]:
    items = tuple((w & M32, bool(t)) for w, t in entries)
    return lambda k: items[k] if k < len(items) else (0, False)


# --- session traces ---------------------------------------------------------


@dataclass
class CycleRecord:
    cycle: int
    cin: CycleInputs
    port: PortOutputs
    events: tuple


@dataclass
class SpecPoint:
    """One completion edge: the pre-state sample, the realized input, and
    the architectural step evaluated on them."""

    cycle: int
    sample: ArchState
    arch_input: ArchInput
    instr: Optional[Instr]
    cause: Optional[int]
    interrupt: bool
    expected: ArchState  # post-state including any extra clearing
    expected_raw: ArchState  # post-state of the plain step function
    plan: MemEventPlan
    derivations: tuple


@dataclass
class SessionTrace:
    program: dict[int, int]
    schedule: TimingSchedule
    config: BuildConfig
    clear_rules: tuple
    points: list[SpecPoint]
    records: list[CycleRecord]
    dti_failure: Optional[tuple[int, str]]
    follower_failure: Optional[Verdict]
    end_cycle: int
    seed: int


# --- per-state cached-bounds coherence --------------------------------------


def check_dti(m: MicroState) -> Optional[str]:
    """Every stored tagged capability must carry corrections that match a
    fresh decode and must be storable as a well-formed memory image.
    Returns a description of the first violation, or None."""
    for name, cc in cached_slots(m):
        if not cc.cap.tag:
            continue
        fresh = corrections_of(cc.cap)
        if (cc.base_cor, cc.top_cor) != (fresh.c_b, fresh.c_t):
            return (
                f"{name}: cached corrections ({cc.base_cor}, {cc.top_cor}) "
                f"!= decoded ({fresh.c_b}, {fresh.c_t})"
            )
        if not is_mem_wellformed(cc.cap):
            return f"{name}: tagged capability is not well-formed"
    return None


# --- expected bus activity --------------------------------------------------


def expected_port_events(
    plan: MemEventPlan,
    gnt_latencies: Sequence[int],
    rvalid_latencies: Sequence[int] = (),
) -> tuple[PortOutputs, ...]:
    """Canonical port pattern for a plan under the given latencies, starting
    at the cycle the first request is driven: each request is held through
    its grant, and a follow-up request begins the cycle its predecessor's
    response is consumed."""
    out: list[PortOutputs] = []
    for k, mreq in enumerate(plan.requests):
        out.extend([_port_for(mreq)] * (gnt_latencies[k] + 1))
        if k + 1 < len(plan.requests):
            out.extend([IDLE_PORT] * (rvalid_latencies[k] - 1))
    return tuple(out)


def _window_error(window: list[CycleRecord], plan: MemEventPlan) -> Optional[str]:
    """Field-exact validation of one completion window's bus activity."""
    reqs = plan.requests
    if not reqs:
        for rec in window:
            if rec.port.req:
                return f"unexpected bus request at cycle {rec.cycle}"
        return None
    idx = 0
    while idx < len(window) and not window[idx].port.req:
        idx += 1
    if idx == len(window):
        return "no bus requests emitted for a memory plan"
    for k, mreq in enumerate(reqs):
        want = _port_for(mreq)
        granted = False
        while idx < len(window):
            rec = window[idx]
            if rec.port != want:
                return f"beat {k} fields diverge at cycle {rec.cycle}"
            idx += 1
            if rec.cin.gnt:
                granted = True
                break
        if not granted:
            return f"beat {k} never granted"
        if k + 1 < len(reqs):
            while idx < len(window) and not window[idx].port.req:
                if window[idx].cin.rvalid:
                    return f"beat {k + 1} missed its launch at cycle {window[idx].cycle}"
                idx += 1
            if idx == len(window):
                return f"beat {k + 1} never launched"
            if not window[idx].cin.rvalid:
                return f"beat {k + 1} launched early at cycle {window[idx].cycle}"
    if idx != len(window):
        return f"requests continue past the final grant at cycle {window[idx].cycle}"
    return None


# --- the follower -----------------------------------------------------------


class Follower:
    """Companion that replays the architectural step at every completion
    edge and holds the core to it: CSR commits on the completion cycle,
    register commits before the next edge, and bus requests field-exact
    against the stored plan at their emission cycles."""

    def __init__(
        self,
        config: BuildConfig,
        clear_rules: tuple,
        stream: Callable[[int], tuple[int, bool]],
        seed: int,
    ):
        self.config = config
        self.clear_rules = clear_rules
        self.stream = stream
        self.cursor = 0
        self.points: list[SpecPoint] = []
        self.window: list[CycleRecord] = []
        self.expected_now: Optional[ArchState] = None
        self.due_rf: Optional[tuple[int, Capability]] = None
        self.failure: Optional[Verdict] = None

    def _flag(self, cycle: int, expected: str, actual: str) -> None:
        if self.failure is None:
            self.failure = _fail("run_follower", cycle, expected, actual)

    def on_step(self, rec: CycleRecord, sample: Optional[ArchState]) -> None:
        self.window.append(rec)
        for i, ev in enumerate(rec.events):
            if ev[0] == "commit_rf":
                self._check_rf(rec.cycle, ev)
            elif ev[0] == "spec_en":
                csr_events = [e for e in rec.events[i + 1 :] if e[0] == "commit_csr"]
                assert sample is not None
                self._complete_point(rec.cycle, sample, ev, csr_events)

    def _check_rf(self, cycle: int, ev: tuple) -> None:
        rd, cc = ev[1], ev[2]
        if self.expected_now is None:
            self._flag(cycle, "no register commit before the first completion", f"x{rd} written")
            return
        want = self.expected_now.x[rd]
        if cc.cap != want:
            self._flag(cycle, f"x{rd} = {want}", f"x{rd} = {cc.cap}")
        if self.due_rf is not None and self.due_rf[0] == rd:
            self.due_rf = None

    def _complete_point(self, cycle: int, sample: ArchState, ev: tuple, csr_events: list) -> None:
        _, bits, addr, is_irq = ev
        if self.due_rf is not None:
            self._flag(cycle, f"x{self.due_rf[0]} committed before the next completion", "no commit")
            self.due_rf = None
        peek = (self.stream(self.cursor), self.stream(self.cursor + 1))
        inp = ArchInput(
            instr_bits=0 if bits is None else bits,
            irq_pending=is_irq,
            mem_read_data=peek,
        )
        r = spec_step_full(sample, inp, self.config.mtval_on_ebreak)
        cstate, _ = cspec_step(sample, inp, self.clear_rules, self.config.mtval_on_ebreak)
        nreads = len(r.plan.requests) if r.plan.kind == "read" else 0
        inp = replace(inp, mem_read_data=peek[:nreads])
        self.cursor += nreads

        window, self.window = self.window, []
        if not r.plan.requests and window and window[-1].port.req:
            # a successor launched on this very cycle; its window starts here
            self.window = [window[-1]]
            window = window[:-1]
        err = _window_error(window, r.plan)
        if err is not None:
            self._flag(cycle, f"bus activity per plan {r.plan.kind}", err)

        seen = {e[1]: e[2] for e in csr_events}
        checks = (
            ("mcause", r.state.mcause, sample.mcause),
            ("mtval", r.state.mtval, sample.mtval),
            (
                "mstatus",
                (r.state.mstatus_mie, r.state.mstatus_mpie),
                (sample.mstatus_mie, sample.mstatus_mpie),
            ),
            ("mepcc", r.state.mepcc, sample.mepcc),
            ("mtcc", r.state.mtcc, sample.mtcc),
        )
        for name, want, before in checks:
            if name in seen and seen[name] != want:
                self._flag(cycle, f"{name} = {want}", f"{name} = {seen[name]}")
            elif want != before and name not in seen:
                self._flag(cycle, f"{name} committed on the completion cycle", "no commit")

        changed = [i for i in range(1, 16) if r.state.x[i] != sample.x[i]]
        self.due_rf = (changed[0], r.state.x[changed[0]]) if changed else None
        self.expected_now = r.state
        self.points.append(
            SpecPoint(
                cycle=cycle,
                sample=sample,
                arch_input=inp,
                instr=r.instr,
                cause=None if r.cause is None else int(r.cause),
                interrupt=r.interrupt,
                expected=cstate,
                expected_raw=r.state,
                plan=r.plan,
                derivations=r.derivations,
            )
        )

    def finish(self, end_cycle: int) -> None:
        if self.due_rf is not None:
            self._flag(end_cycle, f"x{self.due_rf[0]} committed before the run ended", "no commit")


# --- session engine ---------------------------------------------------------


def run_session(
    program: Union[Sequence[int], dict[int, int]],
    schedule: TimingSchedule,
    config: BuildConfig = BuildConfig(),
    clear_rules: tuple = (),
    stream: Optional[Callable[[int], tuple[int, bool]]] = None,
    seed: int = 0,
    target_points: Optional[int] = None,
    max_cycles: Optional[int] = None,
) -> SessionTrace:
    """Drive one core against the bus model, following along with the
    architectural spec, until enough completion edges have been observed
    and the pipeline has drained."""
    pmap = dict(program) if isinstance(program, dict) else program_map(list(program))
    if target_points is None:
        target_points = (len(pmap) + 4) if pmap else 16
    if max_cycles is None:
        max_cycles = 60 * target_points + 500
    if stream is None:
        stream = ReadStream(seed)
    m = micro_reset(schedule, config)
    driver = Driver(pmap, schedule, stream)
    follower = Follower(config, clear_rules, stream, seed)
    records: list[CycleRecord] = []
    dti_failure: Optional[tuple[int, str]] = None
    cycle = 0
    for cycle in range(max_cycles):
        cin = driver.inputs_for(cycle, m)
        step = micro_step(m, cin)
        driver.observe(cycle, cin, step.port, step.events)
        rec = CycleRecord(cycle, cin, step.port, step.events)
        records.append(rec)
        follower.on_step(rec, step.sample)
        if dti_failure is None:
            msg = check_dti(m)
            if msg is not None:
                dti_failure = (cycle, msg)
        if len(follower.points) >= target_points and m.wb is None and m.lsu.phase == LSU_IDLE:
            break
    follower.finish(cycle)
    if follower.failure is not None:
        follower.failure.seed = seed
    return SessionTrace(
        program=pmap,
        schedule=schedule,
        config=config,
        clear_rules=clear_rules,
        points=follower.points,
        records=records,
        dti_failure=dti_failure,
        follower_failure=follower.failure,
        end_cycle=cycle,
        seed=seed,
    )


def run_follower(
    program: Union[Sequence[int], dict[int, int]],
    schedule: TimingSchedule,
    clear_rules: tuple = (),
    **kwargs,
) -> tuple[SessionTrace, Verdict]:
    trace = run_session(program, schedule, clear_rules=clear_rules, **kwargs)
    return trace, follower_verdict(trace)


def follower_verdict(trace: SessionTrace) -> Verdict:
    if trace.follower_failure is not None:
        return trace.follower_failure
    return _ok("run_follower", trace.seed)


def dti_verdict(trace: SessionTrace) -> Verdict:
    if trace.dti_failure is not None:
        cycle, msg = trace.dti_failure
        return _fail("check_dti", cycle, "coherent cached bounds", msg, trace.seed)
    return _ok("check_dti", trace.seed)


# --- whole-trace checkers ---------------------------------------------------

_CORE_FIELDS = ("mcause", "mtval", "mstatus_mie", "mstatus_mpie")


def _core_equal(a: ArchState, b: ArchState) -> bool:
    if a.x != b.x or a.pcc != b.pcc or a.mtcc != b.mtcc or a.mepcc != b.mepcc:
        return False
    return all(getattr(a, f) == getattr(b, f) for f in _CORE_FIELDS)


def check_continuity(trace: SessionTrace) -> Verdict:
    """Induction over completion edges: the first sample equals the reset
    state, and every later sample equals or is stricter than the stored
    architectural output of the previous edge."""
    pts = trace.points
    if not pts:
        return _ok("check_continuity", trace.seed)
    if not _core_equal(pts[0].sample, reset_state()):
        return _fail(
            "check_continuity", pts[0].cycle, "reset state at the first completion", "divergent sample", trace.seed
        )
    for prev, cur in zip(pts, pts[1:]):
        if not state_stricter_than(cur.sample, prev.expected, include_mem=False):
            return _fail(
                "check_continuity",
                cur.cycle,
                "sample equal to or stricter than the stored step output",
                "divergent sample",
                trace.seed,
            )
    return _ok("check_continuity", trace.seed)


def _paired_windows(trace: SessionTrace):
    """Partition the cycle records into completion windows, attributing a
    successor's same-cycle launch to the successor."""
    start = 0
    for p in trace.points:
        window = trace.records[start : p.cycle + 1]
        if not p.plan.requests and window and window[-1].port.req:
            window = window[:-1]
            start = p.cycle
        else:
            start = p.cycle + 1
        yield p, window


def check_observational(trace: SessionTrace) -> Verdict:
    """The core is indistinguishable from the architectural chain: each
    sample equals the independently iterated state, and each window's bus
    activity matches the canonical pattern for the stored plan."""
    st = reset_state()
    for p in trace.points:
        if not _core_equal(p.sample, st):
            return _fail(
                "check_observational", p.cycle, "sample equal to the iterated state", "divergent sample", trace.seed
            )
        try:
            st, _ = cspec_step(st, p.arch_input, trace.clear_rules, trace.config.mtval_on_ebreak)
        except IndexError:
            return _fail(
                "check_observational", p.cycle, "input shape matching the iterated state", "short read data", trace.seed
            )
    for p, window in _paired_windows(trace):
        if not p.plan.requests:
            err = _window_error(window, p.plan)
            if err is not None:
                return _fail("check_observational", p.cycle, "an idle bus", err, trace.seed)
            continue
        idx = 0
        while idx < len(window) and not window[idx].port.req:
            idx += 1
        stripped = window[idx:]
        gnts: list[int] = []
        rvs: list[int] = []
        pos = 0
        parse_err = None
        for k in range(len(p.plan.requests)):
            beat_start = pos
            while pos < len(stripped) and not stripped[pos].cin.gnt:
                pos += 1
            if pos == len(stripped):
                parse_err = f"beat {k} never granted"
                break
            gnts.append(pos - beat_start)
            pos += 1
            if k + 1 < len(p.plan.requests):
                nxt = pos
                while nxt < len(stripped) and not stripped[nxt].port.req:
                    nxt += 1
                if nxt == len(stripped):
                    parse_err = f"beat {k + 1} never launched"
                    break
                rvs.append(nxt - (pos - 1))
                pos = nxt
        if parse_err is not None:
            return _fail("check_observational", p.cycle, "bus activity per plan", parse_err, trace.seed)
        want = expected_port_events(p.plan, gnts, rvs)
        got = tuple(rec.port for rec in stripped)
        if got != want:
            return _fail(
                "check_observational",
                p.cycle,
                f"{len(want)} port cycles per plan",
                f"{len(got)} port cycles with diverging fields",
                trace.seed,
            )
    return _ok("check_observational", trace.seed)


def check_monotonicity(trace: SessionTrace) -> Verdict:
    """Every tagged capability appearing in a sample that is not bit
    identical to one already held, or to one just loaded, must trace to a
    recorded parent and stay inside its bounds and masked permissions."""
    pts = trace.points
    for p, nxt in zip(pts, pts[1:]):
        ground = {(to_bits(c), c.tag) for _, c in cap_slot_values(p.sample)}
        if p.instr is not None and p.instr.name == "clc" and len(p.arch_input.mem_read_data) >= 2:
            (lo, t0), (hi, _) = p.arch_input.mem_read_data[:2]
            raw = from_bits(lo | hi << 32, t0)
            ground.add((to_bits(raw), raw.tag))
        derivmap = {d.slot: d for d in p.derivations}
        for slot, cap in cap_slot_values(nxt.sample):
            if not cap.tag or (to_bits(cap), True) in ground:
                continue
            d = derivmap.get(slot)
            if d is None:
                return _fail(
                    "check_monotonicity", nxt.cycle, f"{slot} derived from a recorded parent", "no derivation record", trace.seed
                )
            if not d.parent.tag or (to_bits(d.parent), True) not in ground:
                return _fail(
                    "check_monotonicity", nxt.cycle, f"{slot} parent tagged and previously held", "ungrounded parent", trace.seed
                )
            pb, rb = bounds_of(d.parent), bounds_of(cap)
            if rb.base < pb.base or rb.top > pb.top:
                return _fail(
                    "check_monotonicity",
                    nxt.cycle,
                    f"{slot} bounds within [{pb.base:#x}, {pb.top:#x})",
                    f"[{rb.base:#x}, {rb.top:#x})",
                    trace.seed,
                )
            for have, parent_has, mask_has in zip(cap.perms, d.parent.perms, d.perm_mask):
                if have and not (parent_has and mask_has):
                    return _fail(
                        "check_monotonicity",
                        nxt.cycle,
                        f"{slot} permissions within parent and mask",
                        "widened permissions",
                        trace.seed,
                    )
    return _ok("check_monotonicity", trace.seed)


# --- forward progress -------------------------------------------------------


def compute_b_max(max_gnt: int, max_rvalid: int, wfi_bound: int) -> int:
    """Worst-case distance between completion edges, from the longest simple
    path through the stall graph under maximal latencies: drains bounded by
    one response, bus beats by a grant plus a response each, redirects by a
    fixed refill, and sleep by its wake bound."""
    g, r, w = max_gnt, max_rvalid, wfi_bound
    paths = {
        "drain then two-beat access": 2 * g + 2 * r,
        "redirect refill then two-beat access": 3 + 2 * g + r,
        "redirect refill then sleep": 4 + w,
        "sleep gated on a drain": max(1 + w, r),
        "drain then interrupt": r,
        "back to back": 1,
    }
    return max(paths.values())


def max_gap(trace: SessionTrace) -> int:
    cycles = [p.cycle for p in trace.points]
    if not cycles:
        return trace.end_cycle
    gaps = [cycles[0]]
    gaps.extend(b - a for a, b in zip(cycles, cycles[1:]))
    gaps.append(trace.end_cycle - cycles[-1])
    return max(gaps)


def check_liveness(
    traces: Sequence[SessionTrace],
    bounds: tuple[int, int, int],
    seed: int = 0,
) -> tuple[int, Verdict]:
    """Measured worst completion gap across the traces against the bound
    computed for the schedule envelope."""
    limit = compute_b_max(*bounds)
    worst = 0
    where: Optional[int] = None
    for t in traces:
        g = max_gap(t)
        if g > worst:
            worst = g
            cycles = [p.cycle for p in t.points]
            where = cycles[-1] if cycles else t.end_cycle
    if worst > limit:
        return worst, _fail("check_liveness", where, f"gap <= {limit}", f"gap {worst}", seed)
    return worst, _ok("check_liveness", seed)


# --- mutations --------------------------------------------------------------


def apply_mutation(mutation: str, config: Optional[BuildConfig] = None) -> BuildConfig:
    """Build configuration with exactly one seeded defect enabled."""
    if mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation: {mutation!r}")
    base = config if config is not None else BuildConfig()
    if base.mutation is not None and base.mutation != mutation:
        raise ValueError("only one mutation may be active at a time")
    return replace(base, mutation=mutation)


# --- program generation -----------------------------------------------------

DERIVE_OPS = frozenset(
    ("csetbounds", "csetboundsexact", "csetaddr", "cincaddr", "candperm", "cseal", "cunseal")
)

DEFAULT_WEIGHTS = {
    "cap": 6,
    "alu": 4,
    "load": 2,
    "store": 2,
    "branch": 1,
    "jump": 1,
    "csr": 1,
    "query": 1,
    "trapper": 1,
    "ack": 1,
    "wfi": 0,
    "illegal": 0,
}

_BOUNDARY_IMMS = (0, 4, 8, 0x18, 0x40, 0x1F0, 0x200, 0x7F8, -4, -8)
_MISALIGNED_IMMS = (1, 2, 3, 5, 6, 0x41, 0x42, 0x46)
_ALU_NAMES = ("addi", "add", "sub", "and", "or", "xor", "slt", "sltu", "sll", "srl", "slli", "srli", "srai")
_LOAD_NAMES = ("lw", "lw", "lh", "lb", "lhu", "lbu")
_STORE_NAMES = ("sw", "sw", "sh", "sb")
_BRANCH_NAMES = ("beq", "bne", "blt", "bge", "bltu", "bgeu")
_QUERY_NAMES = ("cgettag", "cgetbase", "cgettop", "cgetlen", "cgetperm", "cgettype")
_ILLEGAL_WORDS = (0x00007003, 0x00507083, 0xFFFFFFFF, 0x00000000)

_DATA_REGS = tuple(range(3, 10))
_DERIVE_REGS = tuple(range(10, 16))


def _gen_cap(rng: random.Random, cap_regs: list[int]) -> Instr:
    op = rng.choice(
        ("csetbounds", "csetbounds", "csetbounds", "csetboundsexact", "csetaddr", "csetaddr", "cincaddr", "cincaddr", "candperm", "cseal", "cunseal")
    )
    rd = rng.choice(_DERIVE_REGS)
    rs1 = rng.choice(cap_regs)
    rs2 = 2 if op in ("cseal", "cunseal") else rng.choice(_DATA_REGS)
    if rd not in cap_regs:
        cap_regs.append(rd)
        if len(cap_regs) > 9:
            del cap_regs[2]
    return Instr(op, rd=rd, rs1=rs1, rs2=rs2)


def gen_program(seed: int, length: int, weights: Optional[dict] = None) -> list[int]:
    """Deterministic biased instruction stream: heavy on capability
    derivation, boundary addresses, misaligned accesses, faulting shapes,
    and acknowledge stores, as the weights dictate."""
    rng = random.Random(seed)
    w = dict(DEFAULT_WEIGHTS)
    if weights:
        w.update(weights)
    classes = [c for c in sorted(w) if w[c] > 0]
    total = sum(w[c] for c in classes)
    cap_regs = [1, 2]
    out: list[Union[Instr, int]] = []

    def addr_imm(align: int) -> int:
        if rng.random() < 0.25:
            return rng.choice(_MISALIGNED_IMMS)
        imm = rng.choice(_BOUNDARY_IMMS)
        return imm - imm % align if imm >= 0 else imm

    while len(out) < length:
        roll = rng.randrange(total)
        for cls in classes:
            roll -= w[cls]
            if roll < 0:
                break
        if cls == "alu":
            name = rng.choice(_ALU_NAMES)
            rd = rng.choice(_DATA_REGS)
            if name == "addi":
                out.append(Instr(name, rd=rd, rs1=rng.choice((0,) + _DATA_REGS), imm=rng.choice(_BOUNDARY_IMMS + (0x15, 0x20, 0x7FF))))
            elif name.endswith("i"):
                out.append(Instr(name, rd=rd, rs1=rng.choice(_DATA_REGS), imm=rng.randrange(32)))
            else:
                out.append(Instr(name, rd=rd, rs1=rng.choice(_DATA_REGS), rs2=rng.choice(_DATA_REGS)))
        elif cls == "cap":
            out.append(_gen_cap(rng, cap_regs))
        elif cls == "load":
            if rng.random() < 0.3:
                out.append(Instr("clc", rd=rng.choice(_DERIVE_REGS), rs1=rng.choice((1, 1, rng.choice(cap_regs))), imm=addr_imm(8)))
            else:
                out.append(Instr(rng.choice(_LOAD_NAMES), rd=rng.choice(_DATA_REGS), rs1=rng.choice((1, 1, 1, rng.choice(cap_regs))), imm=addr_imm(1)))
        elif cls == "store":
            if rng.random() < 0.35:
                out.append(Instr("csc", rs1=rng.choice((1, 1, rng.choice(cap_regs))), rs2=rng.choice(cap_regs), imm=addr_imm(8)))
            else:
                out.append(Instr(rng.choice(_STORE_NAMES), rs1=rng.choice((1, 1, 1, rng.choice(cap_regs))), rs2=rng.choice(_DATA_REGS), imm=addr_imm(1)))
        elif cls == "branch":
            imm = rng.choice((4, 8, 8, 12, 16, -4, -8)) if rng.random() < 0.9 else rng.choice((6, 10))
            out.append(Instr(rng.choice(_BRANCH_NAMES), rs1=rng.choice(_DATA_REGS), rs2=rng.choice(_DATA_REGS), imm=imm))
        elif cls == "jump":
            if rng.random() < 0.3:
                out.append(Instr("auipcc", rd=14, imm=0))
                out.append(Instr("cjalr", rd=15, rs1=14, imm=rng.choice((8, 12, 16))))
            else:
                out.append(Instr("cjal", rd=rng.choice((0, 0, 15)), imm=rng.choice((8, 12, 16, 20))))
        elif cls == "csr":
            pick = rng.randrange(5)
            if pick == 0:
                out.append(Instr("csrrsi", rs1=8, csr=CSR_MSTATUS))
            elif pick == 1:
                out.append(Instr("csrrci", rs1=8, csr=CSR_MSTATUS))
            elif pick == 2:
                out.append(Instr("csrrwi", rd=rng.choice((0,) + _DATA_REGS), rs1=rng.randrange(32), csr=0x342))
            elif pick == 3:
                out.append(Instr("csrrs", rd=rng.choice(_DATA_REGS), rs1=0, csr=rng.choice((CSR_MSTATUS, 0x342, 0x343))))
            else:
                out.append(Instr("cspecialrw", rd=rng.choice(_DERIVE_REGS), rs1=0, scr=SCR_MEPCC))
        elif cls == "query":
            out.append(Instr(rng.choice(_QUERY_NAMES), rd=rng.choice(_DATA_REGS), rs1=rng.choice(cap_regs)))
        elif cls == "trapper":
            pick = rng.randrange(4)
            if pick == 0:
                out.append(Instr("ecall"))
            elif pick == 1:
                out.append(Instr("ebreak"))
            elif pick == 2:
                out.append(Instr("lw", rd=rng.choice(_DATA_REGS), rs1=2, imm=0))
            else:
                out.append(Instr("csrrw", rd=rng.choice(_DATA_REGS), rs1=rng.choice(_DATA_REGS), csr=0x123))
        elif cls == "ack":
            out.append(Instr("sw", rs1=1, rs2=0, imm=IRQ_ACK_ADDR))
        elif cls == "wfi":
            out.append(Instr("wfi"))
        elif cls == "illegal":
            out.append(rng.choice(_ILLEGAL_WORDS))
    out = out[:length]

    if w.get("cap", 0) == max(w.values()):
        # hold the derivation fraction at or above 30 percent
        quota = (3 * length + 9) // 10
        derive_count = sum(1 for it in out if isinstance(it, Instr) and it.name in DERIVE_OPS)
        swappable = [i for i, it in enumerate(out) if not (isinstance(it, Instr) and it.name in DERIVE_OPS) and isinstance(it, Instr)]
        rng.shuffle(swappable)
        while derive_count < quota and swappable:
            out[swappable.pop()] = _gen_cap(rng, cap_regs)
            derive_count += 1

    words = [it if isinstance(it, int) else encode_instr(it) for it in out]
    if w.get("illegal", 0) == 0:
        for word in words:
            assert decode(word).name != "illegal", f"generated an undecodable word {word:#x}"
    return words


# --- counterexample minimization --------------------------------------------


def minimize_failure(
    program: Sequence[int],
    schedule: TimingSchedule,
    still_fails: Callable[[list[int], TimingSchedule], bool],
    max_trials: int = 160,
) -> tuple[list[int], TimingSchedule]:
    """Greedy shrink: blank instructions one at a time, trim the tail, then
    relax each schedule component, keeping every change that still fails."""
    prog = list(program)
    trials = 0
    changed = True
    while changed and trials < max_trials:
        changed = False
        for i in range(len(prog)):
            if prog[i] == NOP_WORD or trials >= max_trials:
                continue
            trial = prog.copy()
            trial[i] = NOP_WORD
            trials += 1
            if still_fails(trial, schedule):
                prog = trial
                changed = True
    while prog and prog[-1] == NOP_WORD:
        prog.pop()
    for cand in (
        replace(schedule, irq_at=()),
        replace(schedule, gnt=(1,)),
        replace(schedule, rvalid=(1,)),
        replace(schedule, wfi_wake=(1,)),
    ):
        if cand != schedule and still_fails(prog, cand):
            schedule = cand
    return prog, schedule


# --- fuzzing front end ------------------------------------------------------


def evaluate_trace(
    trace: SessionTrace,
    bounds: Optional[tuple[int, int, int]] = None,
    seed: int = 0,
) -> dict[str, Verdict]:
    verdicts = {
        "run_follower": follower_verdict(trace),
        "check_dti": dti_verdict(trace),
        "check_continuity": check_continuity(trace),
        "check_observational": check_observational(trace),
        "check_monotonicity": check_monotonicity(trace),
    }
    if bounds is not None:
        _, lv = check_liveness([trace], bounds, seed)
        verdicts["check_liveness"] = lv
    for v in verdicts.values():
        v.seed = seed
    return verdicts


@dataclass
class FuzzReport:
    seed: int
    ok: bool
    verdicts: dict[str, Verdict]
    max_gap: int
    points: int


def fuzz_one(
    seed: int,
    *,
    insns: int = 200,
    max_gnt: int = 10,
    max_rvalid: int = 10,
    wfi_bound: int = 16,
    mutation: Optional[str] = None,
    mtval_on_ebreak: str = "zero",
    weights: Optional[dict] = None,
    clear_rules: tuple = (),
    minimize: bool = True,
) -> FuzzReport:
    """One seeded run: draw a schedule and a program, run the session, and
    evaluate every checker; failures carry a shrunken counterexample."""
    rng = random.Random(seed)
    prog_seed = rng.getrandbits(32)
    stream_seed = rng.getrandbits(32)
    irq_n = rng.choice((0, 1, 1, 2))
    irq_at = tuple(sorted(rng.randrange(1, insns * 3 + 2) for _ in range(irq_n)))
    schedule = TimingSchedule.draw(
        rng,
        count=rng.randint(1, 6),
        max_gnt=max_gnt,
        max_rvalid=max_rvalid,
        wfi_bound=wfi_bound,
        irq_at=irq_at,
    )
    wts = dict(weights) if weights is not None else dict(DEFAULT_WEIGHTS)
    if irq_at and weights is None:
        wts["wfi"] = 1
    program = gen_program(prog_seed, insns, wts)
    config = BuildConfig(mtval_on_ebreak=mtval_on_ebreak)
    if mutation is not None:
        config = apply_mutation(mutation, config)
    bounds = (max_gnt, max_rvalid, wfi_bound)

    def session(p: Sequence[int], s: TimingSchedule) -> SessionTrace:
        return run_session(
            p, s, config, clear_rules, stream=ReadStream(stream_seed), seed=seed, target_points=insns
        )

    trace = session(program, schedule)
    verdicts = evaluate_trace(trace, bounds=bounds, seed=seed)
    failed = [v for v in verdicts.values() if not v.ok]
    if failed and minimize:
        def still_fails(p: list[int], s: TimingSchedule) -> bool:
            vs = evaluate_trace(session(p, s), bounds=bounds, seed=seed)
            return any(not v.ok for v in vs.values())

        mprog, msched = minimize_failure(program, schedule, still_fails)
        ce = {
            "program": [f"{word:08x}" for word in mprog],
            "schedule": {
                "gnt": list(msched.gnt),
                "rvalid": list(msched.rvalid),
                "wfi_wake": list(msched.wfi_wake),
                "irq_at": list(msched.irq_at),
            },
            "mutation": mutation,
            "mtval_on_ebreak": mtval_on_ebreak,
            "stream_seed": stream_seed,
            "insns": insns,
        }
        for v in failed:
            v.counterexample = ce
    return FuzzReport(
        seed=seed,
        ok=not failed,
        verdicts=verdicts,
        max_gap=max_gap(trace),
        points=len(trace.points),
    )


# --- directed defect workloads ----------------------------------------------


@dataclass(frozen=True)
class DirectedCase:
    program: dict[int, int]
    schedule: TimingSchedule
    stream: tuple[tuple[int, bool], ...]
    points: int


def _linear(words: Sequence[int], extra: Optional[dict[int, int]] = None) -> dict[int, int]:
    pmap = program_map(list(words))
    if extra:
        pmap.update(extra)
    return pmap


def directed_case(mutation: str) -> DirectedCase:
    """A small workload that a correct build passes and the given seeded
    defect turns into a failure of its designated checker."""
    nop = NOP_WORD
    if mutation == "M1":
        # an access touching the very top of the address space
        words = [encode_instr(Instr("lw", rd=4, rs1=1, imm=-4))] + [nop] * 6
        return DirectedCase(_linear(words), TimingSchedule(), ((0x12345678, False),), 7)
    if mutation == "M2":
        # run code high enough that the wrapped-around trap address cannot
        # be re-encoded against the live bounds
        words = [
            encode_instr(Instr("lui", rd=3, imm=0xFFF80000)),
            encode_instr(Instr("lui", rd=4, imm=0x80000)),
            encode_instr(Instr("auipcc", rd=10, imm=0)),
            encode_instr(Instr("csetaddr", rd=10, rs1=10, rs2=3)),
            encode_instr(Instr("csetbounds", rd=11, rs1=10, rs2=4)),
            encode_instr(Instr("cjalr", rd=0, rs1=11, imm=0)),
            nop,
        ]
        far = {0xFFF80000: encode_instr(Instr("cjal", rd=0, imm=0x7FFFC))}
        return DirectedCase(_linear(words, far), TimingSchedule(), (), 12)
    if mutation == "M3":
        # load a sealing-permission capability through a non-global authority
        sealed = Capability(True, 4, 0, 8, 0, 0b100111, 3)
        bits = to_bits(sealed)
        words = [
            encode_instr(Instr("addi", rd=3, imm=0b00001110)),
            encode_instr(Instr("candperm", rd=10, rs1=1, rs2=3)),
            encode_instr(Instr("clc", rd=11, rs1=10, imm=0)),
        ] + [nop] * 4
        return DirectedCase(_linear(words), TimingSchedule(), ((bits & M32, True), (bits >> 32, False)), 8)
    if mutation == "M4":
        # rebound a wide-exponent capability from below its own base
        exotic = Capability(True, 0, 0x1FF, 0x100, 24, 0b001111, 0)
        bits = to_bits(exotic)
        words = [
            encode_instr(Instr("clc", rd=10, rs1=1, imm=0)),
            encode_instr(Instr("addi", rd=3, imm=0x20)),
            encode_instr(Instr("csetbounds", rd=11, rs1=10, rs2=3)),
        ] + [nop] * 4
        return DirectedCase(_linear(words), TimingSchedule(), ((bits & M32, True), (bits >> 32, False)), 8)
    if mutation == "M5":
        # an undecodable load shape followed by a value the stray response
        # can land on
        words = [encode_instr(Instr("addi", rd=3, imm=42)), 0x00007003] + [nop] * 4
        sched = TimingSchedule(gnt=(1,), rvalid=(5,))
        return DirectedCase(_linear(words), sched, ((0xFFFF0000, False),) * 4, 8)
    if mutation == "M6":
        # move a tight low-exponent capability across a block boundary
        words = [
            encode_instr(Instr("addi", rd=3, imm=0x1F0)),
            encode_instr(Instr("csetaddr", rd=10, rs1=1, rs2=3)),
            encode_instr(Instr("addi", rd=4, imm=0x20)),
            encode_instr(Instr("csetbounds", rd=11, rs1=10, rs2=4)),
            encode_instr(Instr("addi", rd=5, imm=0x15)),
            encode_instr(Instr("cincaddr", rd=12, rs1=11, rs2=5)),
        ] + [nop] * 4
        return DirectedCase(_linear(words), TimingSchedule(), (), 11)
    raise ValueError(f"unknown mutation: {mutation!r}")


def run_directed(mutation: str, mutated: bool, seed: int = 0) -> dict[str, Verdict]:
    case = directed_case(mutation)
    config = apply_mutation(mutation) if mutated else BuildConfig()
    trace = run_session(
        case.program,
        case.schedule,
        config,
        stream=fixed_stream(case.stream),
        seed=seed,
        target_points=case.points,
    )
    return evaluate_trace(trace, bounds=(10, 10, 16), seed=seed)


def mutation_matrix(seed: int = 0, fuzz_per_mutation: int = 3, insns: int = 120) -> dict[str, dict[str, bool]]:
    """Detection table: for every seeded defect, which checkers flag it on
    its directed workload or on short fuzz runs."""
    matrix: dict[str, dict[str, bool]] = {}
    for mi, mut in enumerate(MUTATIONS):
        detected = {name: False for name in CHECKER_NAMES}
        for name, v in run_directed(mut, mutated=True, seed=seed).items():
            if not v.ok:
                detected[name] = True
        for k in range(fuzz_per_mutation):
            rep = fuzz_one(seed * 6007 + mi * 101 + k, insns=insns, mutation=mut, minimize=False)
            for name, v in rep.verdicts.items():
                if not v.ok:
                    detected[name] = True
        matrix[mut] = detected
    return matrix


def matrix_diagonal_ok(matrix: dict[str, dict[str, bool]]) -> bool:
    return all(matrix[m][DESIGNATED[m]] for m in MUTATIONS)
