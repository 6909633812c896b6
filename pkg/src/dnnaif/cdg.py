"""Toy coverage-directed generation on an abstract pipeline simulator.

The machine is a small in-order core: a dispatch buffer feeding two
three-stage arithmetic pipes (one for simple ops, one for complex ops), a
load-store unit, and a branch unit.  A 23-dimensional input vector controls
the stimulus: the instruction-type mix, dependency and stall probabilities,
and burstiness/branch/latency knobs.  Thirty-five coverage events are
defined as predicates over the per-cycle machine state; the objective
rewards raising the hit probability of events that are still rare.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .blackbox import Objective
from .errors import InvalidInput

INPUT_DIM = 23
N_EVENTS = 35
TYPE_NAMES = ("simple", "complex", "load-store", "branch", "nop")
DEFAULT_CYCLES = 1000
DEFAULT_THRESHOLD = 0.05
DEFAULT_EPSILON = 0.01
BUFFER_CAP = 6
# large enough that no plausible noise draw rewards leaving the box
INFEASIBILITY_WEIGHT = 5.0

# Input vector layout.  Block 1 (0..4): instruction-type mix, a point on the
# 5-simplex.  Block 2 (5..13): per-type dependency probabilities, the
# front-end stall probability, and per-unit stall probabilities.  Block 3
# (14..22): burstiness, branch behaviour, latency mix, pipe interleaving,
# and prefetch aggressiveness.  All of blocks 2-3 live in [0, 1].
MIX = slice(0, 5)
DEP_SIMPLE, DEP_COMPLEX, DEP_LS, DEP_BRANCH = 5, 6, 7, 8
DISPATCH_STALL = 9
STALL_SIMPLE, STALL_COMPLEX, STALL_LS, STALL_BRANCH = 10, 11, 12, 13
BURST = 14
BRANCH_TAKEN = 15
FLUSH_ON_TAKEN = 16
LONG_COMPLEX, LONG_LS, LONG_BRANCH = 17, 18, 19
ALTERNATE = 20
PREFETCH = 21
LONG_SIMPLE = 22

SIGNAL_NAMES = (
    "s1", "s2", "s3", "c1", "c2", "c3",
    "buffer", "ls_busy", "br_busy",
    "n_issued", "issued_simple", "issued_complex", "issued_ls",
    "issued_br", "issued_nop",
    "retired_s", "retired_c",
    "resolved", "taken", "flushed", "dispatch_stalled", "blocked",
)

_BOOL_SIGNALS = frozenset(
    ("s1", "s2", "s3", "c1", "c2", "c3", "retired_s", "retired_c",
     "resolved", "taken", "flushed", "dispatch_stalled", "blocked")
)


def neutral_input() -> np.ndarray:
    """Uniform type mix, every probability knob at one half."""
    return np.concatenate([np.full(5, 0.2), np.full(18, 0.5)])


def project_input(x: np.ndarray) -> np.ndarray:
    """Map an arbitrary real 23-vector onto the valid input set.

    Block 1 is clamped at zero and renormalized to the simplex (uniform
    fallback when everything clamps to zero); blocks 2-3 are clipped to
    [0, 1].
    """
    xv = np.asarray(x, dtype=float)
    if xv.shape != (INPUT_DIM,):
        raise InvalidInput(f"expected a {INPUT_DIM}-vector, got shape {xv.shape}")
    if not np.all(np.isfinite(xv)):
        raise InvalidInput("input contains non-finite entries")
    out = xv.copy()
    mix = out[MIX]
    # already-valid vectors pass through bit-identically, so the map is
    # exactly idempotent
    if np.any(mix < 0.0) or abs(float(mix.sum()) - 1.0) > 1e-9:
        mix = np.maximum(mix, 0.0)
        total = mix.sum()
        if total <= 0.0:
            mix = np.full(5, 0.2)
        else:
            mix = mix / total
        out[MIX] = mix
    out[5:] = np.clip(out[5:], 0.0, 1.0)
    return out


def _validate_input(x: np.ndarray) -> None:
    if x.shape != (INPUT_DIM,):
        raise InvalidInput(f"expected a {INPUT_DIM}-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("input contains non-finite entries")
    mix = x[MIX]
    if np.any(mix < 0.0) or abs(float(mix.sum()) - 1.0) > 1e-9:
        raise InvalidInput("type mix must be nonnegative and sum to 1")
    rest = x[5:]
    if np.any(rest < 0.0) or np.any(rest > 1.0):
        raise InvalidInput("probability knobs must lie in [0, 1]")


@dataclass(frozen=True)
class SimInput:
    """A validated simulator input vector."""

    x: np.ndarray

    def __post_init__(self):
        xv = np.asarray(self.x, dtype=float)
        _validate_input(xv)
        object.__setattr__(self, "x", xv)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "SimInput":
        """Project an unconstrained vector and wrap it."""
        return cls(project_input(x))


@dataclass
class PipelineState:
    """Per-cycle machine snapshot; pipe slots hold remaining stage cycles."""

    s1: int
    s2: int
    s3: int
    c1: int
    c2: int
    c3: int
    buffer: int
    ls_busy: int
    br_busy: int


def state_at(trace: dict, t: int) -> PipelineState:
    """Occupancy view of one recorded cycle."""
    return PipelineState(
        s1=int(trace["s1"][t]), s2=int(trace["s2"][t]), s3=int(trace["s3"][t]),
        c1=int(trace["c1"][t]), c2=int(trace["c2"][t]), c3=int(trace["c3"][t]),
        buffer=int(trace["buffer"][t]),
        ls_busy=int(trace["ls_busy"][t]), br_busy=int(trace["br_busy"][t]),
    )


def _run_machine(xv: np.ndarray, n_cycles: int, rng: np.random.Generator) -> dict:
    """Cycle loop.  Returns the per-cycle signal arrays.

    Cycle order: advance both pipes back-to-front, tick the load-store and
    branch units (branch resolution may flush the buffer), refill the
    buffer, then dispatch up to two instructions in order.  Signals are
    sampled after dispatch.
    """
    cyc = rng.random((n_cycles, 4))
    att = rng.random((n_cycles, 2, 7))

    mix = xv[0:5]
    cum0 = float(mix[0])
    cum1 = cum0 + float(mix[1])
    cum2 = cum1 + float(mix[2])
    cum3 = cum2 + float(mix[3])
    dep_s, dep_c, dep_l, dep_b = (float(xv[i]) for i in range(DEP_SIMPLE, DEP_BRANCH + 1))
    p_dstall = float(xv[DISPATCH_STALL])
    st_s, st_c, st_l, st_b = (float(xv[i]) for i in range(STALL_SIMPLE, STALL_BRANCH + 1))
    p_burst = float(xv[BURST])
    p_taken = float(xv[BRANCH_TAKEN])
    p_flush = float(xv[FLUSH_ON_TAKEN])
    lg_c = float(xv[LONG_COMPLEX])
    lg_l = float(xv[LONG_LS])
    lg_b = float(xv[LONG_BRANCH])
    p_alt = float(xv[ALTERNATE])
    p_prefetch = float(xv[PREFETCH])
    lg_s = float(xv[LONG_SIMPLE])

    s1 = s2 = s3 = 0
    c1 = c2 = c3 = 0
    ls_busy = br_busy = 0
    buffer_n = 0
    pending_taken = pending_flush = False
    last_pipe = -1

    cols = {name: [] for name in SIGNAL_NAMES}
    app = {name: cols[name].append for name in SIGNAL_NAMES}

    for t in range(n_cycles):
        retired_s = retired_c = False
        # simple pipe, back to front; a ready instruction waits on a full
        # downstream stage
        if s3 == 1:
            s3 = 0
            retired_s = True
        elif s3 > 1:
            s3 -= 1
        if s2 == 1:
            if s3 == 0:
                s3 = 1
                s2 = 0
        elif s2 > 1:
            s2 -= 1
        if s1 == 1:
            if s2 == 0:
                s2 = 1
                s1 = 0
        elif s1 > 1:
            s1 -= 1
        # complex pipe
        if c3 == 1:
            c3 = 0
            retired_c = True
        elif c3 > 1:
            c3 -= 1
        if c2 == 1:
            if c3 == 0:
                c3 = 1
                c2 = 0
        elif c2 > 1:
            c2 -= 1
        if c1 == 1:
            if c2 == 0:
                c2 = 1
                c1 = 0
        elif c1 > 1:
            c1 -= 1

        if ls_busy:
            ls_busy -= 1
        resolved = taken = flushed = False
        if br_busy:
            br_busy -= 1
            if br_busy == 0:
                resolved = True
                taken = pending_taken
                if pending_flush:
                    buffer_n = 0
                    flushed = True
                pending_taken = pending_flush = False

        refill = 1 + (cyc[t, 2] < p_prefetch) + (cyc[t, 3] < p_prefetch)
        buffer_n = min(BUFFER_CAP, buffer_n + refill)

        stalled = bool(cyc[t, 0] < p_dstall)
        blocked = False
        n_issued = 0
        i_simple = i_complex = i_ls = i_br = i_nop = 0
        if not stalled:
            attempts = 2 if cyc[t, 1] < p_burst else 1
            for a in range(attempts):
                if buffer_n == 0:
                    break
                u_alt, u_type, u_dep, u_stall, u_long, u_taken, u_flush = att[t, a]
                # the mix decides pipe-op vs unit op vs nop; interleaving
                # only modulates which pipe a pipe op targets
                if u_type < cum1:
                    if last_pipe >= 0 and u_alt < p_alt:
                        ty = 1 - last_pipe
                    else:
                        ty = 0 if u_type < cum0 else 1
                elif u_type < cum2:
                    ty = 2
                elif u_type < cum3:
                    ty = 3
                else:
                    ty = 4
                if ty == 0:
                    if s1 == 0:
                        s1 = 1 + (u_dep < dep_s) + (u_stall < st_s) + (u_long < lg_s)
                        i_simple += 1
                    else:
                        blocked = True
                        break
                elif ty == 1:
                    if c1 == 0:
                        c1 = 1 + (u_dep < dep_c) + (u_stall < st_c) + 2 * (u_long < lg_c)
                        i_complex += 1
                    else:
                        blocked = True
                        break
                elif ty == 2:
                    if ls_busy == 0:
                        ls_busy = 1 + (u_dep < dep_l) + (u_stall < st_l) + 2 * (u_long < lg_l)
                        i_ls += 1
                    else:
                        blocked = True
                        break
                elif ty == 3:
                    if br_busy == 0:
                        br_busy = 1 + (u_dep < dep_b) + (u_stall < st_b) + (u_long < lg_b)
                        pending_taken = bool(u_taken < p_taken)
                        pending_flush = pending_taken and bool(u_flush < p_flush)
                        i_br += 1
                    else:
                        blocked = True
                        break
                else:
                    i_nop += 1
                buffer_n -= 1
                n_issued += 1
                if ty <= 1:
                    last_pipe = ty

        app["s1"](s1 > 0)
        app["s2"](s2 > 0)
        app["s3"](s3 > 0)
        app["c1"](c1 > 0)
        app["c2"](c2 > 0)
        app["c3"](c3 > 0)
        app["buffer"](buffer_n)
        app["ls_busy"](ls_busy)
        app["br_busy"](br_busy)
        app["n_issued"](n_issued)
        app["issued_simple"](i_simple)
        app["issued_complex"](i_complex)
        app["issued_ls"](i_ls)
        app["issued_br"](i_br)
        app["issued_nop"](i_nop)
        app["retired_s"](retired_s)
        app["retired_c"](retired_c)
        app["resolved"](resolved)
        app["taken"](taken)
        app["flushed"](flushed)
        app["dispatch_stalled"](stalled)
        app["blocked"](blocked)

    out = {}
    for name in SIGNAL_NAMES:
        dtype = bool if name in _BOOL_SIGNALS else np.int64
        out[name] = np.array(cols[name], dtype=dtype)
    return out


# --- event manifest -------------------------------------------------------

_manifest_lock = threading.Lock()
_manifest_cache = None

_ISSUE_KEY = {
    "any": "n_issued",
    "simple": "issued_simple",
    "complex": "issued_complex",
    "load-store": "issued_ls",
    "branch": "issued_br",
    "nop": "issued_nop",
}

_SLOT_NAMES = frozenset(("s1", "s2", "s3", "c1", "c2", "c3"))


def _compile_predicate(pred: dict):
    """Build a vectorized evaluator: signals dict -> per-cycle bool array."""
    kind = pred["kind"]
    if kind == "occupied":
        slots = [s for s in pred["slots"]]
        if not slots or any(s not in _SLOT_NAMES for s in slots):
            raise InvalidInput(f"bad slots in predicate: {pred}")
        return lambda sig: np.logical_and.reduce([sig[s] for s in slots])
    if kind == "any_occupied":
        slots = [s for s in pred["slots"]]
        if not slots or any(s not in _SLOT_NAMES for s in slots):
            raise InvalidInput(f"bad slots in predicate: {pred}")
        return lambda sig: np.logical_or.reduce([sig[s] for s in slots])
    if kind == "none_occupied":
        slots = [s for s in pred["slots"]]
        if not slots or any(s not in _SLOT_NAMES for s in slots):
            raise InvalidInput(f"bad slots in predicate: {pred}")
        return lambda sig: ~np.logical_or.reduce([sig[s] for s in slots])
    if kind == "unit_busy":
        key = {"ls": "ls_busy", "br": "br_busy"}[pred["unit"]]
        lo = pred.get("min")
        hi = pred.get("max")

        def busy(sig):
            arr = sig[key]
            ok = np.ones(arr.shape, dtype=bool)
            if lo is not None:
                ok &= arr >= lo
            if hi is not None:
                ok &= arr <= hi
            return ok

        return busy
    if kind == "issued":
        key = _ISSUE_KEY[pred["type"]]
        lo = int(pred["min"])
        return lambda sig: sig[key] >= lo
    if kind == "buffer":
        lo = pred.get("min")
        hi = pred.get("max")

        def buf(sig):
            arr = sig["buffer"]
            ok = np.ones(arr.shape, dtype=bool)
            if lo is not None:
                ok &= arr >= lo
            if hi is not None:
                ok &= arr <= hi
            return ok

        return buf
    if kind == "retired":
        keys = [{"s": "retired_s", "c": "retired_c"}[p] for p in pred["pipes"]]
        return lambda sig: np.logical_and.reduce([sig[k] for k in keys])
    if kind == "flag":
        name = pred["name"]
        if name not in _BOOL_SIGNALS:
            raise InvalidInput(f"unknown flag signal: {name}")
        return lambda sig: sig[name]
    if kind == "streak":
        inner = _compile_predicate(pred["of"])
        length = int(pred["length"])
        if length < 1:
            raise InvalidInput("streak length must be >= 1")

        def streak(sig):
            base = inner(sig)
            out = base.copy()
            for k in range(1, length):
                out[k:] &= base[:-k]
            out[: length - 1] = False
            return out

        return streak
    if kind == "window":
        inner = _compile_predicate(pred["of"])
        width = int(pred["window"])
        lo = int(pred["min"])
        if width < 1 or lo < 1:
            raise InvalidInput("window and min must be >= 1")

        def window(sig):
            base = inner(sig).astype(np.int64)
            csum = np.cumsum(base)
            total = csum.copy()
            total[width:] = csum[width:] - csum[:-width]
            return total >= lo

        return window
    if kind == "all":
        inners = [_compile_predicate(p) for p in pred["of"]]
        return lambda sig: np.logical_and.reduce([f(sig) for f in inners])
    raise InvalidInput(f"unknown predicate kind: {kind}")


def load_events() -> list:
    """Parse and cache the packaged event manifest."""
    global _manifest_cache
    with _manifest_lock:
        if _manifest_cache is None:
            text = resources.files("dnnaif.data").joinpath("events.json").read_text()
            data = json.loads(text)
            events = data["events"]
            names = [e["name"] for e in events]
            if len(events) != N_EVENTS or len(set(names)) != N_EVENTS:
                raise InvalidInput("event manifest must define 35 uniquely named events")
            compiled = [
                (e["name"], e.get("tier", ""), _compile_predicate(e["predicate"]))
                for e in events
            ]
            _manifest_cache = (tuple(events), tuple(compiled))
    return list(_manifest_cache[0])


def event_names() -> list:
    return [e["name"] for e in load_events()]


def _compiled() -> tuple:
    load_events()
    return _manifest_cache[1]


def evaluate_events(signals: dict) -> np.ndarray:
    """Per-event hit counts over a recorded signal trace."""
    return np.array([int(fn(signals).sum()) for _, _, fn in _compiled()], dtype=np.int64)


def simulate(x, n_cycles: int, seed, project: bool = True, record_trace: bool = False):
    """Run the machine and count event hits.

    `seed` may be an int, a SeedSequence, or a Generator.  With
    `record_trace`, also returns the raw per-cycle signal arrays so the
    counts can be recomputed independently.
    """
    if int(n_cycles) < 1:
        raise InvalidInput(f"n_cycles must be >= 1, got {n_cycles}")
    if isinstance(x, SimInput):
        xv = x.x
    else:
        xv = np.asarray(x, dtype=float)
        if project:
            xv = project_input(xv)
        else:
            _validate_input(xv)
    rng = np.random.default_rng(seed)
    signals = _run_machine(xv, int(n_cycles), rng)
    counts = evaluate_events(signals)
    if record_trace:
        return counts, signals
    return counts


def estimate_probabilities(x, n_cycles: int, seed, project: bool = True) -> np.ndarray:
    """Per-event hit frequencies from one simulation."""
    counts = simulate(x, n_cycles, seed, project=project)
    return counts / float(n_cycles)


def weight(t, epsilon: float = DEFAULT_EPSILON):
    """Hit-probability weighting 1/(epsilon + t); decreasing in t."""
    return 1.0 / (epsilon + np.asarray(t, dtype=float))


def objective_value(p: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> float:
    """Negated weighted coverage score of a probability vector."""
    p = np.asarray(p, dtype=float)
    return -float(np.sum(weight(p, epsilon) * p))


def unhit_count(p: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> int:
    """Number of events whose hit probability is still below threshold."""
    p = np.asarray(p, dtype=float)
    return int(np.sum(p < threshold))


@dataclass
class CoverageModel:
    """Cumulative best-observed hit probabilities across tests."""

    threshold: float = DEFAULT_THRESHOLD
    best_p: np.ndarray = field(default_factory=lambda: np.zeros(N_EVENTS))

    def observe(self, p: np.ndarray) -> int:
        """Fold in one test's probabilities; returns the new unhit count."""
        self.best_p = np.maximum(self.best_p, np.asarray(p, dtype=float))
        return self.unhit()

    def unhit(self) -> int:
        return unhit_count(self.best_p, self.threshold)


def coverage_curve(p_log, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Unhit count after each test, in evaluation order.

    `p_log` holds (evaluation_index, p_vector) pairs as recorded by the
    objective; entries are sorted by index before accumulation.
    """
    model = CoverageModel(threshold=threshold)
    out = []
    for _, p in sorted(p_log, key=lambda item: item[0]):
        out.append(model.observe(p))
    return np.array(out, dtype=np.int64)


def tests_to_full_coverage(unhit_trace) -> int | None:
    """1-based index of the first test reaching zero unhit events."""
    arr = np.asarray(unhit_trace)
    hits = np.nonzero(arr == 0)[0]
    if hits.size == 0:
        return None
    return int(hits[0]) + 1


def make_cdg_objective(
    n_cycles: int = DEFAULT_CYCLES,
    seed: int = 0,
    epsilon: float = DEFAULT_EPSILON,
    p_log: list | None = None,
) -> Objective:
    """Wrap the simulator as a noisy black box.

    Each evaluation draws a fresh simulator seed keyed by (seed,
    evaluation index), so repeat queries at one point differ but the whole
    run is reproducible.  Unrepresentable coordinates are simulated at
    their projection and charged a quadratic penalty: past a clamp the
    landscape is otherwise flat, and a box-unaware search that drifts out
    on a lucky noise draw could never climb back.  Only genuine
    violations are charged (negative mix mass, total mix mass far from
    canonical scale, knobs beyond their clamps); the mix renormalization
    residual is free, because any nonnegative scaling of a mix is a
    legitimate representation of the same input.  When given, `p_log`
    receives (index, p) pairs for coverage bookkeeping.  Marked
    serial-only: the log must follow ledger order.
    """
    lock = threading.Lock()
    counter = [0]

    def infeasibility(x):
        mix = x[MIX]
        neg = float(np.sum(np.minimum(mix, 0.0) ** 2))
        scale = float(np.sum(np.maximum(mix, 0.0)))
        if scale > 1.8:
            band = (scale - 1.8) ** 2
        elif scale < 0.6:
            band = (0.6 - scale) ** 2
        else:
            band = 0.0
        knobs = x[5:]
        clip = float(np.sum((knobs - np.clip(knobs, 0.0, 1.0)) ** 2))
        return neg + band + clip

    def indexed(x, index):
        x = np.asarray(x, dtype=float)
        xp = project_input(x)
        p = estimate_probabilities(xp, n_cycles, np.random.SeedSequence([int(seed), int(index)]))
        if p_log is not None:
            with lock:
                p_log.append((int(index), p))
        return objective_value(p, epsilon) + INFEASIBILITY_WEIGHT * infeasibility(x)

    def plain(x):
        with lock:
            index = counter[0]
            counter[0] += 1
        return indexed(x, index)

    return Objective(
        dimension=INPUT_DIM,
        evaluator=plain,
        descriptor=f"cdg-toy(n_cycles={n_cycles}, seed={seed})",
        indexed_evaluator=indexed,
        serial_only=True,
    )


def dirichlet_sample(alpha, rng: np.random.Generator) -> np.ndarray:
    """Random valid input: Dirichlet type mix, uniform knobs."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (5,) or np.any(alpha <= 0):
        raise InvalidInput("alpha must be a positive 5-vector")
    x = np.empty(INPUT_DIM)
    x[MIX] = rng.dirichlet(alpha)
    x[5:] = rng.random(INPUT_DIM - 5)
    return x


def dirichlet_baseline(
    budget: int,
    alpha=None,
    n_cycles: int = DEFAULT_CYCLES,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
) -> np.ndarray:
    """Random-sampling coverage baseline: unhit count after each test."""
    if budget < 0:
        raise InvalidInput(f"budget must be >= 0, got {budget}")
    if alpha is None:
        alpha = np.ones(5)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    model = CoverageModel(threshold=threshold)
    out = []
    for t in range(int(budget)):
        x = dirichlet_sample(alpha, rng)
        p = estimate_probabilities(x, n_cycles, np.random.SeedSequence([int(seed), 13, t]))
        out.append(model.observe(p))
    return np.array(out, dtype=np.int64)
