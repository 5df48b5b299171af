"""Annealed state preparation on top of the walk operator.

Pieces: phase gates about a marked state (exact, and QPE-synthesized from a
walk operator), pi/3 amplitude amplification, nondestructive overlap
estimation, and the temperature-schedule search with staged state generation.
All quantum measurements are simulated by sampling from exactly computed
outcome distributions; walk-operator applications are charged to a ledger.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .markov import ProposalKernel, TargetModel, build_transition_matrix
from .qsim import RegisterLayout, build_walk_operator, encode_distribution

OMEGA_PI3 = np.exp(1j * np.pi / 3)
KEEP_THRESHOLD = np.exp(-2.0)          # schedule keeps overlaps estimated >= e^-2
OVERLAP_GUARANTEE = 9.0 / (10.0 * np.e**2)
NAE_ACCURACY = 1.0 / (10.0 * np.e**2)


class QueryLedger:
    """Monotone counter of walk-operator (equivalently oracle-layer) applications."""

    def __init__(self):
        self.total = 0
        self.stages: list[dict] = []

    def charge(self, n: int, tag: str = "") -> None:
        if n < 0:
            raise ValueError("charge must be nonnegative")
        self.total += int(n)
        self.stages.append({"tag": tag, "charge": int(n)})

    def stage_total(self, tag: str) -> int:
        return sum(s["charge"] for s in self.stages if s["tag"] == tag)


def qpe_ancilla_count(phase_gap: float, delta: float) -> int:
    """Ancillas so the estimator resolves the phase gap with failure weight delta."""
    t_res = int(np.ceil(np.log2(4.0 * 2.0 * np.pi / phase_gap)))
    t_pad = int(np.ceil(np.log2(2.0 + 1.0 / (2.0 * delta))))
    return t_res + t_pad


def phase_gate_cost(signed_gap: float, delta: float) -> int:
    """Walk-operator applications per synthesized phase gate (QPE + uncompute).

    The phase gap of the walk operator is arccos of the second-largest
    (signed) transition eigenvalue, so the signed gap sets the resolution.
    """
    t = qpe_ancilla_count(float(np.arccos(1.0 - signed_gap)), delta)
    return 2 * (2**t - 1)


class ExactPhaseGate:
    """omega on the marked state, identity on its complement."""

    def __init__(self, target: np.ndarray, omega: complex,
                 cost: int = 0, ledger: QueryLedger | None = None, tag: str = ""):
        target = np.asarray(target, complex)
        if abs(np.linalg.norm(target) - 1.0) > 1e-10:
            raise ValueError("target state must be normalized")
        self.target = target
        self.omega = complex(omega)
        self.cost = int(cost)
        self.ledger = ledger
        self.tag = tag

    def _charge(self):
        if self.ledger is not None:
            self.ledger.charge(self.cost, self.tag)

    def apply(self, v: np.ndarray) -> np.ndarray:
        self._charge()
        return v + (self.omega - 1.0) * np.vdot(self.target, v) * self.target

    def apply_inverse(self, v: np.ndarray) -> np.ndarray:
        self._charge()
        return v + (np.conj(self.omega) - 1.0) * np.vdot(self.target, v) * self.target

    def matrix(self) -> np.ndarray:
        n = len(self.target)
        return np.eye(n, dtype=complex) + (self.omega - 1.0) * np.outer(
            self.target, self.target.conj())


def _qpe_estimate_amplitudes(phase: float, t: int) -> np.ndarray:
    """Outcome amplitudes of t-ancilla phase estimation at a fixed eigenphase."""
    N = 2**t
    ell = np.arange(N)
    return np.fft.fft(np.exp(1j * phase * ell)) / N


class QpePhaseGate:
    """Phase gate about the walk operator's phase-0 eigenstate, via QPE.

    The gate runs phase estimation on the walk operator, kicks the phase
    omega onto outcomes below half the phase gap, and uncomputes.  The
    ancilla register is projected back onto |0> after each application
    (leaked norm is tracked, bounded by the reported per-eigenvector
    residual).  The surviving action is diagonal in the walk operator's
    eigenbasis, so it is precomputed as one dense matrix.
    """

    def __init__(self, walk_op: np.ndarray, omega: complex, delta: float,
                 signed_gap: float, ledger: QueryLedger | None = None, tag: str = ""):
        if not 0 < delta < 1:
            raise ValueError("delta must be in (0, 1)")
        if signed_gap <= 0:
            raise ValueError("need a positive signed spectral gap")
        phase_gap = float(np.arccos(1.0 - signed_gap))
        self.t = qpe_ancilla_count(phase_gap, delta)
        self.omega = complex(omega)
        self.delta = float(delta)
        self.ledger = ledger
        self.tag = tag
        self.cost = 2 * (2**self.t - 1)

        T, Z = scipy.linalg.schur(np.asarray(walk_op, complex), output="complex")
        lam = np.diag(T)
        phases = np.angle(lam)
        threshold = phase_gap / 2.0

        N = 2**self.t
        k = np.arange(N)
        kick_phase = 2.0 * np.pi * np.minimum(k, N - k) / N
        kick = np.where(kick_phase <= threshold, self.omega, 1.0)

        coeff = np.empty(len(lam), dtype=complex)
        err = np.empty(len(lam))
        cache: dict[float, tuple[complex, float]] = {}
        for j, ph in enumerate(phases):
            key = round(float(ph), 14)
            if key not in cache:
                alpha = _qpe_estimate_amplitudes(ph, self.t)
                survived = np.vdot(alpha, kick * alpha)   # <0| W' D W |0>
                ideal = self.omega if abs(ph) < 1e-12 else 1.0
                e2 = max(0.0, 2.0 - 2.0 * np.real(np.conj(ideal) * survived))
                cache[key] = (complex(survived), float(np.sqrt(e2)))
            coeff[j], err[j] = cache[key]
        self.eigenphases = phases
        self.residuals = err
        self._op = (Z * coeff) @ Z.conj().T
        self._basis = Z

    def _charge(self):
        if self.ledger is not None:
            self.ledger.charge(self.cost, self.tag)

    def apply(self, v: np.ndarray) -> np.ndarray:
        self._charge()
        return self._op @ v

    def apply_inverse(self, v: np.ndarray) -> np.ndarray:
        self._charge()
        return self._op.conj().T @ v

    def error_bound(self, v: np.ndarray) -> float:
        """||gate (v x |0>) - (ideal v) x |0>|| for this input."""
        c = self._basis.conj().T @ v
        return float(np.sqrt(np.sum(np.abs(c) ** 2 * self.residuals**2)))


def pi3_amplify(R1, R2, m: int, start: np.ndarray) -> np.ndarray:
    """Apply the depth-m recursive amplifier U_m to the start state.

    U_0 = I and U_{m+1} = U_m R1 U_m^-1 R2 U_m, with both gates carrying the
    phase e^{i pi/3}.  With exact gates and starting overlap p onto R2's
    target, the output overlap is at least 1 - (1-p)^(3^m).
    """
    if m < 0:
        raise ValueError("recursion depth must be nonnegative")

    def forward(depth, v):
        if depth == 0:
            return v
        v = forward(depth - 1, v)
        v = R2.apply(v)
        v = backward(depth - 1, v)
        v = R1.apply(v)
        return forward(depth - 1, v)

    def backward(depth, v):
        if depth == 0:
            return v
        v = backward(depth - 1, v)
        v = R1.apply_inverse(v)
        v = forward(depth - 1, v)
        v = R2.apply_inverse(v)
        return backward(depth - 1, v)

    return forward(m, start)


def pi3_overlap_bound(p: float, m: int) -> float:
    return 1.0 - (1.0 - p) ** (3**m)


def nae_overlap(state: np.ndarray, target: np.ndarray, eps: float, delta: float,
                seed: int, ledger: QueryLedger | None = None,
                reflection_cost: int = 1, tag: str = "nae"):
    """Estimate |<target|state>|^2 to accuracy eps, restoring the state.

    Simulates phase estimation on the two-reflection rotation: the input
    splits evenly between the rotation's two eigenvectors with eigenphases
    +-2 theta, cos(theta) = |<target|state>|.  Outcomes are sampled from the
    exact estimator distribution and aggregated by median over
    ceil(12 ln(1/delta)) runs.  Returns (estimate, flag, restored state).
    """
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ValueError("eps and delta must be in (0, 1)")
    rng = np.random.default_rng(seed)
    overlap = abs(np.vdot(target / np.linalg.norm(target),
                          state / np.linalg.norm(state)))
    theta = float(np.arccos(np.clip(overlap, 0.0, 1.0)))

    t = int(np.ceil(np.log2(2.0 * np.pi / eps))) + 3
    N = 2**t
    runs = int(np.ceil(12.0 * np.log(1.0 / delta)))
    dist_plus = np.abs(_qpe_estimate_amplitudes(2.0 * theta, t)) ** 2
    dist_minus = np.abs(_qpe_estimate_amplitudes(-2.0 * theta, t)) ** 2
    dist_plus /= dist_plus.sum()
    dist_minus /= dist_minus.sum()

    estimates = np.empty(runs)
    for r in range(runs):
        dist = dist_plus if rng.random() < 0.5 else dist_minus
        k = int(rng.choice(N, p=dist))
        phi = 2.0 * np.pi * min(k, N - k) / N
        estimates[r] = np.cos(phi / 2.0) ** 2
    estimate = float(np.median(estimates))
    agree = int(np.sum(np.abs(estimates - estimate) <= eps))
    flag = 1 if 2 * agree >= runs else 0

    if ledger is not None:
        # each Grover step is two reflections; QPE uses 2^t - 1 steps per run
        ledger.charge(runs * (N - 1) * 2 * reflection_cost, tag)
    return estimate, flag, state


@dataclass
class AnnealingSchedule:
    """Temperature ladder with its recorded overlap estimates and cost."""

    betas: tuple[float, ...]
    overlaps: tuple[float, ...]
    success: bool
    l_max: int
    mode: str
    seed: int
    queries: int

    def __post_init__(self):
        if self.success:
            if list(self.betas) != sorted(set(self.betas)):
                raise ValueError("temperatures must be strictly increasing")
            if self.betas[0] != 0.0 or self.betas[-1] != 1.0:
                raise ValueError("schedule must run from beta=0 to beta=1")
            if len(self.betas) - 1 > self.l_max:
                raise ValueError("schedule longer than l_max")
            if any(o < OVERLAP_GUARANTEE for o in self.overlaps):
                raise ValueError("recorded overlap below the success threshold")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({
                "betas": list(self.betas), "overlaps": list(self.overlaps),
                "success": self.success, "l_max": self.l_max,
                "mode": self.mode, "seed": self.seed, "queries": self.queries,
            }, fh, indent=2)


def stage_count_limit(mean_nll: float) -> int:
    """ceil(sqrt(Lbar log Lbar)); at least 1 stage for small Lbar."""
    if mean_nll <= 0:
        return 1
    return max(1, int(np.ceil(np.sqrt(mean_nll * max(np.log(mean_nll), 1.0)))))


def _exact_overlap(model: TargetModel, b1: float, b2: float) -> float:
    a1 = np.sqrt(model.with_beta(b1).distribution())
    a2 = np.sqrt(model.with_beta(b2).distribution())
    return float(np.dot(a1, a2) ** 2)


def qsa_schedule(model: TargetModel, kernel: ProposalKernel, delta_min: float,
                 eta: float, seed: int, grid_step: float | None = None,
                 ledger: QueryLedger | None = None) -> AnnealingSchedule:
    """Search the temperature ladder by overlap-thresholded binary search.

    Each candidate overlap |<P_beta|P_beta'>|^2 is estimated nondestructively
    to accuracy 1/(10 e^2) with per-call failure budget eta/(l_max L_max);
    a step is kept when the estimate is at least e^-2, so true kept overlaps
    are at least 9/(10 e^2).  Failure is reported as success=False.
    """
    L = model.neg_log_lik
    mean_nll = float(np.dot(model.prior, L))
    l_max = stage_count_limit(mean_nll)
    if mean_nll == 0:
        return AnnealingSchedule(betas=(0.0, 1.0), overlaps=(1.0,), success=True,
                                 l_max=l_max, mode="exact", seed=seed,
                                 queries=0 if ledger is None else 0)
    L_max = float(L.max())
    precision = 1.0 / L_max if grid_step is None else float(grid_step)
    precision = min(precision, 0.5)
    delta_nae = min(0.49, eta / (l_max * max(L_max, 1.0)))
    if ledger is None:
        ledger = QueryLedger()
    refl_cost = phase_gate_cost(delta_min, delta_nae)
    rng = np.random.default_rng(seed)

    def estimate(b1, b2):
        cur = encode_vec(b1)
        tgt = encode_vec(b2)
        est, _, _ = nae_overlap(cur, tgt, NAE_ACCURACY, delta_nae,
                                seed=int(rng.integers(2**63)), ledger=ledger,
                                reflection_cost=refl_cost, tag="schedule")
        return est

    def encode_vec(b):
        return np.sqrt(model.with_beta(b).distribution()).astype(complex)

    start_queries = ledger.total
    betas = [0.0]
    overlaps: list[float] = []
    while betas[-1] < 1.0:
        if len(betas) - 1 >= l_max:
            return AnnealingSchedule(betas=tuple(betas), overlaps=tuple(overlaps),
                                     success=False, l_max=l_max, mode="exact",
                                     seed=seed, queries=ledger.total - start_queries)
        b = betas[-1]
        est_full = estimate(b, 1.0)
        if est_full >= KEEP_THRESHOLD:
            betas.append(1.0)
            overlaps.append(est_full)
            continue
        lo, hi = b, 1.0
        est_lo = None
        while hi - lo > precision:
            mid = 0.5 * (lo + hi)
            est_mid = estimate(b, mid)
            if est_mid >= KEEP_THRESHOLD:
                lo, est_lo = mid, est_mid
            else:
                hi = mid
        if est_lo is None:
            # even one precision step loses too much overlap
            return AnnealingSchedule(betas=tuple(betas), overlaps=tuple(overlaps),
                                     success=False, l_max=l_max, mode="exact",
                                     seed=seed, queries=ledger.total - start_queries)
        betas.append(lo)
        overlaps.append(est_lo)
    return AnnealingSchedule(betas=tuple(betas), overlaps=tuple(overlaps),
                             success=True, l_max=l_max, mode="exact", seed=seed,
                             queries=ledger.total - start_queries)


def amplification_depth(p: float, stage_eps: float) -> int:
    """Smallest m with (1-p)^(3^m) <= stage_eps^2."""
    m = 0
    while (1.0 - p) ** (3**m) > stage_eps**2 and m < 12:
        m += 1
    return m


def qsa_generate(schedule: AnnealingSchedule, model: TargetModel,
                 kernel: ProposalKernel, eps: float, mode: str = "exact",
                 gate_delta: float = 0.01,
                 ledger: QueryLedger | None = None) -> np.ndarray:
    """Walk the schedule with pi/3 amplification, stage accuracy eps / #stages.

    exact mode uses oracle phase gates about the known intermediate states
    (charged at the synthesized-gate rate); qpe mode synthesizes each gate
    from the walk operator of the chain at that temperature.
    """
    if not schedule.success:
        raise ValueError("cannot generate from a failed schedule")
    layout = RegisterLayout.for_kernel(kernel)
    n_stages = len(schedule.betas) - 1
    state = encode_distribution(model.with_beta(0.0).distribution(), layout)
    if n_stages == 0:
        return state
    stage_eps = eps / n_stages

    for i in range(n_stages):
        b1, b2 = schedule.betas[i], schedule.betas[i + 1]
        p = max(OVERLAP_GUARANTEE,
                min(1.0, schedule.overlaps[i] - NAE_ACCURACY))
        m = amplification_depth(p, stage_eps)
        t1 = encode_distribution(model.with_beta(b1).distribution(), layout)
        t2 = encode_distribution(model.with_beta(b2).distribution(), layout)
        if mode == "exact":
            chain2 = build_transition_matrix(model.with_beta(b2), kernel)
            cost = phase_gate_cost(chain2.signed_gap, gate_delta)
            R1 = ExactPhaseGate(t1, OMEGA_PI3, cost=cost, ledger=ledger, tag="generate")
            R2 = ExactPhaseGate(t2, OMEGA_PI3, cost=cost, ledger=ledger, tag="generate")
        elif mode == "qpe":
            chain1 = build_transition_matrix(model.with_beta(b1), kernel)
            chain2 = build_transition_matrix(model.with_beta(b2), kernel)
            U1 = build_walk_operator(model.with_beta(b1), kernel, layout)
            U2 = build_walk_operator(model.with_beta(b2), kernel, layout)
            R1 = QpePhaseGate(U1, OMEGA_PI3, gate_delta, chain1.signed_gap,
                              ledger=ledger, tag="generate")
            R2 = QpePhaseGate(U2, OMEGA_PI3, gate_delta, chain2.signed_gap,
                              ledger=ledger, tag="generate")
        else:
            raise ValueError(f"unknown gate mode {mode!r}")
        state = pi3_amplify(R1, R2, m, state)
        norm = np.linalg.norm(state)
        if norm > 0:
            state = state / norm
    return state
