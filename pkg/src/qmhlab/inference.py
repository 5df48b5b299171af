"""Credible-interval estimation over prepared posteriors.

Tail-CDF estimation (exact and amplitude-estimation-sampled), the noisy
binary search for equal-tailed credible bounds, the classical percentile
baseline, and a synthetic frequency-domain signal-recovery instance whose
negative log-likelihood is an average of per-mode terms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import annealing
from .markov import ChainSample, StateSpace, TargetModel
from .qmci import LikelihoodOracle


def cdf_exact(P, space: StateSpace, axis: int, a: float) -> float:
    """Tail mass Phi_P(a) = P({x : x_axis > a}) by enumeration."""
    P = np.asarray(P, float)
    coords = space.points[:, axis]
    return float(P[coords > a].sum())


@dataclass(frozen=True)
class PosteriorHandle:
    """A prepared posterior: distribution read off the pipeline state.

    ``prep_queries`` is the measured oracle cost of one preparation; CDF
    estimation multiplies it by the amplitude-estimation repetition count.
    """

    distribution: np.ndarray
    space: StateSpace
    prep_queries: int
    tv_budget: float = 0.0


def cdf_qmci(handle: PosteriorHandle, axis: int, a: float, eps: float,
             delta: float, seed: int) -> tuple[float, int]:
    """Estimate the tail CDF to eps via sampled amplitude estimation.

    The estimation budget is split: eps/3 for amplitude estimation on the
    prepared state, eps/3 for the preparation's TV error; the realized error
    against the ideal posterior is then within 2 eps / 3.
    """
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ValueError("eps and delta must be in (0, 1)")
    rng = np.random.default_rng(seed)
    amp = cdf_exact(handle.distribution, handle.space, axis, a)
    theta = float(np.arcsin(np.sqrt(np.clip(amp, 0.0, 1.0))))
    t = int(np.ceil(np.log2(2.0 * np.pi / (eps / 3.0)))) + 3
    N = 2**t
    runs = int(np.ceil(12.0 * np.log(1.0 / delta)))
    dist_p = np.abs(annealing._qpe_estimate_amplitudes(2.0 * theta, t)) ** 2
    dist_m = np.abs(annealing._qpe_estimate_amplitudes(-2.0 * theta, t)) ** 2
    dist_p /= dist_p.sum()
    dist_m /= dist_m.sum()
    estimates = np.empty(runs)
    for r in range(runs):
        dist = dist_p if rng.random() < 0.5 else dist_m
        k = int(rng.choice(N, p=dist))
        estimates[r] = np.sin(np.pi * min(k, N - k) / N) ** 2
    estimate = float(np.median(estimates))
    # two preparations per Grover step (reflection about the prepared state)
    queries = runs * (N - 1) * 2 * handle.prep_queries
    return estimate, queries


@dataclass(frozen=True)
class CredibleQuery:
    axis: int
    alpha: float
    eps: float
    delta: float
    side: str = "upper"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not 0 < self.eps < self.alpha / 2.0:
            raise ValueError("need 0 < eps < alpha/2")
        if self.side not in ("upper", "lower"):
            raise ValueError("side must be 'upper' or 'lower'")


@dataclass(frozen=True)
class CredibleResult:
    value: float | None
    found: bool
    iterations: int
    queries: int

    @property
    def no_output(self) -> bool:
        return not self.found


def credible_bound_search(query: CredibleQuery, handle: PosteriorHandle,
                          seed: int) -> CredibleResult:
    """Noisy binary search for a point whose tail CDF is near alpha/2.

    Searches the sorted axis grid; a candidate is accepted when its CDF
    estimate is within 2 eps / 3 of the target tail mass (alpha/2 for the
    upper bound, 1 - alpha/2 for the lower).  Each estimate gets failure
    budget delta/(n_max + 1) with n_max = ceil(log2(n_i - 2)) + 1; exceeding
    n_max iterations or exhausting the bracket ends with no output.
    """
    grid = np.asarray(handle.space.axes[query.axis], float)
    n_i = len(grid)
    if n_i < 3:
        raise ValueError("axis grid too small to search")
    target = query.alpha / 2.0 if query.side == "upper" else 1.0 - query.alpha / 2.0
    n_max = int(np.ceil(np.log2(n_i - 2))) + 1
    delta_call = query.delta / (n_max + 1)
    rng = np.random.default_rng(seed)
    window = 2.0 * query.eps / 3.0

    queries = 0
    j_lb, j_ub = 0, n_i - 1
    iterations = 0
    while True:
        j_mid = int(np.ceil((j_ub + j_lb) / 2.0))
        est, q = cdf_qmci(handle, query.axis, float(grid[j_mid]), query.eps,
                          delta_call, seed=int(rng.integers(2**63)))
        queries += q
        iterations += 1
        if abs(est - target) <= window:
            return CredibleResult(float(grid[j_mid]), True, iterations, queries)
        if est > target:
            j_lb = j_mid        # tail too heavy: move right
        else:
            j_ub = j_mid
        if j_ub - j_lb <= 1 or iterations >= n_max:
            return CredibleResult(None, False, iterations, queries)


def classical_credible(sample: ChainSample, space: StateSpace, axis: int,
                       alpha: float) -> tuple[float, float]:
    """Empirical equal-tailed interval from post-burn-in chain samples."""
    vals = space.points[sample.kept, axis]
    lower = float(np.percentile(vals, 100.0 * alpha / 2.0))
    upper = float(np.percentile(vals, 100.0 * (1.0 - alpha / 2.0)))
    return lower, upper


@dataclass
class GwInstance:
    """Synthetic frequency-domain signal-recovery likelihood.

    The model family is a damped sinusoid parameterized by (frequency,
    log-amplitude) on a small grid; data is the injected template plus
    white Gaussian noise.  L(x) = L_sum(x) + ell0(x) + C with L_sum the mean
    of M per-mode terms; sigma is the measured per-state term spread.
    """

    space: StateSpace
    oracle: LikelihoodOracle
    model: TargetModel
    data_ft: np.ndarray
    psd: np.ndarray
    M: int
    rho: float
    gamma: float
    sigma: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "re_data", "im_data", "psd"])
            for k in range(len(self.data_ft)):
                w.writerow([k, self.data_ft[k].real, self.data_ft[k].imag,
                            self.psd[k]])


def _waveform(freq: float, log_amp: float, M: int, tau: float) -> np.ndarray:
    t = np.arange(M, dtype=float)
    return np.exp(log_amp) * np.exp(-t / tau) * np.sin(2.0 * np.pi * freq * t)


def synth_gw_instance(true_freq: float, true_log_amp: float, M: int, rho: float,
                      seed: int, grid_shape=(4, 4), freq_span=0.02,
                      log_amp_span=0.6, noise_floor: float = 1.0,
                      sigma_margin: float = 1.05,
                      noiseless: bool = False) -> GwInstance:
    """Build the synthetic instance at series length M and signal strength rho.

    The injected template is rescaled so its matched-filter norm (h*|h*)
    equals rho^2; the per-state term spread then scales as rho sqrt(M).
    """
    if M % 2 != 0:
        raise ValueError("M must be even")
    if rho <= 0:
        raise ValueError("rho must be positive")
    rng = np.random.default_rng(seed)
    tau = 64.0                          # fixed damping time, independent of M
    n_modes = M // 2 - 1
    modes = slice(1, M // 2)
    psd = np.full(M // 2 + 1, noise_floor)

    def ft(series):
        return np.fft.rfft(series)

    def inner(af, bf):
        return (4.0 / M) * float(np.sum(
            (af[modes].conj() * bf[modes]).real / psd[modes]))

    h_true = _waveform(true_freq, true_log_amp, M, tau)
    norm = np.sqrt(inner(ft(h_true), ft(h_true)))
    scale = rho / norm
    h_true = h_true * scale

    # white noise whose per-mode FT variance is M * noise_floor / 2
    noise = np.zeros(M) if noiseless else rng.normal(0.0, np.sqrt(noise_floor / 2.0), size=M)
    s = h_true + noise
    s_ft = ft(s)

    freqs = np.linspace(true_freq - freq_span, true_freq + freq_span, grid_shape[0])
    log_amps = np.linspace(true_log_amp - log_amp_span, true_log_amp + log_amp_span,
                           grid_shape[1])
    space = StateSpace(shape=tuple(grid_shape), axes=(freqs, log_amps))
    n = space.size

    table = np.zeros((M, n))
    ell0 = np.zeros(n)
    gamma = 0.0
    for x in range(n):
        i, j = space.multi_index(x)
        hf = ft(_waveform(freqs[i], log_amps[j], M, tau) * scale)
        # mean over all M slots of the per-mode terms equals -2 (h|s)
        terms = -8.0 * (hf[modes].conj() * s_ft[modes]).real / psd[modes]
        table[modes, x] = terms
        ell0[x] = inner(hf, hf)
        gamma = max(gamma, float(np.abs(hf[modes]).max()) / np.sqrt(noise_floor))

    L_unshifted = table.mean(axis=0) + ell0
    const = -float(L_unshifted.min())
    sigma = float(table.std(axis=0, ddof=0).max()) * sigma_margin
    oracle = LikelihoodOracle(table, sigma, ell0=ell0, const=const)

    prior = np.full(n, 1.0 / n)
    model = TargetModel(space=space, prior=prior, neg_log_lik=oracle.full_nll())
    return GwInstance(space=space, oracle=oracle, model=model, data_ft=s_ft,
                      psd=psd, M=M, rho=rho, gamma=gamma, sigma=sigma)


def gw_identity_error(inst: GwInstance) -> float:
    """Max deviation of L from L_sum + ell0 + C, by direct re-evaluation."""
    o = inst.oracle
    direct = o.table.mean(axis=0) + o.ell0 + o.const
    return float(np.max(np.abs(inst.model.neg_log_lik - direct)))


def sigma_scaling(M_values, rho: float, seed: int, **kwargs) -> dict:
    """Measured sigma at each M with the fitted log-log slope."""
    sigmas = []
    for M in M_values:
        inst = synth_gw_instance(0.1, 0.0, int(M), rho, seed, **kwargs)
        sigmas.append(inst.sigma)
    slope = float(np.polyfit(np.log(np.asarray(M_values, float)),
                             np.log(sigmas), 1)[0])
    return {"M": list(M_values), "sigma": sigmas, "slope": slope}


def write_report(payload: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
