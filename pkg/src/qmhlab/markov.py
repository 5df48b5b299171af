"""Finite-state-space Metropolis-Hastings machinery.

State spaces are regular periodic grids in R^d, so moves and proposal
probabilities are translation invariant and the move set is closed under
negation.  Everything downstream (walk operators, perturbation checks,
annealing) builds on the exact transition matrices computed here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

PROB_ATOL = 1e-10


class ReducibleChainError(ValueError):
    """Raised when a transition matrix does not have a unique stationary distribution."""


class NonReversibleChainError(ValueError):
    """Raised when an operation requires detailed balance and the chain lacks it."""


@dataclass(frozen=True)
class StateSpace:
    """Periodic (torus) grid of points in R^d.

    Points are indexed 0..size-1 in row-major order over the grid shape.
    ``axes[i]`` holds the sorted per-axis values.
    """

    shape: tuple[int, ...]
    axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.shape) != len(self.axes):
            raise ValueError("shape/axes dimension mismatch")
        for n, ax in zip(self.shape, self.axes):
            if len(ax) != n:
                raise ValueError("axis length does not match grid shape")
            if n < 1:
                raise ValueError("empty axis")
            if len(np.unique(ax)) != n:
                raise ValueError("axis values must be distinct")

    @classmethod
    def regular_grid(cls, shape, low=None, high=None):
        """Evenly spaced grid; axis i spans [low[i], high[i]] with shape[i] points."""
        shape = tuple(int(n) for n in shape)
        d = len(shape)
        low = np.zeros(d) if low is None else np.asarray(low, float)
        high = np.array([n - 1 for n in shape], float) if high is None else np.asarray(high, float)
        axes = tuple(np.linspace(low[i], high[i], shape[i]) for i in range(d))
        return cls(shape=shape, axes=axes)

    @property
    def dimension(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def points(self) -> np.ndarray:
        """(size, d) array of grid points, row-major index order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def multi_index(self, idx: int) -> tuple[int, ...]:
        return tuple(int(k) for k in np.unravel_index(idx, self.shape))

    def flat_index(self, multi) -> int:
        return int(np.ravel_multi_index([m % n for m, n in zip(multi, self.shape)], self.shape))

    def shift(self, idx: int, offset) -> int:
        """Index of the point reached from idx by the (torus) grid offset."""
        mi = self.multi_index(idx)
        return self.flat_index(tuple(m + o for m, o in zip(mi, offset)))

    def axis_values(self, i: int) -> np.ndarray:
        return self.axes[i]


@dataclass(frozen=True)
class TargetModel:
    """Target P ~ prior * exp(-beta * L) over a state space."""

    space: StateSpace
    prior: np.ndarray
    neg_log_lik: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        prior = np.asarray(self.prior, float)
        nll = np.asarray(self.neg_log_lik, float)
        if prior.shape != (self.space.size,) or nll.shape != (self.space.size,):
            raise ValueError("prior/L length must match the state space")
        if np.any(prior <= 0):
            raise ValueError("prior must be strictly positive")
        if abs(prior.sum() - 1.0) > 1e-12:
            raise ValueError("prior must sum to 1")
        if np.any(nll < 0):
            raise ValueError("negative log-likelihood must be nonnegative")
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "neg_log_lik", nll)

    def unnormalized(self) -> np.ndarray:
        return self.prior * np.exp(-self.beta * self.neg_log_lik)

    @property
    def normalizer(self) -> float:
        return float(self.unnormalized().sum())

    def distribution(self) -> np.ndarray:
        p = self.unnormalized()
        return p / p.sum()

    def with_beta(self, beta: float) -> "TargetModel":
        return TargetModel(self.space, self.prior, self.neg_log_lik, beta=float(beta))

    def with_neg_log_lik(self, nll) -> "TargetModel":
        return TargetModel(self.space, self.prior, np.asarray(nll, float), beta=self.beta)


@dataclass(frozen=True)
class ProposalKernel:
    """Translation-invariant proposal on a periodic grid.

    ``moves`` are grid offsets (tuples mod shape); ``weights[k]`` is the
    probability of proposing move k from any state.  The move set is closed
    under (torus) negation and weights are negation symmetric.
    """

    space: StateSpace
    moves: tuple[tuple[int, ...], ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if len(self.moves) != len(w):
            raise ValueError("moves/weights length mismatch")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("proposal weights must sum to 1")
        if np.any(w < 0):
            raise ValueError("proposal weights must be nonnegative")
        canon = [self._canon(m) for m in self.moves]
        if len(set(canon)) != len(canon):
            raise ValueError("duplicate moves")
        lookup = {m: i for i, m in enumerate(canon)}
        for i, m in enumerate(canon):
            neg = tuple((-c) % n for c, n in zip(m, self.space.shape))
            j = lookup.get(neg)
            if j is None:
                raise ValueError(f"move set not closed under negation: {m}")
            if abs(w[i] - w[j]) > 1e-12:
                raise ValueError("proposal weights must be symmetric under negation")
        object.__setattr__(self, "moves", tuple(canon))
        object.__setattr__(self, "weights", w)

    def _canon(self, move) -> tuple[int, ...]:
        return tuple(int(c) % n for c, n in zip(move, self.space.shape))

    def negate(self, move) -> tuple[int, ...]:
        return tuple((-c) % n for c, n in zip(move, self.space.shape))

    @property
    def zero_move_mass(self) -> float:
        zero = tuple(0 for _ in self.space.shape)
        for m, w in zip(self.moves, self.weights):
            if m == zero:
                return float(w)
        return 0.0

    def matrix(self) -> np.ndarray:
        """Dense row-stochastic proposal matrix T."""
        n = self.space.size
        T = np.zeros((n, n))
        for x in range(n):
            for m, w in zip(self.moves, self.weights):
                T[x, self.space.shift(x, m)] += w
        return T

    @classmethod
    def nearest_neighbor(cls, space: StateSpace, stay_prob: float = 0.0) -> "ProposalKernel":
        """Symmetric +-1 steps along each axis, optional self-loop mass."""
        d = space.dimension
        moves: list[tuple[int, ...]] = []
        for i in range(d):
            for s in (1, -1):
                off = [0] * d
                off[i] = s
                moves.append(tuple(off))
        moves = list(dict.fromkeys(tuple(c % n for c, n in zip(m, space.shape)) for m in moves))
        w = np.full(len(moves), (1.0 - stay_prob) / len(moves))
        if stay_prob > 0:
            moves.append(tuple(0 for _ in space.shape))
            w = np.append(w, stay_prob)
        return cls(space=space, moves=tuple(moves), weights=w)

    @classmethod
    def gaussian(cls, space: StateSpace, width: float = 1.0, radius: int = 2) -> "ProposalKernel":
        """Discretized isotropic normal over offsets in [-radius, radius]^d \\ {0}."""
        d = space.dimension
        offs = np.indices(tuple(2 * radius + 1 for _ in range(d))).reshape(d, -1).T - radius
        moves, weights = [], []
        for off in offs:
            if not np.any(off):
                continue
            moves.append(tuple(int(c) % n for c, n in zip(off, space.shape)))
            weights.append(np.exp(-float(np.dot(off, off)) / (2.0 * width**2)))
        # torus wrapping can alias distinct offsets onto one move; merge mass
        merged: dict[tuple[int, ...], float] = {}
        for m, w in zip(moves, weights):
            merged[m] = merged.get(m, 0.0) + w
        ms = tuple(sorted(merged))
        w = np.array([merged[m] for m in ms])
        return cls(space=space, moves=ms, weights=w / w.sum())


def acceptance_ratio(model: TargetModel, kernel: ProposalKernel, x: int, y: int) -> float:
    """MH acceptance probability min{1, P(y)T(y,x) / (P(x)T(x,y))}.

    Computed from the unnormalized target, so the normalizer cancels.
    """
    T = kernel.matrix()
    if T[x, y] <= 0:
        raise ValueError(f"proposal probability T({x},{y}) is zero; ratio undefined")
    p = model.unnormalized()
    return min(1.0, (p[y] * T[y, x]) / (p[x] * T[x, y]))


def acceptance_matrix(model: TargetModel, kernel: ProposalKernel) -> np.ndarray:
    """A(x, y) for all pairs with T(x, y) > 0; zero elsewhere."""
    T = kernel.matrix()
    p = model.unnormalized()
    n = len(p)
    ratio = np.zeros((n, n))
    mask = T > 0
    py_tyx = np.outer(np.ones(n), p) * T.T
    px_txy = np.outer(p, np.ones(n)) * T
    ratio[mask] = np.minimum(1.0, py_tyx[mask] / px_txy[mask])
    return ratio


def tv_distance(p, q) -> float:
    """Total variation distance, max_A |P(A)-Q(A)| = half the L1 distance."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if p.shape != q.shape:
        raise ValueError("distributions must share a support")
    return 0.5 * float(np.abs(p - q).sum())


@dataclass(frozen=True)
class ChainModel:
    """MH transition matrix with its derived spectral data."""

    space: StateSpace
    transition: np.ndarray
    stationary: np.ndarray
    eigenvalues: np.ndarray          # sorted by descending modulus
    spectral_gap: float              # 1 - |lambda_1|
    signed_gap: float                # 1 - lambda_1' (second largest real part)
    condition_number: float          # cond of the diagonalizing Q = D^-1 O

    @property
    def size(self) -> int:
        return self.space.size

    def is_reversible(self, atol: float = PROB_ATOL) -> bool:
        flow = self.stationary[:, None] * self.transition
        return bool(np.max(np.abs(flow - flow.T)) <= atol)


def _diagonalizer(W: np.ndarray, pi: np.ndarray):
    """Q with Q^-1 W Q diagonal, canonical under detailed balance.

    Q = D^-1 O with O an orthonormal eigenbasis of the symmetrized D W D^-1,
    D = diag(sqrt(pi)); columns sign-fixed so the largest-modulus component
    is positive.
    """
    d = np.sqrt(pi)
    S = (d[:, None] * W) / d[None, :]
    S = 0.5 * (S + S.T)
    _, O = np.linalg.eigh(S)
    for j in range(O.shape[1]):
        k = int(np.argmax(np.abs(O[:, j])))
        if O[k, j] < 0:
            O[:, j] = -O[:, j]
    return O / d[:, None]


def build_transition_matrix(model: TargetModel, kernel: ProposalKernel) -> ChainModel:
    """Assemble W from T and the acceptance ratios, with spectrum and gap."""
    T = kernel.matrix()
    A = acceptance_matrix(model, kernel)
    W = T * A
    np.fill_diagonal(W, 0.0)
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    if np.any(W < -1e-14):
        raise ValueError("transition matrix has a negative entry")

    n_comp, _ = connected_components(W > PROB_ATOL, directed=True, connection="strong")
    if n_comp != 1:
        raise ReducibleChainError(f"chain is reducible ({n_comp} strongly connected components)")

    pi = model.distribution()
    eig = np.linalg.eigvals(W)
    order = np.argsort(-np.abs(eig))
    eig = eig[order]
    # non-unit eigenvalue of largest modulus; ties are harmless for the gap
    sub = eig[1:]
    gap = 1.0 - (float(np.max(np.abs(sub))) if len(sub) else 0.0)
    signed = 1.0 - (float(np.max(np.real(sub))) if len(sub) else 0.0)
    kappa = float(np.linalg.cond(_diagonalizer(W, pi)))
    return ChainModel(
        space=model.space,
        transition=W,
        stationary=pi,
        eigenvalues=eig,
        spectral_gap=gap,
        signed_gap=signed,
        condition_number=kappa,
    )


def spectral_gap(chain: ChainModel) -> float:
    """Delta = 1 - |lambda_1|; raises if the chain does not mix."""
    if chain.spectral_gap <= 0:
        raise ValueError("spectral gap is zero (chain has a second unit-modulus eigenvalue)")
    return chain.spectral_gap


@dataclass(frozen=True)
class ChainSample:
    """MH trajectory of state indices, burn-in included."""

    states: np.ndarray
    burn_in: int
    n_samples: int
    seed: int

    def __post_init__(self):
        if len(self.states) != self.burn_in + self.n_samples:
            raise ValueError("trajectory length must be burn_in + n_samples")

    @property
    def kept(self) -> np.ndarray:
        return self.states[self.burn_in:]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "state_index"])
            for t, s in enumerate(self.states):
                writer.writerow([t, int(s)])


def run_mh(model: TargetModel, kernel: ProposalKernel, n_b: int, n: int, seed: int) -> ChainSample:
    """Generate an MH chain: draw x0 from the prior, then propose/accept."""
    if n_b < 0 or n < 1:
        raise ValueError("need n_b >= 0 and n >= 1")
    rng = np.random.default_rng(seed)
    p = model.unnormalized()
    weights = kernel.weights
    moves = kernel.moves
    neg = [kernel.negate(m) for m in moves]
    w_of = {m: float(w) for m, w in zip(moves, weights)}

    x = int(rng.choice(model.space.size, p=model.prior))
    out = np.empty(n_b + n, dtype=np.int64)
    for t in range(n_b + n):
        k = int(rng.choice(len(moves), p=weights))
        y = model.space.shift(x, moves[k])
        a = 1.0 if y == x else min(1.0, (p[y] * w_of[neg[k]]) / (p[x] * w_of[moves[k]]))
        if rng.random() < a:
            x = y
        out[t] = x
    return ChainSample(states=out, burn_in=n_b, n_samples=n, seed=seed)


def mixing_bound_check(chain: ChainModel, n: int) -> tuple[float, float]:
    """Exact worst-case TV after n steps vs the (1-Delta)^n / (2 sqrt(pi_min)) bound.

    The sup over initial distributions is attained at a point mass, so d(n)
    is a max over rows of W^n.
    """
    if not chain.is_reversible():
        raise NonReversibleChainError("mixing bound requires a reversible chain")
    Wn = np.linalg.matrix_power(chain.transition, n)
    d_exact = max(tv_distance(Wn[x], chain.stationary) for x in range(chain.size))
    bound = (1.0 - chain.spectral_gap) ** n / (2.0 * np.sqrt(chain.stationary.min()))
    return float(d_exact), float(bound)


def mixing_time_bound(chain: ChainModel, eps: float) -> int:
    """log(1 / (eps * pi_min)) / Delta upper bound on t_mix(eps)."""
    return int(np.ceil(np.log(1.0 / (eps * chain.stationary.min())) / chain.spectral_gap))


def load_model(path) -> tuple[TargetModel, ProposalKernel, int]:
    """Read a model definition file: grid, prior, L table or formula, proposal.

    Returns the target model, the proposal kernel, and the declared seed.
    """
    with open(path) as fh:
        cfg = json.load(fh)
    grid = cfg["grid"]
    space = StateSpace.regular_grid(grid["shape"], grid.get("low"), grid.get("high"))
    n = space.size

    prior_cfg = cfg.get("prior", {"type": "uniform"})
    if prior_cfg["type"] == "uniform":
        prior = np.full(n, 1.0 / n)
    elif prior_cfg["type"] == "table":
        prior = np.asarray(prior_cfg["values"], float)
    else:
        raise ValueError(f"unknown prior type {prior_cfg['type']!r}")

    nll_cfg = cfg["nll"]
    if nll_cfg["type"] == "table":
        nll = np.asarray(nll_cfg["values"], float)
    elif nll_cfg["type"] == "quadratic":
        center = np.asarray(nll_cfg["center"], float)
        scale = float(nll_cfg.get("scale", 1.0))
        nll = scale * np.sum((space.points - center) ** 2, axis=1)
    else:
        raise ValueError(f"unknown nll type {nll_cfg['type']!r}")
    nll = nll - nll.min()

    prop_cfg = cfg.get("proposal", {"type": "nearest"})
    if prop_cfg["type"] == "nearest":
        kernel = ProposalKernel.nearest_neighbor(space, prop_cfg.get("stay_prob", 0.0))
    elif prop_cfg["type"] == "gaussian":
        kernel = ProposalKernel.gaussian(space, prop_cfg.get("width", 1.0),
                                         prop_cfg.get("radius", 2))
    else:
        raise ValueError(f"unknown proposal type {prop_cfg['type']!r}")

    model = TargetModel(space=space, prior=prior, neg_log_lik=nll,
                        beta=float(cfg.get("beta", 1.0)))
    return model, kernel, int(cfg.get("seed", 0))


def mcmc_expectation(sample: ChainSample, f, chain: ChainModel,
                     initial: np.ndarray | None = None) -> tuple[float, float]:
    """Empirical mean of f over kept samples and its RMSE bound.

    The bound is 2 ||f||_inf^2 / (n Delta') plus the burn-in decay term
    4 ||P0/pi - 1||_inf^(1/2) ||f||_inf^2 (1-Delta)^nb / (n^2 Delta^2),
    returned as its square root.
    """
    fvals = np.array([f(x) for x in range(chain.size)], float)
    est = float(fvals[sample.kept].mean())
    f_inf = float(np.abs(fvals).max())
    p0 = chain.stationary if initial is None else np.asarray(initial, float)
    ratio_inf = float(np.abs(p0 / chain.stationary - 1.0).max())
    n = sample.n_samples
    delta = chain.spectral_gap
    delta_p = chain.signed_gap
    e2 = 2.0 * f_inf**2 / (n * delta_p)
    e2 += 4.0 * np.sqrt(ratio_inf) * f_inf**2 * (1.0 - delta) ** sample.burn_in / (n**2 * delta**2)
    return est, float(np.sqrt(e2))
