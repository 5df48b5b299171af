"""Dense tensor-product register simulator and the quantum walk operator.

Registers: R_S (state, dim |Omega|), R_M (move alphabet, slot 0 reserved for
the zero move), R_C (coin, dim 2).  The walk operator is the product
U = R V' B' S F B V built as an explicit dense unitary, with spectral
verification of its phase gap against the chain's spectral gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .markov import ChainModel, ProposalKernel, TargetModel

UNITARY_ATOL = 1e-10
SUBSPACE_RANK_TOL = 1e-9
MAX_TOTAL_DIM = 2**14


@dataclass(frozen=True)
class RegisterLayout:
    """Index bookkeeping for the R_S x R_M x R_C product space.

    The move alphabet always carries the zero move at slot 0 (the reference
    state of R_M), with weight 0 when the proposal never stays put.  It is
    closed under torus negation.
    """

    space_dim: int
    moves: tuple[tuple[int, ...], ...]
    weights: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        zero = tuple(0 for _ in self.shape)
        if self.moves[0] != zero:
            raise ValueError("move alphabet must start with the zero move")
        if len(set(self.moves)) != len(self.moves):
            raise ValueError("duplicate moves in alphabet")
        lookup = set(self.moves)
        for m in self.moves:
            if tuple((-c) % n for c, n in zip(m, self.shape)) not in lookup:
                raise ValueError("move alphabet not closed under negation")
        if self.total_dim > MAX_TOTAL_DIM:
            raise ValueError(f"total dimension {self.total_dim} exceeds {MAX_TOTAL_DIM}")

    @classmethod
    def for_kernel(cls, kernel: ProposalKernel) -> "RegisterLayout":
        zero = tuple(0 for _ in kernel.space.shape)
        moves = [zero] + sorted(m for m in kernel.moves if m != zero)
        w = dict(zip(kernel.moves, kernel.weights))
        weights = np.array([w.get(m, 0.0) for m in moves])
        return cls(space_dim=kernel.space.size, moves=tuple(moves), weights=weights,
                   shape=kernel.space.shape)

    @property
    def n_moves(self) -> int:
        return len(self.moves)

    @property
    def total_dim(self) -> int:
        return self.space_dim * self.n_moves * 2

    def index(self, x: int, m: int, c: int) -> int:
        return (x * self.n_moves + m) * 2 + c

    def negate_slot(self, m: int) -> int:
        neg = tuple((-c) % n for c, n in zip(self.moves[m], self.shape))
        return self.moves.index(neg)

    def shift_state(self, x: int, m: int) -> int:
        mi = np.unravel_index(x, self.shape)
        return int(np.ravel_multi_index(
            [(a + b) % n for a, b, n in zip(mi, self.moves[m], self.shape)], self.shape))


def basis_state(layout: RegisterLayout, x: int, m: int = 0, c: int = 0) -> np.ndarray:
    v = np.zeros(layout.total_dim, dtype=complex)
    v[layout.index(x, m, c)] = 1.0
    return v


def encode_distribution(P, layout: RegisterLayout) -> np.ndarray:
    """|P> = sum_x sqrt(P(x)) |x>|0>|0>."""
    P = np.asarray(P, float)
    if abs(P.sum() - 1.0) > 1e-10 or np.any(P < 0):
        raise ValueError("P must be a probability vector")
    v = np.zeros(layout.total_dim, dtype=complex)
    for x in range(layout.space_dim):
        v[layout.index(x, 0, 0)] = np.sqrt(P[x])
    return v


def assert_unitary(U: np.ndarray, atol: float = UNITARY_ATOL) -> None:
    n = U.shape[0]
    err = np.linalg.norm(U.conj().T @ U - np.eye(n))
    if err > atol:
        raise ValueError(f"matrix is not unitary (deviation {err:.2e})")


def _complete_unitary(first_column: np.ndarray) -> np.ndarray:
    """Unitary whose first column is the given unit vector (QR completion)."""
    n = len(first_column)
    M = np.eye(n, dtype=complex)
    M[:, 0] = first_column
    Q, _ = np.linalg.qr(M)
    # QR may flip the first column's sign
    phase = np.vdot(Q[:, 0], first_column)
    Q[:, 0] *= phase / abs(phase)
    return Q


def build_V(kernel: ProposalKernel, layout: RegisterLayout) -> np.ndarray:
    """V |x>|0>|c> = |x> sum_m sqrt(T(x, x+m)) |m> |c>.

    Translation invariance makes the R_M block state-independent; the block
    is completed to a full unitary beyond the reference column.
    """
    w = layout.weights
    if abs(w.sum() - 1.0) > 1e-10:
        raise ValueError("move weights do not normalize")
    VM = _complete_unitary(np.sqrt(w).astype(complex))
    return np.kron(np.eye(layout.space_dim), np.kron(VM, np.eye(2)))


def acceptance_slots(model: TargetModel, layout: RegisterLayout,
                     table: np.ndarray | None = None) -> np.ndarray:
    """A(x, x+m) for each supported (x, slot); slots with zero weight get 0.

    ``table`` overrides the exact ratios with a dense (n, n) acceptance table
    indexed by (x, y).
    """
    n, k = layout.space_dim, layout.n_moves
    A = np.zeros((n, k))
    p = model.unnormalized()
    for m in range(1, k):
        if layout.weights[m] <= 0:
            continue
        mn = layout.negate_slot(m)
        for x in range(n):
            y = layout.shift_state(x, m)
            if table is not None:
                A[x, m] = table[x, y]
            else:
                A[x, m] = min(1.0, (p[y] * layout.weights[mn]) / (p[x] * layout.weights[m]))
    if layout.weights[0] > 0:
        A[:, 0] = 1.0
    return A


def build_B(model: TargetModel, layout: RegisterLayout,
            table: np.ndarray | None = None) -> np.ndarray:
    """Controlled Y rotation of R_C by 2 arcsin sqrt(A(x, x+m)) per (x, m).

    Unsupported slots (zero proposal weight) get the identity block; they
    never mix into the walk dynamics.
    """
    A = acceptance_slots(model, layout, table)
    if np.any(A < -1e-12) or np.any(A > 1.0 + 1e-12):
        raise ValueError("acceptance values must lie in [0, 1]")
    A = np.clip(A, 0.0, 1.0)
    B = np.eye(layout.total_dim, dtype=complex)
    for x in range(layout.space_dim):
        for m in range(layout.n_moves):
            if layout.weights[m] <= 0:
                continue
            a = A[x, m]
            i0, i1 = layout.index(x, m, 0), layout.index(x, m, 1)
            s, c = np.sqrt(a), np.sqrt(1.0 - a)
            B[i0, i0], B[i0, i1] = c, -s
            B[i1, i0], B[i1, i1] = s, c
    return B


def build_F(layout: RegisterLayout) -> np.ndarray:
    """State shift: adds the move to R_S (mod the torus) when R_C = |1>."""
    F = np.zeros((layout.total_dim, layout.total_dim), dtype=complex)
    for x in range(layout.space_dim):
        for m in range(layout.n_moves):
            F[layout.index(x, m, 0), layout.index(x, m, 0)] = 1.0
            F[layout.index(layout.shift_state(x, m), m, 1), layout.index(x, m, 1)] = 1.0
    return F


def build_S(layout: RegisterLayout) -> np.ndarray:
    """Move negation on R_M when R_C = |1>."""
    S = np.zeros((layout.total_dim, layout.total_dim), dtype=complex)
    for x in range(layout.space_dim):
        for m in range(layout.n_moves):
            S[layout.index(x, m, 0), layout.index(x, m, 0)] = 1.0
            S[layout.index(x, layout.negate_slot(m), 1), layout.index(x, m, 1)] = 1.0
    return S


def build_R(layout: RegisterLayout) -> np.ndarray:
    """Reflection 2 Lambda_0 - I about the span of |x>|0>|0>."""
    diag = -np.ones(layout.total_dim)
    for x in range(layout.space_dim):
        diag[layout.index(x, 0, 0)] = 1.0
    return np.diag(diag).astype(complex)


def build_core(model: TargetModel, kernel: ProposalKernel, layout: RegisterLayout,
               table: np.ndarray | None = None) -> np.ndarray:
    """G = V' B' S F B V; Hermitian involution whose reference block conjugates W."""
    V = build_V(kernel, layout)
    B = build_B(model, layout, table)
    prod = build_S(layout) @ build_F(layout) @ B @ V
    return V.conj().T @ B.conj().T @ prod


def build_walk_operator(model: TargetModel, kernel: ProposalKernel,
                        layout: RegisterLayout,
                        table: np.ndarray | None = None) -> np.ndarray:
    U = build_R(layout) @ build_core(model, kernel, layout, table)
    assert_unitary(U)
    return U


def reference_block(G: np.ndarray, layout: RegisterLayout) -> np.ndarray:
    """The |Omega| x |Omega| block of G on the reference states |x>|0>|0>."""
    idx = [layout.index(x, 0, 0) for x in range(layout.space_dim)]
    return G[np.ix_(idx, idx)]


def symmetrized_transition(chain: ChainModel) -> np.ndarray:
    """D_P W D_P^{-1} with D_P = diag(sqrt(P)); symmetric under detailed balance."""
    d = np.sqrt(chain.stationary)
    return (d[:, None] * chain.transition) / d[None, :]


def invariant_subspace(U_or_G: np.ndarray, layout: RegisterLayout,
                       rank_tol: float = SUBSPACE_RANK_TOL) -> np.ndarray:
    """Orthonormal basis of span{ reference states } + G * span{ reference states }.

    This span is invariant under both the core involution and the reflection,
    hence under the walk operator.
    """
    idx = [layout.index(x, 0, 0) for x in range(layout.space_dim)]
    A_basis = np.zeros((layout.total_dim, layout.space_dim), dtype=complex)
    for j, i in enumerate(idx):
        A_basis[i, j] = 1.0
    combined = np.hstack([A_basis, U_or_G @ A_basis])
    Q, Rm = np.linalg.qr(combined)
    keep = np.abs(np.diag(Rm)) > rank_tol
    return Q[:, keep]


@dataclass(frozen=True)
class PhaseGapReport:
    eigenphases: np.ndarray
    min_nonzero_phase: float
    unit_multiplicity: int
    principal_overlap: float
    phase_bound: float
    passed: bool


def verify_phase_gap(U: np.ndarray, layout: RegisterLayout,
                     chain: ChainModel) -> PhaseGapReport:
    """Diagonalize U on its invariant subspace and check the phase-gap claims.

    Asserted: eigenvalue 1 is simple there, its eigenvector is the encoded
    stationary state, and every other eigenphase theta obeys
    |theta| >= arccos(1 - Delta) - 1e-8.
    """
    G = build_R(layout) @ U        # R^2 = I, so this is the core involution
    Q = invariant_subspace(G, layout)
    U_sub = Q.conj().T @ U @ Q
    if np.linalg.norm(U_sub.conj().T @ U_sub - np.eye(U_sub.shape[0])) > 1e-8:
        raise ValueError("subspace is not invariant under the walk operator")
    lam, vecs = np.linalg.eig(U_sub)
    phases = np.angle(lam)
    unit = np.abs(lam - 1.0) < 1e-8
    mult = int(unit.sum())

    target = encode_distribution(chain.stationary, layout)
    overlap = 0.0
    if mult >= 1:
        principal = Q @ vecs[:, np.argmax(unit)]
        overlap = float(np.abs(np.vdot(target, principal)) ** 2)

    nonzero = np.abs(phases[~unit])
    min_phase = float(nonzero.min()) if len(nonzero) else np.pi
    bound = float(np.arccos(1.0 - chain.spectral_gap))
    passed = mult == 1 and overlap >= 1.0 - 1e-9 and min_phase >= bound - 1e-8
    return PhaseGapReport(
        eigenphases=np.sort(phases),
        min_nonzero_phase=min_phase,
        unit_multiplicity=mult,
        principal_overlap=overlap,
        phase_bound=bound,
        passed=passed,
    )


def decode_distribution(state: np.ndarray, layout: RegisterLayout) -> np.ndarray:
    """Probability vector read off the reference-slot amplitudes, renormalized."""
    p = np.array([abs(state[layout.index(x, 0, 0)]) ** 2 for x in range(layout.space_dim)])
    total = p.sum()
    if total <= 0:
        raise ValueError("state has no mass on the reference slots")
    return p / total
