"""Walk-operator construction and its spectral identities."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qmhlab.markov import ProposalKernel, StateSpace, TargetModel, build_transition_matrix
from qmhlab.qsim import (
    RegisterLayout,
    basis_state,
    build_B,
    build_core,
    build_F,
    build_R,
    build_S,
    build_V,
    build_walk_operator,
    decode_distribution,
    encode_distribution,
    invariant_subspace,
    reference_block,
    symmetrized_transition,
    verify_phase_gap,
)

from conftest import random_instance

UNITARY_ATOL = 1e-10
BLOCK_ATOL = 1e-10
SF_ATOL = 1e-12
PHASE_ATOL = 1e-8


def make_setup(seed, allow_2d=True):
    model, kernel = random_instance(seed, allow_2d=allow_2d)
    layout = RegisterLayout.for_kernel(kernel)
    return model, kernel, layout


class TestRegisterLayout:
    def test_zero_move_first_and_index_bijective(self):
        _, kernel = random_instance(2)
        layout = RegisterLayout.for_kernel(kernel)
        assert layout.moves[0] == tuple(0 for _ in layout.shape)
        seen = set()
        for x in range(layout.space_dim):
            for m in range(layout.n_moves):
                for c in (0, 1):
                    seen.add(layout.index(x, m, c))
        assert seen == set(range(layout.total_dim))

    def test_zero_move_slot_without_stay_mass(self):
        space = StateSpace.regular_grid((6,))
        kernel = ProposalKernel.nearest_neighbor(space, stay_prob=0.0)
        layout = RegisterLayout.for_kernel(kernel)
        assert layout.weights[0] == 0.0
        assert abs(layout.weights.sum() - 1.0) <= 1e-12

    def test_negate_slot_involution(self):
        _, kernel = random_instance(12)
        layout = RegisterLayout.for_kernel(kernel)
        for m in range(layout.n_moves):
            assert layout.negate_slot(layout.negate_slot(m)) == m

    def test_rejects_oversized_layout(self):
        space = StateSpace.regular_grid((70, 70))
        kernel = ProposalKernel.nearest_neighbor(space)
        with pytest.raises(ValueError):
            RegisterLayout.for_kernel(kernel)


class TestStates:
    def test_basis_state_single_amplitude(self):
        _, _, layout = make_setup(3)
        v = basis_state(layout, 1, 0, 1)
        assert np.count_nonzero(v) == 1
        assert v[layout.index(1, 0, 1)] == 1.0

    def test_encode_decode_round_trip(self):
        model, _, layout = make_setup(5)
        P = model.distribution()
        v = encode_distribution(P, layout)
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-12
        np.testing.assert_allclose(decode_distribution(v, layout), P, atol=1e-12)

    def test_encode_rejects_nondistribution(self):
        _, _, layout = make_setup(7)
        with pytest.raises(ValueError):
            encode_distribution(np.full(layout.space_dim, 0.5), layout)


class TestOperatorsUnitary:
    @given(st.integers(0, 10**6))
    @settings(max_examples=15, deadline=None)
    def test_all_factors_unitary(self, seed):
        model, kernel, layout = make_setup(seed)
        eye = np.eye(layout.total_dim)
        for op in (build_V(kernel, layout), build_B(model, layout),
                   build_F(layout), build_S(layout), build_R(layout)):
            assert np.linalg.norm(op.conj().T @ op - eye) <= UNITARY_ATOL

    def test_v_proposal_amplitudes(self):
        # two symmetric moves with no stay mass: amplitudes 1/sqrt(2) each
        space = StateSpace.regular_grid((5,))
        kernel = ProposalKernel.nearest_neighbor(space)
        layout = RegisterLayout.for_kernel(kernel)
        V = build_V(kernel, layout)
        col = V @ basis_state(layout, 2, 0, 0)
        for m in range(layout.n_moves):
            amp = col[layout.index(2, m, 0)]
            assert abs(amp) == pytest.approx(np.sqrt(layout.weights[m]), abs=1e-12)
        amps = [abs(col[layout.index(2, m, 0)]) for m in range(1, layout.n_moves)]
        np.testing.assert_allclose(amps, 1.0 / np.sqrt(2.0), atol=1e-12)

    def test_b_rotation_entries_at_half_acceptance(self):
        # uniform prior, L with one doubled weight: A = 1/2 on the downhill move
        space = StateSpace.regular_grid((4,))
        model = TargetModel(space=space, prior=np.full(4, 0.25),
                            neg_log_lik=np.log(2.0) * np.array([0.0, 1.0, 1.0, 1.0]))
        kernel = ProposalKernel.nearest_neighbor(space)
        layout = RegisterLayout.for_kernel(kernel)
        B = build_B(model, layout)
        m_plus = layout.moves.index((1,))
        i0 = layout.index(0, m_plus, 0)
        i1 = layout.index(0, m_plus, 1)
        assert B[i1, i0] == pytest.approx(np.sqrt(0.5), abs=1e-12)
        assert B[i0, i0] == pytest.approx(np.sqrt(0.5), abs=1e-12)

    def test_f_shifts_only_on_coin_one(self):
        _, _, layout = make_setup(11)
        F = build_F(layout)
        m = 1
        x = 0
        v0 = basis_state(layout, x, m, 0)
        np.testing.assert_array_equal(F @ v0, v0)
        v1 = basis_state(layout, x, m, 1)
        out = F @ v1
        assert out[layout.index(layout.shift_state(x, m), m, 1)] == 1.0

    def test_sf_squared_identity(self):
        for seed in range(4):
            _, _, layout = make_setup(seed)
            SF = build_S(layout) @ build_F(layout)
            err = np.max(np.abs(SF @ SF - np.eye(layout.total_dim)))
            assert err <= SF_ATOL

    def test_r_reflection_signs(self):
        _, _, layout = make_setup(13)
        R = build_R(layout)
        diag = np.diag(R).real
        for x in range(layout.space_dim):
            assert diag[layout.index(x, 0, 0)] == 1.0
        assert np.sum(diag == 1.0) == layout.space_dim


class TestCoreIdentities:
    @given(st.integers(0, 10**6))
    @settings(max_examples=12, deadline=None)
    def test_core_hermitian_involution(self, seed):
        model, kernel, layout = make_setup(seed)
        G = build_core(model, kernel, layout)
        assert np.max(np.abs(G - G.conj().T)) <= 1e-10
        assert np.max(np.abs(G @ G - np.eye(layout.total_dim))) <= 1e-10

    @given(st.integers(0, 10**6))
    @settings(max_examples=12, deadline=None)
    def test_reference_block_conjugates_transition(self, seed):
        model, kernel, layout = make_setup(seed)
        chain = build_transition_matrix(model, kernel)
        G = build_core(model, kernel, layout)
        err = np.max(np.abs(reference_block(G, layout)
                            - symmetrized_transition(chain)))
        assert err <= BLOCK_ATOL

    def test_invariant_subspace_closed_under_walk(self):
        model, kernel, layout = make_setup(17)
        U = build_walk_operator(model, kernel, layout)
        G = build_R(layout) @ U
        Q = invariant_subspace(G, layout)
        proj = Q @ Q.conj().T
        # U maps the subspace into itself
        assert np.linalg.norm(proj @ U @ Q - U @ Q) <= 1e-9


class TestPhaseGap:
    def test_two_state_gap_half_gives_pi_over_three(self, two_state_gap_half):
        model, kernel = two_state_gap_half
        layout = RegisterLayout.for_kernel(kernel)
        chain = build_transition_matrix(model, kernel)
        U = build_walk_operator(model, kernel, layout)
        report = verify_phase_gap(U, layout, chain)
        assert report.passed
        assert report.min_nonzero_phase == pytest.approx(np.pi / 3.0, abs=PHASE_ATOL)

    @given(st.integers(0, 10**6))
    @settings(max_examples=10, deadline=None)
    def test_phase_gap_report_passes(self, seed):
        model, kernel, layout = make_setup(seed)
        chain = build_transition_matrix(model, kernel)
        U = build_walk_operator(model, kernel, layout)
        report = verify_phase_gap(U, layout, chain)
        assert report.passed
        assert report.unit_multiplicity == 1
        assert report.principal_overlap >= 1.0 - 1e-9
        assert report.min_nonzero_phase >= report.phase_bound - PHASE_ATOL

    def test_stationary_state_is_fixed(self):
        model, kernel, layout = make_setup(21)
        chain = build_transition_matrix(model, kernel)
        U = build_walk_operator(model, kernel, layout)
        v = encode_distribution(chain.stationary, layout)
        assert np.linalg.norm(U @ v - v) <= 1e-9

    def test_acceptance_table_override_changes_operator(self):
        model, kernel, layout = make_setup(23, allow_2d=False)
        n = layout.space_dim
        table = np.full((n, n), 0.5)
        U_override = build_walk_operator(model, kernel, layout, table=table)
        U_exact = build_walk_operator(model, kernel, layout)
        assert np.max(np.abs(U_override - U_exact)) > 1e-6
        assert np.linalg.norm(U_override.conj().T @ U_override - np.eye(2 * n * layout.n_moves)) <= UNITARY_ATOL
