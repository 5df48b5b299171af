import numpy as np
import pytest

from qmhlab.markov import ProposalKernel, StateSpace, TargetModel


def random_instance(seed, max_points=16, allow_2d=True):
    """Random MH instance: torus grid, uniform-ish prior, random L, kernel."""
    rng = np.random.default_rng(seed)
    if allow_2d and rng.random() < 0.4:
        space = StateSpace.regular_grid((4, 4))
    else:
        space = StateSpace.regular_grid((int(rng.integers(6, max_points + 1)),))
    n = space.size
    prior = rng.uniform(0.5, 1.5, n)
    prior /= prior.sum()
    L = rng.uniform(0.0, 3.0, n)
    L -= L.min()
    model = TargetModel(space=space, prior=prior, neg_log_lik=L)
    if space.dimension == 2:
        kernel = ProposalKernel.gaussian(space, width=1.0, radius=1)
    elif rng.random() < 0.5:
        kernel = ProposalKernel.nearest_neighbor(space, stay_prob=float(rng.uniform(0, 0.3)))
    else:
        kernel = ProposalKernel.gaussian(space, width=1.2, radius=2)
    return model, kernel


@pytest.fixture
def two_state_gap_half():
    """Uniform 2-state chain with W = [[.75,.25],[.25,.75]]: gap exactly 0.5."""
    space = StateSpace.regular_grid((2,))
    model = TargetModel(space=space, prior=np.array([0.5, 0.5]),
                        neg_log_lik=np.zeros(2))
    kernel = ProposalKernel.nearest_neighbor(space, stay_prob=0.75)
    return model, kernel


@pytest.fixture
def ring8():
    space = StateSpace.regular_grid((8,))
    nll = 0.5 * (space.points[:, 0] - 3.0) ** 2
    model = TargetModel(space=space, prior=np.full(8, 1.0 / 8.0),
                        neg_log_lik=nll - nll.min())
    kernel = ProposalKernel.nearest_neighbor(space)
    return model, kernel
