"""
Finite-MDP tools for off-policy evaluation: random MDPs, transition
sampling, the exact Q-function, Bellman-error diagnostics and policy value.

Action noise: with probability p the executed action is uniform over the
action set; datasets record the chosen action, so every oracle here works
with the effective dynamics of the chosen action.
"""
from typing import NamedTuple, Optional, Tuple, Union

import numpy as np
from loguru import logger
from scipy import linalg as sla

from dfiv.exceptions import DimensionMismatchError, SingularSystemError
from dfiv.models.features import FeatureMap, Mat
from dfiv.models.iv import Stage1Sol, StructuralModel
from dfiv.models.mdp import MdpSpec, Policy, TransitionDataset
from dfiv.models.rng import RngStream
from dfiv.services.feature_service import backward, forward, strip_intercept, with_intercept
from dfiv.services.linalg_service import ridge_solve
from dfiv.services.prediction_service import predict
from dfiv.services.stage_service import Stage1Projector, StageGradient, stage2_design

MDP_STREAM = 21
TRANSITION_STREAM = 22
ROLLOUT_STREAM = 23


def random_mdp(
    n_states: int,
    n_actions: int,
    reward_noise_sd: float,
    gamma: float,
    seed: int,
    action_noise: float = 0.0,
) -> MdpSpec:
    """Transition rows are normalized Unif(0,1) draws; mean rewards are Unif(0,1)."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("an MDP needs at least one state and one action")
    root = RngStream(seed, MDP_STREAM)
    raw = root.split("transitions").generator.uniform(0.0, 1.0, size=(n_states, n_actions, n_states))
    raw += 1e-12
    transitions = raw / raw.sum(axis=2, keepdims=True)
    rewards = root.split("rewards").generator.uniform(0.0, 1.0, size=(n_states, n_actions, n_states))
    return MdpSpec(
        transitions=transitions,
        reward_means=rewards,
        initial=np.full(n_states, 1.0 / n_states),
        gamma=gamma,
        reward_noise_sd=reward_noise_sd,
        action_noise=action_noise,
    )


def effective_dynamics(mdp: MdpSpec) -> Tuple[Mat, Mat]:
    """
    (P_eff[s, a, s'], r_eff[s, a]) for the chosen action a, averaging over
    the executed action.
    """
    p = mdp.action_noise
    mean_transition = mdp.transitions.mean(axis=1, keepdims=True)
    expected_reward = np.sum(mdp.transitions * mdp.reward_means, axis=2)
    transitions = (1.0 - p) * mdp.transitions + p * mean_transition
    rewards = (1.0 - p) * expected_reward + p * expected_reward.mean(axis=1, keepdims=True)
    return transitions, rewards


def _check_policy(mdp: MdpSpec, policy: Policy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatchError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def _bellman_operator(mdp: MdpSpec, policy: Policy) -> Tuple[Mat, Mat]:
    """(P Pi as an SA x SA matrix, r_eff flattened)."""
    transitions, rewards = effective_dynamics(mdp)
    S, A = mdp.n_states, mdp.n_actions
    # (s,a) -> (s',a') probability
    p_pi = np.einsum("ijk,kl->ijkl", transitions, policy.probs).reshape(S * A, S * A)
    return p_pi, rewards.reshape(S * A)


def exact_q(mdp: MdpSpec, policy: Policy) -> Mat:
    """Solve (I - gamma P Pi) q = r; one refinement step keeps the residual at 1e-10."""
    _check_policy(mdp, policy)
    p_pi, rewards = _bellman_operator(mdp, policy)
    system = np.eye(rewards.shape[0]) - mdp.gamma * p_pi
    try:
        q = sla.solve(system, rewards)
    except sla.LinAlgError as exc:
        raise SingularSystemError(f"Bellman system is singular: {exc}") from exc
    q = q + sla.solve(system, rewards - system @ q)
    residual = float(np.max(np.abs(system @ q - rewards)))
    if residual > 1e-10:
        raise SingularSystemError(f"Bellman system residual {residual:.3e} exceeds 1e-10")
    return q.reshape(mdp.n_states, mdp.n_actions)


def generate_transitions(
    mdp: MdpSpec,
    behavior: Policy,
    n: int,
    seed: int,
    state_dist: Optional[Mat] = None,
) -> TransitionDataset:
    """
    i.i.d. (s, a, r, s') with s ~ mu (uniform by default), a ~ behavior, the
    executed action replaced by a uniform one with probability p.
    """
    if n < 1:
        raise ValueError("need at least one transition")
    _check_policy(mdp, behavior)
    S, A = mdp.n_states, mdp.n_actions
    mu = np.full(S, 1.0 / S) if state_dist is None else np.asarray(state_dist, dtype=np.float64)
    if mu.shape != (S,) or not np.isclose(mu.sum(), 1.0, atol=1e-12):
        raise ValueError("state distribution must be a probability vector over states")

    root = RngStream(seed, TRANSITION_STREAM)
    states = root.split("s").generator.choice(S, size=n, p=mu)
    uniforms = root.split("a").generator.uniform(size=n)
    actions = np.minimum((uniforms[:, None] > np.cumsum(behavior.probs[states], axis=1)).sum(axis=1), A - 1)
    replace = root.split("noise").generator.uniform(size=n) < mdp.action_noise
    executed = np.where(replace, root.split("executed").generator.integers(0, A, size=n), actions)
    next_uniforms = root.split("s_next").generator.uniform(size=n)
    cumulative = np.cumsum(mdp.transitions[states, executed], axis=1)
    next_states = np.minimum((next_uniforms[:, None] > cumulative).sum(axis=1), S - 1)
    means = mdp.reward_means[states, executed, next_states]
    noise = root.split("r").generator.normal(0.0, 1.0, size=n) * mdp.reward_noise_sd
    return TransitionDataset(
        states=states,
        actions=actions,
        rewards=means + noise,
        next_states=next_states,
        n_states=S,
        n_actions=A,
        gamma=mdp.gamma,
    )


def sample_actions(rng: RngStream, policy: Policy, states: Mat) -> Mat:
    uniforms = rng.generator.uniform(size=len(states))
    cumulative = np.cumsum(policy.probs[states], axis=1)
    return np.minimum((uniforms[:, None] > cumulative).sum(axis=1), policy.n_actions - 1)


def policy_value(q: Mat, initial: Mat, policy: Policy) -> float:
    q = np.asarray(q, dtype=np.float64)
    initial = np.asarray(initial, dtype=np.float64)
    if q.shape != policy.probs.shape or initial.shape != (q.shape[0],):
        raise DimensionMismatchError("Q, initial distribution and policy shapes disagree")
    return float(initial @ np.sum(policy.probs * q, axis=1))


def msbe(
    q: Mat,
    mdp: MdpSpec,
    policy: Policy,
    state_dist: Optional[Mat] = None,
    behavior: Optional[Policy] = None,
) -> float:
    """Exact mean squared Bellman error weighted by mu(s) pi_b(a|s); both default to uniform."""
    _check_policy(mdp, policy)
    S, A = mdp.n_states, mdp.n_actions
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (S, A):
        raise DimensionMismatchError(f"Q has shape {q.shape}, expected ({S}, {A})")
    mu = np.full(S, 1.0 / S) if state_dist is None else np.asarray(state_dist, dtype=np.float64)
    behavior = behavior if behavior is not None else Policy.uniform(S, A)
    p_pi, rewards = _bellman_operator(mdp, policy)
    residual = rewards + mdp.gamma * p_pi @ q.reshape(-1) - q.reshape(-1)
    weights = (mu[:, None] * behavior.probs).reshape(-1)
    return float(np.sum(weights * residual**2))


class MonteCarloValue(NamedTuple):
    value: float
    standard_error: float


def monte_carlo_value(
    mdp: MdpSpec,
    policy: Policy,
    episodes: int,
    seed: int,
    horizon_tol: float = 1e-6,
) -> MonteCarloValue:
    """Discounted returns of vectorized rollouts from the initial distribution, truncated once gamma^t < tol."""
    _check_policy(mdp, policy)
    S, A = mdp.n_states, mdp.n_actions
    horizon = int(np.ceil(np.log(horizon_tol) / np.log(mdp.gamma))) if mdp.gamma > 0 else 1
    root = RngStream(seed, ROLLOUT_STREAM)
    states = root.split("initial").generator.choice(S, size=episodes, p=mdp.initial)
    returns = np.zeros(episodes)
    for step in range(horizon):
        draws = root.split(f"step-{step}").generator.uniform(size=(4, episodes))
        actions = np.minimum((draws[0][:, None] > np.cumsum(policy.probs[states], axis=1)).sum(axis=1), A - 1)
        random_actions = np.minimum((draws[1] * A).astype(int), A - 1)
        executed = np.where(draws[2] < mdp.action_noise, random_actions, actions)
        cumulative = np.cumsum(mdp.transitions[states, executed], axis=1)
        next_states = np.minimum((draws[3][:, None] > cumulative).sum(axis=1), S - 1)
        rewards = mdp.reward_means[states, executed, next_states]
        if mdp.reward_noise_sd:
            rewards = rewards + root.split(f"reward-{step}").generator.normal(0.0, mdp.reward_noise_sd, size=episodes)
        returns += mdp.gamma**step * rewards
        states = next_states
    logger.debug("monte carlo value over {} episodes, horizon {}", episodes, horizon)
    return MonteCarloValue(
        value=float(returns.mean()),
        standard_error=float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else float("inf"),
    )


def encode_state_actions(states: Mat, actions: Mat, n_states: int, n_actions: int) -> Mat:
    """Rows [one_hot(s) | one_hot(a)]."""
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((states.shape[0], n_states + n_actions))
    rows = np.arange(states.shape[0])
    out[rows, states] = 1.0
    out[rows, n_states + actions] = 1.0
    return out


# Two-stage estimator pieces ----------------------------------------------
#
# Stage 1 regresses psi(s', a') (a' ~ target) on phi(s, a). Stage 2 regresses
# rewards on psi(s, a) - gamma V phi(s, a).


def ope_stage2_design(sol: Union[Stage1Sol, Mat], psi2_feats: Mat, phi2_feats: Mat, gamma: float) -> Mat:
    return np.asarray(psi2_feats, dtype=np.float64) - gamma * stage2_design(sol, phi2_feats)


def ope_stage2_solve(
    sol: Union[Stage1Sol, Mat], psi2_feats: Mat, phi2_feats: Mat, rewards: Mat, gamma: float, lambda2: float
) -> Mat:
    design = ope_stage2_design(sol, psi2_feats, phi2_feats, gamma)
    return ridge_solve(design, np.asarray(rewards, dtype=np.float64).reshape(-1), lambda2, design.shape[0])[:, 0]


def ope_stage2_loss(
    sol: Union[Stage1Sol, Mat], psi2_feats: Mat, phi2_feats: Mat, rewards: Mat, u: Mat, gamma: float, lambda2: float
) -> float:
    design = ope_stage2_design(sol, psi2_feats, phi2_feats, gamma)
    residual = np.asarray(rewards, dtype=np.float64).reshape(-1) - design @ u
    return float(np.mean(residual**2) + lambda2 * np.sum(u**2))


def grad_ope_stage2_thetaX(
    psi_map: FeatureMap,
    next_inputs1: Mat,
    inputs2: Mat,
    projector: Stage1Projector,
    phi2_feats: Mat,
    rewards: Mat,
    gamma: float,
    lambda2: float,
    add_intercept: bool = True,
) -> StageGradient:
    """
    The treatment map enters the stage-2 design twice: directly through
    psi(s~, a~) and through V, which is fitted to psi(s', a').
    """
    psi_next = with_intercept(forward(psi_map, next_inputs1), add_intercept)
    psi2 = with_intercept(forward(psi_map, inputs2), add_intercept)
    phi2 = np.asarray(phi2_feats, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    n = psi2.shape[0]
    sol = projector.solve(psi_next)
    design = ope_stage2_design(sol, psi2, phi2, gamma)
    u = ridge_solve(design, r, lambda2, n)[:, 0]
    residual = r - design @ u
    grad_design = -(2.0 / n) * np.outer(residual, u)
    grads = backward(psi_map, inputs2, strip_intercept(grad_design, add_intercept))
    grad_next = -gamma * projector.P.T @ (phi2.T @ grad_design)
    backward(psi_map, next_inputs1, strip_intercept(grad_next, add_intercept), into=grads)
    loss = float(np.mean(residual**2) + lambda2 * np.sum(u**2))
    return StageGradient(grads=grads, loss=loss, V=sol.V, u=u)


def q_table(model: StructuralModel, n_states: int, n_actions: int) -> Mat:
    states = np.repeat(np.arange(n_states), n_actions)
    actions = np.tile(np.arange(n_actions), n_states)
    return predict(model, encode_state_actions(states, actions, n_states, n_actions)).reshape(n_states, n_actions)
