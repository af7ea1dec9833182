"""
Off-policy evaluation as IV regression on a transition dataset
"""
from typing import Optional, Tuple

import numpy as np
from loguru import logger

from dfiv.controllers.training_controller import BATCH_STREAM, check_losses, sample_batch
from dfiv.models.features import FeatureMap, Featurizer, Mat
from dfiv.models.iv import StructuralModel
from dfiv.models.mdp import MdpSpec, Policy, TransitionDataset
from dfiv.models.rng import RngStream
from dfiv.models.training import IterationRecord, TrainingLog
from dfiv.schemas.config import DfivConfig
from dfiv.services.feature_service import adam_step, featurize, fresh_adam, with_intercept
from dfiv.services.ope_service import (
    encode_state_actions,
    exact_q,
    grad_ope_stage2_thetaX,
    ope_stage2_loss,
    ope_stage2_solve,
    policy_value,
    q_table,
    sample_actions,
)
from dfiv.services.stage_service import Stage1Projector, grad_stage1_thetaZ, stage1_loss, stage1_solve


def _parity_split(data: TransitionDataset) -> Tuple[TransitionDataset, TransitionDataset]:
    index = np.arange(len(data))
    if len(data) < 2:
        return data, data
    return data.subset(index[0::2]), data.subset(index[1::2])


def _ope_closed_form(
    psi: Featurizer,
    phi: Featurizer,
    inputs1: Mat,
    next_inputs1: Mat,
    inputs2: Mat,
    rewards2: Mat,
    gamma: float,
    cfg: DfivConfig,
) -> StructuralModel:
    add = cfg.add_intercept
    sol = stage1_solve(
        with_intercept(featurize(psi, next_inputs1), add), with_intercept(featurize(phi, inputs1), add), cfg.lambda1
    )
    u = ope_stage2_solve(
        sol,
        with_intercept(featurize(psi, inputs2), add),
        with_intercept(featurize(phi, inputs2), add),
        rewards2,
        gamma,
        cfg.lambda2,
    )
    return StructuralModel(u=u, psi=psi, add_intercept=add, phi=phi, stage1=sol)


class OpeController:
    @staticmethod
    def ope_train(
        data: TransitionDataset,
        target: Policy,
        psi_map: Featurizer,
        phi_map: Featurizer,
        cfg: DfivConfig,
        rng: RngStream,
        log: Optional[TrainingLog] = None,
    ) -> StructuralModel:
        """
        Fit Q(s, a) = u^T psi(s, a). Even-indexed transitions form stage 1,
        odd-indexed stage 2. Next actions a' ~ target are redrawn from ``rng``
        every epoch. Fixed featurizers are solved in closed form; trainable
        ones go through the alternating loop.
        """
        S, A, gamma = data.n_states, data.n_actions, data.gamma
        first, second = _parity_split(data)
        inputs1 = encode_state_actions(first.states, first.actions, S, A)
        inputs2 = encode_state_actions(second.states, second.actions, S, A)
        rewards2 = second.rewards

        def draw_next() -> Mat:
            return encode_state_actions(first.next_states, sample_actions(rng, target, first.next_states), S, A)

        psi, phi = psi_map, phi_map
        trainable = isinstance(psi, FeatureMap) or isinstance(phi, FeatureMap)
        if trainable and cfg.epochs:
            psi, phi = OpeController._train_features(psi, phi, inputs1, inputs2, rewards2, gamma, cfg, draw_next, log)
        model = _ope_closed_form(psi, phi, inputs1, draw_next(), inputs2, rewards2, gamma, cfg)
        logger.info("✅ OPE fit on {} transitions", len(data))
        return model

    @staticmethod
    def _train_features(psi, phi, inputs1, inputs2, rewards2, gamma, cfg: DfivConfig, draw_next, log):
        m, n = inputs1.shape[0], inputs2.shape[0]
        batch_m, batch_n = cfg.resolve_batches(m, n)
        batches = RngStream(cfg.seed, BATCH_STREAM)
        psi_state = fresh_adam(psi) if isinstance(psi, FeatureMap) else None
        phi_state = fresh_adam(phi) if isinstance(phi, FeatureMap) else None
        add = cfg.add_intercept

        for iteration in range(cfg.epochs):
            next1 = draw_next()
            idx1, idx2 = sample_batch(batches, m, batch_m), sample_batch(batches, n, batch_n)
            in1, nx1, in2, r2 = inputs1[idx1], next1[idx1], inputs2[idx2], rewards2[idx2]

            if phi_state is not None:
                psi_next = with_intercept(featurize(psi, nx1), add)
                for _ in range(cfg.inner_stage1):
                    step = grad_stage1_thetaZ(psi_next, phi, in1, cfg.lambda1, add, cfg.stage1_gradient)
                    phi, phi_state = adam_step(phi, step.grads, phi_state, cfg.lr)

            phi1 = with_intercept(featurize(phi, in1), add)
            phi2 = with_intercept(featurize(phi, in2), add)
            projector = Stage1Projector(phi1, cfg.lambda1)
            if psi_state is not None:
                for _ in range(cfg.inner_stage2):
                    step = grad_ope_stage2_thetaX(psi, nx1, in2, projector, phi2, r2, gamma, cfg.lambda2, add)
                    psi, psi_state = adam_step(psi, step.grads, psi_state, cfg.lr)

            psi_next = with_intercept(featurize(psi, nx1), add)
            psi2 = with_intercept(featurize(psi, in2), add)
            sol = projector.solve(psi_next)
            u = ope_stage2_solve(sol, psi2, phi2, r2, gamma, cfg.lambda2)
            l1 = stage1_loss(psi_next, phi1, sol, cfg.lambda1)
            l2 = ope_stage2_loss(sol, psi2, phi2, r2, u, gamma, cfg.lambda2)
            check_losses(iteration, l1, l2)
            if log is not None:
                log.append(IterationRecord(iteration=iteration, stage1_loss=l1, stage2_loss=l2))
        return psi, phi

    @staticmethod
    def evaluate(model: StructuralModel, mdp: MdpSpec, target: Policy) -> dict:
        """Estimated and exact policy value plus the worst Q error."""
        q_hat = q_table(model, mdp.n_states, mdp.n_actions)
        q_true = exact_q(mdp, target)
        estimate = policy_value(q_hat, mdp.initial, target)
        truth = policy_value(q_true, mdp.initial, target)
        return {
            "value_estimate": estimate,
            "value_true": truth,
            "value_error": abs(estimate - truth),
            "max_q_error": float(np.max(np.abs(q_hat - q_true))),
        }
