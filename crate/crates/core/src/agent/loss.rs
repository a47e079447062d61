//! Assembly of the five-term training objective: policy gradient, value
//! regression to the tree targets, entropy bonus, evidence bound, and the
//! behavior-policy likelihood, combined with the configured relative weights.

use crate::config::LossWeights;
use crate::diffcore::{NodeId, Tape};
use crate::error::{CoreError, Result};
use crate::genmodel::{elbo_loss, Diagnostics};

/// Per-step tape nodes collected by a trainer during the forward pass. All
/// four are scalars.
#[derive(Debug, Clone, Copy)]
pub struct StepTerms {
    pub log_pi: NodeId,
    pub entropy: NodeId,
    pub value: NodeId,
    pub log_mu: NodeId,
}

/// The batch loss
///
///   (1/L)·[ w_π·Σ −Â_t·log π_t + w_V·Σ (V_t − target_t)²
///           − w_H·Σ H_t + w_μ·Σ −log μ_t ] + w_ELBO·L_ELBO
///
/// Advantages enter as constants: the policy gradient is ∇log π scaled by Â,
/// never differentiated through the advantage itself. The evidence term is
/// already a per-step mean.
pub fn five_term_loss(
    tape: &mut Tape,
    steps: &[StepTerms],
    advantages: &[f64],
    tree_targets: &[f64],
    step_weights: &[Vec<NodeId>],
    weights: &LossWeights,
    diag: &mut Diagnostics,
) -> Result<NodeId> {
    let l = steps.len();
    assert_eq!(advantages.len(), l);
    assert_eq!(tree_targets.len(), l);
    let inv = 1.0 / l as f64;
    let mut terms: Vec<(f64, NodeId)> = Vec::with_capacity(4 * l + 1);
    for ((step, &adv), &target) in steps.iter().zip(advantages).zip(tree_targets) {
        terms.push((-weights.policy * adv * inv, step.log_pi));
        let residual = tape.affine(&[(1.0, step.value)], -target);
        let squared = tape.mul(residual, residual);
        terms.push((weights.value * inv, squared));
        terms.push((-weights.entropy * inv, step.entropy));
        terms.push((-weights.behavior * inv, step.log_mu));
    }
    if weights.elbo != 0.0 && !step_weights.is_empty() {
        let elbo = elbo_loss(tape, step_weights, diag);
        terms.push((weights.elbo, elbo));
    }
    let total = tape.affine(&terms, 0.0);
    if !tape.scalar(total).is_finite() {
        return Err(CoreError::NonFiniteLoss);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{policy_logprob_and_entropy, ActorCritic};
    use crate::config::ModelConfig;
    use crate::diffcore::GradStore;
    use crate::diffcore::ParameterSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights() -> LossWeights {
        LossWeights {
            value: 0.5,
            entropy: 0.01,
            elbo: 0.1,
            policy: 1.0,
            behavior: 1.0,
        }
    }

    fn scripted_step(tape: &mut Tape, log_pi: f64, entropy: f64, value: f64, log_mu: f64) -> StepTerms {
        StepTerms {
            log_pi: tape.scalar_const(log_pi),
            entropy: tape.scalar_const(entropy),
            value: tape.scalar_const(value),
            log_mu: tape.scalar_const(log_mu),
        }
    }

    #[test]
    fn vanishes_with_zero_advantages_matched_targets_and_flat_weights() {
        let mut tape = Tape::new(true);
        let mut diag = Diagnostics::default();
        let steps = vec![
            scripted_step(&mut tape, -1.3, 2.0, 0.7, -0.2),
            scripted_step(&mut tape, -0.4, 1.1, -0.6, -1.9),
        ];
        let targets = vec![0.7, -0.6];
        // uniform particle weights at 1 → zero step factors → zero evidence term
        let sw: Vec<Vec<NodeId>> = (0..2)
            .map(|_| (0..3).map(|_| tape.scalar_const(0.0)).collect())
            .collect();
        let w = LossWeights { entropy: 0.0, behavior: 0.0, ..weights() };
        let total =
            five_term_loss(&mut tape, &steps, &[0.0, 0.0], &targets, &sw, &w, &mut diag).unwrap();
        assert!(tape.scalar(total).abs() < 1e-12);
    }

    #[test]
    fn matches_term_by_term_hand_recomputation() {
        let mut tape = Tape::new(true);
        let mut diag = Diagnostics::default();
        let (lp, h, v, lm) = ([-1.2, -0.3], [1.7, 2.2], [0.4, -0.9], [-2.0, -0.5]);
        let adv = [1.5, -0.8];
        let targets = [1.0, -1.5];
        let logw = [[-0.2, -1.0], [-0.7, -0.1]];
        let steps: Vec<StepTerms> = (0..2)
            .map(|t| scripted_step(&mut tape, lp[t], h[t], v[t], lm[t]))
            .collect();
        let sw: Vec<Vec<NodeId>> = logw
            .iter()
            .map(|row| row.iter().map(|&w| tape.scalar_const(w)).collect())
            .collect();
        let w = weights();
        let total =
            five_term_loss(&mut tape, &steps, &adv, &targets, &sw, &w, &mut diag).unwrap();
        let mut expected = 0.0;
        for t in 0..2 {
            expected += 0.5 * (-w.policy * adv[t] * lp[t]
                + w.value * (v[t] - targets[t]).powi(2)
                - w.entropy * h[t]
                - w.behavior * lm[t]);
        }
        let lse = |a: f64, b: f64| a.max(b) + ((a - a.max(b)).exp() + (b - a.max(b)).exp()).ln();
        let elbo = -0.5
            * ((lse(logw[0][0], logw[0][1]) - 2.0f64.ln())
                + (lse(logw[1][0], logw[1][1]) - 2.0f64.ln()));
        expected += w.elbo * elbo;
        assert!((tape.scalar(total) - expected).abs() < 1e-12);
    }

    #[test]
    fn value_term_scales_linearly_with_its_weight() {
        let eval = |value_weight: f64| {
            let mut tape = Tape::new(true);
            let mut diag = Diagnostics::default();
            let steps = vec![scripted_step(&mut tape, -1.0, 1.5, 2.0, -0.4)];
            let w = LossWeights { value: value_weight, ..weights() };
            let total =
                five_term_loss(&mut tape, &steps, &[0.3], &[0.5], &[], &w, &mut diag).unwrap();
            tape.scalar(total)
        };
        let base = eval(0.0);
        let single = eval(0.5) - base;
        let double = eval(1.0) - base;
        assert!((double - 2.0 * single).abs() < 1e-12);
        assert!((single - 0.5 * 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn value_gradient_vanishes_when_predictions_equal_targets() {
        let cfg = ModelConfig {
            obs_dim: 4,
            action_dim: 2,
            h_dim: 5,
            z_dim: 3,
            belief_dim: 6,
            fc_dim: 6,
            act_enc_dim: 4,
            obs_enc_dim: 5,
            weight_feat_dim: 4,
            n_particles: 4,
        };
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let heads = ActorCritic::new(&mut params, &mut rng, &cfg);
        let mut tape = Tape::new(true);
        let mut diag = Diagnostics::default();
        let mut steps = Vec::new();
        let mut targets = Vec::new();
        for t in 0..3 {
            let b = tape.constant(vec![0.1 * t as f64, -0.2, 0.3, 0.0, 0.5, -0.1]);
            let value = heads.value(&mut tape, &params, b).unwrap();
            let (log_pi, entropy) =
                policy_logprob_and_entropy(&mut tape, &params, &heads, b, &[0.4, 0.6]).unwrap();
            targets.push(tape.scalar(value));
            steps.push(StepTerms { log_pi, entropy, value, log_mu: log_pi });
        }
        let w = LossWeights {
            value: 0.5,
            entropy: 0.0,
            elbo: 0.0,
            policy: 0.0,
            behavior: 0.0,
        };
        let total = five_term_loss(
            &mut tape,
            &steps,
            &[0.0; 3],
            &targets,
            &[],
            &w,
            &mut diag,
        )
        .unwrap();
        let mut store = GradStore::zeros_like(&params);
        tape.backward(total, &params, &mut store).unwrap();
        let norm: f64 = store
            .grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-10, "norm {norm}");
    }

    #[test]
    fn non_finite_total_is_rejected() {
        let mut tape = Tape::new(true);
        let mut diag = Diagnostics::default();
        let steps = vec![scripted_step(&mut tape, f64::NEG_INFINITY, 0.0, 0.0, 0.0)];
        let err = five_term_loss(&mut tape, &steps, &[1.0], &[0.0], &[], &weights(), &mut diag);
        assert!(matches!(err, Err(CoreError::NonFiniteLoss)));
    }
}
