//! Central finite-difference verification of the reverse-mode gradients,
//! reported per named parameter.

use serde::Serialize;

use crate::data::{batches, encode_pairs, synth_corpus, Batch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ModelDims, ModelParams};
use crate::objectives::{joint_loss, LossOptions, LossVariant};
use crate::scalar::Scalar;
use crate::selector::SelectionMode;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub worst: f64,
    pub pass: bool,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `loss_fn(params, with_grad)` must rebuild the forward pass from scratch
/// with any sampling noise frozen, populate parameter gradients when
/// `with_grad` is set, and return the loss value. Two value-only
/// evaluations are compared first to reject non-deterministic losses.
/// The per-parameter score is `max|g_ad - g_fd| / (max|g_fd| + epsilon)`.
pub fn grad_check<S, F>(
    mut loss_fn: F,
    params: &mut ModelParams<S>,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut ModelParams<S>, bool) -> Result<S>,
{
    if epsilon <= 0.0 || epsilon > 1e-2 {
        return Err(Error::BadEpsilon(epsilon));
    }
    params.zero_grads();
    let l1 = loss_fn(params, true)?.to_f64();
    let analytic: Vec<Vec<f64>> = params
        .params()
        .iter()
        .map(|p| p.grad.iter().map(|g| g.to_f64()).collect())
        .collect();
    params.zero_grads();
    let l2 = loss_fn(params, false)?.to_f64();
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::NonDeterministicLoss { first: l1, second: l2 });
    }

    let mut checks = Vec::with_capacity(params.params().len());
    for pi in 0..params.params().len() {
        let n = params.params()[pi].values.len();
        let mut max_abs_diff = 0.0f64;
        let mut max_fd = 0.0f64;
        for vi in 0..n {
            let original = params.params()[pi].values[vi];
            let base = original.to_f64();

            params.params_mut()[pi].values[vi] = S::from_f64(base + epsilon);
            let plus = loss_fn(params, false)?.to_f64();
            params.params_mut()[pi].values[vi] = S::from_f64(base - epsilon);
            let minus = loss_fn(params, false)?.to_f64();
            params.params_mut()[pi].values[vi] = original;

            let fd = (plus - minus) / (2.0 * epsilon);
            max_fd = max_fd.max(fd.abs());
            max_abs_diff = max_abs_diff.max((analytic[pi][vi] - fd).abs());
        }
        checks.push(ParamCheck {
            name: params.params()[pi].name.clone(),
            max_rel_err: max_abs_diff / (max_fd + epsilon),
        });
    }

    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        worst,
        pass: worst <= tolerance,
        params: checks,
    })
}

/// Which loss the model-scale check suite differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Generation,
    Matching,
    Joint,
}

impl std::fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckTarget::Generation => write!(f, "generation"),
            CheckTarget::Matching => write!(f, "matching"),
            CheckTarget::Joint => write!(f, "joint"),
        }
    }
}

/// Deterministic model-plus-batch scenario for the check suite.
pub struct CheckScenario {
    pub dims: ModelDims,
    pub batch: Batch,
    pub tau: f64,
    pub seed: u64,
}

impl CheckScenario {
    /// Small model over a synthetic batch: hidden and embedding width 8,
    /// three mapping modules, vocabulary capped at 20, sequences at 5.
    pub fn standard(seed: u64) -> Result<CheckScenario> {
        let raw = synth_corpus(4, 4, seed)?;
        let vocab = Vocab::build(&raw, 20)?;
        let pairs = encode_pairs(&raw, &vocab, 5)?;
        let mut all = batches(&pairs, 3, seed)?;
        let batch = all.remove(0);
        Ok(CheckScenario {
            dims: ModelDims { vocab: vocab.size(), embed: 8, hidden: 8, mappings: 3 },
            batch,
            tau: 0.67,
            seed,
        })
    }

    /// Run the finite-difference check for one loss against a fresh model.
    /// Gumbel noise and negative draws are frozen by reseeding inside every
    /// evaluation; selection runs in soft mode so the loss is smooth.
    pub fn run(&self, target: CheckTarget, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
        let mut params = ModelParams::<f64>::init(self.dims, self.seed);
        let opts = LossOptions {
            tau: self.tau,
            selection_mode: SelectionMode::Soft,
            variant: LossVariant::Standard,
            matching_weight: if target == CheckTarget::Generation { 0.0 } else { 1.0 },
        };
        let batch = &self.batch;
        let hidden = self.dims.hidden;
        let noise_seed = self.seed;
        grad_check(
            move |p: &mut ModelParams<f64>, with_grad: bool| {
                let mut g = Graph::<f64>::new();
                let refs = p.leaf_into(&mut g, with_grad)?;
                let mut gumbel = crate::rng::stream(noise_seed, "gradcheck-gumbel");
                let mut negative = crate::rng::stream(noise_seed, "gradcheck-negative");
                let out = joint_loss(&mut g, &refs, batch, hidden, &opts, &mut gumbel, &mut negative)?;
                let node = match target {
                    CheckTarget::Generation => out.l_g_node,
                    CheckTarget::Matching => out.l_m_node,
                    CheckTarget::Joint => out.total_node,
                };
                if with_grad {
                    g.backward(node)?;
                    p.accumulate_grads(&g);
                }
                Ok(g.scalar_value(node))
            },
            &mut params,
            epsilon,
            tolerance,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_passes_tightly() {
        let dims = ModelDims { vocab: 6, embed: 3, hidden: 2, mappings: 2 };
        let mut params = ModelParams::<f64>::init(dims, 4);
        let report = grad_check(
            |p: &mut ModelParams<f64>, with_grad: bool| {
                let mut g = Graph::<f64>::new();
                let refs = p.leaf_into(&mut g, with_grad)?;
                let _ = refs;
                let mut terms = Vec::new();
                for (id, _) in g.param_leaves().to_vec() {
                    let sq = g.mul(id, id)?;
                    terms.push(g.sum(sq)?);
                }
                let stack = g.concat(&terms)?;
                let total = g.sum(stack)?;
                let loss = g.scale(total, 0.5)?;
                if with_grad {
                    g.backward(loss)?;
                    p.accumulate_grads(&g);
                }
                Ok(g.scalar_value(loss))
            },
            &mut params,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "worst {}", report.worst);
        assert_eq!(report.params.len(), params.params().len());
    }

    #[test]
    fn detects_non_deterministic_loss() {
        let dims = ModelDims { vocab: 6, embed: 3, hidden: 2, mappings: 1 };
        let mut params = ModelParams::<f64>::init(dims, 4);
        let mut calls = 0u64;
        let err = grad_check(
            move |_: &mut ModelParams<f64>, _| {
                calls += 1;
                Ok(calls as f64)
            },
            &mut params,
            1e-6,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministicLoss { .. }));
    }

    #[test]
    fn rejects_bad_epsilon() {
        let dims = ModelDims { vocab: 6, embed: 3, hidden: 2, mappings: 1 };
        let mut params = ModelParams::<f64>::init(dims, 4);
        let err = grad_check(
            |_: &mut ModelParams<f64>, _| Ok(0.0),
            &mut params,
            0.5,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::BadEpsilon(_)));
    }

    #[test]
    fn tiny_joint_model_passes() {
        // reduced-width smoke version of the full suite (integration tests
        // run the spec-scale widths)
        let raw = synth_corpus(3, 3, 8).unwrap();
        let vocab = Vocab::build(&raw, 20).unwrap();
        let pairs = encode_pairs(&raw, &vocab, 4).unwrap();
        let mut all = batches(&pairs, 3, 8).unwrap();
        let scenario = CheckScenario {
            dims: ModelDims { vocab: vocab.size(), embed: 3, hidden: 3, mappings: 2 },
            batch: all.remove(0),
            tau: 0.67,
            seed: 8,
        };
        let report = scenario.run(CheckTarget::Joint, 1e-6, 1e-5).unwrap();
        assert!(report.pass, "worst {} at {:?}", report.worst, report.worst_param());
    }
}
