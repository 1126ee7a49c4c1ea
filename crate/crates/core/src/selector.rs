//! Posterior mapping selection: a relevance softmax over the candidate
//! representations, sampled differentiably with the Gumbel-Softmax trick.
//!
//! Selection is training-only machinery — it needs the encoded target
//! response, which does not exist at generation time. Generation instead
//! picks a mapping module uniformly (see [`crate::decoder`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::scalar::Scalar;

/// Whether the decoder consumes the hard one-hot sample (straight-through,
/// the default) or the soft relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    #[serde(rename = "hard")]
    Hard,
    #[serde(rename = "soft")]
    Soft,
}

/// Outcome of one posterior selection draw.
#[derive(Debug, Clone)]
pub struct SelectionResult<S: Scalar> {
    /// Posterior distribution over mapping modules.
    pub pi: Vec<S>,
    /// Sampled module index, `argmax(soft)`.
    pub z: usize,
    /// Gumbel-Softmax relaxation of the sample.
    pub soft: Vec<S>,
    /// One-hot vector at `z`.
    pub hard: Vec<S>,
    /// Temperature used for the draw.
    pub tau: f64,
    pub pi_node: TensorId,
    pub soft_node: TensorId,
    pub hard_node: TensorId,
}

/// Relevance posterior `pi_k = softmax_k(m_k . y)` over the candidates.
pub fn posterior_distribution<S: Scalar>(
    g: &mut Graph<S>,
    candidates: &[TensorId],
    y_proj: TensorId,
) -> Result<TensorId> {
    if candidates.is_empty() {
        return Err(Error::NoMappingModules);
    }
    let dots: Vec<TensorId> = candidates
        .iter()
        .map(|&m| g.dot(m, y_proj))
        .collect::<Result<_>>()?;
    let stacked = g.concat(&dots)?;
    g.softmax(stacked, None)
}

/// Project the response summary into candidate space so the relevance dot
/// product is dimensionally consistent.
pub fn project_response<S: Scalar>(
    g: &mut Graph<S>,
    w_y: TensorId,
    y: TensorId,
) -> Result<TensorId> {
    g.matvec(w_y, y)
}

/// Draw `g_i = -log(-log(u_i))` perturbations, relax with temperature `tau`,
/// and build both the soft sample and the straight-through hard sample.
pub fn gumbel_softmax_sample<S: Scalar>(
    g: &mut Graph<S>,
    pi: TensorId,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<SelectionResult<S>> {
    if tau <= 0.0 {
        return Err(Error::BadTemperature(tau));
    }
    let k = g.values(pi).len();
    let noise: Vec<S> = (0..k)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            S::from_f64(-(-u.ln()).ln())
        })
        .collect();
    let noise_node = g.constant(noise);
    let log_pi = g.log(pi)?;
    let perturbed = g.add(log_pi, noise_node)?;
    let scaled = g.scale(perturbed, 1.0 / tau)?;
    let soft_node = g.softmax(scaled, None)?;

    let soft = g.values(soft_node).to_vec();
    let z = argmax(&soft);
    let mut hard = vec![S::zero(); k];
    hard[z] = S::one();
    let hard_node = g.straight_through(soft_node, hard.clone())?;

    Ok(SelectionResult {
        pi: g.values(pi).to_vec(),
        z,
        soft,
        hard,
        tau,
        pi_node: pi,
        soft_node,
        hard_node,
    })
}

/// Weighted combination of the candidates: the hard path evaluates to `m_z`
/// exactly while gradients follow the soft relaxation; the soft path blends
/// candidates by their soft weights.
pub fn select_candidate<S: Scalar>(
    g: &mut Graph<S>,
    candidates: &[TensorId],
    result: &SelectionResult<S>,
    mode: SelectionMode,
) -> Result<TensorId> {
    let stacked = g.stack_rows(candidates)?;
    let weights = match mode {
        SelectionMode::Hard => result.hard_node,
        SelectionMode::Soft => result.soft_node,
    };
    g.vecmat(weights, stacked)
}

pub(crate) fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_candidates(g: &mut Graph<f64>, rows: &[Vec<f64>]) -> Vec<TensorId> {
        rows.iter().map(|r| g.constant(r.clone())).collect()
    }

    #[test]
    fn identical_candidates_give_uniform_pi() {
        let mut g = Graph::<f64>::new();
        let cands = constant_candidates(&mut g, &[vec![0.5, 1.0]; 4]);
        let y = g.constant(vec![2.0, -1.0]);
        let pi = posterior_distribution(&mut g, &cands, y).unwrap();
        for &p in g.values(pi) {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_arithmetic_on_known_dots() {
        // dots (0, ln 3) => pi = (0.25, 0.75)
        let mut g = Graph::<f64>::new();
        let cands = constant_candidates(&mut g, &[vec![0.0], vec![3f64.ln()]]);
        let y = g.constant(vec![1.0]);
        let pi = posterior_distribution(&mut g, &cands, y).unwrap();
        assert!((g.values(pi)[0] - 0.25).abs() < 1e-12);
        assert!((g.values(pi)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pi_is_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let dots = [0.3, -1.2, 2.0];
        let c = 17.5;
        let cands = constant_candidates(&mut g, &dots.iter().map(|&d| vec![d]).collect::<Vec<_>>());
        let shifted = constant_candidates(&mut g, &dots.iter().map(|&d| vec![d + c]).collect::<Vec<_>>());
        let y = g.constant(vec![1.0]);
        let a = posterior_distribution(&mut g, &cands, y).unwrap();
        let b = posterior_distribution(&mut g, &shifted, y).unwrap();
        for (x, y) in g.values(a).to_vec().iter().zip(g.values(b)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_projection_gives_uniform_downstream() {
        let mut g = Graph::<f64>::new();
        let w = g.zeros(vec![2, 4]);
        let y = g.constant(vec![1.0, 2.0, 3.0, 4.0]);
        let proj = project_response(&mut g, w, y).unwrap();
        assert_eq!(g.values(proj), &[0.0, 0.0]);
        let cands = constant_candidates(&mut g, &[vec![1.0, 0.0], vec![0.0, 2.0], vec![5.0, 5.0]]);
        let pi = posterior_distribution(&mut g, &cands, proj).unwrap();
        for &p in g.values(pi) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_projection_preserves_y() {
        let mut g = Graph::<f64>::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.leaf(vec![3, 3], eye, false).unwrap();
        let y = g.constant(vec![0.1, -0.2, 0.3]);
        let proj = project_response(&mut g, w, y).unwrap();
        assert_eq!(g.values(proj), g.values(y));
    }

    #[test]
    fn empty_candidate_list_is_an_error() {
        let mut g = Graph::<f64>::new();
        let y = g.constant(vec![1.0]);
        assert!(matches!(
            posterior_distribution(&mut g, &[], y),
            Err(Error::NoMappingModules)
        ));
    }

    #[test]
    fn non_positive_temperature_is_an_error() {
        let mut g = Graph::<f64>::new();
        let pi = g.constant(vec![0.5, 0.5]);
        let mut rng = crate::rng::stream(0, "tau");
        assert!(matches!(
            gumbel_softmax_sample(&mut g, pi, 0.0, &mut rng),
            Err(Error::BadTemperature(_))
        ));
    }

    #[test]
    fn fixed_seed_reproduces_the_draw() {
        let draw = || {
            let mut g = Graph::<f64>::new();
            let logits = g.constant(vec![0.1, 1.2, -0.4]);
            let pi = g.softmax(logits, None).unwrap();
            let mut rng = crate::rng::stream(123, "gumbel");
            let r = gumbel_softmax_sample(&mut g, pi, 0.67, &mut rng).unwrap();
            (r.z, r.soft.clone(), r.hard.clone())
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn low_temperature_saturates_soft_sample() {
        let mut rng = crate::rng::stream(7, "gumbel-sat");
        for _ in 0..50 {
            let mut g = Graph::<f64>::new();
            let pi = g.constant(vec![0.25, 0.75]);
            let r = gumbel_softmax_sample(&mut g, pi, 0.01, &mut rng).unwrap();
            let max = r.soft.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max >= 0.999, "soft sample not saturated: {:?}", r.soft);
            assert_eq!(r.hard[r.z], 1.0);
        }
    }

    #[test]
    fn gumbel_argmax_frequency_matches_pi() {
        // Monte-Carlo oracle: the Gumbel-max trick samples exactly from pi
        let mut rng = crate::rng::stream(11, "gumbel-mc");
        let target = [0.25, 0.75];
        let n = 100_000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            let mut g = Graph::<f64>::new();
            let pi = g.constant(target.to_vec());
            let r = gumbel_softmax_sample(&mut g, pi, 0.67, &mut rng).unwrap();
            counts[r.z] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!((freq - target[i]).abs() < 0.01, "component {i}: {freq}");
        }
    }

    #[test]
    fn hard_selection_returns_m_z_exactly() {
        let mut g = Graph::<f64>::new();
        let cands = constant_candidates(&mut g, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let pi = g.constant(vec![0.2, 0.5, 0.3]);
        let mut rng = crate::rng::stream(3, "st");
        let r = gumbel_softmax_sample(&mut g, pi, 0.67, &mut rng).unwrap();
        let sel = select_candidate(&mut g, &cands, &r, SelectionMode::Hard).unwrap();
        assert_eq!(g.values(sel), g.values(cands[r.z]));
    }

    #[test]
    fn soft_selection_with_huge_tau_approaches_candidate_mean() {
        let mut g = Graph::<f64>::new();
        let cands = constant_candidates(&mut g, &[vec![0.0, 0.0], vec![3.0, 9.0]]);
        let pi = g.constant(vec![0.5, 0.5]);
        let mut rng = crate::rng::stream(5, "st-soft");
        let r = gumbel_softmax_sample(&mut g, pi, 1e6, &mut rng).unwrap();
        let sel = select_candidate(&mut g, &cands, &r, SelectionMode::Soft).unwrap();
        assert!((g.values(sel)[0] - 1.5).abs() < 1e-3);
        assert!((g.values(sel)[1] - 4.5).abs() < 1e-3);
    }

    #[test]
    fn straight_through_grad_is_soft_weight_times_downstream() {
        // loss = w . selected(hard). The straight-through gradient w.r.t.
        // candidate j must be soft[j] * w, the gradient of the relaxed
        // objective with the soft weights frozen; verify against central
        // finite differences of that relaxation.
        let probe = [0.7, -1.3];
        let cand_vals = [vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -2.0]];

        let mut g = Graph::<f64>::new();
        let cands: Vec<TensorId> = cand_vals
            .iter()
            .map(|v| g.leaf(vec![2], v.clone(), true).unwrap())
            .collect();
        let pi = g.constant(vec![0.3, 0.45, 0.25]);
        let mut rng = crate::rng::stream(17, "st-grad");
        let r = gumbel_softmax_sample(&mut g, pi, 0.67, &mut rng).unwrap();
        let sel = select_candidate(&mut g, &cands, &r, SelectionMode::Hard).unwrap();
        let w = g.constant(probe.to_vec());
        let loss = g.dot(sel, w).unwrap();
        g.backward(loss).unwrap();

        for (j, &cand) in cands.iter().enumerate() {
            let ad = g.grad(cand).unwrap();
            for i in 0..2 {
                // finite differences of the frozen-soft relaxation
                let eps = 1e-6;
                let fd = {
                    let eval = |delta: f64| {
                        let mut acc = 0.0;
                        for (k, cv) in cand_vals.iter().enumerate() {
                            for d in 0..2 {
                                let mut x = cv[d];
                                if k == j && d == i {
                                    x += delta;
                                }
                                acc += r.soft[k] * x * probe[d];
                            }
                        }
                        acc
                    };
                    (eval(eps) - eval(-eps)) / (2.0 * eps)
                };
                assert!((ad[i] - fd).abs() < 1e-8, "cand {j}[{i}]: {} vs {fd}", ad[i]);
                assert!((ad[i] - r.soft[j] * probe[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k_equals_one_degenerates_to_deterministic_choice() {
        let mut g = Graph::<f64>::new();
        let cand = g.constant(vec![0.4, 0.6]);
        let y = g.constant(vec![1.0, 1.0]);
        let pi = posterior_distribution(&mut g, &[cand], y).unwrap();
        assert_eq!(g.values(pi), &[1.0]);
        let mut rng = crate::rng::stream(0, "k1");
        let r = gumbel_softmax_sample(&mut g, pi, 0.67, &mut rng).unwrap();
        assert_eq!(r.z, 0);
        assert_eq!(r.soft, vec![1.0]);
    }
}
