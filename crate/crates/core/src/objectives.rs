//! Generation loss, matching loss with in-batch negative sampling, and the
//! joint objective that wires encoders, mapping modules, posterior
//! selection, and the decoder together.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::decoder::{decode_teacher_forced, prepare_attention};
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::model::GraphRefs;
use crate::multimap::map_all;
use crate::recurrent::{encode_post, encode_response};
use crate::scalar::Scalar;
use crate::selector::{
    gumbel_softmax_sample, posterior_distribution, project_response, select_candidate,
    SelectionMode, SelectionResult,
};

/// Which form of the matching loss to optimize. The standard form is the
/// negative-sampling cross-entropy; the literal form flips the sign of the
/// negative term and is unbounded below (kept for fidelity experiments).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "paper_literal")]
    PaperLiteral,
}

/// Loss values for one batch, plus the per-example selection draws for
/// logging.
#[derive(Debug, Clone)]
pub struct LossBundle<S: Scalar> {
    pub l_g: S,
    pub l_m: S,
    pub total: S,
    pub selections: Vec<SelectionResult<S>>,
}

/// Graph-side handles to the assembled joint loss.
#[derive(Debug)]
pub struct JointLoss<S: Scalar> {
    pub total_node: TensorId,
    pub l_g_node: TensorId,
    pub l_m_node: TensorId,
    pub bundle: LossBundle<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub tau: f64,
    pub selection_mode: SelectionMode,
    pub variant: LossVariant,
    /// Weight on the matching loss; `0.0` disables the matching head
    /// entirely (the ablation that demonstrates mechanism collapse).
    pub matching_weight: f64,
}

/// Per-sequence generation loss: mean over non-pad target positions of
/// `-log softmax(logits)[gold]`.
pub fn generation_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits_rows: &[TensorId],
    targets: &[usize],
    pad_mask: &[bool],
) -> Result<TensorId> {
    if logits_rows.len() != targets.len() || targets.len() != pad_mask.len() {
        return Err(Error::TargetLengthMismatch {
            rows: logits_rows.len(),
            targets: targets.len().min(pad_mask.len()),
        });
    }
    let mut picks = Vec::with_capacity(targets.len());
    for ((&row, &gold), &keep) in logits_rows.iter().zip(targets).zip(pad_mask) {
        if !keep {
            continue;
        }
        let ls = g.log_softmax(row)?;
        picks.push(g.pick(ls, gold)?);
    }
    if picks.is_empty() {
        return Err(Error::TargetLengthMismatch { rows: logits_rows.len(), targets: 0 });
    }
    let stacked = g.concat(&picks)?;
    let mean = g.mean(stacked)?;
    g.neg(mean)
}

/// Relevance probability `sigma(x . y)`.
pub fn matching_probability<S: Scalar>(
    g: &mut Graph<S>,
    x: TensorId,
    y: TensorId,
) -> Result<TensorId> {
    let d = g.dot(x, y)?;
    g.sigmoid(d)
}

/// Matching loss on one (post, golden response, negative response) triple.
pub fn matching_loss<S: Scalar>(
    g: &mut Graph<S>,
    x: TensorId,
    y_pos: TensorId,
    y_neg: TensorId,
    variant: LossVariant,
) -> Result<TensorId> {
    let pos_dot = g.dot(x, y_pos)?;
    let neg_dot = g.dot(x, y_neg)?;
    // -log sigma(a) = softplus(-a); -log(1 - sigma(b)) = softplus(b)
    let neg_pos = g.neg(pos_dot)?;
    let pos_term = g.softplus(neg_pos)?;
    match variant {
        LossVariant::Standard => {
            let neg_term = g.softplus(neg_dot)?;
            g.add(pos_term, neg_term)
        }
        LossVariant::PaperLiteral => {
            // -log sigma(a) + log sigma(b) = softplus(-a) - softplus(-b)
            let flipped = g.neg(neg_dot)?;
            let neg_term = g.softplus(flipped)?;
            g.sub(pos_term, neg_term)
        }
    }
}

/// For each example, pick a different example's response uniformly from the
/// same batch.
pub fn sample_negative(batch_len: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if batch_len < 2 {
        return Err(Error::BatchTooSmall(batch_len));
    }
    Ok((0..batch_len)
        .map(|i| {
            let j = rng.gen_range(0..batch_len - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect())
}

/// Full forward pass over one batch: encode both sides, map, select by
/// posterior relevance, teacher-force the decoder from the selected
/// candidate, and combine the generation and matching losses.
///
/// Gumbel noise and negative sampling draw from separate streams so the two
/// consumers never perturb each other.
pub fn joint_loss<S: Scalar>(
    g: &mut Graph<S>,
    refs: &GraphRefs,
    batch: &Batch,
    hidden: usize,
    opts: &LossOptions,
    gumbel_rng: &mut impl Rng,
    negative_rng: &mut impl Rng,
) -> Result<JointLoss<S>> {
    if batch.is_empty() {
        return Err(Error::EmptySplit);
    }
    let n = batch.len();

    let mut posts = Vec::with_capacity(n);
    let mut responses = Vec::with_capacity(n);
    for i in 0..n {
        posts.push(encode_post(
            g,
            &refs.post_fwd,
            &refs.post_bwd,
            refs.embedding,
            hidden,
            batch.post(i),
        )?);
        responses.push(encode_response(
            g,
            &refs.resp_fwd,
            &refs.resp_bwd,
            refs.embedding,
            hidden,
            batch.bare_response(i),
        )?);
    }

    let negatives = if opts.matching_weight != 0.0 {
        Some(sample_negative(n, negative_rng)?)
    } else {
        None
    };

    let mut gen_losses = Vec::with_capacity(n);
    let mut match_losses = Vec::with_capacity(n);
    let mut selections = Vec::with_capacity(n);
    for i in 0..n {
        let enc = &posts[i];
        let candidates = map_all(g, &refs.mappings, enc.summary)?;
        let y_proj = project_response(g, refs.resp_proj, responses[i])?;
        let pi = posterior_distribution(g, &candidates, y_proj)?;
        let selection = gumbel_softmax_sample(g, pi, opts.tau, gumbel_rng)?;
        let m_sel = select_candidate(g, &candidates, &selection, opts.selection_mode)?;
        selections.push(selection);

        let prep = prepare_attention(g, refs, &enc.states, None)?;
        let steps = decode_teacher_forced(g, refs, m_sel, batch.decoder_input(i), &prep)?;
        let logits: Vec<TensorId> = steps.iter().map(|s| s.logits).collect();
        let targets = batch.decoder_target(i);
        let mask = vec![true; targets.len()];
        gen_losses.push(generation_loss(g, &logits, targets, &mask)?);

        if let Some(neg) = &negatives {
            match_losses.push(matching_loss(
                g,
                enc.summary,
                responses[i],
                responses[neg[i]],
                opts.variant,
            )?);
        }
    }

    let gen_stack = g.concat(&gen_losses)?;
    let l_g = g.mean(gen_stack)?;
    let l_m = if match_losses.is_empty() {
        g.scalar_const(S::zero())
    } else {
        let stack = g.concat(&match_losses)?;
        g.mean(stack)?
    };
    let total = if opts.matching_weight == 1.0 || opts.matching_weight == 0.0 {
        g.add(l_g, l_m)?
    } else {
        let weighted = g.scale(l_m, opts.matching_weight)?;
        g.add(l_g, weighted)?
    };

    Ok(JointLoss {
        total_node: total,
        l_g_node: l_g,
        l_m_node: l_m,
        bundle: LossBundle {
            l_g: g.scalar_value(l_g),
            l_m: g.scalar_value(l_m),
            total: g.scalar_value(total),
            selections,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{batches, encode_pairs, synth_corpus};
    use crate::model::{ModelDims, ModelParams};
    use crate::vocab::Vocab;

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let mut g = Graph::<f64>::new();
        let vocab = 7;
        let rows = [g.zeros(vec![vocab]), g.zeros(vec![vocab])];
        let loss = generation_loss(&mut g, &rows, &[3, 5], &[true, true]).unwrap();
        assert!((g.scalar_value(loss) - (vocab as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_gold_logits_drive_loss_to_zero() {
        let mut g = Graph::<f64>::new();
        let mut v = vec![0.0; 5];
        v[2] = 60.0;
        let row = g.constant(v);
        let loss = generation_loss(&mut g, &[row], &[2], &[true]).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-9);
    }

    #[test]
    fn two_step_toy_case_matches_hand_computation() {
        // rows [[ln 2, 0], [0, 0]] with targets [0, 1] cost 0.5 * ln 3
        let mut g = Graph::<f64>::new();
        let r1 = g.constant(vec![2f64.ln(), 0.0]);
        let r2 = g.constant(vec![0.0, 0.0]);
        let loss = generation_loss(&mut g, &[r1, r2], &[0, 1], &[true, true]).unwrap();
        assert!((g.scalar_value(loss) - 0.5 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pad_positions_are_excluded_from_the_loss() {
        // masked-loss oracle: padded row + mask equals the unpadded loss
        let mut g = Graph::<f64>::new();
        let r1 = g.constant(vec![0.4, -0.3, 0.1]);
        let r2 = g.constant(vec![-1.0, 0.8, 0.0]);
        let pad_row = g.constant(vec![9.0, 9.0, 9.0]);
        let unpadded = generation_loss(&mut g, &[r1, r2], &[2, 0], &[true, true]).unwrap();
        let padded = generation_loss(
            &mut g,
            &[r1, r2, pad_row],
            &[2, 0, 0],
            &[true, true, false],
        )
        .unwrap();
        assert_eq!(g.scalar_value(unpadded), g.scalar_value(padded));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let r = g.zeros(vec![4]);
        assert!(matches!(
            generation_loss(&mut g, &[r], &[1, 2], &[true, true]),
            Err(Error::TargetLengthMismatch { .. })
        ));
    }

    #[test]
    fn matching_probability_closed_forms() {
        let mut g = Graph::<f64>::new();
        // orthogonal vectors: p = 0.5
        let x = g.constant(vec![1.0, 0.0]);
        let y = g.constant(vec![0.0, 1.0]);
        let p = matching_probability(&mut g, x, y).unwrap();
        assert!((g.scalar_value(p) - 0.5).abs() < 1e-12);

        // x . y = ln 3: p = 0.75
        let x2 = g.constant(vec![3f64.ln()]);
        let y2 = g.constant(vec![1.0]);
        let p2 = matching_probability(&mut g, x2, y2).unwrap();
        assert!((g.scalar_value(p2) - 0.75).abs() < 1e-12);

        // antisymmetry: p(x, y) + p(x, -y) = 1
        let x3 = g.constant(vec![0.7, -0.4]);
        let y3 = g.constant(vec![0.2, 1.3]);
        let y3n = g.neg(y3).unwrap();
        let pa = matching_probability(&mut g, x3, y3).unwrap();
        let pb = matching_probability(&mut g, x3, y3n).unwrap();
        assert!((g.scalar_value(pa) + g.scalar_value(pb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matching_loss_zero_dot_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![0.0, 0.0]);
        let yp = g.constant(vec![1.0, 1.0]);
        let yn = g.constant(vec![-1.0, 1.0]);
        let std = matching_loss(&mut g, x, yp, yn, LossVariant::Standard).unwrap();
        assert!((g.scalar_value(std) - 2.0 * 2f64.ln()).abs() < 1e-9);
        let lit = matching_loss(&mut g, x, yp, yn, LossVariant::PaperLiteral).unwrap();
        assert!(g.scalar_value(lit).abs() < 1e-9);
    }

    #[test]
    fn matching_loss_hand_oracle() {
        // pos dot ln 3, neg dot -ln 3, standard: 2 ln(4/3)
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![1.0]);
        let yp = g.constant(vec![3f64.ln()]);
        let yn = g.constant(vec![-(3f64.ln())]);
        let loss = matching_loss(&mut g, x, yp, yn, LossVariant::Standard).unwrap();
        assert!((g.scalar_value(loss) - 2.0 * (4f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn literal_variant_is_unbounded_below() {
        // as x . y_neg decreases the literal loss decreases without bound
        let mut last = f64::INFINITY;
        for neg in [0.0, -2.0, -5.0, -20.0, -80.0] {
            let mut g = Graph::<f64>::new();
            let x = g.constant(vec![1.0]);
            let yp = g.constant(vec![0.0]);
            let yn = g.constant(vec![neg]);
            let loss = matching_loss(&mut g, x, yp, yn, LossVariant::PaperLiteral).unwrap();
            let v = g.scalar_value(loss);
            assert!(v < last);
            last = v;
        }
        assert!(last < -70.0);
    }

    #[test]
    fn standard_variant_is_bounded_below_by_zero() {
        for (p, n) in [(5.0, -5.0), (20.0, -20.0), (0.3, 0.2)] {
            let mut g = Graph::<f64>::new();
            let x = g.constant(vec![1.0]);
            let yp = g.constant(vec![p]);
            let yn = g.constant(vec![n]);
            let loss = matching_loss(&mut g, x, yp, yn, LossVariant::Standard).unwrap();
            assert!(g.scalar_value(loss) >= 0.0);
        }
    }

    #[test]
    fn negative_sampling_never_selects_self() {
        let mut rng = crate::rng::stream(1, "neg-self");
        for _ in 0..10_000 {
            let idx = sample_negative(5, &mut rng).unwrap();
            for (i, &j) in idx.iter().enumerate() {
                assert_ne!(i, j);
                assert!(j < 5);
            }
        }
    }

    #[test]
    fn negative_sampling_pairs_the_other_example_in_a_two_batch() {
        let mut rng = crate::rng::stream(2, "neg-two");
        let idx = sample_negative(2, &mut rng).unwrap();
        assert_eq!(idx, vec![1, 0]);
        assert!(matches!(sample_negative(1, &mut rng), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn negative_sampling_is_uniform_over_eligible_indices() {
        let mut rng = crate::rng::stream(3, "neg-uniform");
        let n = 100_000;
        let mut counts = vec![0usize; 4];
        for _ in 0..n {
            let idx = sample_negative(4, &mut rng).unwrap();
            counts[idx[0]] += 1; // index 0 may draw 1, 2 or 3
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 3.0).abs() < 0.02 / 3.0 + 0.005, "freq {freq}");
        }
    }

    fn tiny_setup(k: usize) -> (ModelParams<f64>, Vocab, Vec<Batch>) {
        let raw = synth_corpus(6, 2, 5).unwrap();
        let vocab = Vocab::build(&raw, 64).unwrap();
        let pairs = encode_pairs(&raw, &vocab, 20).unwrap();
        let bs = batches(&pairs, 4, 1).unwrap();
        let params = ModelParams::init(
            ModelDims { vocab: vocab.size(), embed: 5, hidden: 4, mappings: k },
            33,
        );
        (params, vocab, bs)
    }

    fn opts() -> LossOptions {
        LossOptions {
            tau: 0.67,
            selection_mode: SelectionMode::Hard,
            variant: LossVariant::Standard,
            matching_weight: 1.0,
        }
    }

    #[test]
    fn joint_loss_total_is_exactly_the_sum() {
        let (params, _, bs) = tiny_setup(3);
        let mut g = Graph::<f64>::new();
        let refs = params.leaf_into(&mut g, true).unwrap();
        let mut grng = crate::rng::stream(9, "joint-g");
        let mut nrng = crate::rng::stream(9, "joint-n");
        let out = joint_loss(&mut g, &refs, &bs[0], 4, &opts(), &mut grng, &mut nrng).unwrap();
        assert_eq!(out.bundle.total, out.bundle.l_g + out.bundle.l_m);
        assert!(out.bundle.l_g >= 0.0);
        assert_eq!(out.bundle.selections.len(), bs[0].len());
    }

    #[test]
    fn untrained_generation_loss_is_near_ln_vocab() {
        let (params, vocab, bs) = tiny_setup(3);
        let mut g = Graph::<f64>::new();
        let refs = params.leaf_into(&mut g, false).unwrap();
        let mut grng = crate::rng::stream(10, "joint-lnv-g");
        let mut nrng = crate::rng::stream(10, "joint-lnv-n");
        let out = joint_loss(&mut g, &refs, &bs[0], 4, &opts(), &mut grng, &mut nrng).unwrap();
        let expect = (vocab.size() as f64).ln();
        assert!(
            (out.bundle.l_g - expect).abs() / expect < 0.05,
            "L_G {} vs ln V {expect}",
            out.bundle.l_g
        );
    }

    #[test]
    fn matching_weight_zero_disables_the_matching_term() {
        let (params, _, bs) = tiny_setup(3);
        let mut g = Graph::<f64>::new();
        let refs = params.leaf_into(&mut g, true).unwrap();
        let mut grng = crate::rng::stream(11, "joint-nolm-g");
        let mut nrng = crate::rng::stream(11, "joint-nolm-n");
        let mut o = opts();
        o.matching_weight = 0.0;
        let out = joint_loss(&mut g, &refs, &bs[0], 4, &o, &mut grng, &mut nrng).unwrap();
        assert_eq!(out.bundle.l_m, 0.0);
        assert_eq!(out.bundle.total, out.bundle.l_g);
    }

    #[test]
    fn k_equals_one_reduces_to_vanilla_seq2seq_loss() {
        let (params, _, bs) = tiny_setup(1);
        let batch = &bs[0];
        let mut g = Graph::<f64>::new();
        let refs = params.leaf_into(&mut g, false).unwrap();
        let mut grng = crate::rng::stream(12, "joint-k1-g");
        let mut nrng = crate::rng::stream(12, "joint-k1-n");
        let out = joint_loss(&mut g, &refs, batch, 4, &opts(), &mut grng, &mut nrng).unwrap();

        // hand-built vanilla pipeline: s0 = W_1 x + b_1, no selection at all
        let mut g2 = Graph::<f64>::new();
        let refs2 = params.leaf_into(&mut g2, false).unwrap();
        let mut per_seq = Vec::new();
        for i in 0..batch.len() {
            let enc = encode_post(
                &mut g2,
                &refs2.post_fwd,
                &refs2.post_bwd,
                refs2.embedding,
                4,
                batch.post(i),
            )
            .unwrap();
            let m = map_all(&mut g2, &refs2.mappings, enc.summary).unwrap()[0];
            let prep = prepare_attention(&mut g2, &refs2, &enc.states, None).unwrap();
            let steps = decode_teacher_forced(&mut g2, &refs2, m, batch.decoder_input(i), &prep)
                .unwrap();
            let logits: Vec<TensorId> = steps.iter().map(|s| s.logits).collect();
            let mask = vec![true; batch.decoder_target(i).len()];
            per_seq.push(
                generation_loss(&mut g2, &logits, batch.decoder_target(i), &mask).unwrap(),
            );
        }
        let stack = g2.concat(&per_seq).unwrap();
        let vanilla = g2.mean(stack).unwrap();
        assert_eq!(out.bundle.l_g, g2.scalar_value(vanilla));
        for sel in &out.bundle.selections {
            assert_eq!(sel.z, 0);
            assert_eq!(sel.pi, vec![1.0]);
        }
    }
}
