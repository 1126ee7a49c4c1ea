//! Attention-equipped GRU decoder: teacher-forced scoring for training and
//! greedy/sampled generation seeded from any mapping module.
//!
//! Attention queries use the previous decoder state (the only acyclic
//! reading of the score equation), and the generation distribution is
//! `softmax(W_o [s_t; c_t] + b_o)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::model::{GraphRefs, ModelParams};
use crate::multimap::map_all;
use crate::recurrent::{encode_post, gru_cell_step};
use crate::scalar::Scalar;
use crate::selector::argmax;
use crate::vocab::EOS;

/// Encoder states prepared for repeated attention queries: the stacked
/// state matrix, the precomputed `W_h h_i` rows, and the validity mask.
#[derive(Debug, Clone)]
pub struct PreparedAttention {
    pub h_mat: TensorId,
    wh_mat: TensorId,
    mask: Option<Vec<bool>>,
}

/// One decoding step's outputs.
#[derive(Debug, Clone)]
pub struct DecoderStep {
    pub s: TensorId,
    pub c: TensorId,
    pub alpha: TensorId,
    pub logits: TensorId,
}

/// How generation picks its mapping module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingChoice {
    Index(usize),
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

pub fn prepare_attention<S: Scalar>(
    g: &mut Graph<S>,
    refs: &GraphRefs,
    states: &[TensorId],
    mask: Option<&[bool]>,
) -> Result<PreparedAttention> {
    if states.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(m) = mask {
        if m.len() != states.len() {
            return Err(Error::ShapeMismatch {
                op: "attention",
                details: format!("mask length {} vs {} states", m.len(), states.len()),
            });
        }
        if !m.iter().any(|&keep| keep) {
            return Err(Error::AllPositionsMasked);
        }
    }
    let wh_rows: Vec<TensorId> = states
        .iter()
        .map(|&h| g.matvec(refs.attn_wh, h))
        .collect::<Result<_>>()?;
    Ok(PreparedAttention {
        h_mat: g.stack_rows(states)?,
        wh_mat: g.stack_rows(&wh_rows)?,
        mask: mask.map(<[bool]>::to_vec),
    })
}

/// Additive attention: `e_i = v . tanh(W_h h_i + W_s s)`, masked softmax,
/// context `c = sum_i alpha_i h_i`.
pub fn attention_step<S: Scalar>(
    g: &mut Graph<S>,
    refs: &GraphRefs,
    prep: &PreparedAttention,
    s: TensorId,
) -> Result<(TensorId, TensorId)> {
    let query = g.matvec(refs.attn_ws, s)?;
    let pre = g.add_row_broadcast(prep.wh_mat, query)?;
    let act = g.tanh(pre)?;
    let scores = g.matvec(act, refs.attn_v)?;
    let alpha = g.softmax(scores, prep.mask.as_deref())?;
    let c = g.vecmat(alpha, prep.h_mat)?;
    Ok((alpha, c))
}

/// Single-shot attention over raw encoder states.
pub fn attention<S: Scalar>(
    g: &mut Graph<S>,
    refs: &GraphRefs,
    states: &[TensorId],
    s: TensorId,
    mask: Option<&[bool]>,
) -> Result<(TensorId, TensorId)> {
    let prep = prepare_attention(g, refs, states, mask)?;
    attention_step(g, refs, &prep, s)
}

/// One decoder step: attend with `s_prev`, feed `[e(y_prev); c_t]` to the
/// GRU, and score the vocabulary from `[s_t; c_t]`.
pub fn decode_step<S: Scalar>(
    g: &mut Graph<S>,
    refs: &GraphRefs,
    prep: &PreparedAttention,
    s_prev: TensorId,
    y_prev: usize,
) -> Result<DecoderStep> {
    let (alpha, c) = attention_step(g, refs, prep, s_prev)?;
    let e = g.lookup_row(refs.embedding, y_prev)?;
    let input = g.concat(&[e, c])?;
    let s = gru_cell_step(g, &refs.dec_gru, s_prev, input)?;
    let sc = g.concat(&[s, c])?;
    let proj = g.matvec(refs.out_w, sc)?;
    let logits = g.add(proj, refs.out_b)?;
    Ok(DecoderStep { s, c, alpha, logits })
}

/// Teacher-forced pass from initial state `m_sel` over the BOS-prefixed
/// input tokens; returns one step (one logit row) per input token, so a
/// length-`T'` response yields `T' + 1` rows including the EOS prediction.
pub fn decode_teacher_forced<S: Scalar>(
    g: &mut Graph<S>,
    refs: &GraphRefs,
    m_sel: TensorId,
    input_ids: &[usize],
    prep: &PreparedAttention,
) -> Result<Vec<DecoderStep>> {
    let mut steps = Vec::with_capacity(input_ids.len());
    let mut state = m_sel;
    for &tok in input_ids {
        let step = decode_step(g, refs, prep, state, tok)?;
        state = step.s;
        steps.push(step);
    }
    Ok(steps)
}

/// Generate a response for `post_ids`, seeding the decoder with the chosen
/// mapping module. Greedy decoding takes the argmax each step (ties resolve
/// to the lowest id); sampling draws from the step distribution.
pub fn generate<S: Scalar>(
    params: &ModelParams<S>,
    post_ids: &[usize],
    mapping: MappingChoice,
    max_len: usize,
    mode: DecodeMode,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let k = match mapping {
        MappingChoice::Index(k) => {
            if k >= params.dims.mappings {
                return Err(Error::BadConfig(format!(
                    "mapping index {k} out of range (K = {})",
                    params.dims.mappings
                )));
            }
            k
        }
        MappingChoice::Random => rng.gen_range(0..params.dims.mappings),
    };
    let mut g = Graph::<S>::new();
    let refs = params.leaf_into(&mut g, false)?;
    let encoded = encode_post(
        &mut g,
        &refs.post_fwd,
        &refs.post_bwd,
        refs.embedding,
        params.dims.hidden,
        post_ids,
    )?;
    let candidates = map_all(&mut g, &refs.mappings[k..=k], encoded.summary)?;
    let prep = prepare_attention(&mut g, &refs, &encoded.states, None)?;

    let mut state = candidates[0];
    let mut prev = crate::vocab::BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let step = decode_step(&mut g, &refs, &prep, state, prev)?;
        let next = match mode {
            DecodeMode::Greedy => argmax(g.values(step.logits)),
            DecodeMode::Sample => {
                let probs = g.softmax(step.logits, None)?;
                sample_index(g.values(probs), rng)
            }
        };
        if next == EOS {
            break;
        }
        out.push(next);
        state = step.s;
        prev = next;
    }
    Ok(out)
}

/// One greedy response per mapping module, in module order.
pub fn generate_all<S: Scalar>(
    params: &ModelParams<S>,
    post_ids: &[usize],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut dummy = crate::rng::stream(0, "generate-all");
    (0..params.dims.mappings)
        .map(|k| {
            generate(
                params,
                post_ids,
                MappingChoice::Index(k),
                max_len,
                DecodeMode::Greedy,
                &mut dummy,
            )
        })
        .collect()
}

fn sample_index<S: Scalar>(probs: &[S], rng: &mut impl Rng) -> usize {
    let draw = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64();
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}
