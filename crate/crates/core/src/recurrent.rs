//! GRU cell and the bidirectional sequence encoders.
//!
//! Both encoders run on the true token length only: trailing PAD ids are
//! trimmed before the recurrence, so padding can never leak into states.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::model::GruRefs;
use crate::scalar::Scalar;
use crate::vocab::PAD;

/// Per-position states `[h_fwd_t; h_bwd_t]` plus the `[h_fwd_T; h_bwd_1]`
/// summary.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Vec<TensorId>,
    pub summary: TensorId,
}

/// One GRU update:
/// `z = sigm(Wz x + Uz h + bz)`, `r = sigm(Wr x + Ur h + br)`,
/// `cand = tanh(Wh x + Uh (r o h) + bh)`, `h' = (1-z) o h + z o cand`.
pub fn gru_cell_step<S: Scalar>(
    g: &mut Graph<S>,
    p: &GruRefs,
    h_prev: TensorId,
    input: TensorId,
) -> Result<TensorId> {
    let zi = g.matvec(p.wz, input)?;
    let zh = g.matvec(p.uz, h_prev)?;
    let zs = g.add(zi, zh)?;
    let zs = g.add(zs, p.bz)?;
    let z = g.sigmoid(zs)?;

    let ri = g.matvec(p.wr, input)?;
    let rh = g.matvec(p.ur, h_prev)?;
    let rs = g.add(ri, rh)?;
    let rs = g.add(rs, p.br)?;
    let r = g.sigmoid(rs)?;

    let gated = g.mul(r, h_prev)?;
    let hi = g.matvec(p.wh, input)?;
    let hh = g.matvec(p.uh, gated)?;
    let hs = g.add(hi, hh)?;
    let hs = g.add(hs, p.bh)?;
    let cand = g.tanh(hs)?;

    let keep = g.one_minus(z)?;
    let old = g.mul(keep, h_prev)?;
    let new = g.mul(z, cand)?;
    g.add(old, new)
}

fn trim_padding(ids: &[usize]) -> &[usize] {
    let mut end = ids.len();
    while end > 0 && ids[end - 1] == PAD {
        end -= 1;
    }
    &ids[..end]
}

fn run_direction<S: Scalar>(
    g: &mut Graph<S>,
    p: &GruRefs,
    embeds: &[TensorId],
    hidden: usize,
    reverse: bool,
) -> Result<Vec<TensorId>> {
    let mut h = g.zeros(vec![hidden]);
    let mut states = vec![h; embeds.len()];
    let order: Vec<usize> = if reverse {
        (0..embeds.len()).rev().collect()
    } else {
        (0..embeds.len()).collect()
    };
    for t in order {
        h = gru_cell_step(g, p, h, embeds[t])?;
        states[t] = h;
    }
    Ok(states)
}

/// Bidirectional encode over the unpadded prefix of `ids`.
pub fn encode_sequence<S: Scalar>(
    g: &mut Graph<S>,
    fwd: &GruRefs,
    bwd: &GruRefs,
    embedding: TensorId,
    hidden: usize,
    ids: &[usize],
) -> Result<EncoderOutput> {
    let ids = trim_padding(ids);
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let embeds: Vec<TensorId> = ids
        .iter()
        .map(|&id| g.lookup_row(embedding, id))
        .collect::<Result<_>>()?;
    let f_states = run_direction(g, fwd, &embeds, hidden, false)?;
    let b_states = run_direction(g, bwd, &embeds, hidden, true)?;
    let states: Vec<TensorId> = f_states
        .iter()
        .zip(&b_states)
        .map(|(&f, &b)| g.concat(&[f, b]))
        .collect::<Result<_>>()?;
    let summary = g.concat(&[*f_states.last().unwrap(), b_states[0]])?;
    Ok(EncoderOutput { states, summary })
}

/// Post encoder: keeps per-position states for attention plus the summary.
pub fn encode_post<S: Scalar>(
    g: &mut Graph<S>,
    fwd: &GruRefs,
    bwd: &GruRefs,
    embedding: TensorId,
    hidden: usize,
    ids: &[usize],
) -> Result<EncoderOutput> {
    encode_sequence(g, fwd, bwd, embedding, hidden, ids)
}

/// Response encoder: same structure, separate parameters, summary only.
pub fn encode_response<S: Scalar>(
    g: &mut Graph<S>,
    fwd: &GruRefs,
    bwd: &GruRefs,
    embedding: TensorId,
    hidden: usize,
    ids: &[usize],
) -> Result<TensorId> {
    Ok(encode_sequence(g, fwd, bwd, embedding, hidden, ids)?.summary)
}
