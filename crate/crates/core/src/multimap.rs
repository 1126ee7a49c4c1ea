//! The bank of K mapping modules: independent affine maps from the post
//! summary to candidate response representations.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::model::AffineRefs;
use crate::scalar::Scalar;

/// `m_k = W_k x + b_k` for every module, in index order.
pub fn map_all<S: Scalar>(
    g: &mut Graph<S>,
    bank: &[AffineRefs],
    x: TensorId,
) -> Result<Vec<TensorId>> {
    if bank.is_empty() {
        return Err(Error::NoMappingModules);
    }
    bank.iter()
        .map(|m| {
            let wx = g.matvec(m.w, x)?;
            g.add(wx, m.b)
        })
        .collect()
}
