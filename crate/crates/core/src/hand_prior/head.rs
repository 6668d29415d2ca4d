use rand::Rng;

use crate::autodiff::{Array, Graph, GraphError, NodeId};
use crate::nn::{dense, Params};

use super::{build_lbs, HandTemplate, LbsNodes};

/// Prior vertex distribution: skinned mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDistribution {
    /// `[V, 3]`
    pub mean: Array,
    /// `[V, 3]`, all ones.
    pub variance: Array,
}

impl PriorDistribution {
    pub fn from_mean(mean: Array) -> Self {
        let variance = Array::ones(mean.shape());
        Self { mean, variance }
    }
}

/// Graph nodes produced by [`build_prior_head`].
#[derive(Clone, Copy, Debug)]
pub struct PriorNodes {
    /// `[1, S]`
    pub shape: NodeId,
    /// `[K, 3]`
    pub pose: NodeId,
    pub lbs: LbsNodes,
}

/// Dense layers `D -> hidden -> hidden -> S + 3K`, the last one zero-initialized
/// so an untrained head predicts the rest pose.
pub fn init_prior_head<R: Rng>(
    params: &mut Params,
    rng: &mut R,
    t: &HandTemplate,
    d: usize,
    hidden: usize,
) {
    let out = t.shape_count() + 3 * t.joint_count;
    params.init_dense(rng, "prior.fc0", d, hidden, 1.0);
    params.init_dense(rng, "prior.fc1", hidden, hidden, 1.0);
    params.init_dense(rng, "prior.fc2", hidden, out, 0.0);
}

/// Maps the global feature `f: [1, D]` to shape/pose coefficients and skins them.
pub fn build_prior_head(
    g: &mut Graph,
    t: &HandTemplate,
    f: NodeId,
    d: usize,
    hidden: usize,
) -> Result<PriorNodes, GraphError> {
    let (s, k) = (t.shape_count(), t.joint_count);
    let h = dense(g, "prior.fc0", f, d, hidden)?;
    let h = g.tanh(h)?;
    let h = dense(g, "prior.fc1", h, hidden, hidden)?;
    let h = g.tanh(h)?;
    let out = dense(g, "prior.fc2", h, hidden, s + 3 * k)?;
    let shape = g.slice(out, 1, 0, s)?;
    let pose = g.slice(out, 1, s, s + 3 * k)?;
    let pose = g.reshape(pose, &[k, 3])?;
    let lbs = build_lbs(g, t, shape, pose)?;
    Ok(PriorNodes { shape, pose, lbs })
}
