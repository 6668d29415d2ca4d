use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, Bindings, Graph, GraphError, NodeId};

/// Worst entry found by a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares analytic gradients with central differences over every
/// parameter entry. Error per entry is `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check(
    graph: &Graph,
    output: NodeId,
    bindings: &Bindings,
    eps: f64,
) -> Result<GradCheckReport, GraphError> {
    grad_check_sampled(graph, output, bindings, eps, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `max_entries` randomly chosen
/// entries of each parameter.
pub fn grad_check_sampled(
    graph: &Graph,
    output: NodeId,
    bindings: &Bindings,
    eps: f64,
    max_entries: usize,
    seed: u64,
) -> Result<GradCheckReport, GraphError> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(GraphError::Contract(format!("eps {eps} outside (0, 1e-3]")));
    }
    let values = graph.forward(bindings)?;
    if let Some(node) = values.first_non_finite() {
        return Err(GraphError::Numeric {
            node,
            op: graph.op_kind(NodeId(node)),
        });
    }
    let analytic = graph.backward(&values, output)?;
    drop(values);

    let names = graph.param_names();
    let mut owned: BTreeMap<String, Array> = BTreeMap::new();
    for name in &names {
        let v = bindings
            .get(name)
            .ok_or_else(|| GraphError::Binding(name.clone()))?;
        owned.insert(name.clone(), v.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        entries_checked: 0,
    };
    for name in &names {
        let len = owned[name].len();
        let indices: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        for idx in indices {
            let orig = owned[name].data()[idx];
            let mut eval_at = |x: f64| -> Result<f64, GraphError> {
                owned.get_mut(name).unwrap().data_mut()[idx] = x;
                let mut b = bindings.clone();
                for (k, v) in &owned {
                    b.insert(k.as_str(), v);
                }
                let vals = graph.forward(&b)?;
                let y = vals.get(output).item();
                if !y.is_finite() {
                    let node = vals.first_non_finite().unwrap_or(output.0);
                    return Err(GraphError::Numeric {
                        node,
                        op: graph.op_kind(NodeId(node)),
                    });
                }
                Ok(y)
            };
            let plus = eval_at(orig + eps)?;
            let minus = eval_at(orig - eps)?;
            owned.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(name).unwrap().data()[idx];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if report.worst_param.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(name.clone());
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
