//! Parameter storage, dense layers and the Adam update.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Array, Bindings, Graph, GraphError, NodeId};

/// Named trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Array>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Array::len).sum()
    }

    pub fn map(&self) -> &BTreeMap<String, Array> {
        &self.map
    }

    pub fn bind<'a>(&'a self, b: &mut Bindings<'a>) {
        b.extend(&self.map);
    }

    pub fn bindings(&self) -> Bindings<'_> {
        let mut b = Bindings::new();
        self.bind(&mut b);
        b
    }

    /// Adds `W: [fan_in, fan_out]` drawn from N(0, gain^2 / fan_in) and a zero bias.
    pub fn init_dense<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) {
        let w = normal_array(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt());
        self.insert(format!("{name}.w"), w);
        self.insert(format!("{name}.b"), Array::zeros(&[1, fan_out]));
    }
}

pub fn normal_array<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Array {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = if std == 0.0 {
        vec![0.0; n]
    } else {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| dist.sample(rng)).collect()
    };
    Array::new(shape.to_vec(), data).expect("shape")
}

/// `x @ W + b` over the parameters `{name}.w` and `{name}.b`.
pub fn dense(
    g: &mut Graph,
    name: &str,
    x: NodeId,
    fan_in: usize,
    fan_out: usize,
) -> Result<NodeId, GraphError> {
    let w = g.param(&format!("{name}.w"), &[fan_in, fan_out])?;
    let b = g.param(&format!("{name}.b"), &[1, fan_out])?;
    g.linear(x, w, b)
}

/// Two dense layers with a tanh in between.
pub fn mlp2(g: &mut Graph, name: &str, x: NodeId, dims: [usize; 3]) -> Result<NodeId, GraphError> {
    let h = dense(g, &format!("{name}.fc0"), x, dims[0], dims[1])?;
    let h = g.tanh(h)?;
    dense(g, &format!("{name}.fc1"), h, dims[1], dims[2])
}

/// First-order adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Array>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
