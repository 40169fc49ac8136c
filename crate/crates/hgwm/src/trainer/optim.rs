use std::collections::BTreeMap;

use super::config::OptimizerKind;
use crate::autodiff::{Archive, ParamStore, Tensor};
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer with per-parameter state; parameters without a gradient in a
/// step are left untouched and their moments do not decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Autodiff(format!("gradient for unknown parameter `{name}`")))?;
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data_mut().iter_mut().zip(g) {
                        *w -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *w -= self.lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_into(&self, a: &mut Archive) {
        a.meta.insert("opt.kind".into(), self.kind.to_string());
        a.meta.insert("opt.lr".into(), format!("{:?}", self.lr));
        a.meta.insert("opt.t".into(), self.t.to_string());
        for (name, m) in &self.m {
            a.push(format!("opt.m/{name}"), Tensor::vector(m.clone()));
        }
        for (name, v) in &self.v {
            a.push(format!("opt.v/{name}"), Tensor::vector(v.clone()));
        }
    }

    pub fn read_from(a: &Archive) -> Result<Self> {
        let get = |k: &str| {
            a.meta
                .get(k)
                .ok_or_else(|| Error::Manifest(format!("checkpoint lacks `{k}`")))
        };
        let mut opt = Self::new(
            get("opt.kind")?.parse()?,
            get("opt.lr")?.parse().map_err(|_| Error::Manifest("bad opt.lr".into()))?,
        );
        opt.t = get("opt.t")?.parse().map_err(|_| Error::Manifest("bad opt.t".into()))?;
        for (name, t) in &a.tensors {
            if let Some(n) = name.strip_prefix("opt.m/") {
                opt.m.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix("opt.v/") {
                opt.v.insert(n.to_string(), t.data().to_vec());
            }
        }
        Ok(opt)
    }
}
