use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub betas: [f64; 2],
    pub eps: f64,
    pub momentum: f64,
    /// Decoupled: `θ ← θ − lr·wd·θ` before the gradient update.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            betas: [0.9, 0.999],
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.betas[0]) || !unit(self.betas[1]) || !unit(self.momentum) {
            return Err(Error::Config("betas and momentum must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Tensor,
    second: Option<Tensor>,
}

/// Adam or SGD with momentum over a named parameter map.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: IndexMap<String, Moments>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            moments: IndexMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// First-moment (or momentum) buffer of a parameter.
    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).map(|m| &m.first)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).and_then(|m| m.second.as_ref())
    }

    /// Applies one update. All gradients are checked before any parameter
    /// changes; a parameter without a gradient entry is left alone.
    pub fn step(&mut self, params: &mut IndexMap<String, Tensor>, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid("optimizer", format!("gradient for unknown parameter `{name}`")))?;
            g.expect_same_shape(p, "optimizer")?;
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let cfg = self.config.clone();
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let adam = cfg.kind == OptimizerKind::Adam;
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: Tensor::zeros(p.shape()),
                second: adam.then(|| Tensor::zeros(p.shape())),
            });
            let decay = lr * cfg.weight_decay;
            match cfg.kind {
                OptimizerKind::Adam => {
                    let [b1, b2] = cfg.betas;
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let v = m.second.as_mut().expect("adam keeps second moments");
                    let (pd, md, vd) = (p.data_mut(), m.first.data_mut(), v.data_mut());
                    for (i, &gi) in g.data().iter().enumerate() {
                        md[i] = b1 * md[i] + (1.0 - b1) * gi;
                        vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                        let mhat = md[i] / c1;
                        let vhat = vd[i] / c2;
                        if decay != 0.0 {
                            pd[i] -= decay * pd[i];
                        }
                        pd[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let (pd, bd) = (p.data_mut(), m.first.data_mut());
                    for (i, &gi) in g.data().iter().enumerate() {
                        bd[i] = cfg.momentum * bd[i] + gi;
                        if decay != 0.0 {
                            pd[i] -= decay * pd[i];
                        }
                        pd[i] -= lr * bd[i];
                    }
                }
            }
        }
        Ok(())
    }
}
