//! Run configuration: one TOML file describes model, data and optimisation.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, SurrogateConfig};
use crate::circuit::CircuitConfig;
use crate::data::{generate_moving_blobs, load_npy, BlobSpec};
use crate::error::{Error, Result};
use crate::neuron::{LmhInit, NeuronKind, NeuronParams};
use crate::prednet::{NetworkConfig, RolloutPlan};
use crate::tensor::Tensor;
use crate::train::{OptimizerConfig, OptimizerKind, ScheduleConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelSection,
    #[serde(default)]
    pub circuit: CircuitConfig,
    pub arch: ArchSection,
    #[serde(default)]
    pub optim: OptimSection,
    pub data: DataSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: NeuronKind,
    #[serde(default = "half")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub vth: f64,
    #[serde(default)]
    pub truncate_reset_grad: bool,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub lmh: LmhInit,
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    /// `[C, H, W]`.
    pub frame: [usize; 3],
    #[serde(default = "two")]
    pub patch: usize,
    pub channels: Vec<usize>,
    #[serde(default = "five")]
    pub kernel: usize,
    #[serde(default = "sixteen")]
    pub norm_groups: usize,
    #[serde(default = "norm_eps")]
    pub norm_eps: f64,
}

fn two() -> usize {
    2
}

fn five() -> usize {
    5
}

fn sixteen() -> usize {
    16
}

fn norm_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub kind: OptimizerKind,
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub betas: [f64; 2],
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        let s = ScheduleConfig::default();
        OptimSection {
            kind: o.kind,
            lr_init: s.lr_init,
            lr_final: s.lr_final,
            warmup_epochs: s.warmup_epochs,
            epochs: s.total_epochs as usize,
            batch_size: 16,
            eval_batch: 16,
            betas: o.betas,
            eps: o.eps,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub t_in: usize,
    pub t_out: usize,
    #[serde(default = "yes")]
    pub teacher_forcing: bool,
    /// Add the input-phase next-frame predictions to the training loss.
    #[serde(default)]
    pub input_loss: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<BlobSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub npy: Option<NpySource>,
}

fn yes() -> bool {
    true
}

/// Axis order of rank-4 single-channel arrays.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NpyLayout {
    /// `[N, T, C, H, W]`.
    Ntchw,
    #[default]
    Nthw,
    /// Time-major, as in the public Moving MNIST test file.
    Tnhw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpySource {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub layout: NpyLayout,
    #[serde(default = "yes")]
    pub scale_u8: bool,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.network_config().validate().map_err(cfg_err)?;
        self.train_config().validate().map_err(cfg_err)?;
        match (&self.data.synthetic, &self.data.npy) {
            (Some(spec), None) => {
                spec.validate().map_err(cfg_err)?;
                let [c, h, w] = self.arch.frame;
                if c != 1 || [h, w] != spec.canvas {
                    return Err(Error::Config(format!(
                        "synthetic frames are [1, {}, {}] but arch.frame is {:?}",
                        spec.canvas[0], spec.canvas[1], self.arch.frame
                    )));
                }
                if spec.t_total < self.data.t_in + self.data.t_out {
                    return Err(Error::Config(format!(
                        "synthetic sequences have {} frames, t_in + t_out needs {}",
                        spec.t_total,
                        self.data.t_in + self.data.t_out
                    )));
                }
                if spec.n_train == 0 || spec.n_test == 0 {
                    return Err(Error::Config("synthetic data needs nonempty train and test splits".into()));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "exactly one of [data.synthetic] and [data.npy] must be given".into(),
                ))
            }
        }
        Ok(())
    }

    pub fn neuron_params(&self) -> NeuronParams {
        NeuronParams {
            kind: self.model.kind,
            alpha: self.model.alpha,
            vth: self.model.vth,
            lmh: self.model.lmh,
            surrogate: self.model.surrogate,
            truncate_reset_grad: self.model.truncate_reset_grad,
            modulation_override: None,
        }
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            frame: self.arch.frame,
            patch: self.arch.patch,
            channels: self.arch.channels.clone(),
            kernel: self.arch.kernel,
            norm_groups: self.arch.norm_groups,
            norm_eps: self.arch.norm_eps,
            neuron: self.neuron_params(),
            circuit: self.circuit.clone(),
        }
    }

    pub fn plan(&self) -> RolloutPlan {
        RolloutPlan {
            t_in: self.data.t_in,
            t_out: self.data.t_out,
            teacher_forcing: self.data.teacher_forcing,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optim;
        TrainConfig {
            epochs: o.epochs,
            batch_size: o.batch_size,
            plan: self.plan(),
            optimizer: OptimizerConfig {
                kind: o.kind,
                betas: o.betas,
                eps: o.eps,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
            },
            schedule: ScheduleConfig {
                lr_init: o.lr_init,
                lr_final: o.lr_final,
                warmup_epochs: o.warmup_epochs,
                total_epochs: o.epochs as f64,
            },
            grad_clip: o.grad_clip,
            precision: self.precision,
            seed: self.seed,
            eval_batch: o.eval_batch,
            input_loss: self.data.input_loss,
        }
    }

    /// Train and test sequences as `[N, T, C, H, W]`. Relative NPY paths
    /// resolve against `base`.
    pub fn load_data(&self, base: &Path) -> Result<(Tensor, Tensor)> {
        if let Some(spec) = &self.data.synthetic {
            let batch = generate_moving_blobs(spec)?;
            return Ok((batch.train()?, batch.test()?));
        }
        let src = self.data.npy.as_ref().expect("validated");
        let read = |p: &Path| -> Result<Tensor> {
            let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            let t = load_npy(&path, src.scale_u8)?;
            let t = to_ntchw(t, src.layout)?;
            let [c, h, w] = self.arch.frame;
            if t.shape()[2..] != [c, h, w] {
                return Err(Error::shape(
                    "npy data",
                    format!("{} holds frames {:?}, arch.frame is {:?}", path.display(), &t.shape()[2..], self.arch.frame),
                ));
            }
            if t.shape()[1] < self.data.t_in + self.data.t_out {
                return Err(Error::shape("npy data", format!("{} has too few frames per sequence", path.display())));
            }
            Ok(t)
        };
        Ok((read(&src.train)?, read(&src.test)?))
    }
}

fn to_ntchw(t: Tensor, layout: NpyLayout) -> Result<Tensor> {
    let s = t.shape().to_vec();
    match (layout, s.len()) {
        (NpyLayout::Ntchw, 5) => Ok(t),
        (NpyLayout::Nthw, 4) => t.reshape(&[s[0], s[1], 1, s[2], s[3]]),
        (NpyLayout::Tnhw, 4) => {
            let (tt, n, h, w) = (s[0], s[1], s[2], s[3]);
            let plane = h * w;
            let src = t.data();
            let mut data = vec![0.0; src.len()];
            for ti in 0..tt {
                for ni in 0..n {
                    let from = (ti * n + ni) * plane;
                    let to = (ni * tt + ti) * plane;
                    data[to..to + plane].copy_from_slice(&src[from..from + plane]);
                }
            }
            Tensor::new(vec![n, tt, 1, h, w], data)
        }
        (l, r) => Err(Error::shape("npy data", format!("layout {l:?} does not fit a rank-{r} array"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
seed = 3
output_dir = "runs/t"

[model]
kind = "stc_lif"

[circuit]
groups = 4
kernel = 3

[arch]
frame = [1, 16, 16]
channels = [16, 16, 16]
kernel = 3
norm_groups = 4

[optim]
epochs = 2
warmup_epochs = 1
batch_size = 4

[data]
t_in = 4
t_out = 4

[data.synthetic]
canvas = [16, 16]
n_objects = 2
object_size = 3
speed_range = [1, 2]
t_total = 8
seed = 5
intensity = 1.0
n_train = 8
n_test = 4
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_toml_str(TINY).unwrap();
        assert_eq!(cfg.model.kind, NeuronKind::StcLif);
        assert_eq!(cfg.arch.patch, 2);
        let again = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = TINY.replace("batch_size = 4", "batch_size = 4\nlearning_rat = 0.1");
        let err = RunConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn rejects_inconsistent_sections() {
        let text = TINY.replace("t_out = 4", "t_out = 5");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = TINY.replace("frame = [1, 16, 16]", "frame = [1, 8, 8]");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = TINY.replace("norm_groups = 4", "norm_groups = 5");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn time_major_layout() {
        let t = Tensor::from_fn(&[3, 2, 1, 1], |i| i as f64);
        let n = to_ntchw(t, NpyLayout::Tnhw).unwrap();
        assert_eq!(n.shape(), &[2, 3, 1, 1, 1]);
        assert_eq!(n.data(), &[0.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
    }
}
