//! Temporal-order sensitivity and inference-time parameter traces.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::prednet::{NetworkParams, RolloutPlan};
use crate::tensor::Tensor;
use crate::train::{predict, reported_mse, split_sequences};

#[derive(Clone, Debug, PartialEq)]
pub struct ShuffleReport {
    pub mse_ordered: f64,
    pub mse_shuffled: f64,
    /// `(shuffled - ordered) / ordered`.
    pub gap_ratio: f64,
}

/// Draws one non-identity permutation of `0..t_in` per sequence.
pub fn shuffle_permutations(n: usize, t_in: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if t_in < 2 {
        return Err(Error::invalid("shuffle", format!("t_in must be at least 2, got {t_in}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..t_in).collect();
    Ok((0..n)
        .map(|_| loop {
            let mut p = identity.clone();
            p.shuffle(&mut rng);
            if p != identity {
                break p;
            }
        })
        .collect())
}

/// Reorders the first `perm.len()` frames of each sequence.
fn permute_inputs(frames: &Tensor, perms: &[Vec<usize>]) -> Result<Tensor> {
    let (n, t, c, h, w) = frames.dims5("shuffle")?;
    if perms.len() != n {
        return Err(Error::shape("shuffle", format!("{} permutations for {n} sequences", perms.len())));
    }
    let fl = c * h * w;
    let src = frames.data();
    let mut out = src.to_vec();
    for (i, p) in perms.iter().enumerate() {
        let mut seen = vec![false; p.len()];
        for &j in p {
            if j >= p.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::invalid("shuffle", format!("{p:?} is not a permutation")));
            }
        }
        if p.len() > t {
            return Err(Error::shape("shuffle", "permutation longer than sequence"));
        }
        for (dst, &from) in p.iter().enumerate() {
            let a = (i * t + dst) * fl;
            let b = (i * t + from) * fl;
            out[a..a + fl].copy_from_slice(&src[b..b + fl]);
        }
    }
    Tensor::new(frames.shape().to_vec(), out)
}

/// Reported MSE with ordered inputs vs inputs permuted by `perms`.
pub fn shuffle_probe_with(
    net: &NetworkParams,
    frames: &Tensor,
    plan: &RolloutPlan,
    perms: &[Vec<usize>],
    chunk: usize,
) -> Result<ShuffleReport> {
    if plan.t_in < 2 {
        return Err(Error::invalid("shuffle", format!("t_in must be at least 2, got {}", plan.t_in)));
    }
    if perms.iter().any(|p| p.len() != plan.t_in) {
        return Err(Error::shape("shuffle", "permutations must cover exactly t_in frames"));
    }
    let (_, targets) = split_sequences(frames, plan)?;
    let ordered = predict(net, frames, plan, chunk)?;
    let shuffled = predict(net, &permute_inputs(frames, perms)?, plan, chunk)?;
    let mse_ordered = reported_mse(&ordered, &targets)?;
    let mse_shuffled = reported_mse(&shuffled, &targets)?;
    Ok(ShuffleReport {
        mse_ordered,
        mse_shuffled,
        gap_ratio: (mse_shuffled - mse_ordered) / mse_ordered,
    })
}

/// [`shuffle_probe_with`] using seeded non-identity permutations.
pub fn shuffle_probe(net: &NetworkParams, frames: &Tensor, plan: &RolloutPlan, seed: u64) -> Result<ShuffleReport> {
    let (n, ..) = frames.dims5("shuffle")?;
    let perms = shuffle_permutations(n, plan.t_in, seed)?;
    shuffle_probe_with(net, frames, plan, &perms, 16)
}

/// One inference step of a single neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTraceRow {
    pub step: usize,
    pub beta: f64,
    pub gamma: f64,
    pub alpha: Option<f64>,
    pub m: f64,
    pub spike: f64,
}

/// Location of one neuron: layer and `(channel, y, x)` in its feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeuronSite {
    pub layer: usize,
    pub channel: usize,
    pub y: usize,
    pub x: usize,
}

/// Effective neuron parameters at every rollout step for sequence 0 of
/// `frames`.
pub fn paramtrace(net: &NetworkParams, frames: &Tensor, plan: &RolloutPlan, site: NeuronSite) -> Result<Vec<ParamTraceRow>> {
    let cfg = net.config();
    let (hf, wf) = cfg.feature_hw();
    let ch = *cfg
        .channels
        .get(site.layer)
        .ok_or_else(|| Error::invalid("paramtrace", format!("no layer {}", site.layer)))?;
    if site.channel >= ch || site.y >= hf || site.x >= wf {
        return Err(Error::invalid("paramtrace", format!("site {site:?} outside layer {}", site.layer)));
    }
    let idx = (site.channel * hf + site.y) * wf + site.x;
    let one = frames.slice_batch(0, 1)?;
    let mut rows = Vec::new();
    net.rollout_with(plan, &one, |step, probes| {
        let p = &probes[site.layer];
        rows.push(ParamTraceRow {
            step: step + 1,
            beta: p.beta.data()[idx],
            gamma: p.gamma.data()[idx],
            alpha: p.alpha,
            m: p.m.data()[idx],
            spike: p.spikes.data()[idx],
        });
        Ok(())
    })?;
    Ok(rows)
}

pub fn paramtrace_csv(rows: &[ParamTraceRow]) -> String {
    let mut s = String::from("step,beta,gamma,alpha,m,spike\n");
    for r in rows {
        let alpha = r.alpha.map(|a| a.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{alpha},{},{}", r.step, r.beta, r.gamma, r.m, r.spike).unwrap();
    }
    s
}
