use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Moving-squares generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    /// `[H, W]`.
    pub canvas: [usize; 2],
    pub n_objects: usize,
    pub object_size: usize,
    /// Inclusive per-axis speed range in pixels per frame.
    pub speed_range: [u32; 2],
    pub t_total: usize,
    pub seed: u64,
    pub intensity: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            canvas: [16, 16],
            n_objects: 2,
            object_size: 3,
            speed_range: [1, 2],
            t_total: 8,
            seed: 0,
            intensity: 1.0,
            n_train: 64,
            n_test: 16,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.canvas;
        let bad = |d: String| Err(Error::invalid("blobs", d));
        if self.object_size == 0 || self.object_size > h || self.object_size > w {
            return bad(format!("object size {} does not fit canvas {h}x{w}", self.object_size));
        }
        if self.t_total < 2 {
            return bad(format!("t_total must be at least 2, got {}", self.t_total));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return bad(format!("intensity must lie in (0, 1], got {}", self.intensity));
        }
        if self.speed_range[0] > self.speed_range[1] {
            return bad(format!("speed range {:?} is reversed", self.speed_range));
        }
        if self.n_train + self.n_test == 0 {
            return bad("no sequences requested".into());
        }
        Ok(())
    }
}

/// Top-left corner and velocity of one square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectState {
    pub y: i64,
    pub x: i64,
    pub vy: i64,
    pub vx: i64,
}

/// Advances one coordinate, mirroring off the walls at `0` and `max`.
fn advance(pos: i64, vel: i64, max: i64) -> (i64, i64) {
    if max == 0 {
        return (0, vel);
    }
    let (mut p, mut v) = (pos + vel, vel);
    loop {
        if p < 0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

impl ObjectState {
    pub fn step(self, max_y: i64, max_x: i64) -> Self {
        let (y, vy) = advance(self.y, self.vy, max_y);
        let (x, vx) = advance(self.x, self.vx, max_x);
        ObjectState { y, x, vy, vx }
    }
}

fn sequence_rng(spec: &BlobSpec, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    rng
}

/// Object states for every frame of sequence `index`.
pub fn trajectory(spec: &BlobSpec, index: u64) -> Result<Vec<Vec<ObjectState>>> {
    spec.validate()?;
    let mut rng = sequence_rng(spec, index);
    let max_y = (spec.canvas[0] - spec.object_size) as i64;
    let max_x = (spec.canvas[1] - spec.object_size) as i64;
    let [lo, hi] = spec.speed_range;
    let velocity = |rng: &mut ChaCha8Rng| {
        let s = rng.gen_range(lo..=hi) as i64;
        if rng.gen_bool(0.5) {
            s
        } else {
            -s
        }
    };
    let mut objs: Vec<ObjectState> = (0..spec.n_objects)
        .map(|_| ObjectState {
            y: rng.gen_range(0..=max_y),
            x: rng.gen_range(0..=max_x),
            vy: velocity(&mut rng),
            vx: velocity(&mut rng),
        })
        .collect();
    let mut out = Vec::with_capacity(spec.t_total);
    for _ in 0..spec.t_total {
        out.push(objs.clone());
        for o in &mut objs {
            *o = o.step(max_y, max_x);
        }
    }
    Ok(out)
}

fn render(spec: &BlobSpec, objs: &[ObjectState], frame: &mut [f64]) {
    let w = spec.canvas[1];
    let s = spec.object_size;
    for o in objs {
        for dy in 0..s {
            let row = (o.y as usize + dy) * w;
            for dx in 0..s {
                let px = &mut frame[row + o.x as usize + dx];
                *px = px.max(spec.intensity);
            }
        }
    }
}

/// Generated videos with a train/test split along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// `[N, T, 1, H, W]`, train sequences first.
    pub frames: Tensor,
    pub n_train: usize,
    pub n_test: usize,
}

impl SequenceBatch {
    pub fn new(frames: Tensor, n_train: usize, n_test: usize) -> Result<Self> {
        let (n, t, ..) = frames.dims5("sequence batch")?;
        if n != n_train + n_test {
            return Err(Error::shape(
                "sequence batch",
                format!("{n} sequences but split asks for {n_train}+{n_test}"),
            ));
        }
        if t < 2 {
            return Err(Error::shape("sequence batch", "need at least two frames"));
        }
        Ok(SequenceBatch { frames, n_train, n_test })
    }

    pub fn train(&self) -> Result<Tensor> {
        self.frames.slice_batch(0, self.n_train)
    }

    pub fn test(&self) -> Result<Tensor> {
        self.frames.slice_batch(self.n_train, self.n_train + self.n_test)
    }
}

/// Renders `n_train + n_test` sequences. Sequence `i` is a pure function of
/// `(spec, i)`.
pub fn generate_moving_blobs(spec: &BlobSpec) -> Result<SequenceBatch> {
    spec.validate()?;
    let n = spec.n_train + spec.n_test;
    let [h, w] = spec.canvas;
    let frame_len = h * w;
    let mut data = vec![0.0; n * spec.t_total * frame_len];
    for i in 0..n {
        let traj = trajectory(spec, i as u64)?;
        for (t, objs) in traj.iter().enumerate() {
            let off = (i * spec.t_total + t) * frame_len;
            render(spec, objs, &mut data[off..off + frame_len]);
        }
    }
    let frames = Tensor::new(vec![n, spec.t_total, 1, h, w], data)?;
    SequenceBatch::new(frames, spec.n_train, spec.n_test)
}
