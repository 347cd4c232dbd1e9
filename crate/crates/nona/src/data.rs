//! Synthetic 2-D regression datasets on [-1,1]^2 and deterministic split
//! management.
//!
//! All randomness flows through ChaCha8 seeded from the dataset seed, and
//! Gaussian noise is produced by an explicit Box-Muller transform, so the
//! generated streams are fixed by (spec, seed) alone.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTarget {
    Linear,
    Radial,
    Spiral,
    Checkerboard,
}

impl SyntheticTarget {
    pub const ALL: [SyntheticTarget; 4] = [
        SyntheticTarget::Linear,
        SyntheticTarget::Radial,
        SyntheticTarget::Spiral,
        SyntheticTarget::Checkerboard,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticTarget::Linear => "linear",
            SyntheticTarget::Radial => "radial",
            SyntheticTarget::Spiral => "spiral",
            SyntheticTarget::Checkerboard => "checkerboard",
        }
    }

    /// Noise-free target value. The formulas are artifact conventions:
    /// a linear gradient, concentric rings, spiral arms, and alternating
    /// tiles.
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        match self {
            SyntheticTarget::Linear => (x1 + x2 + 2.0) / 4.0,
            SyntheticTarget::Radial => (2.0 * PI * (x1 * x1 + x2 * x2).sqrt()).sin(),
            SyntheticTarget::Spiral => {
                let r = (x1 * x1 + x2 * x2).sqrt();
                let theta = x2.atan2(x1);
                (4.0 * theta + 6.0 * r).sin()
            }
            SyntheticTarget::Checkerboard => (3.0 * PI * x1).sin() * (3.0 * PI * x2).sin(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub target: SyntheticTarget,
    pub n_points: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            target: SyntheticTarget::Radial,
            n_points: 2000,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// One standard normal draw via Box-Muller from two uniforms.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Sample (X, y): X uniform on [-1,1]^2, y = f(X) + N(0, noise_std).
pub fn generate(spec: &SyntheticSpec) -> Result<(Tensor, Tensor)> {
    if spec.n_points == 0 {
        return Err(Error::Contract("generate: n_points must be >= 1".into()));
    }
    if spec.noise_std < 0.0 {
        return Err(Error::Contract("generate: noise_std must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut xs = Vec::with_capacity(spec.n_points * 2);
    let mut ys = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let x1 = 2.0 * rng.gen::<f64>() - 1.0;
        let x2 = 2.0 * rng.gen::<f64>() - 1.0;
        let noise = if spec.noise_std > 0.0 {
            spec.noise_std * standard_normal(&mut rng)
        } else {
            0.0
        };
        xs.push(x1);
        xs.push(x2);
        ys.push(spec.target.eval(x1, x2) + noise);
    }
    Ok((Tensor::raw(vec![spec.n_points, 2], xs), Tensor::column(&ys)))
}

/// 80/20 development/test split, development further split 85/15 into
/// train/validation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitPlan {
    pub dev_fraction: f64,
    pub train_within_dev: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(seed: u64) -> Self {
        SplitPlan { dev_fraction: 0.8, train_within_dev: 0.85, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle then contiguous partition. Sizes use floor for dev and
/// train, remainders flowing to validation and test respectively.
pub fn split(n: usize, plan: &SplitPlan) -> Result<Splits> {
    if n < 10 {
        return Err(Error::Contract(format!("split: need n >= 10, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_dev = (n as f64 * plan.dev_fraction).floor() as usize;
    let n_train = (n_dev as f64 * plan.train_within_dev).floor() as usize;
    Ok(Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_dev].to_vec(),
        test: idx[n_dev..].to_vec(),
    })
}

/// Gather rows of a matrix (or column vector) by index.
pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::raw(vec![idx.len(), c], data)
}

/// CSV export: `x1,x2,y` header, 17 significant digits.
pub fn to_csv(x: &Tensor, y: &Tensor) -> String {
    let mut out = String::from("x1,x2,y\n");
    for i in 0..x.rows() {
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e}\n",
            x.at(i, 0),
            x.at(i, 1),
            y.data()[i]
        ));
    }
    out
}
