//! Non-differentiable comparison predictors: exact brute-force k-NN
//! regression with the standard hyperparameter grid, and closed-form
//! linear regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnWeighting {
    Uniform,
    Distance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    /// Minkowski order, 1 or 2.
    pub p: u8,
    pub weighting: KnnWeighting,
}

/// The grid from which k-NN is tuned: k in {3,5,7}, p in {1,2},
/// weights in {uniform, distance}. Order encodes the tie-break
/// (smaller k, then smaller p, then uniform first).
pub fn knn_grid() -> Vec<KnnConfig> {
    let mut grid = Vec::with_capacity(12);
    for k in [3, 5, 7] {
        for p in [1, 2] {
            for weighting in [KnnWeighting::Uniform, KnnWeighting::Distance] {
                grid.push(KnnConfig { k, p, weighting });
            }
        }
    }
    grid
}

fn minkowski(a: &[f64], b: &[f64], p: u8) -> f64 {
    match p {
        1 => a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum(),
        2 => a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        _ => unreachable!("p must be 1 or 2"),
    }
}

/// Exact k-NN regression: brute-force distances, distance ties at the
/// k-th rank broken by training index order. Distance weighting uses 1/d
/// with an exact hit returning that label outright.
pub fn knn_fit_predict(
    config: &KnnConfig,
    z_train: &Tensor,
    y_train: &Tensor,
    z_query: &Tensor,
) -> Result<Tensor> {
    let n = z_train.rows();
    if config.k == 0 || config.k > n {
        return Err(Error::InsufficientNeighbors { k: config.k, n });
    }
    if z_train.cols() != z_query.cols() {
        return Err(Error::Dimension(format!(
            "knn: train dim {} vs query dim {}",
            z_train.cols(),
            z_query.cols()
        )));
    }
    let mut out = Vec::with_capacity(z_query.rows());
    for q in 0..z_query.rows() {
        let query = z_query.row(q);
        let mut dist: Vec<(f64, usize)> = (0..n)
            .map(|i| (minkowski(query, z_train.row(i), config.p), i))
            .collect();
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let selected = &dist[..config.k];
        let pred = match config.weighting {
            KnnWeighting::Uniform => {
                selected.iter().map(|&(_, i)| y_train.data()[i]).sum::<f64>() / config.k as f64
            }
            KnnWeighting::Distance => {
                if let Some(&(_, i)) = selected.iter().find(|&&(d, _)| d == 0.0) {
                    y_train.data()[i]
                } else {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for &(d, i) in selected {
                        num += y_train.data()[i] / d;
                        den += 1.0 / d;
                    }
                    num / den
                }
            }
        };
        out.push(pred);
    }
    Ok(Tensor::column(&out))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Exhaustive search over the 12-cell grid by validation MSE. Grid order
/// breaks ties deterministically.
pub fn knn_grid_search(
    z_train: &Tensor,
    y_train: &Tensor,
    z_val: &Tensor,
    y_val: &Tensor,
) -> Result<(KnnConfig, f64)> {
    if z_train.rows() == 0 || z_val.rows() == 0 {
        return Err(Error::Contract("knn_grid_search: empty split".into()));
    }
    let mut best: Option<(KnnConfig, f64)> = None;
    for config in knn_grid() {
        if config.k > z_train.rows() {
            continue;
        }
        let pred = knn_fit_predict(&config, z_train, y_train, z_val)?;
        let err = mse(&pred, y_val);
        if best.map_or(true, |(_, e)| err < e) {
            best = Some((config, err));
        }
    }
    best.ok_or(Error::InsufficientNeighbors { k: 3, n: z_train.rows() })
}

/// Ordinary least squares via normal equations with a small ridge term
/// for conditioning. Returns (weights of length d, bias).
pub fn linear_regression_fit(x: &Tensor, y: &Tensor) -> Result<(Vec<f64>, f64)> {
    let (n, d) = (x.rows(), x.cols());
    if n <= d {
        return Err(Error::Contract(format!(
            "linear regression: need more samples ({n}) than features ({d})"
        )));
    }
    // Augmented system [X 1] with ridge lambda = 1e-8.
    let m = d + 1;
    let lambda = 1e-8;
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m];
    for i in 0..n {
        let row = x.row(i);
        let yi = y.data()[i];
        for a in 0..m {
            let xa = if a < d { row[a] } else { 1.0 };
            atb[a] += xa * yi;
            for b in 0..m {
                let xb = if b < d { row[b] } else { 1.0 };
                ata[a * m + b] += xa * xb;
            }
        }
    }
    for a in 0..m {
        ata[a * m + a] += lambda;
    }
    let sol = solve_spd(&mut ata, &mut atb, m)?;
    let bias = sol[d];
    Ok((sol[..d].to_vec(), bias))
}

pub fn linear_predict(weights: &[f64], bias: f64, x: &Tensor) -> Tensor {
    let out: Vec<f64> = (0..x.rows())
        .map(|i| x.row(i).iter().zip(weights).map(|(&v, &w)| v * w).sum::<f64>() + bias)
        .collect();
    Tensor::column(&out)
}

/// Cholesky solve for a symmetric positive definite system (in place).
fn solve_spd(a: &mut [f64], b: &mut [f64], m: usize) -> Result<Vec<f64>> {
    // Factor A = L L^T.
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::SingularSystem);
                }
                a[i * m + i] = s.sqrt();
            } else {
                a[i * m + j] = s / a[j * m + j];
            }
        }
    }
    // Forward then backward substitution.
    for i in 0..m {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * m + k] * b[k];
        }
        b[i] = s / a[i * m + i];
    }
    for i in (0..m).rev() {
        let mut s = b[i];
        for k in i + 1..m {
            s -= a[k * m + i] * b[k];
        }
        b[i] = s / a[i * m + i];
    }
    Ok(b.to_vec())
}
