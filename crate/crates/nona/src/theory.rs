//! Executable checks of the optimality structure the MSE loss induces on
//! attention weights: the decomposition identity, the closed-form triplet
//! and simplex optima with their brute-force oracles, and a diagnostic
//! audit of trained models.

use crate::error::{Error, Result};
use crate::nona::NonaForward;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{HeadState, HeadVars, Model};

/// Anchor i with two neighbors j, k and an attention budget R that must
/// be split between them.
#[derive(Clone, Copy, Debug)]
pub struct TripletInstance {
    pub y_i: f64,
    pub y_j: f64,
    pub y_k: f64,
    pub r: f64,
}

impl TripletInstance {
    pub fn new(y_i: f64, y_j: f64, y_k: f64, r: f64) -> Result<Self> {
        if y_i == y_j || y_i == y_k || y_j == y_k {
            return Err(Error::Contract("triplet: labels must be pairwise distinct".into()));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Contract(format!("triplet: budget must be in (0,1], got {r}")));
        }
        Ok(TripletInstance { y_i, y_j, y_k, r })
    }

    /// T_ijk at a given split (p_ik = R - p_ij).
    pub fn objective(&self, p_ij: f64) -> f64 {
        let d_ij = self.y_i - self.y_j;
        let d_ik = self.y_i - self.y_k;
        let s = d_ij * p_ij + d_ik * (self.r - p_ij);
        s * s
    }
}

/// Optimal (p_ij, p_ik): the unconstrained quadratic minimizer
/// p_ij = d_ik / (d_ik - d_ij) * R clipped to [0, R]. An anchor whose
/// label is extreme relative to both neighbors concentrates all budget on
/// the label-closer neighbor; an intermediate anchor splits in proportion
/// to label similarity, p_ij / p_ik = (y_k - y_i) / (y_i - y_j).
pub fn triplet_optimum_closed_form(inst: &TripletInstance) -> (f64, f64) {
    let d_ij = inst.y_i - inst.y_j;
    let d_ik = inst.y_i - inst.y_k;
    let p_ij = (d_ik / (d_ik - d_ij) * inst.r).clamp(0.0, inst.r);
    (p_ij, inst.r - p_ij)
}

/// 1-D grid argmin of T_ijk over p_ij in [0, R]; the independent oracle
/// for the closed form. First grid point wins ties.
pub fn triplet_optimum_bruteforce(inst: &TripletInstance, resolution: f64) -> Result<(f64, f64)> {
    if !(resolution > 0.0 && resolution <= 1e-3) {
        return Err(Error::Contract(format!(
            "triplet brute force: resolution must be in (0, 1e-3], got {resolution}"
        )));
    }
    let steps = (inst.r / resolution).ceil() as usize;
    let mut best_p = 0.0;
    let mut best_val = f64::INFINITY;
    for s in 0..=steps {
        let p = (s as f64 * resolution).min(inst.r);
        let v = inst.objective(p);
        if v < best_val {
            best_val = v;
            best_p = p;
        }
    }
    Ok((best_p, inst.r - best_p))
}

/// Anchor i against M sorted distinct neighbor labels, none equal to y_i,
/// with total attention budget R.
#[derive(Clone, Debug)]
pub struct SimplexInstance {
    pub y_i: f64,
    pub neighbors: Vec<f64>,
    pub r: f64,
}

impl SimplexInstance {
    pub fn new(y_i: f64, neighbors: Vec<f64>, r: f64) -> Result<Self> {
        if neighbors.len() < 2 {
            return Err(Error::Contract("simplex: need M >= 2 neighbors".into()));
        }
        if !neighbors.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract("simplex: neighbor labels must be sorted and distinct".into()));
        }
        if neighbors.contains(&y_i) {
            return Err(Error::Contract("simplex: anchor label must differ from all neighbors".into()));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Contract(format!("simplex: budget must be in (0,1], got {r}")));
        }
        Ok(SimplexInstance { y_i, neighbors, r })
    }

    /// T_iJ = (sum_m d_m p_m)^2 with d_m = y_i - y_{j_m}.
    pub fn objective(&self, p: &[f64]) -> f64 {
        let s: f64 = self
            .neighbors
            .iter()
            .zip(p)
            .map(|(&yj, &pm)| (self.y_i - yj) * pm)
            .sum();
        s * s
    }
}

/// Closed-form optimal allocation on the scaled simplex:
/// all budget on the lowest (highest) neighbor when the anchor label lies
/// below (above) every neighbor label, otherwise the split
/// lambda R e_m + (1 - lambda) R e_{m+1} over the bracketing pair with
/// lambda = d_{m+1} / (d_{m+1} - d_m).
pub fn simplex_optimum(inst: &SimplexInstance) -> Vec<f64> {
    let m = inst.neighbors.len();
    let mut p = vec![0.0; m];
    if inst.y_i < inst.neighbors[0] {
        p[0] = inst.r;
    } else if inst.y_i > inst.neighbors[m - 1] {
        p[m - 1] = inst.r;
    } else {
        let idx = inst.neighbors.iter().position(|&yj| yj > inst.y_i).unwrap();
        let d_lo = inst.y_i - inst.neighbors[idx - 1];
        let d_hi = inst.y_i - inst.neighbors[idx];
        let lambda = d_hi / (d_hi - d_lo);
        p[idx - 1] = lambda * inst.r;
        p[idx] = (1.0 - lambda) * inst.r;
    }
    p
}

/// Grid search over the scaled simplex {p >= 0, sum p = R}; the oracle
/// for the closed form, limited to M in {3, 4}.
pub fn simplex_bruteforce(inst: &SimplexInstance, resolution: f64) -> Result<(Vec<f64>, f64)> {
    let m = inst.neighbors.len();
    if !(3..=4).contains(&m) {
        return Err(Error::Contract(format!("simplex brute force: M must be 3 or 4, got {m}")));
    }
    if resolution <= 0.0 {
        return Err(Error::Contract("simplex brute force: resolution must be > 0".into()));
    }
    let steps = (inst.r / resolution).ceil() as usize;
    let grid = |s: usize| (s as f64 * resolution).min(inst.r);
    let mut best: Vec<f64> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut consider = |p: Vec<f64>, val: f64| {
        if val < best_val {
            best_val = val;
            best = p;
        }
    };
    if m == 3 {
        for s1 in 0..=steps {
            let p1 = grid(s1);
            for s2 in 0..=steps {
                let p2 = grid(s2);
                let p3 = inst.r - p1 - p2;
                if p3 < -1e-12 {
                    break;
                }
                let p = vec![p1, p2, p3.max(0.0)];
                let v = inst.objective(&p);
                consider(p, v);
            }
        }
    } else {
        for s1 in 0..=steps {
            let p1 = grid(s1);
            for s2 in 0..=steps {
                let p2 = grid(s2);
                if p1 + p2 > inst.r + 1e-12 {
                    break;
                }
                for s3 in 0..=steps {
                    let p3 = grid(s3);
                    let p4 = inst.r - p1 - p2 - p3;
                    if p4 < -1e-12 {
                        break;
                    }
                    let p = vec![p1, p2, p3, p4.max(0.0)];
                    let v = inst.objective(&p);
                    consider(p, v);
                }
            }
        }
    }
    Ok((best, best_val))
}

/// |standard MSE of p*y against y - its decomposed form
/// (1/N) sum_i (sum_j (y_i - y_j) p_ij)^2|. The two are algebraically
/// identical because each row of p sums to one.
pub fn mse_decomposition_gap(y: &Tensor, p: &Tensor) -> Result<f64> {
    let b = y.numel();
    if p.rows() != b || p.cols() != b {
        return Err(Error::Dimension(format!(
            "mse_decomposition_gap: p is {:?}, y has {b} entries",
            p.shape()
        )));
    }
    for i in 0..b {
        if p.at(i, i) != 0.0 {
            return Err(Error::Contract(format!("mse_decomposition_gap: nonzero diagonal at row {i}")));
        }
        let sum: f64 = p.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "mse_decomposition_gap: row {i} sums to {sum}, not 1"
            )));
        }
    }
    let yv = y.data();
    let mut standard = 0.0;
    let mut decomposed = 0.0;
    for i in 0..b {
        let yhat: f64 = p.row(i).iter().zip(yv).map(|(&pij, &yj)| pij * yj).sum();
        let e = yv[i] - yhat;
        standard += e * e;
        let s: f64 = p.row(i).iter().zip(yv).map(|(&pij, &yj)| (yv[i] - yj) * pij).sum();
        decomposed += s * s;
    }
    Ok(((standard - decomposed) / b as f64).abs())
}

/// One audited anchor: the deviation of the realized top-2 attention
/// ratio from the proportional-split prediction, in log space.
#[derive(Clone, Debug)]
pub struct AuditRecord {
    pub anchor: usize,
    pub deviation: f64,
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    pub records: Vec<AuditRecord>,
    /// Anchors skipped because their top-2 neighbors do not form an
    /// intermediate-label bracket with positive attention on both.
    pub excluded: usize,
}

impl AuditReport {
    pub fn median_abs_deviation(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        let mut devs: Vec<f64> = self.records.iter().map(|r| r.deviation.abs()).collect();
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = devs.len();
        Some(if n % 2 == 1 { devs[n / 2] } else { 0.5 * (devs[n / 2 - 1] + devs[n / 2]) })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("anchor,deviation\n");
        for r in &self.records {
            out.push_str(&format!("{},{:.16e}\n", r.anchor, r.deviation));
        }
        out
    }
}

/// Diagnostic audit of a trained NONA model: for each query whose two
/// highest-attention neighbors bracket its label, records
/// log(p_lo / p_hi) - log((y_hi - y_i) / (y_i - y_lo)), which is zero at
/// the proportional-split optimum. Queries whose top-2 pair does not
/// bracket the label (or carries zero attention) are counted, not scored.
pub fn empirical_triplet_audit(model: &Model, x: &Tensor, y: &Tensor) -> Result<AuditReport> {
    let head = match &model.head {
        HeadState::Nona(h) => h,
        HeadState::Dense(_) => {
            return Err(Error::Contract("empirical_triplet_audit: needs a NONA head".into()))
        }
    };
    let bank = head.bank.as_ref().ok_or(Error::NotFitted)?;
    let labels = bank.labels.data().to_vec();

    let mut tape = Tape::new();
    let (mlp_vars, head_vars) = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let z = model.mlp.forward(&mut tape, &mlp_vars, xv)?;
    let ss = match &head_vars {
        HeadVars::Nona(ss) => ss,
        HeadVars::Dense(_) => unreachable!(),
    };
    let NonaForward { attention, .. } = head.forward_infer(&mut tape, ss, z)?;
    let attn = tape.value(attention);

    let mut records = Vec::new();
    let mut excluded = 0usize;
    for i in 0..x.rows() {
        let row = attn.row(i);
        // Top-2 attention neighbors.
        let mut top = [(0usize, f64::NEG_INFINITY); 2];
        for (j, &p) in row.iter().enumerate() {
            if p > top[0].1 {
                top[1] = top[0];
                top[0] = (j, p);
            } else if p > top[1].1 {
                top[1] = (j, p);
            }
        }
        let y_i = y.data()[i];
        let (mut lo, mut hi) = (top[0], top[1]);
        if labels[lo.0] > labels[hi.0] {
            std::mem::swap(&mut lo, &mut hi);
        }
        let (y_lo, y_hi) = (labels[lo.0], labels[hi.0]);
        let brackets = y_lo < y_i && y_i < y_hi && lo.1 > 0.0 && hi.1 > 0.0;
        if !brackets {
            excluded += 1;
            continue;
        }
        let deviation = (lo.1 / hi.1).ln() - ((y_hi - y_i) / (y_i - y_lo)).ln();
        records.push(AuditRecord { anchor: i, deviation });
    }
    Ok(AuditReport { records, excluded })
}
