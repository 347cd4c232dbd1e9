//! SoftStep learned attention masking.
//!
//! A SoftStep function maps min-max-normalized similarities in [0,1] to
//! mask values in [0,1]; its log is added to the raw similarities before
//! the softmax, so masking can only reduce pre-softmax scores. Two
//! function families are provided:
//!
//!   S1(x; a,b,t) = 0 on [0,a], (x-a)^(1/t) / ((x-a)^(1/t) + (b-x)^(1/t))
//!                  on (a,b), 1 on [b,1]
//!   S2(x; b,t)   = (x/b)^((b-x) t/(1-t)) on [0,b), 1 on [b,1]
//!
//! The interior of S1 is evaluated in log space,
//! sigmoid((ln(x-a) - ln(b-x)) / t), which is algebraically identical and
//! does not overflow for small t.
//!
//! Parameters (a0, b0, t) are sigmoid outputs, either of global learned
//! scalars or of a per-point affine head on the embeddings. For S1 the
//! effective thresholds are a = min(a0, top_sim) - eps and
//! b = a + b0 * (1 - a), which guarantees the top neighbor of every row
//! survives; S2 uses b = b0 directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftStepFamily {
    S1,
    S2,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    Global,
    Pointwise,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SoftStepConfig {
    pub family: SoftStepFamily,
    pub param_mode: ParamMode,
    /// Margin keeping the top neighbor below the rejection threshold.
    pub epsilon: f64,
    /// Floor/ceiling margin for the transition parameter t.
    pub t_clamp: f64,
}

impl Default for SoftStepConfig {
    fn default() -> Self {
        SoftStepConfig {
            family: SoftStepFamily::S2,
            param_mode: ParamMode::Pointwise,
            epsilon: 1e-6,
            t_clamp: 1e-3,
        }
    }
}

impl SoftStepConfig {
    pub fn none() -> Self {
        SoftStepConfig { family: SoftStepFamily::None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("softstep.epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.t_clamp > 0.0 && self.t_clamp < 0.5) {
            return Err(Error::Config(format!(
                "softstep.t_clamp must lie in (0, 0.5), got {}",
                self.t_clamp
            )));
        }
        Ok(())
    }
}

/// S1 mask value for a single normalized similarity.
pub fn s1(x: f64, a: f64, b: f64, t: f64) -> Result<f64> {
    if a >= b {
        return Err(Error::ParamOrder { a, b });
    }
    Ok(if x <= a {
        0.0
    } else if x >= b {
        1.0
    } else {
        let z = ((x - a).ln() - (b - x).ln()) / t;
        1.0 / (1.0 + (-z).exp())
    })
}

/// S2 mask value for a single normalized similarity.
/// Conventions: 0^0 = 1, 0^positive = 0.
pub fn s2(x: f64, b: f64, t: f64) -> f64 {
    if x >= b {
        1.0
    } else {
        let e = (b - x) * t / (1.0 - t);
        if x == 0.0 {
            if e == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (x / b).powf(e)
        }
    }
}

/// Raw (pre-sigmoid) SoftStep parameters held by a NONA head.
#[derive(Clone, Debug)]
pub enum SoftStepParams {
    None,
    /// One unconstrained triple; sigmoid maps it to (a0, b0, t).
    Global { raw: Tensor },
    /// Affine head from embedding space to 3 outputs, then sigmoid.
    Pointwise { weight: Tensor, bias: Tensor },
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl SoftStepParams {
    /// Initialize so that sigmoid outputs (a0, b0, t) = (0.1, 0.9, 0.5):
    /// an identity-like, gently sloped mask that does not starve early
    /// training of neighbors.
    pub fn init(config: &SoftStepConfig, embed_dim: usize) -> Self {
        let bias = Tensor::raw(vec![1, 3], vec![logit(0.1), logit(0.9), 0.0]);
        match config.family {
            SoftStepFamily::None => SoftStepParams::None,
            _ => match config.param_mode {
                ParamMode::Global => SoftStepParams::Global { raw: bias },
                ParamMode::Pointwise => SoftStepParams::Pointwise {
                    weight: Tensor::zeros(vec![3, embed_dim]),
                    bias,
                },
            },
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            SoftStepParams::None => vec![],
            SoftStepParams::Global { raw } => vec![("softstep.raw", raw)],
            SoftStepParams::Pointwise { weight, bias } => {
                vec![("softstep.weight", weight), ("softstep.bias", bias)]
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            SoftStepParams::None => vec![],
            SoftStepParams::Global { raw } => vec![raw],
            SoftStepParams::Pointwise { weight, bias } => vec![weight, bias],
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SoftStepVars {
        let mut reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        match self {
            SoftStepParams::None => SoftStepVars::None,
            SoftStepParams::Global { raw } => SoftStepVars::Global { raw: reg(raw) },
            SoftStepParams::Pointwise { weight, bias } => {
                let weight = reg(weight);
                let bias = reg(bias);
                SoftStepVars::Pointwise { weight, bias }
            }
        }
    }
}

/// Tape handles for bound SoftStep parameters.
#[derive(Clone, Copy, Debug)]
pub enum SoftStepVars {
    None,
    Global { raw: Var },
    Pointwise { weight: Var, bias: Var },
}

impl SoftStepVars {
    pub fn as_vars(&self) -> Vec<Var> {
        match self {
            SoftStepVars::None => vec![],
            SoftStepVars::Global { raw } => vec![*raw],
            SoftStepVars::Pointwise { weight, bias } => vec![*weight, *bias],
        }
    }
}

/// Per-row sigmoid parameter columns (a0, b0, t), each b x 1.
fn param_columns(
    tape: &mut Tape,
    vars: &SoftStepVars,
    z: Var,
    rows: usize,
) -> Result<(Var, Var, Var)> {
    match vars {
        SoftStepVars::None => unreachable!("param_columns with family None"),
        SoftStepVars::Global { raw } => {
            let sig = tape.sigmoid(*raw);
            let a0 = tape.slice_col(sig, 0)?;
            let b0 = tape.slice_col(sig, 1)?;
            let t = tape.slice_col(sig, 2)?;
            let a0 = tape.broadcast(a0, rows, 1)?;
            let b0 = tape.broadcast(b0, rows, 1)?;
            let t = tape.broadcast(t, rows, 1)?;
            Ok((a0, b0, t))
        }
        SoftStepVars::Pointwise { weight, bias } => {
            let wt = tape.transpose(*weight);
            let lin = tape.matmul(z, wt)?;
            let bias_b = tape.broadcast(*bias, rows, 3)?;
            let pre = tape.add(lin, bias_b)?;
            let sig = tape.sigmoid(pre);
            let a0 = tape.slice_col(sig, 0)?;
            let b0 = tape.slice_col(sig, 1)?;
            let t = tape.slice_col(sig, 2)?;
            Ok((a0, b0, t))
        }
    }
}

/// Apply the SoftStep log-mask: returns sim + ln(mask).
///
/// `sim_norm` must already be the row-wise min-max normalization of `sim`
/// (diagonal excluded during training). `training` selects whether the
/// S1 top-similarity guard skips the diagonal.
pub fn masked_scores(
    tape: &mut Tape,
    config: &SoftStepConfig,
    vars: &SoftStepVars,
    z: Var,
    sim: Var,
    sim_norm: Var,
    training: bool,
) -> Result<Var> {
    if config.family == SoftStepFamily::None {
        return Ok(sim);
    }
    config.validate()?;
    let (rows, cols) = {
        let t = tape.value(sim);
        (t.rows(), t.cols())
    };
    let (a0, b0, t_raw) = param_columns(tape, vars, z, rows)?;
    let t = tape.clamp(t_raw, config.t_clamp, 1.0 - config.t_clamp);

    let logmask = match config.family {
        SoftStepFamily::S1 => {
            let top_sim = tape.row_max(sim_norm, training)?;
            let guarded = tape.min_elem(a0, top_sim)?;
            let a = tape.add_scalar(guarded, -config.epsilon);
            // b = a + b0 * (1 - a)
            let neg_a = tape.neg(a);
            let one_minus_a = tape.add_scalar(neg_a, 1.0);
            let span = tape.mul(b0, one_minus_a)?;
            let b = tape.add(a, span)?;

            let a_b = tape.broadcast(a, rows, cols)?;
            let b_b = tape.broadcast(b, rows, cols)?;
            let t_b = tape.broadcast(t, rows, cols)?;

            // Region masks evaluated on current values; constants on the tape.
            let xv = tape.value(sim_norm).data().to_vec();
            let av = tape.value(a_b).data().to_vec();
            let bv = tape.value(b_b).data().to_vec();
            let mut interior = vec![0.0; xv.len()];
            let mut outside = vec![0.0; xv.len()];
            for i in 0..xv.len() {
                if xv[i] > av[i] && xv[i] < bv[i] {
                    interior[i] = 1.0;
                } else if xv[i] <= av[i] {
                    outside[i] = f64::NEG_INFINITY; // hard rejection
                } // x >= b: ln(1) = 0
            }
            let interior_mask =
                tape.constant(Tensor::raw(vec![rows, cols], interior));
            let outside_fill = tape.constant(
                Tensor::new_scores(vec![rows, cols], outside).expect("score tensor"),
            );

            // ln S1 = -softplus(-(ln(x-a) - ln(b-x)) / t) on the interior.
            // Arguments are replaced by a harmless constant outside the
            // interior so no NaN is ever materialized; select routes
            // gradients only through interior entries.
            let half = tape.constant(Tensor::full(vec![rows, cols], 0.5));
            let xa = tape.sub(sim_norm, a_b)?;
            let bx = tape.sub(b_b, sim_norm)?;
            let xa_safe = tape.select(interior_mask, xa, half)?;
            let bx_safe = tape.select(interior_mask, bx, half)?;
            let ln_xa = tape.log(xa_safe);
            let ln_bx = tape.log(bx_safe);
            let diff = tape.sub(ln_xa, ln_bx)?;
            let zarg = tape.div(diff, t_b)?;
            let neg_z = tape.neg(zarg);
            let sp = tape.softplus(neg_z);
            let ln_interior = tape.neg(sp);
            tape.select(interior_mask, ln_interior, outside_fill)?
        }
        SoftStepFamily::S2 => {
            let b_b = tape.broadcast(b0, rows, cols)?;
            let t_b = tape.broadcast(t, rows, cols)?;

            let xv = tape.value(sim_norm).data().to_vec();
            let bv = tape.value(b_b).data().to_vec();
            let region: Vec<f64> =
                xv.iter().zip(&bv).map(|(&x, &b)| if x < b { 1.0 } else { 0.0 }).collect();
            let region_mask = tape.constant(Tensor::raw(vec![rows, cols], region));

            // ln S2 = (b - x) * t/(1-t) * ln(x/b); ln(0) = -inf yields the
            // hard rejection of the row minimum.
            let neg_t = tape.neg(t_b);
            let one_minus_t = tape.add_scalar(neg_t, 1.0);
            let t_ratio = tape.div(t_b, one_minus_t)?;
            let bx = tape.sub(b_b, sim_norm)?;
            let expo = tape.mul(bx, t_ratio)?;
            let ratio = tape.div(sim_norm, b_b)?;
            let ln_ratio = tape.log(ratio);
            let ln_s2 = tape.mul(expo, ln_ratio)?;
            let zeros = tape.constant(Tensor::zeros(vec![rows, cols]));
            tape.select(region_mask, ln_s2, zeros)?
        }
        SoftStepFamily::None => unreachable!(),
    };

    tape.add(sim, logmask)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TC: f64 = 1e-3;

    #[test]
    fn s1_lower_clamp_and_midpoint() {
        assert_eq!(s1(0.2, 0.2, 0.8, 0.5).unwrap(), 0.0);
        assert_eq!(s1(0.05, 0.2, 0.8, 0.5).unwrap(), 0.0);
        // Midpoint of the blend is 0.5 for any t by symmetry.
        for t in [TC, 0.1, 0.5, 0.9, 1.0 - TC] {
            let v = s1(0.5, 0.2, 0.8, t).unwrap();
            assert!((v - 0.5).abs() < 1e-12, "t={t} -> {v}");
        }
        assert_eq!(s1(0.8, 0.2, 0.8, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn s1_near_linear_at_large_t() {
        // a=0, b=1, t -> 1 approaches the identity line.
        let v = s1(0.3, 0.0, 1.0, 1.0 - TC).unwrap();
        assert!((v - 0.3).abs() < 1e-3, "got {v}");
    }

    #[test]
    fn s1_rejects_bad_parameter_order() {
        assert!(matches!(s1(0.5, 0.8, 0.2, 0.5), Err(Error::ParamOrder { .. })));
        assert!(matches!(s1(0.5, 0.5, 0.5, 0.5), Err(Error::ParamOrder { .. })));
    }

    #[test]
    fn s2_upper_clamp_and_value() {
        assert_eq!(s2(1.0, 1.0, 0.5), 1.0);
        assert_eq!(s2(0.7, 0.7, 0.5), 1.0);
        // b=1, t=0.5, x=0.5: (0.5)^(0.5 * 1) = sqrt(0.5)
        let v = s2(0.5, 1.0, 0.5);
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn s2_zero_power_conventions() {
        assert_eq!(s2(0.0, 0.5, 0.3), 0.0); // 0^positive
        assert_eq!(s2(0.0, 0.0, 0.3), 1.0); // x >= b branch
    }

    #[test]
    fn both_families_monotone_and_bounded_on_grid() {
        let params = [(0.1, 0.7, 0.2), (0.0, 1.0, 0.5), (0.3, 0.9, 0.97), (0.05, 0.4, TC)];
        for &(a, b, t) in &params {
            let mut prev1 = -1.0;
            let mut prev2 = -1.0;
            for k in 0..=1000 {
                let x = k as f64 / 1000.0;
                let v1 = s1(x, a, b, t).unwrap();
                let v2 = s2(x, b.max(1e-3), t);
                assert!((0.0..=1.0).contains(&v1));
                assert!((0.0..=1.0).contains(&v2));
                assert!(v1 >= prev1 - 1e-12, "S1 not monotone at x={x}");
                assert!(v2 >= prev2 - 1e-12, "S2 not monotone at x={x}");
                prev1 = v1;
                prev2 = v2;
            }
        }
    }

    fn logmask_of(
        family: SoftStepFamily,
        raw_targets: (f64, f64, f64),
        sim_row: Vec<f64>,
        training: bool,
    ) -> Vec<f64> {
        let cfg = SoftStepConfig {
            family,
            param_mode: ParamMode::Global,
            epsilon: 1e-6,
            t_clamp: 1e-3,
        };
        let raw = Tensor::raw(
            vec![1, 3],
            vec![logit(raw_targets.0), logit(raw_targets.1), logit(raw_targets.2)],
        );
        let params = SoftStepParams::Global { raw };
        let mut tape = Tape::new();
        let n = sim_row.len();
        let z = tape.constant(Tensor::zeros(vec![1, 2]));
        let sim = tape.constant(Tensor::raw(vec![1, n], sim_row.clone()));
        // Feed sim_row directly as its own normalization so tests control
        // top_sim.
        let sim_norm = tape.constant(Tensor::raw(vec![1, n], sim_row));
        let vars = params.bind(&mut tape, false);
        let out = masked_scores(&mut tape, &cfg, &vars, z, sim, sim_norm, training).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn family_none_is_identity() {
        let cfg = SoftStepConfig::none();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let sim = tape.constant(Tensor::matrix(&[vec![0.0, -1.0], vec![-2.0, 0.0]]).unwrap());
        let sim_norm = tape.minmax_normalize_rows(sim, false).unwrap();
        let out =
            masked_scores(&mut tape, &cfg, &SoftStepVars::None, z, sim, sim_norm, false).unwrap();
        assert_eq!(out, sim);
    }

    #[test]
    fn s1_effective_thresholds_partition_the_row() {
        // a0=0.2 < top_sim=1.0 so the guard does not bind: a = 0.2 - eps,
        // b = a + b0 (1 - a) = 0.6 (up to eps) with b0 = 0.5. Entries at or
        // below a are hard-rejected; entries above b pass through untouched;
        // interior entries get a strictly negative finite log-mask.
        let out = logmask_of(
            SoftStepFamily::S1,
            (0.2, 0.5, 0.5),
            vec![1.0, 0.1, 0.5],
            false,
        );
        // x=1.0 >= b: preserved exactly.
        assert_eq!(out[0], 1.0);
        // x=0.1 <= a: rejected outright.
        assert_eq!(out[1], f64::NEG_INFINITY);
        // x=0.5 inside the blend.
        assert!(out[2].is_finite());
        assert!(out[2] < 0.5);
    }

    #[test]
    fn s1_guard_tightens_a_when_top_sim_below_a0() {
        // a0=0.9 but the row's top normalized similarity is only 0.9 via
        // the third entry; a = 0.9 - eps rejects everything below it while
        // the top entry itself stays inside the blend.
        let out = logmask_of(
            SoftStepFamily::S1,
            (0.9, 0.5, 0.5),
            vec![0.6, 0.3, 0.9],
            false,
        );
        assert_eq!(out[0], f64::NEG_INFINITY);
        assert_eq!(out[1], f64::NEG_INFINITY);
        assert!(out[2].is_finite());
    }

    #[test]
    fn s1_guard_keeps_top_neighbor_alive() {
        // Extreme a0 -> 1 with tiny t: everything except the top neighbor is
        // rejected but the top survives.
        let out = logmask_of(
            SoftStepFamily::S1,
            (0.999999, 0.5, 0.001001),
            vec![1.0, 0.0, 0.4, 0.7],
            false,
        );
        assert!(out[0].is_finite());
        for &v in &out[1..] {
            assert_eq!(v, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn log_mask_is_nonpositive() {
        for family in [SoftStepFamily::S1, SoftStepFamily::S2] {
            let sim = vec![1.0, 0.0, 0.25, 0.5, 0.75];
            let out = logmask_of(family, (0.3, 0.6, 0.4), sim.clone(), false);
            for (o, s) in out.iter().zip(&sim) {
                assert!(o <= s, "{family:?}: mask raised a score");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = SoftStepConfig::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SoftStepConfig::default();
        cfg.t_clamp = 0.6;
        assert!(cfg.validate().is_err());
        assert!(SoftStepConfig::default().validate().is_ok());
    }
}
