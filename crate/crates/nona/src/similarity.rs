//! Pairwise similarity measures between embeddings.
//!
//! Four measures are supported: negative L2 distance, negative L1
//! distance, dot product, and cosine. All are differentiable through the
//! tape; see [`crate::tape::Tape::pairwise_similarity`].

use serde::{Deserialize, Serialize};

use crate::tape::norm;

/// Distance epsilon smoothing the L2 gradient at coincident points.
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    NegL2,
    NegL1,
    Dot,
    Cosine,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 4] = [
        SimilarityKind::NegL1,
        SimilarityKind::NegL2,
        SimilarityKind::Dot,
        SimilarityKind::Cosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityKind::NegL2 => "neg_l2",
            SimilarityKind::NegL1 => "neg_l1",
            SimilarityKind::Dot => "dot",
            SimilarityKind::Cosine => "cosine",
        }
    }

    /// sim(z, z') for a single pair of embedding rows.
    pub fn scalar(&self, z: &[f64], zn: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), zn.len());
        match self {
            SimilarityKind::NegL2 => {
                let q: f64 = z.iter().zip(zn).map(|(&a, &b)| (a - b) * (a - b)).sum();
                -(q + L2_EPS).sqrt()
            }
            SimilarityKind::NegL1 => {
                -z.iter().zip(zn).map(|(&a, &b)| (a - b).abs()).sum::<f64>()
            }
            SimilarityKind::Dot => z.iter().zip(zn).map(|(&a, &b)| a * b).sum(),
            SimilarityKind::Cosine => {
                let dot: f64 = z.iter().zip(zn).map(|(&a, &b)| a * b).sum();
                dot / (norm(z) * norm(zn))
            }
        }
    }

    /// Accumulate d sim / dz and d sim / dz' scaled by the upstream
    /// gradient `g` into the provided slices.
    pub(crate) fn accumulate_grad(
        &self,
        z: &[f64],
        zn: &[f64],
        g: f64,
        dz: &mut [f64],
        dn: &mut [f64],
    ) {
        match self {
            SimilarityKind::NegL2 => {
                let q: f64 = z.iter().zip(zn).map(|(&a, &b)| (a - b) * (a - b)).sum();
                let s = (q + L2_EPS).sqrt();
                for k in 0..z.len() {
                    let d = (z[k] - zn[k]) / s;
                    dz[k] -= g * d;
                    dn[k] += g * d;
                }
            }
            SimilarityKind::NegL1 => {
                // Subgradient convention: sign(0) = 0.
                for k in 0..z.len() {
                    let s = (z[k] - zn[k]).signum();
                    let s = if z[k] == zn[k] { 0.0 } else { s };
                    dz[k] -= g * s;
                    dn[k] += g * s;
                }
            }
            SimilarityKind::Dot => {
                for k in 0..z.len() {
                    dz[k] += g * zn[k];
                    dn[k] += g * z[k];
                }
            }
            SimilarityKind::Cosine => {
                let (na, nb) = (norm(z), norm(zn));
                let dot: f64 = z.iter().zip(zn).map(|(&a, &b)| a * b).sum();
                let c = dot / (na * nb);
                for k in 0..z.len() {
                    dz[k] += g * (zn[k] / (na * nb) - c * z[k] / (na * na));
                    dn[k] += g * (z[k] / (na * nb) - c * zn[k] / (nb * nb));
                }
            }
        }
    }
}
