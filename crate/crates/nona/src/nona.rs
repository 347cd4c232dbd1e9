//! The NONA regression head.
//!
//! Predictions are softmax-weighted averages of neighbor labels, with
//! weights derived from embedding similarities. During training the batch
//! is its own neighbor set and self-similarities are masked to -inf; at
//! inference a frozen neighbor bank (training-split embeddings and
//! labels) is used and there is no self mask.

use crate::error::{Error, Result};
use crate::similarity::SimilarityKind;
use crate::softstep::{self, SoftStepConfig, SoftStepParams, SoftStepVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NeighborBank {
    /// N x d embeddings of the training split under the final extractor.
    pub embeddings: Tensor,
    /// N x 1 labels.
    pub labels: Tensor,
}

#[derive(Clone, Debug)]
pub struct NonaHead {
    pub similarity: SimilarityKind,
    pub softstep: SoftStepConfig,
    pub params: SoftStepParams,
    pub bank: Option<NeighborBank>,
}

/// Attention matrix and predictions from one forward pass.
pub struct NonaForward {
    /// Row-stochastic attention weights (b x N).
    pub attention: Var,
    /// Predicted labels (b x 1).
    pub prediction: Var,
}

impl NonaHead {
    pub fn new(similarity: SimilarityKind, softstep: SoftStepConfig, embed_dim: usize) -> Self {
        NonaHead {
            similarity,
            softstep,
            params: SoftStepParams::init(&softstep, embed_dim),
            bank: None,
        }
    }

    pub fn set_neighbor_bank(&mut self, embeddings: Tensor, labels: Tensor) -> Result<()> {
        if embeddings.rows() == 0 {
            return Err(Error::NotFitted);
        }
        if embeddings.rows() != labels.rows() {
            return Err(Error::Contract(format!(
                "neighbor bank: {} embeddings but {} labels",
                embeddings.rows(),
                labels.rows()
            )));
        }
        self.bank = Some(NeighborBank { embeddings, labels });
        Ok(())
    }

    pub fn is_fitted(&self) -> bool {
        self.bank.is_some()
    }

    /// Training forward pass: the batch attends to itself with the
    /// diagonal hard-masked.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        vars: &SoftStepVars,
        z: Var,
        y: Var,
    ) -> Result<NonaForward> {
        let b = tape.value(z).rows();
        if b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let sim = tape.pairwise_similarity(self.similarity, z, z)?;
        let sim_norm = tape.minmax_normalize_rows(sim, true)?;
        let scores =
            softstep::masked_scores(tape, &self.softstep, vars, z, sim, sim_norm, true)?;
        // Diagonal mask applied last so -inf has the final word.
        let mut m = vec![0.0; b * b];
        for i in 0..b {
            m[i * b + i] = f64::NEG_INFINITY;
        }
        let m = tape.constant(Tensor::new_scores(vec![b, b], m)?);
        let masked = tape.add(scores, m)?;
        let attention = tape.rowwise_softmax(masked)?;
        let prediction = tape.matmul(attention, y)?;
        Ok(NonaForward { attention, prediction })
    }

    /// Inference forward pass against the frozen neighbor bank.
    pub fn forward_infer(&self, tape: &mut Tape, vars: &SoftStepVars, z: Var) -> Result<NonaForward> {
        let bank = self.bank.as_ref().ok_or(Error::NotFitted)?;
        let zn = tape.constant(bank.embeddings.clone());
        let yn = tape.constant(bank.labels.clone());
        self.forward_with_neighbors(tape, vars, z, zn, yn)
    }

    /// Inference against explicit neighbors (used for validation-epoch
    /// evaluation, where the bank is the current training embeddings).
    pub fn forward_with_neighbors(
        &self,
        tape: &mut Tape,
        vars: &SoftStepVars,
        z: Var,
        zn: Var,
        yn: Var,
    ) -> Result<NonaForward> {
        let sim = tape.pairwise_similarity(self.similarity, z, zn)?;
        let sim_norm = tape.minmax_normalize_rows(sim, false)?;
        let scores =
            softstep::masked_scores(tape, &self.softstep, vars, z, sim, sim_norm, false)?;
        let attention = tape.rowwise_softmax(scores)?;
        let prediction = tape.matmul(attention, yn)?;
        Ok(NonaForward { attention, prediction })
    }
}
