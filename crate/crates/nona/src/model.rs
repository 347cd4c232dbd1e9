//! The trainable feature extractor (an MLP) and the dense regression head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Layer {
    /// out x in.
    pub weight: Tensor,
    /// 1 x out.
    pub bias: Tensor,
    pub relu: bool,
}

/// Feature extractor F mapping raw inputs to d-dimensional embeddings.
/// Hidden layers use ReLU; the final projection is linear so embeddings
/// are unconstrained reals.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Initialization gain for the final (linear) projection. A randomly
/// initialized MLP maps nearby inputs to nearby embeddings but at a tiny
/// scale, so attention over embeddings starts out nearly uniform and
/// sharpens only logarithmically during training. Scaling the output
/// layer's init spreads the initial embeddings enough that similarity
/// weighting is local from the first epoch, without changing what the
/// network can represent.
const OUTPUT_GAIN: f64 = 20.0;

fn init_layer(rng: &mut impl Rng, fan_in: usize, fan_out: usize, relu: bool) -> Layer {
    // Uniform in [-gain/sqrt(fan_in), gain/sqrt(fan_in)].
    let gain = if relu { 1.0 } else { OUTPUT_GAIN };
    let bound = gain / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
    let b: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Layer {
        weight: Tensor::raw(vec![fan_out, fan_in], w),
        bias: Tensor::raw(vec![1, fan_out], b),
        relu,
    }
}

impl Mlp {
    /// `depth` hidden ReLU layers of width `hidden_dim`, then a linear
    /// projection to `embed_dim`.
    pub fn new(
        rng: &mut impl Rng,
        input_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        depth: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut prev = input_dim;
        for _ in 0..depth {
            layers.push(init_layer(rng, prev, hidden_dim, true));
            prev = hidden_dim;
        }
        layers.push(init_layer(rng, prev, embed_dim, false));
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = if trainable { tape.param(l.weight.clone()) } else { tape.constant(l.weight.clone()) };
                let b = if trainable { tape.param(l.bias.clone()) } else { tape.constant(l.bias.clone()) };
                (w, b)
            })
            .collect();
        MlpVars { layers }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "mlp: input width {} != expected {}",
                tape.value(x).cols(),
                self.input_dim()
            )));
        }
        let mut h = x;
        for (layer, (w, b)) in self.layers.iter().zip(&vars.layers) {
            let wt = tape.transpose(*w);
            let lin = tape.matmul(h, wt)?;
            let rows = tape.value(lin).rows();
            let cols = tape.value(lin).cols();
            let bb = tape.broadcast(*b, rows, cols)?;
            let pre = tape.add(lin, bb)?;
            h = if layer.relu { tape.relu(pre) } else { pre };
        }
        Ok(h)
    }

    /// Convenience no-grad embedding of a full input matrix.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(z).clone())
    }
}

pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn as_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }
}

/// Affine regression head: yhat = Z w^T + bias.
#[derive(Clone, Debug)]
pub struct DenseHead {
    /// 1 x d.
    pub weight: Tensor,
    /// 1 x 1.
    pub bias: Tensor,
}

impl DenseHead {
    pub fn new(rng: &mut impl Rng, embed_dim: usize) -> Self {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let w: Vec<f64> = (0..embed_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        DenseHead {
            weight: Tensor::raw(vec![1, embed_dim], w),
            bias: Tensor::scalar(rng.gen_range(-bound..bound)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: (Var, Var), z: Var) -> Result<Var> {
        let (w, b) = vars;
        let wt = tape.transpose(w);
        let lin = tape.matmul(z, wt)?;
        let rows = tape.value(lin).rows();
        let bb = tape.broadcast(b, rows, 1)?;
        tape.add(lin, bb)
    }
}
