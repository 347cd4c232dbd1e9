//! End-to-end optimization: MSE loss, Adam/SGD, early stopping, and the
//! benchmark / ablation runners.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{knn_fit_predict, knn_grid_search};
use crate::data::{gather, generate, split, SplitPlan, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{DenseHead, Mlp, MlpVars};
use crate::nona::NonaHead;
use crate::similarity::SimilarityKind;
use crate::softstep::{ParamMode, SoftStepConfig, SoftStepFamily, SoftStepVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Dense,
    Nona,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            max_epochs: 300,
            patience: 10,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 for NONA heads".into()));
        }
        Ok(())
    }
}

/// Minimum decrease in validation MSE that counts as an improvement;
/// guards against float jitter resetting patience.
const IMPROVEMENT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub train_trace: Vec<f64>,
    pub val_trace: Vec<f64>,
    pub test_mse: f64,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug)]
pub enum HeadState {
    Dense(DenseHead),
    Nona(NonaHead),
}

/// Feature extractor plus regression head; the unit that training
/// optimizes and checkpoints persist.
#[derive(Clone, Debug)]
pub struct Model {
    pub mlp: Mlp,
    pub head: HeadState,
}

pub enum HeadVars {
    Dense((Var, Var)),
    Nona(SoftStepVars),
}

impl Model {
    pub fn new(
        rng: &mut impl Rng,
        head_kind: HeadKind,
        input_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        depth: usize,
        similarity: SimilarityKind,
        softstep: SoftStepConfig,
    ) -> Self {
        let mlp = Mlp::new(rng, input_dim, hidden_dim, embed_dim, depth);
        let head = match head_kind {
            HeadKind::Dense => HeadState::Dense(DenseHead::new(rng, embed_dim)),
            HeadKind::Nona => HeadState::Nona(NonaHead::new(similarity, softstep, embed_dim)),
        };
        Model { mlp, head }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (MlpVars, HeadVars) {
        let mlp_vars = self.mlp.bind(tape, trainable);
        let head_vars = match &self.head {
            HeadState::Dense(d) => HeadVars::Dense(d.bind(tape, trainable)),
            HeadState::Nona(n) => HeadVars::Nona(n.params.bind(tape, trainable)),
        };
        (mlp_vars, head_vars)
    }

    pub fn flat_vars(mlp_vars: &MlpVars, head_vars: &HeadVars) -> Vec<Var> {
        let mut vars = mlp_vars.as_vars();
        match head_vars {
            HeadVars::Dense((w, b)) => vars.extend([*w, *b]),
            HeadVars::Nona(ss) => vars.extend(ss.as_vars()),
        }
        vars
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.mlp.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        match &mut self.head {
            HeadState::Dense(d) => {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
            HeadState::Nona(n) => out.extend(n.params.tensors_mut()),
        }
        out
    }

    pub fn named_param_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, layer) in self.mlp.layers.iter().enumerate() {
            out.push((format!("mlp.{i}.weight"), &layer.weight));
            out.push((format!("mlp.{i}.bias"), &layer.bias));
        }
        match &self.head {
            HeadState::Dense(d) => {
                out.push(("dense.weight".into(), &d.weight));
                out.push(("dense.bias".into(), &d.bias));
            }
            HeadState::Nona(n) => {
                for (name, t) in n.params.tensors() {
                    out.push((name.into(), t));
                }
            }
        }
        out
    }
}

/// Mean squared error between prediction and target columns.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).numel() == 0 {
        return Err(Error::Contract("mse_loss: empty batch".into()));
    }
    if !tape.value(pred).same_shape(tape.value(target)) {
        return Err(Error::Dimension(format!(
            "mse_loss: {:?} vs {:?}",
            tape.value(pred).shape(),
            tape.value(target).shape()
        )));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

pub fn mse_value(pred: &Tensor, target: &Tensor) -> f64 {
    let n = pred.numel() as f64;
    pred.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / n
}

enum Optimizer {
    Adam { lr: f64, b1: f64, b2: f64, eps: f64, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
    Sgd { lr: f64 },
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, shapes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                b1: 0.9,
                b2: 0.999,
                eps: 1e-8,
                t: 0,
                m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            },
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        match self {
            Optimizer::Adam { lr, b1, b2, eps, t, m, v } => {
                *t += 1;
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                for ((p, g), (mi, vi)) in
                    params.iter_mut().zip(grads).zip(m.iter_mut().zip(v.iter_mut()))
                {
                    for ((pv, &gv), (mv, vv)) in
                        p.data_mut().iter_mut().zip(g.data()).zip(mi.iter_mut().zip(vi.iter_mut()))
                    {
                        *mv = *b1 * *mv + (1.0 - *b1) * gv;
                        *vv = *b2 * *vv + (1.0 - *b2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= *lr * gv;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub x_train: Tensor,
    pub y_train: Tensor,
    pub x_val: Tensor,
    pub y_val: Tensor,
    pub x_test: Tensor,
    pub y_test: Tensor,
}

impl DataSplits {
    pub fn from_dataset(x: &Tensor, y: &Tensor, plan: &SplitPlan) -> Result<Self> {
        let s = split(x.rows(), plan)?;
        Ok(DataSplits {
            x_train: gather(x, &s.train),
            y_train: gather(y, &s.train),
            x_val: gather(x, &s.val),
            y_val: gather(y, &s.val),
            x_test: gather(x, &s.test),
            y_test: gather(y, &s.test),
        })
    }
}

/// Batch index plan for one epoch: shuffled, chunked, with a trailing
/// singleton merged into the previous batch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() >= 2 && batches.last().unwrap().len() == 1 {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn forward_loss(model: &Model, x: &Tensor, y: &Tensor, training: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let (mlp_vars, head_vars) = model.bind(&mut tape, training);
    let vars = Model::flat_vars(&mlp_vars, &head_vars);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let z = model.mlp.forward(&mut tape, &mlp_vars, xv)?;
    let pred = match (&model.head, &head_vars) {
        (HeadState::Dense(d), HeadVars::Dense(dv)) => d.forward(&mut tape, *dv, z)?,
        (HeadState::Nona(n), HeadVars::Nona(ss)) => {
            n.forward_train(&mut tape, ss, z, yv)?.prediction
        }
        _ => unreachable!(),
    };
    let loss = mse_loss(&mut tape, pred, yv)?;
    Ok((tape, vars, loss))
}

/// Deterministic full-split MSE under the model's inference path. NONA
/// heads use `neighbors` as the bank (the training split embedded under
/// current parameters during training, or the frozen bank afterwards).
fn eval_mse(model: &Model, x: &Tensor, y: &Tensor, neighbors: Option<(&Tensor, &Tensor)>) -> Result<f64> {
    let mut tape = Tape::new();
    let (mlp_vars, head_vars) = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let z = model.mlp.forward(&mut tape, &mlp_vars, xv)?;
    let pred = match (&model.head, &head_vars) {
        (HeadState::Dense(d), HeadVars::Dense(dv)) => d.forward(&mut tape, *dv, z)?,
        (HeadState::Nona(n), HeadVars::Nona(ss)) => match neighbors {
            Some((zn, yn)) => {
                let znv = tape.constant(zn.clone());
                let ynv = tape.constant(yn.clone());
                n.forward_with_neighbors(&mut tape, ss, z, znv, ynv)?.prediction
            }
            None => n.forward_infer(&mut tape, ss, z)?.prediction,
        },
        _ => unreachable!(),
    };
    Ok(mse_value(tape.value(pred), y))
}

/// Evaluate a trained model on a split (NONA via its frozen bank).
pub fn evaluate(model: &Model, x: &Tensor, y: &Tensor) -> Result<f64> {
    eval_mse(model, x, y, None)
}

/// Train a model with mini-batch gradient descent and early stopping.
/// Returns the best-validation model (with a neighbor bank installed for
/// NONA heads) and the run trace.
pub fn train_model(mut model: Model, data: &DataSplits, config: &TrainConfig) -> Result<(Model, RunResult)> {
    config.validate()?;
    let start = Instant::now();
    let shapes: Vec<usize> = model.param_tensors_mut().iter().map(|t| t.numel()).collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &shapes);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b97f4a7c15));

    let mut train_trace = Vec::new();
    let mut val_trace = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_model = model.clone();

    for epoch in 1..=config.max_epochs {
        let batches = epoch_batches(data.x_train.rows(), config.batch_size, &mut batch_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        for batch in &batches {
            let xb = gather(&data.x_train, batch);
            let yb = gather(&data.y_train, batch);
            let (tape, vars, loss) = forward_loss(&model, &xb, &yb, true)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Divergence(epoch));
            }
            epoch_loss += loss_val * batch.len() as f64;
            epoch_n += batch.len();
            let grads = tape.backward(loss)?;
            let grad_refs: Vec<&Tensor> =
                vars.iter().map(|&v| grads.wrt(v).expect("param gradient")).collect();
            let mut params = model.param_tensors_mut();
            optimizer.step(&mut params, &grad_refs);
        }
        train_trace.push(epoch_loss / epoch_n as f64);

        // Validation with the current training split as neighbor bank.
        let z_train = model.mlp.embed(&data.x_train)?;
        let val_mse =
            eval_mse(&model, &data.x_val, &data.y_val, Some((&z_train, &data.y_train)))?;
        if !val_mse.is_finite() {
            return Err(Error::Divergence(epoch));
        }
        val_trace.push(val_mse);

        if val_mse < best_val - IMPROVEMENT_EPS {
            best_val = val_mse;
            best_epoch = epoch;
            best_model = model.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }

    // Freeze the bank from the best extractor's training embeddings.
    if let HeadState::Nona(head) = &mut best_model.head {
        let z_train = best_model.mlp.embed(&data.x_train)?;
        head.set_neighbor_bank(z_train, data.y_train.clone())?;
    }
    let test_mse = evaluate(&best_model, &data.x_test, &data.y_test)?;
    Ok((
        best_model,
        RunResult {
            train_trace,
            val_trace,
            test_mse,
            best_epoch,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Dimensions and head configuration for a full experiment model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { input_dim: 2, hidden_dim: 200, embedding_dim: 25, depth: 2 }
    }
}

pub fn build_model(
    head_kind: HeadKind,
    dims: &ModelConfig,
    similarity: SimilarityKind,
    softstep: SoftStepConfig,
    seed: u64,
) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5851f42d4c957f2d));
    Model::new(
        &mut rng,
        head_kind,
        dims.input_dim,
        dims.hidden_dim,
        dims.embedding_dim,
        dims.depth,
        similarity,
        softstep,
    )
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkCell {
    pub mean: f64,
    pub std: f64,
    pub per_repeat: Vec<f64>,
}

impl BenchmarkCell {
    fn from_values(values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        BenchmarkCell { mean, std, per_repeat: values }
    }
}

/// Table-1-shaped result for one dataset: dense, dense+kNN, NONA,
/// NONA+kNN columns, each mean +/- std over the repeats.
#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkRow {
    pub dataset: String,
    pub dense: BenchmarkCell,
    pub dense_knn: BenchmarkCell,
    pub nona: BenchmarkCell,
    pub nona_knn: BenchmarkCell,
}

/// Tuned k-NN test MSE on a trained model's final embeddings (the
/// two-stage SFT counterpart).
pub fn knn_on_embeddings(model: &Model, data: &DataSplits) -> Result<f64> {
    let z_train = model.mlp.embed(&data.x_train)?;
    let z_val = model.mlp.embed(&data.x_val)?;
    let z_test = model.mlp.embed(&data.x_test)?;
    let (best, _) = knn_grid_search(&z_train, &data.y_train, &z_val, &data.y_val)?;
    let pred = knn_fit_predict(&best, &z_train, &data.y_train, &z_test)?;
    Ok(mse_value(&pred, &data.y_test))
}

/// One repeat of the four-model comparison on a fixed dataset and split
/// seed. Returns (dense, dense_knn, nona, nona_knn) test MSE.
pub fn benchmark_repeat(
    x: &Tensor,
    y: &Tensor,
    dims: &ModelConfig,
    similarity: SimilarityKind,
    softstep: SoftStepConfig,
    train_cfg: &TrainConfig,
    repeat_seed: u64,
) -> Result<(f64, f64, f64, f64)> {
    let data = DataSplits::from_dataset(x, y, &SplitPlan::new(repeat_seed))?;
    let mut cfg = *train_cfg;
    cfg.seed = repeat_seed;

    let dense = build_model(HeadKind::Dense, dims, similarity, softstep, repeat_seed);
    let (dense, dense_run) = train_model(dense, &data, &cfg)?;
    let dense_knn = knn_on_embeddings(&dense, &data)?;

    let nona = build_model(HeadKind::Nona, dims, similarity, softstep, repeat_seed);
    let (nona, nona_run) = train_model(nona, &data, &cfg)?;
    let nona_knn = knn_on_embeddings(&nona, &data)?;

    Ok((dense_run.test_mse, dense_knn, nona_run.test_mse, nona_knn))
}

/// Repeated four-model benchmark on one synthetic dataset. Each repeat
/// reseeds the split, model init, and batching from `spec.seed + r`.
pub fn run_benchmark(
    spec: &SyntheticSpec,
    dims: &ModelConfig,
    similarity: SimilarityKind,
    softstep: SoftStepConfig,
    train_cfg: &TrainConfig,
    n_repeats: usize,
) -> Result<BenchmarkRow> {
    let (x, y) = generate(spec)?;
    let mut dense = Vec::with_capacity(n_repeats);
    let mut dense_knn = Vec::with_capacity(n_repeats);
    let mut nona = Vec::with_capacity(n_repeats);
    let mut nona_knn = Vec::with_capacity(n_repeats);
    for r in 0..n_repeats {
        let (d, dk, n, nk) = benchmark_repeat(
            &x,
            &y,
            dims,
            similarity,
            softstep,
            train_cfg,
            spec.seed.wrapping_add(r as u64),
        )?;
        dense.push(d);
        dense_knn.push(dk);
        nona.push(n);
        nona_knn.push(nk);
    }
    Ok(BenchmarkRow {
        dataset: spec.target.name().to_string(),
        dense: BenchmarkCell::from_values(dense),
        dense_knn: BenchmarkCell::from_values(dense_knn),
        nona: BenchmarkCell::from_values(nona),
        nona_knn: BenchmarkCell::from_values(nona_knn),
    })
}

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from("dataset,dense,dense_knn,nona,nona_knn\n");
    for row in rows {
        let cell = |c: &BenchmarkCell| format!("{:.16e}±{:.16e}", c.mean, c.std);
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.dataset,
            format!("{},{}", cell(&row.dense), cell(&row.dense_knn)),
            cell(&row.nona),
            cell(&row.nona_knn)
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Similarity,
    Softstep,
    BatchSize,
    EmbeddingDim,
}

impl AblationAxis {
    /// The serialized protocol order.
    pub const ORDER: [AblationAxis; 4] = [
        AblationAxis::Similarity,
        AblationAxis::Softstep,
        AblationAxis::BatchSize,
        AblationAxis::EmbeddingDim,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Similarity => "similarity",
            AblationAxis::Softstep => "softstep",
            AblationAxis::BatchSize => "batch_size",
            AblationAxis::EmbeddingDim => "embedding_dim",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationStage {
    pub axis: String,
    pub options: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub winner: usize,
}

impl AblationStage {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.options.join(","));
        out.push('\n');
        let cells: Vec<String> = self
            .means
            .iter()
            .zip(&self.stds)
            .map(|(m, s)| format!("{m:.16e}±{s:.16e}"))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
        out
    }
}

const ABLATION_SEEDS: usize = 3;

/// Serialized ablation: fix defaults (no SoftStep, batch 128, dim 50),
/// ablate one axis at a time in the fixed order, and carry each stage's
/// winner forward. Cell values are test MSE mean +/- std over 3 split
/// seeds.
pub fn run_ablation(
    axes: &[AblationAxis],
    spec: &SyntheticSpec,
    train_cfg: &TrainConfig,
) -> Result<Vec<AblationStage>> {
    let (x, y) = generate(spec)?;
    // Pre-ablation defaults.
    let mut similarity = SimilarityKind::NegL2;
    let mut softstep = SoftStepConfig::none();
    let mut batch_size = 128usize;
    let mut embedding_dim = 50usize;

    let mut stages = Vec::new();
    let run_cell = |similarity: SimilarityKind,
                    softstep: SoftStepConfig,
                    batch_size: usize,
                    embedding_dim: usize|
     -> Result<(f64, f64)> {
        let dims = ModelConfig { embedding_dim, ..Default::default() };
        let mut cfg = *train_cfg;
        cfg.batch_size = batch_size;
        let mut results = Vec::with_capacity(ABLATION_SEEDS);
        for s in 0..ABLATION_SEEDS {
            let seed = spec.seed.wrapping_add(s as u64);
            let data = DataSplits::from_dataset(&x, &y, &SplitPlan::new(seed))?;
            cfg.seed = seed;
            let model = build_model(HeadKind::Nona, &dims, similarity, softstep, seed);
            let (_, run) = train_model(model, &data, &cfg)?;
            results.push(run.test_mse);
        }
        Ok(mean_std(&results))
    };

    for axis in AblationAxis::ORDER {
        if !axes.contains(&axis) {
            continue;
        }
        let (options, cells): (Vec<String>, Vec<(f64, f64)>) = match axis {
            AblationAxis::Similarity => {
                let mut opts = Vec::new();
                let mut cells = Vec::new();
                for kind in SimilarityKind::ALL {
                    opts.push(kind.name().to_string());
                    cells.push(run_cell(kind, softstep, batch_size, embedding_dim)?);
                }
                (opts, cells)
            }
            AblationAxis::Softstep => {
                let mut opts = Vec::new();
                let mut cells = Vec::new();
                for family in [SoftStepFamily::S1, SoftStepFamily::S2] {
                    for mode in [ParamMode::Global, ParamMode::Pointwise] {
                        opts.push(format!(
                            "{}_{}",
                            if family == SoftStepFamily::S1 { "s1" } else { "s2" },
                            if mode == ParamMode::Global { "global" } else { "pointwise" }
                        ));
                        let cfg = SoftStepConfig { family, param_mode: mode, ..softstep };
                        cells.push(run_cell(similarity, cfg, batch_size, embedding_dim)?);
                    }
                }
                (opts, cells)
            }
            AblationAxis::BatchSize => {
                let mut opts = Vec::new();
                let mut cells = Vec::new();
                for bs in [32usize, 64, 128, 256] {
                    opts.push(bs.to_string());
                    cells.push(run_cell(similarity, softstep, bs, embedding_dim)?);
                }
                (opts, cells)
            }
            AblationAxis::EmbeddingDim => {
                let mut opts = Vec::new();
                let mut cells = Vec::new();
                for dim in [25usize, 50, 100] {
                    opts.push(dim.to_string());
                    cells.push(run_cell(similarity, softstep, batch_size, dim)?);
                }
                (opts, cells)
            }
        };
        let winner = cells
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        // Carry the winner forward.
        match axis {
            AblationAxis::Similarity => similarity = SimilarityKind::ALL[winner],
            AblationAxis::Softstep => {
                let family = if winner < 2 { SoftStepFamily::S1 } else { SoftStepFamily::S2 };
                let mode = if winner % 2 == 0 { ParamMode::Global } else { ParamMode::Pointwise };
                softstep = SoftStepConfig { family, param_mode: mode, ..SoftStepConfig::default() };
            }
            AblationAxis::BatchSize => batch_size = [32, 64, 128, 256][winner],
            AblationAxis::EmbeddingDim => embedding_dim = [25, 50, 100][winner],
        }
        stages.push(AblationStage {
            axis: axis.name().to_string(),
            options,
            means: cells.iter().map(|c| c.0).collect(),
            stds: cells.iter().map(|c| c.1).collect(),
            winner,
        });
    }
    Ok(stages)
}
