use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use nona::baselines::{knn_fit_predict, knn_grid_search, KnnConfig, KnnWeighting};
use nona::checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
use nona::config::ExperimentConfig;
use nona::data::{generate, SplitPlan, SyntheticSpec, SyntheticTarget};
use nona::error::Error;
use nona::similarity::SimilarityKind;
use nona::softstep::SoftStepConfig;
use nona::tape::Tape;
use nona::tensor::Tensor;
use nona::theory::{
    empirical_triplet_audit, mse_decomposition_gap, simplex_bruteforce, simplex_optimum,
    triplet_optimum_bruteforce, triplet_optimum_closed_form, SimplexInstance, TripletInstance,
};
use nona::train::{
    build_model, mse_value, run_ablation, run_benchmark, train_model, AblationAxis, DataSplits,
    HeadKind, HeadState, HeadVars, Model, ModelConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "nona", about = "NONA attention regression: training, benchmarks, and theory checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config and write checkpoint + metrics.
    Train(TrainArgs),
    /// Export a regression surface over [-1,1]^2 from a checkpoint.
    Surface(SurfaceArgs),
    /// Serialized hyperparameter ablation.
    Ablate(AblateArgs),
    /// Repeated four-model benchmark on a synthetic dataset.
    Benchmark(BenchmarkArgs),
    /// Run the closed-form-vs-oracle verification suites.
    TheoryCheck(TheoryCheckArgs),
    /// Standalone k-NN grid search on an embeddings CSV.
    Knn(KnnArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed (flag > NONA_SEED env > config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SurfaceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Points per axis; the output has resolution^2 rows.
    #[arg(long, default_value_t = 50)]
    resolution: usize,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Add a y_knn column from k-NN fitted on the checkpoint's bank.
    #[arg(long, default_value_t = false)]
    with_knn: bool,
    #[arg(long, default_value_t = 5)]
    knn_k: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated subset of similarity,softstep,batch_size,embedding_dim.
    #[arg(long, value_delimiter = ',')]
    axes: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TheoryCheckArgs {
    /// Directory for the diagnostic audit CSV and summary.
    #[arg(long, default_value = "theory-out")]
    output: PathBuf,
}

#[derive(Args)]
struct KnnArgs {
    /// CSV with embedding columns followed by a final label column.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Surface(args) => cmd_surface(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::TheoryCheck(args) => cmd_theory_check(args),
        Command::Knn(args) => cmd_knn(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

/// Seed precedence: --seed flag, then NONA_SEED, then the config value.
fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64, Error> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("NONA_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("NONA_SEED must be an integer, got {v:?}"))),
        Err(_) => Ok(config_seed),
    }
}

fn load_config(path: &Path, seed_flag: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.train.seed = resolve_seed(seed_flag, cfg.train.seed)?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&args.config, args.seed)?;
    let start = std::time::Instant::now();
    let (x, y) = generate(&cfg.dataset)?;
    let data = DataSplits::from_dataset(&x, &y, &SplitPlan::new(cfg.train.seed))?;
    let model = build_model(cfg.head, &cfg.model, cfg.similarity, cfg.softstep, cfg.train.seed);
    let (model, run) = train_model(model, &data, &cfg.train)?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&dir.join("checkpoint"), &model, &cfg, run.best_epoch)?;

    let mut trace = String::from("epoch,train_mse,val_mse\n");
    for (i, (tr, va)) in run.train_trace.iter().zip(&run.val_trace).enumerate() {
        trace.push_str(&format!("{},{tr:.16e},{va:.16e}\n", i + 1));
    }
    std::fs::write(dir.join("trace.csv"), trace)?;

    // Deterministic metrics; wall-clock timing lives in its own file so
    // reruns with the same config are byte-identical.
    let metrics = json!({
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "best_epoch": run.best_epoch,
        "best_val_mse": run.val_trace[run.best_epoch - 1],
        "test_mse": run.test_mse,
        "epochs_run": run.val_trace.len(),
    });
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&json!({ "wall_clock_secs": start.elapsed().as_secs_f64() }))?,
    )?;
    println!(
        "trained {:?} head: best epoch {}, test MSE {:.6e}",
        cfg.head, run.best_epoch, run.test_mse
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_surface(args: SurfaceArgs) -> Result<ExitCode, Error> {
    if args.resolution < 2 {
        return Err(Error::Config("surface: resolution must be >= 2".into()));
    }
    let (model, cfg, _) = load_checkpoint(&args.checkpoint)?;
    if model.mlp.input_dim() != 2 {
        return Err(Error::Contract(format!(
            "surface export needs a 2-D input model, got input_dim {}",
            model.mlp.input_dim()
        )));
    }
    let n = args.resolution;
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let x1 = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
            let x2 = -1.0 + 2.0 * j as f64 / (n - 1) as f64;
            rows.push(vec![x1, x2]);
        }
    }
    let grid = Tensor::matrix(&rows)?;
    let pred = predict(&model, &grid)?;

    let knn_pred = if args.with_knn {
        let bank = match &model.head {
            HeadState::Nona(h) => h.bank.as_ref().ok_or(Error::NotFitted)?,
            HeadState::Dense(_) => {
                return Err(Error::Contract(
                    "surface --with-knn needs a NONA checkpoint with a neighbor bank".into(),
                ))
            }
        };
        let z_grid = model.mlp.embed(&grid)?;
        let knn_cfg = KnnConfig { k: args.knn_k, p: 2, weighting: KnnWeighting::Uniform };
        Some(knn_fit_predict(&knn_cfg, &bank.embeddings, &bank.labels, &z_grid)?)
    } else {
        None
    };

    let mut out = String::from(if knn_pred.is_some() { "x1,x2,y_hat,y_knn\n" } else { "x1,x2,y_hat\n" });
    for (i, row) in rows.iter().enumerate() {
        out.push_str(&format!("{:.16e},{:.16e},{:.16e}", row[0], row[1], pred.data()[i]));
        if let Some(k) = &knn_pred {
            out.push_str(&format!(",{:.16e}", k.data()[i]));
        }
        out.push('\n');
    }
    let path = args.output.unwrap_or_else(|| cfg.output_dir.join("surface.csv"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, out)?;
    println!("wrote {} rows to {}", n * n, path.display());
    Ok(ExitCode::SUCCESS)
}

fn predict(model: &Model, x: &Tensor) -> Result<Tensor, Error> {
    let mut tape = Tape::new();
    let (mlp_vars, head_vars) = model.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let z = model.mlp.forward(&mut tape, &mlp_vars, xv)?;
    let pred = match (&model.head, &head_vars) {
        (HeadState::Dense(d), HeadVars::Dense(dv)) => d.forward(&mut tape, *dv, z)?,
        (HeadState::Nona(nh), HeadVars::Nona(ss)) => nh.forward_infer(&mut tape, ss, z)?.prediction,
        _ => unreachable!(),
    };
    Ok(tape.value(pred).clone())
}

fn parse_axes(names: &[String]) -> Result<Vec<AblationAxis>, Error> {
    if names.is_empty() {
        return Ok(AblationAxis::ORDER.to_vec());
    }
    names
        .iter()
        .map(|n| {
            AblationAxis::ORDER
                .into_iter()
                .find(|a| a.name() == n)
                .ok_or_else(|| Error::Config(format!("unknown ablation axis {n:?}")))
        })
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode, Error> {
    let cfg = load_config(&args.config, args.seed)?;
    let axes = parse_axes(&args.axes)?;
    let start = std::time::Instant::now();
    let stages = run_ablation(&axes, &cfg.dataset, &cfg.train)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    for stage in &stages {
        std::fs::write(cfg.output_dir.join(format!("ablation_{}.csv", stage.axis)), stage.to_csv())?;
    }
    let summary = json!({
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "stages": stages,
    });
    std::fs::write(cfg.output_dir.join("ablation.json"), serde_json::to_string_pretty(&summary)?)?;
    std::fs::write(
        cfg.output_dir.join("timing.json"),
        serde_json::to_string_pretty(&json!({ "wall_clock_secs": start.elapsed().as_secs_f64() }))?,
    )?;
    for stage in &stages {
        println!("{}: winner {}", stage.axis, stage.options[stage.winner]);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<ExitCode, Error> {
    if args.repeats == 0 {
        return Err(Error::Config("benchmark: repeats must be >= 1".into()));
    }
    let cfg = load_config(&args.config, args.seed)?;
    let start = std::time::Instant::now();
    let mut spec = cfg.dataset;
    spec.seed = cfg.train.seed;
    let row = run_benchmark(&spec, &cfg.model, cfg.similarity, cfg.softstep, &cfg.train, args.repeats)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("benchmark.csv"), nona::train::benchmark_csv(std::slice::from_ref(&row)))?;
    let summary = json!({
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "repeats": args.repeats,
        "row": row,
    });
    std::fs::write(cfg.output_dir.join("benchmark.json"), serde_json::to_string_pretty(&summary)?)?;
    std::fs::write(
        cfg.output_dir.join("timing.json"),
        serde_json::to_string_pretty(&json!({ "wall_clock_secs": start.elapsed().as_secs_f64() }))?,
    )?;
    println!(
        "{}: dense {:.4e} dense+knn {:.4e} nona {:.4e} nona+knn {:.4e}",
        row.dataset, row.dense.mean, row.dense_knn.mean, row.nona.mean, row.nona_knn.mean
    );
    Ok(ExitCode::SUCCESS)
}

fn random_stochastic(rng: &mut ChaCha8Rng, b: usize) -> Tensor {
    let mut p = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        let raw: Vec<f64> = (0..b).map(|j| if j == i { 0.0 } else { rng.gen::<f64>() + 1e-3 }).collect();
        let s: f64 = raw.iter().sum();
        for j in 0..b {
            p.set(i, j, raw[j] / s);
        }
    }
    p
}

fn random_triplet(rng: &mut ChaCha8Rng) -> TripletInstance {
    loop {
        let y_i: f64 = rng.gen_range(-3.0..3.0);
        let y_j: f64 = rng.gen_range(-3.0..3.0);
        let y_k: f64 = rng.gen_range(-3.0..3.0);
        let sep = 0.05;
        if (y_i - y_j).abs() > sep && (y_i - y_k).abs() > sep && (y_j - y_k).abs() > sep {
            return TripletInstance::new(y_i, y_j, y_k, rng.gen_range(0.1..=1.0)).unwrap();
        }
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, m: usize) -> SimplexInstance {
    loop {
        let mut labels: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
        labels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let y_i = rng.gen_range(-3.5..3.5);
        let ok = labels.windows(2).all(|w| w[1] - w[0] > 0.05)
            && labels.iter().all(|&l| (l - y_i).abs() > 0.05);
        if ok {
            return SimplexInstance::new(y_i, labels, rng.gen_range(0.1..=1.0)).unwrap();
        }
    }
}

fn cmd_theory_check(args: TheoryCheckArgs) -> Result<ExitCode, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut all_ok = true;
    let mut report = |name: &str, ok: bool| {
        println!("{} {}", if ok { "PASS" } else { "FAIL" }, name);
        all_ok &= ok;
    };

    // MSE decomposition identity.
    let mut worst_gap = 0.0f64;
    for _ in 0..1000 {
        let b = rng.gen_range(2..=64);
        let p = random_stochastic(&mut rng, b);
        let y = Tensor::column(&(0..b).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        worst_gap = worst_gap.max(mse_decomposition_gap(&y, &p)?);
    }
    report(&format!("mse decomposition gap <= 1e-10 (worst {worst_gap:.2e})"), worst_gap <= 1e-10);

    // Triplet optimum vs grid oracle.
    let res = 1e-4;
    let mut ok = true;
    for _ in 0..10_000 {
        let inst = random_triplet(&mut rng);
        let (cf, _) = triplet_optimum_closed_form(&inst);
        let (bf, _) = triplet_optimum_bruteforce(&inst, res)?;
        if (cf - bf).abs() > res + 1e-12
            || (inst.objective(cf) - inst.objective(bf)).abs() > 1e-8
        {
            ok = false;
            break;
        }
    }
    report("triplet closed form within one grid step of brute force (10^4 instances)", ok);

    // Simplex optimum vs grid oracle.
    let mut ok = true;
    for i in 0..1000 {
        let m = if i % 2 == 0 { 3 } else { 4 };
        let inst = random_simplex(&mut rng, m);
        let p = simplex_optimum(&inst);
        let resolution = if m == 3 { 0.005 } else { 0.02 };
        let (_, bf_val) = simplex_bruteforce(&inst, resolution)?;
        if inst.objective(&p) > bf_val + 1e-6 {
            ok = false;
            break;
        }
    }
    report("simplex closed-form objective <= brute force + 1e-6 (10^3 instances)", ok);

    // Diagnostic audit on a small trained model (not a pass/fail gate).
    std::fs::create_dir_all(&args.output)?;
    let spec = SyntheticSpec { target: SyntheticTarget::Radial, n_points: 300, noise_std: 0.05, seed: 0 };
    let (x, y) = generate(&spec)?;
    let data = DataSplits::from_dataset(&x, &y, &SplitPlan::new(0))?;
    let dims = ModelConfig { input_dim: 2, hidden_dim: 32, embedding_dim: 8, depth: 1 };
    let softstep = SoftStepConfig::default();
    let train_cfg = TrainConfig { max_epochs: 40, ..Default::default() };
    let model = build_model(HeadKind::Nona, &dims, SimilarityKind::NegL2, softstep, 0);
    let (model, run) = train_model(model, &data, &train_cfg)?;
    let audit = empirical_triplet_audit(&model, &data.x_test, &data.y_test)?;
    std::fs::write(args.output.join("triplet_audit.csv"), audit.to_csv())?;
    println!(
        "INFO audit: {} anchors scored, {} excluded, median |deviation| {:?}, test MSE {:.3e}",
        audit.records.len(),
        audit.excluded,
        audit.median_abs_deviation(),
        run.test_mse
    );

    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_knn(args: KnnArgs) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(&args.embeddings)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("knn: empty embeddings CSV".into()))?;
    let width = header.split(',').count();
    if width < 2 {
        return Err(Error::Config("knn: need at least one embedding column plus a label column".into()));
    }
    let mut z_rows = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("knn: bad float {v:?} on line {}", lineno + 2)))
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != width {
            return Err(Error::Config(format!(
                "knn: line {} has {} fields, expected {width}",
                lineno + 2,
                vals.len()
            )));
        }
        z_rows.push(vals[..width - 1].to_vec());
        labels.push(vals[width - 1]);
    }
    let z = Tensor::matrix(&z_rows)?;
    let y = Tensor::column(&labels);
    let plan = SplitPlan::new(args.seed);
    let data = DataSplits::from_dataset(&z, &y, &plan)?;
    let (best, val_mse) = knn_grid_search(&data.x_train, &data.y_train, &data.x_val, &data.y_val)?;
    let pred = knn_fit_predict(&best, &data.x_train, &data.y_train, &data.x_test)?;
    let test_mse = mse_value(&pred, &data.y_test);
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "best": best,
            "val_mse": val_mse,
            "test_mse": test_mse,
        }))?
    );
    Ok(ExitCode::SUCCESS)
}
