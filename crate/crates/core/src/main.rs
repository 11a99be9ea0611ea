use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use surprisecal::backends::{cache_write, Recording};
use surprisecal::bayessim::generate_world;
use surprisecal::calibrators::{count_inferences, Method, SUPPORT_PER_CLASS};
use surprisecal::harness::{
    build_oracle_scenario, ratio_compare, run_correlation, run_evaluation, write_examples, write_results_csv,
    Datasets, ExperimentConfig, RunResult,
};
use surprisecal::{Error, Result};

#[derive(Parser)]
#[command(name = "surprisecal", version, about = "Surprise-driven calibration for in-context learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic concept model, its datasets and oracle test episodes
    Simulate(Common),
    /// Fetch every episode an evaluation needs and write them as JSONL for replay
    Extract(Common),
    /// Train the surprise calibrator and save it as model.json
    TrainSc(Common),
    /// Evaluate the configured methods; writes results.csv and report.json
    Evaluate(Common),
    /// Correlate demonstration surprise with the prior shift it causes
    Correlate(Common),
    /// Fit SC probability ratios against BC ratios
    RatioCompare(Common),
    /// Print the number of model inferences a method needs
    Count(CountArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); relative paths inside resolve against its directory
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding paths.output_dir
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Demonstrations per prompt
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated method names
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Binarize surprise magnitudes
    #[arg(long)]
    ablation: bool,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    method: Method,
    /// Training queries
    #[arg(long = "M", default_value_t = 0)]
    m: u64,
    /// Test queries
    #[arg(long = "T")]
    t: u64,
    /// Support samples per query for bc+ and linc+
    #[arg(long, default_value_t = (2 * SUPPORT_PER_CLASS) as u64)]
    n: u64,
}

struct Loaded {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> Result<Loaded> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        let base_dir = self.config.parent().map(Path::to_path_buf).unwrap_or_default();
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(k) = self.k {
            cfg.selection.k = k;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        let train = &mut cfg.calibrator.train;
        if let Some(e) = self.epochs {
            train.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            train.learning_rate = lr;
        }
        if let Some(h) = self.hidden_dim {
            train.hidden_dim = h;
        }
        cfg.calibrator.ablation |= self.ablation;
        let out_dir = match (&self.out, &cfg.paths.output_dir) {
            (Some(out), _) => out.clone(),
            (None, Some(dir)) => base_dir.join(dir),
            (None, None) => PathBuf::from("."),
        };
        std::fs::create_dir_all(&out_dir)?;
        Ok(Loaded { cfg, base_dir, out_dir })
    }
}

impl Loaded {
    fn data(&self) -> Result<Datasets> {
        self.cfg.load_datasets(&self.base_dir)
    }

    fn evaluate(&self, data: &Datasets) -> Result<RunResult> {
        run_evaluation(&self.cfg, data, self.cfg.backend.build(&self.base_dir)?)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.out_dir.join(name), text)?;
        Ok(())
    }

    fn write_sc_model(&self, result: &RunResult) -> Result<()> {
        if let Some(model) = &result.sc_model {
            std::fs::write(self.out_dir.join("model.json"), model.to_json()? + "\n")?;
        }
        Ok(())
    }
}

fn simulate(run: Loaded) -> Result<()> {
    let scenario = run.cfg.scenario.clone().ok_or_else(|| Error::Config("simulate needs a scenario section".into()))?;
    let world = generate_world(&scenario.task)?;
    let data = build_oracle_scenario(&scenario)?.data;
    run.write_json("model.json", &world.model)?;
    write_examples(&run.out_dir.join("pool.jsonl"), &data.pool)?;
    write_examples(&run.out_dir.join("train.jsonl"), &data.train)?;
    write_examples(&run.out_dir.join("test.jsonl"), &data.test)?;
    let mut cfg = run.cfg.clone();
    cfg.methods = vec![Method::Icl];
    let result = run_evaluation(&cfg, &data, run.cfg.backend.build(&run.base_dir)?)?;
    cache_write(&run.out_dir.join("episodes.jsonl"), &result.test_episodes)
}

fn extract(run: Loaded) -> Result<()> {
    let data = run.data()?;
    let recording = Arc::new(Recording::new(run.cfg.backend.build(&run.base_dir)?));
    let result = run_evaluation(&run.cfg, &data, recording.clone())?;
    let episodes = recording.episodes();
    cache_write(&run.out_dir.join("episodes.jsonl"), &episodes)?;
    eprintln!("wrote {} episodes ({} backend requests)", episodes.len(), result.backend_requests);
    Ok(())
}

fn train_sc(mut run: Loaded) -> Result<()> {
    run.cfg.methods = vec![Method::Sc];
    let result = run.evaluate(&run.data()?)?;
    run.write_sc_model(&result)?;
    println!("sc accuracy {:.4}", result.accuracy(Method::Sc).unwrap_or(f64::NAN));
    Ok(())
}

fn evaluate(run: Loaded) -> Result<()> {
    let result = run.evaluate(&run.data()?)?;
    write_results_csv(&run.out_dir.join("results.csv"), &result)?;
    run.write_json("report.json", &result)?;
    run.write_sc_model(&result)?;
    for r in &result.methods {
        println!("{:<6} accuracy {:.4}  inferences {}", r.method.name(), r.accuracy, r.inference_count);
    }
    Ok(())
}

fn correlate(run: Loaded) -> Result<()> {
    let data = run.data()?;
    let model = run.cfg.backend.oracle_model(&run.base_dir)?;
    let report = run_correlation(&run.cfg, &data, run.cfg.backend.build(&run.base_dir)?, model.as_ref())?;
    run.write_json("correlation.json", &report)?;
    for g in report.groups.iter().chain(std::iter::once(&report.pooled)) {
        let label = g.label.map_or_else(|| "pooled".to_string(), |l| format!("label {l}"));
        match (g.rho, g.p_value) {
            (Some(rho), Some(p)) => println!("{label:<8} n {:<4} rho {rho:+.4}  p {p:.3e}", g.n),
            _ => println!("{label:<8} n {:<4} {}", g.n, g.error.as_deref().unwrap_or("undefined")),
        }
    }
    Ok(())
}

fn ratio(mut run: Loaded) -> Result<()> {
    run.cfg.methods = vec![Method::Bc, Method::Sc];
    let result = run.evaluate(&run.data()?)?;
    let cmp = ratio_compare(&result.calibrated(Method::Sc)?, &result.calibrated(Method::Bc)?)?;
    run.write_json("ratio.json", &cmp)?;
    println!("slope {:.4}  intercept {:.4}  r2 {:.4}", cmp.fit.slope, cmp.fit.intercept, cmp.fit.r_squared);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => simulate(c.load()?),
        Command::Extract(c) => extract(c.load()?),
        Command::TrainSc(c) => train_sc(c.load()?),
        Command::Evaluate(c) => evaluate(c.load()?),
        Command::Correlate(c) => correlate(c.load()?),
        Command::RatioCompare(c) => ratio(c.load()?),
        Command::Count(a) => {
            println!("{}", count_inferences(a.method, a.m, a.t, a.n));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_backend() { 2 } else { 1 })
        }
    }
}
