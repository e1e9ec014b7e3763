use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stride_core::data::{generate_dataset, Policy, TrajectoryDataset};
use stride_core::envs::{EnvKind, EnvSpec};
use stride_core::eval::{
    eval_force, eval_implied_force, eval_nfe_sweep, eval_phase_portrait, eval_rollout, grid, nfe_rows_to_csv,
    RolloutConfig, ZPolicy,
};
use stride_core::model::{DynamicsModel, ModelKind, OracleModel};
use stride_core::mppi::{run_swingup, MppiConfig};
use stride_core::persistence::{digest_of, AnyModel, Checkpoint};
use stride_core::plot::{line_chart, quiver, Series};
use stride_core::train::TrainConfig;
use stride_core::{Error, Result};

/// Train and evaluate structured stochastic dynamics models.
#[derive(Parser)]
#[command(name = "stride", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an environment and write a JSONL dataset.
    GenData(GenData),
    /// Train a model on a dataset and write a checkpoint.
    Train(Train),
    #[command(subcommand)]
    Eval(Eval),
    /// Closed-loop MPPI control against the simulator.
    Plan(Plan),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Pendulum,
    BouncingPendulum,
    Cartpole,
}

impl EnvArg {
    fn spec(self) -> EnvSpec {
        EnvSpec::of_kind(match self {
            EnvArg::Pendulum => EnvKind::Pendulum,
            EnvArg::BouncingPendulum => EnvKind::BouncingPendulum,
            EnvArg::Cartpole => EnvKind::CartpoleFriction,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    RandomTorque,
    SineSweep,
    MppiExpert,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Stride,
    Onn,
    Delan,
    LnnDiffusion,
    PureDiffusion,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZArg {
    Sampled,
    Zero,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    env: EnvArg,
    /// Number of logged records.
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "random-torque")]
    policy: PolicyArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long, value_enum)]
    model: ModelArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_fm: f64,
    #[arg(long, default_value_t = 10)]
    nfe_train: usize,
    /// Treat residual samples as constants in the acceleration term.
    #[arg(long)]
    no_grad_through_sampler: bool,
    /// Initial steps that fit the prior without residual samples.
    #[arg(long, default_value_t = 0)]
    prior_warmup_steps: usize,
    /// Optional training-curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Eval {
    /// Open-loop multi-step error from random anchors.
    Rollout(EvalRollout),
    /// Residual force error against the recorded external force.
    Force(EvalForce),
    /// Rollout error and sampler throughput against sampler steps.
    Nfe(EvalNfe),
    /// Unforced vector field and equilibrium linearizations.
    Phase(EvalPhase),
}

#[derive(Args)]
struct EvalRollout {
    /// Checkpoint path, or `oracle` for the analytic simulator.
    #[arg(long)]
    ckpt: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    horizon: usize,
    #[arg(long, default_value_t = 64)]
    starts: usize,
    #[arg(long, value_enum, default_value = "sampled")]
    z: ZArg,
    #[arg(long, default_value_t = 16)]
    replicates: usize,
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct EvalForce {
    #[arg(long)]
    ckpt: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    /// Restrict to records in contact.
    #[arg(long)]
    contact_only: bool,
    /// Score the residual implied by predicted accelerations under the true
    /// rigid-body terms (for models without a force stream).
    #[arg(long)]
    implied: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EvalNfe {
    #[arg(long)]
    ckpt_flow: PathBuf,
    #[arg(long)]
    ckpt_diff: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    nfe: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    horizon: usize,
    #[arg(long, default_value_t = 64)]
    starts: usize,
    #[arg(long, default_value_t = 16)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPhase {
    #[arg(long)]
    ckpt: String,
    /// `start:end:count`
    #[arg(long, default_value = "-3.1416:3.1416:25", allow_hyphen_values = true)]
    q_range: String,
    #[arg(long, default_value = "-6:6:25", allow_hyphen_values = true)]
    qdot_range: String,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Swingup,
}

#[derive(Args)]
struct Plan {
    /// Checkpoint path, or `oracle` for the analytic simulator.
    #[arg(long)]
    ckpt: String,
    #[arg(long, value_enum)]
    env: EnvArg,
    #[arg(long, value_enum, default_value = "swingup")]
    task: TaskArg,
    #[arg(long, default_value_t = 6.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

enum Loaded {
    Checkpoint(Box<Checkpoint>),
    Oracle(OracleModel),
}

impl Loaded {
    fn open(arg: &str, env: Option<&EnvSpec>) -> Result<Self> {
        if arg == "oracle" {
            let env = env.ok_or_else(|| Error::Usage("the oracle model needs an environment".into()))?;
            return Ok(Loaded::Oracle(OracleModel { env: env.clone() }));
        }
        Ok(Loaded::Checkpoint(Box::new(Checkpoint::load(Path::new(arg))?)))
    }

    fn model(&self) -> &dyn DynamicsModel {
        match self {
            Loaded::Checkpoint(c) => c.model.as_model(),
            Loaded::Oracle(o) => o,
        }
    }

    fn digest(&self) -> String {
        match self {
            Loaded::Checkpoint(c) => c.config_digest(),
            Loaded::Oracle(o) => digest_of(&o.env),
        }
    }
}

fn parse_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Usage(format!("range '{s}' is not start:end:count"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    Ok(grid(a, b, n))
}

fn gen_data(a: GenData) -> Result<()> {
    let policy = match a.policy {
        PolicyArg::RandomTorque => Policy::RandomTorque,
        PolicyArg::SineSweep => Policy::SineSweep,
        PolicyArg::MppiExpert => Policy::MppiExpert,
    };
    let ds = generate_dataset(&a.env.spec(), policy, a.steps, a.noise, a.seed)?;
    ds.save(&a.out)?;
    println!("wrote {} records to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let ds = TrajectoryDataset::load(&a.data)?;
    let kind = match a.model {
        ModelArg::Stride => ModelKind::Stride,
        ModelArg::Onn => ModelKind::Onn,
        ModelArg::Delan => ModelKind::Delan,
        ModelArg::LnnDiffusion => ModelKind::LnnDiffusion,
        ModelArg::PureDiffusion => ModelKind::PureDiffusion,
    };
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        steps: a.steps,
        lambda_fm: a.lambda_fm,
        nfe_train: a.nfe_train,
        seed: a.seed,
        grad_through_sampler: !a.no_grad_through_sampler,
        prior_warmup_steps: a.prior_warmup_steps,
        ..defaults
    };
    let (model, curve) = AnyModel::train(kind, &ds, &cfg)?;
    let ck = Checkpoint::new(model, ds.seed);
    ck.save(&a.out)?;
    if let Some(p) = &a.curve {
        write_file(p, &curve.to_csv())?;
    }
    let last = curve.last().map(|p| p.total).unwrap_or(f64::NAN);
    println!(
        "trained {} for {} steps, final loss {last:e}, digest {}",
        kind.cli_name(),
        cfg.steps,
        ck.config_digest()
    );
    Ok(())
}

fn eval_rollout_cmd(a: EvalRollout) -> Result<()> {
    let ds = TrajectoryDataset::load(&a.data)?;
    let loaded = Loaded::open(&a.ckpt, Some(&ds.env))?;
    let cfg = RolloutConfig {
        horizon: a.horizon,
        starts: a.starts,
        z_policy: match a.z {
            ZArg::Sampled => ZPolicy::Sampled,
            ZArg::Zero => ZPolicy::Zero,
        },
        replicates: a.replicates,
        nfe: a.nfe,
        seed: a.seed,
    };
    let report = eval_rollout(loaded.model(), &ds, &cfg)?;
    let text = format!("# model_digest={}\n{}", loaded.digest(), report.to_csv());
    write_file(&a.report, &text)?;
    if let Some(p) = &a.svg {
        let pts = |v: &[f64]| v.iter().enumerate().map(|(h, &e)| ((h + 1) as f64, e)).collect();
        let svg = line_chart(
            "open-loop rollout error",
            "step",
            "normalized RMSE",
            &[
                Series::new("per step", pts(&report.per_step_rmse)),
                Series::new("cumulative", pts(&report.cumulative_rmse)),
            ],
        );
        write_file(p, &svg)?;
    }
    println!("cumulative normalized RMSE at H={}: {:e}", report.horizon, report.cumulative());
    Ok(())
}

fn eval_force_cmd(a: EvalForce) -> Result<()> {
    let ds = TrajectoryDataset::load(&a.data)?;
    let loaded = Loaded::open(&a.ckpt, Some(&ds.env))?;
    let contact = ds.contact_split().0;
    let idx = a.contact_only.then_some(contact.as_slice());
    if a.contact_only && contact.is_empty() {
        return Err(Error::Usage("dataset has no records in contact".into()));
    }
    let report = if a.implied {
        eval_implied_force(loaded.model(), &ds, idx, a.seed)?
    } else {
        eval_force(loaded.model(), &ds, idx, a.samples, a.seed)?
    };
    let text = format!("# model_digest={}\n{}", loaded.digest(), report.to_csv());
    write_file(&a.report, &text)?;
    println!("force RMSE {:e} ({:.1}% of peak)", report.rmse, 100.0 * report.fraction_of_peak);
    Ok(())
}

fn eval_nfe_cmd(a: EvalNfe) -> Result<()> {
    let ds = TrajectoryDataset::load(&a.data)?;
    let flow = Checkpoint::load(&a.ckpt_flow)?;
    let diff = Checkpoint::load(&a.ckpt_diff)?;
    if a.nfe.is_empty() || a.nfe.contains(&0) {
        return Err(Error::Usage("--nfe needs positive step counts".into()));
    }
    let cfg = RolloutConfig {
        horizon: a.horizon,
        starts: a.starts,
        replicates: a.replicates,
        seed: a.seed,
        ..RolloutConfig::default()
    };
    let models: [(&str, &dyn DynamicsModel); 2] = [
        (flow.model_kind.cli_name(), flow.model.as_model()),
        (diff.model_kind.cli_name(), diff.model.as_model()),
    ];
    let rows = eval_nfe_sweep(&models, &ds, &a.nfe, &cfg)?;
    let text = format!(
        "# flow_digest={} diffusion_digest={} seed={}\n{}",
        flow.config_digest(),
        diff.config_digest(),
        a.seed,
        nfe_rows_to_csv(&rows)
    );
    write_file(&a.report, &text)?;
    if let Some(p) = &a.svg {
        let series: Vec<Series> = models
            .iter()
            .map(|(name, _)| {
                Series::new(
                    *name,
                    rows.iter()
                        .filter(|r| r.model == *name)
                        .map(|r| ((r.nfe as f64).log2(), r.rollout_error.unwrap_or(f64::NAN)))
                        .collect(),
                )
            })
            .collect();
        write_file(p, &line_chart("rollout error against sampler steps", "log2 NFE", "cumulative RMSE", &series))?;
    }
    println!("wrote {} rows", rows.len());
    Ok(())
}

fn eval_phase_cmd(a: EvalPhase) -> Result<()> {
    let loaded = Loaded::open(&a.ckpt, Some(&EnvSpec::pendulum()))?;
    let qs = parse_range(&a.q_range)?;
    let vs = parse_range(&a.qdot_range)?;
    let report = eval_phase_portrait(loaded.model(), &qs, &vs, a.samples, a.seed)?;
    let text = format!("# model_digest={}\n{}", loaded.digest(), report.to_csv());
    write_file(&a.out, &text)?;
    if let Some(p) = &a.svg {
        let arrows: Vec<(f64, f64, f64, f64)> =
            report.nodes.iter().map(|n| (n.q, n.qdot, n.qdot, n.qddot_mean)).collect();
        write_file(p, &quiver("unforced phase portrait", "q (rad)", "qdot (rad/s)", &arrows, 0.04))?;
    }
    for (name, e) in [("upright", &report.upright), ("downward", &report.downward)] {
        println!(
            "{name}: {:.4}{:+.4}i, {:.4}{:+.4}i",
            e.values[0].0, e.values[0].1, e.values[1].0, e.values[1].1
        );
    }
    Ok(())
}

fn plan_cmd(a: Plan) -> Result<()> {
    let env = a.env.spec();
    let loaded = Loaded::open(&a.ckpt, Some(&env))?;
    if loaded.model().dof() != env.dof() {
        return Err(Error::Usage(format!(
            "model has {} coordinates but {} has {}",
            loaded.model().dof(),
            env.kind.cli_name(),
            env.dof()
        )));
    }
    if !(a.seconds > 0.0) {
        return Err(Error::Usage("--seconds must be positive".into()));
    }
    let TaskArg::Swingup = a.task;
    let cfg = MppiConfig::for_env(&env);
    let report = run_swingup(loaded.model(), &env, &cfg, a.seconds, a.seed)?;
    let text = format!(
        "# model_digest={} seed={} success={} time_to_upright={}\n{}",
        loaded.digest(),
        a.seed,
        report.success,
        report.time_to_upright.map(|t| t.to_string()).unwrap_or_else(|| "NA".into()),
        report.to_csv()
    );
    write_file(&a.report, &text)?;
    println!(
        "swing-up {} (time to upright: {})",
        if report.success { "succeeded" } else { "failed" },
        report.time_to_upright.map(|t| format!("{t:.2} s")).unwrap_or_else(|| "never".into())
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(Eval::Rollout(a)) => eval_rollout_cmd(a),
        Command::Eval(Eval::Force(a)) => eval_force_cmd(a),
        Command::Eval(Eval::Nfe(a)) => eval_nfe_cmd(a),
        Command::Eval(Eval::Phase(a)) => eval_phase_cmd(a),
        Command::Plan(a) => plan_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
