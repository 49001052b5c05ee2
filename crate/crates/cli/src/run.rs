//! Command implementations. Each writes into a fresh run directory and
//! never reopens a file it has written.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fpl_core::collision::{q_from_fields_with, CollisionOperator, OperatorFields, QMethod};
use fpl_core::dataset::{build_dataset, build_heldout, load_dataset, save_dataset, DATASET_VERSION};
use fpl_core::grid::{make_grid, relative_l2, DistributionField};
use fpl_core::integrator::{
    benchmark_q, crossover, euler_solve, loglog_slope, rk4_solve, stability_scan, write_bench_csv, write_field_csv,
    EvaluatorFactory, EvaluatorKind, QEvaluator, Scheme, Trajectory,
};
use fpl_core::pinn::{build_pinn, evaluate_solution, spearman, train_pinn, PinnModel, Reference, SolutionReport};
use fpl_core::reference::{bkw_field, grid_moments, make_initial_condition, InitialConditionPreset};
use fpl_core::surrogate::{build_surrogate, eval_surrogate, infer_operators_with, train_surrogate, Surrogates};
use fpl_core::FplError;
use fpl_nn::checkpoint::{save_model, MODEL_VERSION};
use fpl_nn::Execution;
use toml::{Table, Value};

use crate::config::{Command, ExperimentConfig, PinnReference, HELDOUT_FILE, PINN_FILE, TRAIN_FILE};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: EXIT_VALIDATION, message: message.into() }
    }
}

impl From<FplError> for CliError {
    fn from(e: FplError) -> Self {
        let code = match &e {
            FplError::Numerical(_) => EXIT_NUMERICAL,
            FplError::MissingDependency(_) => EXIT_MISSING,
            FplError::Nn(fpl_nn::NnError::NonFinite(_)) => EXIT_NUMERICAL,
            FplError::Io(_) => 1,
            _ => EXIT_VALIDATION,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<fpl_nn::NnError> for CliError {
    fn from(e: fpl_nn::NnError) -> Self {
        FplError::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Write-once output tree.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Claims `root`, which must be absent or an empty directory.
    pub fn create(root: &Path) -> CliResult<Self> {
        if root.exists() && std::fs::read_dir(root)?.next().is_some() {
            return Err(CliError::validation(format!(
                "output directory {} is not empty; runs are write-once",
                root.display()
            )));
        }
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// A not-yet-existing path under the run, with its parent created.
    pub fn new_path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        if p.exists() {
            return Err(CliError::validation(format!("refusing to overwrite {}", p.display())));
        }
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn new_dir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.new_path(rel)?;
        std::fs::create_dir(&p)?;
        Ok(p)
    }

    pub fn file(&self, rel: &str) -> CliResult<BufWriter<File>> {
        let p = self.new_path(rel)?;
        Ok(BufWriter::new(OpenOptions::new().write(true).create_new(true).open(p)?))
    }

    pub fn write_toml(&self, rel: &str, table: &Table) -> CliResult<()> {
        let mut w = self.file(rel)?;
        w.write_all(toml::to_string(table).map_err(|e| CliError::validation(e.to_string()))?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, rel: &str, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
        let mut w = self.file(rel)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

pub fn build_id() -> String {
    format!(
        "fpl-cli {} ({}, {})",
        env!("CARGO_PKG_VERSION"),
        if cfg!(feature = "parallel") { "parallel" } else { "sequential" },
        if cfg!(debug_assertions) { "debug" } else { "release" }
    )
}

pub fn execution(workers: usize) -> Execution {
    if workers == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

pub struct Context {
    pub command: Command,
    pub preset: Option<String>,
    pub config: ExperimentConfig,
    pub run: RunDir,
    pub exec: Execution,
    pub threads: usize,
}

impl Context {
    fn manifest(&self) -> CliResult<Table> {
        let mut m = Table::new();
        m.insert("command".into(), self.command.name().into());
        if let Some(p) = &self.preset {
            m.insert("preset".into(), p.clone().into());
        }
        m.insert("build".into(), build_id().into());
        let mut formats = Table::new();
        formats.insert("dataset".into(), i64::from(DATASET_VERSION).into());
        formats.insert("checkpoint".into(), i64::from(MODEL_VERSION).into());
        m.insert("formats".into(), formats.into());
        m.insert("threads".into(), (self.threads as i64).into());
        m.insert(
            "config".into(),
            Value::try_from(&self.config).map_err(|e| CliError::validation(e.to_string()))?,
        );
        Ok(m)
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[fpl] {}", msg.as_ref());
}

fn f(x: f64) -> Value {
    Value::Float(x)
}

fn ic_field(cfg: &ExperimentConfig) -> CliResult<DistributionField> {
    Ok(make_initial_condition(&cfg.problem.ic, &cfg.grid()?)?)
}

fn load_surrogates(cfg: &ExperimentConfig) -> CliResult<Surrogates> {
    let dir = cfg.inputs.surrogate.as_ref().ok_or_else(|| CliError {
        code: EXIT_MISSING,
        message: "inputs.surrogate is not set".into(),
    })?;
    let s = Surrogates::load(dir)?;
    s.check_grid(&cfg.grid()?)?;
    if (s.meta.gamma, s.meta.lambda) != (cfg.kernel.gamma, cfg.kernel.lambda) {
        return Err(CliError::validation(format!(
            "surrogates in {} were trained for gamma={} lambda={}, config has gamma={} lambda={}",
            dir.display(),
            s.meta.gamma,
            s.meta.lambda,
            cfg.kernel.gamma,
            cfg.kernel.lambda
        )));
    }
    Ok(s)
}

/// Writes `run.toml`, runs the command, then writes `summary.toml`.
pub fn execute(ctx: &Context) -> CliResult<Table> {
    ctx.run.write_toml("run.toml", &ctx.manifest()?)?;
    let start = Instant::now();
    let mut summary = match ctx.command {
        Command::GenData => gen_data(ctx),
        Command::TrainStep1 => train_step1(ctx),
        Command::TrainStep2 => train_step2(ctx),
        Command::SolveHybrid => solve_hybrid(ctx),
        Command::Diagnose => diagnose(ctx),
        Command::Benchmark => benchmark(ctx),
        Command::Eval => eval(ctx),
    }?;
    summary.insert("seconds".into(), f(start.elapsed().as_secs_f64()));
    ctx.run.write_toml("summary.toml", &summary)?;
    Ok(summary)
}

fn gen_data(ctx: &Context) -> CliResult<Table> {
    let cfg = &ctx.config;
    let (grid, kernel) = (cfg.grid()?, cfg.kernel()?);
    let d = &cfg.dataset;
    let mut s = Table::new();
    let t0 = Instant::now();
    let (train, mt) = build_dataset(d.n_per_family, &kernel, &grid, d.label_rule, cfg.seed, ctx.exec)?;
    log(format!("labelled {} training samples in {:.1?}", train.len(), t0.elapsed()));
    save_dataset(&train, &mt, &ctx.run.new_path(&format!("data/{TRAIN_FILE}"))?)?;
    let (held, mh) = build_heldout(d.heldout, &kernel, &grid, d.label_rule, cfg.seed, ctx.exec)?;
    save_dataset(&held, &mh, &ctx.run.new_path(&format!("data/{HELDOUT_FILE}"))?)?;
    for (name, m) in [("train", &mt), ("heldout", &mh)] {
        let t = Table::try_from(m).map_err(|e| CliError::validation(e.to_string()))?;
        ctx.run.write_toml(&format!("data/{name}.toml"), &t)?;
    }
    s.insert("train_samples".into(), (train.len() as i64).into());
    s.insert("heldout_samples".into(), (held.len() as i64).into());
    Ok(s)
}

fn train_step1(ctx: &Context) -> CliResult<Table> {
    let cfg = &ctx.config;
    let dir = cfg.inputs.dataset.as_ref().expect("dependencies checked");
    let (train, _) = load_dataset(&dir.join(TRAIN_FILE))?;
    let (held, _) = load_dataset(&dir.join(HELDOUT_FILE))?;
    let mut models = build_surrogate(&cfg.surrogate_spec(), &cfg.grid()?, &cfg.kernel()?, cfg.surrogate_init_seed())?;
    log(format!(
        "training surrogates ({} + {} parameters) on {} samples",
        models.d_model.parameter_count(),
        models.f_model.parameter_count(),
        train.len()
    ));
    let ckpt = if cfg.surrogate.keep_epoch_checkpoints { Some(ctx.run.new_dir("checkpoints")?) } else { None };
    let history = train_surrogate(&mut models, &train, &held, &cfg.surrogate.train, ckpt.as_deref(), ctx.exec)?;
    models.save(&ctx.run.new_dir("surrogate")?)?;
    ctx.run.write_csv("history.csv", |w| history.write_csv(w))?;
    let report = eval_surrogate(&models, &held, ctx.exec)?;
    ctx.run.write_csv("heldout_errors.csv", |w| {
        writeln!(w, "index,family,err_d,err_f")?;
        for (i, (fam, ed, ef)) in report.per_sample.iter().enumerate() {
            writeln!(w, "{i},{fam:?},{ed:e},{ef:e}")?;
        }
        Ok(())
    })?;
    let mut s = Table::new();
    s.insert("epochs_run".into(), (history.records.len() as i64).into());
    s.insert("best_epoch".into(), (history.best_epoch as i64).into());
    s.insert("stopped_early".into(), history.stopped_early.into());
    s.insert("heldout_err_d".into(), f(report.mean_d));
    s.insert("heldout_err_f".into(), f(report.mean_f));
    Ok(s)
}

/// Reference for the PINN comparison chosen from the initial condition.
enum PinnTarget {
    Bkw,
    Steady(DistributionField),
    Trajectory(Trajectory),
}

fn pinn_target(cfg: &ExperimentConfig, ic: &DistributionField, exec: Execution) -> CliResult<Option<PinnTarget>> {
    if cfg.pinn.reference == PinnReference::None {
        return Ok(None);
    }
    Ok(Some(match cfg.problem.ic {
        InitialConditionPreset::Bkw => PinnTarget::Bkw,
        InitialConditionPreset::Maxwellian { .. } => PinnTarget::Steady(ic.clone()),
        _ => {
            let horizon = cfg.pinn.eval_times.iter().copied().fold(0.0, f64::max);
            log(format!("computing direct-quadrature Euler reference to t = {horizon}"));
            let q = QEvaluator::direct(ic.grid(), &cfg.kernel()?, QMethod::Fft, exec)?.with_stencil(cfg.solver.stencil);
            PinnTarget::Trajectory(euler_solve(ic, &q, cfg.solver.dt, horizon, &cfg.pinn.eval_times)?)
        }
    }))
}

fn report_for(model: &PinnModel, target: &PinnTarget, cfg: &ExperimentConfig) -> CliResult<SolutionReport> {
    let reference = match target {
        PinnTarget::Bkw => Reference::Bkw,
        PinnTarget::Steady(f) => Reference::Steady(f),
        PinnTarget::Trajectory(t) => Reference::Trajectory(t),
    };
    Ok(evaluate_solution(model, &reference, &cfg.grid()?, &cfg.pinn.eval_times)?)
}

fn train_step2(ctx: &Context) -> CliResult<Table> {
    let cfg = &ctx.config;
    let surrogates = load_surrogates(cfg)?;
    let ic = ic_field(cfg)?;
    let grid = ic.grid().clone();
    let mut model = build_pinn(&cfg.pinn_spec(), cfg.pinn_init_seed())?;
    let every = (cfg.pinn.train.epochs / 20).max(1);
    let t0 = Instant::now();
    let history = train_pinn(&mut model, &surrogates, &ic, &cfg.pinn.train, ctx.exec, |r, _| {
        if r.epoch % every == 0 || r.epoch == 1 {
            log(format!(
                "epoch {} GE {:.3e} IC {:.3e} ({:.0?})",
                r.epoch,
                r.residual,
                r.ic,
                t0.elapsed()
            ));
        }
    })?;
    save_model(&ctx.run.new_path(&format!("pinn/{PINN_FILE}"))?, &model.net)?;
    ctx.run.write_csv("history.csv", |w| history.write_csv(w))?;
    let mut s = Table::new();
    s.insert("epochs".into(), (history.records.len() as i64).into());
    if let Some(last) = history.records.last() {
        s.insert("loss_total".into(), f(last.total));
        s.insert("loss_ge".into(), f(last.residual));
        s.insert("loss_ic".into(), f(last.ic));
    }
    for &t in &cfg.pinn.eval_times {
        let a = fpl_core::pinn::assemble_field(&model, t, &grid)?;
        ctx.run.write_csv(&format!("slices/t_{t}.csv"), |w| write_field_csv(&a.field, w))?;
    }
    let Some(target) = pinn_target(cfg, &ic, ctx.exec)? else { return Ok(s) };
    let report = report_for(&model, &target, cfg)?;
    ctx.run.write_csv("solution.csv", |w| report.write_csv(w))?;
    let (dm, dp, de) = report.moment_drift();
    s.insert("max_relative_l2".into(), f(report.max_relative_l2()));
    s.insert("mass_drift".into(), f(dm));
    s.insert("momentum_drift".into(), f(dp));
    s.insert("energy_drift".into(), f(de));
    s.insert("max_entropy_increase".into(), f(report.max_entropy_increase()));
    s.insert("min_value".into(), f(report.min_value));
    if matches!(cfg.problem.ic, InitialConditionPreset::TwoGaussian3D { .. } | InitialConditionPreset::TwoGaussian2D { .. }) {
        let eq = grid_moments(&ic)?.equilibrium(&grid)?;
        let t_end = cfg.problem.t_end;
        let last = fpl_core::pinn::assemble_field(&model, t_end, &grid)?.field;
        s.insert("equilibrium_relative_l2".into(), f(last.relative_l2(&eq)?));
    }
    // Loss against error over the kept snapshots.
    let mut losses = Vec::new();
    let mut errors = Vec::new();
    for (epoch, net) in &history.snapshots {
        let m = PinnModel { spec: model.spec.clone(), net: net.clone() };
        save_model(&ctx.run.new_path(&format!("checkpoints/epoch_{epoch:06}.fplm"))?, net)?;
        losses.push(history.records[epoch - 1].total);
        errors.push(report_for(&m, &target, cfg)?.max_relative_l2());
    }
    ctx.run.write_csv("checkpoints.csv", |w| {
        writeln!(w, "epoch,loss_total,max_relative_l2")?;
        for ((e, _), (l, r)) in history.snapshots.iter().zip(losses.iter().zip(&errors)) {
            writeln!(w, "{e},{l:e},{r:e}")?;
        }
        Ok(())
    })?;
    if losses.len() >= 2 {
        s.insert("loss_error_spearman".into(), f(spearman(&losses, &errors)?));
    }
    Ok(s)
}

fn solve_hybrid(ctx: &Context) -> CliResult<Table> {
    let cfg = &ctx.config;
    let sc = &cfg.solver;
    let ic = ic_field(cfg)?;
    let q = match sc.evaluator {
        EvaluatorKind::DirectQuadrature => QEvaluator::direct(ic.grid(), &cfg.kernel()?, sc.method, ctx.exec)?,
        EvaluatorKind::SurrogateFdm => QEvaluator::surrogate(load_surrogates(cfg)?, ctx.exec)?,
    }
    .with_stencil(sc.stencil);
    log(format!("{:?} {:?} to t = {} with dt = {}", sc.scheme, sc.evaluator, cfg.problem.t_end, sc.dt));
    let traj = match sc.scheme {
        Scheme::Euler => euler_solve(&ic, &q, sc.dt, cfg.problem.t_end, &sc.snapshot_times)?,
        Scheme::Rk4 => rk4_solve(&ic, &q, sc.dt, cfg.problem.t_end, &sc.snapshot_times)?,
    };
    ctx.run.write_csv("moments.csv", |w| traj.write_moments_csv(w))?;
    traj.write_snapshots(&ctx.run.new_dir("snapshots")?)?;
    let mut s = Table::new();
    s.insert("mass_drift".into(), f(traj.mass_drift()));
    s.insert("max_entropy_increase".into(), f(traj.max_entropy_increase()));
    s.insert("clipped_fraction".into(), f(traj.clipped_fraction()));
    if cfg.problem.ic == InitialConditionPreset::Bkw {
        let mut rows = Vec::new();
        for (t, field) in traj.times.iter().zip(&traj.fields) {
            rows.push((*t, field.relative_l2(&bkw_field(*t, ic.grid())?)?));
        }
        ctx.run.write_csv("errors.csv", |w| {
            writeln!(w, "t,relative_l2_vs_bkw")?;
            for (t, e) in &rows {
                writeln!(w, "{t},{e:e}")?;
            }
            Ok(())
        })?;
        s.insert("final_relative_l2_vs_bkw".into(), f(rows.last().map_or(f64::NAN, |r| r.1)));
    }
    Ok(s)
}

fn operator_errors(approx: &OperatorFields, exact: &OperatorFields) -> (f64, f64) {
    (
        relative_l2(approx.diffusion(), exact.diffusion()),
        relative_l2(approx.friction(), exact.friction()),
    )
}

fn diagnose(ctx: &Context) -> CliResult<Table> {
    let cfg = &ctx.config;
    let kernel = cfg.kernel()?;
    let ic = ic_field(cfg)?;
    let grid = ic.grid().clone();
    let mut s = Table::new();
    s.insert("outside_convergence_range".into(), kernel.outside_convergence_range().into());
    let m0 = grid_moments(&ic)?;
    s.insert("ic_moments".into(), Value::try_from(&m0).map_err(|e| CliError::validation(e.to_string()))?);

    let op = CollisionOperator::with_execution(&grid, &kernel, ctx.exec)?;
    let exact = op.operators(&ic, QMethod::Fft)?;
    let q = q_from_fields_with(&ic, &exact, cfg.solver.stencil)?;
    let h = grid.cell_volume();
    let dim = grid.dim();
    let mut rates = [0.0f64; 5];
    for (k, &qk) in q.values().iter().enumerate() {
        let v = grid.node(k);
        rates[0] += qk * h;
        for i in 0..dim {
            rates[1 + i] += qk * v[i] * h;
        }
        rates[4] += qk * v[..dim].iter().map(|x| x * x).sum::<f64>() * h;
    }
    let entropy_production: f64 = q
        .values()
        .iter()
        .zip(ic.values())
        .map(|(qk, fk)| qk * fk.max(fpl_core::reference::ENTROPY_FLOOR).ln() * h)
        .sum();
    let mut c = Table::new();
    c.insert("mass_rate".into(), f(rates[0]));
    c.insert("momentum_rate".into(), Value::Array(rates[1..1 + dim].iter().map(|x| f(*x)).collect()));
    c.insert("energy_rate".into(), f(rates[4]));
    c.insert("entropy_production".into(), f(entropy_production));
    s.insert("collision_rates".into(), c.into());

    let eq = m0.equilibrium(&grid)?;
    let q_eq = op.q(&eq, QMethod::Fft)?;
    let qn = q.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    let qe = q_eq.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    s.insert("equilibrium_q_ratio".into(), f(if qn > 0.0 { qe / qn } else { qe }));

    if !cfg.diagnose.stability_dts.is_empty() {
        let term = QEvaluator::direct(&grid, &kernel, QMethod::Fft, ctx.exec)?.with_stencil(cfg.solver.stencil);
        let (rows, best) = stability_scan(&ic, &term, &cfg.diagnose.stability_dts, cfg.diagnose.stability_t_end)?;
        ctx.run.write_csv("stability.csv", |w| {
            writeln!(w, "dt,stable,clipped_fraction,growth")?;
            for r in &rows {
                writeln!(w, "{},{},{:e},{:e}", r.dt, r.stable, r.clipped_fraction, r.growth)?;
            }
            Ok(())
        })?;
        if let Some(dt) = best {
            s.insert("largest_stable_dt".into(), f(dt));
        }
    }
    if cfg.inputs.surrogate.is_some() {
        let sur = load_surrogates(cfg)?;
        let (ed, ef) = operator_errors(&infer_operators_with(&sur, &ic, ctx.exec)?, &exact);
        s.insert("surrogate_err_d".into(), f(ed));
        s.insert("surrogate_err_f".into(), f(ef));
    }
    Ok(s)
}

fn benchmark(ctx: &Context) -> CliResult<Table> {
    let cfg = &ctx.config;
    let kernel = cfg.kernel()?;
    let (dim, radius, exec) = (cfg.grid.dim, cfg.grid.radius, ctx.exec);
    let ic = cfg.problem.ic.clone();
    let direct = |n: usize| -> fpl_core::Result<(QEvaluator, DistributionField)> {
        let g = make_grid(dim, n, radius)?;
        Ok((QEvaluator::direct(&g, &kernel, QMethod::Direct, exec)?, make_initial_condition(&ic, &g)?))
    };
    // Inference time does not depend on the weights, so untrained networks
    // of the configured architecture stand in at every N.
    let surrogate = |n: usize| -> fpl_core::Result<(QEvaluator, DistributionField)> {
        let g = make_grid(dim, n, radius)?;
        let spec = fpl_core::surrogate::SurrogateSpec { n, ..cfg.surrogate_spec() };
        let models = build_surrogate(&spec, &g, &kernel, cfg.surrogate_init_seed())?;
        Ok((QEvaluator::surrogate(models, exec)?, make_initial_condition(&ic, &g)?))
    };
    let mut evaluators: Vec<(&str, &EvaluatorFactory)> = Vec::new();
    for e in &cfg.benchmark.evaluators {
        match e {
            EvaluatorKind::DirectQuadrature => evaluators.push(("DirectQuadrature", &direct)),
            EvaluatorKind::SurrogateFdm => evaluators.push(("SurrogateFDM", &surrogate)),
        }
    }
    log(format!("timing {:?} x {} repeats", cfg.benchmark.n_list, cfg.benchmark.repeats));
    let rows = benchmark_q(&evaluators, &cfg.benchmark.n_list, cfg.benchmark.repeats)?;
    ctx.run.write_csv("bench.csv", |w| write_bench_csv(&rows, w))?;
    let mut s = Table::new();
    let ns: Vec<f64> = cfg.benchmark.n_list.iter().map(|&n| n as f64).collect();
    let mut means = Vec::new();
    for (name, _) in &evaluators {
        let m: Vec<f64> = rows.iter().filter(|r| r.evaluator == *name).map(|r| r.mean_seconds).collect();
        s.insert(format!("slope_{name}"), f(loglog_slope(&ns, &m)));
        means.push(m);
    }
    if means.len() == 2 {
        if let Some(n) = crossover(&ns, &means[0], &means[1]) {
            s.insert("crossover_n".into(), f(n));
        }
    }
    Ok(s)
}

fn eval(ctx: &Context) -> CliResult<Table> {
    let cfg = &ctx.config;
    let models = load_surrogates(cfg)?;
    let dir = cfg.inputs.dataset.as_ref().expect("dependencies checked");
    let (held, _) = load_dataset(&dir.join(HELDOUT_FILE))?;
    let report = eval_surrogate(&models, &held, ctx.exec)?;
    ctx.run.write_csv("eval.csv", |w| {
        writeln!(w, "index,family,seed,err_d,err_f")?;
        for (i, ((fam, ed, ef), smp)) in report.per_sample.iter().zip(&held).enumerate() {
            writeln!(w, "{i},{fam:?},{},{ed:e},{ef:e}", smp.seed())?;
        }
        Ok(())
    })?;
    let mut s = Table::new();
    s.insert("samples".into(), (held.len() as i64).into());
    s.insert("mean_err_d".into(), f(report.mean_d));
    s.insert("mean_err_f".into(), f(report.mean_f));
    let mut fam = Table::new();
    for (k, (ed, ef)) in &report.per_family {
        fam.insert(k.clone(), Value::Array(vec![f(*ed), f(*ef)]));
    }
    s.insert("per_family".into(), fam.into());
    Ok(s)
}
