//! Experiment configuration: one TOML document whose every key has a
//! default, four shipped presets, and validation that reports all
//! violations at once.

use std::path::{Path, PathBuf};

use fpl_core::collision::{CollisionKernelSpec, QMethod};
use fpl_core::dataset::{read_manifest, LabelRule};
use fpl_core::grid::{make_grid, VelocityGrid};
use fpl_core::integrator::{EvaluatorKind, Scheme};
use fpl_core::pinn::{PinnSpec, PinnTrainConfig};
use fpl_core::reference::InitialConditionPreset;
use fpl_core::surrogate::{SurrogateSpec, SurrogateTrainConfig, D_CHECKPOINT, F_CHECKPOINT};
use fpl_nn::{Activation, Stencil};
use serde::{Deserialize, Serialize};

pub const PRESETS: [&str; 4] = ["maxwellian2d", "bkw2d", "coulomb2d", "twogauss3d"];

pub const TRAIN_FILE: &str = "train.fpld";
pub const HELDOUT_FILE: &str = "heldout.fpld";
pub const PINN_FILE: &str = "pinn.fplm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    TrainStep1,
    TrainStep2,
    SolveHybrid,
    Diagnose,
    Benchmark,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainStep1 => "train-step1",
            Self::TrainStep2 => "train-step2",
            Self::SolveHybrid => "solve-hybrid",
            Self::Diagnose => "diagnose",
            Self::Benchmark => "benchmark",
            Self::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub n_v: usize,
    pub radius: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { dim: 2, n_v: 64, radius: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { gamma: 0.0, lambda: 5.0 / 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub ic: InitialConditionPreset,
    pub t_end: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self { ic: InitialConditionPreset::Bkw, t_end: 5.0 }
    }
}

/// Artifacts of earlier runs that dependent commands read.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Directory holding `train.fpld` and `heldout.fpld`.
    pub dataset: Option<PathBuf>,
    /// Directory holding the two surrogate checkpoints.
    pub surrogate: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_per_family: usize,
    pub heldout: usize,
    pub label_rule: LabelRule,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_per_family: 100, heldout: 100, label_rule: LabelRule::Midpoint }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub bottleneck_channels: usize,
    pub decoder_channels: Vec<usize>,
    pub activation: Activation,
    /// Write both networks after every epoch (about 35 MB per epoch at N = 64).
    pub keep_epoch_checkpoints: bool,
    pub train: SurrogateTrainConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        let s = SurrogateSpec::default();
        Self {
            encoder_channels: s.encoder_channels,
            kernel: s.kernel,
            bottleneck_channels: s.bottleneck_channels,
            decoder_channels: s.decoder_channels,
            activation: s.activation,
            keep_epoch_checkpoints: false,
            train: SurrogateTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PinnReference {
    /// Exact BKW, steady Maxwellian, or a direct-quadrature Euler trajectory,
    /// chosen from the initial condition.
    Auto,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinnConfig {
    pub hidden: Vec<usize>,
    pub n_t: usize,
    pub stop_gradient: bool,
    pub stencil: Stencil,
    pub eval_times: Vec<f64>,
    pub reference: PinnReference,
    pub train: PinnTrainConfig,
}

impl Default for PinnConfig {
    fn default() -> Self {
        let s = PinnSpec::default();
        Self {
            hidden: s.hidden,
            n_t: s.n_t,
            stop_gradient: s.stop_gradient,
            stencil: s.stencil,
            eval_times: vec![0.0, 1.0, 2.0, 3.0, 5.0],
            reference: PinnReference::Auto,
            train: PinnTrainConfig {
                snapshot_every: 1000,
                ..PinnTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub evaluator: EvaluatorKind,
    pub method: QMethod,
    pub scheme: Scheme,
    pub stencil: Stencil,
    pub dt: f64,
    pub snapshot_times: Vec<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            evaluator: EvaluatorKind::DirectQuadrature,
            method: QMethod::Fft,
            scheme: Scheme::Euler,
            stencil: fpl_core::collision::Q_STENCIL,
            dt: 1e-3,
            snapshot_times: vec![0.0, 1.0, 2.0, 3.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Euler step sizes probed by the stability scan (empty skips it).
    pub stability_dts: Vec<f64>,
    pub stability_t_end: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { stability_dts: vec![1e-3, 1e-2, 1e-1], stability_t_end: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub n_list: Vec<usize>,
    pub repeats: usize,
    pub evaluators: Vec<EvaluatorKind>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_list: vec![16, 32, 64],
            repeats: 100,
            evaluators: vec![EvaluatorKind::DirectQuadrature, EvaluatorKind::SurrogateFdm],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stream below is derived from it.
    pub seed: u64,
    /// Worker threads, 0 for all cores, 1 for the sequential path.
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub inputs: Inputs,
    pub grid: GridConfig,
    pub kernel: KernelConfig,
    pub problem: ProblemConfig,
    pub dataset: DatasetConfig,
    pub surrogate: SurrogateConfig,
    pub pinn: PinnConfig,
    pub solver: SolverConfig,
    pub diagnose: DiagnoseConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            out: None,
            inputs: Inputs::default(),
            grid: GridConfig::default(),
            kernel: KernelConfig::default(),
            problem: ProblemConfig::default(),
            dataset: DatasetConfig::default(),
            surrogate: SurrogateConfig::default(),
            pinn: PinnConfig::default(),
            solver: SolverConfig::default(),
            diagnose: DiagnoseConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    match name {
        "maxwellian2d" => {
            c.kernel = KernelConfig { gamma: 0.0, lambda: 1.0 };
            c.problem = ProblemConfig { ic: InitialConditionPreset::maxwellian_default(2), t_end: 5.0 };
        }
        "bkw2d" => {}
        "coulomb2d" => {
            c.kernel = KernelConfig { gamma: -3.0, lambda: 5.0 };
            c.problem = ProblemConfig { ic: InitialConditionPreset::two_gaussian_2d(), t_end: 3.0 };
            c.pinn.eval_times = vec![0.0, 1.0, 2.0, 3.0];
            c.solver.snapshot_times = vec![0.0, 1.0, 2.0, 3.0];
        }
        "twogauss3d" => {
            c.grid = GridConfig { dim: 3, n_v: 32, radius: 5.0 };
            c.kernel = KernelConfig { gamma: 0.0, lambda: 1.0 };
            c.problem = ProblemConfig { ic: InitialConditionPreset::two_gaussian_3d(), t_end: 3.0 };
            c.pinn.eval_times = vec![0.0, 1.0, 2.0, 3.0];
            c.solver.snapshot_times = vec![0.0, 1.0, 2.0, 3.0];
            c.benchmark.n_list = vec![8, 16, 32];
        }
        _ => return None,
    }
    Some(c)
}

/// Layered resolution: preset (or built-in defaults), then the config file
/// merged key by key, then command-line overrides.
pub fn resolve(preset_name: Option<&str>, file: Option<&Path>) -> Result<ExperimentConfig, String> {
    let base = match preset_name {
        Some(p) => preset(p).ok_or_else(|| format!("unknown preset `{p}` (expected one of {})", PRESETS.join(", ")))?,
        None => ExperimentConfig::default(),
    };
    let Some(path) = file else { return Ok(base) };
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let overlay: toml::Table = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut merged = toml::Table::try_from(&base).map_err(|e| e.to_string())?;
    merge(&mut merged, overlay);
    merged.try_into().map_err(|e: toml::de::Error| format!("{}: {e}", path.display()))
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            // Tagged enums (e.g. the initial condition) are replaced whole.
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> fpl_core::Result<VelocityGrid> {
        make_grid(self.grid.dim, self.grid.n_v, self.grid.radius)
    }

    pub fn kernel(&self) -> fpl_core::Result<CollisionKernelSpec> {
        CollisionKernelSpec::new(self.kernel.gamma, self.kernel.lambda, self.grid.dim)
    }

    pub fn surrogate_spec(&self) -> SurrogateSpec {
        let s = &self.surrogate;
        SurrogateSpec {
            dim: self.grid.dim,
            n: self.grid.n_v,
            encoder_channels: s.encoder_channels.clone(),
            kernel: s.kernel,
            bottleneck_channels: s.bottleneck_channels,
            decoder_channels: s.decoder_channels.clone(),
            activation: s.activation,
        }
    }

    pub fn pinn_spec(&self) -> PinnSpec {
        PinnSpec {
            dim: self.grid.dim,
            hidden: self.pinn.hidden.clone(),
            t_end: self.problem.t_end,
            n_t: self.pinn.n_t,
            n_v: self.grid.n_v,
            radius: self.grid.radius,
            stop_gradient: self.pinn.stop_gradient,
            stencil: self.pinn.stencil,
            ..PinnSpec::default()
        }
    }

    /// Sub-streams of the root seed, written back so the manifest shows them.
    pub fn derive_seeds(&mut self) {
        self.surrogate.train.seed = self.seed.wrapping_add(1) & i64::MAX as u64;
        self.pinn.train.seed = self.seed.wrapping_add(2) & i64::MAX as u64;
    }

    pub fn surrogate_init_seed(&self) -> u64 {
        self.seed
    }

    pub fn pinn_init_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    /// Every violated key with its reason; empty when the config is usable.
    pub fn violations(&self, command: Option<Command>) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |key: &str, r: std::result::Result<(), String>| {
            if let Err(e) = r {
                v.push(format!("{key}: {e}"));
            }
        };
        let err = |e: fpl_core::FplError| e.to_string();
        if self.seed > i64::MAX as u64 {
            check("seed", Err("must fit a signed 64-bit integer".into()));
        }
        check("grid", self.grid().map(|_| ()).map_err(err));
        check("kernel", self.kernel().map(|_| ()).map_err(err));
        check("problem.ic", self.problem.ic.validate().map_err(err));
        if self.problem.ic.dim() != self.grid.dim {
            check(
                "problem.ic",
                Err(format!("{}-d initial condition on a {}-d grid", self.problem.ic.dim(), self.grid.dim)),
            );
        }
        if !(self.problem.t_end > 0.0 && self.problem.t_end.is_finite()) {
            check("problem.t_end", Err("must be positive".into()));
        }
        let uses = |c: &[Command]| command.map_or(true, |x| c.contains(&x));
        if uses(&[Command::GenData]) {
            if self.dataset.n_per_family == 0 {
                check("dataset.n_per_family", Err("must be at least 1".into()));
            }
            if self.dataset.heldout == 0 {
                check("dataset.heldout", Err("must be at least 1".into()));
            }
            if let LabelRule::GaussLegendre { order } = self.dataset.label_rule {
                if order == 0 {
                    check("dataset.label_rule.order", Err("must be at least 1".into()));
                }
            }
        }
        if uses(&[Command::TrainStep1, Command::TrainStep2, Command::SolveHybrid, Command::Benchmark, Command::Eval]) {
            check("surrogate", self.surrogate_spec().validate().map_err(err));
            let t = &self.surrogate.train;
            if t.batch_size == 0 {
                check("surrogate.train.batch_size", Err("must be at least 1".into()));
            }
            if !(t.adam.learning_rate > 0.0) {
                check("surrogate.train.adam.learning_rate", Err("must be positive".into()));
            }
        }
        if uses(&[Command::TrainStep2]) {
            check("pinn", self.pinn_spec().validate().map_err(err));
            if !(self.pinn.train.adam.learning_rate > 0.0) {
                check("pinn.train.adam.learning_rate", Err("must be positive".into()));
            }
            if self.pinn.eval_times.iter().any(|t| !(*t >= 0.0)) {
                check("pinn.eval_times", Err("must be nonnegative".into()));
            }
        }
        if uses(&[Command::SolveHybrid, Command::TrainStep2, Command::Diagnose]) {
            if !(self.solver.dt > 0.0 && self.solver.dt <= self.problem.t_end) {
                check("solver.dt", Err(format!("must lie in (0, t_end = {}]", self.problem.t_end)));
            }
            if self.solver.snapshot_times.iter().any(|t| !(*t >= 0.0)) {
                check("solver.snapshot_times", Err("must be nonnegative".into()));
            }
        }
        if uses(&[Command::Diagnose]) {
            if self.diagnose.stability_dts.iter().any(|t| !(*t > 0.0)) {
                check("diagnose.stability_dts", Err("must be positive".into()));
            }
            if !(self.diagnose.stability_t_end > 0.0) {
                check("diagnose.stability_t_end", Err("must be positive".into()));
            }
        }
        if uses(&[Command::Benchmark]) {
            let b = &self.benchmark;
            if b.n_list.len() < 2 {
                check("benchmark.n_list", Err("needs at least two sizes for a slope".into()));
            }
            for &n in &b.n_list {
                if let Err(e) = make_grid(self.grid.dim, n, self.grid.radius) {
                    check("benchmark.n_list", Err(err(e)));
                }
                if b.evaluators.contains(&EvaluatorKind::SurrogateFdm) && n % 8 != 0 {
                    check("benchmark.n_list", Err(format!("surrogate timing needs N divisible by 8, got {n}")));
                }
            }
            if b.repeats == 0 {
                check("benchmark.repeats", Err("must be at least 1".into()));
            }
            if b.evaluators.is_empty() {
                check("benchmark.evaluators", Err("must name at least one evaluator".into()));
            }
        }
        v
    }

    /// Missing or mismatched artifacts the command reads.
    pub fn missing_dependencies(&self, command: Command) -> Vec<String> {
        let mut v = Vec::new();
        let needs_data = matches!(command, Command::TrainStep1 | Command::Eval);
        let needs_surrogate = match command {
            Command::TrainStep2 | Command::Eval => true,
            Command::SolveHybrid => self.solver.evaluator == EvaluatorKind::SurrogateFdm,
            _ => false,
        };
        if needs_data {
            match &self.inputs.dataset {
                None => v.push("inputs.dataset: not set (point it at a gen-data run's data/ directory)".into()),
                Some(dir) => {
                    let files: &[&str] = if command == Command::Eval { &[HELDOUT_FILE] } else { &[TRAIN_FILE, HELDOUT_FILE] };
                    for f in files {
                        let p = dir.join(f);
                        match read_manifest(&p) {
                            Err(e) => v.push(format!("inputs.dataset: {}: {e}", p.display())),
                            Ok(m) => {
                                if (m.dim, m.nodes_per_axis) != (self.grid.dim, self.grid.n_v) || m.radius != self.grid.radius {
                                    v.push(format!(
                                        "inputs.dataset: {} was built for d={} N={} R={}",
                                        p.display(),
                                        m.dim,
                                        m.nodes_per_axis,
                                        m.radius
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        if needs_surrogate {
            match &self.inputs.surrogate {
                None => v.push("inputs.surrogate: not set (point it at a train-step1 run's surrogate/ directory)".into()),
                Some(dir) => {
                    for f in [D_CHECKPOINT, F_CHECKPOINT] {
                        if !dir.join(f).is_file() {
                            v.push(format!("inputs.surrogate: missing checkpoint {}", dir.join(f).display()));
                        }
                    }
                }
            }
        }
        v
    }
}
