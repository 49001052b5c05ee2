//! Physics-informed network `f(t, v)` trained against frozen operator
//! surrogates.
//!
//! The residual at a collocation time `t` is `df/dt - div(D grad f - F f)`
//! on the velocity grid: `df/dt` and `grad f` come from exact input jets,
//! `D` and `F` from the surrogates applied to the assembled grid field, and
//! the outer divergence from the central-difference stencil. Everything is
//! recorded on one tape, so parameter gradients pass through the surrogate
//! forward maps (their own parameters stay frozen) unless `stop_gradient`
//! is set.

use fpl_nn::{
    init_network, jet_graph, seed_jet, Activation, Adam, AdamConfig, Execution, Graph, LayerSpec, NetworkModel,
    StepOutcome, Stencil, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::Q_STENCIL;
use crate::error::{invalid, FplError, Result};
use crate::grid::{make_grid, DistributionField, VelocityGrid};
use crate::integrator::Trajectory;
use crate::reference::{bkw_field, grid_moments, Moments};
use crate::surrogate::Surrogates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PinnSpec {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub t_end: f64,
    /// Random collocation times per epoch.
    pub n_t: usize,
    /// Velocity nodes per axis (must equal the surrogate's grid).
    pub n_v: usize,
    pub radius: f64,
    /// Detach the surrogate inputs from the tape.
    pub stop_gradient: bool,
    pub stencil: Stencil,
    pub residual_weight: f64,
    pub ic_weight: f64,
}

impl Default for PinnSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: vec![100; 4],
            t_end: 5.0,
            n_t: 10,
            n_v: 64,
            radius: 5.0,
            stop_gradient: false,
            stencil: Q_STENCIL,
            residual_weight: 1.0,
            ic_weight: 1.0,
        }
    }
}

impl PinnSpec {
    pub fn new(dim: usize, t_end: f64) -> Self {
        Self {
            dim,
            t_end,
            n_v: if dim == 3 { 32 } else { 64 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dim == 2 || self.dim == 3) {
            return Err(FplError::InvalidDimension(self.dim));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return invalid("hidden widths must be non-empty and positive");
        }
        if !(self.t_end > 0.0) || self.n_t == 0 {
            return invalid("need t_end > 0 and at least one collocation time");
        }
        if !(self.residual_weight >= 0.0 && self.ic_weight >= 0.0) {
            return invalid("loss weights must be nonnegative");
        }
        make_grid(self.dim, self.n_v, self.radius).map(|_| ())
    }

    pub fn grid(&self) -> Result<VelocityGrid> {
        make_grid(self.dim, self.n_v, self.radius)
    }

    /// `(d+1) - hidden... - 1` with tanh hidden units and a softplus output.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut l = Vec::new();
        let mut width = self.dim + 1;
        for &h in &self.hidden {
            l.push(LayerSpec::dense(width, h));
            l.push(LayerSpec::act(Activation::Tanh));
            width = h;
        }
        l.push(LayerSpec::dense(width, 1));
        l.push(LayerSpec::act(Activation::Softplus));
        l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinnModel {
    pub spec: PinnSpec,
    pub net: NetworkModel,
}

pub fn build_pinn(spec: &PinnSpec, seed: u64) -> Result<PinnModel> {
    spec.validate()?;
    let mut net = init_network(spec.layers(), &[spec.dim + 1], seed)?;
    net.config = toml::to_string(spec).map_err(|e| FplError::Format(e.to_string()))?;
    Ok(PinnModel { spec: spec.clone(), net })
}

impl PinnModel {
    pub fn from_network(net: NetworkModel) -> Result<Self> {
        let spec: PinnSpec = toml::from_str(&net.config).map_err(|e| FplError::Format(e.to_string()))?;
        if net.layers != spec.layers() {
            return Err(FplError::Format("network layers do not match the recorded spec".into()));
        }
        Ok(Self { spec, net })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationBatch {
    pub times: Vec<f64>,
    pub grid: VelocityGrid,
}

/// `n_t` uniform times in `[0, t_end]` and the full velocity grid.
pub fn sample_collocation(spec: &PinnSpec, seed: u64) -> Result<CollocationBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(CollocationBatch {
        times: (0..spec.n_t).map(|_| rng.gen_range(0.0..=spec.t_end)).collect(),
        grid: spec.grid()?,
    })
}

/// Rows `(t, v_k)` for every node of `grid`.
fn points(grid: &VelocityGrid, t: f64) -> Result<Tensor> {
    let d = grid.dim();
    let mut data = Vec::with_capacity(grid.node_count() * (d + 1));
    for k in 0..grid.node_count() {
        data.push(t);
        data.extend_from_slice(&grid.node(k)[..d]);
    }
    Ok(Tensor::from_vec(&[grid.node_count(), d + 1], data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub field: DistributionField,
    /// `t` lies outside the trained horizon.
    pub extrapolated: bool,
}

/// Evaluates the network at `t` on every node of `grid`.
pub fn assemble_field(model: &PinnModel, t: f64, grid: &VelocityGrid) -> Result<Assembled> {
    if grid.dim() != model.spec.dim {
        return Err(FplError::GridMismatch(format!("{}-d network on a {}-d grid", model.spec.dim, grid.dim())));
    }
    let out = model.net.forward(&points(grid, t)?)?;
    Ok(Assembled {
        field: DistributionField::new(grid, out.into_data())?,
        extrapolated: !(0.0..=model.spec.t_end).contains(&t),
    })
}

fn check_surrogates(model: &PinnModel, surrogates: &Surrogates, grid: &VelocityGrid) -> Result<()> {
    surrogates.check_grid(grid)?;
    if grid.nodes_per_axis() != model.spec.n_v || grid.dim() != model.spec.dim {
        return Err(FplError::GridMismatch(format!(
            "collocation grid N={} for a network configured with N_v={}",
            grid.nodes_per_axis(),
            model.spec.n_v
        )));
    }
    Ok(())
}

/// Records the weighted squared residual at one time; returns a scalar Var.
fn residual_term(
    g: &mut Graph,
    model: &PinnModel,
    params: &[Var],
    surrogates: &Surrogates,
    grid: &VelocityGrid,
    t: f64,
    weight: f64,
) -> Result<Var> {
    let d = grid.dim();
    let n = grid.node_count();
    let h = grid.spacing();
    let directions: Vec<usize> = (0..=d).collect();
    let (seed, layout) = seed_jet(&points(grid, t)?, &directions, 1)?;
    let x = g.input(seed);
    let jet = jet_graph(&model.net, g, x, layout, params)?;
    let mut img = vec![1, 1];
    img.extend(std::iter::repeat(grid.nodes_per_axis()).take(d));
    let block = |g: &mut Graph, b: usize| -> Result<Var> {
        let v = g.narrow(jet, 0, b * n, n)?;
        Ok(g.reshape(v, &img)?)
    };
    let f = block(g, 0)?;
    let f_t = block(g, 1)?;
    let grads: Vec<Var> = (0..d).map(|j| block(g, 2 + j)).collect::<Result<_>>()?;
    let input = if model.spec.stop_gradient {
        let detached = g.value(f).clone();
        g.input(detached)
    } else {
        f
    };
    let (dm, fm) = surrogates.forward_graph(g, input, false)?;
    let mut div: Option<Var> = None;
    for i in 0..d {
        let fi = g.narrow(fm, 1, i, 1)?;
        let mut flux = g.mul(fi, f)?;
        flux = g.scale(flux, -1.0);
        for (j, &gj) in grads.iter().enumerate() {
            let dij = g.narrow(dm, 1, i * d + j, 1)?;
            let term = g.mul(dij, gj)?;
            flux = g.add(flux, term)?;
        }
        let di = g.central_difference(flux, d, i, h, model.spec.stencil)?;
        div = Some(match div {
            Some(acc) => g.add(acc, di)?,
            None => di,
        });
    }
    let r = g.sub(f_t, div.expect("dim >= 2"))?;
    let s = g.sum_squares(r);
    Ok(g.scale(s, weight))
}

fn ic_term(g: &mut Graph, model: &PinnModel, params: &[Var], ic: &DistributionField, weight: f64) -> Result<Var> {
    let grid = ic.grid();
    let x = g.input(points(grid, 0.0)?);
    let y = model.net.forward_graph(g, x, params)?;
    let target = g.input(Tensor::from_vec(&[grid.node_count(), 1], ic.values().to_vec())?);
    let r = g.sub(y, target)?;
    let s = g.sum_squares(r);
    Ok(g.scale(s, weight * grid.cell_volume()))
}

/// Riemann weight of one collocation time: `h^d * t_end / n_t`.
pub fn residual_weight(spec: &PinnSpec, grid: &VelocityGrid) -> f64 {
    grid.cell_volume() * spec.t_end / spec.n_t as f64
}

/// Governing-equation loss on a batch (no parameter gradients).
pub fn residual_loss(model: &PinnModel, surrogates: &Surrogates, batch: &CollocationBatch) -> Result<f64> {
    residual_loss_weighted(model, surrogates, batch, residual_weight(&model.spec, &batch.grid))
}

pub fn residual_loss_weighted(model: &PinnModel, surrogates: &Surrogates, batch: &CollocationBatch, weight: f64) -> Result<f64> {
    check_surrogates(model, surrogates, &batch.grid)?;
    let mut total = 0.0;
    for &t in &batch.times {
        let mut g = Graph::new(Execution::default());
        let params = model.net.bind(&mut g, false);
        let r = residual_term(&mut g, model, &params, surrogates, &batch.grid, t, weight)?;
        total += g.value(r).data()[0];
    }
    if !total.is_finite() {
        return Err(FplError::Numerical(format!("non-finite residual loss {total}")));
    }
    Ok(total)
}

/// `h^d sum_k (f(0, v_k) - f0(v_k))^2`.
pub fn ic_loss(model: &PinnModel, ic: &DistributionField) -> Result<f64> {
    let f = assemble_field(model, 0.0, ic.grid())?.field;
    Ok(f.values().iter().zip(ic.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * ic.grid().cell_volume())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub residual: f64,
    pub ic: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.residual + self.ic
    }
}

/// Weighted loss parts and parameter gradients of their sum. The graph is
/// rebuilt per collocation time to bound memory.
pub fn loss_and_gradients(
    model: &PinnModel,
    surrogates: &Surrogates,
    batch: &CollocationBatch,
    ic: &DistributionField,
    exec: Execution,
) -> Result<(LossParts, Vec<Tensor>)> {
    check_surrogates(model, surrogates, &batch.grid)?;
    if !ic.grid().same_as(&batch.grid) {
        return Err(FplError::GridMismatch("initial condition on a different grid".into()));
    }
    let spec = &model.spec;
    let w = spec.residual_weight * residual_weight(spec, &batch.grid);
    let mut grads: Vec<Tensor> = model.net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut accumulate = |g: &Graph, root: Var, params: &[Var]| -> Result<f64> {
        let mut gr = g.backward(root)?;
        for (acc, v) in grads.iter_mut().zip(params) {
            if let Some(t) = gr.take(*v) {
                acc.axpy(1.0, &t);
            }
        }
        Ok(g.value(root).data()[0])
    };
    let mut parts = LossParts { residual: 0.0, ic: 0.0 };
    for &t in &batch.times {
        let mut g = Graph::new(exec);
        let params = model.net.bind(&mut g, true);
        let r = residual_term(&mut g, model, &params, surrogates, &batch.grid, t, w)?;
        parts.residual += accumulate(&g, r, &params)?;
    }
    let mut g = Graph::new(exec);
    let params = model.net.bind(&mut g, true);
    let r = ic_term(&mut g, model, &params, ic, spec.ic_weight)?;
    parts.ic = accumulate(&g, r, &params)?;
    if !parts.total().is_finite() {
        return Err(FplError::Numerical(format!("non-finite PINN loss {parts:?}")));
    }
    Ok((parts, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PinnTrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Keep a copy of the network every this many epochs (0 disables).
    pub snapshot_every: usize,
}

impl Default for PinnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            adam: AdamConfig {
                learning_rate: 1e-3,
                decay: 0.5,
                decay_interval: 5000,
                ..AdamConfig::default()
            },
            seed: 0,
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PinnEpoch {
    pub epoch: usize,
    pub residual: f64,
    pub ic: f64,
    pub total: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PinnHistory {
    pub records: Vec<PinnEpoch>,
    /// `(epoch, network)` copies taken every `snapshot_every` epochs and at the end.
    pub snapshots: Vec<(usize, NetworkModel)>,
}

impl PinnHistory {
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "epoch,loss_ge,loss_ic,loss_total,best_so_far")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{:e},{:e},{:e}", r.epoch, r.residual, r.ic, r.total, r.best_so_far)?;
        }
        Ok(())
    }
}

/// Minimises `Loss_GE + Loss_IC` with Adam, drawing fresh collocation
/// times every epoch. `on_epoch` sees each record and the current model.
pub fn train_pinn(
    model: &mut PinnModel,
    surrogates: &Surrogates,
    ic: &DistributionField,
    config: &PinnTrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&PinnEpoch, &PinnModel),
) -> Result<PinnHistory> {
    model.spec.validate()?;
    let grid = model.spec.grid()?;
    check_surrogates(model, surrogates, &grid)?;
    let mut adam = Adam::new(config.adam, &model.net.params)?;
    let mut history = PinnHistory::default();
    let mut best = f64::INFINITY;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 1..=config.epochs {
        let batch = sample_collocation(&model.spec, seeds.gen())?;
        let (parts, grads) = loss_and_gradients(model, surrogates, &batch, ic, exec)
            .map_err(|e| FplError::Numerical(format!("epoch {epoch}: {e}")))?;
        if adam.update(&mut model.net.params, &grads)? == StepOutcome::SkippedNonFinite {
            return Err(FplError::Numerical(format!("epoch {epoch}: non-finite gradient")));
        }
        best = best.min(parts.total());
        let rec = PinnEpoch {
            epoch,
            residual: parts.residual,
            ic: parts.ic,
            total: parts.total(),
            best_so_far: best,
        };
        on_epoch(&rec, model);
        history.records.push(rec);
        if config.snapshot_every > 0 && epoch % config.snapshot_every == 0 {
            history.snapshots.push((epoch, model.net.clone()));
        }
    }
    if history.snapshots.last().map(|s| s.0) != Some(config.epochs) && config.epochs > 0 {
        history.snapshots.push((config.epochs, model.net.clone()));
    }
    Ok(history)
}

/// Fits the network to a time-independent field, `f(t, v) ~ target(v)`
/// for random `t`, using the initial-condition loss at shifted times.
pub fn fit_static(model: &mut PinnModel, target: &DistributionField, epochs: usize, adam: AdamConfig, seed: u64) -> Result<f64> {
    let grid = target.grid().clone();
    let mut opt = Adam::new(adam, &model.net.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = f64::NAN;
    let tgt = Tensor::from_vec(&[grid.node_count(), 1], target.values().to_vec())?;
    for _ in 0..epochs {
        let t = rng.gen_range(0.0..=model.spec.t_end);
        let mut g = Graph::new(Execution::default());
        let params = model.net.bind(&mut g, true);
        let x = g.input(points(&grid, t)?);
        let y = model.net.forward_graph(&mut g, x, &params)?;
        let c = g.input(tgt.clone());
        let r = g.sub(y, c)?;
        let s = g.sum_squares(r);
        let loss = g.scale(s, grid.cell_volume());
        last = g.value(loss).data()[0];
        let mut gr = g.backward(loss)?;
        let grads: Vec<Tensor> = params
            .iter()
            .zip(&model.net.params)
            .map(|(v, p)| gr.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        opt.update(&mut model.net.params, &grads)?;
    }
    Ok(last)
}

/// What a trained solution is compared against.
pub enum Reference<'a> {
    /// The closed-form BKW solution.
    Bkw,
    /// Snapshots of a reference trajectory (nearest snapshot in time).
    Trajectory(&'a Trajectory),
    /// A time-independent field, e.g. an equilibrium.
    Steady(&'a DistributionField),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub t: f64,
    pub relative_l2: f64,
    pub sup: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionReport {
    pub rows: Vec<ErrorRow>,
    pub moments: Vec<Moments>,
    /// Smallest value of the network over all evaluated nodes.
    pub min_value: f64,
}

impl SolutionReport {
    pub fn max_relative_l2(&self) -> f64 {
        self.rows.iter().map(|r| r.relative_l2).fold(0.0, f64::max)
    }

    /// Largest relative change of mass, momentum and kinetic energy against
    /// the first time. Momentum is measured against `sqrt(mass * KE)` since it
    /// may vanish.
    pub fn moment_drift(&self) -> (f64, f64, f64) {
        let m0 = &self.moments[0];
        let scale = (m0.mass * m0.kinetic_energy).sqrt();
        let mut out: (f64, f64, f64) = (0.0, 0.0, 0.0);
        for m in &self.moments {
            out.0 = out.0.max((m.mass - m0.mass).abs() / m0.mass);
            let dp = m.momentum.iter().zip(&m0.momentum).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            out.1 = out.1.max(dp / scale);
            out.2 = out.2.max((m.kinetic_energy - m0.kinetic_energy).abs() / m0.kinetic_energy);
        }
        out
    }

    /// Largest increase between consecutive entropy values.
    pub fn max_entropy_increase(&self) -> f64 {
        self.moments.windows(2).map(|w| w[1].entropy - w[0].entropy).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "t,relative_l2,sup,extrapolated,mass,kinetic_energy,entropy")?;
        for (r, m) in self.rows.iter().zip(&self.moments) {
            writeln!(
                w,
                "{},{:e},{:e},{},{:e},{:e},{:e}",
                r.t, r.relative_l2, r.sup, r.extrapolated, m.mass, m.kinetic_energy, m.entropy
            )?;
        }
        Ok(())
    }
}

pub fn evaluate_solution(model: &PinnModel, reference: &Reference, grid: &VelocityGrid, times: &[f64]) -> Result<SolutionReport> {
    let mut rows = Vec::with_capacity(times.len());
    let mut moments = Vec::with_capacity(times.len());
    let mut min_value = f64::INFINITY;
    for &t in times {
        let a = assemble_field(model, t, grid)?;
        let exact = match reference {
            Reference::Bkw => bkw_field(t, grid)?,
            Reference::Trajectory(tr) => {
                let f = tr.at(t);
                if !f.grid().same_as(grid) {
                    return Err(FplError::GridMismatch("reference trajectory on a different grid".into()));
                }
                f.clone()
            }
            Reference::Steady(f) => (*f).clone(),
        };
        min_value = a.field.values().iter().copied().fold(min_value, f64::min);
        rows.push(ErrorRow {
            t,
            relative_l2: a.field.relative_l2(&exact)?,
            sup: a.field.sup_distance(&exact)?,
            extrapolated: a.extrapolated,
        });
        moments.push(grid_moments(&a.field)?);
    }
    Ok(SolutionReport { rows, moments, min_value })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("spearman needs two equal-length series of at least two values");
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{fdm_divergence, CollisionKernelSpec};
    use crate::reference::{make_initial_condition, InitialConditionPreset};
    use crate::surrogate::{build_surrogate, SurrogateSpec};

    fn tiny() -> (PinnSpec, Surrogates) {
        let spec = PinnSpec {
            hidden: vec![8, 8],
            n_v: 16,
            n_t: 3,
            ..PinnSpec::new(2, 3.0)
        };
        let s_spec = SurrogateSpec {
            encoder_channels: vec![2, 2, 2, 2],
            decoder_channels: vec![2, 2, 2],
            bottleneck_channels: 1,
            ..SurrogateSpec::new(2, 16)
        };
        let k = CollisionKernelSpec::new(0.0, 1.0, 2).unwrap();
        let s = build_surrogate(&s_spec, &spec.grid().unwrap(), &k, 1).unwrap();
        (spec, s)
    }

    #[test]
    fn layer_widths() {
        let m = build_pinn(&PinnSpec::new(2, 5.0), 0).unwrap();
        let dense: Vec<(usize, usize)> = m
            .net
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { inputs, outputs } => Some((*inputs, *outputs)),
                _ => None,
            })
            .collect();
        assert_eq!(dense, vec![(3, 100), (100, 100), (100, 100), (100, 100), (100, 1)]);
        assert_eq!(m.net.parameter_count(), 30_801);
        assert_eq!(build_pinn(&PinnSpec::new(3, 3.0), 0).unwrap().net.parameter_count(), 30_901);
        assert_eq!(PinnModel::from_network(m.net.clone()).unwrap(), m);
    }

    #[test]
    fn collocation() {
        let spec = PinnSpec::new(2, 5.0);
        let b = sample_collocation(&spec, 4).unwrap();
        assert_eq!(b.times.len(), 10);
        assert_eq!(b.grid.node_count(), 4096);
        assert!(b.times.iter().all(|t| (0.0..=5.0).contains(t)));
        assert_eq!(b, sample_collocation(&spec, 4).unwrap());
        assert_ne!(b.times, sample_collocation(&spec, 5).unwrap().times);
    }

    #[test]
    fn assembled_field_is_positive() {
        let (spec, _) = tiny();
        let m = build_pinn(&spec, 2).unwrap();
        let g = spec.grid().unwrap();
        let a = assemble_field(&m, 1.0, &g).unwrap();
        assert!(a.field.values().iter().all(|v| *v > 0.0));
        assert!(!a.extrapolated);
        assert!(assemble_field(&m, 4.0, &g).unwrap().extrapolated);
    }

    #[test]
    fn ic_loss_of_constant_network() {
        let (spec, _) = tiny();
        let mut m = build_pinn(&spec, 2).unwrap();
        for p in m.net.params.iter_mut() {
            p.scale(0.0);
        }
        let g = spec.grid().unwrap();
        let ic = make_initial_condition(&InitialConditionPreset::maxwellian_default(2), &g).unwrap();
        let c = std::f64::consts::LN_2;
        let oracle: f64 = ic.values().iter().map(|f| (c - f) * (c - f)).sum::<f64>() * g.cell_volume();
        assert!((ic_loss(&m, &ic).unwrap() - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn residual_scales_with_weight() {
        let (spec, s) = tiny();
        let m = build_pinn(&spec, 3).unwrap();
        let b = sample_collocation(&spec, 1).unwrap();
        let w = residual_weight(&spec, &b.grid);
        let a = residual_loss_weighted(&m, &s, &b, w).unwrap();
        let c = residual_loss_weighted(&m, &s, &b, 2.0 * w).unwrap();
        assert!((c - 2.0 * a).abs() < 1e-12 * c);
        assert_eq!(residual_loss(&m, &s, &b).unwrap(), a);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (spec, s) = tiny();
        let m = build_pinn(&spec, 7).unwrap();
        let b = sample_collocation(&spec, 3).unwrap();
        let ic = make_initial_condition(&InitialConditionPreset::maxwellian_default(2), &b.grid).unwrap();
        let (parts, grads) = loss_and_gradients(&m, &s, &b, &ic, Execution::Sequential).unwrap();
        let total = |m: &PinnModel| residual_loss(m, &s, &b).unwrap() + ic_loss(m, &ic).unwrap();
        assert!((parts.total() - total(&m)).abs() < 1e-12 * parts.total());
        for (pi, idx) in [(0usize, 3usize), (2, 5), (4, 0), (5, 0)] {
            let mut a = m.clone();
            let mut c = m.clone();
            let h = 1e-6;
            a.net.params[pi].data_mut()[idx] += h;
            c.net.params[pi].data_mut()[idx] -= h;
            let fd = (total(&a) - total(&c)) / (2.0 * h);
            let an = grads[pi].data()[idx];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-8), "param {pi}[{idx}]: fd {fd} vs {an}");
        }
        // Detaching the surrogate input keeps the loss and changes the gradient.
        let mut detached = m.clone();
        detached.spec.stop_gradient = true;
        let (p2, g2) = loss_and_gradients(&detached, &s, &b, &ic, Execution::Sequential).unwrap();
        assert!((p2.total() - parts.total()).abs() < 1e-12 * parts.total());
        assert!(g2.iter().zip(&grads).any(|(x, y)| x.data() != y.data()));
    }

    #[test]
    fn training_reduces_loss() {
        let (spec, s) = tiny();
        let mut m = build_pinn(&spec, 5).unwrap();
        let before = m.clone();
        let ic = bkw_field(0.0, &spec.grid().unwrap()).unwrap();
        let cfg = PinnTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train_pinn(&mut m, &s, &ic, &cfg, Execution::Sequential, |_, _| {}).unwrap();
        assert_eq!(m, before);
        let cfg = PinnTrainConfig {
            epochs: 40,
            snapshot_every: 10,
            ..Default::default()
        };
        let b = sample_collocation(&spec, 99).unwrap();
        let r0 = residual_loss(&m, &s, &b).unwrap() + ic_loss(&m, &ic).unwrap();
        let h = train_pinn(&mut m, &s, &ic, &cfg, Execution::Sequential, |_, _| {}).unwrap();
        let r1 = residual_loss(&m, &s, &b).unwrap() + ic_loss(&m, &ic).unwrap();
        assert!(r1 < r0);
        assert_eq!(h.snapshots.len(), 4);
        assert!(h.records.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
    }

    #[test]
    fn residual_matches_finite_difference_oracle() {
        let (spec, s) = tiny();
        let m = build_pinn(&spec, 11).unwrap();
        let g = spec.grid().unwrap();
        let (n, d) = (g.node_count(), 2);
        let b = CollocationBatch { times: vec![0.4, 2.1], grid: g.clone() };
        let eval = |t: f64, shift: [f64; 2]| -> Vec<f64> {
            let mut data = Vec::new();
            for k in 0..n {
                let v = g.node(k);
                data.extend([t, v[0] + shift[0], v[1] + shift[1]]);
            }
            m.net.forward(&Tensor::from_vec(&[n, 3], data).unwrap()).unwrap().into_data()
        };
        let eps = 1e-5;
        let mut oracle = 0.0;
        for &t in &b.times {
            let f = eval(t, [0.0, 0.0]);
            let ft: Vec<f64> = eval(t + eps, [0.0; 2]).iter().zip(eval(t - eps, [0.0; 2])).map(|(a, c)| (a - c) / (2.0 * eps)).collect();
            let grad: Vec<Vec<f64>> = (0..d)
                .map(|j| {
                    let mut e = [0.0; 2];
                    e[j] = eps;
                    let p = eval(t, e);
                    e[j] = -eps;
                    p.iter().zip(eval(t, e)).map(|(a, c)| (a - c) / (2.0 * eps)).collect()
                })
                .collect();
            let img = Tensor::from_vec(&[1, 1, 16, 16], f.clone()).unwrap();
            let dm = s.d_model.forward(&img).unwrap().into_data();
            let fm = s.f_model.forward(&img).unwrap().into_data();
            let mut planes = vec![0.0; d * n];
            for i in 0..d {
                for k in 0..n {
                    let mut flux = -fm[i * n + k] * f[k];
                    for (j, gj) in grad.iter().enumerate() {
                        flux += dm[(i * d + j) * n + k] * gj[k];
                    }
                    planes[i * n + k] = flux;
                }
            }
            let div = fdm_divergence(&g, &planes, spec.stencil);
            oracle += ft.iter().zip(&div).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
        }
        oracle *= residual_weight(&spec, &g);
        let got = residual_loss(&m, &s, &b).unwrap();
        assert!((got - oracle).abs() < 1e-6 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn static_fit_approaches_target() {
        let (spec, _) = tiny();
        let g = spec.grid().unwrap();
        let mx = make_initial_condition(&InitialConditionPreset::maxwellian_default(2), &g).unwrap();
        let mut m = build_pinn(&spec, 1).unwrap();
        let before = ic_loss(&m, &mx).unwrap();
        let cfg = AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        };
        fit_static(&mut m, &mx, 300, cfg, 0).unwrap();
        assert!(ic_loss(&m, &mx).unwrap() < 0.1 * before);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
