//! Method-of-lines time stepping of `df/dt = Q(f, f)` and the Q timing harness.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use fpl_nn::{Execution, Stencil};
use serde::{Deserialize, Serialize};

use crate::collision::{q_from_fields_with, CollisionKernelSpec, CollisionOperator, QMethod, Q_STENCIL};
use crate::error::{invalid, FplError, Result};
use crate::grid::{DistributionField, VelocityGrid};
use crate::reference::{grid_moments, Moments};
use crate::surrogate::{infer_operators_with, Surrogates};

/// Anything that maps a field to its collision term on the same grid.
pub trait CollisionTerm {
    fn evaluate(&self, field: &DistributionField) -> Result<DistributionField>;

    fn label(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvaluatorKind {
    DirectQuadrature,
    SurrogateFdm,
}

#[derive(Debug)]
pub enum QEvaluator {
    /// Midpoint-rule `D` and `F` followed by the central-difference divergence.
    DirectQuadrature {
        op: CollisionOperator,
        method: QMethod,
        stencil: Stencil,
    },
    /// Surrogate `D` and `F` followed by the same divergence.
    SurrogateFdm {
        models: Box<Surrogates>,
        stencil: Stencil,
        exec: Execution,
    },
}

impl QEvaluator {
    pub fn direct(grid: &VelocityGrid, spec: &CollisionKernelSpec, method: QMethod, exec: Execution) -> Result<Self> {
        Ok(QEvaluator::DirectQuadrature {
            op: CollisionOperator::with_execution(grid, spec, exec)?,
            method,
            stencil: Q_STENCIL,
        })
    }

    pub fn surrogate(models: Surrogates, exec: Execution) -> Result<Self> {
        models.spec().validate()?;
        Ok(QEvaluator::SurrogateFdm {
            models: Box::new(models),
            stencil: Q_STENCIL,
            exec,
        })
    }

    pub fn with_stencil(mut self, s: Stencil) -> Self {
        match &mut self {
            QEvaluator::DirectQuadrature { stencil, .. } | QEvaluator::SurrogateFdm { stencil, .. } => *stencil = s,
        }
        self
    }

    pub fn kind(&self) -> EvaluatorKind {
        match self {
            QEvaluator::DirectQuadrature { .. } => EvaluatorKind::DirectQuadrature,
            QEvaluator::SurrogateFdm { .. } => EvaluatorKind::SurrogateFdm,
        }
    }

    pub fn q(&self, field: &DistributionField) -> Result<DistributionField> {
        match self {
            QEvaluator::DirectQuadrature { op, method, stencil } => {
                let ops = op.operators(field, *method)?;
                q_from_fields_with(field, &ops, *stencil)
            }
            QEvaluator::SurrogateFdm { models, stencil, exec } => {
                let ops = infer_operators_with(models, field, *exec)?;
                q_from_fields_with(field, &ops, *stencil)
            }
        }
    }
}

impl CollisionTerm for QEvaluator {
    fn evaluate(&self, field: &DistributionField) -> Result<DistributionField> {
        self.q(field)
    }

    fn label(&self) -> String {
        format!("{:?}", self.kind())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<DistributionField>,
    pub moments: Vec<Moments>,
    pub dt: f64,
    pub scheme: Scheme,
    pub evaluator: String,
    /// Entropy after every step, starting with the initial field.
    pub step_entropy: Vec<f64>,
    /// Mass removed by clipping negative values, summed over all steps.
    pub clipped_mass: f64,
}

impl Trajectory {
    /// Clipped mass relative to the initial mass.
    pub fn clipped_fraction(&self) -> f64 {
        self.clipped_mass / self.moments[0].mass
    }

    pub fn final_field(&self) -> &DistributionField {
        self.fields.last().expect("trajectory holds the initial field")
    }

    /// Snapshot whose time is closest to `t`.
    pub fn at(&self, t: f64) -> &DistributionField {
        let i = (0..self.times.len())
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .expect("non-empty");
        &self.fields[i]
    }

    /// `|mass(t_end) - mass(0)| / mass(0)`.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.moments[0].mass;
        (self.moments.last().unwrap().mass - m0).abs() / m0
    }

    /// Largest single-step entropy increase (0 when non-increasing).
    pub fn max_entropy_increase(&self) -> f64 {
        self.step_entropy.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn write_moments_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let d = self.fields[0].grid().dim();
        let mom: Vec<String> = (1..=d).map(|i| format!("momentum_{i}")).collect();
        writeln!(w, "t,mass,{},kinetic_energy,entropy", mom.join(","))?;
        for (t, m) in self.times.iter().zip(&self.moments) {
            let p: Vec<String> = m.momentum.iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{t},{:e},{},{:e},{:e}", m.mass, p.join(","), m.kinetic_energy, m.entropy)?;
        }
        Ok(())
    }

    /// One CSV per snapshot (`snapshot_XXXX.csv`: node coordinates and `f`).
    pub fn write_snapshots(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, (t, f)) in self.times.iter().zip(&self.fields).enumerate() {
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("snapshot_{i:04}.csv")))?);
            writeln!(w, "# t={t}")?;
            write_field_csv(f, &mut w)?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Flattened field as `v1,..,vd,f` rows.
pub fn write_field_csv(field: &DistributionField, w: &mut impl Write) -> std::io::Result<()> {
    let g = field.grid();
    let d = g.dim();
    let head: Vec<String> = (1..=d).map(|i| format!("v{i}")).collect();
    writeln!(w, "{},f", head.join(","))?;
    for (k, val) in field.values().iter().enumerate() {
        let v = g.node(k);
        let coords: Vec<String> = v[..d].iter().map(|x| x.to_string()).collect();
        writeln!(w, "{},{val:e}", coords.join(","))?;
    }
    Ok(())
}

fn check_run(dt: f64, t_end: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return invalid(format!("time step must be positive, got {dt}"));
    }
    if !(t_end >= dt) {
        return invalid(format!("t_end {t_end} shorter than one step {dt}"));
    }
    Ok((t_end / dt).round() as usize)
}

fn snapshot_steps(times: &[f64], dt: f64, steps: usize) -> Vec<usize> {
    let mut s: Vec<usize> = times
        .iter()
        .filter(|t| t.is_finite() && **t >= 0.0)
        .map(|t| ((t / dt).round() as usize).min(steps))
        .collect();
    s.extend([0, steps]);
    s.sort_unstable();
    s.dedup();
    s
}

fn entropy_of(values: &[f64], cell: f64) -> f64 {
    values
        .iter()
        .map(|&f| f * f.max(crate::reference::ENTROPY_FLOOR).ln())
        .sum::<f64>()
        * cell
}

/// Sets negative values to zero; returns the removed mass.
fn clip(values: &mut [f64], cell: f64) -> f64 {
    let mut removed = 0.0;
    for v in values.iter_mut().filter(|v| **v < 0.0) {
        removed -= *v;
        *v = 0.0;
    }
    removed * cell
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, xi)| *o += a * xi);
}

fn advance(
    ic: &DistributionField,
    term: &dyn CollisionTerm,
    dt: f64,
    t_end: f64,
    snapshot_times: &[f64],
    scheme: Scheme,
) -> Result<Trajectory> {
    let steps = check_run(dt, t_end)?;
    let grid = ic.grid().clone();
    let cell = grid.cell_volume();
    let snaps = snapshot_steps(snapshot_times, dt, steps);
    let mut f = ic.clone();
    let mut traj = Trajectory {
        times: vec![0.0],
        fields: vec![ic.clone()],
        moments: vec![grid_moments(ic)?],
        dt,
        scheme,
        evaluator: term.label(),
        step_entropy: vec![entropy_of(ic.values(), cell)],
        clipped_mass: 0.0,
    };
    let stage = |g: &DistributionField, k: &[f64], a: f64| -> Result<DistributionField> {
        let mut v = g.values().to_vec();
        axpy(&mut v, a, k);
        DistributionField::new(&grid, v)
    };
    let at_step = |step: usize| {
        move |e: FplError| match e {
            FplError::Numerical(m) => FplError::Numerical(format!("{m} at step {step} (t = {})", step as f64 * dt)),
            other => other,
        }
    };
    for step in 1..=steps {
        let k1 = term.evaluate(&f).map_err(at_step(step))?;
        let mut next = f.values().to_vec();
        match scheme {
            Scheme::Euler => axpy(&mut next, dt, k1.values()),
            Scheme::Rk4 => {
                let eval = |k: &[f64], a: f64| stage(&f, k, a).and_then(|g| term.evaluate(&g)).map_err(at_step(step));
                let k2 = eval(k1.values(), dt / 2.0)?;
                let k3 = eval(k2.values(), dt / 2.0)?;
                let k4 = eval(k3.values(), dt)?;
                for (((o, a), (b, c)), e) in next
                    .iter_mut()
                    .zip(k1.values())
                    .zip(k2.values().iter().zip(k3.values()))
                    .zip(k4.values())
                {
                    *o += dt / 6.0 * (a + 2.0 * b + 2.0 * c + e);
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(FplError::Numerical(format!("non-finite field at step {step} (t = {})", step as f64 * dt)));
        }
        traj.clipped_mass += clip(&mut next, cell);
        traj.step_entropy.push(entropy_of(&next, cell));
        f = DistributionField::new(&grid, next)?;
        if snaps.binary_search(&step).is_ok() {
            traj.times.push(step as f64 * dt);
            traj.moments.push(grid_moments(&f)?);
            traj.fields.push(f.clone());
        }
    }
    Ok(traj)
}

/// Forward Euler `f <- f + dt Q(f)` with negative values clipped after each
/// step. Snapshots are taken at the step nearest to each requested time;
/// the initial and final fields are always kept.
pub fn euler_solve(
    ic: &DistributionField,
    term: &dyn CollisionTerm,
    dt: f64,
    t_end: f64,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    advance(ic, term, dt, t_end, snapshot_times, Scheme::Euler)
}

/// Classical four-stage Runge-Kutta; clipping only after the full step.
pub fn rk4_solve(
    ic: &DistributionField,
    term: &dyn CollisionTerm,
    dt: f64,
    t_end: f64,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    advance(ic, term, dt, t_end, snapshot_times, Scheme::Rk4)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRow {
    pub dt: f64,
    pub stable: bool,
    pub clipped_fraction: f64,
    pub growth: f64,
}

/// Runs Euler at each `dt` over `[0, t_end]`. A run is stable when it stays
/// finite, clips less than 1e-3 of the mass and the sup norm never grows
/// beyond twice its initial value. Returns the rows and the largest stable dt.
pub fn stability_scan(
    ic: &DistributionField,
    term: &dyn CollisionTerm,
    dts: &[f64],
    t_end: f64,
) -> Result<(Vec<StabilityRow>, Option<f64>)> {
    let sup0 = ic.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut rows = Vec::new();
    for &dt in dts {
        let steps = check_run(dt, t_end)?;
        let all: Vec<f64> = (0..=steps).map(|s| s as f64 * dt).collect();
        let row = match euler_solve(ic, term, dt, t_end, &all) {
            Ok(tr) => {
                let sup = tr
                    .fields
                    .iter()
                    .map(|f| f.values().iter().fold(0.0f64, |a, v| a.max(v.abs())))
                    .fold(0.0, f64::max);
                let growth = sup / sup0;
                StabilityRow {
                    dt,
                    stable: growth <= 2.0 && tr.clipped_fraction() < 1e-3,
                    clipped_fraction: tr.clipped_fraction(),
                    growth,
                }
            }
            Err(FplError::Numerical(_)) => StabilityRow {
                dt,
                stable: false,
                clipped_fraction: f64::NAN,
                growth: f64::INFINITY,
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let best = rows.iter().filter(|r| r.stable).map(|r| r.dt).fold(None, |a: Option<f64>, d| Some(a.map_or(d, |x| x.max(d))));
    Ok((rows, best))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub evaluator: String,
    pub n: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub repeats: usize,
    pub workers: usize,
}

pub fn write_bench_csv(rows: &[BenchRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "evaluator,N,mean_seconds,std_seconds,repeats,workers")?;
    for r in rows {
        writeln!(w, "{},{},{:e},{:e},{},{}", r.evaluator, r.n, r.mean_seconds, r.std_seconds, r.repeats, r.workers)?;
    }
    Ok(())
}

/// Builds the evaluator and the input field for one grid size.
pub type EvaluatorFactory<'a> = dyn Fn(usize) -> Result<(QEvaluator, DistributionField)> + 'a;

/// Wall-clock seconds per evaluation, after one untimed warm-up call.
/// Construction (kernel tables, surrogate loading) is not timed.
pub fn benchmark_q(evaluators: &[(&str, &EvaluatorFactory)], n_list: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return invalid("repeats must be at least 1");
    }
    let mut rows = Vec::new();
    for &(name, factory) in evaluators {
        for &n in n_list {
            let (eval, field) = factory(n)?;
            let workers = match &eval {
                QEvaluator::DirectQuadrature { op, .. } => op.execution().workers(),
                QEvaluator::SurrogateFdm { exec, .. } => exec.workers(),
            };
            eval.q(&field)?;
            let samples: Vec<f64> = (0..repeats)
                .map(|_| {
                    let t = Instant::now();
                    eval.q(&field).map(|_| t.elapsed().as_secs_f64())
                })
                .collect::<Result<_>>()?;
            let mean = samples.iter().sum::<f64>() / repeats as f64;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / repeats as f64;
            rows.push(BenchRow {
                evaluator: name.to_string(),
                n,
                mean_seconds: mean,
                std_seconds: var.sqrt(),
                repeats,
                workers,
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `log(y)` against `log(x)`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Grid size at which two power-law fits `t = c N^p` intersect.
pub fn crossover(ns: &[f64], slow: &[f64], fast: &[f64]) -> Option<f64> {
    let fit = |y: &[f64]| {
        let p = loglog_slope(ns, y);
        let n = ns.len() as f64;
        let c = ns.iter().zip(y).map(|(x, t)| t.ln() - p * x.ln()).sum::<f64>() / n;
        (p, c)
    };
    let (p1, c1) = fit(slow);
    let (p2, c2) = fit(fast);
    if (p1 - p2).abs() < 1e-12 {
        return None;
    }
    Some(((c2 - c1) / (p1 - p2)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::reference::{bkw_field, make_initial_condition, InitialConditionPreset};

    struct Constant(DistributionField);

    impl CollisionTerm for Constant {
        fn evaluate(&self, _: &DistributionField) -> Result<DistributionField> {
            Ok(self.0.clone())
        }

        fn label(&self) -> String {
            "constant".into()
        }
    }

    #[test]
    fn constant_forcing_is_exact() {
        let g = make_grid(2, 8, 1.0).unwrap();
        let ic = DistributionField::from_fn(&g, |v| 1.0 + v[0] * v[0]).unwrap();
        let c = DistributionField::from_fn(&g, |v| 0.3 + 0.1 * v[1]).unwrap();
        for solve in [euler_solve, rk4_solve] {
            let tr = solve(&ic, &Constant(c.clone()), 0.125, 1.0, &[0.5, 1.0]).unwrap();
            assert_eq!(tr.times, vec![0.0, 0.5, 1.0]);
            for (t, f) in tr.times.iter().zip(&tr.fields) {
                for k in 0..g.node_count() {
                    let exact = ic.values()[k] + t * c.values()[k];
                    assert!((f.values()[k] - exact).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn clipping_is_logged() {
        let g = make_grid(2, 8, 1.0).unwrap();
        let ic = DistributionField::from_fn(&g, |_| 0.1).unwrap();
        let c = DistributionField::from_fn(&g, |v| if v[0] < 0.0 { -1.0 } else { 0.0 }).unwrap();
        let tr = euler_solve(&ic, &Constant(c), 0.2, 0.2, &[]).unwrap();
        assert!(tr.final_field().is_nonnegative());
        let removed = 32.0 * 0.1 * g.cell_volume();
        assert!((tr.clipped_mass - removed).abs() < 1e-14);
    }

    #[test]
    fn bad_steps_rejected() {
        let g = make_grid(2, 8, 1.0).unwrap();
        let ic = DistributionField::from_fn(&g, |_| 1.0).unwrap();
        let c = Constant(DistributionField::zeros(&g));
        assert!(euler_solve(&ic, &c, 0.0, 1.0, &[]).is_err());
        assert!(euler_solve(&ic, &c, 0.5, 0.1, &[]).is_err());
        let blow = Constant(DistributionField::from_fn(&g, |_| f64::MAX).unwrap());
        let err = euler_solve(&ic, &blow, 1.0, 3.0, &[]).unwrap_err();
        assert!(matches!(err, FplError::Numerical(ref m) if m.contains("step 2")), "{err}");
    }

    #[test]
    fn maxwellian_is_steady() {
        let g = make_grid(2, 32, 5.0).unwrap();
        let spec = CollisionKernelSpec::new(0.0, 1.0, 2).unwrap();
        let ic = make_initial_condition(&InitialConditionPreset::maxwellian_default(2), &g).unwrap();
        let eval = QEvaluator::direct(&g, &spec, QMethod::Fft, Execution::Sequential).unwrap();
        let tr = euler_solve(&ic, &eval, 1e-2, 1.0, &[1.0]).unwrap();
        assert!(tr.final_field().relative_l2(&ic).unwrap() < 1e-2);
        assert!(tr.max_entropy_increase() < 1e-3);
    }

    #[test]
    fn rk4_more_accurate_than_euler() {
        let g = make_grid(2, 32, 5.0).unwrap();
        let spec = CollisionKernelSpec::new(0.0, 5.0 / 16.0, 2).unwrap();
        let eval = QEvaluator::direct(&g, &spec, QMethod::Fft, Execution::Sequential).unwrap();
        let ic = bkw_field(0.0, &g).unwrap();
        let fine = rk4_solve(&ic, &eval, 0.0025, 1.0, &[]).unwrap();
        let reference = fine.final_field();
        let err = |dt: f64, scheme: Scheme| {
            let tr = match scheme {
                Scheme::Euler => euler_solve(&ic, &eval, dt, 1.0, &[]),
                Scheme::Rk4 => rk4_solve(&ic, &eval, dt, 1.0, &[]),
            };
            tr.unwrap().final_field().relative_l2(reference).unwrap()
        };
        let (e1, e2) = (err(0.02, Scheme::Euler), err(0.01, Scheme::Euler));
        let r1 = err(0.02, Scheme::Rk4);
        assert!(r1 <= e1, "rk4 {r1} euler {e1}");
        let ratio = e1 / e2;
        assert!((1.8..2.2).contains(&ratio), "euler refinement ratio {ratio}");
    }

    #[test]
    fn slope_and_crossover() {
        let ns = [16.0, 32.0, 64.0];
        let slow: Vec<f64> = ns.iter().map(|n: &f64| 1e-8 * n.powi(4)).collect();
        let fast: Vec<f64> = ns.iter().map(|n: &f64| 1e-5 * n.powi(2)).collect();
        assert!((loglog_slope(&ns, &slow) - 4.0).abs() < 1e-12);
        let x = crossover(&ns, &slow, &fast).unwrap();
        assert!((x - 10f64.powf(1.5)).abs() < 1e-9);
    }

    #[test]
    fn benchmark_rows() {
        let spec = CollisionKernelSpec::new(0.0, 1.0, 2).unwrap();
        let factory = |n: usize| -> Result<(QEvaluator, DistributionField)> {
            let g = make_grid(2, n, 5.0)?;
            Ok((QEvaluator::direct(&g, &spec, QMethod::Direct, Execution::Sequential)?, bkw_field(0.0, &g)?))
        };
        let rows = benchmark_q(&[("direct", &factory)], &[8, 16], 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_seconds > 0.0 && r.workers == 1));
        assert!(benchmark_q(&[("direct", &factory)], &[8], 0).is_err());
        let mut out = Vec::new();
        write_bench_csv(&rows, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("evaluator,N,mean_seconds"));
    }
}
