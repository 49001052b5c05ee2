//! Closed-form solutions, initial-condition presets and moment diagnostics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, FplError, Result};
use crate::grid::{build_quadrature, normalize_volume, DistributionField, QuadratureKind, QuadratureRule, VelocityGrid};

/// Floor applied inside `f log f` so that empty cells contribute nothing.
pub const ENTROPY_FLOOR: f64 = 1e-30;

/// `rho / (2 pi T)^{d/2} exp(-|v - u|^2 / (2T))`.
pub fn maxwellian(rho: f64, u: &[f64], temperature: f64, v: &[f64]) -> Result<f64> {
    if !(rho > 0.0) || !(temperature > 0.0) {
        return invalid(format!("maxwellian needs rho > 0 and T > 0, got {rho}, {temperature}"));
    }
    if u.len() != v.len() {
        return Err(FplError::InvalidDimension(u.len()));
    }
    Ok(maxwellian_unchecked(rho, u, temperature, v))
}

pub(crate) fn maxwellian_unchecked(rho: f64, u: &[f64], temperature: f64, v: &[f64]) -> f64 {
    let d = v.len() as f64;
    let r2: f64 = v.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
    rho / (2.0 * PI * temperature).powf(d / 2.0) * (-r2 / (2.0 * temperature)).exp()
}

/// `K(t) = 1 - exp(-t/8) / 2`.
pub fn bkw_k(t: f64) -> f64 {
    1.0 - 0.5 * (-t / 8.0).exp()
}

fn check_bkw(v: &[f64]) -> Result<()> {
    if v.len() != 2 {
        return Err(FplError::InvalidDimension(v.len()));
    }
    Ok(())
}

fn bkw_parts(t: f64, v: &[f64]) -> (f64, f64, f64, f64, f64) {
    let k = bkw_k(t);
    let r2 = v[0] * v[0] + v[1] * v[1];
    let a = 1.0 / (10.0 * PI * k * k);
    let e = (-r2 / (2.0 * k)).exp();
    let p = 2.0 * k - 1.0 + (1.0 - k) / (2.0 * k) * r2;
    (k, r2, a, e, p)
}

/// The two-dimensional BKW solution with volume 0.2 (kernel constant 5/16).
pub fn bkw(t: f64, v: &[f64]) -> Result<f64> {
    check_bkw(v)?;
    let (_, _, a, e, p) = bkw_parts(t, v);
    Ok(a * e * p)
}

/// Exact time derivative of [`bkw`], which equals `Q(f, f)` along the solution.
pub fn bkw_dt(t: f64, v: &[f64]) -> Result<f64> {
    check_bkw(v)?;
    let (k, r2, a, e, p) = bkw_parts(t, v);
    let dk = (-t / 8.0).exp() / 16.0;
    let k2 = k * k;
    Ok(dk * a * e * (-2.0 * p / k + r2 * p / (2.0 * k2) + 2.0 - r2 / (2.0 * k2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mass: f64,
    pub momentum: Vec<f64>,
    /// `int |v|^2 f = rho |u|^2 + rho d T`.
    pub kinetic_energy: f64,
    pub temperature: f64,
    pub entropy: f64,
}

impl Moments {
    pub fn velocity(&self) -> Vec<f64> {
        self.momentum.iter().map(|m| m / self.mass).collect()
    }

    /// The Maxwellian sharing these mass, momentum and energy values.
    pub fn equilibrium(&self, grid: &VelocityGrid) -> Result<DistributionField> {
        let u = self.velocity();
        let (rho, t) = (self.mass, self.temperature);
        if !(rho > 0.0 && t > 0.0) {
            return invalid(format!("no equilibrium for mass {rho}, temperature {t}"));
        }
        DistributionField::from_fn(grid, |v| maxwellian_unchecked(rho, &u, t, v))
    }
}

/// Mass, momentum, energy, temperature and entropy by quadrature.
pub fn moments(field: &DistributionField, rule: &QuadratureRule) -> Result<Moments> {
    let grid = field.grid();
    let d = grid.dim();
    let (points, weights, values): (Vec<[f64; 3]>, Vec<f64>, Vec<f64>) = match rule.kind() {
        QuadratureKind::RiemannUniform => {
            if rule.order() != grid.nodes_per_axis() || rule.dim() != d {
                return Err(FplError::GridMismatch("Riemann rule built for a different grid".into()));
            }
            let w = grid.cell_volume();
            let pts = (0..grid.node_count()).map(|k| grid.node(k)).collect();
            (pts, vec![w; grid.node_count()], field.values().to_vec())
        }
        QuadratureKind::GaussLegendre => {
            if rule.dim() != d {
                return Err(FplError::GridMismatch(format!("{}-d rule on a {d}-d grid", rule.dim())));
            }
            let mut pts = Vec::with_capacity(rule.point_count());
            let mut ws = Vec::with_capacity(rule.point_count());
            let mut vals = Vec::with_capacity(rule.point_count());
            for q in 0..rule.point_count() {
                let (p, w) = rule.point(q);
                vals.push(grid.interpolate(field.values(), &p[..d]));
                pts.push(p);
                ws.push(w);
            }
            (pts, ws, vals)
        }
    };
    let mut mass = 0.0;
    let mut momentum = vec![0.0; d];
    let mut energy = 0.0;
    let mut entropy = 0.0;
    for ((p, w), f) in points.iter().zip(&weights).zip(&values) {
        let wf = w * f;
        mass += wf;
        for a in 0..d {
            momentum[a] += wf * p[a];
        }
        energy += wf * p[..d].iter().map(|x| x * x).sum::<f64>();
        let g = f.max(ENTROPY_FLOOR);
        entropy += w * g * g.ln();
    }
    if !(mass > 0.0) {
        return invalid(format!("moments need positive mass, got {mass}"));
    }
    let u2: f64 = momentum.iter().map(|m| m * m).sum::<f64>() / (mass * mass);
    let temperature = (energy / mass - u2) / d as f64;
    Ok(Moments {
        mass,
        momentum,
        kinetic_energy: energy,
        temperature,
        entropy,
    })
}

/// Midpoint-rule moments on the field's own grid.
pub fn grid_moments(field: &DistributionField) -> Result<Moments> {
    let rule = build_quadrature(QuadratureKind::RiemannUniform, 0, field.grid())?;
    moments(field, &rule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum InitialConditionPreset {
    Maxwellian {
        rho: f64,
        velocity: Vec<f64>,
        temperature: f64,
    },
    Bkw,
    TwoGaussian2D {
        c1: [f64; 2],
        c2: [f64; 2],
        sigma: f64,
    },
    TwoGaussian3D {
        c1: [f64; 3],
        c2: [f64; 3],
        sigma: f64,
    },
}

/// Volume shared by every normalised preset and training sample.
pub const TARGET_VOLUME: f64 = 0.2;

impl InitialConditionPreset {
    pub fn maxwellian_default(dim: usize) -> Self {
        Self::Maxwellian {
            rho: TARGET_VOLUME,
            velocity: vec![0.0; dim],
            temperature: 1.0,
        }
    }

    pub fn two_gaussian_2d() -> Self {
        Self::TwoGaussian2D {
            c1: [0.0, 1.0],
            c2: [0.0, -1.0],
            sigma: 0.8,
        }
    }

    pub fn two_gaussian_3d() -> Self {
        Self::TwoGaussian3D {
            c1: [1.4, 1.4, 0.0],
            c2: [-1.4, -1.4, 0.0],
            sigma: 0.9,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Maxwellian { velocity, .. } => velocity.len(),
            Self::Bkw | Self::TwoGaussian2D { .. } => 2,
            Self::TwoGaussian3D { .. } => 3,
        }
    }

    /// Pointwise value before any grid normalisation.
    pub fn value(&self, v: &[f64]) -> f64 {
        match self {
            Self::Maxwellian {
                rho,
                velocity,
                temperature,
            } => maxwellian_unchecked(*rho, velocity, *temperature, v),
            Self::Bkw => bkw(0.0, v).unwrap_or(f64::NAN),
            Self::TwoGaussian2D { c1, c2, sigma } => {
                0.5 * TARGET_VOLUME * (maxwellian_unchecked(1.0, c1, sigma * sigma, v) + maxwellian_unchecked(1.0, c2, sigma * sigma, v))
            }
            Self::TwoGaussian3D { c1, c2, sigma } => {
                0.5 * TARGET_VOLUME * (maxwellian_unchecked(1.0, c1, sigma * sigma, v) + maxwellian_unchecked(1.0, c2, sigma * sigma, v))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Maxwellian { rho, temperature, velocity } => {
                if !(*rho > 0.0 && *temperature > 0.0) {
                    return invalid("maxwellian preset needs rho > 0 and temperature > 0");
                }
                if !(velocity.len() == 2 || velocity.len() == 3) {
                    return Err(FplError::InvalidDimension(velocity.len()));
                }
            }
            Self::TwoGaussian2D { sigma, .. } | Self::TwoGaussian3D { sigma, .. } => {
                if !(*sigma > 0.0) {
                    return invalid("two-Gaussian preset needs sigma > 0");
                }
            }
            Self::Bkw => {}
        }
        Ok(())
    }
}

/// Samples a preset on `grid`. The two-Gaussian presets are rescaled so
/// that their midpoint-rule volume is exactly 0.2.
pub fn make_initial_condition(preset: &InitialConditionPreset, grid: &VelocityGrid) -> Result<DistributionField> {
    preset.validate()?;
    if preset.dim() != grid.dim() {
        return Err(FplError::GridMismatch(format!(
            "{}-d preset on a {}-d grid",
            preset.dim(),
            grid.dim()
        )));
    }
    let field = DistributionField::density(grid, {
        let d = grid.dim();
        (0..grid.node_count()).map(|k| preset.value(&grid.node(k)[..d])).collect()
    })?;
    match preset {
        InitialConditionPreset::TwoGaussian2D { .. } | InitialConditionPreset::TwoGaussian3D { .. } => {
            let rule = build_quadrature(QuadratureKind::RiemannUniform, 0, grid)?;
            normalize_volume(&field, TARGET_VOLUME, &rule)
        }
        _ => Ok(field),
    }
}

/// [`bkw`] sampled on a two-dimensional grid.
pub fn bkw_field(t: f64, grid: &VelocityGrid) -> Result<DistributionField> {
    if grid.dim() != 2 {
        return Err(FplError::InvalidDimension(grid.dim()));
    }
    DistributionField::from_fn(grid, |v| {
        let (_, _, a, e, p) = bkw_parts(t, v);
        a * e * p
    })
}

/// [`bkw_dt`] sampled on a two-dimensional grid.
pub fn bkw_dt_field(t: f64, grid: &VelocityGrid) -> Result<DistributionField> {
    if grid.dim() != 2 {
        return Err(FplError::InvalidDimension(grid.dim()));
    }
    DistributionField::from_fn(grid, |v| bkw_dt(t, v).unwrap_or(f64::NAN))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{integrate, make_grid};

    #[test]
    fn maxwellian_at_origin() {
        let m = maxwellian(0.2, &[0.0, 0.0], 1.0, &[0.0, 0.0]).unwrap();
        assert!((m - 0.0318310).abs() < 1e-7);
        assert!(maxwellian(0.0, &[0.0], 1.0, &[0.0]).is_err());
        assert!(maxwellian(0.2, &[0.0], -1.0, &[0.0]).is_err());
    }

    #[test]
    fn bkw_values() {
        assert_eq!(bkw(0.0, &[0.0, 0.0]).unwrap(), 0.0);
        // K = 1/2: prefactor 2/(5 pi), polynomial (1 - K)/(2K) |v|^2 = 1/2.
        let at1 = bkw(0.0, &[1.0, 0.0]).unwrap();
        assert!((at1 - 1.0 / (5.0 * PI * 1f64.exp())).abs() < 1e-15);
        assert!((at1 - 0.0234199).abs() < 1e-7);
        let limit = bkw(200.0, &[0.8, -1.1]).unwrap();
        let m = maxwellian(0.2, &[0.0, 0.0], 1.0, &[0.8, -1.1]).unwrap();
        assert!((limit - m).abs() < 1e-12);
        assert!(bkw(0.0, &[1.0, 0.0, 0.0]).is_err());
        assert!(bkw_dt(1.0, &[1.0]).is_err());
    }

    #[test]
    fn bkw_dt_matches_time_difference() {
        let h = 1e-5;
        for t in [0.0, 0.5, 1.0, 3.0, 10.0] {
            for v in [[0.0, 0.0], [1.0, 0.0], [0.3, -1.7], [2.5, 2.0]] {
                let fd = (bkw(t + h, &v).unwrap() - bkw(t - h, &v).unwrap()) / (2.0 * h);
                let exact = bkw_dt(t, &v).unwrap();
                assert!((fd - exact).abs() <= 1e-8 * exact.abs().max(1e-3), "t={t} v={v:?}: {fd} vs {exact}");
            }
        }
        assert!(bkw_dt(0.0, &[0.0, 0.0]).unwrap() > 0.0);
        assert!(bkw_dt(400.0, &[0.7, 0.1]).unwrap().abs() < 1e-20);
    }

    #[test]
    fn moments_of_shifted_maxwellian() {
        // R = 8 keeps the shifted tail below 1e-12 so only the identities are tested.
        let g = make_grid(2, 96, 8.0).unwrap();
        let f = DistributionField::from_fn(&g, |v| maxwellian_unchecked(0.2, &[0.0, 1.0], 1.0, v)).unwrap();
        let rule = build_quadrature(QuadratureKind::RiemannUniform, 0, &g).unwrap();
        let m = moments(&f, &rule).unwrap();
        assert!((m.mass - 0.2).abs() < 1e-5);
        assert!(m.momentum[0].abs() < 1e-12 && (m.momentum[1] - 0.2).abs() < 1e-5);
        assert!((m.kinetic_energy - 0.6).abs() < 1e-4);
        assert!((m.temperature - 1.0).abs() < 1e-4);
    }

    #[test]
    fn maxwellian_entropy() {
        let g = make_grid(2, 64, 5.0).unwrap();
        let f = DistributionField::from_fn(&g, |v| maxwellian_unchecked(0.2, &[0.0, 0.0], 1.0, v)).unwrap();
        let m = grid_moments(&f).unwrap();
        let exact = 0.2 * ((0.2 / (2.0 * PI)).ln() - 1.0);
        assert!((exact + 0.88946).abs() < 1e-5);
        assert!((m.entropy - exact).abs() < 1e-4, "{}", m.entropy);
    }

    #[test]
    fn presets() {
        let g = make_grid(2, 64, 5.0).unwrap();
        let rule = build_quadrature(QuadratureKind::RiemannUniform, 0, &g).unwrap();
        let m = make_initial_condition(&InitialConditionPreset::maxwellian_default(2), &g).unwrap();
        assert!((integrate(&m, &rule).unwrap() - 0.2).abs() < 1e-6);

        let two = make_initial_condition(&InitialConditionPreset::two_gaussian_2d(), &g).unwrap();
        let n = g.node_count();
        for k in 0..n {
            assert_eq!(two.values()[k], two.values()[n - 1 - k]);
        }
        assert!((integrate(&two, &rule).unwrap() - 0.2).abs() < 1e-12);

        let b = make_initial_condition(&InitialConditionPreset::Bkw, &g).unwrap();
        for k in (0..n).step_by(97) {
            assert_eq!(b.values()[k], bkw(0.0, &g.node(k)[..2]).unwrap());
        }
        let g3 = make_grid(3, 16, 5.0).unwrap();
        assert!(make_initial_condition(&InitialConditionPreset::Bkw, &g3).is_err());
        let t3 = make_initial_condition(&InitialConditionPreset::two_gaussian_3d(), &g3).unwrap();
        assert!(t3.is_nonnegative());
    }

    #[test]
    fn bkw_conserves_moments_and_entropy_decays() {
        let g = make_grid(2, 64, 5.0).unwrap();
        let series: Vec<Moments> = [0.0, 1.0, 2.0, 3.0, 5.0]
            .iter()
            .map(|&t| grid_moments(&bkw_field(t, &g).unwrap()).unwrap())
            .collect();
        for m in &series {
            assert!((m.mass - series[0].mass).abs() < 1e-4 * series[0].mass);
            assert!((m.kinetic_energy - series[0].kinetic_energy).abs() < 1e-4 * series[0].kinetic_energy);
        }
        for w in series.windows(2) {
            assert!(w[1].entropy < w[0].entropy);
        }
    }
}
