//! Uniform cell-centred velocity grids on the cube `[-R, R]^d`, tensor
//! quadrature rules on the same cube, and volume normalisation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, FplError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    dim: usize,
    radius: f64,
    nodes_per_axis: usize,
    spacing: f64,
    coords: Vec<f64>,
}

pub fn make_grid(dim: usize, nodes_per_axis: usize, radius: f64) -> Result<VelocityGrid> {
    if !(dim == 2 || dim == 3) {
        return Err(FplError::InvalidDimension(dim));
    }
    if nodes_per_axis < 4 {
        return invalid(format!("nodes per axis must be at least 4, got {nodes_per_axis}"));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return invalid(format!("radius must be positive, got {radius}"));
    }
    let spacing = 2.0 * radius / nodes_per_axis as f64;
    let coords = (0..nodes_per_axis)
        .map(|i| -radius + (i as f64 + 0.5) * spacing)
        .collect();
    Ok(VelocityGrid {
        dim,
        radius,
        nodes_per_axis,
        spacing,
        coords,
    })
}

impl VelocityGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn axis_coordinates(&self) -> &[f64] {
        &self.coords
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_axis.pow(self.dim as u32)
    }

    /// Spatial shape `[N; dim]`.
    pub fn shape(&self) -> Vec<usize> {
        vec![self.nodes_per_axis; self.dim]
    }

    /// Volume element `spacing^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    /// Per-axis indices of flat node `k` (axis 0 varies slowest).
    pub fn multi_index(&self, mut k: usize) -> [usize; 3] {
        let n = self.nodes_per_axis;
        let mut idx = [0; 3];
        for a in (0..self.dim).rev() {
            idx[a] = k % n;
            k /= n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().take(self.dim).fold(0, |acc, &i| acc * self.nodes_per_axis + i)
    }

    /// Velocity of flat node `k`; unused trailing components are zero.
    pub fn node(&self, k: usize) -> [f64; 3] {
        let idx = self.multi_index(k);
        let mut v = [0.0; 3];
        for a in 0..self.dim {
            v[a] = self.coords[idx[a]];
        }
        v
    }

    /// Multilinear interpolation of nodal values at `p`, treating the field
    /// as zero beyond the outermost nodes.
    pub fn interpolate(&self, values: &[f64], p: &[f64]) -> f64 {
        let n = self.nodes_per_axis as isize;
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        for a in 0..self.dim {
            let s = (p[a] - self.coords[0]) / self.spacing;
            let i = s.floor();
            base[a] = i as isize;
            frac[a] = s - i;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut flat = 0usize;
            let mut inside = true;
            for a in 0..self.dim {
                let bit = (corner >> a) & 1;
                let i = base[a] + bit as isize;
                if i < 0 || i >= n {
                    inside = false;
                    break;
                }
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                flat = flat * self.nodes_per_axis + i as usize;
            }
            if inside && w != 0.0 {
                acc += w * values[flat];
            }
        }
        acc
    }

    pub fn same_as(&self, other: &VelocityGrid) -> bool {
        self.dim == other.dim && self.nodes_per_axis == other.nodes_per_axis && self.radius == other.radius
    }

    pub(crate) fn check_same(&self, other: &VelocityGrid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(FplError::GridMismatch(format!(
                "(d={}, N={}, R={}) vs (d={}, N={}, R={})",
                self.dim, self.nodes_per_axis, self.radius, other.dim, other.nodes_per_axis, other.radius
            )))
        }
    }
}

/// Nodal values of a distribution (or any signed scalar) on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionField {
    grid: VelocityGrid,
    values: Vec<f64>,
}

impl DistributionField {
    /// Signed field; only length and finiteness are checked.
    pub fn new(grid: &VelocityGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(FplError::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FplError::Numerical(format!("non-finite value at node {i}")));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// Density field: additionally requires every value to be non-negative.
    pub fn density(grid: &VelocityGrid, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return invalid(format!("negative density {} at node {i}", values[i]));
        }
        Self::new(grid, values)
    }

    /// Samples `f` at every grid node.
    pub fn from_fn(grid: &VelocityGrid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let d = grid.dim();
        let values = (0..grid.node_count()).map(|k| f(&grid.node(k)[..d])).collect();
        Self::new(grid, values)
    }

    pub fn zeros(grid: &VelocityGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    /// `||self - other|| / ||other||` in the discrete L2 norm.
    pub fn relative_l2(&self, reference: &DistributionField) -> Result<f64> {
        self.grid.check_same(&reference.grid)?;
        Ok(relative_l2(&self.values, &reference.values))
    }

    pub fn sup_distance(&self, other: &DistributionField) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Relative Euclidean distance of two equally long slices.
pub fn relative_l2(approx: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = approx.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadratureKind {
    GaussLegendre,
    RiemannUniform,
}

/// A tensor-product rule on `[-R, R]^d`, stored per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    kind: QuadratureKind,
    order: usize,
    dim: usize,
    radius: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on
/// the three-term Legendre recurrence.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            x = 0.0;
            dp = 1.0;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

pub fn build_quadrature(kind: QuadratureKind, order: usize, grid: &VelocityGrid) -> Result<QuadratureRule> {
    let r = grid.radius();
    let (nodes, weights) = match kind {
        QuadratureKind::GaussLegendre => {
            if order == 0 {
                return invalid("Gauss-Legendre order must be at least 1");
            }
            let (x, w) = gauss_legendre(order);
            (x.iter().map(|x| r * x).collect(), w.iter().map(|w| r * w).collect())
        }
        QuadratureKind::RiemannUniform => (
            grid.axis_coordinates().to_vec(),
            vec![grid.spacing(); grid.nodes_per_axis()],
        ),
    };
    Ok(QuadratureRule {
        kind,
        order: if kind == QuadratureKind::GaussLegendre { order } else { grid.nodes_per_axis() },
        dim: grid.dim(),
        radius: r,
        nodes,
        weights,
    })
}

/// Gauss-Legendre order used when a config does not name one.
pub fn default_gl_order(dim: usize) -> usize {
    if dim == 2 {
        30
    } else {
        20
    }
}

impl QuadratureRule {
    pub fn kind(&self) -> QuadratureKind {
        self.kind
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn axis_nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn axis_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn point_count(&self) -> usize {
        self.nodes.len().pow(self.dim as u32)
    }

    /// Tensor-product point `k` and its weight.
    pub fn point(&self, mut k: usize) -> ([f64; 3], f64) {
        let q = self.nodes.len();
        let mut p = [0.0; 3];
        let mut w = 1.0;
        for a in (0..self.dim).rev() {
            let i = k % q;
            k /= q;
            p[a] = self.nodes[i];
            w *= self.weights[i];
        }
        (p, w)
    }

    fn check_domain(&self, grid: &VelocityGrid) -> Result<()> {
        if grid.dim() != self.dim || grid.radius() != self.radius {
            return Err(FplError::GridMismatch(format!(
                "rule on [-{}, {}]^{} used with grid on [-{}, {}]^{}",
                self.radius,
                self.radius,
                self.dim,
                grid.radius(),
                grid.radius(),
                grid.dim()
            )));
        }
        if self.kind == QuadratureKind::RiemannUniform && self.nodes.len() != grid.nodes_per_axis() {
            return Err(FplError::GridMismatch("Riemann rule built for a different grid".into()));
        }
        Ok(())
    }

    /// Integral of a function evaluated at the rule's points.
    pub fn integrate_fn(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        (0..self.point_count())
            .map(|k| {
                let (p, w) = self.point(k);
                w * f(&p[..self.dim])
            })
            .sum()
    }
}

/// Quadrature of a grid field. Riemann rules sum nodal values; Gauss-Legendre
/// rules interpolate multilinearly to their points.
pub fn integrate(field: &DistributionField, rule: &QuadratureRule) -> Result<f64> {
    integrate_weighted(field, rule, |_| 1.0)
}

/// `∫ weight(v) f(v) dv` for a grid field.
pub fn integrate_weighted(
    field: &DistributionField,
    rule: &QuadratureRule,
    weight: impl Fn(&[f64]) -> f64,
) -> Result<f64> {
    let grid = field.grid();
    rule.check_domain(grid)?;
    let d = grid.dim();
    Ok(match rule.kind {
        QuadratureKind::RiemannUniform => {
            field
                .values()
                .iter()
                .enumerate()
                .map(|(k, f)| f * weight(&grid.node(k)[..d]))
                .sum::<f64>()
                * grid.cell_volume()
        }
        QuadratureKind::GaussLegendre => rule.integrate_fn(|p| grid.interpolate(field.values(), p) * weight(p)),
    })
}

/// Rescales `field` by one positive factor so its integral equals `target`.
pub fn normalize_volume(field: &DistributionField, target: f64, rule: &QuadratureRule) -> Result<DistributionField> {
    let volume = integrate(field, rule)?;
    if !(volume > 0.0) {
        return invalid(format!("cannot normalise a field with volume {volume}"));
    }
    if !(target > 0.0) {
        return invalid(format!("target volume must be positive, got {target}"));
    }
    let s = target / volume;
    let values = field.values().iter().map(|v| v * s).collect();
    DistributionField::new(field.grid(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_grids() {
        let g = make_grid(2, 64, 5.0).unwrap();
        assert_eq!(g.spacing(), 0.15625);
        assert_eq!(g.node_count(), 4096);
        assert_eq!(make_grid(3, 32, 5.0).unwrap().node_count(), 32768);
        let small = make_grid(2, 4, 1.0).unwrap();
        assert_eq!(small.axis_coordinates(), &[-0.75, -0.25, 0.25, 0.75]);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(make_grid(1, 8, 1.0), Err(FplError::InvalidDimension(1))));
        assert!(make_grid(2, 3, 1.0).is_err());
        assert!(make_grid(2, 8, 0.0).is_err());
        assert!(make_grid(2, 8, -1.0).is_err());
    }

    #[test]
    fn grid_invariants() {
        for (d, n, r) in [(2, 4, 1.0), (2, 64, 5.0), (3, 10, 2.5)] {
            let g = make_grid(d, n, r).unwrap();
            let c = g.axis_coordinates();
            assert!(c.iter().all(|&x| x > -r && x < r));
            for w in c.windows(2) {
                assert!((w[1] - w[0] - g.spacing()).abs() < 1e-12);
            }
            for k in [0, g.node_count() / 2, g.node_count() - 1] {
                assert_eq!(g.flat_index(&g.multi_index(k)), k);
            }
        }
    }

    #[test]
    fn one_point_and_two_point_rules() {
        let g = make_grid(2, 8, 5.0).unwrap();
        let r = build_quadrature(QuadratureKind::GaussLegendre, 1, &g).unwrap();
        assert_eq!(r.axis_nodes(), &[0.0]);
        assert!((r.axis_weights()[0] - 10.0).abs() < 1e-14);

        let g1 = make_grid(2, 8, 1.0).unwrap();
        let r2 = build_quadrature(QuadratureKind::GaussLegendre, 2, &g1).unwrap();
        let s = 1.0 / 3f64.sqrt();
        assert!((r2.axis_nodes()[0] + s).abs() < 1e-15 && (r2.axis_nodes()[1] - s).abs() < 1e-15);
        assert!(r2.axis_weights().iter().all(|w| (w - 1.0).abs() < 1e-15));

        let g64 = make_grid(2, 64, 5.0).unwrap();
        let rr = build_quadrature(QuadratureKind::RiemannUniform, 0, &g64).unwrap();
        assert!(rr.axis_weights().iter().all(|&w| w == 0.15625));
    }

    #[test]
    fn constant_field_volume() {
        let g = make_grid(2, 16, 5.0).unwrap();
        let f = DistributionField::from_fn(&g, |_| 1.0).unwrap();
        for kind in [QuadratureKind::RiemannUniform, QuadratureKind::GaussLegendre] {
            let r = build_quadrature(kind, 30, &g).unwrap();
            let v = match kind {
                QuadratureKind::RiemannUniform => integrate(&f, &r).unwrap(),
                QuadratureKind::GaussLegendre => r.integrate_fn(|_| 1.0),
            };
            assert!((v - 100.0).abs() < 1e-10);
        }
    }

    #[test]
    fn odd_integrand_vanishes() {
        let g = make_grid(2, 64, 5.0).unwrap();
        let r = build_quadrature(QuadratureKind::GaussLegendre, 30, &g).unwrap();
        let v = r.integrate_fn(|p| p[0] * (-(p[0] * p[0] + p[1] * p[1])).exp());
        assert!(v.abs() < 1e-12);
        let rr = build_quadrature(QuadratureKind::RiemannUniform, 0, &g).unwrap();
        let f = DistributionField::from_fn(&g, |p| p[0] * (-(p[0] * p[0] + p[1] * p[1])).exp()).unwrap();
        assert!(integrate(&f, &rr).unwrap().abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_nodes_and_linears() {
        let g = make_grid(2, 8, 2.0).unwrap();
        let f = DistributionField::from_fn(&g, |p| 1.0 + 2.0 * p[0] - p[1]).unwrap();
        for k in 0..g.node_count() {
            let v = g.node(k);
            assert!((g.interpolate(f.values(), &v[..2]) - f.values()[k]).abs() < 1e-12);
        }
        let c = g.axis_coordinates();
        let p = [0.5 * (c[2] + c[3]), 0.3 * c[4] + 0.7 * c[5]];
        assert!((g.interpolate(f.values(), &p) - (1.0 + 2.0 * p[0] - p[1])).abs() < 1e-12);
    }

    #[test]
    fn normalisation() {
        let g = make_grid(2, 16, 5.0).unwrap();
        let rr = build_quadrature(QuadratureKind::RiemannUniform, 0, &g).unwrap();
        let f = DistributionField::from_fn(&g, |_| 0.01).unwrap();
        let n = normalize_volume(&f, 0.2, &rr).unwrap();
        assert!((integrate(&n, &rr).unwrap() - 0.2).abs() < 1e-14);
        let again = normalize_volume(&n, 0.2, &rr).unwrap();
        for (a, b) in again.values().iter().zip(n.values()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
        assert!(normalize_volume(&DistributionField::zeros(&g), 0.2, &rr).is_err());
    }
}
