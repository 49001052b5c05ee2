//! The Landau kernel and direct evaluation of `D(f)`, `F(f)` and
//! `Q(f, f) = div(D grad f - F f)`.
//!
//! Two evaluation routes exist. [`quadrature_operators`] evaluates the
//! velocity integrals pointwise with any [`QuadratureRule`] (Gauss-Legendre
//! points see the field through multilinear interpolation, or an analytic
//! [`Density`] directly). [`CollisionOperator`] is specialised to the
//! midpoint rule on the grid itself: the node-pair sum is a discrete
//! convolution with a tabulated kernel, evaluated either by the direct
//! `O(N^{2d})` loop or by zero-padded FFTs. Both give the same sums.

use std::sync::{Arc, OnceLock};

use fpl_nn::kernels::central_difference;
use fpl_nn::{Execution, Stencil};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FplError, Result};
use crate::grid::{DistributionField, QuadratureKind, QuadratureRule, VelocityGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionKernelSpec {
    pub gamma: f64,
    pub lambda: f64,
    pub dim: usize,
}

impl CollisionKernelSpec {
    pub fn new(gamma: f64, lambda: f64, dim: usize) -> Result<Self> {
        let s = Self { gamma, lambda, dim };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dim == 2 || self.dim == 3) {
            return Err(FplError::InvalidDimension(self.dim));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be positive, got {}", self.lambda));
        }
        // |z|^(gamma + 2) is locally integrable in d dimensions iff gamma > -d - 2.
        let guard = -(self.dim as f64) - 2.0;
        if !(self.gamma > guard) || !self.gamma.is_finite() {
            return invalid(format!(
                "gamma = {} is not above the integrability guard {guard}",
                self.gamma
            ));
        }
        Ok(())
    }

    /// Whether `gamma` lies outside `(max(-d/2 - 2, -d - 1), inf)`, the range
    /// covered by the loss-controls-error convergence estimate.
    pub fn outside_convergence_range(&self) -> bool {
        let d = self.dim as f64;
        self.gamma <= (-d / 2.0 - 2.0).max(-d - 1.0)
    }

    /// Clamp radius used for singular kernels (`gamma + 2 < 0`), else zero.
    pub fn singularity_clamp(&self, grid: &VelocityGrid) -> f64 {
        if self.gamma + 2.0 < 0.0 {
            grid.spacing() / 2.0
        } else {
            0.0
        }
    }

    fn radial(&self, r2: f64, delta: f64) -> f64 {
        let r = r2.sqrt().max(delta);
        if self.gamma == 0.0 {
            1.0
        } else if self.gamma == -3.0 {
            1.0 / (r * r * r)
        } else {
            r.powf(self.gamma)
        }
    }
}

/// `Lambda |z|^gamma (|z|^2 I - z z^T)` with `|z|` in the power clamped below
/// by `delta`. Exactly zero at `z = 0`.
pub fn kernel_matrix(z: &[f64], spec: &CollisionKernelSpec, delta: f64) -> [[f64; 3]; 3] {
    let d = spec.dim;
    let r2: f64 = z[..d].iter().map(|x| x * x).sum();
    let mut m = [[0.0; 3]; 3];
    if r2 == 0.0 {
        return m;
    }
    let s = spec.lambda * spec.radial(r2, delta);
    for i in 0..d {
        for j in 0..d {
            let diag = if i == j { r2 } else { 0.0 };
            m[i][j] = s * (diag - z[i] * z[j]);
        }
    }
    m
}

/// Row divergence of the kernel, `-Lambda (d - 1) |z|^gamma z`, which is the
/// friction kernel after integrating by parts.
pub fn friction_kernel(z: &[f64], spec: &CollisionKernelSpec, delta: f64) -> [f64; 3] {
    let d = spec.dim;
    let r2: f64 = z[..d].iter().map(|x| x * x).sum();
    let mut out = [0.0; 3];
    if r2 == 0.0 {
        return out;
    }
    let s = -spec.lambda * (d as f64 - 1.0) * spec.radial(r2, delta);
    for i in 0..d {
        out[i] = s * z[i];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrictionForm {
    /// `F_i = int Phi_ij(v - w) d_j f(w) dw`.
    GradientForm,
    /// `F_i = -Lambda (d - 1) int |v - w|^gamma (v - w)_i f(w) dw`.
    DivergenceForm,
}

/// `D` and `F` at every node, stored plane-major: `d[(i * dim + j) * n + k]`
/// and `f[i * n + k]` for node `k` of `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorFields {
    grid: VelocityGrid,
    d: Vec<f64>,
    f: Vec<f64>,
}

impl OperatorFields {
    pub fn new(grid: &VelocityGrid, d: Vec<f64>, f: Vec<f64>) -> Result<Self> {
        let n = grid.node_count();
        let dim = grid.dim();
        if d.len() != dim * dim * n || f.len() != dim * n {
            return Err(FplError::GridMismatch(format!(
                "operator planes of length {}/{} for {dim}-d grid with {n} nodes",
                d.len(),
                f.len()
            )));
        }
        if d.iter().chain(&f).any(|v| !v.is_finite()) {
            return Err(FplError::Numerical("non-finite operator value".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            d,
            f,
        })
    }

    pub fn zeros(grid: &VelocityGrid) -> Self {
        let n = grid.node_count();
        let dim = grid.dim();
        Self {
            grid: grid.clone(),
            d: vec![0.0; dim * dim * n],
            f: vec![0.0; dim * n],
        }
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    /// All `dim^2` diffusion planes.
    pub fn diffusion(&self) -> &[f64] {
        &self.d
    }

    /// All `dim` friction planes.
    pub fn friction(&self) -> &[f64] {
        &self.f
    }

    pub fn diffusion_plane(&self, i: usize, j: usize) -> &[f64] {
        let n = self.grid.node_count();
        let p = i * self.grid.dim() + j;
        &self.d[p * n..(p + 1) * n]
    }

    pub fn friction_plane(&self, i: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.f[i * n..(i + 1) * n]
    }

    pub fn d_at(&self, k: usize) -> [[f64; 3]; 3] {
        let n = self.grid.node_count();
        let dim = self.grid.dim();
        let mut m = [[0.0; 3]; 3];
        for i in 0..dim {
            for j in 0..dim {
                m[i][j] = self.d[(i * dim + j) * n + k];
            }
        }
        m
    }

    pub fn f_at(&self, k: usize) -> [f64; 3] {
        let n = self.grid.node_count();
        let mut v = [0.0; 3];
        for i in 0..self.grid.dim() {
            v[i] = self.f[i * n + k];
        }
        v
    }

    /// Largest `|D_ij - D_ji|` over all nodes.
    pub fn asymmetry(&self) -> f64 {
        let dim = self.grid.dim();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in i + 1..dim {
                for (a, b) in self.diffusion_plane(i, j).iter().zip(self.diffusion_plane(j, i)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }

    /// Replaces `D` by `(D + D^T) / 2` node by node.
    pub fn symmetrize(&mut self) {
        let n = self.grid.node_count();
        let dim = self.grid.dim();
        for i in 0..dim {
            for j in i + 1..dim {
                for k in 0..n {
                    let (a, b) = ((i * dim + j) * n + k, (j * dim + i) * n + k);
                    let m = 0.5 * (self.d[a] + self.d[b]);
                    self.d[a] = m;
                    self.d[b] = m;
                }
            }
        }
    }

    /// Smallest eigenvalue of `D` over all nodes.
    pub fn min_eigenvalue(&self) -> f64 {
        (0..self.grid.node_count())
            .map(|k| min_symmetric_eigenvalue(&self.d_at(k), self.grid.dim()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Smallest eigenvalue of a symmetric 2x2 or 3x3 matrix in closed form.
pub fn min_symmetric_eigenvalue(m: &[[f64; 3]; 3], dim: usize) -> f64 {
    if dim == 2 {
        let (a, b, c) = (m[0][0], m[0][1], m[1][1]);
        let mean = 0.5 * (a + c);
        return mean - (0.25 * (a - c) * (a - c) + b * b).sqrt();
    }
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if p1 == 0.0 {
        return m[0][0].min(m[1][1]).min(m[2][2]);
    }
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (m[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
}

/// Spatial block shape used by the stencil kernels: 2-d grids are one-deep.
pub(crate) fn block_size(grid: &VelocityGrid) -> ([usize; 3], usize) {
    let n = grid.nodes_per_axis();
    if grid.dim() == 2 {
        ([1, n, n], 1)
    } else {
        ([n, n, n], 0)
    }
}

/// Stencil used by [`q_from_fields`]. The second-order stencil leaves an
/// `O(h^2)` error in `Q` of several percent at 64 nodes per axis on `[-5, 5]`.
pub const Q_STENCIL: Stencil = Stencil::Fourth;

/// Second-order central-difference gradient with zero values outside the
/// cube, as `dim` planes.
pub fn fdm_gradient(field: &DistributionField) -> Vec<f64> {
    fdm_gradient_with(field, Stencil::Second)
}

pub fn fdm_gradient_with(field: &DistributionField, stencil: Stencil) -> Vec<f64> {
    let grid = field.grid();
    let (size, first) = block_size(grid);
    (0..grid.dim())
        .flat_map(|a| central_difference(1, size, first + a, grid.spacing(), stencil, field.values()))
        .collect()
}

/// Central-difference divergence of a `dim`-plane vector field.
pub fn fdm_divergence(grid: &VelocityGrid, planes: &[f64], stencil: Stencil) -> Vec<f64> {
    let n = grid.node_count();
    let (size, first) = block_size(grid);
    let mut out = vec![0.0; n];
    for a in 0..grid.dim() {
        let da = central_difference(1, size, first + a, grid.spacing(), stencil, &planes[a * n..(a + 1) * n]);
        for (o, v) in out.iter_mut().zip(da) {
            *o += v;
        }
    }
    out
}

/// `div(D grad f - F f)` with both derivatives by [`Q_STENCIL`].
pub fn q_from_fields(field: &DistributionField, ops: &OperatorFields) -> Result<DistributionField> {
    q_from_fields_with(field, ops, Q_STENCIL)
}

/// `div(D grad f - F f)` with both derivatives by the same central stencil.
pub fn q_from_fields_with(field: &DistributionField, ops: &OperatorFields, stencil: Stencil) -> Result<DistributionField> {
    let grid = field.grid();
    grid.check_same(ops.grid())?;
    let n = grid.node_count();
    let dim = grid.dim();
    let grad = fdm_gradient_with(field, stencil);
    let f = field.values();
    let mut flux = vec![0.0; dim * n];
    for i in 0..dim {
        let fi = ops.friction_plane(i);
        let out = &mut flux[i * n..(i + 1) * n];
        for k in 0..n {
            out[k] = -fi[k] * f[k];
        }
        for j in 0..dim {
            let dij = ops.diffusion_plane(i, j);
            let gj = &grad[j * n..(j + 1) * n];
            for k in 0..n {
                out[k] += dij[k] * gj[k];
            }
        }
    }
    DistributionField::new(grid, fdm_divergence(grid, &flux, stencil))
}

/// An analytic density with an analytic gradient.
pub trait Density: Sync {
    fn value(&self, v: &[f64]) -> f64;
    fn gradient(&self, v: &[f64], out: &mut [f64]);
}

/// Source values at the points of a quadrature rule.
struct PointSource {
    points: Vec<[f64; 3]>,
    weights: Vec<f64>,
    values: Vec<f64>,
    /// `dim` entries per point when the gradient form is requested.
    gradients: Vec<f64>,
}

fn evaluate_points(
    grid: &VelocityGrid,
    spec: &CollisionKernelSpec,
    src: &PointSource,
    mode: FrictionForm,
    delta: f64,
    exec: Execution,
) -> Result<OperatorFields> {
    let dim = grid.dim();
    let n = grid.node_count();
    let per_node = exec.map(n, |k| {
        let v = grid.node(k);
        let mut d = [[0.0; 3]; 3];
        let mut f = [0.0; 3];
        let mut z = [0.0; 3];
        for (q, p) in src.points.iter().enumerate() {
            let wf = src.weights[q] * src.values[q];
            let needs_grad = mode == FrictionForm::GradientForm;
            if wf == 0.0 && !needs_grad {
                continue;
            }
            for a in 0..dim {
                z[a] = v[a] - p[a];
            }
            let phi = kernel_matrix(&z, spec, delta);
            for i in 0..dim {
                for j in 0..dim {
                    d[i][j] += phi[i][j] * wf;
                }
            }
            match mode {
                FrictionForm::DivergenceForm => {
                    let b = friction_kernel(&z, spec, delta);
                    for i in 0..dim {
                        f[i] += b[i] * wf;
                    }
                }
                FrictionForm::GradientForm => {
                    let g = &src.gradients[q * dim..(q + 1) * dim];
                    for i in 0..dim {
                        let mut s = 0.0;
                        for j in 0..dim {
                            s += phi[i][j] * g[j];
                        }
                        f[i] += src.weights[q] * s;
                    }
                }
            }
        }
        (d, f)
    });
    let mut dp = vec![0.0; dim * dim * n];
    let mut fp = vec![0.0; dim * n];
    for (k, (d, f)) in per_node.into_iter().enumerate() {
        for i in 0..dim {
            for j in 0..dim {
                dp[(i * dim + j) * n + k] = d[i][j];
            }
            fp[i * n + k] = f[i];
        }
    }
    OperatorFields::new(grid, dp, fp)
}

fn check_rule(grid: &VelocityGrid, spec: &CollisionKernelSpec, rule: &QuadratureRule) -> Result<()> {
    spec.validate()?;
    if spec.dim != grid.dim() || rule.dim() != grid.dim() {
        return Err(FplError::GridMismatch(format!(
            "kernel d={}, rule d={}, grid d={}",
            spec.dim,
            rule.dim(),
            grid.dim()
        )));
    }
    if rule.kind() == QuadratureKind::RiemannUniform && rule.order() != grid.nodes_per_axis() {
        return Err(FplError::GridMismatch("Riemann rule built for a different grid".into()));
    }
    Ok(())
}

fn rule_points(rule: &QuadratureRule) -> (Vec<[f64; 3]>, Vec<f64>) {
    (0..rule.point_count()).map(|q| rule.point(q)).unzip()
}

/// `D` and `F` of a grid field at every node by pointwise quadrature.
/// Gauss-Legendre points read the field through multilinear interpolation;
/// the gradient form uses the central-difference gradient, interpolated the
/// same way.
pub fn quadrature_operators(
    field: &DistributionField,
    spec: &CollisionKernelSpec,
    rule: &QuadratureRule,
    mode: FrictionForm,
    exec: Execution,
) -> Result<OperatorFields> {
    let grid = field.grid();
    check_rule(grid, spec, rule)?;
    let dim = grid.dim();
    let n = grid.node_count();
    let grad_planes = (mode == FrictionForm::GradientForm).then(|| fdm_gradient(field));
    let (points, weights) = rule_points(rule);
    let (values, gradients) = match rule.kind() {
        QuadratureKind::RiemannUniform => {
            let gradients = grad_planes
                .map(|g| (0..n).flat_map(|k| (0..dim).map(move |a| (k, a))).map(|(k, a)| g[a * n + k]).collect())
                .unwrap_or_default();
            (field.values().to_vec(), gradients)
        }
        QuadratureKind::GaussLegendre => {
            let values = exec.map(points.len(), |q| grid.interpolate(field.values(), &points[q][..dim]));
            let gradients = grad_planes
                .map(|g| {
                    exec.map(points.len(), |q| {
                        (0..dim)
                            .map(|a| grid.interpolate(&g[a * n..(a + 1) * n], &points[q][..dim]))
                            .collect::<Vec<_>>()
                    })
                    .concat()
                })
                .unwrap_or_default();
            (values, gradients)
        }
    };
    let src = PointSource {
        points,
        weights,
        values,
        gradients,
    };
    evaluate_points(grid, spec, &src, mode, spec.singularity_clamp(grid), exec)
}

/// `D` and `F` of an analytic density at the nodes of `grid`, with the
/// density (and its gradient) evaluated exactly at the rule's points.
pub fn analytic_operators(
    density: &dyn Density,
    grid: &VelocityGrid,
    spec: &CollisionKernelSpec,
    rule: &QuadratureRule,
    mode: FrictionForm,
    exec: Execution,
) -> Result<OperatorFields> {
    check_rule(grid, spec, rule)?;
    let dim = grid.dim();
    let (points, weights) = rule_points(rule);
    let values = exec.map(points.len(), |q| density.value(&points[q][..dim]));
    let gradients = if mode == FrictionForm::GradientForm {
        exec.map(points.len(), |q| {
            let mut g = vec![0.0; dim];
            density.gradient(&points[q][..dim], &mut g);
            g
        })
        .concat()
    } else {
        Vec::new()
    };
    let src = PointSource {
        points,
        weights,
        values,
        gradients,
    };
    evaluate_points(grid, spec, &src, mode, spec.singularity_clamp(grid), exec)
}

pub fn compute_d(field: &DistributionField, spec: &CollisionKernelSpec, rule: &QuadratureRule) -> Result<Vec<f64>> {
    Ok(operators_for_rule(field, spec, rule, FrictionForm::DivergenceForm)?.d)
}

pub fn compute_f(
    field: &DistributionField,
    spec: &CollisionKernelSpec,
    rule: &QuadratureRule,
    mode: FrictionForm,
) -> Result<Vec<f64>> {
    Ok(operators_for_rule(field, spec, rule, mode)?.f)
}

/// Dispatches to the convolution route for midpoint rules and to pointwise
/// quadrature otherwise.
pub fn operators_for_rule(
    field: &DistributionField,
    spec: &CollisionKernelSpec,
    rule: &QuadratureRule,
    mode: FrictionForm,
) -> Result<OperatorFields> {
    check_rule(field.grid(), spec, rule)?;
    match (rule.kind(), mode) {
        (QuadratureKind::RiemannUniform, FrictionForm::DivergenceForm) => {
            CollisionOperator::new(field.grid(), spec)?.operators(field, QMethod::Direct)
        }
        _ => quadrature_operators(field, spec, rule, mode, Execution::default()),
    }
}

/// `Q(f, f)` from directly computed `D` and divergence-form `F`.
pub fn direct_q(field: &DistributionField, spec: &CollisionKernelSpec, rule: &QuadratureRule) -> Result<DistributionField> {
    let ops = operators_for_rule(field, spec, rule, FrictionForm::DivergenceForm)?;
    q_from_fields(field, &ops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QMethod {
    /// Node-pair loop, `O(N^{2d})`.
    Direct,
    /// Zero-padded FFT convolution, `O(N^d log N)`.
    Fft,
}

struct FftPlan {
    padded: [usize; 3],
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
    /// Transformed kernel components, one padded array each.
    kernels: Vec<Vec<Complex<f64>>>,
}

/// Midpoint-rule collision operator on a fixed grid: `D` and `F` at node `k`
/// are `h^d sum_l K(v_k - v_l) f_l` for a kernel tabulated on all node
/// offsets.
pub struct CollisionOperator {
    grid: VelocityGrid,
    spec: CollisionKernelSpec,
    exec: Execution,
    size: [usize; 3],
    width: [usize; 3],
    /// Components per offset: the `d(d+1)/2` upper-triangular entries of
    /// `Phi`, then the `d` friction entries, already scaled by `h^d`.
    comps: usize,
    table: Vec<f64>,
    fft: OnceLock<FftPlan>,
}

impl std::fmt::Debug for CollisionOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CollisionOperator")
            .field("spec", &self.spec)
            .field("nodes_per_axis", &self.grid.nodes_per_axis())
            .field("exec", &self.exec)
            .finish()
    }
}

fn upper_pairs(dim: usize) -> Vec<(usize, usize)> {
    (0..dim).flat_map(|i| (i..dim).map(move |j| (i, j))).collect()
}

impl CollisionOperator {
    pub fn new(grid: &VelocityGrid, spec: &CollisionKernelSpec) -> Result<Self> {
        Self::with_execution(grid, spec, Execution::default())
    }

    pub fn with_execution(grid: &VelocityGrid, spec: &CollisionKernelSpec, exec: Execution) -> Result<Self> {
        spec.validate()?;
        if spec.dim != grid.dim() {
            return Err(FplError::GridMismatch(format!("kernel d={} on a {}-d grid", spec.dim, grid.dim())));
        }
        let dim = grid.dim();
        let (size, _) = block_size(grid);
        let width = size.map(|s| 2 * s - 1);
        let pairs = upper_pairs(dim);
        let comps = pairs.len() + dim;
        let h = grid.spacing();
        let scale = grid.cell_volume();
        let delta = spec.singularity_clamp(grid);
        let offsets = width[0] * width[1] * width[2];
        let table = exec
            .map(offsets, |o| {
                let m = [
                    (o / (width[1] * width[2])) as f64 - (size[0] - 1) as f64,
                    ((o / width[2]) % width[1]) as f64 - (size[1] - 1) as f64,
                    (o % width[2]) as f64 - (size[2] - 1) as f64,
                ];
                let z: Vec<f64> = if dim == 2 {
                    vec![m[1] * h, m[2] * h]
                } else {
                    vec![m[0] * h, m[1] * h, m[2] * h]
                };
                let phi = kernel_matrix(&z, spec, delta);
                let b = friction_kernel(&z, spec, delta);
                let mut row: Vec<f64> = pairs.iter().map(|&(i, j)| scale * phi[i][j]).collect();
                row.extend((0..dim).map(|i| scale * b[i]));
                row
            })
            .concat();
        Ok(Self {
            grid: grid.clone(),
            spec: *spec,
            exec,
            size,
            width,
            comps,
            table,
            fft: OnceLock::new(),
        })
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn spec(&self) -> &CollisionKernelSpec {
        &self.spec
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    fn assemble(&self, d_planes: Vec<Vec<f64>>, f_planes: Vec<Vec<f64>>) -> Result<OperatorFields> {
        let dim = self.grid.dim();
        let n = self.grid.node_count();
        let mut d = vec![0.0; dim * dim * n];
        for (c, &(i, j)) in upper_pairs(dim).iter().enumerate() {
            d[(i * dim + j) * n..(i * dim + j + 1) * n].copy_from_slice(&d_planes[c]);
            d[(j * dim + i) * n..(j * dim + i + 1) * n].copy_from_slice(&d_planes[c]);
        }
        OperatorFields::new(&self.grid, d, f_planes.concat())
    }

    /// Table component holding `Phi_ij` for any `i, j`.
    fn pair_component(&self, i: usize, j: usize) -> usize {
        let (i, j) = (i.min(j), i.max(j));
        upper_pairs(self.grid.dim()).iter().position(|&p| p == (i, j)).expect("valid pair")
    }

    /// Each output `o` is `sum_{(c, s) in terms[o]} table_c * sources[s]`.
    fn convolve(&self, sources: &[&[f64]], terms: &[Vec<(usize, usize)>], method: QMethod) -> Vec<Vec<f64>> {
        match method {
            QMethod::Direct => self.convolve_direct(sources, terms),
            QMethod::Fft => self.convolve_fft(sources, terms),
        }
    }

    fn convolve_direct(&self, sources: &[&[f64]], terms: &[Vec<(usize, usize)>]) -> Vec<Vec<f64>> {
        let [s0, s1, s2] = self.size;
        let [_, w1, w2] = self.width;
        let nc = self.comps;
        let table = &self.table;
        let live: Vec<usize> = (0..s0 * s1 * s2).filter(|&l| sources.iter().any(|s| s[l] != 0.0)).collect();
        let outputs = terms.len();
        let per_node = self.exec.map(s0 * s1 * s2, |k| {
            let (k0, k1, k2) = (k / (s1 * s2), (k / s2) % s1, k % s2);
            let mut acc = vec![0.0; outputs];
            for &l in &live {
                let (l0, l1, l2) = (l / (s1 * s2), (l / s2) % s1, l % s2);
                let o = ((k0 + s0 - 1 - l0) * w1 + (k1 + s1 - 1 - l1)) * w2 + (k2 + s2 - 1 - l2);
                let row = &table[o * nc..(o + 1) * nc];
                for (a, t) in acc.iter_mut().zip(terms) {
                    for &(c, src) in t {
                        *a += row[c] * sources[src][l];
                    }
                }
            }
            acc
        });
        (0..outputs).map(|o| per_node.iter().map(|a| a[o]).collect()).collect()
    }

    fn plan(&self) -> &FftPlan {
        self.fft.get_or_init(|| {
            let padded = self.size.map(|s| if s == 1 { 1 } else { 2 * s });
            let mut planner = FftPlanner::new();
            let forward = padded.map(|m| planner.plan_fft_forward(m));
            let inverse = padded.map(|m| planner.plan_fft_inverse(m));
            let total = padded.iter().product::<usize>();
            let [s0, s1, s2] = self.size;
            let [_, w1, w2] = self.width;
            let wrap = |m: usize, s: usize, len: usize| (m as isize - (s as isize - 1)).rem_euclid(len as isize) as usize;
            let kernels = (0..self.comps)
                .map(|c| {
                    let mut buf = vec![Complex::new(0.0, 0.0); total];
                    for o0 in 0..(2 * s0 - 1) {
                        for o1 in 0..(2 * s1 - 1) {
                            for o2 in 0..(2 * s2 - 1) {
                                let o = (o0 * w1 + o1) * w2 + o2;
                                let (p0, p1, p2) = (wrap(o0, s0, padded[0]), wrap(o1, s1, padded[1]), wrap(o2, s2, padded[2]));
                                buf[(p0 * padded[1] + p1) * padded[2] + p2].re = self.table[o * self.comps + c];
                            }
                        }
                    }
                    fft_nd(&mut buf, padded, &forward, self.exec);
                    buf
                })
                .collect();
            FftPlan {
                padded,
                forward,
                inverse,
                kernels,
            }
        })
    }

    fn convolve_fft(&self, sources: &[&[f64]], terms: &[Vec<(usize, usize)>]) -> Vec<Vec<f64>> {
        let plan = self.plan();
        let p = plan.padded;
        let total = p.iter().product::<usize>();
        let [s0, s1, s2] = self.size;
        let spectra: Vec<Vec<Complex<f64>>> = sources
            .iter()
            .map(|src| {
                let mut fh = vec![Complex::new(0.0, 0.0); total];
                for k0 in 0..s0 {
                    for k1 in 0..s1 {
                        for k2 in 0..s2 {
                            fh[(k0 * p[1] + k1) * p[2] + k2].re = src[(k0 * s1 + k1) * s2 + k2];
                        }
                    }
                }
                fft_nd(&mut fh, p, &plan.forward, self.exec);
                fh
            })
            .collect();
        let norm = 1.0 / total as f64;
        terms
            .iter()
            .map(|t| {
                let mut buf = vec![Complex::new(0.0, 0.0); total];
                for &(c, src) in t {
                    for ((b, k), f) in buf.iter_mut().zip(&plan.kernels[c]).zip(&spectra[src]) {
                        *b += k * f;
                    }
                }
                fft_nd(&mut buf, p, &plan.inverse, self.exec);
                let mut out = Vec::with_capacity(s0 * s1 * s2);
                for k0 in 0..s0 {
                    for k1 in 0..s1 {
                        for k2 in 0..s2 {
                            out.push(buf[(k0 * p[1] + k1) * p[2] + k2].re * norm);
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// `D` and divergence-form `F` of a field on this operator's grid.
    pub fn operators(&self, field: &DistributionField, method: QMethod) -> Result<OperatorFields> {
        self.grid.check_same(field.grid())?;
        let dim = self.grid.dim();
        let nd = upper_pairs(dim).len();
        let terms: Vec<Vec<(usize, usize)>> = (0..self.comps).map(|c| vec![(c, 0)]).collect();
        let mut planes = self.convolve(&[field.values()], &terms, method);
        let f_planes = planes.split_off(nd);
        self.assemble(planes, f_planes)
    }

    /// `D` and gradient-form `F_i = sum_j Phi_ij * g_j` for a supplied
    /// gradient (`dim` planes), e.g. an analytic one sampled at the nodes.
    pub fn operators_gradient_form(
        &self,
        field: &DistributionField,
        gradient: &[f64],
        method: QMethod,
    ) -> Result<OperatorFields> {
        self.grid.check_same(field.grid())?;
        let dim = self.grid.dim();
        let n = self.grid.node_count();
        if gradient.len() != dim * n {
            return Err(FplError::GridMismatch(format!("{} gradient values for {dim} x {n}", gradient.len())));
        }
        let nd = upper_pairs(dim).len();
        let mut sources: Vec<&[f64]> = vec![field.values()];
        sources.extend(gradient.chunks(n));
        let mut terms: Vec<Vec<(usize, usize)>> = (0..nd).map(|c| vec![(c, 0)]).collect();
        for i in 0..dim {
            terms.push((0..dim).map(|j| (self.pair_component(i, j), 1 + j)).collect());
        }
        let mut planes = self.convolve(&sources, &terms, method);
        let f_planes = planes.split_off(nd);
        self.assemble(planes, f_planes)
    }

    pub fn q(&self, field: &DistributionField, method: QMethod) -> Result<DistributionField> {
        let ops = self.operators(field, method)?;
        q_from_fields(field, &ops)
    }
}

/// In-place multidimensional FFT of a row-major `[p0, p1, p2]` array.
fn fft_nd(data: &mut [Complex<f64>], shape: [usize; 3], plans: &[Arc<dyn Fft<f64>>; 3], exec: Execution) {
    for axis in 0..3 {
        let len = shape[axis];
        if len == 1 {
            continue;
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let plan = &plans[axis];
        if inner == 1 {
            exec.for_each_chunk(data, len, |_, line| plan.process(line));
            continue;
        }
        let block = len * inner;
        let outer = data.len() / block;
        for o in 0..outer {
            let chunk = &mut data[o * block..(o + 1) * block];
            let mut t = vec![Complex::new(0.0, 0.0); block];
            for j in 0..len {
                for i in 0..inner {
                    t[i * len + j] = chunk[j * inner + i];
                }
            }
            exec.for_each_chunk(&mut t, len, |_, line| plan.process(line));
            for j in 0..len {
                for i in 0..inner {
                    chunk[j * inner + i] = t[i * len + j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_quadrature, make_grid, relative_l2};

    fn spec2(gamma: f64) -> CollisionKernelSpec {
        CollisionKernelSpec::new(gamma, 1.0, 2).unwrap()
    }

    fn gaussian(grid: &VelocityGrid, c: [f64; 3], s: f64) -> DistributionField {
        let d = grid.dim();
        DistributionField::from_fn(grid, |v| {
            let r2: f64 = (0..d).map(|a| (v[a] - c[a]).powi(2)).sum();
            (-r2 / (2.0 * s * s)).exp()
        })
        .unwrap()
    }

    #[test]
    fn kernel_examples() {
        let m = kernel_matrix(&[1.0, 0.0], &spec2(0.0), 0.0);
        assert_eq!(m[0][..2], [0.0, 0.0]);
        assert_eq!(m[1][..2], [0.0, 1.0]);
        let s3 = CollisionKernelSpec::new(-3.0, 1.0, 3).unwrap();
        let m = kernel_matrix(&[0.0, 0.0, 2.0], &s3, 0.0);
        let expect = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - expect[i][j]).abs() < 1e-15);
            }
        }
        assert_eq!(kernel_matrix(&[0.0, 0.0], &spec2(-2.5), 0.0), [[0.0; 3]; 3]);
    }

    #[test]
    fn spec_validation() {
        assert!(CollisionKernelSpec::new(0.0, 0.0, 2).is_err());
        assert!(CollisionKernelSpec::new(-2.5, 1.0, 2).is_ok());
        assert!(CollisionKernelSpec::new(-2.0, 1.0, 2).is_ok());
        assert!(CollisionKernelSpec::new(-3.0, 1.0, 2).is_ok());
        assert!(CollisionKernelSpec::new(-4.5, 1.0, 3).is_ok());
        assert!(CollisionKernelSpec::new(-4.0, 1.0, 2).is_err());
        assert!(CollisionKernelSpec::new(-5.0, 1.0, 3).is_err());
        assert!(CollisionKernelSpec::new(0.0, 1.0, 4).is_err());
        assert!(CollisionKernelSpec::new(f64::NAN, 1.0, 2).is_err());
    }

    #[test]
    fn convergence_range_flag() {
        // d = 2: gamma must exceed max(-3, -3) = -3.
        assert!(CollisionKernelSpec::new(-2.0, 1.0, 2).unwrap().outside_convergence_range() == false);
        let coulomb2 = CollisionKernelSpec {
            gamma: -3.0,
            lambda: 5.0,
            dim: 2,
        };
        assert!(coulomb2.outside_convergence_range());
        // d = 3: bound is max(-3.5, -4) = -3.5, so the Coulomb case is inside.
        assert!(!CollisionKernelSpec::new(-3.0, 1.0, 3).unwrap().outside_convergence_range());
    }

    #[test]
    fn gradient_of_linear_and_constant() {
        let g = make_grid(2, 16, 2.0).unwrap();
        let c = DistributionField::from_fn(&g, |_| 3.0).unwrap();
        let lin = DistributionField::from_fn(&g, |v| v[0]).unwrap();
        let gc = fdm_gradient(&c);
        let gl = fdm_gradient(&lin);
        let n = g.node_count();
        for k in 0..n {
            let idx = g.multi_index(k);
            let interior = (0..2).all(|a| idx[a] > 0 && idx[a] < 15);
            if interior {
                assert!(gc[k].abs() < 1e-12 && gc[n + k].abs() < 1e-12);
                assert!((gl[k] - 1.0).abs() < 1e-10 && gl[n + k].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_is_second_order() {
        let err = |nodes: usize| {
            // Odd counts put a node exactly at v = (1, 0) when R = nodes * h / 2.
            let h = 1.0 / ((nodes - 1) / 10) as f64;
            let r = h * nodes as f64 / 2.0;
            let g = make_grid(2, nodes, r).unwrap();
            let f = gaussian(&g, [0.0; 3], 1.0);
            let grad = fdm_gradient(&f);
            let k = (0..g.node_count())
                .find(|&k| {
                    let v = g.node(k);
                    (v[0] - 1.0).abs() < 1e-9 && v[1].abs() < 1e-9
                })
                .unwrap();
            (grad[k] + (-0.5f64).exp()).abs()
        };
        let (e1, e2) = (err(61), err(121));
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn direct_and_fft_agree() {
        for (dim, n, gamma) in [(2, 12, 0.0), (2, 10, -3.0), (3, 6, -1.0)] {
            let g = make_grid(dim, n, 3.0).unwrap();
            let spec = CollisionKernelSpec::new(gamma, 0.7, dim).unwrap();
            let f = gaussian(&g, [0.3, -0.2, 0.1], 0.9);
            for exec in [Execution::Parallel, Execution::Sequential] {
                let op = CollisionOperator::with_execution(&g, &spec, exec).unwrap();
                let a = op.operators(&f, QMethod::Direct).unwrap();
                let b = op.operators(&f, QMethod::Fft).unwrap();
                let scale = a.diffusion().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (x, y) in a.diffusion().iter().zip(b.diffusion()).chain(a.friction().iter().zip(b.friction())) {
                    assert!((x - y).abs() < 1e-12 * scale, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn table_route_matches_pointwise_riemann() {
        let g = make_grid(2, 10, 3.0).unwrap();
        let spec = CollisionKernelSpec::new(-1.5, 1.3, 2).unwrap();
        let f = gaussian(&g, [0.4, 0.0, 0.0], 1.1);
        let rule = build_quadrature(QuadratureKind::RiemannUniform, 0, &g).unwrap();
        let a = CollisionOperator::new(&g, &spec).unwrap().operators(&f, QMethod::Direct).unwrap();
        let b = quadrature_operators(&f, &spec, &rule, FrictionForm::DivergenceForm, Execution::Sequential).unwrap();
        for (x, y) in a.diffusion().iter().zip(b.diffusion()).chain(a.friction().iter().zip(b.friction())) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn maxwellian_diffusion_at_origin() {
        // rho = 0.2, T = 1: D(0) = rho T (d - 1) I + ... = 0.2 I in 2-d.
        let g = make_grid(2, 63, 5.0).unwrap();
        let m = DistributionField::from_fn(&g, |v| 0.2 / (2.0 * std::f64::consts::PI) * (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp()).unwrap();
        let rule = build_quadrature(QuadratureKind::RiemannUniform, 0, &g).unwrap();
        let ops = operators_for_rule(&m, &spec2(0.0), &rule, FrictionForm::DivergenceForm).unwrap();
        let k0 = g.node_count() / 2;
        assert!(g.node(k0)[..2].iter().all(|x| x.abs() < 1e-12));
        let d = ops.d_at(k0);
        // Truncating the second moment at |v_i| = 5 removes about 1.6e-5 of it.
        assert!((d[0][0] - 0.2).abs() < 1e-5 && (d[1][1] - 0.2).abs() < 1e-5, "{d:?}");
        assert!(d[0][1].abs() < 1e-15);
        let f = ops.f_at(k0);
        assert!(f[0].abs() < 1e-14 && f[1].abs() < 1e-14);
    }

    #[test]
    fn zero_field_gives_zero() {
        let g = make_grid(2, 8, 2.0).unwrap();
        let z = DistributionField::zeros(&g);
        let rule = build_quadrature(QuadratureKind::RiemannUniform, 0, &g).unwrap();
        let q = direct_q(&z, &spec2(0.0), &rule).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_and_divergence_forms_agree() {
        let g = make_grid(2, 48, 5.0).unwrap();
        for gamma in [0.0, -1.0] {
            let spec = CollisionKernelSpec::new(gamma, 1.0, 2).unwrap();
            let (c, s) = ([0.4, -0.3, 0.0], 0.9);
            let f = gaussian(&g, c, s);
            let grad: Vec<f64> = (0..2)
                .flat_map(|a| {
                    let f = &f;
                    (0..g.node_count()).map(move |k| -(f.grid().node(k)[a] - c[a]) / (s * s) * f.values()[k])
                })
                .collect();
            let op = CollisionOperator::new(&g, &spec).unwrap();
            let div = op.operators(&f, QMethod::Fft).unwrap();
            let gf = op.operators_gradient_form(&f, &grad, QMethod::Fft).unwrap();
            let gd = op.operators_gradient_form(&f, &grad, QMethod::Direct).unwrap();
            let err = relative_l2(gf.friction(), div.friction());
            assert!(err < 1e-3, "gamma {gamma}: {err}");
            assert!(relative_l2(gd.friction(), gf.friction()) < 1e-12);
            assert_eq!(gf.diffusion(), div.diffusion());
        }
    }

    #[test]
    fn eigenvalue_helper() {
        let m = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        assert!((min_symmetric_eigenvalue(&m, 3) - 1.0).abs() < 1e-12);
        assert!((min_symmetric_eigenvalue(&m, 2) - 1.0).abs() < 1e-12);
        let diag = [[3.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 2.0]];
        assert_eq!(min_symmetric_eigenvalue(&diag, 3), -1.0);
    }
}
