//! Step-1 training corpus: random Gaussian-type densities normalised to
//! volume 0.2, labelled with `D` and gradient-form `F`, in a checksummed
//! binary container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fpl_nn::container;
use fpl_nn::Execution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::{analytic_operators, CollisionKernelSpec, CollisionOperator, Density, FrictionForm, OperatorFields, QMethod};
use crate::error::{invalid, FplError, Result};
use crate::grid::{build_quadrature, integrate, DistributionField, QuadratureKind, VelocityGrid};
use crate::reference::TARGET_VOLUME;

pub const DATASET_MAGIC: &[u8; 4] = b"FPLD";
pub const DATASET_VERSION: u32 = 1;
pub const RNG_NAME: &str = "ChaCha8";
pub const PERTURBATION_BASIS: &str = "1, |v_k|, v_k^2";

/// Seed stream of the training corpus; held-out samples use stream 1.
pub const TRAIN_STREAM: u64 = 0;
pub const HELDOUT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    TwoGaussian,
    PerturbedGaussian,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Gaussian, Family::TwoGaussian, Family::PerturbedGaussian];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub center: Vec<f64>,
    pub sigma: f64,
}

impl GaussianParams {
    fn value(&self, v: &[f64]) -> f64 {
        let d = self.center.len();
        let s2 = self.sigma * self.sigma;
        let r2: f64 = v.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        (-r2 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).powf(d as f64 / 2.0)
    }
}

/// `g(v) = a + sum_k b_k |v_k| + sum_k c_k v_k^2`, all coefficients in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub constant: f64,
    pub abs_linear: Vec<f64>,
    pub quadratic: Vec<f64>,
}

impl Perturbation {
    fn value(&self, v: &[f64]) -> f64 {
        self.constant
            + v.iter()
                .zip(self.abs_linear.iter().zip(&self.quadratic))
                .map(|(x, (b, c))| b * x.abs() + c * x * x)
                .sum::<f64>()
    }

    fn partial(&self, v: &[f64], k: usize) -> f64 {
        self.abs_linear[k] * v[k].signum() * (v[k] != 0.0) as u8 as f64 + 2.0 * self.quadratic[k] * v[k]
    }
}

/// Analytic description of one random sample before normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleParams {
    pub family: Family,
    pub seed: u64,
    pub gaussians: Vec<GaussianParams>,
    pub perturbation: Option<Perturbation>,
    /// Multiplier applied to reach the target volume (1 until normalised).
    pub scale: f64,
}

impl Density for SampleParams {
    fn value(&self, v: &[f64]) -> f64 {
        let m: f64 = self.gaussians.iter().map(|g| g.value(v)).sum();
        let p = self.perturbation.as_ref().map_or(0.0, |p| p.value(v));
        self.scale * m * (1.0 + p)
    }

    fn gradient(&self, v: &[f64], out: &mut [f64]) {
        let p = self.perturbation.as_ref().map_or(0.0, |p| p.value(v));
        out.iter_mut().for_each(|o| *o = 0.0);
        for g in &self.gaussians {
            let m = g.value(v);
            let s2 = g.sigma * g.sigma;
            for (k, o) in out.iter_mut().enumerate() {
                *o += -(v[k] - g.center[k]) / s2 * m * (1.0 + p);
            }
        }
        if let Some(pert) = &self.perturbation {
            let m: f64 = self.gaussians.iter().map(|g| g.value(v)).sum();
            for (k, o) in out.iter_mut().enumerate() {
                *o += m * pert.partial(v, k);
            }
        }
        out.iter_mut().for_each(|o| *o *= self.scale);
    }
}

fn draw_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> GaussianParams {
    GaussianParams {
        center: (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        sigma: rng.gen_range(0.8..=1.2),
    }
}

/// Draws the analytic parameters of one sample; a pure function of its inputs.
pub fn sample_distribution(family: Family, seed: u64, dim: usize) -> Result<SampleParams> {
    if !(dim == 2 || dim == 3) {
        return Err(FplError::InvalidDimension(dim));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gaussians, perturbation) = match family {
        Family::Gaussian => (vec![draw_gaussian(&mut rng, dim)], None),
        Family::TwoGaussian => (vec![draw_gaussian(&mut rng, dim), draw_gaussian(&mut rng, dim)], None),
        Family::PerturbedGaussian => {
            let g = draw_gaussian(&mut rng, dim);
            let p = Perturbation {
                constant: rng.gen_range(0.0..=1.0),
                abs_linear: (0..dim).map(|_| rng.gen_range(0.0..=1.0)).collect(),
                quadratic: (0..dim).map(|_| rng.gen_range(0.0..=1.0)).collect(),
            };
            (vec![g], Some(p))
        }
    };
    Ok(SampleParams {
        family,
        seed,
        gaussians,
        perturbation,
        scale: 1.0,
    })
}

/// Seed of sample `index` in `stream`, derived from `base_seed` by a
/// dedicated ChaCha8 stream so samples are independent of generation order.
pub fn sample_seed(base_seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(stream);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LabelRule {
    /// Midpoint rule on the grid nodes, evaluated by FFT convolution.
    Midpoint,
    /// Tensor Gauss-Legendre rule with the density evaluated at its points.
    GaussLegendre { order: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub params: SampleParams,
    pub field: DistributionField,
    pub target: OperatorFields,
}

impl LabeledSample {
    pub fn family(&self) -> Family {
        self.params.family
    }

    pub fn seed(&self) -> u64 {
        self.params.seed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dim: usize,
    pub nodes_per_axis: usize,
    pub radius: f64,
    pub gamma: f64,
    pub lambda: f64,
    #[serde(with = "seed_text")]
    pub base_seed: u64,
    pub stream: u64,
    pub rng: String,
    pub perturbation_basis: String,
    pub label_rule: LabelRule,
    /// Points per axis of the labelling rule.
    pub quadrature_order: usize,
    pub volume: f64,
    pub count_gaussian: usize,
    pub count_two_gaussian: usize,
    pub count_perturbed: usize,
    /// Family and seed of every stored sample, in file order.
    pub families: Vec<Family>,
    #[serde(with = "seed_text::list")]
    pub seeds: Vec<u64>,
    /// Normalisation factor of every sample.
    pub scales: Vec<f64>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn grid(&self) -> Result<VelocityGrid> {
        crate::grid::make_grid(self.dim, self.nodes_per_axis, self.radius)
    }

    pub fn kernel(&self) -> Result<CollisionKernelSpec> {
        CollisionKernelSpec::new(self.gamma, self.lambda, self.dim)
    }
}

/// TOML integers are signed 64-bit, so seeds are stored as decimal strings.
mod seed_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }

    pub mod list {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &[u64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| x.to_string()))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|x| x.parse().map_err(serde::de::Error::custom))
                .collect()
        }
    }
}

/// Normalises a sample to volume 0.2 on the grid and labels it.
pub fn label_sample(
    mut params: SampleParams,
    grid: &VelocityGrid,
    op: &CollisionOperator,
    rule: LabelRule,
) -> Result<LabeledSample> {
    let d = grid.dim();
    params.scale = 1.0;
    let raw = DistributionField::density(grid, (0..grid.node_count()).map(|k| params.value(&grid.node(k)[..d])).collect())?;
    let midpoint = build_quadrature(QuadratureKind::RiemannUniform, 0, grid)?;
    let volume = integrate(&raw, &midpoint)?;
    if !(volume > 0.0) {
        return invalid(format!("sample {} has no mass on the grid", params.seed));
    }
    params.scale = TARGET_VOLUME / volume;
    let field = DistributionField::density(grid, raw.values().iter().map(|v| v * params.scale).collect())?;
    let target = match rule {
        LabelRule::Midpoint => {
            let n = grid.node_count();
            let mut grad = vec![0.0; d * n];
            let mut g = vec![0.0; d];
            for k in 0..n {
                params.gradient(&grid.node(k)[..d], &mut g);
                for a in 0..d {
                    grad[a * n + k] = g[a];
                }
            }
            op.operators_gradient_form(&field, &grad, QMethod::Fft)?
        }
        LabelRule::GaussLegendre { order } => {
            let gl = build_quadrature(QuadratureKind::GaussLegendre, order, grid)?;
            analytic_operators(&params, grid, op.spec(), &gl, FrictionForm::GradientForm, op.execution())?
        }
    };
    Ok(LabeledSample { params, field, target })
}

/// Families of a mixed set: cycles through the three families.
fn mixed_families(n: usize) -> Vec<Family> {
    (0..n).map(|i| Family::ALL[i % 3]).collect()
}

fn build(
    families: Vec<Family>,
    spec: &CollisionKernelSpec,
    grid: &VelocityGrid,
    rule: LabelRule,
    base_seed: u64,
    stream: u64,
    exec: Execution,
) -> Result<(Vec<LabeledSample>, DatasetManifest)> {
    spec.validate()?;
    if spec.dim != grid.dim() {
        return Err(FplError::GridMismatch(format!("kernel d={} on a {}-d grid", spec.dim, grid.dim())));
    }
    // Parallel over samples; each sample owns its seed, so order is irrelevant.
    let op = CollisionOperator::with_execution(grid, spec, Execution::Sequential)?;
    let samples = exec
        .map(families.len(), |i| {
            let seed = sample_seed(base_seed, stream, i as u64);
            label_sample(sample_distribution(families[i], seed, grid.dim())?, grid, &op, rule)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let count = |f: Family| families.iter().filter(|&&x| x == f).count();
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        dim: grid.dim(),
        nodes_per_axis: grid.nodes_per_axis(),
        radius: grid.radius(),
        gamma: spec.gamma,
        lambda: spec.lambda,
        base_seed,
        stream,
        rng: RNG_NAME.into(),
        perturbation_basis: PERTURBATION_BASIS.into(),
        label_rule: rule,
        quadrature_order: match rule {
            LabelRule::Midpoint => grid.nodes_per_axis(),
            LabelRule::GaussLegendre { order } => order,
        },
        volume: TARGET_VOLUME,
        count_gaussian: count(Family::Gaussian),
        count_two_gaussian: count(Family::TwoGaussian),
        count_perturbed: count(Family::PerturbedGaussian),
        seeds: samples.iter().map(|s| s.seed()).collect(),
        scales: samples.iter().map(|s| s.params.scale).collect(),
        families,
    };
    Ok((samples, manifest))
}

/// `n_per_family` samples of each family from the training stream.
pub fn build_dataset(
    n_per_family: usize,
    spec: &CollisionKernelSpec,
    grid: &VelocityGrid,
    rule: LabelRule,
    base_seed: u64,
    exec: Execution,
) -> Result<(Vec<LabeledSample>, DatasetManifest)> {
    if n_per_family == 0 {
        return invalid("n_per_family must be at least 1");
    }
    let families = Family::ALL
        .iter()
        .flat_map(|&f| std::iter::repeat(f).take(n_per_family))
        .collect();
    build(families, spec, grid, rule, base_seed, TRAIN_STREAM, exec)
}

/// `n` held-out samples with families cycling, from a disjoint seed stream.
pub fn build_heldout(
    n: usize,
    spec: &CollisionKernelSpec,
    grid: &VelocityGrid,
    rule: LabelRule,
    base_seed: u64,
    exec: Execution,
) -> Result<(Vec<LabeledSample>, DatasetManifest)> {
    if n == 0 {
        return invalid("held-out size must be at least 1");
    }
    build(mixed_families(n), spec, grid, rule, base_seed, HELDOUT_STREAM, exec)
}

fn format_err(e: impl std::fmt::Display) -> FplError {
    FplError::Format(e.to_string())
}

pub fn write_dataset(w: &mut impl Write, samples: &[LabeledSample], manifest: &DatasetManifest) -> Result<()> {
    if samples.len() != manifest.len() {
        return invalid("manifest does not describe the samples");
    }
    let text = toml::to_string(manifest).map_err(format_err)?;
    container::write_header(w, DATASET_MAGIC, DATASET_VERSION, &text)?;
    for s in samples {
        container::write_block(w, s.field.values())?;
        container::write_block(w, s.target.diffusion())?;
        container::write_block(w, s.target.friction())?;
    }
    Ok(())
}

pub fn save_dataset(samples: &[LabeledSample], manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, samples, manifest)?;
    w.flush()?;
    Ok(())
}

fn read_manifest_from(r: &mut impl Read) -> Result<DatasetManifest> {
    let text = container::read_header(r, DATASET_MAGIC, DATASET_VERSION)?;
    let m: DatasetManifest = toml::from_str(&text).map_err(format_err)?;
    if m.format_version != DATASET_VERSION {
        return Err(FplError::Format(format!("dataset version {}", m.format_version)));
    }
    if m.seeds.len() != m.families.len() || m.scales.len() != m.families.len() {
        return Err(FplError::Format("per-sample lists differ in length".into()));
    }
    Ok(m)
}

pub fn read_dataset(r: &mut impl Read) -> Result<(Vec<LabeledSample>, DatasetManifest)> {
    let m = read_manifest_from(r)?;
    let grid = m.grid()?;
    let n = grid.node_count();
    let d = grid.dim();
    let mut samples = Vec::with_capacity(m.len());
    for ((&family, &seed), &scale) in m.families.iter().zip(&m.seeds).zip(&m.scales) {
        let values = container::read_block(r, n)?;
        let dp = container::read_block(r, d * d * n)?;
        let fp = container::read_block(r, d * n)?;
        let mut params = sample_distribution(family, seed, d)?;
        let field = DistributionField::new(&grid, values)?;
        params.scale = scale;
        samples.push(LabeledSample {
            params,
            field,
            target: OperatorFields::new(&grid, dp, fp)?,
        });
    }
    container::expect_eof(r)?;
    Ok((samples, m))
}

pub fn load_dataset(path: &Path) -> Result<(Vec<LabeledSample>, DatasetManifest)> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// Header only: counts and grid metadata without reading any array.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    read_manifest_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::Density;
    use crate::grid::make_grid;

    #[test]
    fn parameter_draws_in_range() {
        for seed in 0..10_000u64 {
            for family in Family::ALL {
                let p = sample_distribution(family, seed, 2).unwrap();
                for g in &p.gaussians {
                    assert!(g.center.iter().all(|c| (-1.0..=1.0).contains(c)));
                    assert!((0.8..=1.2).contains(&g.sigma));
                }
                if let Some(q) = &p.perturbation {
                    let all = std::iter::once(&q.constant).chain(&q.abs_linear).chain(&q.quadratic);
                    assert!(all.into_iter().all(|c| (0.0..=1.0).contains(c)));
                }
            }
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let a = sample_distribution(Family::PerturbedGaussian, 42, 3).unwrap();
        let b = sample_distribution(Family::PerturbedGaussian, 42, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(sample_seed(1, TRAIN_STREAM, 0), sample_seed(1, HELDOUT_STREAM, 0));
        assert_ne!(sample_seed(1, TRAIN_STREAM, 0), sample_seed(1, TRAIN_STREAM, 1));
        assert_eq!(sample_seed(9, TRAIN_STREAM, 5), sample_seed(9, TRAIN_STREAM, 5));
    }

    #[test]
    fn two_gaussian_is_sum() {
        let p = sample_distribution(Family::TwoGaussian, 7, 2).unwrap();
        let v = [0.3, -0.4];
        let sum = p.gaussians[0].value(&v) + p.gaussians[1].value(&v);
        assert!((p.value(&v) - sum).abs() < 1e-15);
    }

    #[test]
    fn analytic_gradient_matches_difference() {
        let p = sample_distribution(Family::PerturbedGaussian, 3, 3).unwrap();
        let v = [0.4, -0.7, 1.1];
        let mut g = [0.0; 3];
        p.gradient(&v, &mut g);
        for k in 0..3 {
            let mut a = v;
            let mut b = v;
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (p.value(&a) - p.value(&b)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn small_dataset_properties() {
        let g = make_grid(2, 16, 5.0).unwrap();
        let spec = CollisionKernelSpec::new(0.0, 1.0, 2).unwrap();
        let (s, m) = build_dataset(1, &spec, &g, LabelRule::Midpoint, 5, Execution::Sequential).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!((m.count_gaussian, m.count_two_gaussian, m.count_perturbed), (1, 1, 1));
        let rule = build_quadrature(QuadratureKind::RiemannUniform, 0, &g).unwrap();
        for x in &s {
            assert!(x.field.is_nonnegative());
            assert!((integrate(&x.field, &rule).unwrap() - 0.2).abs() < 1e-8);
            assert!(x.target.asymmetry() == 0.0);
            assert!(x.target.min_eigenvalue() > -1e-10);
        }
        let (again, m2) = build_dataset(1, &spec, &g, LabelRule::Midpoint, 5, Execution::Parallel).unwrap();
        assert_eq!(m, m2);
        assert_eq!(s, again);
    }

    /// Doubled-order oracle: D at one node from a pointwise midpoint sum on
    /// a 2N grid of the same cube, evaluated directly from the analytic density.
    #[test]
    fn labels_match_refined_midpoint() {
        use crate::collision::kernel_matrix;
        let n = 32;
        let g = make_grid(2, n, 5.0).unwrap();
        let fine = make_grid(2, 2 * n, 5.0).unwrap();
        let spec = CollisionKernelSpec::new(0.0, 1.0, 2).unwrap();
        let (s, _) = build_dataset(1, &spec, &g, LabelRule::Midpoint, 11, Execution::Parallel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for x in &s {
            let k = rng.gen_range(0..g.node_count());
            let v = g.node(k);
            let mut oracle = [[0.0; 3]; 3];
            for l in 0..fine.node_count() {
                let w = fine.node(l);
                let z = [v[0] - w[0], v[1] - w[1]];
                let phi = kernel_matrix(&z, &spec, 0.0);
                let f = x.params.value(&w[..2]) * fine.cell_volume();
                for i in 0..2 {
                    for j in 0..2 {
                        oracle[i][j] += phi[i][j] * f;
                    }
                }
            }
            let got = x.target.d_at(k);
            let norm = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| oracle[i][j].powi(2)).sum::<f64>().sqrt();
            for i in 0..2 {
                for j in 0..2 {
                    assert!((got[i][j] - oracle[i][j]).abs() <= 1e-4 * norm, "{:?} vs {:?}", got, oracle);
                }
            }
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let g = make_grid(2, 16, 5.0).unwrap();
        let spec = CollisionKernelSpec::new(0.0, 1.0, 2).unwrap();
        let (s, m) = build_heldout(4, &spec, &g, LabelRule::Midpoint, 3, Execution::Sequential).unwrap();
        assert_eq!(m.families[3], Family::Gaussian);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fpld");
        save_dataset(&s, &m, &path).unwrap();
        let (back, m2) = load_dataset(&path).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, s);
        let header = read_manifest(&path).unwrap();
        assert_eq!(header.len(), 4);
        assert_eq!(header.nodes_per_axis, 16);

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.fpld");
        std::fs::write(&cut, &bytes[..bytes.len() - 20]).unwrap();
        assert!(matches!(load_dataset(&cut), Err(FplError::Nn(_)) | Err(FplError::Format(_))));
        let mut flipped = bytes.clone();
        let at = bytes.len() - 100;
        flipped[at] ^= 0x40;
        std::fs::write(&cut, &flipped).unwrap();
        assert!(load_dataset(&cut).is_err());
    }
}
