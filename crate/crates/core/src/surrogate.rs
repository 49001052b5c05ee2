//! Convolutional encoder-decoder surrogates for the diffusion matrix and the
//! friction vector, with their relative-error loss, training loop and
//! evaluation.
//!
//! Both networks map a `[1, N, ..]` density image to a `[c, N, ..]` image,
//! `c = d * d` for `D` (row-major `D_ij` planes) and `c = d` for `F`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fpl_nn::checkpoint::{load_model, save_model};
use fpl_nn::{init_network, Activation, Adam, AdamConfig, Execution, Graph, LayerSpec, NetworkModel, StepOutcome, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::{CollisionKernelSpec, OperatorFields};
use crate::dataset::{Family, LabeledSample};
use crate::error::{invalid, FplError, Result};
use crate::grid::{DistributionField, VelocityGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSpec {
    pub dim: usize,
    /// Image side length; must be divisible by 8.
    pub n: usize,
    /// Four encoder convolutions; the first keeps the resolution, the others halve it.
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    /// Channels of the bottleneck image at resolution `n / 8`; the dense
    /// bottleneck width is `bottleneck_channels * (n / 8)^dim`.
    pub bottleneck_channels: usize,
    /// Widths of the three decoder stages (before each upsampling the first
    /// runs at `n / 8`).
    pub decoder_channels: Vec<usize>,
    pub activation: Activation,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            n: 64,
            encoder_channels: vec![16, 32, 64, 128],
            kernel: 3,
            bottleneck_channels: 4,
            decoder_channels: vec![64, 32, 16],
            activation: Activation::Tanh,
        }
    }
}

impl SurrogateSpec {
    pub fn new(dim: usize, n: usize) -> Self {
        Self {
            dim,
            n,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dim == 2 || self.dim == 3) {
            return Err(FplError::InvalidDimension(self.dim));
        }
        if self.n < 8 || self.n % 8 != 0 {
            return invalid(format!("surrogate image side {} is not a positive multiple of 8", self.n));
        }
        if self.encoder_channels.len() != 4 || self.decoder_channels.len() != 3 {
            return invalid("surrogate needs 4 encoder and 3 decoder widths");
        }
        if self.kernel % 2 == 0 || self.kernel > self.n / 8 + 2 {
            return invalid(format!("surrogate kernel {} must be odd and fit the bottleneck", self.kernel));
        }
        if self.bottleneck_channels == 0 || self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return invalid("surrogate widths must be positive");
        }
        Ok(())
    }

    fn coarse(&self) -> usize {
        self.n / 8
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck_channels * self.coarse().pow(self.dim as u32)
    }

    fn conv(&self, cin: usize, cout: usize, kernel: usize, stride: usize) -> LayerSpec {
        let padding = kernel / 2;
        if self.dim == 2 {
            LayerSpec::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                padding,
            }
        } else {
            LayerSpec::Conv3d {
                in_channels: cin,
                out_channels: cout,
                kernel,
                stride,
                padding,
            }
        }
    }

    fn input_shape(&self) -> Vec<usize> {
        let mut s = vec![1];
        s.extend(std::iter::repeat(self.n).take(self.dim));
        s
    }

    fn layers(&self, out_channels: usize, extra_head: bool) -> Vec<LayerSpec> {
        let act = LayerSpec::act(self.activation);
        let k = self.kernel;
        let e = &self.encoder_channels;
        let c = self.coarse();
        let mut l = vec![self.conv(1, e[0], k, 1), act.clone()];
        for w in e.windows(2) {
            l.push(self.conv(w[0], w[1], k, 2));
            l.push(act.clone());
        }
        let flat = e[3] * c.pow(self.dim as u32);
        l.push(LayerSpec::Reshape { shape: vec![flat] });
        l.push(LayerSpec::dense(flat, self.bottleneck_width()));
        l.push(act.clone());
        let mut coarse_shape = vec![self.bottleneck_channels];
        coarse_shape.extend(std::iter::repeat(c).take(self.dim));
        l.push(LayerSpec::Reshape { shape: coarse_shape });
        let dc = &self.decoder_channels;
        let mut cin = self.bottleneck_channels;
        for &cout in dc {
            l.push(self.conv(cin, cout, k, 1));
            l.push(act.clone());
            l.push(LayerSpec::Upsample {
                dim: self.dim,
                factor: 2,
            });
            cin = cout;
        }
        if extra_head {
            l.push(self.conv(cin, cin, k, 1));
            l.push(act);
            l.push(self.conv(cin, out_channels, 1, 1));
        } else {
            l.push(self.conv(cin, out_channels, k, 1));
        }
        l
    }

    /// Layer list of the diffusion network (five convolutions after the bottleneck).
    pub fn d_layers(&self) -> Vec<LayerSpec> {
        self.layers(self.dim * self.dim, true)
    }

    /// Layer list of the friction network (four convolutions after the bottleneck).
    pub fn f_layers(&self) -> Vec<LayerSpec> {
        self.layers(self.dim, false)
    }
}

/// Metadata stored in each checkpoint so a loaded pair can be matched
/// against the grid and kernel it was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateMeta {
    pub spec: SurrogateSpec,
    pub radius: f64,
    pub gamma: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogates {
    pub meta: SurrogateMeta,
    pub d_model: NetworkModel,
    pub f_model: NetworkModel,
}

pub const D_CHECKPOINT: &str = "surrogate_d.fplm";
pub const F_CHECKPOINT: &str = "surrogate_f.fplm";

/// Builds the untrained pair; the friction network's seed is derived from `seed`.
pub fn build_surrogate(spec: &SurrogateSpec, grid: &VelocityGrid, kernel: &CollisionKernelSpec, seed: u64) -> Result<Surrogates> {
    spec.validate()?;
    if grid.dim() != spec.dim || grid.nodes_per_axis() != spec.n {
        return Err(FplError::GridMismatch(format!(
            "surrogate for {}-d N={} on a {}-d N={} grid",
            spec.dim,
            spec.n,
            grid.dim(),
            grid.nodes_per_axis()
        )));
    }
    let meta = SurrogateMeta {
        spec: spec.clone(),
        radius: grid.radius(),
        gamma: kernel.gamma,
        lambda: kernel.lambda,
    };
    let config = toml::to_string(&meta).map_err(|e| FplError::Format(e.to_string()))?;
    let mut d_model = init_network(spec.d_layers(), &spec.input_shape(), seed)?;
    let mut f_model = init_network(spec.f_layers(), &spec.input_shape(), seed ^ 0x9e37_79b9_7f4a_7c15)?;
    d_model.config = config.clone();
    f_model.config = config;
    Ok(Surrogates { meta, d_model, f_model })
}

impl Surrogates {
    pub fn spec(&self) -> &SurrogateSpec {
        &self.meta.spec
    }

    pub fn kernel(&self) -> Result<CollisionKernelSpec> {
        CollisionKernelSpec::new(self.meta.gamma, self.meta.lambda, self.meta.spec.dim)
    }

    pub fn grid(&self) -> Result<VelocityGrid> {
        crate::grid::make_grid(self.meta.spec.dim, self.meta.spec.n, self.meta.radius)
    }

    pub fn check_grid(&self, grid: &VelocityGrid) -> Result<()> {
        let own = self.grid()?;
        if !own.same_as(grid) {
            return Err(FplError::GridMismatch(format!(
                "surrogate trained on {}-d N={} R={}, field is {}-d N={} R={}",
                own.dim(),
                own.nodes_per_axis(),
                own.radius(),
                grid.dim(),
                grid.nodes_per_axis(),
                grid.radius()
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_model(&dir.join(D_CHECKPOINT), &self.d_model)?;
        save_model(&dir.join(F_CHECKPOINT), &self.f_model)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let paths = [dir.join(D_CHECKPOINT), dir.join(F_CHECKPOINT)];
        if let Some(p) = paths.iter().find(|p| !p.exists()) {
            return Err(FplError::MissingDependency(format!("surrogate checkpoint {}", p.display())));
        }
        let d_model = load_model(&paths[0])?;
        let f_model = load_model(&paths[1])?;
        let meta: SurrogateMeta = toml::from_str(&d_model.config).map_err(|e| FplError::Format(e.to_string()))?;
        let other: SurrogateMeta = toml::from_str(&f_model.config).map_err(|e| FplError::Format(e.to_string()))?;
        if meta != other {
            return Err(FplError::Format("diffusion and friction checkpoints disagree".into()));
        }
        if d_model.layers != meta.spec.d_layers() || f_model.layers != meta.spec.f_layers() {
            return Err(FplError::Format("checkpoint layers do not match the recorded spec".into()));
        }
        Ok(Self { meta, d_model, f_model })
    }

    /// The same pair for another interaction constant. `D` and `F` are
    /// linear in `lambda` and both heads end in a linear layer, so scaling
    /// that layer's weight and bias is exact.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let kernel = CollisionKernelSpec::new(self.meta.gamma, lambda, self.meta.spec.dim)?;
        let ratio = kernel.lambda / self.meta.lambda;
        let mut out = self.clone();
        out.meta.lambda = kernel.lambda;
        let config = toml::to_string(&out.meta).map_err(|e| FplError::Format(e.to_string()))?;
        for m in [&mut out.d_model, &mut out.f_model] {
            if m.layers.last().and_then(LayerSpec::param_shapes).is_none() {
                return Err(FplError::Format("surrogate head does not end in a linear layer".into()));
            }
            let n = m.params.len();
            for p in &mut m.params[n - 2..] {
                p.scale(ratio);
            }
            m.config = config.clone();
        }
        Ok(out)
    }

    /// Records both networks on `g` applied to `x [batch, 1, N..]`; returns
    /// the `D` and `F` images. Frozen parameters are bound as inputs.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Var)> {
        let dp = self.d_model.bind(g, trainable);
        let fp = self.f_model.bind(g, trainable);
        let d = self.d_model.forward_graph(g, x, &dp)?;
        let f = self.f_model.forward_graph(g, x, &fp)?;
        Ok((d, f))
    }
}

fn batch_tensor(spec: &SurrogateSpec, fields: &[&[f64]]) -> Result<Tensor> {
    let mut shape = vec![fields.len()];
    shape.extend(spec.input_shape());
    Ok(Tensor::from_vec(&shape, fields.concat())?)
}

/// Per-sample relative Frobenius errors of `prediction` against `target`,
/// both `[batch * per_sample]`.
pub fn relative_errors(prediction: &[f64], target: &[f64], batch: usize) -> Result<Vec<f64>> {
    if prediction.len() != target.len() || batch == 0 || target.len() % batch != 0 {
        return Err(FplError::GridMismatch(format!(
            "prediction {} vs target {} values over {batch} samples",
            prediction.len(),
            target.len()
        )));
    }
    let m = target.len() / batch;
    (0..batch)
        .map(|b| {
            let (p, t) = (&prediction[b * m..(b + 1) * m], &target[b * m..(b + 1) * m]);
            let tn = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if tn == 0.0 {
                return invalid(format!("target {b} has zero norm"));
            }
            Ok(p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / tn)
        })
        .collect()
}

/// Batch mean of the relative Frobenius error.
pub fn surrogate_loss(prediction: &[f64], target: &[f64], batch: usize) -> Result<f64> {
    let e = relative_errors(prediction, target, batch)?;
    Ok(e.iter().sum::<f64>() / batch as f64)
}

/// Loss and its gradient with respect to `prediction`.
fn loss_and_gradient(prediction: &[f64], target: &[f64], batch: usize) -> Result<(f64, Vec<f64>)> {
    let m = target.len() / batch.max(1);
    let errs = relative_errors(prediction, target, batch)?;
    let mut grad = vec![0.0; prediction.len()];
    for b in 0..batch {
        let r = b * m..(b + 1) * m;
        let tn = target[r.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        let en = errs[b] * tn;
        if en > 0.0 {
            let c = 1.0 / (en * tn * batch as f64);
            for i in r {
                grad[i] = c * (prediction[i] - target[i]);
            }
        }
    }
    Ok((errs.iter().sum::<f64>() / batch as f64, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop once the held-out error has not improved for this many epochs.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            patience: 20,
            adam: AdamConfig {
                decay_interval: 1000,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_d: f64,
    pub train_loss_f: f64,
    pub heldout_err_d: f64,
    pub heldout_err_f: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Best-so-far held-out score (`err_d + err_f`) after every epoch.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.min(r.heldout_err_d + r.heldout_err_f);
                best
            })
            .collect()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss_D,train_loss_F,heldout_err_D,heldout_err_F")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e}",
                r.epoch, r.train_loss_d, r.train_loss_f, r.heldout_err_d, r.heldout_err_f
            )?;
        }
        Ok(())
    }
}

struct Trainee<'a> {
    model: &'a mut NetworkModel,
    adam: Adam,
    planes: usize,
}

impl Trainee<'_> {
    /// One Adam step on a batch; returns the batch loss.
    fn step(&mut self, input: &Tensor, target: &[f64], batch: usize, exec: Execution) -> Result<f64> {
        let trace = self.model.forward_trace(input, exec)?;
        let (loss, grad) = loss_and_gradient(trace.output().data(), target, batch)?;
        if !loss.is_finite() {
            return Err(FplError::Numerical(format!("non-finite surrogate loss {loss}")));
        }
        let upstream = Tensor::from_vec(trace.output().shape(), grad)?;
        let grads = self.model.backward(&trace, &upstream)?;
        if self.adam.update(&mut self.model.params, &grads)? == StepOutcome::SkippedNonFinite {
            return Err(FplError::Numerical("non-finite surrogate gradient".into()));
        }
        Ok(loss)
    }
}

/// Trains both networks with Adam on shuffled mini-batches and keeps the
/// parameters of the epoch with the lowest held-out `err_d + err_f`.
///
/// When `checkpoint_dir` is given, the current pair is written to
/// `epoch_XXXX/` after every epoch and the kept pair to `best/`.
pub fn train_surrogate(
    models: &mut Surrogates,
    train: &[LabeledSample],
    heldout: &[LabeledSample],
    config: &SurrogateTrainConfig,
    checkpoint_dir: Option<&Path>,
    exec: Execution,
) -> Result<TrainHistory> {
    if config.batch_size == 0 {
        return invalid("batch size must be at least 1");
    }
    let grid = models.grid()?;
    for s in train.iter().chain(heldout) {
        models.check_grid(s.field.grid())?;
    }
    let mut history = TrainHistory {
        best_score: f64::INFINITY,
        ..TrainHistory::default()
    };
    if config.epochs == 0 || train.is_empty() {
        return Ok(history);
    }
    let spec = models.spec().clone();
    let n = grid.node_count();
    let (dd, d) = (spec.dim * spec.dim, spec.dim);
    let meta = models.meta.clone();
    let mut best = models.clone();
    if !heldout.is_empty() {
        let e = eval_surrogate(models, heldout, exec)?;
        history.best_score = e.mean_d + e.mean_f;
    }
    let adam_d = Adam::new(config.adam, &models.d_model.params)?;
    let adam_f = Adam::new(config.adam, &models.f_model.params)?;
    let mut td = Trainee {
        model: &mut models.d_model,
        adam: adam_d,
        planes: dd,
    };
    let mut tf = Trainee {
        model: &mut models.f_model,
        adam: adam_f,
        planes: d,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_f, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let fields: Vec<&[f64]> = chunk.iter().map(|&i| train[i].field.values()).collect();
            let input = batch_tensor(&spec, &fields)?;
            let target_d: Vec<f64> = chunk.iter().flat_map(|&i| train[i].target.diffusion().iter().copied()).collect();
            let target_f: Vec<f64> = chunk.iter().flat_map(|&i| train[i].target.friction().iter().copied()).collect();
            debug_assert_eq!(target_d.len(), chunk.len() * td.planes * n);
            debug_assert_eq!(target_f.len(), chunk.len() * tf.planes * n);
            sum_d += td.step(&input, &target_d, chunk.len(), exec)?;
            sum_f += tf.step(&input, &target_f, chunk.len(), exec)?;
            batches += 1;
        }
        let snapshot = Surrogates {
            meta: meta.clone(),
            d_model: td.model.clone(),
            f_model: tf.model.clone(),
        };
        let (err_d, err_f) = if heldout.is_empty() {
            (sum_d / batches as f64, sum_f / batches as f64)
        } else {
            let e = eval_surrogate(&snapshot, heldout, exec)?;
            (e.mean_d, e.mean_f)
        };
        history.records.push(EpochRecord {
            epoch,
            train_loss_d: sum_d / batches as f64,
            train_loss_f: sum_f / batches as f64,
            heldout_err_d: err_d,
            heldout_err_f: err_f,
        });
        if let Some(dir) = checkpoint_dir {
            snapshot.save(&dir.join(format!("epoch_{epoch:04}")))?;
        }
        if err_d + err_f < history.best_score {
            history.best_score = err_d + err_f;
            history.best_epoch = epoch;
            best = snapshot;
            stale = 0;
            if let Some(dir) = checkpoint_dir {
                best.save(&dir.join("best"))?;
            }
        } else {
            stale += 1;
            if stale >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    *models = best;
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `(family, err_d, err_f)` in input order.
    pub per_sample: Vec<(Family, f64, f64)>,
    pub mean_d: f64,
    pub mean_f: f64,
    /// Mean `(err_d, err_f)` per family.
    pub per_family: BTreeMap<String, (f64, f64)>,
}

/// Relative errors on a labelled set; batches of 16 run in parallel.
pub fn eval_surrogate(models: &Surrogates, test: &[LabeledSample], exec: Execution) -> Result<EvalReport> {
    if test.is_empty() {
        return invalid("empty test set");
    }
    let spec = models.spec();
    for s in test {
        models.check_grid(s.field.grid())?;
    }
    let chunks: Vec<&[LabeledSample]> = test.chunks(16).collect();
    let results = exec.map(chunks.len(), |c| -> Result<Vec<(Family, f64, f64)>> {
        let chunk = chunks[c];
        let fields: Vec<&[f64]> = chunk.iter().map(|s| s.field.values()).collect();
        let input = batch_tensor(spec, &fields)?;
        let pd = models.d_model.forward_with(&input, Execution::Sequential)?;
        let pf = models.f_model.forward_with(&input, Execution::Sequential)?;
        let td: Vec<f64> = chunk.iter().flat_map(|s| s.target.diffusion().iter().copied()).collect();
        let tf: Vec<f64> = chunk.iter().flat_map(|s| s.target.friction().iter().copied()).collect();
        let ed = relative_errors(pd.data(), &td, chunk.len())?;
        let ef = relative_errors(pf.data(), &tf, chunk.len())?;
        Ok(chunk.iter().zip(ed.into_iter().zip(ef)).map(|(s, (a, b))| (s.family(), a, b)).collect())
    });
    let mut per_sample = Vec::with_capacity(test.len());
    for r in results {
        per_sample.extend(r?);
    }
    let count = per_sample.len() as f64;
    let mean_d = per_sample.iter().map(|s| s.1).sum::<f64>() / count;
    let mean_f = per_sample.iter().map(|s| s.2).sum::<f64>() / count;
    let mut groups: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (fam, a, b) in &per_sample {
        let e = groups.entry(format!("{fam:?}")).or_default();
        e.0 += a;
        e.1 += b;
        e.2 += 1;
    }
    let per_family = groups
        .into_iter()
        .map(|(k, (a, b, c))| (k, (a / c as f64, b / c as f64)))
        .collect();
    Ok(EvalReport {
        per_sample,
        mean_d,
        mean_f,
        per_family,
    })
}

/// Surrogate `D` (symmetrised) and `F` of a grid field.
pub fn infer_operators(models: &Surrogates, field: &DistributionField) -> Result<OperatorFields> {
    infer_operators_with(models, field, Execution::default())
}

pub fn infer_operators_with(models: &Surrogates, field: &DistributionField, exec: Execution) -> Result<OperatorFields> {
    models.check_grid(field.grid())?;
    let input = batch_tensor(models.spec(), &[field.values()])?;
    let d = models.d_model.forward_with(&input, exec)?.into_data();
    let f = models.f_model.forward_with(&input, exec)?.into_data();
    let mut ops = OperatorFields::new(field.grid(), d, f)?;
    ops.symmetrize();
    Ok(ops)
}

/// Writes the history CSV next to the checkpoints.
pub fn write_history(history: &TrainHistory, path: &Path) -> Result<PathBuf> {
    let mut w = BufWriter::new(File::create(path)?);
    history.write_csv(&mut w)?;
    w.flush()?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn small() -> (SurrogateSpec, VelocityGrid, CollisionKernelSpec) {
        let spec = SurrogateSpec {
            encoder_channels: vec![2, 3, 4, 4],
            decoder_channels: vec![4, 3, 2],
            bottleneck_channels: 2,
            ..SurrogateSpec::new(2, 16)
        };
        (spec, make_grid(2, 16, 5.0).unwrap(), CollisionKernelSpec::new(0.0, 1.0, 2).unwrap())
    }

    #[test]
    fn output_shapes() {
        let g = make_grid(2, 64, 5.0).unwrap();
        let k = CollisionKernelSpec::new(0.0, 1.0, 2).unwrap();
        let s = build_surrogate(&SurrogateSpec::new(2, 64), &g, &k, 1).unwrap();
        assert_eq!(s.d_model.output_shape().unwrap(), vec![4, 64, 64]);
        assert_eq!(s.f_model.output_shape().unwrap(), vec![2, 64, 64]);
        assert_eq!(SurrogateSpec::new(2, 64).bottleneck_width(), 256);
        assert_eq!(SurrogateSpec::new(3, 32).bottleneck_width(), 256);
        let convs = |l: &[LayerSpec]| l.iter().filter(|x| matches!(x, LayerSpec::Conv2d { .. })).count();
        assert_eq!(convs(&s.d_model.layers), 4 + 5);
        assert_eq!(convs(&s.f_model.layers), 4 + 4);
        assert!(build_surrogate(&SurrogateSpec::new(2, 60), &make_grid(2, 60, 5.0).unwrap(), &k, 1).is_err());
        let again = build_surrogate(&SurrogateSpec::new(2, 64), &g, &k, 1).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn lambda_rescaling_is_linear() {
        let (spec, g, k) = small();
        let s = build_surrogate(&spec, &g, &k, 4).unwrap();
        let t = s.with_lambda(2.5).unwrap();
        assert_eq!(t.meta.lambda, 2.5);
        assert_eq!(t.kernel().unwrap().lambda, 2.5);
        let field = crate::reference::bkw_field(0.5, &g).unwrap();
        let (a, b) = (infer_operators(&s, &field).unwrap(), infer_operators(&t, &field).unwrap());
        for (x, y) in a.diffusion().iter().chain(a.friction()).zip(b.diffusion().iter().chain(b.friction())) {
            assert!((2.5 * x - y).abs() <= 1e-12 * x.abs().max(1e-12));
        }
        assert!(s.with_lambda(-1.0).is_err());
    }

    #[test]
    fn three_d_shapes() {
        let spec = SurrogateSpec::new(3, 32);
        let d = init_network(spec.d_layers(), &spec.input_shape(), 0).unwrap();
        let f = init_network(spec.f_layers(), &spec.input_shape(), 0).unwrap();
        assert_eq!(d.output_shape().unwrap(), vec![9, 32, 32, 32]);
        assert_eq!(f.output_shape().unwrap(), vec![3, 32, 32, 32]);
    }

    #[test]
    fn loss_examples() {
        let t = vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5];
        assert_eq!(surrogate_loss(&t, &t, 2).unwrap(), 0.0);
        let twice: Vec<f64> = t.iter().map(|x| 2.0 * x).collect();
        assert!((surrogate_loss(&twice, &t, 2).unwrap() - 1.0).abs() < 1e-15);
        assert!(surrogate_loss(&t, &[0.0; 6], 2).is_err());
        let alpha = 3.7;
        let p = vec![0.9, -2.1, 3.3, 0.4, 0.6, 0.5];
        let sp: Vec<f64> = p.iter().map(|x| alpha * x).collect();
        let st: Vec<f64> = t.iter().map(|x| alpha * x).collect();
        let (a, b) = (surrogate_loss(&p, &t, 2).unwrap(), surrogate_loss(&sp, &st, 2).unwrap());
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn loss_gradient_matches_difference() {
        let t = vec![1.0, -2.0, 3.0, 0.5, 0.2, 0.1];
        let p = vec![0.9, -2.1, 3.3, 0.4, 0.6, 0.5];
        let (_, g) = loss_and_gradient(&p, &t, 2).unwrap();
        for i in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (surrogate_loss(&a, &t, 2).unwrap() - surrogate_loss(&b, &t, 2).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_epochs_leaves_models() {
        let (spec, g, k) = small();
        let mut s = build_surrogate(&spec, &g, &k, 3).unwrap();
        let before = s.clone();
        let (data, _) = crate::dataset::build_dataset(1, &k, &g, crate::dataset::LabelRule::Midpoint, 0, Execution::Sequential).unwrap();
        let cfg = SurrogateTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let h = train_surrogate(&mut s, &data, &data, &cfg, None, Execution::Sequential).unwrap();
        assert!(h.records.is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn inference_is_symmetric() {
        let (spec, g, k) = small();
        let s = build_surrogate(&spec, &g, &k, 3).unwrap();
        let f = crate::reference::bkw_field(0.0, &g).unwrap();
        let ops = infer_operators(&s, &f).unwrap();
        assert_eq!(ops.asymmetry(), 0.0);
        let other = make_grid(2, 16, 6.0).unwrap();
        assert!(infer_operators(&s, &DistributionField::zeros(&other)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (spec, g, k) = small();
        let s = build_surrogate(&spec, &g, &k, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(Surrogates::load(dir.path()).unwrap(), s);
        let missing = dir.path().join("nothing");
        assert!(matches!(Surrogates::load(&missing), Err(FplError::MissingDependency(_))));
    }
}
