//! Small differentiable models standing in for a frozen pre-trained network.
//!
//! A model is a list of adapted *sites* (weight matrices). The linear model has
//! one site `w` with `y = W x`; the MLP has two, `w1` and `w2`, with
//! `y = W₂ tanh(W₁ x)`. Every site is evaluated at `W₀ + ΔW`, where `ΔW` is the
//! effective adapter update. Loss is averaged over the batch.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gaussian_matrix_with, svd, LinalgError, Matrix};
use crate::seeds::rng_from_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("site `{site}` expects a {expected:?} matrix, got {got:?}")]
    SiteShape {
        site: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected {expected} site matrices, got {got}")]
    SiteCount { expected: usize, got: usize },
    #[error("batch inputs have {got} columns, model takes {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("batch targets have {got} columns, model produces {expected}")]
    OutputDim { expected: usize, got: usize },
    #[error("batch has {inputs} input rows but {targets} target rows")]
    RowMismatch { inputs: usize, targets: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid teacher task: {0}")]
    InvalidTask(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub name: String,
    /// Output dimension (rows of `W`).
    pub m: usize,
    /// Input dimension (columns of `W`).
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    /// Two layers with a tanh hidden activation.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `Σₖ (yₖ − tₖ)²` per sample.
    Squared,
    /// `−Σₖ tₖ log softmax(y)ₖ` per sample.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchShape {
    sites: Vec<Site>,
    kind: ModelKind,
    loss: LossKind,
}

impl ArchShape {
    pub fn linear(n_in: usize, n_out: usize, loss: LossKind) -> Result<Self, ModelError> {
        Self::validated(
            vec![Site {
                name: "w".into(),
                m: n_out,
                n: n_in,
            }],
            ModelKind::Linear,
            loss,
        )
    }

    pub fn mlp(n_in: usize, hidden: usize, n_out: usize, loss: LossKind) -> Result<Self, ModelError> {
        Self::validated(
            vec![
                Site {
                    name: "w1".into(),
                    m: hidden,
                    n: n_in,
                },
                Site {
                    name: "w2".into(),
                    m: n_out,
                    n: hidden,
                },
            ],
            ModelKind::Mlp,
            loss,
        )
    }

    fn validated(sites: Vec<Site>, kind: ModelKind, loss: LossKind) -> Result<Self, ModelError> {
        for (i, s) in sites.iter().enumerate() {
            if s.m == 0 || s.n == 0 {
                return Err(ModelError::InvalidArch(format!("site `{}` has a zero dimension", s.name)));
            }
            if sites[..i].iter().any(|o| o.name == s.name) {
                return Err(ModelError::InvalidArch(format!("duplicate site name `{}`", s.name)));
            }
        }
        Ok(Self { sites, kind, loss })
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.sites[0].n
    }

    pub fn output_dim(&self) -> usize {
        self.sites[self.sites.len() - 1].m
    }

    pub fn zero_updates(&self) -> Vec<Matrix> {
        self.sites.iter().map(|s| Matrix::zeros(s.m, s.n)).collect()
    }

    fn check_sites(&self, mats: &[Matrix]) -> Result<(), ModelError> {
        if mats.len() != self.sites.len() {
            return Err(ModelError::SiteCount {
                expected: self.sites.len(),
                got: mats.len(),
            });
        }
        for (s, w) in self.sites.iter().zip(mats) {
            if w.shape() != (s.m, s.n) {
                return Err(ModelError::SiteShape {
                    site: s.name.clone(),
                    expected: (s.m, s.n),
                    got: w.shape(),
                });
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.inputs.cols() != self.input_dim() {
            return Err(ModelError::InputDim {
                expected: self.input_dim(),
                got: batch.inputs.cols(),
            });
        }
        if batch.targets.cols() != self.output_dim() {
            return Err(ModelError::OutputDim {
                expected: self.output_dim(),
                got: batch.targets.cols(),
            });
        }
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        Ok(())
    }
}

/// Rows of `inputs` and `targets` are paired samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    inputs: Matrix,
    targets: Matrix,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self, ModelError> {
        if inputs.rows() != targets.rows() {
            return Err(ModelError::RowMismatch {
                inputs: inputs.rows(),
                targets: targets.rows(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, i: usize) -> (&[f64], &[f64]) {
        (self.inputs.row(i), self.targets.row(i))
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: Matrix::from_fn(idx.len(), self.inputs.cols(), |i, j| self.inputs.get(idx[i], j)),
            targets: Matrix::from_fn(idx.len(), self.targets.cols(), |i, j| self.targets.get(idx[i], j)),
        }
    }

    pub fn concat(parts: &[&Batch]) -> Result<Batch, ModelError> {
        let inputs: Vec<&Matrix> = parts.iter().map(|b| &b.inputs).collect();
        let targets: Vec<&Matrix> = parts.iter().map(|b| &b.targets).collect();
        Batch::new(Matrix::vstack(&inputs)?, Matrix::vstack(&targets)?)
    }
}

/// One `∂loss/∂W` matrix per site.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub Vec<Matrix>);

impl GradientSet {
    pub fn mean(sets: &[GradientSet]) -> Result<GradientSet, ModelError> {
        let first = sets.first().ok_or(ModelError::EmptyBatch)?;
        let mut out: Vec<Matrix> = first.0.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        for set in sets {
            for (acc, g) in out.iter_mut().zip(&set.0) {
                acc.axpy(1.0, g)?;
            }
        }
        let inv = 1.0 / sets.len() as f64;
        Ok(GradientSet(out.into_iter().map(|g| g.scale(inv)).collect()))
    }
}

fn effective(shape: &ArchShape, base: &[Matrix], updates: &[Matrix]) -> Result<Vec<Matrix>, ModelError> {
    shape.check_sites(base)?;
    shape.check_sites(updates)?;
    Ok(base.iter().zip(updates).map(|(w, d)| w.add(d)).collect::<Result<_, _>>()?)
}

fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(w: &Matrix, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &yi) in y.iter().enumerate() {
        for (o, &a) in out.iter_mut().zip(w.row(i)) {
            *o += a * yi;
        }
    }
    out
}

fn log_sum_exp(y: &[f64]) -> f64 {
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + y.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-sample loss and `∂loss/∂y`.
fn loss_and_grad(loss: LossKind, y: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    match loss {
        LossKind::Squared => {
            let diff: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
            (diff.iter().map(|d| d * d).sum(), diff.iter().map(|d| 2.0 * d).collect())
        }
        LossKind::CrossEntropy => {
            let lse = log_sum_exp(y);
            let total: f64 = t.iter().sum();
            let value = t.iter().zip(y).map(|(tk, yk)| -tk * (yk - lse)).sum();
            let grad = y.iter().zip(t).map(|(yk, tk)| (yk - lse).exp() * total - tk).collect();
            (value, grad)
        }
    }
}

fn sample_loss_grad(
    shape: &ArchShape,
    weights: &[Matrix],
    x: &[f64],
    t: &[f64],
    want_grad: bool,
) -> (f64, Option<GradientSet>) {
    match shape.kind {
        ModelKind::Linear => {
            let y = matvec(&weights[0], x);
            let (l, dy) = loss_and_grad(shape.loss, &y, t);
            let g = want_grad.then(|| GradientSet(vec![Matrix::outer(&dy, x)]));
            (l, g)
        }
        ModelKind::Mlp => {
            let h: Vec<f64> = matvec(&weights[0], x).into_iter().map(f64::tanh).collect();
            let y = matvec(&weights[1], &h);
            let (l, dy) = loss_and_grad(shape.loss, &y, t);
            let g = want_grad.then(|| {
                let dw2 = Matrix::outer(&dy, &h);
                let dh = matvec_t(&weights[1], &dy);
                let dz: Vec<f64> = dh.iter().zip(&h).map(|(d, a)| d * (1.0 - a * a)).collect();
                GradientSet(vec![Matrix::outer(&dz, x), dw2])
            });
            (l, g)
        }
    }
}

/// Mean loss over `batch` with every site at `W₀ + ΔW`.
pub fn forward_loss(
    shape: &ArchShape,
    base: &[Matrix],
    updates: &[Matrix],
    batch: &Batch,
) -> Result<f64, ModelError> {
    shape.check_batch(batch)?;
    let w = effective(shape, base, updates)?;
    let total: f64 = (0..batch.len())
        .map(|i| {
            let (x, t) = batch.sample(i);
            sample_loss_grad(shape, &w, x, t, false).0
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Gradient of each single-sample loss with respect to every site's weights.
pub fn per_sample_gradients(
    shape: &ArchShape,
    base: &[Matrix],
    updates: &[Matrix],
    batch: &Batch,
) -> Result<Vec<GradientSet>, ModelError> {
    shape.check_batch(batch)?;
    let w = effective(shape, base, updates)?;
    Ok((0..batch.len())
        .map(|i| {
            let (x, t) = batch.sample(i);
            sample_loss_grad(shape, &w, x, t, true).1.expect("gradient requested")
        })
        .collect())
}

/// Gradient of the mean batch loss.
pub fn batch_gradient(
    shape: &ArchShape,
    base: &[Matrix],
    updates: &[Matrix],
    batch: &Batch,
) -> Result<GradientSet, ModelError> {
    GradientSet::mean(&per_sample_gradients(shape, base, updates, batch)?)
}

/// Parameters of a synthetic teacher-student task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    pub samples: usize,
    /// Additive target noise (squared loss) or logit noise (cross-entropy).
    pub noise_std: f64,
    /// Frobenius norm of each site's teacher update `ΔW*`.
    pub delta_scale: f64,
    /// Rank of `ΔW*`; full rank when `None`.
    pub delta_rank: Option<usize>,
    /// Rescale inputs so that `XᵀX / N = I` exactly.
    pub whiten_inputs: bool,
    /// Number of data sources; each has its own `ΔW*` and input mean.
    pub sources: usize,
    /// Std of the per-source input mean shift (used when `sources > 1`).
    pub source_shift: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            samples: 512,
            noise_std: 0.0,
            delta_scale: 1.0,
            delta_rank: None,
            whiten_inputs: false,
            sources: 1,
            source_shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTeacher {
    pub delta: Vec<Matrix>,
    pub input_mean: Vec<f64>,
}

/// Pre-trained weights `W₀`, per-source teachers and the generated dataset.
#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub shape: ArchShape,
    pub base: Vec<Matrix>,
    pub teachers: Vec<SourceTeacher>,
    pub data: Batch,
    /// Source index of every row of `data`.
    pub sources: Vec<usize>,
    noise_std: f64,
}

impl TeacherTask {
    /// Teacher update of the first (or only) source.
    pub fn delta(&self) -> &[Matrix] {
        &self.teachers[0].delta
    }

    /// Draws `n` fresh samples from the same teachers (sources round-robin).
    pub fn draw(&self, n: usize, seed: u64) -> Result<(Batch, Vec<usize>), ModelError> {
        let mut rng = rng_from_seed(seed);
        let sources: Vec<usize> = (0..n).map(|i| i % self.teachers.len()).collect();
        let batch = generate(&self.shape, &self.base, &self.teachers, &sources, self.noise_std, false, &mut rng)?;
        Ok((batch, sources))
    }
}

fn random_delta<R: Rng>(site: &Site, scale: f64, rank: Option<usize>, rng: &mut R) -> Result<Matrix, ModelError> {
    let raw = match rank {
        None => gaussian_matrix_with(site.m, site.n, 1.0, rng),
        Some(k) => {
            if k == 0 || k > site.m.min(site.n) {
                return Err(ModelError::InvalidTask(format!(
                    "teacher rank {k} invalid for a {}x{} site",
                    site.m, site.n
                )));
            }
            let u = gaussian_matrix_with(site.m, k, 1.0, rng);
            let v = gaussian_matrix_with(k, site.n, 1.0, rng);
            u.matmul(&v)?
        }
    };
    let norm = raw.frobenius_norm();
    Ok(if norm > 0.0 { raw.scale(scale / norm) } else { raw })
}

fn generate<R: Rng>(
    shape: &ArchShape,
    base: &[Matrix],
    teachers: &[SourceTeacher],
    sources: &[usize],
    noise_std: f64,
    whiten: bool,
    rng: &mut R,
) -> Result<Batch, ModelError> {
    let n_in = shape.input_dim();
    let n = sources.len();
    let mut inputs = gaussian_matrix_with(n, n_in, 1.0, rng);
    if whiten {
        if n < n_in {
            return Err(ModelError::InvalidTask("whitening needs samples >= input dim".into()));
        }
        let f = svd(&inputs)?;
        inputs = f.u.matmul(&f.v.transpose())?.scale((n as f64).sqrt());
    }
    for (i, &s) in sources.iter().enumerate() {
        for (j, mu) in teachers[s].input_mean.iter().enumerate() {
            inputs.set(i, j, inputs.get(i, j) + mu);
        }
    }
    let teacher_weights: Vec<Vec<Matrix>> = teachers
        .iter()
        .map(|t| effective(shape, base, &t.delta))
        .collect::<Result<_, _>>()?;
    let n_out = shape.output_dim();
    let mut targets = Matrix::zeros(n, n_out);
    for (i, &s) in sources.iter().enumerate() {
        let x = inputs.row(i);
        let w = &teacher_weights[s];
        let mut y = match shape.kind {
            ModelKind::Linear => matvec(&w[0], x),
            ModelKind::Mlp => {
                let h: Vec<f64> = matvec(&w[0], x).into_iter().map(f64::tanh).collect();
                matvec(&w[1], &h)
            }
        };
        if noise_std > 0.0 {
            for v in y.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += noise_std * z;
            }
        }
        if shape.loss == LossKind::CrossEntropy {
            let lse = log_sum_exp(&y);
            y.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        for (j, v) in y.into_iter().enumerate() {
            targets.set(i, j, v);
        }
    }
    Batch::new(inputs, targets)
}

/// Builds `W₀`, random teacher updates `ΔW*` and a dataset generated at
/// `W₀ + ΔW*`. Deterministic in `seed`.
pub fn make_teacher_task(shape: &ArchShape, spec: &TeacherSpec, seed: u64) -> Result<TeacherTask, ModelError> {
    if spec.samples == 0 {
        return Err(ModelError::InvalidTask("samples must be at least 1".into()));
    }
    if spec.sources == 0 {
        return Err(ModelError::InvalidTask("sources must be at least 1".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.delta_scale >= 0.0 && spec.source_shift >= 0.0) {
        return Err(ModelError::InvalidTask("noise, scale and shift must be non-negative".into()));
    }
    let mut rng = rng_from_seed(seed);
    let base: Vec<Matrix> = shape
        .sites()
        .iter()
        .map(|s| gaussian_matrix_with(s.m, s.n, 1.0 / (s.n as f64).sqrt(), &mut rng))
        .collect();
    let mut teachers = Vec::with_capacity(spec.sources);
    for _ in 0..spec.sources {
        let delta = shape
            .sites()
            .iter()
            .map(|s| random_delta(s, spec.delta_scale, spec.delta_rank, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let input_mean = if spec.sources > 1 {
            (0..shape.input_dim())
                .map(|_| spec.source_shift * rng.sample::<f64, _>(StandardNormal))
                .collect()
        } else {
            vec![0.0; shape.input_dim()]
        };
        teachers.push(SourceTeacher { delta, input_mean });
    }
    let mut sources: Vec<usize> = (0..spec.samples).map(|i| i * spec.sources / spec.samples).collect();
    sources.shuffle(&mut rng);
    let data = generate(shape, &base, &teachers, &sources, spec.noise_std, spec.whiten_inputs, &mut rng)?;
    Ok(TeacherTask {
        shape: shape.clone(),
        base,
        teachers,
        data,
        sources,
        noise_std: spec.noise_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    #[test]
    fn hand_computed_squared_loss() {
        let shape = ArchShape::linear(1, 1, LossKind::Squared).unwrap();
        let batch = Batch::new(
            Matrix::from_rows(&[&[1.0]]).unwrap(),
            Matrix::from_rows(&[&[2.0]]).unwrap(),
        )
        .unwrap();
        let base = vec![Matrix::from_rows(&[&[1.0]]).unwrap()];
        let loss = forward_loss(&shape, &base, &shape.zero_updates(), &batch).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn teacher_at_zero_update_has_zero_loss() {
        let shape = ArchShape::linear(4, 3, LossKind::Squared).unwrap();
        let spec = TeacherSpec {
            samples: 20,
            delta_scale: 0.0,
            ..Default::default()
        };
        let task = make_teacher_task(&shape, &spec, 3).unwrap();
        let loss = forward_loss(&shape, &task.base, &shape.zero_updates(), &task.data).unwrap();
        assert!(loss.abs() < 1e-24);
        // and at ΔW = ΔW* for a nonzero teacher
        let spec = TeacherSpec { samples: 20, ..Default::default() };
        let task = make_teacher_task(&shape, &spec, 4).unwrap();
        let loss = forward_loss(&shape, &task.base, task.delta(), &task.data).unwrap();
        assert!(loss < 1e-24);
    }

    #[test]
    fn teacher_is_deterministic() {
        let shape = ArchShape::mlp(3, 4, 2, LossKind::CrossEntropy).unwrap();
        let spec = TeacherSpec { samples: 15, noise_std: 0.1, ..Default::default() };
        let a = make_teacher_task(&shape, &spec, 9).unwrap();
        let b = make_teacher_task(&shape, &spec, 9).unwrap();
        assert!(a.data.inputs().bit_eq(b.data.inputs()));
        assert!(a.data.targets().bit_eq(b.data.targets()));
    }

    #[test]
    fn whitened_inputs_have_identity_covariance() {
        let shape = ArchShape::linear(5, 2, LossKind::Squared).unwrap();
        let spec = TeacherSpec { samples: 40, whiten_inputs: true, ..Default::default() };
        let task = make_teacher_task(&shape, &spec, 1).unwrap();
        let x = task.data.inputs();
        let cov = x.transpose().matmul(x).unwrap().scale(1.0 / 40.0);
        assert!(cov.sub(&Matrix::identity(5)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn per_sample_identical_rows_identical_gradients() {
        let shape = ArchShape::mlp(3, 4, 2, LossKind::Squared).unwrap();
        let x = Matrix::from_rows(&[&[0.1, -0.2, 0.3], &[0.1, -0.2, 0.3]]).unwrap();
        let t = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]).unwrap();
        let batch = Batch::new(x, t).unwrap();
        let base = vec![gaussian_matrix(4, 3, 0.5, 1), gaussian_matrix(2, 4, 0.5, 2)];
        let g = per_sample_gradients(&shape, &base, &shape.zero_updates(), &batch).unwrap();
        for (a, b) in g[0].0.iter().zip(&g[1].0) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn shape_errors() {
        let shape = ArchShape::linear(3, 2, LossKind::Squared).unwrap();
        let batch = Batch::new(Matrix::zeros(2, 3), Matrix::zeros(2, 2)).unwrap();
        let bad = vec![Matrix::zeros(3, 3)];
        assert!(matches!(
            forward_loss(&shape, &bad, &shape.zero_updates(), &batch),
            Err(ModelError::SiteShape { .. })
        ));
        let wrong_in = Batch::new(Matrix::zeros(2, 4), Matrix::zeros(2, 2)).unwrap();
        let base = shape.zero_updates();
        assert!(matches!(
            forward_loss(&shape, &base, &base, &wrong_in),
            Err(ModelError::InputDim { .. })
        ));
        assert!(Batch::new(Matrix::zeros(2, 3), Matrix::zeros(3, 2)).is_err());
        assert!(ArchShape::linear(0, 2, LossKind::Squared).is_err());
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let shape = ArchShape::mlp(3, 5, 2, LossKind::CrossEntropy).unwrap();
        let spec = TeacherSpec { samples: 9, noise_std: 0.3, ..Default::default() };
        let task = make_teacher_task(&shape, &spec, 5).unwrap();
        let upd = vec![gaussian_matrix(5, 3, 0.1, 1), gaussian_matrix(2, 5, 0.1, 2)];
        let l1 = forward_loss(&shape, &task.base, &upd, &task.data).unwrap();
        let perm: Vec<usize> = (0..9).rev().collect();
        let l2 = forward_loss(&shape, &task.base, &upd, &task.data.select(&perm)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn multi_source_tasks_label_rows() {
        let shape = ArchShape::linear(3, 2, LossKind::Squared).unwrap();
        let spec = TeacherSpec { samples: 80, sources: 4, ..Default::default() };
        let task = make_teacher_task(&shape, &spec, 2).unwrap();
        assert_eq!(task.teachers.len(), 4);
        for s in 0..4 {
            assert_eq!(task.sources.iter().filter(|&&x| x == s).count(), 20);
        }
    }
}
