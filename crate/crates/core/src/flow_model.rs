//! Conditional velocity fields, the rectified-flow interpolant and
//! flow-matching pretraining of the reference policy.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data). Along the
//! interpolant `x_t = (1 - t) x0 + t * noise` the regression target for the
//! velocity is `dx_t/dt = noise - x0`.

use std::f64::consts::TAU;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::numerics::{
    adam_step, mlp_backward_with, mlp_forward, AdamConfig, NetworkShape, OptimizerState,
    ParameterVector, RngStream,
};

/// Class label of a sample (the prompt of the toy task).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition(pub usize);

/// Anything that can play the role of `v(x, t, c)`.
pub trait VelocityModel: Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>>;
}

/// A closed-form field, mostly useful for oracles in tests.
pub struct FnVelocity<F> {
    dim: usize,
    f: F,
}

impl<F> FnVelocity<F>
where
    F: Fn(&[f64], f64, Condition) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityModel for FnVelocity<F>
where
    F: Fn(&[f64], f64, Condition) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        Ok((self.f)(x, t, c))
    }
}

/// Wraps a field and counts velocity evaluations.
pub struct CountingVelocity<'a, V: ?Sized> {
    inner: &'a V,
    count: AtomicU64,
}

impl<'a, V: VelocityModel + ?Sized> CountingVelocity<'a, V> {
    pub fn new(inner: &'a V) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }
}

impl<V: VelocityModel + ?Sized> VelocityModel for CountingVelocity<'_, V> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(x, t, c)
    }
}

/// Sinusoidal embedding: `dim/2` sine/cosine pairs with frequencies spaced
/// geometrically from 1 to 1000.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = if half > 1 {
            1000f64.powf(j as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[j] = (freq * t).sin();
        out[half + j] = (freq * t).cos();
    }
    out
}

/// The learned policy: an MLP over `[x, time_embedding(t), one_hot(c)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub shape: NetworkShape,
    pub params: ParameterVector,
    pub dim: usize,
    pub time_embed_dim: usize,
    pub num_classes: usize,
}

impl VelocityField {
    pub fn shape_for(
        dim: usize,
        num_classes: usize,
        time_embed_dim: usize,
        hidden: &[usize],
    ) -> Result<NetworkShape> {
        if time_embed_dim == 0 || time_embed_dim % 2 != 0 {
            return Err(FlowError::InvalidArgument(format!(
                "time embedding width must be a positive even number, got {time_embed_dim}"
            )));
        }
        NetworkShape::new(dim + time_embed_dim + num_classes, hidden.to_vec(), dim)
    }

    pub fn new_random(
        dim: usize,
        num_classes: usize,
        time_embed_dim: usize,
        hidden: &[usize],
        rng: &mut RngStream,
    ) -> Result<Self> {
        let shape = Self::shape_for(dim, num_classes, time_embed_dim, hidden)?;
        let params = shape.init_params(rng);
        Self::from_params(shape, params, dim, time_embed_dim, num_classes)
    }

    pub fn from_params(
        shape: NetworkShape,
        params: ParameterVector,
        dim: usize,
        time_embed_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let expected = Self::shape_for(dim, num_classes, time_embed_dim, &shape.hidden_dims)?;
        if expected != shape {
            return Err(FlowError::Shape(format!(
                "network {shape} does not match dim={dim}, classes={num_classes}, time_embed={time_embed_dim} (expected {expected})"
            )));
        }
        if params.len() != shape.param_count() || params.segments().len() != shape.layout().len() {
            return Err(FlowError::Shape(format!(
                "network {shape} needs {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            shape,
            params,
            dim,
            time_embed_dim,
            num_classes,
        })
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParameterVector) -> Result<Self> {
        Self::from_params(
            self.shape.clone(),
            params,
            self.dim,
            self.time_embed_dim,
            self.num_classes,
        )
    }

    pub fn features(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FlowError::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        if x.len() != self.dim {
            return Err(FlowError::Shape(format!(
                "state has length {}, field expects {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite(format!("state {x:?} at t={t}")));
        }
        if c.0 >= self.num_classes {
            return Err(FlowError::UnknownClass {
                class: c.0,
                num_classes: self.num_classes,
            });
        }
        let mut feats = Vec::with_capacity(self.shape.input_dim);
        feats.extend_from_slice(x);
        feats.extend(time_embedding(t, self.time_embed_dim));
        feats.extend((0..self.num_classes).map(|k| if k == c.0 { 1.0 } else { 0.0 }));
        Ok(feats)
    }

    /// Evaluates the field, then adds `d<v, cotangent>/d params` into `acc`,
    /// where the cotangent is produced from `v` by `cotangent_of`.
    pub fn velocity_vjp<F>(
        &self,
        x: &[f64],
        t: f64,
        c: Condition,
        acc: &mut ParameterVector,
        cotangent_of: F,
    ) -> Result<Vec<f64>>
    where
        F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    {
        let feats = self.features(x, t, c)?;
        let (v, _) = mlp_backward_with(&self.params, &self.shape, &feats, acc, cotangent_of)?;
        Ok(v)
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

impl VelocityModel for VelocityField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        let feats = self.features(x, t, c)?;
        mlp_forward(&self.params, &self.shape, &feats)
    }
}

/// `x_t = (1 - t) x0 + t * noise`.
pub fn interpolant_sample(x0: &[f64], noise: &[f64], t: f64) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(FlowError::Shape(format!(
            "data has length {}, noise has length {}",
            x0.len(),
            noise.len()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    // Endpoints are returned verbatim so t=0 and t=1 are exact.
    if t == 0.0 {
        return Ok(x0.to_vec());
    }
    if t == 1.0 {
        return Ok(noise.to_vec());
    }
    Ok(x0.iter().zip(noise).map(|(a, n)| (1.0 - t) * a + t * n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianMixture2d,
    Checkerboard2d,
}

/// Class-conditional 2-D toy data.
///
/// For the mixture, class `c` is an isotropic Gaussian around `centers[c]`.
/// For the checkerboard, class `c` owns the dark unit cells of the 2x2 block
/// centred on `centers[c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub centers: Vec<Vec<f64>>,
    pub mode_std: f64,
}

impl ToyDataset {
    /// Mixture with `num_classes` modes evenly spaced on a circle.
    pub fn ring(num_classes: usize, radius: f64, mode_std: f64) -> Self {
        Self {
            kind: DatasetKind::GaussianMixture2d,
            centers: ring_centers(num_classes, radius),
            mode_std,
        }
    }

    /// Checkerboard over the four quadrants of `[-2, 2]^2`.
    pub fn checkerboard() -> Self {
        Self {
            kind: DatasetKind::Checkerboard2d,
            centers: vec![
                vec![1.0, 1.0],
                vec![-1.0, 1.0],
                vec![-1.0, -1.0],
                vec![1.0, -1.0],
            ],
            mode_std: 0.5,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(FlowError::InvalidArgument("dataset needs at least one class".into()));
        }
        if self.centers.iter().any(|c| c.len() != 2) {
            return Err(FlowError::Shape("toy dataset centers must be 2-D".into()));
        }
        if !(self.mode_std > 0.0) {
            return Err(FlowError::InvalidArgument(format!(
                "mode_std must be positive, got {}",
                self.mode_std
            )));
        }
        Ok(())
    }

    pub fn sample_class(&self, c: Condition, rng: &mut RngStream) -> Vec<f64> {
        let mu = &self.centers[c.0];
        match self.kind {
            DatasetKind::GaussianMixture2d => {
                mu.iter().map(|m| m + self.mode_std * rng.normal()).collect()
            }
            DatasetKind::Checkerboard2d => {
                // Cells of the 2x2 block have lower-left corners at mu - 1 + (i, j);
                // a cell is dark when floor(x) + floor(y) is even.
                let dark: Vec<(f64, f64)> = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
                    .iter()
                    .map(|(i, j)| (mu[0] - 1.0 + i, mu[1] - 1.0 + j))
                    .filter(|(x, y)| (x.floor() + y.floor()).rem_euclid(2.0) == 0.0)
                    .collect();
                let (x, y) = dark[rng.below(dark.len())];
                vec![x + rng.uniform(), y + rng.uniform()]
            }
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> (Vec<f64>, Condition) {
        let c = Condition(rng.below(self.num_classes()));
        (self.sample_class(c, rng), c)
    }
}

pub fn ring_centers(num_classes: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let angle = TAU * c as f64 / num_classes as f64;
            vec![radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

/// One flow-matching training example.
#[derive(Clone, Debug)]
pub struct CfmSample {
    pub x0: Vec<f64>,
    pub noise: Vec<f64>,
    pub t: f64,
    pub condition: Condition,
}

impl CfmSample {
    pub fn draw(dataset: &ToyDataset, rng: &mut RngStream) -> Self {
        let (x0, condition) = dataset.sample(rng);
        let noise = rng.normal_vec(x0.len());
        let t = rng.uniform();
        Self {
            x0,
            noise,
            t,
            condition,
        }
    }

    fn target(&self) -> Vec<f64> {
        self.noise.iter().zip(&self.x0).map(|(n, x)| n - x).collect()
    }
}

/// Mean over the batch of `||v(x_t, t, c) - (noise - x0)||^2`.
pub fn cfm_loss(field: &VelocityField, batch: &[CfmSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        let xt = interpolant_sample(&s.x0, &s.noise, s.t)?;
        let v = field.velocity(&xt, s.t, s.condition)?;
        total += v
            .iter()
            .zip(s.target())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Loss and its exact gradient in the field parameters.
pub fn cfm_loss_and_grad(field: &VelocityField, batch: &[CfmSample]) -> Result<(f64, ParameterVector)> {
    let scale = 1.0 / batch.len() as f64;
    let mut grad = field.params.zeros_like();
    let mut total = 0.0;
    for s in batch {
        let xt = interpolant_sample(&s.x0, &s.noise, s.t)?;
        let target = s.target();
        let mut sq = 0.0;
        field.velocity_vjp(&xt, s.t, s.condition, &mut grad, |v| {
            sq = v.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
            Ok(v.iter().zip(&target).map(|(a, b)| 2.0 * (a - b) * scale).collect())
        })?;
        total += sq;
    }
    Ok((total * scale, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch: 256,
            steps: 5000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains `field` by flow matching with Adam. Returns the per-step loss curve.
pub fn cfm_pretrain(
    field: &mut VelocityField,
    dataset: &ToyDataset,
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    dataset.validate()?;
    if config.steps == 0 || config.batch == 0 {
        return Err(FlowError::InvalidArgument("pretraining needs steps >= 1 and batch >= 1".into()));
    }
    let hyper = AdamConfig {
        lr: config.lr,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::new(&field.params);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = RngStream::keyed(config.seed, &[0x5052_4554, step as u64]);
        let batch: Vec<CfmSample> = (0..config.batch).map(|_| CfmSample::draw(dataset, &mut rng)).collect();
        let (loss, grad) = cfm_loss_and_grad(field, &batch)?;
        if !loss.is_finite() {
            return Err(FlowError::PretrainDiverged { step, loss });
        }
        adam_step(&mut state, &mut field.params, &grad, &hyper)
            .map_err(|_| FlowError::PretrainDiverged { step, loss })?;
        curve.push(loss);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, relative_error};

    fn small_field(seed: u64) -> VelocityField {
        VelocityField::new_random(2, 3, 4, &[8], &mut RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn zero_weight_field_returns_bias() {
        let mut f = small_field(0);
        let n = f.params.len();
        f.params.values_mut().iter_mut().for_each(|v| *v = 0.0);
        f.params.values_mut()[n - 2] = 0.25;
        f.params.values_mut()[n - 1] = -0.5;
        for (x, t, c) in [([0.0, 0.0], 0.0, 0), ([3.0, -1.0], 0.7, 2)] {
            assert_eq!(f.velocity(&x, t, Condition(c)).unwrap(), vec![0.25, -0.5]);
        }
    }

    #[test]
    fn velocity_rejects_bad_time_and_class() {
        let f = small_field(1);
        assert!(f.velocity(&[0.0, 0.0], 1.5, Condition(0)).is_err());
        assert!(f.velocity(&[0.0, 0.0], -0.1, Condition(0)).is_err());
        assert!(matches!(
            f.velocity(&[0.0, 0.0], 0.5, Condition(3)),
            Err(FlowError::UnknownClass { .. })
        ));
    }

    #[test]
    fn velocity_is_deterministic() {
        let f = small_field(2);
        let a = f.velocity(&[0.3, 0.1], 0.4, Condition(1)).unwrap();
        let b = f.velocity(&[0.3, 0.1], 0.4, Condition(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_layout() {
        let e = time_embedding(0.0, 16);
        assert_eq!(e.len(), 16);
        assert!(e[..8].iter().all(|v| *v == 0.0));
        assert!(e[8..].iter().all(|v| *v == 1.0));
        let e = time_embedding(1.0, 16);
        assert!((e[7] - 1000f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn interpolant_endpoints_and_midpoint() {
        let x0 = [2.0, 0.0];
        let n = [0.0, 2.0];
        assert_eq!(interpolant_sample(&x0, &n, 0.0).unwrap(), x0.to_vec());
        assert_eq!(interpolant_sample(&x0, &n, 1.0).unwrap(), n.to_vec());
        assert_eq!(interpolant_sample(&x0, &n, 0.5).unwrap(), vec![1.0, 1.0]);
        assert!(interpolant_sample(&x0, &[1.0], 0.5).is_err());
    }

    #[test]
    fn loss_is_zero_when_field_matches_target() {
        // Zero weights, bias = noise - x0, batch sharing one (x0, noise).
        let mut f = small_field(3);
        f.params.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let n = f.params.len();
        f.params.values_mut()[n - 2] = 1.0 - 0.5;
        f.params.values_mut()[n - 1] = -2.0 - 1.0;
        let batch: Vec<CfmSample> = [0.1, 0.5, 0.9]
            .iter()
            .map(|&t| CfmSample {
                x0: vec![0.5, 1.0],
                noise: vec![1.0, -2.0],
                t,
                condition: Condition(1),
            })
            .collect();
        assert_eq!(cfm_loss(&f, &batch).unwrap(), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let f = small_field(4);
        let ds = ToyDataset::ring(3, 2.0, 0.1);
        let mut rng = RngStream::new(9, 9);
        let batch: Vec<CfmSample> = (0..5).map(|_| CfmSample::draw(&ds, &mut rng)).collect();
        let (loss, grad) = cfm_loss_and_grad(&f, &batch).unwrap();
        assert!(loss >= 0.0);
        assert!((loss - cfm_loss(&f, &batch).unwrap()).abs() < 1e-12);
        let fd = finite_diff_gradient(
            |p| cfm_loss(&f.with_params(p.clone()).unwrap(), &batch).unwrap(),
            &f.params,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(&grad, &fd, 1e-8) <= 1e-4);
    }

    #[test]
    fn checkerboard_samples_stay_in_quadrant_dark_cells() {
        let ds = ToyDataset::checkerboard();
        let mut rng = RngStream::new(1, 1);
        for _ in 0..200 {
            let (x, c) = ds.sample(&mut rng);
            let mu = &ds.centers[c.0];
            assert!((x[0] - mu[0]).abs() <= 1.0 && (x[1] - mu[1]).abs() <= 1.0);
            assert_eq!((x[0].floor() + x[1].floor()).rem_euclid(2.0), 0.0);
        }
    }

    #[test]
    fn from_params_rejects_mismatched_shape() {
        let f = small_field(5);
        assert!(VelocityField::from_params(f.shape.clone(), f.params.clone(), 2, 4, 2).is_err());
    }
}
