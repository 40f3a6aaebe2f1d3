//! Dense regressor with zero or one hidden layer.
//!
//! Layout: `w1` is `input_dim x width` row-major (`w1[i * width + j]`), where
//! `width` is the hidden size, or 1 for the linear model. The linear model
//! has no second layer: `y = x . w1 + b1[0]`. With a hidden layer,
//! `y = w2 . (act(x . w1 + b1) * mask) + b2[0]`.
//!
//! Dropout acts on hidden units only and is inverted: kept units are scaled
//! by `1 / (1 - p)` so that [`ForwardMode::Eval`] is the mask expectation.

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_units: usize,
    pub activation: Activation,
    pub dropout_p: f64,
    pub output_dim: usize,
}

impl Default for MlpConfig {
    /// 64 ReLU hidden units, p = 0.2.
    fn default() -> Self {
        MlpConfig {
            input_dim: crate::features::N_FEATURES,
            hidden_units: 64,
            activation: Activation::Relu,
            dropout_p: 0.2,
            output_dim: 1,
        }
    }
}

impl MlpConfig {
    /// Single affine layer: linear regression.
    pub fn linear(input_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            hidden_units: 0,
            activation: Activation::Identity,
            dropout_p: 0.0,
            output_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.output_dim != 1 {
            return bad(format!("output_dim must be 1, got {}", self.output_dim));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.hidden_units == 0 && self.activation != Activation::Identity {
            return bad("a model without hidden units must use the identity activation".into());
        }
        if self.hidden_units == 0 && self.dropout_p != 0.0 {
            return bad("a model without hidden units cannot use dropout".into());
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.hidden_units.max(1)
    }

    pub fn is_linear(&self) -> bool {
        self.hidden_units == 0
    }
}

/// Parameter blocks; also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub b2: Vec<f64>,
}

impl Params {
    pub fn zeros(config: &MlpConfig) -> Self {
        let w = config.width();
        let h = config.hidden_units;
        Params {
            w1: vec![0.0; config.input_dim * w],
            b1: vec![0.0; w],
            w2: vec![0.0; h],
            b2: vec![0.0; usize::from(h > 0)],
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn shape_matches(&self, config: &MlpConfig) -> bool {
        let z = Params::zeros(config);
        self.blocks()
            .iter()
            .zip(z.blocks().iter())
            .all(|((_, a), (_, b))| a.len() == b.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Deterministic, no dropout.
    Eval,
    /// Fresh inverted-dropout mask per sample, used while training.
    TrainSample,
    /// Fresh mask per sample at inference (MC dropout).
    McSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub init_seed: u64,
    pub params: Params,
}

/// He-uniform for ReLU layers, Xavier-uniform otherwise. Biases start at 0.
pub fn init_mlp(config: MlpConfig, seed: u64) -> Result<MlpModel> {
    config.validate()?;
    let mut rng = substream(seed, "init", 0);
    let mut params = Params::zeros(&config);
    let fan_in = config.input_dim as f64;
    let width = config.width() as f64;
    let limit1 = match config.activation {
        Activation::Relu => (6.0 / fan_in).sqrt(),
        Activation::Identity => (6.0 / (fan_in + width)).sqrt(),
    };
    for w in params.w1.iter_mut() {
        *w = rng.random_range(-limit1..limit1);
    }
    if !config.is_linear() {
        let limit2 = (6.0 / (width + 1.0)).sqrt();
        for w in params.w2.iter_mut() {
            *w = rng.random_range(-limit2..limit2);
        }
    }
    Ok(MlpModel {
        config,
        init_seed: seed,
        params,
    })
}

/// Mean squared error.
pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

impl MlpModel {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if !self.params.shape_matches(&self.config) {
            return Err(Error::BadConfig("parameter shapes do not match config".into()));
        }
        for (name, b) in self.params.blocks() {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter block {name}")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn check_inputs(&self, x: &[f64]) -> Result<usize> {
        let d = self.config.input_dim;
        if !x.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch {
                expected: d * (x.len() / d + 1),
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input element {i}")));
        }
        Ok(x.len() / d)
    }

    /// Whether the stochastic modes actually drop anything.
    pub fn has_dropout(&self) -> bool {
        !self.config.is_linear() && self.config.dropout_p > 0.0
    }

    /// Draws `batch` inverted-dropout masks (`batch x hidden`, row-major).
    /// Returns `None` when dropout is a no-op.
    pub fn sample_masks<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<f64>> {
        if !self.has_dropout() {
            return None;
        }
        let mut m = vec![0.0; batch * self.config.hidden_units];
        self.fill_mask(&mut m, rng);
        Some(m)
    }

    pub(crate) fn fill_mask<R: Rng + ?Sized>(&self, mask: &mut [f64], rng: &mut R) {
        let p = self.config.dropout_p;
        let keep = 1.0 / (1.0 - p);
        for m in mask.iter_mut() {
            *m = if rng.random::<f64>() < p { 0.0 } else { keep };
        }
    }

    /// Hidden activations `act(x . w1 + b1)` for one input, before masking.
    /// For the linear model this is the single affine output.
    pub fn hidden(&self, x: &[f64], out: &mut [f64]) {
        let w = self.config.width();
        out.copy_from_slice(&self.params.b1);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.params.w1[i * w..(i + 1) * w];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        if !self.config.is_linear() {
            for o in out.iter_mut() {
                *o = self.config.activation.apply(*o);
            }
        }
    }

    /// Output from precomputed hidden activations and an optional mask.
    #[inline]
    pub fn output_from_hidden(&self, h: &[f64], mask: Option<&[f64]>) -> f64 {
        if self.config.is_linear() {
            return h[0];
        }
        let w2 = &self.params.w2;
        let s: f64 = match mask {
            Some(m) => h.iter().zip(m).zip(w2).map(|((h, m), w)| h * m * w).sum(),
            None => h.iter().zip(w2).map(|(h, w)| h * w).sum(),
        };
        s + self.params.b2[0]
    }

    /// Forward with explicit masks (`batch x hidden`), `None` for Eval.
    pub fn forward_masked(&self, x: &[f64], masks: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.check_inputs(x)?;
        let d = self.config.input_dim;
        let h = self.config.hidden_units;
        if let Some(m) = masks {
            if m.len() != n * h {
                return Err(Error::ShapeMismatch {
                    expected: n * h,
                    got: m.len(),
                });
            }
        }
        let mut buf = vec![0.0; self.config.width()];
        Ok((0..n)
            .map(|b| {
                self.hidden(&x[b * d..(b + 1) * d], &mut buf);
                let mask = masks.map(|m| &m[b * h..(b + 1) * h]);
                self.output_from_hidden(&buf, mask)
            })
            .collect())
    }

    /// Batch forward. `x` is `batch x input_dim` row-major.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f64], mode: ForwardMode, rng: &mut R) -> Result<Vec<f64>> {
        let n = self.check_inputs(x)?;
        let masks = match mode {
            ForwardMode::Eval => None,
            ForwardMode::TrainSample | ForwardMode::McSample => self.sample_masks(n, rng),
        };
        self.forward_masked(x, masks.as_deref())
    }

    /// Deterministic prediction (Eval mode).
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_masked(x, None)
    }

    /// MSE and its analytic gradient for a batch under fixed masks.
    pub fn loss_and_grad(&self, x: &[f64], y: &[f64], masks: Option<&[f64]>) -> Result<(f64, Params)> {
        let n = self.check_inputs(x)?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if y.len() != n {
            return Err(Error::LengthMismatch { pred: n, target: y.len() });
        }
        let d = self.config.input_dim;
        let h = self.config.hidden_units;
        let w = self.config.width();
        if let Some(m) = masks {
            if m.len() != n * h {
                return Err(Error::ShapeMismatch {
                    expected: n * h,
                    got: m.len(),
                });
            }
        }
        let act = self.config.activation;
        let mut g = Params::zeros(&self.config);
        let mut z = vec![0.0; w];
        let mut a = vec![0.0; w];
        let mut loss = 0.0;
        let scale = 2.0 / n as f64;
        for b in 0..n {
            let xb = &x[b * d..(b + 1) * d];
            z.copy_from_slice(&self.params.b1);
            for (i, &xi) in xb.iter().enumerate() {
                for (zj, &wij) in z.iter_mut().zip(&self.params.w1[i * w..(i + 1) * w]) {
                    *zj += xi * wij;
                }
            }
            if self.config.is_linear() {
                let r = z[0] - y[b];
                loss += r * r;
                let dy = scale * r;
                g.b1[0] += dy;
                for (gi, &xi) in g.w1.iter_mut().zip(xb) {
                    *gi += dy * xi;
                }
                continue;
            }
            let mask = masks.map(|m| &m[b * h..(b + 1) * h]);
            for j in 0..h {
                a[j] = act.apply(z[j]) * mask.map_or(1.0, |m| m[j]);
            }
            let out = a.iter().zip(&self.params.w2).map(|(a, w)| a * w).sum::<f64>() + self.params.b2[0];
            let r = out - y[b];
            loss += r * r;
            let dy = scale * r;
            g.b2[0] += dy;
            for j in 0..h {
                g.w2[j] += dy * a[j];
                // reuse z as dL/dz
                z[j] = dy * self.params.w2[j] * mask.map_or(1.0, |m| m[j]) * act.derivative(z[j]);
            }
            for (gb, &dz) in g.b1.iter_mut().zip(&z) {
                *gb += dz;
            }
            for (i, &xi) in xb.iter().enumerate() {
                for (gw, &dz) in g.w1[i * w..(i + 1) * w].iter_mut().zip(&z) {
                    *gw += xi * dz;
                }
            }
        }
        Ok((loss / n as f64, g))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(config: &MlpConfig, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Params::zeros(config),
            v: Params::zeros(config),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let eps = self.eps;
        let blocks = params.blocks_mut();
        let gb = grads.blocks();
        let mb = self.m.blocks_mut();
        let vb = self.v.blocks_mut();
        for (((p, g), m), v) in blocks.into_iter().zip(gb).zip(mb).zip(vb) {
            for (((p, &g), m), v) in p.1.iter_mut().zip(g.1).zip(m.1.iter_mut()).zip(v.1.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// One optimizer step on a batch with fresh training masks. Returns the
/// loss before the update.
pub fn grad_step<R: Rng + ?Sized>(
    model: &mut MlpModel,
    x: &[f64],
    y: &[f64],
    opt: &mut Adam,
    rng: &mut R,
) -> Result<f64> {
    let n = x.len() / model.config.input_dim.max(1);
    let masks = model.sample_masks(n, rng);
    let (loss, grads) = model.loss_and_grad(x, y, masks.as_deref())?;
    for (name, b) in grads.blocks() {
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    opt.step(&mut model.params, &grads);
    Ok(loss)
}

/// Max relative error between analytic and central-difference gradients
/// under fixed masks: `|ga - gn| / max(1e-12, |ga| + |gn|)`.
pub fn gradient_check(model: &MlpModel, x: &[f64], y: &[f64], masks: Option<&[f64]>, eps: f64) -> f64 {
    let (_, analytic) = model
        .loss_and_grad(x, y, masks)
        .expect("gradient_check needs a well-formed batch");
    let loss_at = |m: &MlpModel| m.loss_and_grad(x, y, masks).expect("well-formed batch").0;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (bi, (_, ga)) in analytic.blocks().iter().enumerate() {
        for (k, &g) in ga.iter().enumerate() {
            let orig = model.params.blocks()[bi].1[k];
            probe.params.blocks_mut()[bi].1[k] = orig + eps;
            let up = loss_at(&probe);
            probe.params.blocks_mut()[bi].1[k] = orig - eps;
            let down = loss_at(&probe);
            probe.params.blocks_mut()[bi].1[k] = orig;
            let gn = (up - down) / (2.0 * eps);
            let rel = (g - gn).abs() / (g.abs() + gn.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m = init_mlp(MlpConfig::default(), 3).unwrap();
        assert_eq!(m.params.w1.len(), 7 * 64);
        assert_eq!(m.params.b1.len(), 64);
        assert_eq!(m.params.w2.len(), 64);
        assert_eq!(m.params.b2.len(), 1);
        assert!(m.params.b1.iter().all(|&b| b == 0.0));
        assert_eq!(m, init_mlp(MlpConfig::default(), 3).unwrap());
        assert_ne!(m, init_mlp(MlpConfig::default(), 4).unwrap());
        let lin = init_mlp(MlpConfig::linear(7), 3).unwrap();
        assert_eq!((lin.params.w1.len(), lin.params.b1.len(), lin.params.w2.len()), (7, 1, 0));
    }

    #[test]
    fn linear_with_dropout_is_bad_config() {
        let cfg = MlpConfig {
            dropout_p: 0.2,
            ..MlpConfig::linear(7)
        };
        assert!(matches!(init_mlp(cfg, 0), Err(Error::BadConfig(_))));
        let cfg = MlpConfig {
            dropout_p: 1.0,
            ..MlpConfig::default()
        };
        assert!(matches!(init_mlp(cfg, 0), Err(Error::BadConfig(_))));
    }

    #[test]
    fn constant_network() {
        let mut m = init_mlp(MlpConfig::default(), 0).unwrap();
        m.params = Params::zeros(&m.config);
        m.params.b2[0] = 2.5;
        let x = [0.3, -1.0, 2.0, 0.0, 5.0, -0.2, 1.0];
        assert_eq!(m.predict(&x).unwrap(), vec![2.5]);
        assert_eq!(m.forward(&x, ForwardMode::McSample, &mut rng()).unwrap(), vec![2.5]);
    }

    #[test]
    fn relu_clips_negative_preactivations() {
        let mut m = init_mlp(MlpConfig::default(), 0).unwrap();
        m.params.b1.iter_mut().for_each(|b| *b = -100.0);
        m.params.b2[0] = -0.75;
        let x = [0.1; 7];
        assert_eq!(m.predict(&x).unwrap(), vec![-0.75]);
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let cfg = MlpConfig {
            dropout_p: 0.0,
            ..MlpConfig::default()
        };
        let m = init_mlp(cfg, 9).unwrap();
        let x: Vec<f64> = (0..21).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(
            m.forward(&x, ForwardMode::TrainSample, &mut rng()).unwrap(),
            m.predict(&x).unwrap()
        );
    }

    #[test]
    fn eval_ignores_rng() {
        let m = init_mlp(MlpConfig::default(), 9).unwrap();
        let x = [0.5; 14];
        let a = m.forward(&x, ForwardMode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = m.forward(&x, ForwardMode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let m = init_mlp(MlpConfig::default(), 0).unwrap();
        assert!(matches!(m.predict(&[0.0; 6]), Err(Error::ShapeMismatch { .. })));
        let mut x = [0.0; 7];
        x[3] = f64::NAN;
        assert!(matches!(m.predict(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mse_cases() {
        assert_eq!(loss_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        let base = loss_mse(&[0.5, -1.0, 2.0], &[0.0, 0.0, 0.0]).unwrap();
        let doubled = loss_mse(&[1.0, -2.0, 4.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(doubled, 4.0 * base);
        assert!(matches!(loss_mse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(loss_mse(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn zero_model_gradient_check_is_exact() {
        let mut m = init_mlp(MlpConfig::default(), 0).unwrap();
        m.params = Params::zeros(&m.config);
        let x: Vec<f64> = (0..28).map(|i| (i as f64).cos()).collect();
        let y = [1.0, -1.0, 0.5, 2.0];
        assert!(gradient_check(&m, &x, &y, None, 1e-5) < 1e-9);
    }

    #[test]
    fn descent_with_small_lr() {
        let cfg = MlpConfig {
            dropout_p: 0.0,
            ..MlpConfig::default()
        };
        let mut m = init_mlp(cfg, 5).unwrap();
        let x: Vec<f64> = (0..7 * 16).map(|i| ((i * 7919) % 97) as f64 / 50.0 - 1.0).collect();
        let y: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut opt = Adam::new(&m.config, 1e-4);
        let l0 = loss_mse(&m.predict(&x).unwrap(), &y).unwrap();
        grad_step(&mut m, &x, &y, &mut opt, &mut rng()).unwrap();
        let l1 = loss_mse(&m.predict(&x).unwrap(), &y).unwrap();
        assert!(l1 < l0, "{l1} >= {l0}");
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut m = init_mlp(MlpConfig::linear(2), 0).unwrap();
        m.params.w1 = vec![1e300, 1e300];
        let mut opt = Adam::new(&m.config, 1e-3);
        let err = grad_step(&mut m, &[1e10, 1e10], &[0.0], &mut opt, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(_)), "{err}");
    }
}
