//! Closed-form diffusion mathematics: noise schedules, forward noising,
//! the noise-prediction loss, and the ancestral reverse update.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// β linear from 1e-4 to 0.02.
    #[default]
    Linear,
    /// Squared-cosine ᾱ with offset 0.008, β capped at 0.999.
    Cosine,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;

/// Precomputed coefficients over `steps` diffusion steps. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    ensure!(steps >= 2, "schedule needs at least 2 steps, got {steps}");
    let betas = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..steps)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    NoiseSchedule::from_betas(kind, betas)
}

impl NoiseSchedule {
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), "empty beta sequence");
        ensure!(
            betas.iter().all(|&b| b > 0.0 && b < 1.0),
            "betas must lie in (0, 1)"
        );
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let posterior_vars = betas.clone();
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        ensure!(t < self.steps(), "step {t} out of range for a {}-step schedule", self.steps());
        Ok(())
    }

    /// A shorter schedule visiting `count` uniformly strided training steps.
    ///
    /// Returns the respaced schedule and, for each of its steps, the training
    /// step index the noise predictor must be queried at. Step `i` of the
    /// result keeps ᾱ of training step `τ_i`, with β re-derived from
    /// consecutive ratios.
    pub fn respace(&self, count: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let total = self.steps();
        ensure!(
            (1..=total).contains(&count),
            "inference steps must be in 1..={total}, got {count}"
        );
        if count == total {
            return Ok((self.clone(), (0..total).collect()));
        }
        let taus: Vec<usize> = if count == 1 {
            vec![total - 1]
        } else {
            (0..count)
                .map(|i| ((i * (total - 1)) as f64 / (count - 1) as f64).round() as usize)
                .collect()
        };
        let mut prev = 1.0;
        let betas = taus
            .iter()
            .map(|&tau| {
                let ab = self.alpha_bars[tau];
                let beta = 1.0 - ab / prev;
                prev = ab;
                beta
            })
            .collect();
        Ok((NoiseSchedule::from_betas(self.kind, betas)?, taus))
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`.
pub fn forward_noise<T: Scalar>(schedule: &NoiseSchedule, x0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bars[t];
    let (cs, cn) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    x0.zip_map(noise, |x, e| cs * x + cn * e)
}

/// A noised training batch with per-sample step indices.
#[derive(Clone, Debug)]
pub struct DiffusionBatch<T> {
    pub x0: Tensor<T>,
    pub t: Vec<usize>,
    pub noise: Tensor<T>,
    pub xt: Tensor<T>,
}

impl<T: Scalar> DiffusionBatch<T> {
    pub fn new(schedule: &NoiseSchedule, x0: Tensor<T>, t: Vec<usize>, noise: Tensor<T>) -> Result<Self> {
        x0.check_same_shape(&noise)?;
        ensure!(
            x0.shape().first() == Some(&t.len()),
            "batch of {} step indices for leading dimension {:?}",
            t.len(),
            x0.shape().first()
        );
        let per = x0.len() / t.len().max(1);
        let mut xt = Tensor::zeros(x0.shape());
        for (i, &ti) in t.iter().enumerate() {
            schedule.check_t(ti)?;
            let ab = schedule.alpha_bars[ti];
            let (cs, cn) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
            let range = i * per..(i + 1) * per;
            for ((o, &x), &e) in xt.data_mut()[range.clone()]
                .iter_mut()
                .zip(&x0.data()[range.clone()])
                .zip(&noise.data()[range])
            {
                *o = cs * x + cn * e;
            }
        }
        Ok(Self { x0, t, noise, xt })
    }
}

/// Anything that predicts the injected noise from `(x_t, image, t)`.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise<'g>(&self, graph: &'g Graph<T>, xt: Var<'g, T>, image: Var<'g, T>, t: &[usize]) -> Result<Var<'g, T>>;

    /// `(image channels, mask channels, height, width)` the predictor accepts, when fixed.
    fn input_shape(&self) -> Option<(usize, usize, usize, usize)> {
        None
    }
}

/// Mean squared error between the injected noise and the model's prediction
/// on the noised input, recorded on `graph` so it can be differentiated.
pub fn loss<'g, T: Scalar, M: NoisePredictor<T> + ?Sized>(
    graph: &'g Graph<T>,
    schedule: &NoiseSchedule,
    model: &M,
    x0: &Tensor<T>,
    image: &Tensor<T>,
    t: &[usize],
    noise: &Tensor<T>,
) -> Result<Var<'g, T>> {
    let batch = DiffusionBatch::new(schedule, x0.clone(), t.to_vec(), noise.clone())?;
    let xt = graph.constant(batch.xt);
    let image = graph.constant(image.clone());
    let target = graph.constant(batch.noise);
    let pred = model.predict_noise(graph, xt, image, t)?;
    ensure!(
        pred.shape() == target.shape(),
        "prediction shape {:?} differs from noise shape {:?}",
        pred.shape(),
        target.shape()
    );
    pred.mse(target)
}

/// One ancestral step `x_t → x_{t−1}` with σ_t² = posterior variance.
/// `z` must be all zeros at `t = 0`.
pub fn reverse_step<T: Scalar>(
    schedule: &NoiseSchedule,
    xt: &Tensor<T>,
    predicted_noise: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    xt.check_same_shape(predicted_noise)?;
    xt.check_same_shape(z)?;
    ensure!(
        t > 0 || z.data().iter().all(|v| v.is_zero()),
        "the final reverse step takes no noise"
    );
    let alpha = schedule.alphas[t];
    let inv_sqrt_alpha = T::lit(1.0 / alpha.sqrt());
    let eps_coef = T::lit(schedule.betas[t] / (1.0 - schedule.alpha_bars[t]).sqrt());
    let sigma = T::lit(schedule.posterior_vars[t].sqrt());
    let mut out = Tensor::zeros(xt.shape());
    for (((o, &x), &e), &zv) in out
        .data_mut()
        .iter_mut()
        .zip(xt.data())
        .zip(predicted_noise.data())
        .zip(z.data())
    {
        *o = inv_sqrt_alpha * (x - eps_coef * e) + sigma * zv;
    }
    Ok(out)
}
