//! Reverse-chain sampling of segmentation masks and ensemble fusion.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{ensure, Error, Result};
use crate::mask::Mask;
use crate::rng::{derive_seed, streams};
use crate::scalar::Scalar;
use crate::schedule::{reverse_step, NoisePredictor, NoiseSchedule};
use crate::staple::{fuse_masks, mean_vote, StapleEstimate};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMethod {
    #[default]
    Staple,
    MeanVote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Reverse steps, uniformly strided over the training schedule.
    pub steps: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Foreground wherever the final estimate exceeds this value.
    pub threshold: f64,
    pub fusion: FusionMethod,
    /// Chains advanced together in one network evaluation.
    pub chain_batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            ensemble_size: 25,
            seed: 0,
            threshold: 0.0,
            fusion: FusionMethod::Staple,
            chain_batch: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        ensure!(
            (1..=schedule.steps()).contains(&self.steps),
            "sampler steps {} must be in 1..={}",
            self.steps,
            schedule.steps()
        );
        ensure!(self.ensemble_size >= 1, "ensemble_size must be at least 1");
        ensure!(self.chain_batch >= 1, "chain_batch must be at least 1");
        Ok(())
    }

    /// Seed of chain `index`.
    pub fn chain_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, streams::CHAIN, index as u64)
    }
}

/// One reverse chain: which image it conditions on and its noise seed.
#[derive(Clone, Copy, Debug)]
pub struct ChainJob {
    pub image: usize,
    pub seed: u64,
}

fn check_image<T: Scalar, M: NoisePredictor<T> + ?Sized>(model: &M, image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        other => return Err(Error::InvalidArgument(format!("image must be (C, H, W), got {other:?}"))),
    };
    if let Some((ci, _, hh, ww)) = model.input_shape() {
        ensure!(
            (c, h, w) == (ci, hh, ww),
            "image shape ({c}, {h}, {w}) does not match the model input ({ci}, {hh}, {ww})"
        );
    }
    Ok((c, h, w))
}

/// Runs every job's reverse chain from pure noise and returns the final
/// real-valued estimates, each `(1, mask channels, H, W)`.
///
/// Chains are advanced in lockstep batches of `batch`; each chain draws all
/// of its noise from its own seed, so the result does not depend on batching.
pub fn run_chains<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    images: &[Tensor<T>],
    jobs: &[ChainJob],
    schedule: &NoiseSchedule,
    steps: usize,
    batch: usize,
) -> Result<Vec<Tensor<T>>> {
    ensure!(batch >= 1, "chain batch must be positive");
    ensure!(!images.is_empty() || jobs.is_empty(), "no conditioning images");
    let dims = images.iter().map(|im| check_image(model, im)).collect::<Result<Vec<_>>>()?;
    ensure!(dims.windows(2).all(|w| w[0] == w[1]), "conditioning images differ in shape");
    let (sub, taus) = schedule.respace(steps)?;
    let mask_channels = model.input_shape().map_or(1, |s| s.1);
    let mut results = Vec::with_capacity(jobs.len());
    for group in jobs.chunks(batch) {
        let (c, h, w) = dims[0];
        let n = group.len();
        let mut cond = Vec::with_capacity(n * c * h * w);
        for job in group {
            ensure!(job.image < images.len(), "chain refers to missing image {}", job.image);
            cond.extend_from_slice(images[job.image].data());
        }
        let cond = Tensor::from_vec(&[n, c, h, w], cond)?;
        let per = mask_channels * h * w;
        let mut rngs: Vec<_> = group
            .iter()
            .map(|job| <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(job.seed))
            .collect();
        let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| -> Tensor<T> {
            let mut data = Vec::with_capacity(n * per);
            for rng in rngs.iter_mut() {
                data.extend(Tensor::<T>::randn(&[per], rng).into_vec());
            }
            Tensor::from_vec(&[n, mask_channels, h, w], data).expect("noise shape")
        };
        let mut x = draw(&mut rngs);
        for i in (0..sub.steps()).rev() {
            let g = Graph::inference();
            let t = vec![taus[i]; n];
            let eps = model.predict_noise(&g, g.constant(x.clone()), g.constant(cond.clone()), &t)?;
            let eps = eps.value();
            let z = if i > 0 {
                draw(&mut rngs)
            } else {
                Tensor::zeros(x.shape())
            };
            x = reverse_step(&sub, &x, &eps, i, &z)?;
            if !x.all_finite() {
                return Err(Error::Numerical(format!("reverse chain diverged at step {}", taus[i])));
            }
        }
        for k in 0..n {
            results.push(x.select(k)?);
        }
    }
    Ok(results)
}

fn binarize<T: Scalar>(x: &Tensor<T>, threshold: f64) -> Result<Mask> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    ensure!(x.len() == h * w, "binarization needs a single-channel estimate");
    Mask::from_threshold(h, w, x.data(), T::lit(threshold))
}

/// A single chain for `image` seeded by `seed`.
pub fn sample_one<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Mask> {
    config.validate(schedule)?;
    let out = run_chains(
        model,
        std::slice::from_ref(image),
        &[ChainJob { image: 0, seed }],
        schedule,
        config.steps,
        1,
    )?;
    binarize(&out[0], config.threshold)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    pub samples: Vec<Mask>,
    pub fused: Mask,
    pub per_sample_seeds: Vec<u64>,
    pub fusion_method: FusionMethod,
    pub staple: Option<StapleEstimate>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    seeds: &'a [u64],
    steps: usize,
    threshold: f64,
    fusion_method: FusionMethod,
    ensemble_size: usize,
    staple: Option<StapleReport>,
}

#[derive(Serialize)]
struct StapleReport {
    sensitivities: Vec<f64>,
    specificities: Vec<f64>,
    iterations: usize,
    converged: bool,
}

impl EnsembleResult {
    fn fuse(samples: Vec<Mask>, seeds: Vec<u64>, method: FusionMethod) -> Result<Self> {
        let (fused, staple) = match method {
            FusionMethod::Staple => {
                let (m, est) = fuse_masks(&samples)?;
                (m, Some(est))
            }
            FusionMethod::MeanVote => (mean_vote(&samples)?, None),
        };
        Ok(Self {
            samples,
            fused,
            per_sample_seeds: seeds,
            fusion_method: method,
            staple,
        })
    }

    /// Writes `sample_XX.png`, `fused.png` and `provenance.json` into `dir`.
    pub fn write(&self, dir: &Path, config: &SamplerConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.samples.iter().enumerate() {
            m.save_png(&dir.join(format!("sample_{i:02}.png")))?;
        }
        self.fused.save_png(&dir.join("fused.png"))?;
        let record = Provenance {
            seeds: &self.per_sample_seeds,
            steps: config.steps,
            threshold: config.threshold,
            fusion_method: self.fusion_method,
            ensemble_size: self.samples.len(),
            staple: self.staple.as_ref().map(|e| StapleReport {
                sensitivities: e.sensitivities.clone(),
                specificities: e.specificities.clone(),
                iterations: e.iterations,
                converged: e.converged,
            }),
        };
        let path = dir.join("provenance.json");
        let text = serde_json::to_string_pretty(&record).expect("provenance serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// `config.ensemble_size` chains for one image, fused per `config.fusion`.
pub fn sample_ensemble<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<EnsembleResult> {
    Ok(sample_ensembles(model, std::slice::from_ref(image), schedule, config)?.remove(0))
}

/// Ensembles for several images, batching chains across images. Chain `k`
/// uses the same seed for every image.
pub fn sample_ensembles<T: Scalar, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    images: &[Tensor<T>],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<Vec<EnsembleResult>> {
    config.validate(schedule)?;
    let seeds: Vec<u64> = (0..config.ensemble_size).map(|k| config.chain_seed(k)).collect();
    let jobs: Vec<ChainJob> = (0..images.len())
        .flat_map(|image| seeds.iter().map(move |&seed| ChainJob { image, seed }))
        .collect();
    let raw = run_chains(model, images, &jobs, schedule, config.steps, config.chain_batch)?;
    raw.chunks(config.ensemble_size)
        .map(|chains| {
            let masks = chains
                .iter()
                .map(|x| binarize(x, config.threshold))
                .collect::<Result<Vec<_>>>()?;
            EnsembleResult::fuse(masks, seeds.clone(), config.fusion)
        })
        .collect()
}
