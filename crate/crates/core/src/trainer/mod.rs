//! Noise-prediction training, evaluation and checkpoints.

mod checkpoint;
mod optim;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorRecord};
pub use optim::{clip_global_norm, AdamW, Ema};

use crate::autograd::Graph;
use crate::error::{ensure, Error, Result};
use crate::mask::Mask;
use crate::metrics::{EmptyConvention, MetricReport};
use crate::network::{ModelConfig, SegDiffNet};
use crate::plot::line_chart;
use crate::rng::{rng_for, streams};
use crate::sampler::{sample_ensembles, EnsembleResult, SamplerConfig};
use crate::schedule::{build_schedule, loss, NoiseSchedule, ScheduleKind};
use crate::synthdata::SegSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    pub ema_decay: Option<f64>,
    /// Random flips and quarter turns applied jointly to image and mask.
    pub augment: bool,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Steps between validation passes; 0 disables them.
    pub eval_every: usize,
    pub validation: SamplerConfig,
    pub schedule: ScheduleKind,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            max_steps: None,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            lr_schedule: LrSchedule::Constant,
            ema_decay: None,
            augment: false,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            validation: SamplerConfig {
                ensemble_size: 1,
                ..SamplerConfig::default()
            },
            schedule: ScheduleKind::Linear,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(
            self.epochs >= 1 || self.max_steps.is_some_and(|s| s >= 1),
            "need at least one epoch or step"
        );
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive"
        );
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure!(self.grad_clip >= 0.0, "grad_clip must be non-negative");
        if let Some(d) = self.ema_decay {
            ensure!((0.0..1.0).contains(&d), "ema_decay must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.max_steps
            .unwrap_or(self.epochs * self.steps_per_epoch(samples))
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.model.diffusion_steps, self.schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub model: SegDiffNet<f32>,
    pub log: Vec<LogRow>,
    /// `(step, mean validation Dice)`.
    pub validation: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// Joint dihedral transform of a square image and mask.
fn transform_index(code: u8, y: usize, x: usize, n: usize) -> (usize, usize) {
    let (y, x) = if code & 1 == 1 { (y, n - 1 - x) } else { (y, x) };
    let (y, x) = if code & 2 == 2 { (n - 1 - y, x) } else { (y, x) };
    if code & 4 == 4 {
        (x, y)
    } else {
        (y, x)
    }
}

/// Stacks `(image, signed mask)` batches, optionally transformed.
fn assemble(samples: &[&SegSample], codes: &[u8]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (c, h, w) = match samples[0].image.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(Error::InvalidArgument(format!("image must be (C, H, W), got {other:?}"))),
    };
    let n = samples.len();
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    for (s, &code) in samples.iter().zip(codes) {
        ensure!(
            s.image.shape() == [c, h, w] && s.mask.height() == h && s.mask.width() == w,
            "sample {} does not match the batch shape",
            s.id
        );
        let signed = s.mask.to_signed::<f32>();
        if code == 0 || h != w {
            images.extend_from_slice(s.image.data());
            masks.extend(signed);
            continue;
        }
        for ch in 0..c {
            let plane = &s.image.data()[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = transform_index(code, y, x, h);
                    images.push(plane[sy * w + sx]);
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = transform_index(code, y, x, h);
                masks.push(signed[sy * w + sx]);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, h, w], images)?,
        Tensor::from_vec(&[n, 1, h, w], masks)?,
    ))
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: usize,
    batch_ids: Vec<&'a str>,
    t: &'a [usize],
    loss: f64,
    recent_losses: Vec<f64>,
}

struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_logs(&self, log: &[LogRow], validation: &[(usize, f64)]) -> Result<()> {
        let path = self.dir.join("loss.csv");
        let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
        for row in log {
            w.serialize(row).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let series: Vec<(f64, f64)> = log.iter().map(|r| (r.step as f64, r.loss)).collect();
        line_chart(&self.dir.join("loss.png"), &[series], true, 640, 400)?;
        if !validation.is_empty() {
            let path = self.dir.join("validation.csv");
            let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
            let mut w = csv::Writer::from_path(&path).map_err(wrap)?;
            w.write_record(["step", "dice"]).map_err(wrap)?;
            for (s, d) in validation {
                w.write_record([s.to_string(), d.to_string()]).map_err(wrap)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Trains a fresh model on `train`, validating on `val` every
/// `config.eval_every` steps. With `out` set, writes `loss.csv`, `loss.png`,
/// `validation.csv` and checkpoints there.
pub fn train(config: &TrainConfig, train: &[SegSample], val: &[SegSample], out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    ensure!(!train.is_empty(), "training split is empty");
    let files = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(RunFiles { dir: dir.to_path_buf() })
        }
        None => None,
    };
    let schedule = config.build_schedule()?;
    let mut model = SegDiffNet::<f32>::new(config.model.clone(), config.seed)?;
    let mut opt = AdamW::new(model.params(), config.weight_decay);
    let mut ema = config.ema_decay.map(|d| Ema::new(model.params(), d));
    let per_epoch = config.steps_per_epoch(train.len());
    let total = config.total_steps(train.len());
    let started = Instant::now();
    let mut log = Vec::with_capacity(total);
    let mut validation = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let t_max = config.model.diffusion_steps;

    for step in 0..total {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng_for(config.seed, streams::DATA_ORDER, epoch as u64));
        }
        let start = (step % per_epoch) * config.batch_size;
        let idx = &order[start..(start + config.batch_size).min(order.len())];
        let batch: Vec<&SegSample> = idx.iter().map(|&i| &train[i]).collect();

        let mut rng = rng_for(config.seed, streams::TRAIN_NOISE, step as u64);
        let codes: Vec<u8> = batch
            .iter()
            .map(|_| if config.augment { rng.random_range(0..8) } else { 0 })
            .collect();
        let t: Vec<usize> = batch.iter().map(|_| rng.random_range(0..t_max)).collect();
        let (images, x0) = assemble(&batch, &codes)?;
        let noise = Tensor::<f32>::randn(x0.shape(), &mut rng);

        let g = Graph::new();
        let l = loss(&g, &schedule, &model, &x0, &images, &t, &noise)?;
        let loss_value = l.value().data()[0] as f64;
        if !loss_value.is_finite() {
            let recent: Vec<f64> = log.iter().rev().take(20).rev().map(|r: &LogRow| r.loss).collect();
            let diag = Diagnostic {
                step,
                batch_ids: batch.iter().map(|s| s.id.as_str()).collect(),
                t: &t,
                loss: loss_value,
                recent_losses: recent,
            };
            let text = serde_json::to_string_pretty(&diag).expect("diagnostic serializes");
            if let Some(f) = &files {
                let path = f.dir.join("diagnostic.json");
                fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
            return Err(Error::Numerical(format!("non-finite loss at step {step}: {text}")));
        }
        let mut grads_by_var = g.backward(l)?;
        let mut grads: Vec<Option<Tensor<f32>>> = (0..model.params().len())
            .map(|i| g.param_var(i).and_then(|v| grads_by_var.take(v.id())))
            .collect();
        drop(g);
        if config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, config.grad_clip);
        }
        let lr = config.lr_at(step, total);
        opt.step(model.params_mut(), &grads, lr)?;
        if let Some(e) = ema.as_mut() {
            e.update(model.params());
        }
        log.push(LogRow {
            step,
            loss: loss_value,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
        });
        if step % 50 == 0 || step + 1 == total {
            log::info!("step {step}/{total} loss {loss_value:.5}");
        }

        let done = step + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && !val.is_empty() && done < total {
            let snapshot = ema_snapshot(&model, ema.as_ref())?;
            let eval = evaluate(snapshot.as_ref().unwrap_or(&model), &schedule, val, &config.validation)?;
            log::info!("step {done} validation dice {:.4}", eval.report.mean_dice);
            validation.push((done, eval.report.mean_dice));
        }
        if let Some(f) = &files {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < total {
                let snapshot = ema_snapshot(&model, ema.as_ref())?;
                let path = f.checkpoint(&format!("checkpoint_{done:06}.tar"));
                save_checkpoint(&path, snapshot.as_ref().unwrap_or(&model), done as u64, Some(config), config.schedule)?;
            }
        }
    }
    if let Some(e) = &ema {
        e.copy_to(model.params_mut())?;
    }
    if config.eval_every > 0 && !val.is_empty() {
        let eval = evaluate(&model, &schedule, val, &config.validation)?;
        validation.push((total, eval.report.mean_dice));
    }
    if let Some(f) = &files {
        save_checkpoint(&f.checkpoint("final.tar"), &model, total as u64, Some(config), config.schedule)?;
        f.write_logs(&log, &validation)?;
    }
    Ok(TrainOutcome { model, log, validation })
}

fn ema_snapshot(model: &SegDiffNet<f32>, ema: Option<&Ema<f32>>) -> Result<Option<SegDiffNet<f32>>> {
    ema.map(|e| {
        let mut copy = model.clone();
        e.copy_to(copy.params_mut())?;
        Ok(copy)
    })
    .transpose()
}

pub struct Evaluation {
    pub report: MetricReport,
    pub ensembles: Vec<EnsembleResult>,
}

/// Samples every image with `sampler` and scores the fused masks.
pub fn evaluate(model: &SegDiffNet<f32>, schedule: &NoiseSchedule, samples: &[SegSample], sampler: &SamplerConfig) -> Result<Evaluation> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let ensembles = if images.is_empty() {
        Vec::new()
    } else {
        sample_ensembles(model, &images, schedule, sampler)?
    };
    let preds: Vec<&Mask> = ensembles.iter().map(|e| &e.fused).collect();
    let report = MetricReport::evaluate(
        samples
            .iter()
            .zip(preds)
            .map(|(s, p)| (s.id.as_str(), p, &s.mask)),
        EmptyConvention::One,
    )?;
    Ok(Evaluation { report, ensembles })
}
