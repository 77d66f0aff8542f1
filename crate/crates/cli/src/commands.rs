use std::path::{Path, PathBuf};

use serde::Serialize;

use segdiff_core::ablation::{run_ablation, AblationSpec};
use segdiff_core::mask::Mask;
use segdiff_core::metrics::{EmptyConvention, MetricReport};
use segdiff_core::network::SegDiffNet;
use segdiff_core::sampler::{sample_ensembles, EnsembleResult, FusionMethod, SamplerConfig};
use segdiff_core::schedule::{build_schedule, NoiseSchedule};
use segdiff_core::staple::{mean_vote, staple_fuse, RaterStack};
use segdiff_core::synthdata::{generate_corpus, load_corpus, load_image, CorpusSpec, Manifest, SegSample, Split};
use segdiff_core::trainer::{self, load_checkpoint};
use segdiff_core::{Error, Tensor};

use crate::config::{self, FuseSettings, TrainSettings};
use crate::output::{prepare, record};
use crate::{CliError, Common};

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn check(result: segdiff_core::Result<()>) -> Result<(), CliError> {
    result.map_err(|e| match e {
        Error::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::Core(other),
    })
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(usage)
}

pub fn synth(common: &Common, count: Option<usize>, argv: &[String]) -> Result<(), CliError> {
    let mut spec: CorpusSpec = config::read(common.config.as_deref())?;
    if let Some(n) = count {
        spec.train_count = n;
        spec.val_count = n;
        spec.test_count = n;
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    check(spec.validate())?;
    prepare(&common.out, common.force)?;
    let manifest = generate_corpus(&spec, &common.out)?;
    record(&common.out, "synth", argv, 1, &spec)?;
    println!("wrote {} samples to {}", manifest.samples.len(), common.out.display());
    Ok(())
}

pub fn train(
    common: &Common,
    data: &Path,
    max_steps: Option<usize>,
    epochs: Option<usize>,
    argv: &[String],
) -> Result<(), CliError> {
    let mut settings: TrainSettings = config::read(common.config.as_deref())?;
    if let Some(s) = common.seed {
        settings.seed = s;
    }
    if max_steps.is_some() {
        settings.max_steps = max_steps;
    }
    if let Some(e) = epochs {
        settings.epochs = e;
    }
    let manifest = Manifest::read(data)?;
    let cfg = settings.train_config(manifest.image_channels)?;
    check(cfg.validate())?;
    let size = Some(cfg.model.image_size);
    let train_set = load_corpus(data, Split::Train, size)?;
    let val_set = load_corpus(data, Split::Val, size)?;
    prepare(&common.out, common.force)?;
    record(&common.out, "train", argv, 1, &settings.resolved(&cfg.model))?;
    let outcome = trainer::train(&cfg, &train_set, &val_set, Some(&common.out))?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps on {} samples, final loss {last:.5}, checkpoint {}",
        outcome.log.len(),
        train_set.len(),
        common.out.join("final.tar").display()
    );
    if let Some((step, dice)) = outcome.validation.last() {
        println!("validation dice at step {step}: {dice:.4}");
    }
    Ok(())
}

fn sampler_settings(common: &Common, steps: Option<usize>, ensemble: Option<usize>) -> Result<SamplerConfig, CliError> {
    let mut cfg: SamplerConfig = config::read(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(k) = ensemble {
        cfg.ensemble_size = k;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<(SegDiffNet<f32>, NoiseSchedule), CliError> {
    let (model, manifest) = load_checkpoint::<f32>(path)?;
    let schedule = build_schedule(manifest.model.diffusion_steps, manifest.schedule)?;
    Ok((model, schedule))
}

/// Splits `images` over `jobs` threads. Chain seeds depend only on the chain
/// index, so the split does not change any result.
fn sample_parallel(
    model: &SegDiffNet<f32>,
    images: &[Tensor<f32>],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    jobs: usize,
) -> Result<Vec<EnsembleResult>, CliError> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let chunk = images.len().div_ceil(jobs.max(1));
    let parts: Vec<segdiff_core::Result<Vec<EnsembleResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| s.spawn(move || sample_ensembles(model, part, schedule, cfg)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampling thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    common: &Common,
    checkpoint: &Path,
    image_paths: &[PathBuf],
    data: Option<&Path>,
    split: &str,
    steps: Option<usize>,
    ensemble: Option<usize>,
    argv: &[String],
) -> Result<(), CliError> {
    let cfg = sampler_settings(common, steps, ensemble)?;
    let (model, schedule) = load_model(checkpoint)?;
    check(cfg.validate(&schedule))?;
    let mc = model.config();
    let (ids, images): (Vec<String>, Vec<Tensor<f32>>) = if image_paths.is_empty() {
        let data = data.ok_or_else(|| usage(format!("give --image or --data (or set {})", crate::DATA_ENV)))?;
        load_corpus(data, parse_split(split)?, Some(mc.image_size))?
            .into_iter()
            .map(|s| (s.id, s.image))
            .unzip()
    } else {
        let mut ids = Vec::new();
        let mut images = Vec::new();
        for p in image_paths {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| usage(format!("{} has no file name", p.display())))?;
            if ids.contains(&id) {
                return Err(usage(format!("two images share the name {id}")));
            }
            images.push(load_image(p, mc.in_channels_image, Some(mc.image_size))?);
            ids.push(id);
        }
        (ids, images)
    };
    prepare(&common.out, common.force)?;
    record(&common.out, "sample", argv, common.jobs, &cfg)?;
    let results = sample_parallel(&model, &images, &schedule, &cfg, common.jobs)?;
    for (id, r) in ids.iter().zip(&results) {
        r.write(&common.out.join(id), &cfg)?;
    }
    println!("sampled {} images x {} chains into {}", ids.len(), cfg.ensemble_size, common.out.display());
    Ok(())
}

fn find_prediction(dir: &Path, id: &str) -> Result<Mask, CliError> {
    let flat = dir.join(format!("{id}.png"));
    let nested = dir.join(id).join("fused.png");
    let path = if flat.exists() { flat } else { nested };
    Mask::load_png(&path).map_err(|e| CliError::Core(Error::Data(format!("sample {id}: {e}"))))
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    split: &'a str,
    mode: &'a str,
    #[serde(flatten)]
    sampler: &'a SamplerConfig,
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    common: &Common,
    data: &Path,
    split: &str,
    checkpoint: Option<&Path>,
    oracle: bool,
    predictions: Option<&Path>,
    steps: Option<usize>,
    ensemble: Option<usize>,
    argv: &[String],
) -> Result<(), CliError> {
    let cfg = sampler_settings(common, steps, ensemble)?;
    let split_kind = parse_split(split)?;
    let model = checkpoint.map(load_model).transpose()?;
    if let Some((_, schedule)) = &model {
        check(cfg.validate(schedule))?;
    }
    let size = model.as_ref().map(|(m, _)| m.config().image_size);
    let samples: Vec<SegSample> = load_corpus(data, split_kind, size)?;
    let mode = if oracle {
        "oracle"
    } else if predictions.is_some() {
        "predictions"
    } else {
        "model"
    };
    prepare(&common.out, common.force)?;
    record(
        &common.out,
        "eval",
        argv,
        common.jobs,
        &EvalSettings {
            split,
            mode,
            sampler: &cfg,
        },
    )?;
    let preds: Vec<Mask> = if oracle {
        samples.iter().map(|s| s.mask.clone()).collect()
    } else if let Some(dir) = predictions {
        samples.iter().map(|s| find_prediction(dir, &s.id)).collect::<Result<_, _>>()?
    } else {
        let (model, schedule) = model
            .as_ref()
            .ok_or_else(|| usage("give --checkpoint, --predictions or --oracle"))?;
        let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
        let results = sample_parallel(model, &images, schedule, &cfg, common.jobs)?;
        let dir = common.out.join("masks");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (s, r) in samples.iter().zip(&results) {
            r.fused.save_png(&dir.join(format!("{}.png", s.id)))?;
        }
        results.into_iter().map(|r| r.fused).collect()
    };
    let report = MetricReport::evaluate(
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.id.as_str(), p, &s.mask)),
        EmptyConvention::One,
    )?;
    report.write_json(&common.out.join("metrics.json"))?;
    report.write_csv(&common.out.join("metrics.csv"))?;
    println!(
        "{} samples: mean dice {:.4}, mean iou {:.4}",
        report.count, report.mean_dice, report.mean_iou
    );
    Ok(())
}

pub fn fuse(
    common: &Common,
    paths: &[PathBuf],
    method: Option<&str>,
    prior: Option<f64>,
    argv: &[String],
) -> Result<(), CliError> {
    let mut settings: FuseSettings = config::read(common.config.as_deref())?;
    if let Some(m) = method {
        settings.method = serde_json::from_value(serde_json::Value::String(m.to_string()))
            .map_err(|_| usage(format!("unknown method {m:?}; use staple or mean-vote")))?;
    }
    if prior.is_some() {
        settings.prior = prior;
    }
    let masks: Vec<Mask> = paths.iter().map(|p| Mask::load_png(p)).collect::<Result<_, _>>()?;
    for (p, m) in paths.iter().zip(&masks).skip(1) {
        masks[0]
            .check_same_shape(m)
            .map_err(|e| CliError::Core(Error::Data(format!("{}: {e}", p.display()))))?;
    }
    let decisions: Vec<Vec<bool>> = masks.iter().map(|m| m.data().to_vec()).collect();
    let (h, w) = (masks[0].height(), masks[0].width());
    prepare(&common.out, common.force)?;
    record(&common.out, "fuse", argv, 1, &settings)?;
    let fused = match settings.method {
        FusionMethod::Staple => {
            let stack = match settings.prior {
                Some(p) => RaterStack::new(decisions, p),
                None => RaterStack::with_data_prior(decisions),
            };
            let stack = stack.map_err(|e| match e {
                Error::InvalidArgument(m) => CliError::Usage(m),
                other => CliError::Core(other),
            })?;
            let est = staple_fuse(&stack, settings.tol, settings.max_iters)?;
            let path = common.out.join("staple.json");
            let text = serde_json::to_string_pretty(&est).expect("estimate serializes");
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Mask::new(h, w, est.fused())?
        }
        FusionMethod::MeanVote => mean_vote(&masks)?,
    };
    fused.save_png(&common.out.join("fused.png"))?;
    println!(
        "fused {} masks, {} of {} pixels foreground",
        masks.len(),
        fused.count(),
        fused.len()
    );
    Ok(())
}

pub fn ablate(
    common: &Common,
    data: &Path,
    seeds: Option<Vec<u64>>,
    variants: Option<Vec<String>>,
    max_steps: Option<usize>,
    argv: &[String],
) -> Result<(), CliError> {
    let mut settings = config::read_ablate(common.config.as_deref())?;
    if let Some(s) = seeds {
        settings.seeds = s;
    }
    if let Some(first) = common.seed {
        settings.seeds = (0..settings.seeds.len() as u64).map(|i| first + i).collect();
    }
    if let Some(v) = variants {
        settings.variants = v;
    }
    if max_steps.is_some() {
        settings.train.max_steps = max_steps;
    }
    let manifest = Manifest::read(data)?;
    let train_cfg = settings.train.train_config(manifest.image_channels)?;
    let spec = AblationSpec {
        variants: settings.variants.iter().map(|n| config::variant(n)).collect::<Result<_, _>>()?,
        seeds: settings.seeds.clone(),
        eval: settings.train.eval_sampler(),
        train: train_cfg,
    };
    check(spec.validate())?;
    let size = Some(spec.train.model.image_size);
    let train_set = load_corpus(data, Split::Train, size)?;
    let test_set = load_corpus(data, Split::Test, size)?;
    prepare(&common.out, common.force)?;
    settings.train = settings.train.resolved(&spec.train.model);
    record(&common.out, "ablate", argv, common.jobs, &settings)?;
    let report = run_ablation(&spec, &train_set, &test_set, Some(&common.out), common.jobs)?;
    print!("{}", report.render());
    Ok(())
}
