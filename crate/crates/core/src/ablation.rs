//! Controlled architecture comparison: every variant trains from the same
//! seeds with the same batch order and is scored on the same test split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::network::SegDiffNet;
use crate::sampler::SamplerConfig;
use crate::scalar::Scalar;
use crate::synthdata::SegSample;
use crate::trainer::{evaluate, train, TrainConfig};

/// Parameter name prefix of the image encoder.
pub const IMAGE_ENCODER_PREFIX: &str = "encoder_image.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub use_dycond: bool,
    pub use_ffparser: bool,
}

impl Variant {
    pub fn new(name: &str, use_dycond: bool, use_ffparser: bool) -> Self {
        Self {
            name: name.to_string(),
            use_dycond,
            use_ffparser,
        }
    }

    /// `vanilla`, `dycond` and `full`.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new("vanilla", false, false),
            Self::new("dycond", true, false),
            Self::new("full", true, true),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Shared settings; `seed` and the two architecture switches are
    /// overridden per run.
    pub train: TrainConfig,
    pub eval: SamplerConfig,
}

impl AblationSpec {
    pub fn new(train: TrainConfig, eval: SamplerConfig) -> Self {
        Self {
            variants: Variant::defaults(),
            seeds: vec![0, 1, 2],
            train,
            eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.variants.len() >= 2, "need at least 2 variants, got {}", self.variants.len());
        ensure!(!self.seeds.is_empty(), "need at least one seed");
        for (i, v) in self.variants.iter().enumerate() {
            ensure!(
                !v.name.is_empty() && v.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
                "variant name {:?} must be non-empty and use only letters, digits, '-' or '_'",
                v.name
            );
            ensure!(
                self.variants[..i].iter().all(|u| u.name != v.name),
                "duplicate variant {}",
                v.name
            );
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        ensure!(seeds.len() == self.seeds.len(), "duplicate seeds");
        self.train.validate()?;
        self.eval.validate(&self.train.build_schedule()?)
    }

    /// Training config of one `(variant, seed)` run.
    pub fn run_config(&self, variant: &Variant, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        cfg.model = cfg.model.with_ablation(variant.use_dycond, variant.use_ffparser);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub dice: f64,
    pub iou: f64,
    pub final_loss: f64,
    pub train_seconds: f64,
    /// Hash of the image-encoder weights before the first update.
    pub image_encoder_init: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec: AblationSpec,
    pub runs: Vec<RunResult>,
    pub summary: Vec<VariantSummary>,
    /// Whether each seed gave every variant the same image-encoder start.
    pub shared_init: bool,
    /// Set when a run failed; `runs` then holds what finished.
    pub error: Option<String>,
}

/// Combined hash of every parameter whose name starts with `prefix`, in
/// name order.
pub fn params_hash<T: Scalar>(model: &SegDiffNet<T>, prefix: &str) -> String {
    let mut entries: Vec<_> = model
        .params()
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(prefix))
        .collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let mut h = Sha256::new();
    for e in entries {
        h.update(e.name.as_bytes());
        h.update([0]);
        h.update(T::to_le_bytes_vec(e.value.data()));
    }
    hex::encode(h.finalize())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationReport {
    fn build(spec: &AblationSpec, mut runs: Vec<RunResult>, error: Option<String>) -> Self {
        let order = |r: &RunResult| {
            let v = spec.variants.iter().position(|v| v.name == r.variant).unwrap_or(usize::MAX);
            let s = spec.seeds.iter().position(|&s| s == r.seed).unwrap_or(usize::MAX);
            (v, s)
        };
        runs.sort_by_key(order);
        let summary = spec
            .variants
            .iter()
            .filter_map(|v| {
                let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v.name).collect();
                if mine.is_empty() {
                    return None;
                }
                let (mean_dice, std_dice) = mean_std(&mine.iter().map(|r| r.dice).collect::<Vec<_>>());
                let (mean_iou, std_iou) = mean_std(&mine.iter().map(|r| r.iou).collect::<Vec<_>>());
                Some(VariantSummary {
                    variant: v.name.clone(),
                    mean_dice,
                    std_dice,
                    mean_iou,
                    std_iou,
                    runs: mine.len(),
                })
            })
            .collect();
        let shared_init = spec.seeds.iter().all(|&s| {
            let mut hashes = runs.iter().filter(|r| r.seed == s).map(|r| &r.image_encoder_init);
            match hashes.next() {
                Some(first) => hashes.all(|h| h == first),
                None => true,
            }
        });
        Self {
            spec: spec.clone(),
            runs,
            summary,
            shared_init,
            error,
        }
    }

    pub fn summary_of(&self, variant: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    /// Mean Dice of the last variant minus that of the first.
    pub fn gain(&self) -> Option<f64> {
        let first = self.summary_of(&self.spec.variants.first()?.name)?;
        let last = self.summary_of(&self.spec.variants.last()?.name)?;
        Some(last.mean_dice - first.mean_dice)
    }

    /// One row per variant with per-seed Dice and mean ± std, then a `gain`
    /// row holding the last-minus-first difference of the means.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        let mut header = vec!["variant".to_string(), "use_dycond".into(), "use_ffparser".into()];
        header.extend(self.spec.seeds.iter().map(|s| format!("dice_seed{s}")));
        header.extend(["dice_mean", "dice_std", "iou_mean", "iou_std"].map(String::from));
        w.write_record(&header).map_err(wrap)?;
        for v in &self.spec.variants {
            let mut row = vec![v.name.clone(), v.use_dycond.to_string(), v.use_ffparser.to_string()];
            for &s in &self.spec.seeds {
                let r = self.runs.iter().find(|r| r.variant == v.name && r.seed == s);
                row.push(r.map(|r| r.dice.to_string()).unwrap_or_default());
            }
            match self.summary_of(&v.name) {
                Some(m) => row.extend([m.mean_dice, m.std_dice, m.mean_iou, m.std_iou].map(|x| x.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
            w.write_record(&row).map_err(wrap)?;
        }
        let mut row = vec!["gain".to_string(), String::new(), String::new()];
        row.extend(self.spec.seeds.iter().map(|_| String::new()));
        row.push(self.gain().map(|g| g.to_string()).unwrap_or_default());
        row.extend(std::iter::repeat_n(String::new(), 3));
        w.write_record(&row).map_err(wrap)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Text table with one line per variant, in percent.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "x" } else { " " };
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:^7} {:^9} {:>15} {:>15}", "variant", "dycond", "ffparser", "Dice (%)", "IoU (%)");
        for v in &self.spec.variants {
            let cells = match self.summary_of(&v.name) {
                Some(m) => (
                    format!("{:.1} ± {:.1}", 100.0 * m.mean_dice, 100.0 * m.std_dice),
                    format!("{:.1} ± {:.1}", 100.0 * m.mean_iou, 100.0 * m.std_iou),
                ),
                None => ("-".to_string(), "-".to_string()),
            };
            let _ = writeln!(
                s,
                "{:<12} {:^7} {:^9} {:>15} {:>15}",
                v.name,
                mark(v.use_dycond),
                mark(v.use_ffparser),
                cells.0,
                cells.1
            );
        }
        let _ = writeln!(s, "seeds: {:?}", self.spec.seeds);
        if let Some(e) = &self.error {
            let _ = writeln!(s, "incomplete: {e}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.write_csv(&dir.join("ablation.csv"))?;
        let runs = dir.join("runs.csv");
        let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", runs.display()));
        let mut w = csv::Writer::from_path(&runs).map_err(wrap)?;
        for r in &self.runs {
            w.serialize(r).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(&runs, e))?;
        let json = dir.join("ablation.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let table = dir.join("ablation.txt");
        fs::write(&table, self.render()).map_err(|e| Error::io(&table, e))
    }
}

fn run_one(
    spec: &AblationSpec,
    variant: &Variant,
    seed: u64,
    train_set: &[SegSample],
    test_set: &[SegSample],
    out: Option<&Path>,
) -> Result<RunResult> {
    let cfg = spec.run_config(variant, seed);
    let init = SegDiffNet::<f32>::new(cfg.model.clone(), seed)?;
    let image_encoder_init = params_hash(&init, IMAGE_ENCODER_PREFIX);
    drop(init);
    let dir = out.map(|d| d.join(format!("{}-seed{seed}", variant.name)));
    let started = Instant::now();
    let outcome = train(&cfg, train_set, &[], dir.as_deref())?;
    let train_seconds = started.elapsed().as_secs_f64();
    let schedule = cfg.build_schedule()?;
    let eval = evaluate(&outcome.model, &schedule, test_set, &spec.eval)?;
    if let Some(d) = &dir {
        eval.report.write_json(&d.join("test_metrics.json"))?;
    }
    log::info!("{} seed {seed}: test dice {:.4}", variant.name, eval.report.mean_dice);
    Ok(RunResult {
        variant: variant.name.clone(),
        seed,
        dice: eval.report.mean_dice,
        iou: eval.report.mean_iou,
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.loss),
        train_seconds,
        image_encoder_init,
    })
}

/// Trains and scores every `(variant, seed)` pair using up to `jobs`
/// threads. With `out` set, each run gets its own subdirectory and the
/// report files are written even when a run fails.
pub fn run_ablation(
    spec: &AblationSpec,
    train_set: &[SegSample],
    test_set: &[SegSample],
    out: Option<&Path>,
    jobs: usize,
) -> Result<AblationReport> {
    spec.validate()?;
    ensure!(!test_set.is_empty(), "test split is empty");
    if let Some(d) = out {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let pairs: Vec<(&Variant, u64)> = spec
        .seeds
        .iter()
        .flat_map(|&s| spec.variants.iter().map(move |v| (v, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, pairs.len()) {
            scope.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(variant, seed)) = pairs.get(i) else { break };
                match run_one(spec, variant, seed, train_set, test_set, out) {
                    Ok(r) => results.lock().expect("lock").push(r),
                    Err(e) => {
                        let e = prefix_error(e, &format!("{} seed {seed}", variant.name));
                        failure.lock().expect("lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    let runs = results.into_inner().expect("lock");
    let failure = failure.into_inner().expect("lock");
    let report = AblationReport::build(spec, runs, failure.as_ref().map(|e| e.to_string()));
    if let Some(d) = out {
        report.write(d)?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn prefix_error(e: Error, context: &str) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{context}: {m}")),
        Error::Data(m) => Error::Data(format!("{context}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{context}: {m}")),
        other => other,
    }
}
