//! Dataset ingestion, batch construction and the alternating training loop.
//!
//! Every random choice in a step (which image, where to crop, the noise
//! field) is drawn from a stream seeded by `derive_seed(seed, step, item)`,
//! so the only state carried between steps is the step counter, the
//! parameters and the optimizer moments. Per-item work runs on a rayon pool
//! and is reduced in item order, which makes results independent of the
//! thread count.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{
    read_tensor_file, write_tensor_file, Manifest, TrainMeta, OPTIMIZER_PREFIX,
};
use crate::config::{MtvMask, TrainConfig};
use crate::distributions::{
    add_noise, derive_seed, make_input, step_kind_schedule, NoiseSpec, PolicyKind, TrainStepKind,
};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureMaps, CONTENT_TAP};
use crate::guided_filter::{smooth, GuidedFilterParams};
use crate::image::{load_image, resize, total_variation, Image, TextureMetricReport};
use crate::losses::{
    assemble_loss, branch_style_loss_grad, content_edge_mask, content_loss_grad,
    masked_total_variation_grad, LossReport, LossTerms, StyleTargets,
};
use crate::model::{Branch, Generator, Gradients, ModelConfig};
use crate::nn::Tensor;
use crate::optim::AdamState;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
/// Salt separating crop sampling from the noise stream of the same item.
const CROP_SALT: u64 = 0xC20F_5A17;
/// Parameters beyond this magnitude mean the run has diverged even if
/// every value is still finite.
const DIVERGENCE_LIMIT: f64 = 1e5;

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name. Files that fail
/// to decode are skipped with a warning.
pub fn scan_dataset(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut candidates: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    candidates.sort();
    let mut paths = Vec::with_capacity(candidates.len());
    for p in candidates {
        match load_image(&p) {
            Ok(_) => paths.push(p),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no decodable images in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

/// Loads every decodable image in `dir` together with its file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut out = Vec::new();
    for p in scan_dataset(dir)? {
        match load_image(&p) {
            Ok(img) => {
                let name = p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                out.push((name, img));
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!(
            "no decodable images in {}",
            dir.display()
        )));
    }
    Ok(out)
}

/// Resizes so the shorter side equals `side`, keeping the aspect ratio.
pub fn resize_shorter_side(img: &Image, side: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let short = h.min(w);
    if short == side {
        return Ok(img.clone());
    }
    let scale = side as f64 / short as f64;
    let nh = ((h as f64 * scale).round() as usize).max(side);
    let nw = ((w as f64 * scale).round() as usize).max(side);
    resize(img, nh, nw)
}

fn center_crop(img: &Image, side: usize) -> Result<Image> {
    let img = resize_shorter_side(img, side)?;
    img.crop(
        (img.height() - side) / 2,
        (img.width() - side) / 2,
        side,
        side,
    )
}

/// Training images, decoded once and pre-resized to the crop scale.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub paths: Vec<PathBuf>,
    images: Vec<Image>,
    crop: usize,
}

impl Dataset {
    pub fn load(dir: &Path, crop: usize) -> Result<Self> {
        let mut paths = Vec::new();
        let mut images = Vec::new();
        for p in scan_dataset(dir)? {
            match load_image(&p) {
                Ok(img) => {
                    images.push(resize_shorter_side(&img, crop)?);
                    paths.push(p);
                }
                Err(e) => log::warn!("skipping {}: {e}", p.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "no decodable images in {}",
                dir.display()
            )));
        }
        Ok(Dataset {
            paths,
            images,
            crop,
        })
    }

    pub fn from_images(images: Vec<Image>, crop: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("empty image list".into()));
        }
        let images = images
            .iter()
            .map(|i| resize_shorter_side(i, crop))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            paths: Vec::new(),
            images,
            crop,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Random crops for one step, sampled with replacement. Identical for
    /// the same `(seed, step)`.
    pub fn make_batch(&self, seed: u64, step: u64, batch_size: usize) -> Result<Vec<Image>> {
        (0..batch_size as u64)
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ CROP_SALT, step, b));
                let img = &self.images[rng.random_range(0..self.images.len())];
                let top = rng.random_range(0..=img.height() - self.crop);
                let left = rng.random_range(0..=img.width() - self.crop);
                img.crop(top, left, self.crop, self.crop)
            })
            .collect()
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub generator: Generator,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(model: ModelConfig, seed: u64) -> Result<Self> {
        Ok(TrainState {
            step: 0,
            generator: Generator::init(model, seed)?,
            adam: AdamState::default(),
        })
    }

    /// Writes a checkpoint that doubles as an inference checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            model: Some(self.generator.config().clone()),
            train: Some(TrainMeta {
                step: self.step,
                optimizer_steps: self.adam.steps.clone(),
            }),
        };
        let mut tensors = self.generator.params().clone();
        tensors.extend(self.adam.to_tensors(OPTIMIZER_PREFIX));
        write_tensor_file(path, &manifest, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, mut tensors) = read_tensor_file(path)?;
        let decode = |reason: &str| Error::Decode {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let config = manifest
            .model
            .ok_or_else(|| decode("no model configuration"))?;
        let meta = manifest
            .train
            .ok_or_else(|| decode("not a training checkpoint"))?;
        let adam = AdamState::from_tensors(OPTIMIZER_PREFIX, &tensors, meta.optimizer_steps);
        tensors.retain(|name, _| !name.starts_with(OPTIMIZER_PREFIX));
        Ok(TrainState {
            step: meta.step,
            generator: Generator::new(config, tensors)?,
            adam,
        })
    }
}

/// The fixed parts of a run: configuration, data, loss network and the
/// cached style targets.
pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    extractor: FeatureExtractor,
    style: StyleTargets,
    pool: rayon::ThreadPool,
}

struct ItemResult {
    terms: LossTerms,
    grads: Gradients,
}

impl Trainer {
    /// Loads the dataset and style image named in `config`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = Dataset::load(&config.content_dir, config.image_size)?;
        let style = load_image(&config.style_image)?;
        Self::with_data(config, dataset, &style)
    }

    pub fn with_data(config: TrainConfig, dataset: Dataset, style_image: &Image) -> Result<Self> {
        config.validate()?;
        let extractor = FeatureExtractor::from_backend(&config.features)?;
        let style_crop = center_crop(&style_image.to_rgb(), config.image_size)?;
        let style =
            StyleTargets::from_features(&extractor.extract(&Tensor::from_image(&style_crop))?);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Trainer {
            config,
            dataset,
            extractor,
            style,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        TrainState::new(self.config.model.clone(), self.config.seed)
    }

    /// The regime of step `step`, or `None` for the fixed-input policies,
    /// which always use the full objective.
    pub fn step_kind(&self, step: u64) -> Result<Option<TrainStepKind>> {
        let policy = &self.config.input_policy;
        match policy.variant {
            PolicyKind::Idd => Ok(Some(step_kind_schedule(step, policy.idd_ratio)?)),
            _ => Ok(None),
        }
    }

    /// Feature-space loss terms for one generator output and the gradient
    /// w.r.t. that output.
    fn perceptual(
        &self,
        out: &Tensor,
        content: &FeatureMaps,
        branch: Branch,
    ) -> Result<(f64, f64, Tensor)> {
        let w = &self.config.loss_weights;
        let style_weight = match branch {
            Branch::Color => w.style_color,
            Branch::Texture => w.style_texture,
        };
        let trace = self.extractor.trace(out)?;
        let (style, mut d_taps) = branch_style_loss_grad(&trace.features, &self.style, branch)?;
        for d in d_taps.iter_mut().flatten() {
            d.data.iter_mut().for_each(|v| *v *= style_weight);
        }
        let tap = self
            .extractor
            .taps()
            .iter()
            .position(|t| *t == CONTENT_TAP)
            .expect("content tap exists");
        let (content_term, mut d_content) =
            content_loss_grad(trace.features.content(), content.content())?;
        d_content.data.iter_mut().for_each(|v| *v *= w.content);
        match &mut d_taps[tap] {
            Some(d) => d.add_assign(&d_content),
            slot => *slot = Some(d_content),
        }
        Ok((
            content_term,
            style,
            self.extractor.backward(&trace, &d_taps),
        ))
    }

    fn item(
        &self,
        generator: &Generator,
        content: &Image,
        kind: Option<TrainStepKind>,
        noise_seed: u64,
    ) -> Result<ItemResult> {
        let input = make_input(content, &self.config.input_policy, kind, noise_seed)?;
        let removal = kind == Some(TrainStepKind::TextureRemoval);
        let trace = generator.forward_trace(&Tensor::from_image(&input), !removal)?;
        let mask = match self.config.mtv_mask {
            MtvMask::None => None,
            MtvMask::ContentEdges => Some(content_edge_mask(content)?),
        };
        let (mtv, mut d_color) = masked_total_variation_grad(trace.color_output(), mask.as_ref())?;
        d_color
            .data
            .iter_mut()
            .for_each(|v| *v *= self.config.loss_weights.mtv);
        let mut terms = LossTerms {
            mtv,
            ..LossTerms::default()
        };
        let mut d_texture = None;
        if !removal {
            let content_features = self.extractor.extract(&Tensor::from_image(content))?;
            let (c1, s1, d1) =
                self.perceptual(trace.color_output(), &content_features, Branch::Color)?;
            d_color.add_assign(&d1);
            let texture_out = trace.texture_output().expect("texture branch ran");
            let (c2, s2, d2) = self.perceptual(texture_out, &content_features, Branch::Texture)?;
            terms.content = c1 + c2;
            terms.style_color = s1;
            terms.style_texture = s2;
            d_texture = Some(d2);
        }
        let grads = generator.backward(&trace, Some(&d_color), d_texture.as_ref());
        Ok(ItemResult { terms, grads })
    }

    /// One optimizer step on `batch`. On texture-removal steps only the
    /// stem and color branch receive gradients, so texture parameters are
    /// left bit-identical.
    pub fn train_step(&self, state: &mut TrainState, batch: &[Image]) -> Result<LossReport> {
        self.train_step_with_lr(state, batch, self.config.learning_rate)
    }

    /// As [`Trainer::train_step`] with an explicit learning rate. Zero is
    /// allowed here and leaves the parameters untouched.
    pub fn train_step_with_lr(
        &self,
        state: &mut TrainState,
        batch: &[Image],
        lr: f64,
    ) -> Result<LossReport> {
        let step = state.step;
        let mut run = || -> Result<LossReport> {
            if batch.is_empty() {
                return Err(Error::Argument("empty batch".into()));
            }
            let kind = self.step_kind(step)?;
            let generator = &state.generator;
            let results: Vec<Result<ItemResult>> = self.pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(b, content)| {
                        let seed = derive_seed(self.config.seed, step, b as u64);
                        self.item(generator, content, kind, seed)
                    })
                    .collect()
            });
            let n = batch.len() as f64;
            let mut terms = LossTerms::default();
            let mut grads = Gradients::new();
            for r in results {
                let r = r?;
                terms.content += r.terms.content / n;
                terms.style_color += r.terms.style_color / n;
                terms.style_texture += r.terms.style_texture / n;
                terms.mtv += r.terms.mtv / n;
                for (name, g) in r.grads {
                    let acc = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v / n);
                }
            }
            let report = assemble_loss(kind, &self.config.loss_weights, &terms)?;
            if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::numeric(format!("non-finite gradient for {name}")));
            }
            state
                .adam
                .update(state.generator.params_mut(), &grads, lr)?;
            for (name, p) in state.generator.params() {
                if p.data
                    .iter()
                    .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
                {
                    return Err(Error::numeric(format!(
                        "parameter {name} diverged (|value| > {DIVERGENCE_LIMIT:e} or non-finite)"
                    )));
                }
            }
            Ok(report)
        };
        let report = run().map_err(|e| e.at_step(step + 1))?;
        state.step += 1;
        Ok(report)
    }

    pub fn batch(&self, step: u64) -> Result<Vec<Image>> {
        self.dataset
            .make_batch(self.config.seed, step, self.config.batch_size)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub kind: &'static str,
    pub total: f64,
    pub content: f64,
    pub style_color: f64,
    pub style_texture: f64,
    pub mtv: f64,
    pub wall_ms: u64,
}

impl MetricsRecord {
    fn new(step: u64, report: &LossReport, wall_ms: u64) -> Self {
        MetricsRecord {
            step,
            kind: report.step_kind.map_or("full", TrainStepKind::as_str),
            total: report.total,
            content: report.content,
            style_color: report.style_color,
            style_texture: report.style_texture,
            mtv: report.mtv,
            wall_ms,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub last_report: Option<LossReport>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:06}.ckpt")
}

/// Drops log records past `step` so a resumed run does not duplicate them.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let Ok(file) = fs::File::open(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let record_step = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
        if record_step.is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs training from scratch or from a training checkpoint, writing
/// periodic checkpoints, `final.ckpt` and `metrics.jsonl` into the output
/// directory.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config.clone())?;
    let state = match resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            if state.generator.config() != &config.model {
                return Err(Error::Config(
                    "resume checkpoint has a different model configuration".into(),
                ));
            }
            state
        }
        None => trainer.initial_state()?,
    };
    run_training(&trainer, state)
}

pub fn run_training(trainer: &Trainer, mut state: TrainState) -> Result<TrainOutcome> {
    let config = trainer.config();
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_log = out.join(METRICS_FILE);
    if state.step == 0 {
        fs::write(&metrics_log, "").map_err(|e| Error::io(&metrics_log, e))?;
    } else {
        truncate_metrics(&metrics_log, state.step)?;
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_log)
        .map_err(|e| Error::io(&metrics_log, e))?;
    let start = Instant::now();
    let mut last_report = None;
    while state.step < config.total_steps {
        let batch = trainer.batch(state.step)?;
        let report = trainer.train_step(&mut state, &batch)?;
        let step = state.step;
        if step.is_multiple_of(config.log_every) {
            let record = MetricsRecord::new(step, &report, start.elapsed().as_millis() as u64);
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&metrics_log, e))?;
            log::info!(
                "step {step}/{} {} total {:.5} mtv {:.5}",
                config.total_steps,
                record.kind,
                report.total,
                report.mtv
            );
        }
        if config.checkpoint_every > 0
            && step.is_multiple_of(config.checkpoint_every)
            && step < config.total_steps
        {
            state.save(&out.join(checkpoint_name(step)))?;
        }
        last_report = Some(report);
    }
    log.flush().map_err(|e| Error::io(&metrics_log, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    state.save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics_log,
        last_report,
    })
}

/// Color-branch texture energy with and without noise on the smoothed input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DifferentiationReport {
    pub smooth: TextureMetricReport,
    pub noisy: TextureMetricReport,
    /// `mean noisy TV / mean smooth TV`; 1 when both are zero.
    pub ratio: f64,
}

impl DifferentiationReport {
    /// Line-oriented report: one line per image and condition, then the two
    /// means and the ratio.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, v) in &self.smooth.per_image {
            s.push_str(&format!("smooth_tv {name} {v:.8}\n"));
        }
        for (name, v) in &self.noisy.per_image {
            s.push_str(&format!("noisy_tv {name} {v:.8}\n"));
        }
        s.push_str(&format!("mean_smooth_tv {:.8}\n", self.smooth.tv_energy));
        s.push_str(&format!("mean_noisy_tv {:.8}\n", self.noisy.tv_energy));
        s.push_str(&format!("ratio {:.6}\n", self.ratio));
        s
    }
}

/// Compares color-branch TV under smooth input against smooth input plus
/// noise. `filter` of `None` picks parameters from each image's size.
pub fn evaluate_texture_differentiation(
    generator: &Generator,
    images: &[(String, Image)],
    filter: Option<GuidedFilterParams>,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<DifferentiationReport> {
    if images.is_empty() {
        return Err(Error::Dataset("no evaluation images".into()));
    }
    let mut smooth_tv = Vec::with_capacity(images.len());
    let mut noisy_tv = Vec::with_capacity(images.len());
    for (i, (name, img)) in images.iter().enumerate() {
        let img = img.to_rgb();
        let params =
            filter.unwrap_or_else(|| GuidedFilterParams::for_size(img.height(), img.width()));
        let smoothed = smooth(&img, &params)?;
        let noisy = add_noise(&smoothed, noise, derive_seed(seed, 0, i as u64))?;
        smooth_tv.push((
            name.clone(),
            total_variation(&generator.forward_color(&smoothed)?)?,
        ));
        noisy_tv.push((
            name.clone(),
            total_variation(&generator.forward_color(&noisy)?)?,
        ));
    }
    let smooth = TextureMetricReport::from_values(smooth_tv);
    let noisy = TextureMetricReport::from_values(noisy_tv);
    let ratio = if smooth.tv_energy == noisy.tv_energy {
        1.0
    } else {
        noisy.tv_energy / smooth.tv_energy
    };
    Ok(DifferentiationReport {
        smooth,
        noisy,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_image;
    use crate::synth;

    fn tiny_config(dir: &Path) -> TrainConfig {
        TrainConfig {
            style_image: dir.join("style.png"),
            content_dir: dir.join("content"),
            output_dir: dir.join("run"),
            image_size: 24,
            batch_size: 2,
            total_steps: 4,
            log_every: 1,
            checkpoint_every: 2,
            model: ModelConfig {
                stem_channels: 4,
                channel_width: 6,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_trainer(variant: PolicyKind) -> Trainer {
        let images: Vec<Image> = (0..3)
            .map(|i| synth::content_image(30, 28, i).unwrap())
            .collect();
        let mut config = tiny_config(Path::new("/unused"));
        config.input_policy.variant = variant;
        let style = synth::style_image(40, 40, 1).unwrap();
        Trainer::with_data(
            config.clone(),
            Dataset::from_images(images, config.image_size).unwrap(),
            &style,
        )
        .unwrap()
    }

    #[test]
    fn scan_orders_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(4, 4, 3, 0.5).unwrap();
        save_image(&img, dir.path().join("b.png")).unwrap();
        fs::copy(dir.path().join("b.png"), dir.path().join("a.png")).unwrap();
        fs::write(dir.path().join("c.png"), b"not an image").unwrap();
        fs::write(dir.path().join("notes.txt"), b"x").unwrap();
        let paths = scan_dataset(dir.path()).unwrap();
        let names: Vec<_> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap())
            .collect();
        assert_eq!(names, ["a.png", "b.png"]);
    }

    #[test]
    fn scan_empty_is_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_dataset(dir.path()), Err(Error::Dataset(_))));
        assert!(matches!(
            scan_dataset(&dir.path().join("missing")),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn batches_are_deterministic_and_upscale_small_images() {
        let small = synth::content_image(10, 12, 0).unwrap();
        let ds = Dataset::from_images(vec![small], 20).unwrap();
        let a = ds.make_batch(7, 3, 2).unwrap();
        assert_eq!(a, ds.make_batch(7, 3, 2).unwrap());
        assert!(a.iter().all(|i| i.height() == 20 && i.width() == 20));
        // one 20x24 image: two crops at different offsets
        let many = ds.make_batch(7, 0, 16).unwrap();
        assert!(many.iter().any(|c| c != &many[0]));
    }

    #[test]
    fn removal_step_freezes_texture_and_zeroes_terms() {
        let trainer = tiny_trainer(PolicyKind::Idd);
        let mut state = trainer.initial_state().unwrap();
        let batch = trainer.batch(0).unwrap();
        let r0 = trainer.train_step(&mut state, &batch).unwrap();
        assert_eq!(r0.step_kind, Some(TrainStepKind::TextureModeling));
        assert!(r0.style_color > 0.0 && r0.content > 0.0);
        let before = state.generator.params().clone();
        let r1 = trainer
            .train_step(&mut state, &trainer.batch(1).unwrap())
            .unwrap();
        assert_eq!(r1.step_kind, Some(TrainStepKind::TextureRemoval));
        assert_eq!(
            (r1.content, r1.style_color, r1.style_texture),
            (0.0, 0.0, 0.0)
        );
        for (name, p) in state.generator.params() {
            if name.starts_with("texture.") {
                assert_eq!(p.data, before[name].data, "{name}");
            } else {
                assert_ne!(p.data, before[name].data, "{name}");
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let run = |threads: usize| {
            let images: Vec<Image> = (0..3)
                .map(|i| synth::content_image(24, 24, i).unwrap())
                .collect();
            let mut config = tiny_config(Path::new("/unused"));
            config.threads = threads;
            config.batch_size = 3;
            let style = synth::style_image(24, 24, 1).unwrap();
            let t = Trainer::with_data(config, Dataset::from_images(images, 24).unwrap(), &style)
                .unwrap();
            let mut s = t.initial_state().unwrap();
            for _ in 0..2 {
                let b = t.batch(s.step).unwrap();
                t.train_step(&mut s, &b).unwrap();
            }
            s.generator.params().clone()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let trainer = tiny_trainer(PolicyKind::Idd);
        let mut state = trainer.initial_state().unwrap();
        trainer
            .train_step(&mut state, &trainer.batch(0).unwrap())
            .unwrap();
        let path = dir.path().join("s.ckpt");
        state.save(&path).unwrap();
        let back = TrainState::load(&path).unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.adam, state.adam);
        assert_eq!(back.generator.params(), state.generator.params());
    }

    #[test]
    fn diverging_learning_rate_is_numeric_error_with_step() {
        let images: Vec<Image> = (0..2)
            .map(|i| synth::content_image(24, 24, i).unwrap())
            .collect();
        let mut config = tiny_config(Path::new("/unused"));
        config.learning_rate = 1e6;
        let style = synth::style_image(24, 24, 1).unwrap();
        let t =
            Trainer::with_data(config, Dataset::from_images(images, 24).unwrap(), &style).unwrap();
        let mut s = t.initial_state().unwrap();
        let err = t.train_step(&mut s, &t.batch(0).unwrap()).unwrap_err();
        assert!(
            matches!(err, Error::Numeric { step: Some(1), .. }),
            "{err:?}"
        );
    }

    #[test]
    fn zero_sigma_gives_unit_ratio() {
        let g = Generator::init(ModelConfig::default(), 1).unwrap();
        let images = vec![("a".to_string(), synth::content_image(20, 20, 0).unwrap())];
        let noise = NoiseSpec {
            mean: 0.0,
            sigma: 0.0,
        };
        let r = evaluate_texture_differentiation(&g, &images, None, &noise, 0).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.to_text().lines().count(), 2 * images.len() + 3);
        assert!(evaluate_texture_differentiation(&g, &[], None, &noise, 0).is_err());
    }

    #[test]
    fn full_run_writes_checkpoints_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth::write_demo_data(dir.path(), 2, 0, 24, 3).unwrap();
        let mut config = tiny_config(dir.path());
        config.style_image = data.style_image;
        config.total_steps = 5;
        config.log_every = 2;
        let outcome = train(&config, None).unwrap();
        assert!(outcome.final_checkpoint.exists());
        assert!(config.output_dir.join(checkpoint_name(2)).exists());
        assert!(config.output_dir.join(checkpoint_name(4)).exists());
        let log = fs::read_to_string(&outcome.metrics_log).unwrap();
        assert_eq!(log.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        for key in [
            "step",
            "kind",
            "total",
            "content",
            "style_color",
            "style_texture",
            "mtv",
            "wall_ms",
        ] {
            assert!(first.get(key).is_some(), "{key}");
        }
        let mut zero = config.clone();
        zero.total_steps = 0;
        assert!(matches!(train(&zero, None), Err(Error::Config(_))));
    }
}
