//! Image fitting, Bayer-only fitting, conditioned training and evaluation.

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, WindowQuery};
use crate::baselines::Baseline;
use crate::checkpoint::{self, CheckpointMeta};
use crate::dataset::{image_id, DatasetManifest};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::{coord_grid, load_png, mosaic, prepare_eval_image, random_crop_offsets, BayerImage, RgbImage};
use crate::inference::{nerd_demosaic, render, DEFAULT_CHUNK};
use crate::metrics::{csv_err, psnr, psnr_from_mse, MetricReport};
use crate::model::{Model, ModelConfig, Optimizer};
use crate::optim::AdamConfig;
use crate::tensor::Tensor;

/// Conditioned-training hyperparameters. Defaults are the full-scale schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub iterations_per_epoch: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Pixels queried per patch per step; `None` queries every pixel.
    pub coord_subsample: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 0.95,
            iterations_per_epoch: 10_000,
            batch_size: 5,
            patch_size: 200,
            epochs: 1,
            seed: 0,
            coord_subsample: None,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning rate and decay must be positive");
        }
        if self.iterations_per_epoch == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("iterations per epoch, batch size and epochs must be positive");
        }
        if self.patch_size < 2 || self.patch_size % 2 != 0 {
            return bad("patch size must be even and at least 2");
        }
        if let Some(k) = self.coord_subsample {
            if k == 0 || k > self.patch_size * self.patch_size {
                return Err(Error::Config(format!("coord subsample {k} outside 1..={}", self.patch_size * self.patch_size)));
            }
        }
        Ok(())
    }

    pub fn queries_per_step(&self) -> usize {
        self.batch_size * self.coord_subsample.unwrap_or(self.patch_size * self.patch_size)
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { learning_rate: lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// Step-decayed learning rate at the start of `epoch` (0-based).
pub fn lr_at_epoch(config: &TrainConfig, epoch: u64) -> f64 {
    config.learning_rate * config.lr_decay.powi(epoch as i32)
}

/// Settings for single-image fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub seed: u64,
    /// A trace point is recorded every `log_interval` iterations.
    pub log_interval: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { iterations: 1000, learning_rate: 1e-4, seed: 0, log_interval: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub iteration: u64,
    pub loss: f64,
    /// PSNR implied by the training loss at this iteration.
    pub psnr_db: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub trace: Vec<TracePoint>,
    /// PSNR of the final clamped reconstruction against the target.
    pub final_psnr: f64,
    pub reconstruction: RgbImage,
}

pub fn trace_csv(trace: &[TracePoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "loss", "psnr_db"]).map_err(csv_err)?;
    for t in trace {
        w.write_record([t.iteration.to_string(), t.loss.to_string(), t.psnr_db.to_string()]).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn training_error(iteration: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training { iteration, message: format!("non-finite value in {op}") },
        Error::Training { message, .. } => Error::Training { iteration, message },
        other => other,
    }
}

fn all_pixel_coords(h: usize, w: usize) -> Result<Tensor<f32>> {
    let grid = coord_grid(h, w)?;
    Tensor::new([h * w, 2], grid.coords().iter().flatten().copied().collect())
}

/// Runs `iterations` full-batch Adam steps of `loss_fn` on an unconditioned
/// model and records the loss trace.
fn fit_loop(
    model: &mut Model,
    cfg: &FitConfig,
    coords: &Tensor<f32>,
    mut loss_fn: impl FnMut(&mut Tape<f32>, crate::autodiff::Var) -> Result<crate::autodiff::Var>,
) -> Result<Vec<TracePoint>> {
    if cfg.iterations == 0 || cfg.log_interval == 0 {
        return Err(Error::Config("iterations and log interval must be positive".into()));
    }
    let mut opt = Optimizer::new(&model.params, AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
    let mut trace = Vec::new();
    for it in 1..=cfg.iterations {
        let mut step = || -> Result<f64> {
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let y = model.query(&mut tape, &vars, coords.clone(), None)?;
            let loss = loss_fn(&mut tape, y)?;
            let value = tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss)?;
            opt.step(&mut model.params, &vars, &grads)?;
            Ok(value)
        };
        let loss = step().map_err(|e| training_error(it, e))?;
        if it % cfg.log_interval == 0 {
            trace.push(TracePoint { iteration: it, loss, psnr_db: psnr_from_mse(loss) });
        }
    }
    Ok(trace)
}

fn check_unconditioned(config: &ModelConfig) -> Result<()> {
    if config.variant.is_conditioned() {
        return Err(Error::Config(format!("variant {} needs an encoder and cannot fit a single image", config.variant)));
    }
    Ok(())
}

/// Fits a coordinate network to every pixel of `img` with an MSE loss.
pub fn fit_image(img: &RgbImage, config: ModelConfig, cfg: &FitConfig) -> Result<FitOutcome> {
    check_unconditioned(&config)?;
    let (h, w) = (img.height(), img.width());
    let mut model = Model::new(config, cfg.seed)?;
    let coords = all_pixel_coords(h, w)?;
    let target: Vec<f32> = (0..h * w).flat_map(|p| img.pixel(p / w, p % w)).collect();
    let target = Tensor::new([h * w, 3], target)?;
    let trace = fit_loop(&mut model, cfg, &coords, |tape, y| {
        let t = tape.constant(target.clone());
        tape.mse_loss(y, t)
    })?;
    let reconstruction = render(&model, h, w, DEFAULT_CHUNK)?;
    let final_psnr = psnr(&reconstruction, img)?;
    Ok(FitOutcome { model, trace, final_psnr, reconstruction })
}

/// Fits a coordinate network to the observed samples of `bayer` only: each
/// pixel contributes the one channel its filter records.
pub fn fit_bayer_only(bayer: &BayerImage, config: ModelConfig, cfg: &FitConfig) -> Result<FitOutcome> {
    check_unconditioned(&config)?;
    let (h, w) = (bayer.height(), bayer.width());
    let mut model = Model::new(config, cfg.seed)?;
    let coords = all_pixel_coords(h, w)?;
    let channels: Vec<usize> = (0..h * w).map(|p| bayer.color_at(p / w, p % w).channel()).collect();
    let target = Tensor::new([h * w], bayer.data().to_vec())?;
    let trace = fit_loop(&mut model, cfg, &coords, |tape, y| {
        let picked = tape.pick(y, channels.clone())?;
        let t = tape.constant(target.clone());
        tape.mse_loss(picked, t)
    })?;
    let reconstruction = render(&model, h, w, DEFAULT_CHUNK)?;
    let observed = mosaic(&reconstruction)?;
    let mse = observed.data().iter().zip(bayer.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / (h * w) as f64;
    Ok(FitOutcome { model, trace, final_psnr: psnr_from_mse(mse), reconstruction })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub epoch: u64,
    pub learning_rate: f64,
    pub loss: f64,
}

pub fn loss_log_csv(rows: &[LossRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "epoch", "learning_rate", "loss"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.step.to_string(), r.epoch.to_string(), r.learning_rate.to_string(), r.loss.to_string()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.nerd"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.nerd")
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub loss_log: Vec<LossRow>,
}

/// One prepared training batch.
struct Batch {
    bayer: Tensor<f32>,
    queries: Vec<WindowQuery>,
    coords: Tensor<f32>,
    target: Tensor<f32>,
}

fn sample_batch(images: &[RgbImage], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let p = cfg.patch_size;
    let grid = coord_grid(p, p)?;
    let mut bayer = Vec::with_capacity(cfg.batch_size * p * p);
    let mut queries = Vec::with_capacity(cfg.queries_per_step());
    let mut coords = Vec::with_capacity(2 * cfg.queries_per_step());
    let mut target = Vec::with_capacity(3 * cfg.queries_per_step());
    for item in 0..cfg.batch_size {
        let img = &images[rng.gen_range(0..images.len())];
        let (top, left) = random_crop_offsets(img.height(), img.width(), p, rng)?;
        let patch = img.crop(top, left, p, p)?;
        bayer.extend_from_slice(mosaic(&patch)?.data());
        let pixels: Vec<usize> = match cfg.coord_subsample {
            Some(k) => {
                let mut s = sample(rng, p * p, k).into_vec();
                s.sort_unstable();
                s
            }
            None => (0..p * p).collect(),
        };
        for px in pixels {
            let (row, col) = (px / p, px % p);
            queries.push(WindowQuery { item, row, col });
            coords.extend(grid.at(row, col));
            target.extend(patch.pixel(row, col));
        }
    }
    let q = queries.len();
    Ok(Batch {
        bayer: Tensor::new([cfg.batch_size, 1, p, p], bayer)?,
        queries,
        coords: Tensor::new([q, 2], coords)?,
        target: Tensor::new([q, 3], target)?,
    })
}

/// Loads the train split as RGB images, all at least `patch_size` on each side.
pub fn load_train_images(manifest: &DatasetManifest, patch_size: usize) -> Result<Vec<RgbImage>> {
    let paths = manifest.train();
    if paths.is_empty() {
        return Err(Error::Config(format!("manifest '{}' has no train images", manifest.name)));
    }
    paths
        .into_iter()
        .map(|p| {
            let img = load_png(p)?;
            if img.height() < patch_size || img.width() < patch_size {
                return Err(Error::Config(format!(
                    "{} is {}x{}, smaller than patch size {}",
                    p.display(),
                    img.height(),
                    img.width(),
                    patch_size
                )));
            }
            Ok(img)
        })
        .collect()
}

/// Trains a conditioned model on random even-aligned crops of `images`.
/// With `output`, writes a checkpoint after every epoch and the loss log.
pub fn train_nerd(
    images: &[RgbImage],
    model_config: ModelConfig,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !model_config.variant.is_conditioned() {
        return Err(Error::Config(format!("train needs a conditioned variant (nerd, nerd-ns), got {}", model_config.variant)));
    }
    if images.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    if let Some(img) = images.iter().find(|i| i.height() < cfg.patch_size || i.width() < cfg.patch_size) {
        return Err(Error::Config(format!("a {}x{} image is smaller than patch size {}", img.height(), img.width(), cfg.patch_size)));
    }
    let mut model = Model::new(model_config, cfg.seed)?;
    // separate streams so data sampling does not depend on initialisation
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut opt = Optimizer::new(&model.params, cfg.adam(cfg.learning_rate));
    let mut log = Vec::with_capacity((cfg.epochs * cfg.iterations_per_epoch) as usize);
    let p = cfg.patch_size;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        opt.set_learning_rate(lr);
        for _ in 0..cfg.iterations_per_epoch {
            step += 1;
            let batch = sample_batch(images, cfg, &mut rng)?;
            let run = || -> Result<f64> {
                let mut tape = Tape::new();
                let vars = model.params.bind(&mut tape);
                let x = tape.constant(batch.bayer);
                let features = model.encode(&mut tape, &vars, x)?;
                let y = model.query_features(&mut tape, &vars, features, (p, p), batch.queries, batch.coords)?;
                let t = tape.constant(batch.target);
                let loss = tape.mse_loss(y, t)?;
                let value = tape.value(loss).data()[0] as f64;
                let grads = tape.backward(loss)?;
                opt.step(&mut model.params, &vars, &grads)?;
                Ok(value)
            };
            let loss = run().map_err(|e| training_error(step, e))?;
            log::debug!("step {step} epoch {epoch} loss {loss:.6}");
            log.push(LossRow { step, epoch, learning_rate: lr, loss });
        }
        let epoch_loss: f64 = log.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).sum::<f64>()
            / cfg.iterations_per_epoch as f64;
        log::info!("epoch {epoch}: mean loss {epoch_loss:.6} ({:.2} dB), lr {lr:.3e}", psnr_from_mse(epoch_loss));
        if let Some(out) = output {
            let meta = CheckpointMeta { model: model.config().clone(), step, epoch: epoch + 1, seed: cfg.seed };
            checkpoint::save(&model, &meta, &out.epoch_checkpoint(epoch + 1))?;
            write_atomic(&out.loss_log(), &loss_log_csv(&log)?)?;
        }
    }
    if let Some(out) = output {
        let meta = CheckpointMeta { model: model.config().clone(), step, epoch: cfg.epochs, seed: cfg.seed };
        checkpoint::save(&model, &meta, &out.final_checkpoint())?;
    }
    Ok(TrainOutcome { model, loss_log: log })
}

/// A method compared by [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Baseline(Baseline),
    /// The supplied conditioned model.
    Neural,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nerd" | "nerd-ns" => Ok(Method::Neural),
            other => other
                .parse::<Baseline>()
                .map(Method::Baseline)
                .map_err(|_| Error::Config(format!("unknown method '{other}' (valid: bilinear, malvar, nerd, nerd-ns)"))),
        }
    }
}

fn run_method(method: Method, model: Option<&Model>, bayer: &BayerImage) -> Result<(String, RgbImage)> {
    match method {
        Method::Baseline(b) => Ok((b.name().to_string(), b.run(bayer)?)),
        Method::Neural => {
            let m = model.ok_or_else(|| Error::Config("method nerd needs a checkpoint".into()))?;
            Ok((m.variant().name().to_string(), nerd_demosaic(m, bayer)?))
        }
    }
}

/// Demosaics every `(id, ground truth)` pair with each method and scores it.
pub fn evaluate_images(images: &[(String, RgbImage)], methods: &[Method], model: Option<&Model>) -> Result<MetricReport> {
    if methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    if methods.contains(&Method::Neural) && model.is_none() {
        return Err(Error::Config("method nerd needs a checkpoint".into()));
    }
    let mut report = MetricReport::default();
    for (id, gt) in images {
        let bayer = mosaic(gt)?;
        for &m in methods {
            let (name, out) = run_method(m, model, &bayer)?;
            report.push(id.clone(), name, &out, gt)?;
        }
    }
    Ok(report)
}

/// Evaluates the test split. With `eval_size`, each image is area-resized
/// so its short side equals `eval_size` and centre-cropped to a square;
/// otherwise images are used as stored.
pub fn evaluate(
    manifest: &DatasetManifest,
    methods: &[Method],
    model: Option<&Model>,
    eval_size: Option<usize>,
) -> Result<MetricReport> {
    let paths = manifest.test();
    if paths.is_empty() {
        return Err(Error::Config(format!("manifest '{}' has no test images", manifest.name)));
    }
    let images = paths
        .iter()
        .map(|p| {
            let img = load_png(p)?;
            let img = match eval_size {
                Some(s) => prepare_eval_image(&img, s)?,
                None => img,
            };
            Ok((image_id(p), img))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_images(&images, methods, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, Variant};

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(&c, 0), 1e-4);
        assert!((lr_at_epoch(&c, 1) - 9.5e-5).abs() < 1e-18);
        assert!((lr_at_epoch(&c, 10) - 5.987369392383789e-5).abs() < 1e-15);
    }

    #[test]
    fn defaults_match_full_schedule() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.patch_size, c.iterations_per_epoch), (5, 200, 10_000));
        assert_eq!(c.queries_per_step(), 5 * 200 * 200);
        assert_eq!(TrainConfig { coord_subsample: Some(2048), ..c }.queries_per_step(), 5 * 2048);
    }

    #[test]
    fn constant_target_is_learned_quickly() {
        let img = RgbImage::filled(16, 16, [0.2, 0.6, 0.4]).unwrap();
        for v in [Variant::Relu, Variant::ReluPe, Variant::Siren] {
            let mut mc = ModelConfig::new(v);
            mc.hidden_width = 32;
            let cfg = FitConfig { iterations: 200, learning_rate: 1e-3, seed: 1, log_interval: 50 };
            let out = fit_image(&img, mc, &cfg).unwrap();
            assert!(out.final_psnr > 40.0, "{v}: {}", out.final_psnr);
            assert_eq!(out.trace.len(), 4);
        }
    }

    #[test]
    fn conditioned_variant_cannot_fit_single_image() {
        let img = RgbImage::filled(4, 4, [0.5; 3]).unwrap();
        assert!(matches!(fit_image(&img, ModelConfig::new(Variant::Nerd), &FitConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_names_iteration() {
        let img = RgbImage::from_fn(8, 8, |r, c| [(r as f32) / 8.0, (c as f32) / 8.0, 0.5]).unwrap();
        let mut mc = ModelConfig::new(Variant::Relu);
        mc.hidden_width = 16;
        let cfg = FitConfig { iterations: 50, learning_rate: 1e30, seed: 0, log_interval: 10 };
        match fit_image(&img, mc, &cfg) {
            Err(Error::Training { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    fn tiny_train_config() -> (ModelConfig, TrainConfig) {
        let mut mc = ModelConfig::new(Variant::Nerd);
        mc.hidden_width = 8;
        mc.encoder = EncoderConfig::small();
        let tc = TrainConfig { iterations_per_epoch: 3, batch_size: 2, patch_size: 16, epochs: 2, seed: 4, coord_subsample: Some(20), learning_rate: 1e-3, ..Default::default() };
        (mc, tc)
    }

    fn tiny_images() -> Vec<RgbImage> {
        (0..3)
            .map(|k| RgbImage::from_fn(24, 20, |r, c| [((r + k) % 5) as f32 / 4.0, (c % 3) as f32 / 2.0, ((r * c + k) % 7) as f32 / 6.0]).unwrap())
            .collect()
    }

    #[test]
    fn training_writes_checkpoints_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutput { dir: dir.path().to_path_buf() };
        let (mc, tc) = tiny_train_config();
        let res = train_nerd(&tiny_images(), mc, &tc, Some(&out)).unwrap();
        assert_eq!(res.loss_log.len(), 6);
        assert_eq!(res.loss_log[3].epoch, 1);
        assert!((res.loss_log[3].learning_rate - 1e-3 * 0.95).abs() < 1e-15);
        assert!(out.epoch_checkpoint(1).is_file() && out.epoch_checkpoint(2).is_file());
        let text = std::fs::read_to_string(out.loss_log()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,epoch,learning_rate,loss");
        assert_eq!(text.lines().count(), 7);
        let (m, meta) = checkpoint::load(&out.final_checkpoint()).unwrap();
        assert_eq!(meta.step, 6);
        assert_eq!(m.params, res.model.params);
    }

    #[test]
    fn training_is_deterministic() {
        let (mc, tc) = tiny_train_config();
        let a = train_nerd(&tiny_images(), mc.clone(), &tc, None).unwrap();
        let b = train_nerd(&tiny_images(), mc, &tc, None).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn evaluate_requires_model_for_nerd() {
        let imgs = vec![("a".to_string(), RgbImage::filled(16, 16, [0.5; 3]).unwrap())];
        assert!(evaluate_images(&imgs, &[Method::Neural], None).is_err());
        assert!(evaluate_images(&imgs, &[], None).is_err());
        let r = evaluate_images(&imgs, &[Method::Baseline(Baseline::Bilinear)], None).unwrap();
        assert_eq!(r.rows[0].psnr_db, f64::INFINITY);
    }
}
