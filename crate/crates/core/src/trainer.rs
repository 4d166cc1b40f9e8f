//! Training loops: alternating adversarial/cycle optimization of the
//! restoration pair, and supervised segmenter training with early stopping.
//!
//! G1 maps low to high quality and G2 maps back; D1 judges the low domain and
//! D2 the high domain. Within a step both generators are updated first (the
//! discriminators frozen but differentiated through), then D1, then D2, each
//! against the fakes produced at the start of the step.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attention::CbamSpec;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{
    derive_rng, normalize, sample_epoch_subset, ImageSample, Quality, RangeKind, UnpairedDataset,
};
use crate::error::{Error, Result};
use crate::losses::{cycle_loss, discriminator_loss, generator_loss, LossWeights};
use crate::metrics::{psnr, ssim};
use crate::networks::{
    check_discriminator_input, check_generator_input, discriminator_graph, generator_forward,
    generator_graph, DiscriminatorSpec, GeneratorSpec,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::NetParams;
use crate::segnet::{check_unet_input, unet_logits_graph, UNetSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LAST_CHECKPOINT: &str = "last.ck";
pub const BEST_CHECKPOINT: &str = "best.ck";
pub const HISTORY: &str = "history.jsonl";

fn check(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(what.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationConfig {
    pub epochs: u64,
    pub subset_low: usize,
    pub subset_high: usize,
    pub batch_size: usize,
    pub validate_every_steps: u64,
    /// Validation pairs used; 0 means all.
    pub val_limit: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        RestorationConfig {
            epochs: 30,
            subset_low: 2000,
            subset_high: 2000,
            batch_size: 1,
            validate_every_steps: 500,
            val_limit: 0,
            adam: AdamConfig::new(2e-4, 0.5, 0.999),
            weights: LossWeights::default(),
            seed: 0,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

fn cbam_from(cfg: &Config) -> Result<CbamSpec> {
    Ok(CbamSpec {
        reduction_ratio: cfg.usize("cbam.reduction_ratio")?,
        spatial_kernel: cfg.usize("cbam.spatial_kernel")?,
    })
}

impl RestorationConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let stem = cfg.usize_list("gen.stem_filters")?;
        check(stem.len() == 3, "gen.stem_filters needs three entries")?;
        let mut generator = GeneratorSpec::scaled(
            [stem[0], stem[1], stem[2]],
            cfg.usize("gen.res_blocks")?,
            cbam_from(cfg)?,
        );
        generator.use_cbam = cfg.bool("use_cbam")?;
        let discriminator = DiscriminatorSpec {
            filters: cfg.usize_list("disc.filters")?,
            strides: cfg.usize_list("disc.strides")?,
            ..DiscriminatorSpec::default()
        };
        let c = RestorationConfig {
            epochs: cfg.u64("restore.epochs")?,
            subset_low: cfg.usize("restore.subset_low")?,
            subset_high: cfg.usize("restore.subset_high")?,
            batch_size: cfg.usize("restore.batch_size")?,
            validate_every_steps: cfg.u64("restore.validate_every_steps")?,
            val_limit: cfg.usize("restore.val_limit")?,
            adam: AdamConfig::new(
                cfg.f64("restore.lr")?,
                cfg.f64("restore.beta1")?,
                cfg.f64("restore.beta2")?,
            ),
            weights: LossWeights {
                lambda_cyc: cfg.f64("restore.lambda_cyc")?,
            },
            seed: cfg.u64("seed")?,
            generator,
            discriminator,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.epochs >= 1, "epochs must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(
            self.validate_every_steps >= 1,
            "validate_every_steps must be at least 1",
        )?;
        check(
            self.subset_low >= 1 && self.subset_high >= 1,
            "subset sizes must be at least 1",
        )?;
        self.adam.validate()?;
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }
}

/// Parameters and optimizer state of the four restoration networks.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationState {
    pub config: RestorationConfig,
    pub g1: NetParams,
    pub g2: NetParams,
    pub d1: NetParams,
    pub d2: NetParams,
    pub opt_g1: Adam,
    pub opt_g2: Adam,
    pub opt_d1: Adam,
    pub opt_d2: Adam,
    pub step: u64,
    pub epoch: u64,
    pub best_psnr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    #[serde(rename = "loss_G")]
    pub loss_g: f64,
    #[serde(rename = "loss_D1")]
    pub loss_d1: f64,
    #[serde(rename = "loss_D2")]
    pub loss_d2: f64,
    pub loss_cyc: f64,
}

const NETS: [&str; 4] = ["g1", "g2", "d1", "d2"];

impl RestorationState {
    pub fn new(config: RestorationConfig) -> Result<Self> {
        config.validate()?;
        let init = |name: &str, i: u64| -> Result<NetParams> {
            let mut rng = derive_rng(config.seed, &format!("init/{name}"), i);
            if name.starts_with('g') {
                config.generator.init(&mut rng)
            } else {
                config.discriminator.init(&mut rng)
            }
        };
        let (g1, g2, d1, d2) = (init("g1", 0)?, init("g2", 0)?, init("d1", 0)?, init("d2", 0)?);
        let a = config.adam;
        Ok(RestorationState {
            opt_g1: Adam::new(a, &g1)?,
            opt_g2: Adam::new(a, &g2)?,
            opt_d1: Adam::new(a, &d1)?,
            opt_d2: Adam::new(a, &d2)?,
            g1,
            g2,
            d1,
            d2,
            config,
            step: 0,
            epoch: 0,
            best_psnr: None,
        })
    }

    fn nets(&self) -> [(&NetParams, &Adam); 4] {
        [
            (&self.g1, &self.opt_g1),
            (&self.g2, &self.opt_g2),
            (&self.d1, &self.opt_d1),
            (&self.d2, &self.opt_d2),
        ]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "task": "restoration",
            "step": self.step,
            "epoch": self.epoch,
            "best_psnr": self.best_psnr.map(crate::metrics::MetricValue),
            "config": self.config,
            "adam_t": self.nets().map(|(_, o)| o.t),
        }));
        for (name, (p, o)) in NETS.iter().zip(self.nets()) {
            ck.push(*name, p.clone());
            ck.push(format!("{name}.m"), o.m.clone());
            ck.push(format!("{name}.v"), o.v.clone());
        }
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.meta["task"] != "restoration" {
            return Err(Error::Checkpoint("not a restoration checkpoint".into()));
        }
        let config: RestorationConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad config in checkpoint: {e}")))?;
        let adam_t: [u64; 4] = serde_json::from_value(ck.meta["adam_t"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad optimizer step in checkpoint: {e}")))?;
        let mut parts = Vec::new();
        for (i, name) in NETS.iter().enumerate() {
            let layout = if name.starts_with('g') {
                config.generator.layout()
            } else {
                config.discriminator.layout()
            };
            let p = ck.take_group(name)?;
            let m = ck.take_group(&format!("{name}.m"))?;
            let v = ck.take_group(&format!("{name}.v"))?;
            for x in [&p, &m, &v] {
                x.check_layout(&layout)?;
            }
            parts.push((
                p,
                Adam {
                    config: config.adam,
                    t: adam_t[i],
                    m,
                    v,
                },
            ));
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("four networks");
        let (g1, opt_g1) = next();
        let (g2, opt_g2) = next();
        let (d1, opt_d1) = next();
        let (d2, opt_d2) = next();
        let best_psnr = match &ck.meta["best_psnr"] {
            serde_json::Value::Null => None,
            v => Some(
                serde_json::from_value::<crate::metrics::MetricValue>(v.clone())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?
                    .0,
            ),
        };
        Ok(RestorationState {
            step: ck.meta["step"].as_u64().unwrap_or(0),
            epoch: ck.meta["epoch"].as_u64().unwrap_or(0),
            best_psnr,
            config,
            g1,
            g2,
            d1,
            d2,
            opt_g1,
            opt_g2,
            opt_d1,
            opt_d2,
        })
    }
}

fn ensure_finite_loss(v: f64, what: &str, step: u64, losses: &[(&str, f64)]) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let dump: Vec<String> = losses.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Err(Error::NonFinite(format!(
        "{what} became {v} at step {step} ({})",
        dump.join(", ")
    )))
}

/// Fakes produced by a generator update, kept for the discriminator update.
#[derive(Clone, Debug)]
pub struct GeneratorPass {
    pub loss_g: f64,
    pub loss_cyc: f64,
    /// `G2(y)`, scored by D1 against `x`.
    pub fake_x: Tensor,
    /// `G1(x)`, scored by D2 against `y`.
    pub fake_y: Tensor,
}

fn check_step_inputs(cfg: &RestorationConfig, x: &Tensor, y: &Tensor) -> Result<()> {
    x.ensure_same_shape(y, "restoration batches")?;
    check_generator_input(x, &cfg.generator)?;
    check_generator_input(y, &cfg.generator)?;
    check_discriminator_input(x, &cfg.discriminator)
}

/// Update G1 and G2 on `adv(D2(G1 x)) + adv(D1(G2 y)) + lambda * cycle`.
/// The discriminators are read but never written.
pub fn update_generators(state: &mut RestorationState, x: &Tensor, y: &Tensor) -> Result<GeneratorPass> {
    let cfg = &state.config;
    check_step_inputs(cfg, x, y)?;
    let step = state.step + 1;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let g1 = state.g1.bind(&mut tape, true);
    let g2 = state.g2.bind(&mut tape, true);
    let d1 = state.d1.bind(&mut tape, false);
    let d2 = state.d2.bind(&mut tape, false);
    let fake_y = generator_graph(&mut tape, xv, &g1, &cfg.generator)?;
    let fake_x = generator_graph(&mut tape, yv, &g2, &cfg.generator)?;
    let cyc_x = generator_graph(&mut tape, fake_y, &g2, &cfg.generator)?;
    let cyc_y = generator_graph(&mut tape, fake_x, &g1, &cfg.generator)?;
    let s_fake_y = discriminator_graph(&mut tape, fake_y, &d2, &cfg.discriminator)?;
    let s_fake_x = discriminator_graph(&mut tape, fake_x, &d1, &cfg.discriminator)?;
    let adv1 = generator_loss(&mut tape, s_fake_y);
    let adv2 = generator_loss(&mut tape, s_fake_x);
    let cyc = cycle_loss(&mut tape, xv, cyc_x, yv, cyc_y)?;
    let weighted = tape.scale(cyc, cfg.weights.lambda_cyc);
    let adv = tape.add(adv1, adv2)?;
    let total = tape.add(adv, weighted)?;
    let loss_g = tape.value(total).item();
    let loss_cyc = tape.value(cyc).item();
    ensure_finite_loss(loss_g, "generator loss", step, &[("loss_cyc", loss_cyc)])?;
    let grads = tape.backward(total)?;
    let (gr1, gr2) = (g1.grads(&grads), g2.grads(&grads));
    let fake_y = tape.value(fake_y).clone();
    let fake_x = tape.value(fake_x).clone();
    drop(tape);
    state.opt_g1.step(&mut state.g1, &gr1)?;
    state.opt_g2.step(&mut state.g2, &gr2)?;
    Ok(GeneratorPass {
        loss_g,
        loss_cyc,
        fake_x,
        fake_y,
    })
}

/// Update D1 on `(x, fake_x)`, then D2 on `(y, fake_y)`. The fakes are plain
/// tensors, so no gradient reaches the generators. Returns both losses.
pub fn update_discriminators(
    state: &mut RestorationState,
    x: &Tensor,
    y: &Tensor,
    pass: &GeneratorPass,
) -> Result<(f64, f64)> {
    let cfg = &state.config;
    let step = state.step + 1;
    let context = [("loss_G", pass.loss_g), ("loss_cyc", pass.loss_cyc)];
    let disc_update = |params: &mut NetParams, opt: &mut Adam, real: &Tensor, fake: &Tensor, name: &str| {
        let mut tape = Tape::new();
        let r = tape.constant(real.clone());
        let f = tape.constant(fake.clone());
        let p = params.bind(&mut tape, true);
        let sr = discriminator_graph(&mut tape, r, &p, &cfg.discriminator)?;
        let sf = discriminator_graph(&mut tape, f, &p, &cfg.discriminator)?;
        let loss = discriminator_loss(&mut tape, sr, sf)?;
        let value = tape.value(loss).item();
        ensure_finite_loss(value, name, step, &context)?;
        let g = p.grads(&tape.backward(loss)?);
        drop(tape);
        opt.step(params, &g)?;
        Ok::<f64, Error>(value)
    };
    let loss_d1 = disc_update(&mut state.d1, &mut state.opt_d1, x, &pass.fake_x, "D1 loss")?;
    let loss_d2 = disc_update(&mut state.d2, &mut state.opt_d2, y, &pass.fake_y, "D2 loss")?;
    Ok((loss_d1, loss_d2))
}

/// One alternating update on a low-quality batch `x` and a high-quality
/// batch `y`, both `(B, 3, H, W)` in `[-1, 1]`: generators first, then D1,
/// then D2 on the fakes from before the generator update.
pub fn restoration_step(state: &mut RestorationState, x: &Tensor, y: &Tensor) -> Result<StepLosses> {
    let pass = update_generators(state, x, y)?;
    let (loss_d1, loss_d2) = update_discriminators(state, x, y, &pass)?;
    state.step += 1;
    Ok(StepLosses {
        loss_g: pass.loss_g,
        loss_d1,
        loss_d2,
        loss_cyc: pass.loss_cyc,
    })
}

/// Stack samples into a `(B, 3, H, W)` batch.
pub fn batch(samples: &[&ImageSample], range: RangeKind) -> Result<Tensor> {
    let items: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let t = normalize(s, range);
            let shape = [1, 3, s.height, s.width];
            t.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}

/// Restore one sample with G1 and quantize back to 8 bits.
pub fn restore_sample(sample: &ImageSample, spec: &GeneratorSpec, g1: &NetParams) -> Result<ImageSample> {
    let x = batch(&[sample], RangeKind::Signed)?;
    let y = generator_forward(&x, spec, g1)?;
    let mut out = ImageSample::from_signed(sample.id.clone(), &y, Quality::High)?;
    out.mask = sample.mask.clone();
    Ok(out)
}

/// Mean PSNR and SSIM (8-bit scale) over `(candidate, reference)` pairs.
pub fn score_pairs(pairs: &[(ImageSample, ImageSample)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let as_tensor = |s: &ImageSample| {
        Tensor::new(
            &[3, s.height, s.width],
            s.pixels.iter().map(|&p| p as f64).collect(),
        )
    };
    let mut sums = (0.0, 0.0);
    for (a, b) in pairs {
        let (ta, tb) = (as_tensor(a)?, as_tensor(b)?);
        sums.0 += psnr(&ta, &tb, 255.0)?;
        sums.1 += ssim(&ta, &tb, 255.0)?;
    }
    let n = pairs.len() as f64;
    Ok((sums.0 / n, sums.1 / n))
}

/// Restore each degraded image with G1 and score it against its clean
/// source. Parameters are not touched.
pub fn validate_restoration(
    spec: &GeneratorSpec,
    g1: &NetParams,
    val_pairs: &[(ImageSample, ImageSample)],
) -> Result<(f64, f64)> {
    if val_pairs.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let restored = val_pairs
        .iter()
        .map(|(deg, clean)| Ok((restore_sample(deg, spec, g1)?, clean.clone())))
        .collect::<Result<Vec<_>>>()?;
    score_pairs(&restored)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HistoryRecord {
    Step {
        epoch: u64,
        step: u64,
        #[serde(flatten)]
        losses: StepLosses,
    },
    Validation {
        step: u64,
        psnr: crate::metrics::MetricValue,
        ssim: f64,
    },
    SegStep {
        epoch: u64,
        step: u64,
        loss: f64,
    },
    SegEpoch {
        epoch: u64,
        train_loss: f64,
        val_loss: f64,
        improved: bool,
    },
}

/// JSON-lines history writer.
pub struct History {
    out: BufWriter<File>,
    pub records: Vec<HistoryRecord>,
}

impl History {
    /// Truncates unless `append`.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(History {
            out: BufWriter::new(file),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, r: HistoryRecord) -> Result<()> {
        let line = serde_json::to_string(&r)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("history", e))?;
        self.records.push(r);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("history", e))
    }
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug)]
pub struct RestorationOutcome {
    pub state: RestorationState,
    pub history: Vec<HistoryRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_failure(out_dir: &Path, err: &Error, step: u64, epoch: u64) {
    let dump = json!({"error": err.to_string(), "step": step, "epoch": epoch});
    if let Err(e) = std::fs::write(out_dir.join("failure.json"), dump.to_string()) {
        log::error!("could not write failure dump: {e}");
    }
}

/// Train the restoration networks for the configured epochs, starting from
/// `resume` if given (histories are then appended to).
pub fn train_restoration(
    config: &RestorationConfig,
    ds: &UnpairedDataset,
    val_pairs: &[(ImageSample, ImageSample)],
    out_dir: &Path,
    resume: Option<RestorationState>,
) -> Result<RestorationOutcome> {
    config.validate()?;
    if ds.low.is_empty() || ds.high.is_empty() {
        return Err(Error::Data("restoration needs images in both pools".into()));
    }
    ensure_dir(out_dir)?;
    let resumed = resume.is_some();
    let mut state = match resume {
        Some(s) => s,
        None => RestorationState::new(config.clone())?,
    };
    state.config.epochs = config.epochs;
    state.config.validate_every_steps = config.validate_every_steps;
    let val: Vec<(ImageSample, ImageSample)> = match config.val_limit {
        0 => val_pairs.to_vec(),
        n => val_pairs.iter().take(n).cloned().collect(),
    };
    if val.is_empty() {
        log::warn!("no validation pairs; skipping validation");
    }
    let mut history = History::open(&out_dir.join(HISTORY), resumed)?;
    let mut checkpoints = Vec::new();
    let n_low = config.subset_low.min(ds.low.len());
    let n_high = config.subset_high.min(ds.high.len());
    if n_low < config.subset_low || n_high < config.subset_high {
        log::warn!("subset sizes clamped to the pools: {n_low} low, {n_high} high");
    }
    let b = config.batch_size;
    let steps_per_epoch = (n_low.min(n_high) / b).max(1);
    if n_low.min(n_high) < b {
        return Err(Error::Config(format!(
            "batch size {b} exceeds the available images"
        )));
    }

    let validate = |state: &mut RestorationState, history: &mut History| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let (p, s) = validate_restoration(&state.config.generator, &state.g1, &val)?;
        history.push(HistoryRecord::Validation {
            step: state.step,
            psnr: crate::metrics::MetricValue(p),
            ssim: s,
        })?;
        log::info!("step {}: validation PSNR {p:.3} dB, SSIM {s:.4}", state.step);
        if state.best_psnr.is_none_or(|b| p > b) {
            state.best_psnr = Some(p);
            state.to_checkpoint().save(&out_dir.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    };

    let result = (|| -> Result<()> {
        while state.epoch < config.epochs {
            let epoch = state.epoch;
            let (li, hi) = sample_epoch_subset(ds, n_low, n_high, config.seed, epoch)?;
            for k in 0..steps_per_epoch {
                let xs: Vec<&ImageSample> = li[k * b..(k + 1) * b].iter().map(|&i| &ds.low[i]).collect();
                let ys: Vec<&ImageSample> = hi[k * b..(k + 1) * b].iter().map(|&i| &ds.high[i]).collect();
                let x = batch(&xs, RangeKind::Signed)?;
                let y = batch(&ys, RangeKind::Signed)?;
                let losses = restoration_step(&mut state, &x, &y)?;
                history.push(HistoryRecord::Step {
                    epoch,
                    step: state.step,
                    losses,
                })?;
                if state.step % config.validate_every_steps == 0 {
                    validate(&mut state, &mut history)?;
                }
            }
            state.epoch += 1;
            let path = out_dir.join(format!("epoch_{:03}.ck", state.epoch));
            let ck = state.to_checkpoint();
            ck.save(&path)?;
            ck.save(&out_dir.join(LAST_CHECKPOINT))?;
            checkpoints.push(path);
            history.flush()?;
            log::info!("epoch {} done at step {}", state.epoch, state.step);
        }
        if state.step % config.validate_every_steps != 0 {
            validate(&mut state, &mut history)?;
        }
        Ok(())
    })();
    history.flush()?;
    if let Err(e) = result {
        write_failure(out_dir, &e, state.step, state.epoch);
        return Err(e);
    }
    Ok(RestorationOutcome {
        state,
        history: history.records,
        checkpoints,
    })
}

/// Early stopping on a validation loss: improvement means dropping at least
/// `min_delta` below the best so far; training stops once `patience`
/// consecutive epochs fail to improve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    /// 1-based epoch of the best loss.
    pub best_epoch: usize,
    pub streak: usize,
    pub epochs_seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Result<Self> {
        check(patience >= 1, "patience must be at least 1")?;
        check(min_delta >= 0.0, "min_delta must be non-negative")?;
        Ok(EarlyStopping {
            patience,
            min_delta,
            best: None,
            best_epoch: 0,
            streak: 0,
            epochs_seen: 0,
        })
    }

    /// Record one epoch's loss; returns whether it improved.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.epochs_seen += 1;
        let improved = self.best.is_none_or(|b| loss <= b - self.min_delta);
        if improved {
            self.best = Some(loss);
            self.best_epoch = self.epochs_seen;
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.streak >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub patience: usize,
    pub min_delta: f64,
    pub augment: bool,
    pub seed: u64,
    pub unet: UNetSpec,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            epochs: 100,
            batch_size: 1,
            adam: AdamConfig::new(1e-4, 0.9, 0.999),
            patience: 5,
            min_delta: 1e-6,
            augment: true,
            seed: 0,
            unet: UNetSpec::default(),
        }
    }
}

impl SegmentationConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let c = SegmentationConfig {
            epochs: cfg.u64("seg.epochs")?,
            batch_size: cfg.usize("seg.batch_size")?,
            adam: AdamConfig::new(cfg.f64("seg.lr")?, cfg.f64("seg.beta1")?, cfg.f64("seg.beta2")?),
            patience: cfg.usize("seg.patience")?,
            min_delta: cfg.f64("seg.min_delta")?,
            augment: cfg.bool("seg.augment")?,
            seed: cfg.u64("seed")?,
            unet: UNetSpec {
                base_filters: cfg.usize("seg.base_filters")?,
                use_cbam: cfg.bool("use_cbam")?,
                cbam: cbam_from(cfg)?,
                threshold: cfg.f64("seg.threshold")?,
                ..UNetSpec::default()
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.epochs >= 1, "epochs must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        self.adam.validate()?;
        EarlyStopping::new(self.patience, self.min_delta)?;
        self.unet.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationState {
    pub config: SegmentationConfig,
    pub params: NetParams,
    pub opt: Adam,
    pub step: u64,
    pub epoch: u64,
    pub stopper: EarlyStopping,
}

impl SegmentationState {
    pub fn new(config: SegmentationConfig) -> Result<Self> {
        config.validate()?;
        let params = config.unet.init(&mut derive_rng(config.seed, "init/unet", 0))?;
        Ok(SegmentationState {
            opt: Adam::new(config.adam, &params)?,
            stopper: EarlyStopping::new(config.patience, config.min_delta)?,
            params,
            config,
            step: 0,
            epoch: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "task": "segmentation",
            "step": self.step,
            "epoch": self.epoch,
            "config": self.config,
            "stopper": self.stopper,
            "adam_t": self.opt.t,
        }));
        ck.push("unet", self.params.clone());
        ck.push("unet.m", self.opt.m.clone());
        ck.push("unet.v", self.opt.v.clone());
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.meta["task"] != "segmentation" {
            return Err(Error::Checkpoint("not a segmentation checkpoint".into()));
        }
        let bad = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let config: SegmentationConfig = serde_json::from_value(ck.meta["config"].clone()).map_err(bad)?;
        let stopper: EarlyStopping = serde_json::from_value(ck.meta["stopper"].clone()).map_err(bad)?;
        let layout = config.unet.layout();
        let params = ck.take_group("unet")?;
        let m = ck.take_group("unet.m")?;
        let v = ck.take_group("unet.v")?;
        for x in [&params, &m, &v] {
            x.check_layout(&layout)?;
        }
        Ok(SegmentationState {
            opt: Adam {
                config: config.adam,
                t: ck.meta["adam_t"].as_u64().unwrap_or(0),
                m,
                v,
            },
            step: ck.meta["step"].as_u64().unwrap_or(0),
            epoch: ck.meta["epoch"].as_u64().unwrap_or(0),
            config,
            params,
            stopper,
        })
    }
}

fn seg_batch(samples: &[&ImageSample]) -> Result<(Tensor, Tensor)> {
    let x = batch(samples, RangeKind::Unit)?;
    let masks = samples
        .iter()
        .map(|s| {
            s.mask_tensor()
                .ok_or_else(|| Error::Data(format!("image {} has no vessel mask", s.id)))?
                .reshape(&[1, 1, s.height, s.width])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((x, Tensor::stack(&masks)?))
}

/// Mean BCE of the segmenter on a batch, without updating.
pub fn segmentation_loss(spec: &UNetSpec, params: &NetParams, samples: &[&ImageSample]) -> Result<f64> {
    let (x, m) = seg_batch(samples)?;
    check_unet_input(&x, spec)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let p = params.bind(&mut tape, false);
    let logits = unet_logits_graph(&mut tape, xv, &p, spec)?;
    let loss = tape.bce_with_logits(logits, &m)?;
    Ok(tape.value(loss).item())
}

/// One BCE update on a batch of masked images.
pub fn segmentation_step(state: &mut SegmentationState, samples: &[&ImageSample]) -> Result<f64> {
    let (x, m) = seg_batch(samples)?;
    let spec = state.config.unet.clone();
    check_unet_input(&x, &spec)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let p = state.params.bind(&mut tape, true);
    let logits = unet_logits_graph(&mut tape, xv, &p, &spec)?;
    let loss = tape.bce_with_logits(logits, &m)?;
    let value = tape.value(loss).item();
    ensure_finite_loss(value, "segmentation loss", state.step + 1, &[])?;
    let g = p.grads(&tape.backward(loss)?);
    drop(tape);
    state.opt.step(&mut state.params, &g)?;
    state.step += 1;
    Ok(value)
}

fn mean_loss(spec: &UNetSpec, params: &NetParams, samples: &[ImageSample]) -> Result<f64> {
    let losses = crate::parallel::map_collect(samples, |s| segmentation_loss(spec, params, &[s]));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Debug)]
pub struct SegmentationOutcome {
    pub state: SegmentationState,
    pub history: Vec<HistoryRecord>,
    pub best_checkpoint: PathBuf,
}

/// Full passes over `train` until the epoch budget or early stopping; the
/// best-validation weights are kept in `best.ck`. Without a validation set
/// the training images stand in for it.
pub fn train_segmentation(
    config: &SegmentationConfig,
    train: &[ImageSample],
    val: &[ImageSample],
    out_dir: &Path,
    resume: Option<SegmentationState>,
) -> Result<SegmentationOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.mask.is_none()) {
        return Err(Error::Data(format!("image {} has no vessel mask", s.id)));
    }
    ensure_dir(out_dir)?;
    let train: Vec<ImageSample> = if config.augment {
        crate::data::expand_augmented(train)
    } else {
        train.to_vec()
    };
    let val: &[ImageSample] = if val.is_empty() {
        log::warn!("no validation images; early stopping watches the training set");
        &train
    } else {
        val
    };
    let resumed = resume.is_some();
    let mut state = match resume {
        Some(s) => s,
        None => SegmentationState::new(config.clone())?,
    };
    state.config.epochs = config.epochs;
    let mut history = History::open(&out_dir.join(HISTORY), resumed)?;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let b = config.batch_size.min(train.len());
    let result = (|| -> Result<()> {
        while state.epoch < config.epochs && !state.stopper.should_stop() {
            let epoch = state.epoch;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut derive_rng(config.seed, "seg-epoch", epoch));
            let mut train_sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(b) {
                let items: Vec<&ImageSample> = chunk.iter().map(|&i| &train[i]).collect();
                let loss = segmentation_step(&mut state, &items)?;
                history.push(HistoryRecord::SegStep {
                    epoch,
                    step: state.step,
                    loss,
                })?;
                train_sum += loss;
                batches += 1;
            }
            let val_loss = mean_loss(&state.config.unet, &state.params, val)?;
            let improved = state.stopper.observe(val_loss);
            state.epoch += 1;
            history.push(HistoryRecord::SegEpoch {
                epoch,
                train_loss: train_sum / batches as f64,
                val_loss,
                improved,
            })?;
            let ck = state.to_checkpoint();
            if improved {
                ck.save(&best_path)?;
            }
            ck.save(&out_dir.join(LAST_CHECKPOINT))?;
            history.flush()?;
            log::info!("epoch {}: validation loss {val_loss:.5}", state.epoch);
        }
        Ok(())
    })();
    history.flush()?;
    if let Err(e) = result {
        write_failure(out_dir, &e, state.step, state.epoch);
        return Err(e);
    }
    Ok(SegmentationOutcome {
        state,
        history: history.records,
        best_checkpoint: best_path,
    })
}

/// Generator spec and G1 weights from a restoration checkpoint.
pub fn load_restorer(path: &Path) -> Result<(GeneratorSpec, NetParams)> {
    let state = RestorationState::from_checkpoint(Checkpoint::load(path)?)?;
    Ok((state.config.generator, state.g1))
}

/// UNet spec and weights from a segmentation checkpoint.
pub fn load_segmenter(path: &Path) -> Result<(UNetSpec, NetParams)> {
    let state = SegmentationState::from_checkpoint(Checkpoint::load(path)?)?;
    Ok((state.config.unet, state.params))
}
