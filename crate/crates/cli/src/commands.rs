use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fundus::checkpoint::Checkpoint;
use fundus::config::Config;
use fundus::data::{
    image_files, load_image, load_image_folder, load_mask, save_mask_png, scan_image_folder, synthetic_clean,
    write_degraded_dataset, DatasetDir, DegradeKind, ImageSample, Manifest, Quality, RangeKind, Split,
    SplitFractions, MANIFEST,
};
use fundus::metrics::{
    confusion_counts, psnr, segmentation_scores, ssim, timing_report, BinSpec, EvalReport, Timing,
};
use fundus::segnet::{binarize, unet_forward};
use fundus::trainer::{
    batch, load_restorer, load_segmenter, restore_sample, train_restoration, train_segmentation,
    RestorationConfig, RestorationState, SegmentationConfig, SegmentationState,
};
use fundus::{Error, Result, Tensor};
use serde_json::{json, Value};

use crate::{default_out, AblateArgs, DegradeArgs, EvaluateArgs, RunArgs, TrainArgs, Verb};

const TIMING: &str = "timing.json";

pub fn run(verb: &Verb, cfg: &Config) -> Result<String> {
    let out = |o: &Option<PathBuf>| o.clone().unwrap_or_else(|| default_out(verb.name()));
    let summary = match verb {
        Verb::Degrade(a) => degrade(a, cfg, &out(&a.out))?,
        Verb::TrainRestore(a) => train_restore(a, cfg, &out(&a.out))?,
        Verb::TrainSegment(a) => train_segment(a, cfg, &out(&a.out))?,
        Verb::Restore(a) => restore(a, cfg, &out(&a.out))?,
        Verb::Segment(a) => segment(a, cfg, &out(&a.out))?,
        Verb::Evaluate(a) => evaluate(a, cfg, &out(&a.out))?,
        Verb::Ablate(a) => ablate(a, cfg, &out(&a.out))?,
    };
    Ok(summary.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| io_err(path, e))
}

fn resolution(cfg: &Config) -> Result<(usize, usize)> {
    let r = (cfg.usize("data.height")?, cfg.usize("data.width")?);
    if r.0 == 0 || r.1 == 0 {
        return Err(Error::Config(
            "data.height and data.width must be positive".into(),
        ));
    }
    Ok(r)
}

fn degrade(a: &DegradeArgs, cfg: &Config, out: &Path) -> Result<Value> {
    let res = resolution(cfg)?;
    let seed = cfg.u64("seed")?;
    let kinds = DegradeKind::parse_list(a.kinds.as_deref().unwrap_or(cfg.str("data.kinds")?))?;
    let clean = match &a.input {
        Some(dir) => {
            let mut samples = load_image_folder(dir, Quality::High, res)?;
            let masks = dir.join("masks");
            for s in &mut samples {
                let p = masks.join(format!("{}.png", s.id));
                if p.exists() {
                    let (m, _) = load_mask(&p, Some(res))?;
                    *s = s.clone().with_mask(m)?;
                }
            }
            samples
        }
        None => {
            let n = a.synthetic.unwrap_or(cfg.usize("data.synthetic_count")?);
            if n == 0 {
                return Err(Error::Config("--synthetic needs at least one image".into()));
            }
            synthetic_clean(n, res, seed)
        }
    };
    let splits = SplitFractions {
        val: cfg.f64("data.val_fraction")?,
        test: cfg.f64("data.test_fraction")?,
    };
    let m = write_degraded_dataset(out, &clean, &kinds, seed, splits)?;
    Ok(json!({
        "verb": "degrade",
        "out": out,
        "high": clean.len(),
        "low": m.entries.len() - clean.len(),
        "counts": m.counts,
    }))
}

/// The dataset resolution comes from its manifest; without one, from config.
fn open_dataset(dir: &Path, cfg: &Config) -> Result<DatasetDir> {
    let explicit = if dir.join(MANIFEST).exists() {
        None
    } else {
        Some(resolution(cfg)?)
    };
    DatasetDir::open(dir, explicit)
}

fn train_restore(a: &TrainArgs, cfg: &Config, out: &Path) -> Result<Value> {
    let rc = RestorationConfig::from_config(cfg)?;
    let ds = open_dataset(&a.data, cfg)?;
    let train = ds.unpaired(Split::Train)?;
    let val = ds.pairs(Split::Val)?;
    let resume = match &a.resume {
        Some(p) => Some(RestorationState::from_checkpoint(Checkpoint::load(p)?)?),
        None => None,
    };
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg.to_json())?;
    let o = train_restoration(&rc, &train, &val, out, resume)?;
    Ok(json!({
        "verb": "train-restore",
        "out": out,
        "epochs": o.state.epoch,
        "steps": o.state.step,
        "best_psnr": o.state.best_psnr.map(fundus::metrics::MetricValue),
        "checkpoints": o.checkpoints,
    }))
}

fn train_segment(a: &TrainArgs, cfg: &Config, out: &Path) -> Result<Value> {
    let sc = SegmentationConfig::from_config(cfg)?;
    let ds = open_dataset(&a.data, cfg)?;
    let keep_masked =
        |v: Vec<ImageSample>| -> Vec<ImageSample> { v.into_iter().filter(|s| s.mask.is_some()).collect() };
    let train = keep_masked(ds.high(Split::Train)?);
    let val = keep_masked(ds.high(Split::Val)?);
    if train.is_empty() {
        return Err(Error::Data(format!(
            "no masked training images in {}",
            a.data.display()
        )));
    }
    let resume = match &a.resume {
        Some(p) => Some(SegmentationState::from_checkpoint(Checkpoint::load(p)?)?),
        None => None,
    };
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg.to_json())?;
    let o = train_segmentation(&sc, &train, &val, out, resume)?;
    Ok(json!({
        "verb": "train-segment",
        "out": out,
        "epochs": o.state.epoch,
        "steps": o.state.step,
        "best_epoch": o.state.stopper.best_epoch,
        "best_val_loss": o.state.stopper.best.map(fundus::metrics::MetricValue),
        "checkpoint": o.best_checkpoint,
    }))
}

fn load_inputs(dir: &Path, cfg: &Config) -> Result<Vec<ImageSample>> {
    // Unreadable files are logged and skipped by the scan.
    Ok(scan_image_folder(dir, Quality::Unknown, resolution(cfg)?)?.samples)
}

fn restore(a: &RunArgs, cfg: &Config, out: &Path) -> Result<Value> {
    let ck = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("restore needs --checkpoint".into()))?;
    let (spec, g1) = load_restorer(ck)?;
    let inputs = load_inputs(&a.input, cfg)?;
    create_dir(out)?;
    let (restored, timing) = timing_report(&inputs, |s| restore_sample(s, &spec, &g1))?;
    for r in &restored {
        r.save_png(&out.join(format!("{}.png", r.id)))?;
    }
    write_json(&out.join(TIMING), &timing)?;
    Ok(json!({"verb": "restore", "out": out, "images": restored.len(), "timing": timing}))
}

fn segment(a: &RunArgs, cfg: &Config, out: &Path) -> Result<Value> {
    let (spec, params) = match &a.checkpoint {
        Some(p) => load_segmenter(p)?,
        None => {
            log::warn!("no --checkpoint given; segmenting with untrained weights");
            let s = SegmentationState::new(SegmentationConfig::from_config(cfg)?)?;
            (s.config.unet, s.params)
        }
    };
    let inputs = load_inputs(&a.input, cfg)?;
    create_dir(out)?;
    let (masks, timing) = timing_report(&inputs, |s| {
        let prob = unet_forward(&batch(&[s], RangeKind::Unit)?, &spec, &params)?;
        binarize(&prob, spec.threshold)
    })?;
    for (s, m) in inputs.iter().zip(&masks) {
        let bits: Vec<u8> = m.data().iter().map(|&v| v as u8).collect();
        save_mask_png(&out.join(format!("{}.png", s.id)), &bits, s.height, s.width)?;
    }
    write_json(&out.join(TIMING), &timing)?;
    Ok(json!({"verb": "segment", "out": out, "images": masks.len(), "timing": timing}))
}

fn bins(cfg: &Config) -> Result<BTreeMap<String, BinSpec>> {
    let spec = |key: &str| -> Result<BinSpec> {
        let v = cfg.f64_list(key)?;
        let b = match v[..] {
            [lo, hi, width] => BinSpec { lo, hi, width },
            _ => return Err(Error::Config(format!("{key} needs [lo, hi, width]"))),
        };
        b.validate()?;
        Ok(b)
    };
    Ok(BTreeMap::from([
        ("psnr".to_string(), spec("eval.psnr_bins")?),
        ("ssim".to_string(), spec("eval.ssim_bins")?),
    ]))
}

fn pixels(s: &ImageSample) -> Result<Tensor> {
    Tensor::new(
        &[3, s.height, s.width],
        s.pixels.iter().map(|&p| p as f64).collect(),
    )
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest {}: {e}", path.display())))
}

/// Reference file for a prediction id: the manifest source when listed,
/// else a file with the same stem.
fn find_reference(dir: &Path, id: &str, manifest: Option<&Manifest>) -> Result<PathBuf> {
    let want = manifest
        .and_then(|m| m.entries.iter().find(|e| e.id == id))
        .and_then(|e| e.source.clone())
        .unwrap_or_else(|| id.to_string());
    image_files(dir)?
        .into_iter()
        .find(|p| p.file_stem().and_then(|s| s.to_str()) == Some(want.as_str()))
        .ok_or_else(|| Error::Data(format!("no reference for {id} in {}", dir.display())))
}

fn evaluate(a: &EvaluateArgs, cfg: &Config, out: &Path) -> Result<Value> {
    let mut report = EvalReport::new(bins(cfg)?);
    let preds = image_files(&a.pred)?;
    if preds.is_empty() {
        return Err(Error::Data(format!("no images found in {}", a.pred.display())));
    }
    let manifest = a.manifest.as_deref().map(read_manifest).transpose()?;
    let mode = if let Some(gt_dir) = &a.gt_masks {
        let mut total = None;
        for p in &preds {
            let (pm, (h, w)) = load_mask(p, None)?;
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let (gm, _) = load_mask(&find_reference(gt_dir, id, manifest.as_ref())?, Some((h, w)))?;
            let as_t = |m: &[u8]| Tensor::new(&[h, w], m.iter().map(|&v| v as f64).collect());
            let c = confusion_counts(&as_t(&pm)?, &as_t(&gm)?)?;
            let s = segmentation_scores(&c)?;
            report.push(id, &s.named());
            total = Some(total.map_or(c, |t: fundus::metrics::ConfusionCounts| t.merge(&c)));
        }
        report.confusion = total;
        "segmentation"
    } else {
        let ref_dir = a
            .reference
            .as_ref()
            .expect("clap requires --reference without --gt-masks");
        for p in &preds {
            let pred = load_image(p, Quality::Unknown, None)?;
            let reference = load_image(
                &find_reference(ref_dir, &pred.id, manifest.as_ref())?,
                Quality::High,
                Some((pred.height, pred.width)),
            )?;
            let (tp, tr) = (pixels(&pred)?, pixels(&reference)?);
            report.push(
                pred.id.clone(),
                &[("psnr", psnr(&tp, &tr, 255.0)?), ("ssim", ssim(&tp, &tr, 255.0)?)],
            );
        }
        "restoration"
    };
    let timing_path = a.pred.join(TIMING);
    if timing_path.exists() {
        let text = std::fs::read_to_string(&timing_path).map_err(|e| io_err(&timing_path, e))?;
        report.timing = Some(serde_json::from_str::<Timing>(&text)?);
    }
    report.write(out)?;
    Ok(json!({"verb": "evaluate", "mode": mode, "out": out, "summary": report.summary()}))
}

/// Pairs to score the ablation on: test, else val, else train.
fn ablation_pairs(ds: &DatasetDir) -> Result<(Split, Vec<(ImageSample, ImageSample)>)> {
    for split in [Split::Test, Split::Val, Split::Train] {
        let p = ds.pairs(split)?;
        if !p.is_empty() {
            return Ok((split, p));
        }
    }
    Err(Error::Data(
        "dataset has no degraded/clean pairs to evaluate".into(),
    ))
}

fn ablate(a: &AblateArgs, cfg: &Config, out: &Path) -> Result<Value> {
    let ds = open_dataset(&a.data, cfg)?;
    let train = ds.unpaired(Split::Train)?;
    let val = ds.pairs(Split::Val)?;
    let (split, pairs) = ablation_pairs(&ds)?;
    let bins = bins(cfg)?;
    create_dir(out)?;
    let mut variants = serde_json::Map::new();
    let mut means = Vec::new();
    for (name, use_cbam) in [("with_cbam", true), ("without_cbam", false)] {
        let mut c = cfg.clone();
        c.set_value("use_cbam", use_cbam.into())?;
        let rc = RestorationConfig::from_config(&c)?;
        let dir = out.join(name);
        let o = train_restoration(&rc, &train, &val, &dir, None)?;
        let g = &o.state.config.generator;
        let (restored, timing) = timing_report(&pairs, |(deg, _)| restore_sample(deg, g, &o.state.g1))?;
        let mut report = EvalReport::new(bins.clone());
        for (r, (_, clean)) in restored.iter().zip(&pairs) {
            let (tp, tr) = (pixels(r)?, pixels(clean)?);
            report.push(
                r.id.clone(),
                &[("psnr", psnr(&tp, &tr, 255.0)?), ("ssim", ssim(&tp, &tr, 255.0)?)],
            );
        }
        report.timing = Some(timing);
        report.write(&dir.join("eval"))?;
        let (p, s) = (
            report.mean("psnr").unwrap_or(f64::NAN),
            report.mean("ssim").unwrap_or(f64::NAN),
        );
        means.push((p, s));
        variants.insert(
            name.to_string(),
            json!({
                "use_cbam": use_cbam,
                "generator_params": o.state.g1.numel(),
                "psnr": fundus::metrics::MetricValue(p),
                "ssim": fundus::metrics::MetricValue(s),
                "timing": timing,
            }),
        );
    }
    let result = json!({
        "split": split.name(),
        "images": pairs.len(),
        "variants": variants,
        "delta": {
            "psnr": fundus::metrics::MetricValue(means[0].0 - means[1].0),
            "ssim": fundus::metrics::MetricValue(means[0].1 - means[1].1),
        },
    });
    write_json(&out.join("ablation.json"), &result)?;
    Ok(json!({"verb": "ablate", "out": out, "result": result}))
}
