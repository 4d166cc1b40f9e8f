//! Flat dotted-key configuration with a single registry of keys, defaults
//! and descriptions. Files are JSON objects; overrides are `key=value`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub struct KeyDef {
    pub key: &'static str,
    /// Default as a JSON literal.
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(key: &'static str, default: &'static str, doc: &'static str) -> KeyDef {
    KeyDef { key, default, doc }
}

pub const KEYS: &[KeyDef] = &[
    key("seed", "0", "master seed for init, sampling and degradation"),
    key(
        "use_cbam",
        "true",
        "attention in generator residual blocks and UNet blocks",
    ),
    key("data.height", "256", "working image height"),
    key("data.width", "256", "working image width"),
    key(
        "data.kinds",
        "\"all\"",
        "degradations to synthesize (comma list or all)",
    ),
    key(
        "data.synthetic_count",
        "16",
        "phantom images generated by `degrade --synthetic`",
    ),
    key(
        "data.val_fraction",
        "0.1",
        "fraction of sources assigned to validation",
    ),
    key(
        "data.test_fraction",
        "0.1",
        "fraction of sources assigned to test",
    ),
    key("gen.stem_filters", "[64, 128, 256]", "generator encoder widths"),
    key("gen.res_blocks", "9", "generator residual blocks"),
    key(
        "disc.filters",
        "[64, 128, 256, 512, 512, 1]",
        "discriminator widths",
    ),
    key("disc.strides", "[2, 2, 2, 2, 1, 1]", "discriminator strides"),
    key("cbam.reduction_ratio", "16", "channel-attention reduction ratio"),
    key("cbam.spatial_kernel", "7", "spatial-attention kernel size"),
    key("restore.epochs", "30", "restoration epochs"),
    key("restore.subset_low", "2000", "low-quality images drawn per epoch"),
    key(
        "restore.subset_high",
        "2000",
        "high-quality images drawn per epoch",
    ),
    key("restore.batch_size", "1", "restoration batch size"),
    key("restore.validate_every_steps", "500", "steps between validations"),
    key("restore.val_limit", "0", "validation pairs used (0 = all)"),
    key("restore.lr", "0.0002", "restoration learning rate"),
    key("restore.beta1", "0.5", "restoration Adam beta1"),
    key("restore.beta2", "0.999", "restoration Adam beta2"),
    key("restore.lambda_cyc", "10.0", "cycle-consistency weight"),
    key("seg.epochs", "100", "maximum segmentation epochs"),
    key("seg.batch_size", "1", "segmentation batch size"),
    key("seg.lr", "0.0001", "segmentation learning rate"),
    key("seg.beta1", "0.9", "segmentation Adam beta1"),
    key("seg.beta2", "0.999", "segmentation Adam beta2"),
    key("seg.patience", "5", "epochs without improvement before stopping"),
    key(
        "seg.min_delta",
        "1e-6",
        "minimum validation-loss drop that counts as improvement",
    ),
    key("seg.base_filters", "64", "UNet first-level width"),
    key("seg.threshold", "0.5", "probability threshold for vessel masks"),
    key(
        "seg.augment",
        "true",
        "add flipped and rotated copies of training images",
    ),
    key(
        "eval.psnr_bins",
        "[10.0, 40.0, 1.0]",
        "PSNR histogram [lo, hi, width]",
    ),
    key(
        "eval.ssim_bins",
        "[0.0, 1.0, 0.02]",
        "SSIM histogram [lo, hi, width]",
    ),
];

fn def(key: &str) -> Result<&'static KeyDef> {
    KEYS.iter()
        .find(|d| d.key == key)
        .ok_or_else(|| Error::Config(format!("unknown config key {key}")))
}

fn default_value(d: &KeyDef) -> Value {
    serde_json::from_str(d.default).expect("registry defaults are valid JSON")
}

fn same_type(default: &Value, v: &Value) -> bool {
    match (default, v) {
        (Value::Number(d), Value::Number(n)) => !(d.is_u64() && !n.is_u64()),
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => true,
        (Value::Array(d), Value::Array(a)) => match d.first() {
            Some(first) => a.iter().all(|x| same_type(first, x)),
            None => true,
        },
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, Value>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|d| (d.key, default_value(d))).collect(),
        }
    }
}

impl Config {
    pub fn set_value(&mut self, key: &str, v: Value) -> Result<()> {
        let d = def(key)?;
        if !same_type(&default_value(d), &v) {
            return Err(Error::Config(format!(
                "{key} expects a value like {}, got {v}",
                d.default
            )));
        }
        self.values.insert(d.key, v);
        Ok(())
    }

    /// Apply `key=value`; the value is parsed as JSON, else taken as a string.
    pub fn set_override(&mut self, kv: &str) -> Result<()> {
        let (k, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv} is not key=value")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set_value(k.trim(), v)
    }

    pub fn merge_json(&mut self, text: &str) -> Result<()> {
        let v: Value = serde_json::from_str(text)?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config file must hold a JSON object".into()));
        };
        for (k, v) in map {
            self.set_value(&k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_json(&text)
    }

    pub fn get(&self, key: &str) -> Result<&Value> {
        def(key)?;
        Ok(&self.values[key])
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .as_f64()
            .ok_or_else(|| Error::Config(format!("{key} is not a number")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)?
            .as_u64()
            .ok_or_else(|| Error::Config(format!("{key} is not a non-negative integer")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.get(key)?
            .as_bool()
            .ok_or_else(|| Error::Config(format!("{key} is not a boolean")))
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.get(key)?
            .as_str()
            .ok_or_else(|| Error::Config(format!("{key} is not a string")))
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let bad = || Error::Config(format!("{key} must be a list of non-negative integers"));
        let arr = self.get(key)?.as_array().ok_or_else(bad)?;
        arr.iter()
            .map(|v| v.as_u64().map(|x| x as usize).ok_or_else(bad))
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let bad = || Error::Config(format!("{key} must be a list of numbers"));
        let arr = self.get(key)?.as_array().ok_or_else(bad)?;
        arr.iter().map(|v| v.as_f64().ok_or_else(bad)).collect()
    }

    /// All values as one flat JSON object.
    pub fn to_json(&self) -> Value {
        Value::Object(
            self.values
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        )
    }
}

/// One line per key: name, default, description.
pub fn help_table() -> String {
    let width = KEYS.iter().map(|d| d.key.len()).max().unwrap_or(0);
    let dw = KEYS.iter().map(|d| d.default.len()).max().unwrap_or(0);
    KEYS.iter()
        .map(|d| format!("  {:width$}  {:dw$}  {}\n", d.key, d.default, d.doc))
        .collect()
}
