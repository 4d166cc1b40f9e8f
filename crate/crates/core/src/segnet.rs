//! CBAM-UNet vessel segmenter.
//!
//! Four encoder levels (two conv/IN/ReLU layers, attention, 2x2 max-pool), a
//! bottleneck of the same form, and four decoder levels (stride-2 transposed
//! conv, concatenation with the matching skip, two conv/IN/ReLU layers,
//! attention), then a 1x1 conv and a logistic head. Inputs are RGB in
//! `[0, 1]`; outputs are per-pixel vessel probabilities.

use serde::{Deserialize, Serialize};

use crate::attention::{self, CbamSpec};
use crate::error::{Error, Result};
use crate::networks::{norm, IMAGE_CHANNELS, RANGE_EPS};
use crate::params::{Bound, NetParams, ParamDef, ParamKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub levels: usize,
    pub base_filters: usize,
    pub use_cbam: bool,
    pub cbam: CbamSpec,
    pub threshold: f64,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            levels: LEVELS,
            base_filters: 64,
            use_cbam: true,
            cbam: CbamSpec::default(),
            threshold: 0.5,
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(Error::Config(format!("UNet has exactly {LEVELS} levels")));
        }
        if self.base_filters < 4 {
            return Err(Error::Config("unet base_filters must be at least 4".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("unet threshold must lie in (0, 1)".into()));
        }
        if self.use_cbam {
            self.cbam.check_channels(self.base_filters)?;
        }
        Ok(())
    }

    /// Width of encoder level `l` (`l == LEVELS` is the bottleneck).
    pub fn width(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    fn block_defs(&self, defs: &mut Vec<ParamDef>, prefix: &str, in_ch: usize, f: usize) {
        defs.push(ParamDef::new(
            format!("{prefix}.conv1.weight"),
            &[f, in_ch, 3, 3],
            ParamKind::Weight,
        ));
        defs.push(ParamDef::new(
            format!("{prefix}.norm1.scale"),
            &[f],
            ParamKind::Scale,
        ));
        defs.push(ParamDef::new(
            format!("{prefix}.norm1.offset"),
            &[f],
            ParamKind::Offset,
        ));
        defs.push(ParamDef::new(
            format!("{prefix}.conv2.weight"),
            &[f, f, 3, 3],
            ParamKind::Weight,
        ));
        defs.push(ParamDef::new(
            format!("{prefix}.norm2.scale"),
            &[f],
            ParamKind::Scale,
        ));
        defs.push(ParamDef::new(
            format!("{prefix}.norm2.offset"),
            &[f],
            ParamKind::Offset,
        ));
        if self.use_cbam {
            defs.extend(self.cbam.layout(&format!("{prefix}.cbam"), f));
        }
    }

    pub fn layout(&self) -> Vec<ParamDef> {
        let mut defs = Vec::new();
        let mut in_ch = IMAGE_CHANNELS;
        for l in 0..self.levels {
            self.block_defs(&mut defs, &format!("enc.{l}"), in_ch, self.width(l));
            in_ch = self.width(l);
        }
        self.block_defs(&mut defs, "bottleneck", in_ch, self.width(self.levels));
        for l in (0..self.levels).rev() {
            let f = self.width(l);
            defs.push(ParamDef::new(
                format!("dec.{l}.up.weight"),
                &[2 * f, f, 2, 2],
                ParamKind::Weight,
            ));
            defs.push(ParamDef::new(format!("dec.{l}.up.bias"), &[f], ParamKind::Bias));
            self.block_defs(&mut defs, &format!("dec.{l}"), 2 * f, f);
        }
        defs.push(ParamDef::new(
            "head.weight",
            &[1, self.base_filters, 1, 1],
            ParamKind::Weight,
        ));
        defs.push(ParamDef::new("head.bias", &[1], ParamKind::Bias));
        defs
    }

    pub fn init(&self, rng: &mut impl rand::Rng) -> Result<NetParams> {
        self.validate()?;
        NetParams::init(&self.layout(), rng)
    }
}

fn block(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, spec: &UNetSpec) -> Result<Var> {
    let mut h = x;
    for c in 1..=2 {
        h = tape.conv2d(h, p.var(&format!("{prefix}.conv{c}.weight"))?, None, 1, 1)?;
        h = norm(tape, h, p, &format!("{prefix}.norm{c}"))?;
        h = tape.relu(h);
    }
    if spec.use_cbam {
        h = attention::cbam(tape, h, p, &format!("{prefix}.cbam"), &spec.cbam)?;
    }
    Ok(h)
}

/// Record the network up to the pre-logistic logits `(B, 1, H, W)`.
pub(crate) fn unet_logits_graph(tape: &mut Tape, x: Var, p: &Bound, spec: &UNetSpec) -> Result<Var> {
    let mut skips = Vec::with_capacity(spec.levels);
    let mut h = x;
    for l in 0..spec.levels {
        h = block(tape, h, p, &format!("enc.{l}"), spec)?;
        skips.push(h);
        h = tape.max_pool2(h)?;
    }
    h = block(tape, h, p, "bottleneck", spec)?;
    for l in (0..spec.levels).rev() {
        let up = tape.conv_transpose2d(
            h,
            p.var(&format!("dec.{l}.up.weight"))?,
            Some(p.var(&format!("dec.{l}.up.bias"))?),
            2,
            0,
            0,
        )?;
        let cat = tape.concat_channels(skips[l], up)?;
        h = block(tape, cat, p, &format!("dec.{l}"), spec)?;
    }
    tape.conv2d(h, p.var("head.weight")?, Some(p.var("head.bias")?), 1, 0)
}

pub(crate) fn check_unet_input(img: &Tensor, spec: &UNetSpec) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
    }
    let d = spec.divisor();
    if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
        return Err(Error::Shape(format!(
            "spatial size not divisible by {d}: {h}x{w}"
        )));
    }
    let (lo, hi) = img.min_max();
    if !(lo >= -RANGE_EPS && hi <= 1.0 + RANGE_EPS) {
        return Err(Error::InvalidArgument(format!(
            "segmenter input must lie in [0, 1], got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Vessel probability map `(B, 1, H, W)` for a `(B, 3, H, W)` batch in `[0, 1]`.
pub fn unet_forward(img: &Tensor, spec: &UNetSpec, params: &NetParams) -> Result<Tensor> {
    spec.validate()?;
    check_unet_input(img, spec)?;
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let p = params.bind(&mut tape, false);
    let logits = unet_logits_graph(&mut tape, x, &p, spec)?;
    let prob = tape.sigmoid(logits);
    Ok(tape.value(prob).clone())
}

/// `1` where `prob >= threshold`, else `0`.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(prob.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> UNetSpec {
        UNetSpec {
            base_filters: 4,
            cbam: CbamSpec {
                reduction_ratio: 4,
                spatial_kernel: 3,
            },
            ..Default::default()
        }
    }

    fn params(spec: &UNetSpec) -> NetParams {
        spec.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn square_and_non_square_shapes() {
        let spec = tiny();
        let p = params(&spec);
        let x = Tensor::from_fn(&[1, 3, 64, 64], |i| (i % 17) as f64 / 16.0);
        let y = unet_forward(&x, &spec, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let x = Tensor::from_fn(&[2, 3, 96, 112], |i| (i % 13) as f64 / 12.0);
        assert_eq!(unet_forward(&x, &spec, &p).unwrap().shape(), &[2, 1, 96, 112]);
    }

    #[test]
    fn rejects_indivisible_size() {
        let spec = tiny();
        let p = params(&spec);
        let err = unet_forward(&Tensor::zeros(&[1, 3, 63, 64]), &spec, &p).unwrap_err();
        assert!(err.to_string().contains("spatial size not divisible by 16"));
    }

    #[test]
    fn cbam_toggle_removes_only_attention() {
        let on = UNetSpec::default();
        let off = UNetSpec {
            use_cbam: false,
            ..on.clone()
        };
        let kept: Vec<_> = on
            .layout()
            .into_iter()
            .filter(|d| !d.name.contains(".cbam."))
            .collect();
        assert_eq!(kept, off.layout());
    }

    #[test]
    fn binarize_examples() {
        let t = |v: Vec<f64>| Tensor::new(&[v.len()], v).unwrap();
        assert_eq!(binarize(&t(vec![0.9; 4]), 0.5).unwrap().data(), &[1.0; 4]);
        assert_eq!(binarize(&t(vec![0.1; 4]), 0.5).unwrap().data(), &[0.0; 4]);
        assert_eq!(
            binarize(&t(vec![0.2, 0.5, 0.7]), 0.5).unwrap().data(),
            &[0.0, 1.0, 1.0]
        );
        assert!(binarize(&t(vec![0.2]), 1.0).is_err());
        assert!(binarize(&t(vec![0.2]), 0.0).is_err());
    }
}
