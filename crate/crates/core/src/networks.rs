//! Restoration generator and patch discriminator.
//!
//! Generator: three encoder stages (conv, instance norm, ReLU), a stack of
//! residual attention blocks, and three decoder stages (transposed conv,
//! instance norm, ReLU; the last one ends in tanh instead). Each decoder stage
//! mirrors the stride of its encoder counterpart with padding `(k-1)/2` and
//! output padding `stride-1`, which exactly undoes the encoder's downsampling.
//!
//! Discriminator: an input conv with leaky ReLU, normalized leaky-ReLU conv
//! blocks, and a single-channel output conv producing raw patch scores.

use serde::{Deserialize, Serialize};

use crate::attention::{self, join, CbamSpec};
use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::params::{Bound, NetParams, ParamDef, ParamKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const IMAGE_CHANNELS: usize = 3;
/// Slack allowed on the `[-1, 1]` input range.
pub const RANGE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub stem_filters: Vec<usize>,
    pub stem_kernels: Vec<usize>,
    pub stem_strides: Vec<usize>,
    pub n_res_blocks: usize,
    pub res_filters: usize,
    pub res_kernel: usize,
    pub up_filters: Vec<usize>,
    pub up_kernels: Vec<usize>,
    pub use_cbam: bool,
    pub cbam: CbamSpec,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            stem_filters: vec![64, 128, 256],
            stem_kernels: vec![7, 3, 3],
            stem_strides: vec![1, 2, 2],
            n_res_blocks: 9,
            res_filters: 256,
            res_kernel: 3,
            up_filters: vec![128, 64, 3],
            up_kernels: vec![3, 3, 7],
            use_cbam: true,
            cbam: CbamSpec::default(),
        }
    }
}

/// One row of a network's layer table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl GeneratorSpec {
    /// Same layout with different widths and depth, keeping the decoder's
    /// mirrored widths consistent.
    pub fn scaled(stem_filters: [usize; 3], n_res_blocks: usize, cbam: CbamSpec) -> Self {
        GeneratorSpec {
            stem_filters: stem_filters.to_vec(),
            n_res_blocks,
            res_filters: stem_filters[2],
            up_filters: vec![stem_filters[1], stem_filters[0], IMAGE_CHANNELS],
            cbam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lens = [
            self.stem_filters.len(),
            self.stem_kernels.len(),
            self.stem_strides.len(),
            self.up_filters.len(),
            self.up_kernels.len(),
        ];
        if lens.iter().any(|&l| l != 3) {
            return Err(Error::Config(
                "generator filter/kernel/stride lists must have three entries".into(),
            ));
        }
        if self.n_res_blocks == 0 {
            return Err(Error::Config(
                "generator needs at least one residual block".into(),
            ));
        }
        if self.res_filters != self.stem_filters[2] {
            return Err(Error::Config(
                "residual width must equal the last encoder width".into(),
            ));
        }
        if self.up_filters[2] != IMAGE_CHANNELS {
            return Err(Error::Config("generator must emit 3 channels".into()));
        }
        let kernels = self
            .stem_kernels
            .iter()
            .chain(&self.up_kernels)
            .chain(std::iter::once(&self.res_kernel));
        for &k in kernels {
            if k % 2 == 0 {
                return Err(Error::Config(format!("generator kernels must be odd, got {k}")));
            }
        }
        if self.stem_strides.contains(&0) || self.stem_filters.contains(&0) {
            return Err(Error::Config(
                "generator strides and widths must be positive".into(),
            ));
        }
        if self.use_cbam {
            self.cbam.check_channels(self.res_filters)?;
        }
        Ok(())
    }

    /// Total spatial downsampling of the encoder.
    pub fn downsample(&self) -> usize {
        self.stem_strides.iter().product()
    }

    fn up_geometry(&self, i: usize) -> (usize, usize, usize, usize) {
        let stride = self.stem_strides[2 - i];
        let k = self.up_kernels[i];
        let in_ch = if i == 0 {
            self.res_filters
        } else {
            self.up_filters[i - 1]
        };
        (in_ch, stride, (k - 1) / 2, stride - 1)
    }

    pub fn layout(&self) -> Vec<ParamDef> {
        let mut defs = Vec::new();
        let mut in_ch = IMAGE_CHANNELS;
        for i in 0..3 {
            let (f, k) = (self.stem_filters[i], self.stem_kernels[i]);
            defs.push(ParamDef::new(
                format!("stem.{i}.weight"),
                &[f, in_ch, k, k],
                ParamKind::Weight,
            ));
            norm_defs(&mut defs, &format!("stem.{i}.norm"), f);
            in_ch = f;
        }
        let (f, k) = (self.res_filters, self.res_kernel);
        for j in 0..self.n_res_blocks {
            for c in 1..=2 {
                defs.push(ParamDef::new(
                    format!("res.{j}.conv{c}.weight"),
                    &[f, f, k, k],
                    ParamKind::Weight,
                ));
                norm_defs(&mut defs, &format!("res.{j}.norm{c}"), f);
            }
            if self.use_cbam {
                defs.extend(self.cbam.layout(&format!("res.{j}.cbam"), f));
            }
        }
        for i in 0..3 {
            let (in_ch, ..) = self.up_geometry(i);
            let (f, k) = (self.up_filters[i], self.up_kernels[i]);
            defs.push(ParamDef::new(
                format!("up.{i}.weight"),
                &[in_ch, f, k, k],
                ParamKind::Weight,
            ));
            if i < 2 {
                norm_defs(&mut defs, &format!("up.{i}.norm"), f);
            } else {
                defs.push(ParamDef::new(format!("up.{i}.bias"), &[f], ParamKind::Bias));
            }
        }
        defs
    }

    pub fn layer_table(&self) -> Vec<LayerInfo> {
        let mut rows = Vec::new();
        for i in 0..3 {
            rows.push(LayerInfo {
                name: format!("stem.{i}"),
                kind: "conv",
                filters: self.stem_filters[i],
                kernel: self.stem_kernels[i],
                stride: self.stem_strides[i],
            });
        }
        for j in 0..self.n_res_blocks {
            rows.push(LayerInfo {
                name: format!("res.{j}"),
                kind: if self.use_cbam { "res_cbam" } else { "res" },
                filters: self.res_filters,
                kernel: self.res_kernel,
                stride: 1,
            });
        }
        for i in 0..3 {
            let (_, stride, ..) = self.up_geometry(i);
            rows.push(LayerInfo {
                name: format!("up.{i}"),
                kind: "conv_transpose",
                filters: self.up_filters[i],
                kernel: self.up_kernels[i],
                stride,
            });
        }
        rows
    }

    pub fn init(&self, rng: &mut impl rand::Rng) -> Result<NetParams> {
        self.validate()?;
        NetParams::init(&self.layout(), rng)
    }
}

fn norm_defs(defs: &mut Vec<ParamDef>, prefix: &str, channels: usize) {
    defs.push(ParamDef::new(
        format!("{prefix}.scale"),
        &[channels],
        ParamKind::Scale,
    ));
    defs.push(ParamDef::new(
        format!("{prefix}.offset"),
        &[channels],
        ParamKind::Offset,
    ));
}

pub(crate) fn norm(tape: &mut Tape, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    tape.instance_norm(
        x,
        p.var(&join(prefix, "scale"))?,
        p.var(&join(prefix, "offset"))?,
        NORM_EPS,
    )
}

/// Record the generator on `tape`.
pub(crate) fn generator_graph(tape: &mut Tape, x: Var, p: &Bound, spec: &GeneratorSpec) -> Result<Var> {
    let mut h = x;
    for i in 0..3 {
        let k = spec.stem_kernels[i];
        h = tape.conv2d(
            h,
            p.var(&format!("stem.{i}.weight"))?,
            None,
            spec.stem_strides[i],
            (k - 1) / 2,
        )?;
        h = norm(tape, h, p, &format!("stem.{i}.norm"))?;
        h = tape.relu(h);
    }
    let pad = (spec.res_kernel - 1) / 2;
    for j in 0..spec.n_res_blocks {
        let mut r = tape.conv2d(h, p.var(&format!("res.{j}.conv1.weight"))?, None, 1, pad)?;
        r = norm(tape, r, p, &format!("res.{j}.norm1"))?;
        r = tape.relu(r);
        r = tape.conv2d(r, p.var(&format!("res.{j}.conv2.weight"))?, None, 1, pad)?;
        r = norm(tape, r, p, &format!("res.{j}.norm2"))?;
        if spec.use_cbam {
            r = attention::cbam(tape, r, p, &format!("res.{j}.cbam"), &spec.cbam)?;
        }
        h = tape.add(h, r)?;
    }
    for i in 0..3 {
        let (_, stride, pad, out_pad) = spec.up_geometry(i);
        let w = p.var(&format!("up.{i}.weight"))?;
        if i < 2 {
            h = tape.conv_transpose2d(h, w, None, stride, pad, out_pad)?;
            h = norm(tape, h, p, &format!("up.{i}.norm"))?;
            h = tape.relu(h);
        } else {
            let b = p.var(&format!("up.{i}.bias"))?;
            h = tape.conv_transpose2d(h, w, Some(b), stride, pad, out_pad)?;
            h = tape.tanh(h);
        }
    }
    Ok(h)
}

pub(crate) fn check_generator_input(img: &Tensor, spec: &GeneratorSpec) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
    }
    let f = spec.downsample();
    if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("spatial size {h}x{w} not divisible by {f}")));
    }
    let (lo, hi) = img.min_max();
    if !(lo >= -1.0 - RANGE_EPS && hi <= 1.0 + RANGE_EPS) {
        return Err(Error::InvalidArgument(format!(
            "generator input must lie in [-1, 1], got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Translate a `(B, 3, H, W)` batch in `[-1, 1]`; output has the same shape
/// with entries in `(-1, 1)`.
pub fn generator_forward(img: &Tensor, spec: &GeneratorSpec, params: &NetParams) -> Result<Tensor> {
    spec.validate()?;
    check_generator_input(img, spec)?;
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let p = params.bind(&mut tape, false);
    let y = generator_graph(&mut tape, x, &p, spec)?;
    Ok(tape.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub padding: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            filters: vec![64, 128, 256, 512, 512, 1],
            kernel: 4,
            strides: vec![2, 2, 2, 2, 1, 1],
            padding: 1,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorSpec {
    /// The classic five-layer patch discriminator (70-pixel receptive field).
    pub fn classic() -> Self {
        DiscriminatorSpec {
            filters: vec![64, 128, 256, 512, 1],
            strides: vec![2, 2, 2, 1, 1],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.len() != self.strides.len() || self.filters.len() < 2 {
            return Err(Error::Config(
                "discriminator needs matching filter/stride lists of length >= 2".into(),
            ));
        }
        if self.filters.last() != Some(&1) {
            return Err(Error::Config(
                "discriminator must end in one output channel".into(),
            ));
        }
        if self.kernel == 0 || self.strides.contains(&0) || self.filters.contains(&0) {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<ParamDef> {
        let mut defs = Vec::new();
        let mut in_ch = IMAGE_CHANNELS;
        let last = self.filters.len() - 1;
        let k = self.kernel;
        for (i, &f) in self.filters.iter().enumerate() {
            defs.push(ParamDef::new(
                format!("layers.{i}.weight"),
                &[f, in_ch, k, k],
                ParamKind::Weight,
            ));
            if i == 0 || i == last {
                defs.push(ParamDef::new(format!("layers.{i}.bias"), &[f], ParamKind::Bias));
            } else {
                norm_defs(&mut defs, &format!("layers.{i}.norm"), f);
            }
            in_ch = f;
        }
        defs
    }

    pub fn init(&self, rng: &mut impl rand::Rng) -> Result<NetParams> {
        self.validate()?;
        NetParams::init(&self.layout(), rng)
    }

    /// Score-map size for an `h x w` input, if non-empty.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.strides.iter().try_fold((h, w), |(h, w), &s| {
            Some((
                conv_out_len(h, self.kernel, s, self.padding)?,
                conv_out_len(w, self.kernel, s, self.padding)?,
            ))
        })
    }
}

/// Side length of the input patch seen by one output score.
pub fn receptive_field(spec: &DiscriminatorSpec) -> usize {
    spec.strides
        .iter()
        .rev()
        .fold(1, |rf, &s| rf * s + spec.kernel - s)
}

pub(crate) fn discriminator_graph(
    tape: &mut Tape,
    x: Var,
    p: &Bound,
    spec: &DiscriminatorSpec,
) -> Result<Var> {
    let last = spec.filters.len() - 1;
    let mut h = x;
    for (i, &s) in spec.strides.iter().enumerate() {
        let w = p.var(&format!("layers.{i}.weight"))?;
        if i == 0 || i == last {
            let b = p.var(&format!("layers.{i}.bias"))?;
            h = tape.conv2d(h, w, Some(b), s, spec.padding)?;
        } else {
            h = tape.conv2d(h, w, None, s, spec.padding)?;
            h = norm(tape, h, p, &format!("layers.{i}.norm"))?;
        }
        if i != last {
            h = tape.leaky_relu(h, spec.leaky_slope);
        }
    }
    Ok(h)
}

pub(crate) fn check_discriminator_input(img: &Tensor, spec: &DiscriminatorSpec) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    if c != IMAGE_CHANNELS {
        return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
    }
    if spec.output_size(h, w).is_none() {
        return Err(Error::Shape(format!(
            "input {h}x{w} is too small for the discriminator"
        )));
    }
    Ok(())
}

/// Raw (unsquashed) patch scores `(B, 1, h, w)`.
pub fn discriminator_forward(img: &Tensor, spec: &DiscriminatorSpec, params: &NetParams) -> Result<Tensor> {
    spec.validate()?;
    check_discriminator_input(img, spec)?;
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let p = params.bind(&mut tape, false);
    let y = discriminator_graph(&mut tape, x, &p, spec)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    fn tiny() -> GeneratorSpec {
        GeneratorSpec::scaled(
            [4, 8, 8],
            2,
            CbamSpec {
                reduction_ratio: 4,
                spatial_kernel: 3,
            },
        )
    }

    #[test]
    fn six_layer_table() {
        let spec = GeneratorSpec::default();
        let t = spec.layer_table();
        let filters: Vec<usize> = t.iter().map(|r| r.filters).collect();
        let mut want = vec![64, 128, 256];
        want.extend([256; 9]);
        want.extend([128, 64, 3]);
        assert_eq!(filters, want);
        let kernels: Vec<usize> = t.iter().map(|r| r.kernel).collect();
        assert_eq!(&kernels[..3], &[7, 3, 3]);
        assert_eq!(&kernels[12..], &[3, 3, 7]);
        assert_eq!(t.iter().filter(|r| r.kind == "res_cbam").count(), 9);
        let strides: Vec<usize> = t.iter().map(|r| r.stride).collect();
        assert_eq!(&strides[..3], &[1, 2, 2]);
        assert_eq!(&strides[12..], &[2, 2, 1]);
    }

    #[test]
    fn cbam_toggle_changes_only_attention_params() {
        let on = GeneratorSpec::default();
        let off = GeneratorSpec {
            use_cbam: false,
            ..on.clone()
        };
        let n_on: usize = on.layout().iter().map(ParamDef::numel).sum();
        let n_off: usize = off.layout().iter().map(ParamDef::numel).sum();
        assert_eq!(n_on - n_off, 9 * on.cbam.param_count(256));
        let off_defs = off.layout();
        let on_non_cbam: Vec<_> = on
            .layout()
            .into_iter()
            .filter(|d| !d.name.contains(".cbam."))
            .collect();
        assert_eq!(on_non_cbam, off_defs);
    }

    #[test]
    fn generator_shape_and_range() {
        let spec = tiny();
        let p = spec.init(&mut rng()).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 24], |i| ((i * 7919) % 200) as f64 / 100.0 - 1.0);
        let y = generator_forward(&x, &spec, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_weights_give_zero_image() {
        let spec = tiny();
        let mut p = spec.init(&mut rng()).unwrap();
        let weights: Vec<String> = p
            .names()
            .filter(|n| n.ends_with("weight"))
            .map(String::from)
            .collect();
        for n in weights {
            p.get_mut(&n)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_fn(&[1, 3, 64, 64], |i| (i as f64 * 0.01).sin());
        let y = generator_forward(&x, &spec, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_rejects_bad_inputs() {
        let spec = tiny();
        let p = spec.init(&mut rng()).unwrap();
        assert!(generator_forward(&Tensor::zeros(&[1, 3, 18, 16]), &spec, &p).is_err());
        assert!(generator_forward(&Tensor::full(&[1, 3, 16, 16], 1.5), &spec, &p).is_err());
    }

    #[test]
    fn discriminator_output_sizes() {
        let spec = DiscriminatorSpec::default();
        assert_eq!(spec.output_size(256, 256), Some((14, 14)));
        assert_eq!(spec.output_size(128, 128), Some((6, 6)));
        let small = DiscriminatorSpec {
            filters: vec![2, 4, 4, 4, 4, 1],
            ..spec
        };
        let p = small.init(&mut rng()).unwrap();
        let y = discriminator_forward(&Tensor::zeros(&[1, 3, 128, 128]), &small, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
        assert!(discriminator_forward(&Tensor::zeros(&[1, 3, 32, 32]), &small, &p).is_err());
    }

    #[test]
    fn zero_discriminator_scores_zero() {
        let spec = DiscriminatorSpec {
            filters: vec![2, 4, 4, 4, 4, 1],
            ..Default::default()
        };
        let layout = spec.layout();
        let mut p = NetParams::new();
        for d in layout {
            let fill = if d.kind == ParamKind::Scale { 1.0 } else { 0.0 };
            p.insert(d.name, Tensor::full(&d.shape, fill)).unwrap();
        }
        let x = Tensor::from_fn(&[1, 3, 64, 64], |i| (i as f64).cos());
        let y = discriminator_forward(&x, &spec, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(receptive_field(&DiscriminatorSpec::classic()), 70);
        assert_eq!(receptive_field(&DiscriminatorSpec::default()), 142);
        let point = DiscriminatorSpec {
            filters: vec![1],
            kernel: 1,
            strides: vec![1],
            padding: 0,
            leaky_slope: 0.2,
        };
        assert_eq!(receptive_field(&point), 1);
    }
}
