//! Convolutional block attention: a channel gate followed by a spatial gate,
//! both multiplied onto the feature map.
//!
//! The channel gate squashes the sum of a shared two-layer perceptron
//! (`C -> C/r -> C`, rectified hidden layer) applied to the spatially
//! average-pooled and max-pooled descriptors. The spatial gate squashes a
//! `k x k` convolution over the stacked channel-mean and channel-max maps of
//! the channel-refined features. Gates are applied in that order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, NetParams, ParamDef, ParamKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hyperparameters of one attention block.
///
/// Defaults (`reduction_ratio = 16`, `spatial_kernel = 7`) are the common
/// choices for this block; nothing else pins them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamSpec {
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl Default for CbamSpec {
    fn default() -> Self {
        CbamSpec {
            reduction_ratio: 16,
            spatial_kernel: 7,
        }
    }
}

impl CbamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::InvalidArgument("reduction_ratio must be positive".into()));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "spatial_kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        self.validate()?;
        if !channels.is_multiple_of(self.reduction_ratio) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible by reduction ratio {}",
                self.reduction_ratio
            )));
        }
        Ok(())
    }

    pub fn hidden(&self, channels: usize) -> usize {
        channels / self.reduction_ratio
    }

    /// Parameters of one block over `channels` channels, named under `prefix`.
    pub fn layout(&self, prefix: &str, channels: usize) -> Vec<ParamDef> {
        let h = self.hidden(channels);
        let k = self.spatial_kernel;
        vec![
            ParamDef::new(
                join(prefix, "mlp1.weight"),
                &[h, channels, 1, 1],
                ParamKind::Weight,
            ),
            ParamDef::new(join(prefix, "mlp1.bias"), &[h], ParamKind::Bias),
            ParamDef::new(
                join(prefix, "mlp2.weight"),
                &[channels, h, 1, 1],
                ParamKind::Weight,
            ),
            ParamDef::new(join(prefix, "mlp2.bias"), &[channels], ParamKind::Bias),
            ParamDef::new(join(prefix, "spatial.weight"), &[1, 2, k, k], ParamKind::Weight),
            ParamDef::new(join(prefix, "spatial.bias"), &[1], ParamKind::Bias),
        ]
    }

    pub fn param_count(&self, channels: usize) -> usize {
        self.layout("", channels).iter().map(ParamDef::numel).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A validated `(B, C, H, W)` activation tensor with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty feature map {:?}", t.shape())));
        }
        t.ensure_finite("feature map")?;
        Ok(FeatureMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn shared_mlp(tape: &mut Tape, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let h = tape.conv2d(
        x,
        p.var(&join(prefix, "mlp1.weight"))?,
        Some(p.var(&join(prefix, "mlp1.bias"))?),
        1,
        0,
    )?;
    let h = tape.relu(h);
    tape.conv2d(
        h,
        p.var(&join(prefix, "mlp2.weight"))?,
        Some(p.var(&join(prefix, "mlp2.bias"))?),
        1,
        0,
    )
}

/// Channel gate `(B, C, 1, 1)` for `x`.
pub(crate) fn channel_gate(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, spec: &CbamSpec) -> Result<Var> {
    let (_, c, _, _) = tape.value(x).dims4()?;
    spec.check_channels(c)?;
    let avg = tape.global_avg_pool(x)?;
    let max = tape.global_max_pool(x)?;
    let a = shared_mlp(tape, avg, p, prefix)?;
    let m = shared_mlp(tape, max, p, prefix)?;
    let s = tape.add(a, m)?;
    Ok(tape.sigmoid(s))
}

/// Spatial gate `(B, 1, H, W)` for `x`.
pub(crate) fn spatial_gate(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, spec: &CbamSpec) -> Result<Var> {
    spec.validate()?;
    let mean = tape.channel_mean(x)?;
    let max = tape.channel_max(x)?;
    let stacked = tape.concat_channels(mean, max)?;
    let s = tape.conv2d(
        stacked,
        p.var(&join(prefix, "spatial.weight"))?,
        Some(p.var(&join(prefix, "spatial.bias"))?),
        1,
        (spec.spatial_kernel - 1) / 2,
    )?;
    Ok(tape.sigmoid(s))
}

/// Full block: `x * Mc(x)` then `* Ms(x * Mc(x))`.
pub(crate) fn cbam(tape: &mut Tape, x: Var, p: &Bound, prefix: &str, spec: &CbamSpec) -> Result<Var> {
    let mc = channel_gate(tape, x, p, prefix, spec)?;
    let refined = tape.mul(x, mc)?;
    let ms = spatial_gate(tape, refined, p, prefix, spec)?;
    tape.mul(refined, ms)
}

/// Per-channel attention weights, each in `(0, 1)`.
pub fn channel_attention(f: &FeatureMap, spec: &CbamSpec, params: &NetParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f.tensor().clone());
    let p = params.bind(&mut tape, false);
    let out = channel_gate(&mut tape, x, &p, "", spec)?;
    Ok(tape.value(out).clone())
}

/// Per-position attention weights `(B, 1, H, W)`, each in `(0, 1)`.
pub fn spatial_attention(f: &FeatureMap, spec: &CbamSpec, params: &NetParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f.tensor().clone());
    let p = params.bind(&mut tape, false);
    let out = spatial_gate(&mut tape, x, &p, "", spec)?;
    Ok(tape.value(out).clone())
}

/// Refine `f` with both gates; the output has the shape of `f`.
pub fn cbam_forward(f: &FeatureMap, spec: &CbamSpec, params: &NetParams) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let x = tape.constant(f.tensor().clone());
    let p = params.bind(&mut tape, false);
    let out = cbam(&mut tape, x, &p, "", spec)?;
    Ok(FeatureMap(tape.value(out).clone()))
}
