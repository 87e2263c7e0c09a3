//! Toy 3D-CNN backbone: the "head" that turns a video segment into the
//! shared feature map, the "tail" that classifies conditioned features, the
//! model parameter store, and class activation maps.
//!
//! The head/tail split is the seam the conditioning exploits: everything
//! before the split is shared across actors, everything after runs once per
//! actor on its conditioned features. All conv blocks use 3x3x3 kernels
//! with "same" padding and ReLU; there are no normalization layers.

use crate::acam::{AcamVariant, RelationPath};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadBlock {
    pub channels: usize,
    pub stride: [usize; 3],
}

/// Architecture hyperparameters shared by every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_t: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub head: Vec<HeadBlock>,
    pub tail_channels: Vec<usize>,
    pub num_classes: usize,
    /// Spatial bins S of the RoI pooling.
    pub roi_bins: usize,
    /// Actor/context embedding widths are C / attn_ratio.
    pub attn_ratio: usize,
    /// Hidden width of the RoI-pool baseline's FC classifier.
    pub base_hidden: usize,
    pub relation_path: RelationPath,
}

impl ModelConfig {
    /// Default desk-scale configuration: 8x64x64 input down to a 4x8x8x32
    /// feature map.
    pub fn toy() -> Self {
        ModelConfig {
            input_t: 8,
            input_h: 64,
            input_w: 64,
            head: vec![
                HeadBlock { channels: 12, stride: [2, 2, 2] },
                HeadBlock { channels: 24, stride: [1, 2, 2] },
                HeadBlock { channels: 32, stride: [1, 2, 2] },
            ],
            tail_channels: vec![12, 12],
            num_classes: 8,
            roi_bins: 4,
            attn_ratio: 4,
            base_hidden: 32,
            relation_path: RelationPath::TiledConv,
        }
    }

    /// Full-scale tensor contract: 32x400x400 video down to 8x25x25x832,
    /// RoI bins 10, embedding width 208. Intermediate head widths are kept
    /// narrow; only the boundary shapes matter.
    pub fn paper_scale() -> Self {
        ModelConfig {
            input_t: 32,
            input_h: 400,
            input_w: 400,
            head: vec![
                HeadBlock { channels: 8, stride: [2, 2, 2] },
                HeadBlock { channels: 8, stride: [2, 2, 2] },
                HeadBlock { channels: 8, stride: [1, 2, 2] },
                HeadBlock { channels: 832, stride: [1, 2, 2] },
            ],
            tail_channels: vec![8],
            num_classes: 4,
            roi_bins: 10,
            attn_ratio: 4,
            base_hidden: 32,
            relation_path: RelationPath::TiledConv,
        }
    }

    /// Minimal configuration for finite-difference checks of the full graph.
    pub fn micro() -> Self {
        ModelConfig {
            input_t: 4,
            input_h: 16,
            input_w: 16,
            head: vec![
                HeadBlock { channels: 4, stride: [2, 2, 2] },
                HeadBlock { channels: 4, stride: [1, 2, 2] },
                HeadBlock { channels: 8, stride: [1, 2, 2] },
            ],
            tail_channels: vec![4, 4],
            num_classes: 4,
            roi_bins: 2,
            attn_ratio: 4,
            base_hidden: 8,
            relation_path: RelationPath::TiledConv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head.is_empty() {
            return Err(Error::Config("model: head needs at least one conv block".into()));
        }
        if self.tail_channels.is_empty() {
            return Err(Error::Config("model: tail needs at least one conv block".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model: num_classes must be >= 1".into()));
        }
        if self.roi_bins == 0 {
            return Err(Error::Config("model: roi_bins must be >= 1".into()));
        }
        if self.attn_ratio == 0 || self.feature_channels() % self.attn_ratio != 0 {
            return Err(Error::Config(format!(
                "model: attn_ratio {} must divide the feature channels {}",
                self.attn_ratio,
                self.feature_channels()
            )));
        }
        if self.head.iter().any(|b| b.channels == 0 || b.stride.iter().any(|&s| s == 0)) {
            return Err(Error::Config("model: head blocks need positive channels and strides".into()));
        }
        let (t, h, w, _) = self.feature_shape();
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::Config("model: head strides collapse the feature map to nothing".into()));
        }
        Ok(())
    }

    /// Channel width C of the shared feature map.
    pub fn feature_channels(&self) -> usize {
        self.head.last().map(|b| b.channels).unwrap_or(0)
    }

    /// Width N = M of the actor/context embeddings.
    pub fn embed_width(&self) -> usize {
        self.feature_channels() / self.attn_ratio
    }

    /// Shape (T, H, W, C) of the feature map produced by the head.
    pub fn feature_shape(&self) -> (usize, usize, usize, usize) {
        let mut t = self.input_t;
        let mut h = self.input_h;
        let mut w = self.input_w;
        for b in &self.head {
            t = t.div_ceil(b.stride[0]);
            h = h.div_ceil(b.stride[1]);
            w = w.div_ceil(b.stride[2]);
        }
        (t, h, w, self.feature_channels())
    }

    /// Width of the flattened RoI fed to the actor embedding.
    pub fn roi_flat_width(&self) -> usize {
        self.roi_bins * self.roi_bins * self.feature_channels()
    }
}

/// Typed view over the attention parameters (Eq. 1, 3 and 4 weights).
#[derive(Debug)]
pub struct AcamParamsView<'a> {
    pub w_rho: &'a Tensor,
    pub b_rho: &'a Tensor,
    pub w_eta: &'a Tensor,
    pub b_eta: &'a Tensor,
    pub w_omega: &'a Tensor,
    pub w_gamma: &'a Tensor,
    pub b_beta: &'a Tensor,
}

/// Every learned weight of one model variant, as an ordered list of
/// uniquely named tensors. Order is the init order and is what the
/// optimizer and checkpoints iterate.
#[derive(Debug, Clone)]
pub struct ModelParams {
    cfg: ModelConfig,
    variant: AcamVariant,
    entries: Vec<(String, Tensor)>,
}

fn needs_rho(v: AcamVariant) -> bool {
    v != AcamVariant::RoipoolTail
}

fn needs_attention(v: AcamVariant) -> bool {
    matches!(v, AcamVariant::AcrnTail | AcamVariant::AcamTail)
}

fn needs_tail(v: AcamVariant) -> bool {
    v != AcamVariant::RoipoolBase
}

impl ModelParams {
    /// He-initialized parameters for one variant; biases start at zero
    /// except the relation bias, which starts at +1.0 so the attention
    /// gates open at roughly 0.73 and conditioning initially passes the
    /// feature map through.
    pub fn init(cfg: &ModelConfig, variant: AcamVariant, seed: u64) -> ModelParams {
        let mut rng = Rng::from_seed_and_tag(seed, 0x696e6974);
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let k = CONV_KERNEL;

        let mut c_in = 3;
        for (i, b) in cfg.head.iter().enumerate() {
            let fan_in = k * k * k * c_in;
            entries.push((
                format!("head.{i}.kernel"),
                Tensor::he_init(vec![k, k, k, c_in, b.channels], fan_in, &mut rng),
            ));
            entries.push((format!("head.{i}.bias"), Tensor::zeros(vec![b.channels])));
            c_in = b.channels;
        }

        let c = cfg.feature_channels();
        let n = cfg.embed_width();
        if needs_rho(variant) {
            let flat = cfg.roi_flat_width();
            entries.push(("rho.weight".into(), Tensor::he_init(vec![flat, n], flat, &mut rng)));
            entries.push(("rho.bias".into(), Tensor::zeros(vec![n])));
        }
        if needs_attention(variant) {
            entries.push(("eta.kernel".into(), Tensor::he_init(vec![1, 1, 1, c, n], c, &mut rng)));
            entries.push(("eta.bias".into(), Tensor::zeros(vec![n])));
            entries.push(("omega.weight".into(), Tensor::he_init(vec![n, c], n, &mut rng)));
            entries.push(("gamma.weight".into(), Tensor::he_init(vec![n, c], n, &mut rng)));
            entries.push(("beta.bias".into(), Tensor::full(vec![c], 1.0)));
        }
        if variant == AcamVariant::NlroiTail {
            entries.push(("nl.key.kernel".into(), Tensor::he_init(vec![1, 1, 1, c, n], c, &mut rng)));
            entries.push(("nl.key.bias".into(), Tensor::zeros(vec![n])));
            entries.push(("nl.value.kernel".into(), Tensor::he_init(vec![1, 1, 1, c, c], c, &mut rng)));
            entries.push(("nl.value.bias".into(), Tensor::zeros(vec![c])));
        }
        if needs_tail(variant) {
            let mut t_in = c;
            for (i, &t_out) in cfg.tail_channels.iter().enumerate() {
                let fan_in = k * k * k * t_in;
                entries.push((
                    format!("tail.{i}.kernel"),
                    Tensor::he_init(vec![k, k, k, t_in, t_out], fan_in, &mut rng),
                ));
                entries.push((format!("tail.{i}.bias"), Tensor::zeros(vec![t_out])));
                t_in = t_out;
            }
            entries.push((
                "cls.weight".into(),
                Tensor::he_init(vec![t_in, cfg.num_classes], t_in, &mut rng),
            ));
            entries.push(("cls.bias".into(), Tensor::zeros(vec![cfg.num_classes])));
        } else {
            entries.push((
                "base.hidden.weight".into(),
                Tensor::he_init(vec![n, cfg.base_hidden], n, &mut rng),
            ));
            entries.push(("base.hidden.bias".into(), Tensor::zeros(vec![cfg.base_hidden])));
            entries.push((
                "base.out.weight".into(),
                Tensor::he_init(vec![cfg.base_hidden, cfg.num_classes], cfg.base_hidden, &mut rng),
            ));
            entries.push(("base.out.bias".into(), Tensor::zeros(vec![cfg.num_classes])));
        }

        ModelParams { cfg: cfg.clone(), variant, entries }
    }

    pub fn from_entries(
        cfg: ModelConfig,
        variant: AcamVariant,
        entries: Vec<(String, Tensor)>,
    ) -> Result<ModelParams> {
        let expect = ModelParams::init(&cfg, variant, 0);
        if expect.entries.len() != entries.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config expects {}",
                entries.len(),
                expect.entries.len()
            )));
        }
        for ((en, et), (gn, gt)) in expect.entries.iter().zip(&entries) {
            if en != gn {
                return Err(Error::Config(format!("unexpected parameter '{gn}' (expected '{en}')")));
            }
            if et.shape() != gt.shape() {
                return Err(Error::Config(format!(
                    "parameter '{gn}' has shape {:?}, config expects {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
            if !gt.all_finite() {
                return Err(Error::NonFinite { op: "load_params", detail: format!("parameter '{gn}'") });
            }
        }
        Ok(ModelParams { cfg, variant, entries })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> AcamVariant {
        self.variant
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Typed view of the attention parameters; errors for variants that do
    /// not carry them.
    pub fn acam_params(&self) -> Result<AcamParamsView<'_>> {
        if !needs_attention(self.variant) || !needs_rho(self.variant) {
            return Err(Error::Config(format!(
                "variant {} has no attention parameters",
                self.variant
            )));
        }
        Ok(AcamParamsView {
            w_rho: self.get("rho.weight"),
            b_rho: self.get("rho.bias"),
            w_eta: self.get("eta.kernel"),
            b_eta: self.get("eta.bias"),
            w_omega: self.get("omega.weight"),
            w_gamma: self.get("gamma.weight"),
            b_beta: self.get("beta.bias"),
        })
    }
}

/// Push every parameter onto a tape as leaves; returns name -> var.
pub fn push_params<'a>(
    tape: &mut Tape,
    params: &'a ModelParams,
    requires_grad: bool,
) -> HashMap<&'a str, Var> {
    params
        .iter()
        .map(|(name, tensor)| (name, tape.leaf(tensor.clone(), requires_grad)))
        .collect()
}

/// Head: strided conv3d + ReLU blocks from raw video to the shared feature
/// map. Output is nonnegative (ends in ReLU).
pub fn head_forward_vars(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &HashMap<&str, Var>,
    video: Var,
) -> Result<Var> {
    let vshape = tape.value(video).shape();
    let expect = [cfg.input_t, cfg.input_h, cfg.input_w, 3];
    if vshape != expect {
        return Err(Error::shape(
            "head_forward",
            format!("video shape {vshape:?} != configured {expect:?}"),
        ));
    }
    let mut x = video;
    for (i, b) in cfg.head.iter().enumerate() {
        let kernel = params
            .get(format!("head.{i}.kernel").as_str())
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter 'head.{i}.kernel'")))?;
        let bias = params
            .get(format!("head.{i}.bias").as_str())
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter 'head.{i}.bias'")))?;
        let conv = tape.conv3d(x, kernel, b.stride, Padding::Same)?;
        let biased = tape.add_channel(conv, bias)?;
        x = tape.relu(biased);
    }
    Ok(x)
}

pub struct TailOut {
    pub logits: Var,
    /// Activation map after the last tail conv, before global pooling
    /// (the input of class activation maps).
    pub last_map: Var,
}

/// Tail: conv blocks, global average pooling, affine classifier. Returns
/// per-class logits; probabilities are a per-class sigmoid downstream.
pub fn tail_forward_vars(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &HashMap<&str, Var>,
    features: Var,
) -> Result<TailOut> {
    let fshape = tape.value(features).shape();
    if fshape.len() != 4 || fshape[3] != cfg.feature_channels() {
        return Err(Error::shape(
            "tail_forward",
            format!("features {fshape:?} incompatible with C={}", cfg.feature_channels()),
        ));
    }
    let mut x = features;
    for i in 0..cfg.tail_channels.len() {
        let kernel = params
            .get(format!("tail.{i}.kernel").as_str())
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter 'tail.{i}.kernel'")))?;
        let bias = params
            .get(format!("tail.{i}.bias").as_str())
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter 'tail.{i}.bias'")))?;
        let conv = tape.conv3d(x, kernel, [1, 1, 1], Padding::Same)?;
        let biased = tape.add_channel(conv, bias)?;
        x = tape.relu(biased);
    }
    let last_map = x;
    let pooled = tape.global_avg_pool(x)?;
    let w = params.get("cls.weight").copied().ok_or_else(|| Error::Config("missing 'cls.weight'".into()))?;
    let b = params.get("cls.bias").copied().ok_or_else(|| Error::Config("missing 'cls.bias'".into()))?;
    let logits = tape.affine(pooled, w, b)?;
    Ok(TailOut { logits, last_map })
}

/// Plain-tensor head forward for inference paths.
pub fn head_forward(cfg: &ModelConfig, params: &ModelParams, video: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = push_params(&mut tape, params, false);
    let v = tape.leaf(video.clone(), false);
    let out = head_forward_vars(&mut tape, cfg, &vars, v)?;
    Ok(tape.value(out).clone())
}

/// Class activation map: per-position contribution of class `class_k`
/// under the global-average-pool classifier. Output `[T, H, W]`.
pub fn cam(last_map: &Tensor, classifier_weight: &Tensor, class_k: usize) -> Result<Tensor> {
    if last_map.rank() != 4 || classifier_weight.rank() != 2 {
        return Err(Error::shape(
            "cam",
            format!("map {:?} / weight {:?}", last_map.shape(), classifier_weight.shape()),
        ));
    }
    let c = last_map.shape()[3];
    let (wc, k_total) = (classifier_weight.shape()[0], classifier_weight.shape()[1]);
    if wc != c {
        return Err(Error::shape("cam", format!("map channels {c} != weight rows {wc}")));
    }
    if class_k >= k_total {
        return Err(Error::Data(format!("cam: class index {class_k} out of range (num_classes {k_total})")));
    }
    let shape = last_map.shape();
    let positions = shape[0] * shape[1] * shape[2];
    let mdata = last_map.data();
    let wdata = classifier_weight.data();
    let mut out = vec![0.0f32; positions];
    for p in 0..positions {
        let mut acc = 0.0f64;
        for j in 0..c {
            acc += mdata[p * c + j] as f64 * wdata[j * k_total + class_k] as f64;
        }
        out[p] = acc as f32;
    }
    Tensor::new(vec![shape[0], shape[1], shape[2]], out)
}

/// Reduce a `[T, H, W]` map over time by maximum, for 2D visualization.
pub fn cam_temporal_max(cam_map: &Tensor) -> Result<Tensor> {
    if cam_map.rank() != 3 {
        return Err(Error::shape("cam_temporal_max", format!("expected rank 3, got {:?}", cam_map.shape())));
    }
    let (t, h, w) = (cam_map.shape()[0], cam_map.shape()[1], cam_map.shape()[2]);
    let data = cam_map.data();
    let mut out = vec![f32::NEG_INFINITY; h * w];
    for ti in 0..t {
        for p in 0..h * w {
            out[p] = out[p].max(data[ti * h * w + p]);
        }
    }
    Tensor::new(vec![h, w], out)
}
