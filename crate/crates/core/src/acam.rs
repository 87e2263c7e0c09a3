//! Actor-conditioned attention: the conditioning chain that turns a shared
//! feature map plus one actor box into per-actor conditioned features, and
//! the comparison heads built around it.
//!
//! The chain per actor: RoI-pool the actor region and embed it into an
//! actor feature vector; embed the whole map into a denser context tensor;
//! combine both into a relation tensor (one linear score per position and
//! channel, no activation); squash with a sigmoid into an attention map in
//! (0,1); multiply the attention map into the original features. The
//! relation tensor can be computed directly or via the tile-concat-conv
//! realization; both paths are exposed and agree.

use crate::backbone::{self, ModelConfig};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

/// Normalized actor bounding box on the center frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorBox {
    pub y1: f32,
    pub x1: f32,
    pub y2: f32,
    pub x2: f32,
    pub actor_id: u32,
}

impl ActorBox {
    /// Clamp coordinates into [0,1] and validate that the box keeps
    /// positive area.
    pub fn new(y1: f32, x1: f32, y2: f32, x2: f32, actor_id: u32) -> Result<Self> {
        let b = ActorBox {
            y1: y1.clamp(0.0, 1.0),
            x1: x1.clamp(0.0, 1.0),
            y2: y2.clamp(0.0, 1.0),
            x2: x2.clamp(0.0, 1.0),
            actor_id,
        };
        if b.y1 >= b.y2 || b.x1 >= b.x2 {
            return Err(Error::DegenerateBox { actor_id });
        }
        Ok(b)
    }

    pub fn coords(&self) -> [f32; 4] {
        [self.y1, self.x1, self.y2, self.x2]
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.y1 + self.y2) * 0.5, (self.x1 + self.x2) * 0.5)
    }

    /// Intersection-over-union with another normalized box.
    pub fn iou(&self, other: &ActorBox) -> f32 {
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let inter = iy * ix;
        let union = self.height() * self.width() + other.height() * other.width() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// The comparison heads: RoI-pool baseline with FC classifier, RoI map into
/// the tail, relation features into the tail, non-local attention into the
/// tail, and the full attention-conditioned map into the tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcamVariant {
    RoipoolBase,
    RoipoolTail,
    AcrnTail,
    NlroiTail,
    AcamTail,
}

impl AcamVariant {
    pub const ALL: [AcamVariant; 5] = [
        AcamVariant::RoipoolBase,
        AcamVariant::RoipoolTail,
        AcamVariant::AcrnTail,
        AcamVariant::NlroiTail,
        AcamVariant::AcamTail,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AcamVariant::RoipoolBase => "roipool_base",
            AcamVariant::RoipoolTail => "roipool_tail",
            AcamVariant::AcrnTail => "acrn_tail",
            AcamVariant::NlroiTail => "nlroi_tail",
            AcamVariant::AcamTail => "acam_tail",
        }
    }
}

impl fmt::Display for AcamVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcamVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AcamVariant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected one of roipool_base, roipool_tail, acrn_tail, nlroi_tail, acam_tail)"
                ))
            })
    }
}

/// How the relation tensor is computed: the per-position linear form, or
/// the tile-concat-conv realization. Both give the same values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationPath {
    Direct,
    TiledConv,
}

/// Attention map wrapper: values are sigmoid outputs, strictly inside (0,1).
#[derive(Debug, Clone)]
pub struct AttentionMap {
    values: Tensor,
}

impl AttentionMap {
    /// Wrap a tensor asserting the open-interval range invariant.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::shape("attention_map", format!("expected rank 4, got {:?}", values.shape())));
        }
        for &v in values.data() {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::NonFinite {
                    op: "attention_map",
                    detail: format!("value {v} outside (0,1)"),
                });
            }
        }
        Ok(AttentionMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

/// Eq. 1 after the RoI pooling: flatten the pooled region and apply the
/// actor embedding (affine + ReLU). Output is the actor feature vector.
pub fn actor_feature(tape: &mut Tape, roi: Var, w_rho: Var, b_rho: Var) -> Result<Var> {
    let numel = tape.value(roi).numel();
    let flat = tape.reshape(roi, vec![numel])?;
    let pre = tape.affine(flat, w_rho, b_rho)?;
    Ok(tape.relu(pre))
}

/// Eq. 3: embed the feature map into a denser context tensor with a 1x1x1
/// convolution, bias and ReLU.
pub fn context_embed(tape: &mut Tape, feature_map: Var, w_eta: Var, b_eta: Var) -> Result<Var> {
    let conv = tape.conv3d(feature_map, w_eta, [1, 1, 1], Padding::Same)?;
    let biased = tape.add_channel(conv, b_eta)?;
    Ok(tape.relu(biased))
}

/// Eq. 4: relation scores combining the actor feature with the context
/// embedding at every position. No activation is applied; the result has
/// the same shape as the feature map.
pub fn relation(
    tape: &mut Tape,
    actor_vec: Var,
    context: Var,
    w_omega: Var,
    w_gamma: Var,
    b_beta: Var,
    path: RelationPath,
) -> Result<Var> {
    match path {
        RelationPath::Direct => {
            let n = tape.value(actor_vec).numel();
            let c = tape.value(w_omega).shape()[1];
            let row = tape.reshape(actor_vec, vec![1, n])?;
            let actor_term = tape.affine(row, w_omega, b_beta)?;
            let actor_term = tape.reshape(actor_term, vec![c])?;
            let m = tape.value(w_gamma).shape()[0];
            let gamma_kernel = tape.reshape(w_gamma, vec![1, 1, 1, m, c])?;
            let context_term = tape.conv3d(context, gamma_kernel, [1, 1, 1], Padding::Same)?;
            tape.add_channel(context_term, actor_term)
        }
        RelationPath::TiledConv => {
            let stacked = tape.concat_rows(w_omega, w_gamma)?;
            let rows = tape.value(stacked).shape()[0];
            let c = tape.value(stacked).shape()[1];
            let fused_kernel = tape.reshape(stacked, vec![1, 1, 1, rows, c])?;
            let tiled = tape.tile_and_concat(actor_vec, context)?;
            let conv = tape.conv3d(tiled, fused_kernel, [1, 1, 1], Padding::Same)?;
            tape.add_channel(conv, b_beta)
        }
    }
}

/// Eq. 5: sigmoid of the relation tensor, the attention map itself.
pub fn attention(tape: &mut Tape, relation: Var) -> Var {
    tape.sigmoid(relation)
}

/// Eq. 6: condition the features by elementwise multiplication with the
/// attention map.
pub fn condition(tape: &mut Tape, feature_map: Var, attention_map: Var) -> Result<Var> {
    tape.elementwise_mul(feature_map, attention_map)
}

fn get_var(params: &HashMap<&str, Var>, name: &str) -> Result<Var> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter '{name}' for this variant")))
}

/// Run one comparison head for every actor against a shared feature map.
///
/// Each actor is processed independently; the output row order matches the
/// box order bit-exactly.
pub fn forward_variant_vars(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &HashMap<&str, Var>,
    variant: AcamVariant,
    feature_map: Var,
    boxes: &[ActorBox],
) -> Result<Var> {
    if boxes.is_empty() {
        return Err(Error::Data("forward_variant: empty actor box list".into()));
    }

    // shared per-segment tensors
    let context = match variant {
        AcamVariant::AcrnTail | AcamVariant::AcamTail => Some(context_embed(
            tape,
            feature_map,
            get_var(params, "eta.kernel")?,
            get_var(params, "eta.bias")?,
        )?),
        _ => None,
    };
    let nl_maps = if variant == AcamVariant::NlroiTail {
        let key_conv = tape.conv3d(feature_map, get_var(params, "nl.key.kernel")?, [1, 1, 1], Padding::Same)?;
        let keys = tape.add_channel(key_conv, get_var(params, "nl.key.bias")?)?;
        let val_conv = tape.conv3d(feature_map, get_var(params, "nl.value.kernel")?, [1, 1, 1], Padding::Same)?;
        let values = tape.add_channel(val_conv, get_var(params, "nl.value.bias")?)?;
        Some((keys, values))
    } else {
        None
    };

    let mut rows = Vec::with_capacity(boxes.len());
    for b in boxes {
        let logits = match variant {
            AcamVariant::RoipoolBase => {
                let roi = tape.roi_pool_temporal(feature_map, b.coords(), b.actor_id, cfg.roi_bins)?;
                let r_a = actor_feature(tape, roi, get_var(params, "rho.weight")?, get_var(params, "rho.bias")?)?;
                let hidden = tape.affine(r_a, get_var(params, "base.hidden.weight")?, get_var(params, "base.hidden.bias")?)?;
                let hidden = tape.relu(hidden);
                tape.affine(hidden, get_var(params, "base.out.weight")?, get_var(params, "base.out.bias")?)?
            }
            AcamVariant::RoipoolTail => {
                let roi = tape.roi_pool_temporal(feature_map, b.coords(), b.actor_id, cfg.roi_bins)?;
                backbone::tail_forward_vars(tape, cfg, params, roi)?.logits
            }
            AcamVariant::AcrnTail => {
                let roi = tape.roi_pool_temporal(feature_map, b.coords(), b.actor_id, cfg.roi_bins)?;
                let r_a = actor_feature(tape, roi, get_var(params, "rho.weight")?, get_var(params, "rho.bias")?)?;
                let rel = relation(
                    tape,
                    r_a,
                    context.unwrap(),
                    get_var(params, "omega.weight")?,
                    get_var(params, "gamma.weight")?,
                    get_var(params, "beta.bias")?,
                    cfg.relation_path,
                )?;
                backbone::tail_forward_vars(tape, cfg, params, rel)?.logits
            }
            AcamVariant::NlroiTail => {
                let (keys, values) = nl_maps.unwrap();
                let roi = tape.roi_pool_temporal(feature_map, b.coords(), b.actor_id, cfg.roi_bins)?;
                let r_a = actor_feature(tape, roi, get_var(params, "rho.weight")?, get_var(params, "rho.bias")?)?;
                let n = tape.value(r_a).numel();
                let query_kernel = tape.reshape(r_a, vec![1, 1, 1, n, 1])?;
                let scores = tape.conv3d(keys, query_kernel, [1, 1, 1], Padding::Same)?;
                let scores = tape.scale(scores, 1.0 / (n as f32).sqrt());
                let weights = tape.softmax_all(scores);
                let attended = tape.broadcast_channel_mul(weights, values)?;
                // softmax mass is spread over all positions; undo the later
                // global-average division so magnitudes match a weighted sum
                let shape = tape.value(attended).shape();
                let positions = (shape[0] * shape[1] * shape[2]) as f32;
                let attended = tape.scale(attended, positions);
                backbone::tail_forward_vars(tape, cfg, params, attended)?.logits
            }
            AcamVariant::AcamTail => {
                let roi = tape.roi_pool_temporal(feature_map, b.coords(), b.actor_id, cfg.roi_bins)?;
                let r_a = actor_feature(tape, roi, get_var(params, "rho.weight")?, get_var(params, "rho.bias")?)?;
                let rel = relation(
                    tape,
                    r_a,
                    context.unwrap(),
                    get_var(params, "omega.weight")?,
                    get_var(params, "gamma.weight")?,
                    get_var(params, "beta.bias")?,
                    cfg.relation_path,
                )?;
                let acam_map = attention(tape, rel);
                let conditioned = condition(tape, feature_map, acam_map)?;
                backbone::tail_forward_vars(tape, cfg, params, conditioned)?.logits
            }
        };
        rows.push(logits);
    }
    tape.stack_rows(&rows)
}

/// Compute the attention map for one actor as plain tensors (no gradient
/// bookkeeping kept by the caller).
pub fn attention_map_for_actor(
    cfg: &ModelConfig,
    params: &backbone::ModelParams,
    feature_map: &Tensor,
    actor: &ActorBox,
) -> Result<AttentionMap> {
    let mut tape = Tape::new();
    let vars = backbone::push_params(&mut tape, params, false);
    let fm = tape.leaf(feature_map.clone(), false);
    let roi = tape.roi_pool_temporal(fm, actor.coords(), actor.actor_id, cfg.roi_bins)?;
    let r_a = actor_feature(&mut tape, roi, get_var(&vars, "rho.weight")?, get_var(&vars, "rho.bias")?)?;
    let context = context_embed(&mut tape, fm, get_var(&vars, "eta.kernel")?, get_var(&vars, "eta.bias")?)?;
    let rel = relation(
        &mut tape,
        r_a,
        context,
        get_var(&vars, "omega.weight")?,
        get_var(&vars, "gamma.weight")?,
        get_var(&vars, "beta.bias")?,
        cfg.relation_path,
    )?;
    let acam_map = attention(&mut tape, rel);
    AttentionMap::new(tape.value(acam_map).clone())
}

/// Average the attention map over the channels where the feature map is
/// active (strictly positive); positions with no active channel map to 0.
/// Output shape `[T, H, W]`.
pub fn attention_visualize(acam_map: &AttentionMap, feature_map: &Tensor) -> Result<Tensor> {
    let a = acam_map.values();
    if a.shape() != feature_map.shape() {
        return Err(Error::shape(
            "attention_visualize",
            format!("{:?} vs {:?}", a.shape(), feature_map.shape()),
        ));
    }
    let shape = a.shape();
    let c = shape[3];
    let positions = shape[0] * shape[1] * shape[2];
    let mut out = vec![0.0f32; positions];
    let adata = a.data();
    let fdata = feature_map.data();
    for p in 0..positions {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for j in 0..c {
            if fdata[p * c + j] > 0.0 {
                acc += adata[p * c + j] as f64;
                count += 1;
            }
        }
        out[p] = if count > 0 { (acc / count as f64) as f32 } else { 0.0 };
    }
    Tensor::new(vec![shape[0], shape[1], shape[2]], out)
}
