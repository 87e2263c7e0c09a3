//! Per-class average precision, mAP and super-class means, with throughput
//! measurement.
//!
//! AP uses the interpolation-free all-point form. Items are ordered by
//! descending score with ties broken by ascending original index for
//! deterministic iteration; precision is evaluated at score-group
//! boundaries, so every member of a tied group sees the same precision.
//! That convention is what makes AP invariant under duplicating all
//! (score, label) pairs and gives a constant scorer an AP equal to the
//! class positive rate.

use crate::acam::{self, AcamVariant, ActorBox};
use crate::backbone::{self, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::synthdata::{SuperClass, SyntheticDataset};
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::Serialize;
use std::time::Instant;

/// Average precision of one ranked class.
///
/// Requires at least one positive; callers exclude (and flag) classes with
/// no positives rather than scoring them 0.
pub fn average_precision(scores: &[f32], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Data(format!(
            "average_precision: {} scores vs {} labels",
            scores.len(),
            positives.len()
        )));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::Data("average_precision: no positives".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "average_precision", detail: "score".into() });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });

    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        // walk one tied score group
        let mut j = i;
        let mut group_pos = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positives[order[j]] {
                group_pos += 1;
            }
            j += 1;
        }
        tp += group_pos;
        seen = j;
        let precision = tp as f64 / seen as f64;
        ap += precision * group_pos as f64;
        i = j;
    }
    let _ = seen;
    Ok(ap / total_pos as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassAp {
    pub name: String,
    pub super_class: SuperClass,
    pub positives: usize,
    /// None when the class had no positives and was excluded from the mean.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub variant: Option<AcamVariant>,
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with at least one positive.
    pub map: f64,
    pub pose_map: Option<f64>,
    pub object_map: Option<f64>,
    pub interaction_map: Option<f64>,
    pub samples_per_sec: f64,
    pub num_segments: usize,
    pub num_actors: usize,
}

impl EvalReport {
    /// One-line summary in the style of the variant comparison table.
    pub fn summary_line(&self) -> String {
        let name = self.variant.map(|v| v.name().to_string()).unwrap_or_else(|| "scored".into());
        format!(
            "{:<13} mAP {:>6.2}  pose {:>6.2}  object {:>6.2}  interaction {:>6.2}  {:>7.2} samples/s",
            name,
            100.0 * self.map,
            100.0 * self.pose_map.unwrap_or(f64::NAN),
            100.0 * self.object_map.unwrap_or(f64::NAN),
            100.0 * self.interaction_map.unwrap_or(f64::NAN),
            self.samples_per_sec
        )
    }

    pub fn class_ap(&self, name: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.name == name).and_then(|c| c.ap)
    }

    /// Per-class CSV dump (`name,super_class,positives,ap`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,super_class,positives,ap\n");
        for c in &self.per_class {
            let sc = match c.super_class {
                SuperClass::Pose => "pose",
                SuperClass::Object => "object",
                SuperClass::Interaction => "interaction",
            };
            let ap = c.ap.map(|v| format!("{v:.6}")).unwrap_or_else(|| "excluded".into());
            out.push_str(&format!("{},{},{},{}\n", c.name, sc, c.positives, ap));
        }
        out
    }
}

/// Model-backed scorer: head forward once per segment, then the variant
/// head per actor; scores are per-class sigmoid probabilities.
pub struct ModelScorer<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams,
}

impl ModelScorer<'_> {
    pub fn score_segment(&self, video: &Tensor, boxes: &[ActorBox]) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new();
        let vars = backbone::push_params(&mut tape, self.params, false);
        let v = tape.leaf(video.clone(), false);
        let fm = backbone::head_forward_vars(&mut tape, self.cfg, &vars, v)?;
        let logits = acam::forward_variant_vars(
            &mut tape,
            self.cfg,
            &vars,
            self.params.variant(),
            fm,
            boxes,
        )?;
        let out = tape.value(logits);
        let k = out.shape()[1];
        Ok(out
            .data()
            .chunks(k)
            .map(|row| row.iter().map(|&z| sigmoid(z)).collect())
            .collect())
    }
}

/// How actors are scored during evaluation.
pub enum Scoring<'a> {
    Model(ModelScorer<'a>),
    /// Perfect oracle: score = ground-truth label.
    Oracle,
    /// Degenerate scorer giving every pair the same value.
    Constant(f32),
}

impl<'a> Scoring<'a> {
    pub fn model(cfg: &'a ModelConfig, params: &'a ModelParams) -> Self {
        Scoring::Model(ModelScorer { cfg, params })
    }
}

/// Score every (actor, class) pair with ground-truth boxes, aggregate
/// per-class AP, super-class means and throughput.
pub fn map_eval(dataset: &SyntheticDataset, scoring: &Scoring) -> Result<EvalReport> {
    if dataset.segments.is_empty() {
        return Err(Error::Data("map_eval: empty dataset".into()));
    }
    let k = dataset.catalog.len();
    let mut scores: Vec<Vec<f32>> = vec![Vec::new(); k];
    let mut labels: Vec<Vec<bool>> = vec![Vec::new(); k];
    let mut num_actors = 0usize;

    let start = Instant::now();
    for seg in &dataset.segments {
        let boxes: Vec<ActorBox> = seg.actors.iter().map(|a| a.bbox).collect();
        let actor_scores: Vec<Vec<f32>> = match scoring {
            Scoring::Model(m) => m.score_segment(&seg.video, &boxes)?,
            Scoring::Oracle => seg.actors.iter().map(|a| a.labels.clone()).collect(),
            Scoring::Constant(c) => seg.actors.iter().map(|_| vec![*c; k]).collect(),
        };
        if actor_scores.len() != seg.actors.len() {
            return Err(Error::Data("map_eval: scorer returned wrong actor count".into()));
        }
        for (actor, row) in seg.actors.iter().zip(&actor_scores) {
            if row.len() != k {
                return Err(Error::Data("map_eval: scorer returned wrong class count".into()));
            }
            num_actors += 1;
            for c in 0..k {
                scores[c].push(row[c]);
                labels[c].push(actor.labels[c] == 1.0);
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let positives = labels[c].iter().filter(|&&p| p).count();
        let ap = if positives == 0 {
            None
        } else {
            Some(average_precision(&scores[c], &labels[c])?)
        };
        per_class.push(ClassAp {
            name: dataset.catalog.name(c).to_string(),
            super_class: dataset.catalog.super_class(c),
            positives,
            ap,
        });
    }

    let included: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    if included.is_empty() {
        return Err(Error::Data("map_eval: every class had zero positives".into()));
    }
    let map = included.iter().sum::<f64>() / included.len() as f64;
    let group_mean = |sc: SuperClass| {
        let vals: Vec<f64> = per_class
            .iter()
            .filter(|c| c.super_class == sc)
            .filter_map(|c| c.ap)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };

    let variant = match scoring {
        Scoring::Model(m) => Some(m.params.variant()),
        _ => None,
    };
    Ok(EvalReport {
        variant,
        per_class,
        map,
        pose_map: group_mean(SuperClass::Pose),
        object_map: group_mean(SuperClass::Object),
        interaction_map: group_mean(SuperClass::Interaction),
        samples_per_sec: dataset.segments.len() as f64 / elapsed.max(1e-9),
        num_segments: dataset.segments.len(),
        num_actors,
    })
}
