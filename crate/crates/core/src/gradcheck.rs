//! Central finite-difference gradient verification.
//!
//! The analytic gradients produced by [`Tape::backward`] are checked against
//! central differences of the tape's f64 replay ([`Tape::replay_f64`]). The
//! replay is forward-only and shares no code with the backward rules, so the
//! two sides are independent routes to the same derivative. Errors are
//! relative with a small floor (1e-6) that absorbs f32 representation noise
//! on near-zero gradients.

use crate::acam::{self, AcamVariant, ActorBox};
use crate::backbone::{self, ModelConfig};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_H: f64 = 1e-3;
/// Default pass threshold on the relative error.
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub elements: usize,
    pub max_err: f64,
    pub pass: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} elements={:<5} max_rel_err={:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.elements,
            self.max_err
        )
    }
}

/// One leaf fed into a checked graph; `check` selects whether its gradient
/// is finite-difference verified (labels and other non-differentiable data
/// stay fixed).
pub struct CheckInput {
    pub tensor: Tensor,
    pub check: bool,
}

impl CheckInput {
    pub fn checked(tensor: Tensor) -> Self {
        CheckInput { tensor, check: true }
    }

    pub fn fixed(tensor: Tensor) -> Self {
        CheckInput { tensor, check: false }
    }
}

/// Verify analytic gradients of the graph built by `build` against central
/// finite differences.
///
/// `build` receives one tape var per input (requires_grad set for checked
/// inputs) and returns the graph output, which may have any shape: a scalar
/// probe loss `sum(output * W)` with fixed random weights `W` is appended so
/// that every output element influences the loss.
pub fn check_graph<F>(
    name: &str,
    inputs: Vec<CheckInput>,
    probe_seed: u64,
    h: f64,
    tol: f64,
    build: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|ci| tape.leaf(ci.tensor.clone(), ci.check))
        .collect();
    let out = build(&mut tape, &vars)?;

    let mut rng = Rng::from_seed_and_tag(probe_seed, 0x70726f6265);
    let numel = tape.value(out).numel();
    let probe_data: Vec<f32> = (0..numel)
        .map(|_| {
            let mag = rng.uniform(0.25, 1.25);
            if rng.chance(0.5) {
                mag as f32
            } else {
                -mag as f32
            }
        })
        .collect();
    let probe = tape.leaf(Tensor::new(tape.value(out).shape().to_vec(), probe_data)?, false);
    let weighted = tape.elementwise_mul(out, probe)?;
    let loss = tape.sum(weighted);
    tape.backward(loss)?;

    let mut max_err = 0.0f64;
    let mut elements = 0usize;
    for (i, ci) in inputs.iter().enumerate() {
        if !ci.check {
            continue;
        }
        let analytic = tape
            .grad(vars[i])
            .ok_or_else(|| Error::Data(format!("{name}: no gradient for checked input {i}")))?
            .to_vec();
        for e in 0..ci.tensor.numel() {
            let up = tape.replay_f64(loss, vars[i], e, h);
            let down = tape.replay_f64(loss, vars[i], e, -h);
            let fd = (up - down) / (2.0 * h);
            let a = analytic[e] as f64;
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if err > max_err {
                max_err = err;
            }
            elements += 1;
        }
    }
    Ok(CheckResult { name: name.to_string(), elements, max_err, pass: max_err <= tol })
}

fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    // keep magnitudes away from the ReLU kink so central differences do not
    // straddle it at the leaf level
    let data: Vec<f32> = (0..shape.iter().product::<usize>())
        .map(|_| {
            let v = rng.uniform(0.05, 1.5);
            if rng.chance(0.5) {
                v as f32
            } else {
                -v as f32
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Gradient checks for every differentiable tape operation, one instance
/// per op, at small shapes.
pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::from_seed_and_tag(seed, 0x6f707375697465);
    let mut results = Vec::new();
    let h = DEFAULT_H;
    let tol = DEFAULT_TOL;

    results.push(check_graph(
        "conv3d_valid",
        vec![
            CheckInput::checked(rand_tensor(&[3, 5, 5, 2], &mut rng)),
            CheckInput::checked(rand_tensor(&[2, 3, 3, 2, 3], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.conv3d(v[0], v[1], [1, 1, 1], Padding::Valid),
    )?);

    results.push(check_graph(
        "conv3d_same_strided",
        vec![
            CheckInput::checked(rand_tensor(&[4, 6, 6, 2], &mut rng)),
            CheckInput::checked(rand_tensor(&[3, 3, 3, 2, 2], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.conv3d(v[0], v[1], [2, 2, 2], Padding::Same),
    )?);

    results.push(check_graph(
        "conv3d_1x1x1",
        vec![
            CheckInput::checked(rand_tensor(&[2, 4, 4, 3], &mut rng)),
            CheckInput::checked(rand_tensor(&[1, 1, 1, 3, 4], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.conv3d(v[0], v[1], [1, 1, 1], Padding::Same),
    )?);

    results.push(check_graph(
        "affine",
        vec![
            CheckInput::checked(rand_tensor(&[5, 6], &mut rng)),
            CheckInput::checked(rand_tensor(&[6, 4], &mut rng)),
            CheckInput::checked(rand_tensor(&[4], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.affine(v[0], v[1], v[2]),
    )?);

    results.push(check_graph(
        "relu",
        vec![CheckInput::checked(rand_tensor(&[3, 7], &mut rng))],
        seed,
        h,
        tol,
        |t, v| Ok(t.relu(v[0])),
    )?);

    results.push(check_graph(
        "sigmoid",
        vec![CheckInput::checked(rand_tensor(&[3, 7], &mut rng))],
        seed,
        h,
        tol,
        |t, v| Ok(t.sigmoid(v[0])),
    )?);

    results.push(check_graph(
        "elementwise_mul",
        vec![
            CheckInput::checked(rand_tensor(&[4, 5], &mut rng)),
            CheckInput::checked(rand_tensor(&[4, 5], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.elementwise_mul(v[0], v[1]),
    )?);

    results.push(check_graph(
        "add",
        vec![
            CheckInput::checked(rand_tensor(&[4, 5], &mut rng)),
            CheckInput::checked(rand_tensor(&[4, 5], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.add(v[0], v[1]),
    )?);

    results.push(check_graph(
        "add_channel",
        vec![
            CheckInput::checked(rand_tensor(&[2, 3, 3, 4], &mut rng)),
            CheckInput::checked(rand_tensor(&[4], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.add_channel(v[0], v[1]),
    )?);

    results.push(check_graph(
        "tile_and_concat",
        vec![
            CheckInput::checked(rand_tensor(&[3], &mut rng)),
            CheckInput::checked(rand_tensor(&[2, 3, 3, 4], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.tile_and_concat(v[0], v[1]),
    )?);

    results.push(check_graph(
        "global_avg_pool",
        vec![CheckInput::checked(rand_tensor(&[2, 4, 4, 3], &mut rng))],
        seed,
        h,
        tol,
        |t, v| t.global_avg_pool(v[0]),
    )?);

    let roi_box = [
        rng.uniform(0.0, 0.3) as f32,
        rng.uniform(0.0, 0.3) as f32,
        rng.uniform(0.6, 1.0) as f32,
        rng.uniform(0.6, 1.0) as f32,
    ];
    results.push(check_graph(
        "roi_pool_temporal",
        vec![CheckInput::checked(rand_tensor(&[3, 6, 6, 4], &mut rng))],
        seed,
        h,
        tol,
        move |t, v| t.roi_pool_temporal(v[0], roi_box, 0, 2),
    )?);

    results.push(check_graph(
        "reshape",
        vec![CheckInput::checked(rand_tensor(&[2, 6], &mut rng))],
        seed,
        h,
        tol,
        |t, v| t.reshape(v[0], vec![3, 4]),
    )?);

    results.push(check_graph(
        "concat_rows",
        vec![
            CheckInput::checked(rand_tensor(&[3, 4], &mut rng)),
            CheckInput::checked(rand_tensor(&[2, 4], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.concat_rows(v[0], v[1]),
    )?);

    results.push(check_graph(
        "scale",
        vec![CheckInput::checked(rand_tensor(&[3, 5], &mut rng))],
        seed,
        h,
        tol,
        |t, v| Ok(t.scale(v[0], 0.37)),
    )?);

    results.push(check_graph(
        "softmax_all",
        vec![CheckInput::checked(rand_tensor(&[2, 3, 3, 1], &mut rng))],
        seed,
        h,
        tol,
        |t, v| Ok(t.softmax_all(v[0])),
    )?);

    results.push(check_graph(
        "broadcast_channel_mul",
        vec![
            CheckInput::checked(rand_tensor(&[2, 3, 3, 1], &mut rng)),
            CheckInput::checked(rand_tensor(&[2, 3, 3, 4], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.broadcast_channel_mul(v[0], v[1]),
    )?);

    results.push(check_graph(
        "sum",
        vec![CheckInput::checked(rand_tensor(&[3, 5], &mut rng))],
        seed,
        h,
        tol,
        |t, v| Ok(t.sum(v[0])),
    )?);

    results.push(check_graph(
        "stack_rows",
        vec![
            CheckInput::checked(rand_tensor(&[6], &mut rng)),
            CheckInput::checked(rand_tensor(&[6], &mut rng)),
            CheckInput::checked(rand_tensor(&[6], &mut rng)),
        ],
        seed,
        h,
        tol,
        |t, v| t.stack_rows(v),
    )?);

    let labels: Vec<f32> = (0..12).map(|_| if rng.chance(0.5) { 1.0 } else { 0.0 }).collect();
    results.push(check_graph(
        "bce_with_logits",
        vec![
            CheckInput::checked(rand_tensor(&[3, 4], &mut rng)),
            CheckInput::fixed(Tensor::new(vec![3, 4], labels)?),
        ],
        seed,
        h,
        tol,
        |t, v| t.bce_with_logits(v[0], v[1]),
    )?);

    Ok(results)
}

/// Finite-difference check of the full actor-conditioned graph: video
/// through head, attention conditioning, tail and classifier into the BCE
/// loss, differentiating every parameter (and the feature map input).
pub fn full_graph_check(seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig::micro();
    let mut rng = Rng::from_seed_and_tag(seed, 0x66756c6c);
    let params = backbone::ModelParams::init(&cfg, AcamVariant::AcamTail, seed ^ 0xC0FFEE);
    let video = Tensor::uniform(
        vec![cfg.input_t, cfg.input_h, cfg.input_w, 3],
        0.0,
        1.0,
        &mut rng,
    );
    let boxes = vec![
        ActorBox { y1: 0.1, x1: 0.15, y2: 0.55, x2: 0.6, actor_id: 0 },
        ActorBox { y1: 0.4, x1: 0.35, y2: 0.9, x2: 0.85, actor_id: 1 },
    ];
    let num_actors = boxes.len();
    let labels: Vec<f32> = (0..num_actors * cfg.num_classes)
        .map(|_| if rng.chance(0.5) { 1.0 } else { 0.0 })
        .collect();

    let mut inputs: Vec<CheckInput> = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        inputs.push(CheckInput::checked(params.get(name).clone()));
    }
    inputs.push(CheckInput::fixed(video));
    inputs.push(CheckInput::fixed(Tensor::new(vec![num_actors, cfg.num_classes], labels)?));

    let cfg2 = cfg.clone();
    check_graph("acam_tail_full_graph", inputs, seed, DEFAULT_H, DEFAULT_TOL, move |t, v| {
        let n = v.len();
        let video_var = v[n - 2];
        let labels_var = v[n - 1];
        let param_vars: std::collections::HashMap<&str, Var> = names
            .iter()
            .map(String::as_str)
            .zip(v[..n - 2].iter().copied())
            .collect();
        let feature_map = backbone::head_forward_vars(t, &cfg2, &param_vars, video_var)?;
        let logits = acam::forward_variant_vars(
            t,
            &cfg2,
            &param_vars,
            AcamVariant::AcamTail,
            feature_map,
            &boxes,
        )?;
        t.bce_with_logits(logits, labels_var)
    })
}

/// The complete suite run by the `gradcheck` CLI command: every op plus the
/// full conditioned graph, across `seeds` seeds starting at `seed0`.
pub fn full_suite(seed0: u64, seeds: usize) -> Result<Vec<CheckResult>> {
    let mut all = Vec::new();
    for s in 0..seeds {
        let seed = seed0.wrapping_add(s as u64);
        let mut batch = op_suite(seed)?;
        for r in &mut batch {
            r.name = format!("{}[seed {}]", r.name, seed);
        }
        all.extend(batch);
        let mut full = full_graph_check(seed)?;
        full.name = format!("{}[seed {}]", full.name, seed);
        all.push(full);
    }
    Ok(all)
}
