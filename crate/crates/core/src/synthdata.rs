//! Deterministic synthetic multi-actor video generator.
//!
//! Actors are colored squares with orientation ticks moving over a textured
//! field. Labels are weak per-actor multi-hot vectors whose interaction
//! classes are context-dependent by construction: a talker's pulsing halo
//! ring lies strictly outside any listener's own bounding box, so `listen`
//! cannot be predicted from an actor crop alone, and `watch` depends on
//! whether another actor actually sits in the faced direction. Pose and
//! object classes (movement, blinking, the carried dot) stay crop-local.
//!
//! Generation is a pure function of (seed, config): the same pair always
//! reproduces bit-identical segments.

use crate::acam::ActorBox;
use crate::error::{Error, Result};
use crate::rng::{derive, Rng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CLASS_MOVE: usize = 0;
pub const CLASS_STAY: usize = 1;
pub const CLASS_BLINK: usize = 2;
pub const CLASS_CARRY: usize = 3;
pub const CLASS_TALK: usize = 4;
pub const CLASS_LISTEN: usize = 5;
pub const CLASS_WATCH: usize = 6;
pub const CLASS_NEAR: usize = 7;

/// Angular tolerance (degrees) for "oriented toward" checks.
pub const FACING_TOLERANCE_DEG: f64 = 25.0;
const COMPASS_DIRS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuperClass {
    Pose,
    Object,
    Interaction,
}

/// Ordered class names with super-class tags covering all classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    entries: Vec<(String, SuperClass)>,
}

impl ClassCatalog {
    pub fn default_catalog() -> Self {
        ClassCatalog {
            entries: vec![
                ("move".into(), SuperClass::Pose),
                ("stay".into(), SuperClass::Pose),
                ("blink".into(), SuperClass::Pose),
                ("carry".into(), SuperClass::Object),
                ("talk".into(), SuperClass::Interaction),
                ("listen".into(), SuperClass::Interaction),
                ("watch".into(), SuperClass::Interaction),
                ("near".into(), SuperClass::Interaction),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn super_class(&self, idx: usize) -> SuperClass {
        self.entries[idx].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, SuperClass)> {
        self.entries.iter().map(|(n, s)| (n.as_str(), *s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    /// Probability that actors are placed at conversational distances.
    pub cluster_prob: f64,
    pub talk_prob: f64,
    pub blink_prob: f64,
    pub carry_prob: f64,
    pub move_prob: f64,
    /// Probability that an actor faces another actor rather than a random
    /// direction.
    pub face_actor_prob: f64,
    /// Interaction radius as a fraction of frame width.
    pub listen_radius_frac: f64,
    pub background_amp: f32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            frames: 8,
            height: 64,
            width: 64,
            min_actors: 2,
            max_actors: 4,
            cluster_prob: 0.55,
            talk_prob: 0.4,
            blink_prob: 0.3,
            carry_prob: 0.35,
            move_prob: 0.5,
            face_actor_prob: 0.6,
            listen_radius_frac: 0.3,
            background_amp: 0.16,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_actors == 0 {
            return Err(Error::Config("gen: min_actors must be >= 1 (zero actors is invalid)".into()));
        }
        if self.max_actors < self.min_actors {
            return Err(Error::Config("gen: max_actors < min_actors".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("gen: need at least 2 frames".into()));
        }
        if self.height < 48 || self.width < 48 {
            return Err(Error::Config("gen: frame must be at least 48x48".into()));
        }
        for (name, p) in [
            ("cluster_prob", self.cluster_prob),
            ("talk_prob", self.talk_prob),
            ("blink_prob", self.blink_prob),
            ("carry_prob", self.carry_prob),
            ("move_prob", self.move_prob),
            ("face_actor_prob", self.face_actor_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("gen: {name} must be in [0,1], got {p}")));
            }
        }
        if !(0.05..=0.5).contains(&self.listen_radius_frac) {
            return Err(Error::Config("gen: listen_radius_frac must be in [0.05, 0.5]".into()));
        }
        Ok(())
    }

    pub fn center_frame(&self) -> usize {
        self.frames / 2
    }

    /// Interaction radius in pixels.
    pub fn listen_radius(&self) -> f64 {
        self.listen_radius_frac * self.width as f64
    }
}

// Geometry constants (pixels). Actor sides in [SIDE_MIN, SIDE_MAX]; halo
// ring at half-side + HALO_GAP; centers never closer than MIN_CENTER_DIST
// at any frame. MIN_CENTER_DIST > SIDE_MAX/2 + halo radius keeps every
// halo pixel outside every other actor's box.
const SIDE_MIN: f64 = 8.0;
const SIDE_MAX: f64 = 11.0;
const HALO_GAP: f64 = 2.5;
const HALO_THICKNESS: f64 = 0.8;
const MIN_CENTER_DIST: f64 = 14.5;
const PLACE_MARGIN: f64 = 14.0;
const SPEED_MIN: f64 = 1.3;
const SPEED_MAX: f64 = 2.2;

/// Latent per-actor state sampled before rendering. Positions are pixel
/// coordinates of the square center at the center frame.
#[derive(Debug, Clone)]
pub struct ActorState {
    pub id: u32,
    pub center: (f64, f64),
    pub vel: (f64, f64),
    pub side: f64,
    pub color: [f32; 3],
    /// Compass facing direction, 0..8 in 45-degree steps.
    pub facing: usize,
    pub moving: bool,
    pub blinking: bool,
    pub carrying: bool,
    pub talking: bool,
    pub halo_phase: f64,
}

impl ActorState {
    /// Square center at frame `t` (positions are linear in time around the
    /// center frame).
    pub fn center_at(&self, t: usize, center_frame: usize) -> (f64, f64) {
        let dt = t as f64 - center_frame as f64;
        (self.center.0 + self.vel.0 * dt, self.center.1 + self.vel.1 * dt)
    }

    pub fn halo_radius(&self) -> f64 {
        self.side * 0.5 + HALO_GAP
    }

    pub fn facing_angle(&self) -> f64 {
        self.facing as f64 * std::f64::consts::TAU / COMPASS_DIRS as f64
    }
}

/// Full latent scene: everything labels and pixels are derived from.
#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    pub actors: Vec<ActorState>,
    pub bg_grid: Vec<f32>,
    pub bg_grid_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentActor {
    pub bbox: ActorBox,
    /// Multi-hot labels, one entry per catalog class.
    pub labels: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSegment {
    pub video: Tensor,
    pub actors: Vec<SegmentActor>,
    pub seed: u64,
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(std::f64::consts::TAU);
    if d > std::f64::consts::PI {
        d = std::f64::consts::TAU - d;
    }
    d
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Sample the latent scene for a segment.
pub fn gen_scene(seed: u64, cfg: &GenConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = Rng::from_seed_and_tag(seed, 0x7363656e65);
    let center_frame = cfg.center_frame();
    let rho = cfg.listen_radius();

    let count = cfg.min_actors + rng.below(cfg.max_actors - cfg.min_actors + 1);
    let cluster = rng.chance(cfg.cluster_prob);

    // distinct hues, evenly spaced with a random offset
    let hue0 = rng.uniform(0.0, 1.0);
    let mut colors: Vec<[f32; 3]> = (0..count)
        .map(|i| hue_to_rgb((hue0 + i as f64 / count as f64).fract()))
        .collect();
    rng.shuffle(&mut colors);

    // attribute flags first; facing later needs to know who talks
    let flags: Vec<(bool, bool, bool, bool)> = (0..count)
        .map(|_| {
            (
                rng.chance(cfg.move_prob),
                rng.chance(cfg.blink_prob),
                rng.chance(cfg.carry_prob),
                rng.chance(cfg.talk_prob),
            )
        })
        .collect();

    // center-frame placement with pairwise distance constraints
    let lo_y = PLACE_MARGIN;
    let hi_y = cfg.height as f64 - PLACE_MARGIN;
    let lo_x = PLACE_MARGIN;
    let hi_x = cfg.width as f64 - PLACE_MARGIN;
    let mut centers: Vec<(f64, f64)> = Vec::new();
    'scene: for scene_try in 0..200 {
        centers.clear();
        let relax = scene_try >= 100;
        for i in 0..count {
            let mut placed = false;
            'cand: for _ in 0..120 {
                let cand = if cluster && i > 0 && !relax {
                    // conversational distance from one prior actor
                    let anchor = centers[rng.below(centers.len())];
                    let r = rng.uniform(MIN_CENTER_DIST, rho - 0.5);
                    let a = rng.uniform(0.0, std::f64::consts::TAU);
                    (anchor.0 + r * a.sin(), anchor.1 + r * a.cos())
                } else {
                    (rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x))
                };
                if cand.0 < lo_y || cand.0 > hi_y || cand.1 < lo_x || cand.1 > hi_x {
                    continue 'cand;
                }
                for &prev in &centers {
                    let d = dist(cand, prev);
                    if d < MIN_CENTER_DIST {
                        continue 'cand;
                    }
                    if !cluster && !relax && d <= rho + 2.0 {
                        // scattered scenes keep every pair outside the
                        // interaction radius
                        continue 'cand;
                    }
                }
                centers.push(cand);
                placed = true;
                break;
            }
            if !placed {
                continue 'scene;
            }
        }
        break;
    }
    if centers.len() != count {
        return Err(Error::Data(format!(
            "gen_scene(seed {seed}): could not place {count} actors"
        )));
    }

    // velocities: zero for staying actors, bounded speeds for movers, with
    // trajectories that keep margins and pairwise separation at all frames
    let mut vels: Vec<(f64, f64)> = vec![(0.0, 0.0); count];
    let mut moving: Vec<bool> = flags.iter().map(|f| f.0).collect();
    for i in 0..count {
        if !moving[i] {
            continue;
        }
        let mut ok = false;
        for _ in 0..40 {
            let speed = rng.uniform(SPEED_MIN, SPEED_MAX);
            let ang = rng.uniform(0.0, std::f64::consts::TAU);
            let v = (speed * ang.sin(), speed * ang.cos());
            if trajectory_valid(&centers, &vels, i, v, count, cfg, center_frame) {
                vels[i] = v;
                ok = true;
                break;
            }
        }
        if !ok {
            moving[i] = false;
        }
    }

    // facing: prefer actual actors, biased toward talkers
    let talkers: Vec<usize> = (0..count).filter(|&i| flags[i].3).collect();
    let mut facing = vec![0usize; count];
    for i in 0..count {
        let face_someone = count > 1 && rng.chance(cfg.face_actor_prob);
        if face_someone {
            let other_talkers: Vec<usize> = talkers.iter().copied().filter(|&j| j != i).collect();
            let target = if !other_talkers.is_empty() && rng.chance(0.7) {
                other_talkers[rng.below(other_talkers.len())]
            } else {
                let mut j = rng.below(count - 1);
                if j >= i {
                    j += 1;
                }
                j
            };
            let dy = centers[target].0 - centers[i].0;
            let dx = centers[target].1 - centers[i].1;
            let ang = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let step = std::f64::consts::TAU / COMPASS_DIRS as f64;
            facing[i] = ((ang / step).round() as usize) % COMPASS_DIRS;
        } else {
            facing[i] = rng.below(COMPASS_DIRS);
        }
    }

    let actors: Vec<ActorState> = (0..count)
        .map(|i| ActorState {
            id: i as u32,
            center: centers[i],
            vel: vels[i],
            side: rng.uniform(SIDE_MIN, SIDE_MAX),
            color: colors[i],
            facing: facing[i],
            moving: moving[i],
            blinking: flags[i].1,
            carrying: flags[i].2,
            talking: flags[i].3,
            halo_phase: rng.uniform(0.0, std::f64::consts::TAU),
        })
        .collect();

    let bg_grid_size = 9;
    let bg_grid: Vec<f32> = (0..bg_grid_size * bg_grid_size * 3)
        .map(|_| rng.uniform(0.0, cfg.background_amp as f64) as f32)
        .collect();

    Ok(Scene { seed, actors, bg_grid, bg_grid_size })
}

fn trajectory_valid(
    centers: &[(f64, f64)],
    vels: &[(f64, f64)],
    idx: usize,
    v: (f64, f64),
    count: usize,
    cfg: &GenConfig,
    center_frame: usize,
) -> bool {
    let margin = SIDE_MAX / 2.0 + HALO_GAP + 1.0;
    for t in 0..cfg.frames {
        let dt = t as f64 - center_frame as f64;
        let p = (centers[idx].0 + v.0 * dt, centers[idx].1 + v.1 * dt);
        if p.0 < margin
            || p.0 > cfg.height as f64 - margin
            || p.1 < margin
            || p.1 > cfg.width as f64 - margin
        {
            return false;
        }
        for j in 0..count {
            if j == idx {
                continue;
            }
            let q = (centers[j].0 + vels[j].0 * dt, centers[j].1 + vels[j].1 * dt);
            if dist(p, q) < MIN_CENTER_DIST {
                return false;
            }
        }
    }
    true
}

/// Derive the multi-hot labels of every actor from the latent scene
/// (center-frame geometry).
pub fn labels_from_scene(scene: &Scene, cfg: &GenConfig) -> Vec<Vec<f32>> {
    let rho = cfg.listen_radius();
    let tol = FACING_TOLERANCE_DEG.to_radians();
    let k = ClassCatalog::default_catalog().len();
    scene
        .actors
        .iter()
        .map(|a| {
            let mut l = vec![0.0f32; k];
            l[CLASS_MOVE] = a.moving as u8 as f32;
            l[CLASS_STAY] = (!a.moving) as u8 as f32;
            l[CLASS_BLINK] = a.blinking as u8 as f32;
            l[CLASS_CARRY] = a.carrying as u8 as f32;
            l[CLASS_TALK] = a.talking as u8 as f32;
            for b in &scene.actors {
                if b.id == a.id {
                    continue;
                }
                let d = dist(a.center, b.center);
                let ang_to_b = (b.center.0 - a.center.0).atan2(b.center.1 - a.center.1);
                let faced = angle_diff(a.facing_angle(), ang_to_b.rem_euclid(std::f64::consts::TAU)) <= tol;
                if d <= rho {
                    l[CLASS_NEAR] = 1.0;
                }
                if faced {
                    l[CLASS_WATCH] = 1.0;
                }
                if b.talking && d <= rho && faced {
                    l[CLASS_LISTEN] = 1.0;
                }
            }
            l
        })
        .collect()
}

fn hue_to_rgb(h: f64) -> [f32; 3] {
    let h6 = h * 6.0;
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    // keep colors bright and distinct from the dim background
    [0.35 + 0.65 * r as f32, 0.35 + 0.65 * g as f32, 0.35 + 0.65 * b as f32]
}

/// Render the latent scene into the video tensor `[T, H, W, 3]`.
pub fn render_scene(scene: &Scene, cfg: &GenConfig) -> Tensor {
    let (t_ext, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut data = vec![0.0f32; t_ext * h * w * 3];
    let center_frame = cfg.center_frame();

    // static value-noise background, bilinearly upsampled from the grid
    let gs = scene.bg_grid_size;
    let mut bg = vec![0.0f32; h * w * 3];
    for iy in 0..h {
        let gy = iy as f64 / (h - 1) as f64 * (gs - 1) as f64;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f64;
        let y1 = (y0 + 1).min(gs - 1);
        for ix in 0..w {
            let gx = ix as f64 / (w - 1) as f64 * (gs - 1) as f64;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f64;
            let x1 = (x0 + 1).min(gs - 1);
            for c in 0..3 {
                let v00 = scene.bg_grid[(y0 * gs + x0) * 3 + c] as f64;
                let v01 = scene.bg_grid[(y0 * gs + x1) * 3 + c] as f64;
                let v10 = scene.bg_grid[(y1 * gs + x0) * 3 + c] as f64;
                let v11 = scene.bg_grid[(y1 * gs + x1) * 3 + c] as f64;
                let v = v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx;
                bg[(iy * w + ix) * 3 + c] = v as f32;
            }
        }
    }

    for t in 0..t_ext {
        let frame = &mut data[t * h * w * 3..(t + 1) * h * w * 3];
        frame.copy_from_slice(&bg);

        // halos first so squares draw over any rare fringe contact
        for a in &scene.actors {
            if !a.talking {
                continue;
            }
            let (cy, cx) = a.center_at(t, center_frame);
            let r = a.halo_radius();
            let pulse = 0.55 + 0.45 * (std::f64::consts::TAU * 2.0 * t as f64 / t_ext as f64 + a.halo_phase).sin();
            let color = [0.92f32, 0.96, 1.0];
            let y_lo = ((cy - r - 1.5).floor().max(0.0)) as usize;
            let y_hi = ((cy + r + 1.5).ceil().min(h as f64 - 1.0)) as usize;
            let x_lo = ((cx - r - 1.5).floor().max(0.0)) as usize;
            let x_hi = ((cx + r + 1.5).ceil().min(w as f64 - 1.0)) as usize;
            for iy in y_lo..=y_hi {
                for ix in x_lo..=x_hi {
                    let d = dist((iy as f64 + 0.5, ix as f64 + 0.5), (cy, cx));
                    if (d - r).abs() <= HALO_THICKNESS {
                        let px = (iy * w + ix) * 3;
                        for c in 0..3 {
                            frame[px + c] = frame[px + c].max(color[c] * pulse as f32);
                        }
                    }
                }
            }
        }

        for a in &scene.actors {
            let (cy, cx) = a.center_at(t, center_frame);
            let half = a.side * 0.5;
            let brightness = if a.blinking && t % 2 == 1 { 0.45f32 } else { 1.0 };
            fill_rect(frame, h, w, cy - half, cx - half, cy + half, cx + half, |c| {
                a.color[c] * brightness
            });

            // orientation tick: bright block at the faced edge, inside the box
            let ang = a.facing_angle();
            let ty = cy + (half - 2.5) * ang.sin();
            let tx = cx + (half - 2.5) * ang.cos();
            fill_rect(frame, h, w, ty - 2.0, tx - 2.0, ty + 2.0, tx + 2.0, |_| 1.0);

            if a.carrying {
                // attached dot at the lower-right inside corner
                let dy = cy + half - 1.5;
                let dx = cx + half - 1.5;
                fill_rect(frame, h, w, dy - 1.5, dx - 1.5, dy + 1.5, dx + 1.5, |c| {
                    [1.0f32, 0.85, 0.1][c]
                });
            }
        }
    }

    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![t_ext, h, w, 3], data).unwrap()
}

fn fill_rect(
    frame: &mut [f32],
    h: usize,
    w: usize,
    y1: f64,
    x1: f64,
    y2: f64,
    x2: f64,
    color: impl Fn(usize) -> f32,
) {
    let iy1 = y1.round().max(0.0) as usize;
    let iy2 = (y2.round() as usize).min(h);
    let ix1 = x1.round().max(0.0) as usize;
    let ix2 = (x2.round() as usize).min(w);
    for iy in iy1..iy2 {
        for ix in ix1..ix2 {
            let px = (iy * w + ix) * 3;
            for c in 0..3 {
                frame[px + c] = color(c);
            }
        }
    }
}

/// Normalized center-frame bounding box of one actor.
pub fn actor_bbox(a: &ActorState, cfg: &GenConfig) -> Result<ActorBox> {
    let half = a.side * 0.5;
    ActorBox::new(
        ((a.center.0 - half) / cfg.height as f64) as f32,
        ((a.center.1 - half) / cfg.width as f64) as f32,
        ((a.center.0 + half) / cfg.height as f64) as f32,
        ((a.center.1 + half) / cfg.width as f64) as f32,
        a.id,
    )
}

/// Generate one segment: latent scene, labels and rendered video.
pub fn gen_segment(seed: u64, cfg: &GenConfig) -> Result<SyntheticSegment> {
    let scene = gen_scene(seed, cfg)?;
    let labels = labels_from_scene(&scene, cfg);
    let video = render_scene(&scene, cfg);
    let actors = scene
        .actors
        .iter()
        .zip(labels)
        .map(|(a, l)| {
            Ok(SegmentActor { bbox: actor_bbox(a, cfg)?, labels: l })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSegment { video, actors, seed })
}

/// Stack per-actor label vectors into the `[A, K]` tensor.
pub fn label_matrix(seg: &SyntheticSegment) -> Tensor {
    let k = seg.actors.first().map(|a| a.labels.len()).unwrap_or(0);
    let data: Vec<f32> = seg.actors.iter().flat_map(|a| a.labels.iter().copied()).collect();
    Tensor::new(vec![seg.actors.len(), k], data).unwrap()
}

// ---- augmentation ----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Minimum retained area of the random crop.
    pub min_crop_area: f64,
    pub flip_prob: f64,
    /// Box-coordinate jitter as a fraction of box width/height.
    pub jitter_frac: f32,
    pub enable_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { min_crop_area: 0.8, flip_prob: 0.5, jitter_frac: 0.05, enable_crop: true }
    }
}

/// Mirror a segment horizontally: pixels and boxes flip; labels are
/// preserved because the scene geometry (orientations included) mirrors
/// consistently. Applying it twice is the identity.
pub fn flip_horizontal(seg: &SyntheticSegment) -> SyntheticSegment {
    let shape = seg.video.shape().to_vec();
    let (t_ext, h, w) = (shape[0], shape[1], shape[2]);
    let src = seg.video.data();
    let mut data = vec![0.0f32; src.len()];
    for t in 0..t_ext {
        for iy in 0..h {
            for ix in 0..w {
                let s = ((t * h + iy) * w + ix) * 3;
                let d = ((t * h + iy) * w + (w - 1 - ix)) * 3;
                data[d..d + 3].copy_from_slice(&src[s..s + 3]);
            }
        }
    }
    let actors = seg
        .actors
        .iter()
        .map(|a| SegmentActor {
            bbox: ActorBox {
                y1: a.bbox.y1,
                x1: 1.0 - a.bbox.x2,
                y2: a.bbox.y2,
                x2: 1.0 - a.bbox.x1,
                actor_id: a.bbox.actor_id,
            },
            labels: a.labels.clone(),
        })
        .collect();
    SyntheticSegment { video: Tensor::new(shape, data).unwrap(), actors, seed: seg.seed }
}

/// Bilinearly resample a normalized sub-rectangle of every frame back to
/// the original resolution.
fn crop_resize(video: &Tensor, oy: f64, ox: f64, fy: f64, fx: f64) -> Tensor {
    let shape = video.shape();
    let (t_ext, h, w) = (shape[0], shape[1], shape[2]);
    let src = video.data();
    let mut data = vec![0.0f32; src.len()];
    for t in 0..t_ext {
        for iy in 0..h {
            // continuous source coordinate of this output pixel center
            let sy = (oy + fy * (iy as f64 + 0.5) / h as f64) * h as f64 - 0.5;
            let y0 = sy.floor();
            let wy = sy - y0;
            let y0i = (y0 as isize).clamp(0, h as isize - 1) as usize;
            let y1i = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
            for ix in 0..w {
                let sx = (ox + fx * (ix as f64 + 0.5) / w as f64) * w as f64 - 0.5;
                let x0 = sx.floor();
                let wx = sx - x0;
                let x0i = (x0 as isize).clamp(0, w as isize - 1) as usize;
                let x1i = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
                for c in 0..3 {
                    let g = |yy: usize, xx: usize| src[((t * h + yy) * w + xx) * 3 + c] as f64;
                    let v = g(y0i, x0i) * (1.0 - wy) * (1.0 - wx)
                        + g(y0i, x1i) * (1.0 - wy) * wx
                        + g(y1i, x0i) * wy * (1.0 - wx)
                        + g(y1i, x1i) * wy * wx;
                    data[((t * h + iy) * w + ix) * 3 + c] = v as f32;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Spatial crop + flip + box jitter. Labels are unchanged; a crop that
/// would drop any actor's box center is resampled (bounded retries).
pub fn augment(seg: &SyntheticSegment, cfg: &AugmentConfig, seed: u64) -> Result<SyntheticSegment> {
    let mut rng = Rng::from_seed_and_tag(seed, 0x617567);
    let mut out = seg.clone();

    if cfg.enable_crop {
        let side_min = cfg.min_crop_area.sqrt();
        let mut cropped = false;
        for _ in 0..12 {
            let fy = rng.uniform(side_min, 1.0);
            let fx = rng.uniform(side_min, 1.0);
            let oy = rng.uniform(0.0, 1.0 - fy);
            let ox = rng.uniform(0.0, 1.0 - fx);
            let centers_ok = out.actors.iter().all(|a| {
                let (cy, cx) = a.bbox.center();
                let ny = (cy as f64 - oy) / fy;
                let nx = (cx as f64 - ox) / fx;
                (0.02..=0.98).contains(&ny) && (0.02..=0.98).contains(&nx)
            });
            if !centers_ok {
                continue;
            }
            out.video = crop_resize(&out.video, oy, ox, fy, fx);
            for a in out.actors.iter_mut() {
                a.bbox.y1 = (((a.bbox.y1 as f64 - oy) / fy).clamp(0.0, 1.0)) as f32;
                a.bbox.y2 = (((a.bbox.y2 as f64 - oy) / fy).clamp(0.0, 1.0)) as f32;
                a.bbox.x1 = (((a.bbox.x1 as f64 - ox) / fx).clamp(0.0, 1.0)) as f32;
                a.bbox.x2 = (((a.bbox.x2 as f64 - ox) / fx).clamp(0.0, 1.0)) as f32;
            }
            cropped = true;
            break;
        }
        if !cropped {
            return Err(Error::Data(format!(
                "augment(seed {seed}): no crop kept every actor center after 12 attempts"
            )));
        }
    }

    if rng.chance(cfg.flip_prob) {
        out = flip_horizontal(&out);
    }

    if cfg.jitter_frac > 0.0 {
        let j = cfg.jitter_frac as f64;
        for a in out.actors.iter_mut() {
            let bh = (a.bbox.y2 - a.bbox.y1) as f64;
            let bw = (a.bbox.x2 - a.bbox.x1) as f64;
            a.bbox.y1 = ((a.bbox.y1 as f64 + rng.uniform(-j, j) * bh).clamp(0.0, 1.0)) as f32;
            a.bbox.y2 = ((a.bbox.y2 as f64 + rng.uniform(-j, j) * bh).clamp(0.0, 1.0)) as f32;
            a.bbox.x1 = ((a.bbox.x1 as f64 + rng.uniform(-j, j) * bw).clamp(0.0, 1.0)) as f32;
            a.bbox.x2 = ((a.bbox.x2 as f64 + rng.uniform(-j, j) * bw).clamp(0.0, 1.0)) as f32;
        }
    }

    Ok(out)
}

// ---- dataset ----------------------------------------------------------

/// In-memory dataset: generation config, class catalog and segments.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: GenConfig,
    pub catalog: ClassCatalog,
    pub base_seed: u64,
    pub segments: Vec<SyntheticSegment>,
}

impl SyntheticDataset {
    /// Generate `count` segments with per-segment seeds derived from
    /// `base_seed`.
    pub fn generate(cfg: &GenConfig, base_seed: u64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("dataset: segment count must be >= 1".into()));
        }
        let segments = (0..count)
            .map(|i| gen_segment(derive(base_seed, i as u64), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticDataset {
            config: cfg.clone(),
            catalog: ClassCatalog::default_catalog(),
            base_seed,
            segments,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    base_seed: u64,
    count: usize,
    config: GenConfig,
    classes: Vec<ManifestClass>,
    segments: Vec<ManifestSegment>,
}

#[derive(Serialize, Deserialize)]
struct ManifestClass {
    name: String,
    super_class: SuperClass,
}

#[derive(Serialize, Deserialize)]
struct ManifestSegment {
    dir: String,
    seed: u64,
    num_actors: usize,
}

#[derive(Serialize, Deserialize)]
struct ActorsFile {
    seed: u64,
    actors: Vec<SegmentActor>,
}

const MANIFEST_VERSION: u32 = 1;

/// Write the dataset as a directory: `manifest.json` plus one directory per
/// segment holding `frames.acamt` and `actors.json`.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut manifest = ManifestFile {
        format_version: MANIFEST_VERSION,
        base_seed: ds.base_seed,
        count: ds.segments.len(),
        config: ds.config.clone(),
        classes: ds
            .catalog
            .iter()
            .map(|(n, s)| ManifestClass { name: n.to_string(), super_class: s })
            .collect(),
        segments: Vec::with_capacity(ds.segments.len()),
    };

    for (i, seg) in ds.segments.iter().enumerate() {
        let name = format!("seg_{i:05}");
        let seg_dir = dir.join(&name);
        std::fs::create_dir_all(&seg_dir).map_err(|e| Error::io(&seg_dir, e))?;
        seg.video.save(seg_dir.join("frames.acamt"))?;
        let actors = ActorsFile { seed: seg.seed, actors: seg.actors.clone() };
        let path = seg_dir.join("actors.json");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(serde_json::to_string_pretty(&actors)?.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        manifest.segments.push(ManifestSegment { dir: name, seed: seg.seed, num_actors: seg.actors.len() });
    }

    let path = dir.join("manifest.json");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())
        .map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let expected = ClassCatalog::default_catalog();
    let loaded: Vec<(String, SuperClass)> = manifest
        .classes
        .iter()
        .map(|c| (c.name.clone(), c.super_class))
        .collect();
    let catalog = ClassCatalog { entries: loaded };
    if catalog != expected {
        return Err(Error::Format("dataset class catalog does not match this build".into()));
    }
    let mut segments = Vec::with_capacity(manifest.segments.len());
    for ms in &manifest.segments {
        let seg_dir = dir.join(&ms.dir);
        let video = Tensor::load(seg_dir.join("frames.acamt"))?;
        let actors_path = seg_dir.join("actors.json");
        let text = std::fs::read_to_string(&actors_path).map_err(|e| Error::io(&actors_path, e))?;
        let actors: ActorsFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", actors_path.display())))?;
        if actors.actors.len() != ms.num_actors {
            return Err(Error::Format(format!(
                "{}: actor count disagrees with manifest",
                actors_path.display()
            )));
        }
        segments.push(SyntheticSegment { video, actors: actors.actors, seed: actors.seed });
    }
    Ok(SyntheticDataset { config: manifest.config, catalog, base_seed: manifest.base_seed, segments })
}
