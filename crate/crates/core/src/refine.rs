//! Local registration refinement of one group-level similarity transform.
//!
//! The transform is moved by left-composed increments expressed about a
//! pivot point (the model centroid), so rotation increments do not swing
//! the cameras around a far-away gauge origin. Gradients are central finite
//! differences over the seven chart coordinates: three axis-angle, three
//! translation and one log-scale.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use nalgebra::{Unit, UnitQuaternion};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result, StageExt};
use crate::fusion::MaskMap;
use crate::geometry::{CameraPose, PoseSet, Sim3, Vec3};
use crate::render::{
    photometric_loss, render_occupancy, render_rgb, soft_silhouette_loss, RgbImage, SplatCloud,
};

pub type ImageMap = HashMap<String, RgbImage>;

/// Local coordinates around a transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Chart {
    pub pivot: Vec3,
}

impl Sim3Chart {
    pub fn new(pivot: Vec3) -> Self {
        Self { pivot }
    }

    /// The increment `[wx, wy, wz, tx, ty, tz, log_s]` as a transform about
    /// the pivot.
    pub fn increment(&self, delta: &[f64; 7]) -> Sim3 {
        let w = Vec3::new(delta[0], delta[1], delta[2]);
        let rot = UnitQuaternion::from_scaled_axis(w);
        let scale = delta[6].exp();
        let t = Vec3::new(delta[3], delta[4], delta[5]);
        // c + s R (p - c) + t
        Sim3::new(scale, rot, self.pivot - scale * (rot * self.pivot) + t)
    }

    pub fn retract(&self, at: &Sim3, delta: &[f64; 7]) -> Sim3 {
        self.increment(delta).compose(at)
    }
}

/// Finite-difference step per chart coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSteps {
    pub rotation: f64,
    pub translation: f64,
    pub log_scale: f64,
}

impl FdSteps {
    fn per_coordinate(&self) -> [f64; 7] {
        let (r, t, s) = (self.rotation, self.translation, self.log_scale);
        [r, r, r, t, t, t, s]
    }
}

/// Central-difference gradient of `loss` in the chart around `at`.
pub fn sim3_fd_gradient(
    loss: impl Fn(&Sim3) -> Result<f64>,
    at: &Sim3,
    chart: &Sim3Chart,
    steps: &FdSteps,
) -> Result<[f64; 7]> {
    let h = steps.per_coordinate();
    let mut grad = [0.0; 7];
    for i in 0..7 {
        let mut d = [0.0; 7];
        d[i] = h[i];
        let plus = loss(&chart.retract(at, &d))?;
        d[i] = -h[i];
        let minus = loss(&chart.retract(at, &d))?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        grad[i] = (plus - minus) / (2.0 * h[i]);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Initial step in radians.
    pub step_rotation: f64,
    /// Initial step as a fraction of the scene diameter.
    pub step_translation: f64,
    pub step_log_scale: f64,
    pub fd_rotation: f64,
    /// Fraction of the scene diameter.
    pub fd_translation: f64,
    pub fd_log_scale: f64,
    /// Stop when the loss improved by less than this relative amount over
    /// `window` iterations.
    pub tolerance: f64,
    pub window: usize,
    pub max_halvings: usize,
    /// Step growth after an accepted iteration.
    pub growth: f64,
    /// Views used by the loss; `None` uses every view. A batch is drawn once
    /// with `batch_seed` and kept for the whole run.
    pub batch: Option<usize>,
    pub batch_seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            step_rotation: 0.01,
            step_translation: 0.005,
            step_log_scale: 0.005,
            fd_rotation: 1e-3,
            fd_translation: 1e-3,
            fd_log_scale: 1e-3,
            tolerance: 1e-6,
            window: 10,
            max_halvings: 20,
            growth: 1.5,
            batch: None,
            batch_seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.step_rotation,
            self.step_translation,
            self.step_log_scale,
            self.fd_rotation,
            self.fd_translation,
            self.fd_log_scale,
            self.tolerance,
            self.growth,
        ];
        if positive.iter().any(|v| v.is_nan() || *v <= 0.0) || self.window == 0 || self.batch == Some(0) {
            return Err(Error::invalid(format!("invalid refine config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    /// Step multiplier in effect after this iteration.
    pub step: f64,
    pub accepted: bool,
    pub transform: Sim3,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineTrace {
    pub rows: Vec<TraceRow>,
}

impl RefineTrace {
    /// Losses of the initial point and every accepted iterate.
    pub fn accepted_losses(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.accepted || r.iteration == 0)
            .map(|r| r.loss)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub transform: Sim3,
    pub trace: RefineTrace,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// An iteration found no decreasing step.
    pub stalled: bool,
    pub converged: bool,
}

/// Backtracking descent along the preconditioned, normalized negative
/// gradient. Each chart coordinate moves at most `step_i * eta` per
/// iteration; `eta` halves on every rejected trial and grows on acceptance.
pub fn minimize(
    loss: impl Fn(&Sim3) -> Result<f64>,
    init: &Sim3,
    chart: &Sim3Chart,
    diameter: f64,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    let scales = [
        cfg.step_rotation,
        cfg.step_rotation,
        cfg.step_rotation,
        cfg.step_translation * diameter,
        cfg.step_translation * diameter,
        cfg.step_translation * diameter,
        cfg.step_log_scale,
    ];
    let fd = FdSteps {
        rotation: cfg.fd_rotation,
        translation: cfg.fd_translation * diameter,
        log_scale: cfg.fd_log_scale,
    };

    let mut current = *init;
    let mut current_loss = loss(&current)?;
    if !current_loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let initial_loss = current_loss;
    let mut eta = 1.0;
    let mut trace = RefineTrace::default();
    trace.rows.push(TraceRow {
        iteration: 0,
        loss: current_loss,
        step: eta,
        accepted: false,
        transform: current,
    });
    let mut history = vec![current_loss];
    let mut stalled = false;
    let mut converged = false;

    for iteration in 1..=cfg.max_iters {
        let grad = sim3_fd_gradient(&loss, &current, chart, &fd)?;
        let scaled: Vec<f64> = grad.iter().zip(&scales).map(|(g, s)| g * s).collect();
        let norm = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            stalled = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let mut delta = [0.0; 7];
            for i in 0..7 {
                delta[i] = -eta * scales[i] * scaled[i] / norm;
            }
            let trial = chart.retract(&current, &delta);
            let trial_loss = loss(&trial)?;
            if !trial_loss.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            if trial_loss < current_loss {
                accepted = Some((trial, trial_loss));
                break;
            }
            eta *= 0.5;
        }
        match accepted {
            Some((t, l)) => {
                current = t;
                current_loss = l;
                eta = (eta * cfg.growth).min(1e3);
                trace.rows.push(TraceRow {
                    iteration,
                    loss: l,
                    step: eta,
                    accepted: true,
                    transform: t,
                });
            }
            None => {
                trace.rows.push(TraceRow {
                    iteration,
                    loss: current_loss,
                    step: eta,
                    accepted: false,
                    transform: current,
                });
                stalled = true;
                break;
            }
        }
        history.push(current_loss);
        if history.len() > cfg.window {
            let old = history[history.len() - 1 - cfg.window];
            if old - current_loss <= cfg.tolerance * old.abs() {
                converged = true;
                break;
            }
        }
    }

    Ok(RefineOutcome {
        transform: current,
        trace,
        initial_loss,
        final_loss: current_loss,
        stalled,
        converged,
    })
}

fn batch_views(poses: &PoseSet, cfg: &RefineConfig) -> Vec<CameraPose> {
    match cfg.batch {
        Some(b) if b < poses.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.batch_seed);
            let mut idx = sample(&mut rng, poses.len(), b).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| poses.poses()[i].clone()).collect()
        }
        _ => poses.poses().to_vec(),
    }
}

fn chart_for(model: &SplatCloud, poses: &PoseSet, init: &Sim3) -> (Sim3Chart, f64) {
    let diameter = poses.transformed(init).diameter().max(1e-9);
    (Sim3Chart::new(model.centroid()), diameter)
}

/// Mean soft-silhouette loss over the views after moving them by `t`.
pub fn silhouette_objective(
    t: &Sim3,
    views: &[CameraPose],
    model: &SplatCloud,
    masks: &MaskMap,
) -> Result<f64> {
    let mut sum = 0.0;
    for v in views {
        let mask = masks
            .get(&v.id)
            .ok_or_else(|| Error::MissingMask(v.id.clone()))?;
        let occ = render_occupancy(model, &t.apply_pose(v))?;
        sum += soft_silhouette_loss(&occ.image, mask)?;
    }
    Ok(sum / views.len() as f64)
}

/// Mean masked photometric loss over the views after moving them by `t`.
pub fn photometric_objective(
    t: &Sim3,
    views: &[CameraPose],
    model: &SplatCloud,
    images: &ImageMap,
    masks: &MaskMap,
) -> Result<f64> {
    let mut sum = 0.0;
    for v in views {
        let mask = masks
            .get(&v.id)
            .ok_or_else(|| Error::MissingMask(v.id.clone()))?;
        let image = images
            .get(&v.id)
            .ok_or_else(|| Error::MissingImage(v.id.clone()))?;
        let rgb = render_rgb(model, &t.apply_pose(v))?;
        sum += photometric_loss(&rgb.image, image, mask)?.value;
    }
    Ok(sum / views.len() as f64)
}

/// Silhouette-guided refinement of the auxiliary group transform; the model
/// is read-only.
pub fn refine_silhouette(
    p_aux: &PoseSet,
    model: &SplatCloud,
    masks: &MaskMap,
    init: &Sim3,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    let views = batch_views(p_aux, cfg);
    let (chart, diameter) = chart_for(model, p_aux, init);
    minimize(
        |t| silhouette_objective(t, &views, model, masks),
        init,
        &chart,
        diameter,
        cfg,
    )
}

/// Photometric refinement of the same group transform; the model is
/// read-only.
pub fn refine_photometric(
    p_aux: &PoseSet,
    model: &SplatCloud,
    images: &ImageMap,
    masks: &MaskMap,
    init: &Sim3,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    let views = batch_views(p_aux, cfg);
    let (chart, diameter) = chart_for(model, p_aux, init);
    minimize(
        |t| photometric_objective(t, &views, model, images, masks),
        init,
        &chart,
        diameter,
        cfg,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRefineOutcome {
    pub transform: Sim3,
    pub silhouette: RefineOutcome,
    pub photometric: RefineOutcome,
}

/// Silhouette stage followed by the photometric stage.
pub fn local_refine(
    p_aux: &PoseSet,
    model: &SplatCloud,
    images: &ImageMap,
    masks: &MaskMap,
    init: &Sim3,
    silhouette_cfg: &RefineConfig,
    photometric_cfg: &RefineConfig,
) -> Result<LocalRefineOutcome> {
    let silhouette = refine_silhouette(p_aux, model, masks, init, silhouette_cfg)
        .stage("silhouette refinement")?;
    let photometric = refine_photometric(
        p_aux,
        model,
        images,
        masks,
        &silhouette.transform,
        photometric_cfg,
    )
    .stage("photometric refinement")?;
    Ok(LocalRefineOutcome {
        transform: photometric.transform,
        silhouette,
        photometric,
    })
}

/// Rotation about a unit axis, handy for perturbing transforms.
pub fn axis_rotation(axis: Vec3, angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: Vec3, q: Vec3) -> impl Fn(&Sim3) -> Result<f64> {
        move |t: &Sim3| Ok((t.transform_point(&p) - q).norm_squared())
    }

    /// Closed-form gradient of |X(p) - q|^2 in the pivot chart.
    fn analytic(t: &Sim3, p: Vec3, q: Vec3, pivot: Vec3) -> [f64; 7] {
        let y = t.transform_point(&p);
        let r = 2.0 * (y - q);
        let v = y - pivot;
        let w = v.cross(&r);
        [w.x, w.y, w.z, r.x, r.y, r.z, r.dot(&v)]
    }

    fn steps() -> FdSteps {
        FdSteps {
            rotation: 1e-3,
            translation: 1e-3,
            log_scale: 1e-3,
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let chart = Sim3Chart::new(Vec3::zeros());
        let g = sim3_fd_gradient(|_| Ok(3.5), &Sim3::identity(), &chart, &steps()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn fd_matches_closed_form_on_quadratic() {
        let p = Vec3::new(0.3, -1.2, 2.0);
        let q = Vec3::new(1.0, 0.5, -0.7);
        let pivot = Vec3::new(0.1, 0.2, -0.3);
        let chart = Sim3Chart::new(pivot);
        let t = Sim3::new(
            1.3,
            axis_rotation(Vec3::new(1.0, 2.0, 3.0), 0.4),
            Vec3::new(0.5, 0.0, 1.0),
        );
        let g = sim3_fd_gradient(quadratic(p, q), &t, &chart, &steps()).unwrap();
        let a = analytic(&t, p, q, pivot);
        for i in 0..7 {
            let rel = (g[i] - a[i]).abs() / a[i].abs().max(1e-3);
            assert!(rel < 1e-4, "coord {i}: fd {} analytic {}", g[i], a[i]);
        }
    }

    #[test]
    fn gradient_vanishes_at_minimum() {
        let p = Vec3::new(0.3, -1.2, 2.0);
        let t = Sim3::new(0.8, axis_rotation(Vec3::x(), 0.2), Vec3::new(0.0, 1.0, 0.0));
        let q = t.transform_point(&p);
        let chart = Sim3Chart::new(Vec3::zeros());
        let g = sim3_fd_gradient(quadratic(p, q), &t, &chart, &steps()).unwrap();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n < 1e-5, "{n}");
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let chart = Sim3Chart::new(Vec3::zeros());
        let r = sim3_fd_gradient(
            |t: &Sim3| Ok(if t.scale > 1.0 { f64::NAN } else { 0.0 }),
            &Sim3::identity(),
            &chart,
            &steps(),
        );
        assert!(matches!(r, Err(Error::NonFiniteLoss)));
    }

    #[test]
    fn retract_zero_is_identity() {
        let chart = Sim3Chart::new(Vec3::new(1.0, 2.0, 3.0));
        let t = Sim3::new(2.0, axis_rotation(Vec3::y(), 0.3), Vec3::new(1.0, 0.0, 0.0));
        let r = chart.retract(&t, &[0.0; 7]);
        assert!((r.translation - t.translation).norm() < 1e-12);
        assert_eq!(r.scale, t.scale);
    }

    #[test]
    fn minimize_recovers_point_target_and_is_monotone() {
        let pts = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 1.0, 1.0),
        ];
        let truth = Sim3::new(
            1.1,
            axis_rotation(Vec3::new(1.0, -1.0, 0.5), 0.05),
            Vec3::new(0.05, -0.02, 0.03),
        );
        let targets: Vec<Vec3> = pts.iter().map(|p| truth.transform_point(p)).collect();
        let loss = |t: &Sim3| {
            Ok(pts
                .iter()
                .zip(&targets)
                .map(|(p, q)| (t.transform_point(p) - q).norm_squared())
                .sum::<f64>())
        };
        let cfg = RefineConfig {
            max_iters: 400,
            tolerance: 1e-12,
            ..Default::default()
        };
        let out = minimize(
            loss,
            &Sim3::identity(),
            &Sim3Chart::new(Vec3::zeros()),
            1.0,
            &cfg,
        )
        .unwrap();
        assert!(out.final_loss <= out.initial_loss);
        assert!(out.transform.rotation.angle_to(&truth.rotation) < 1e-3);
        let losses = out.trace.accepted_losses();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_iterations_return_init() {
        let init = Sim3::from_scale(1.5);
        let cfg = RefineConfig {
            max_iters: 0,
            ..Default::default()
        };
        let out = minimize(
            |t: &Sim3| Ok(t.scale),
            &init,
            &Sim3Chart::new(Vec3::zeros()),
            1.0,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.transform, init);
        assert_eq!(out.trace.rows.len(), 1);
    }

    #[test]
    fn flat_loss_stalls_at_init() {
        let init = Sim3::from_translation(Vec3::new(0.1, 0.0, 0.0));
        let out = minimize(
            |_: &Sim3| Ok(1.0),
            &init,
            &Sim3Chart::new(Vec3::zeros()),
            1.0,
            &RefineConfig::default(),
        )
        .unwrap();
        assert!(out.stalled);
        assert_eq!(out.transform, init);
    }
}
