//! Model completion: balanced view sampling over the fused and the newly
//! registered auxiliary views, photometric fine-tuning of the splats, and
//! the loop that folds in one auxiliary placement after another.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result, StageExt};
use crate::fusion::{global_register, FusionParams, MaskMap, RegistrationOutput};
use crate::geometry::{CameraPose, PoseSet, Sim3, Vec3};
use crate::refine::{local_refine, ImageMap, LocalRefineOutcome, RefineConfig};
use crate::render::{
    depth_order, footprints, for_each_pixel, MaskedLoss, RgbImage, SilhouetteMask, SplatCloud,
};
use crate::selection::{
    select_mixed_set, DescriptorSet, MixedPoseSelection, PosePrediction, SelectionParams,
};
use crate::synth::stream_rng;

/// Logit bound keeping opacity strictly inside (0, 1).
const LOGIT_LIMIT: f64 = 13.8;

/// One training epoch: a fused subset the size of the auxiliary set, all
/// auxiliary views, and the shuffled order they are consumed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub fused: Vec<String>,
    pub aux: Vec<String>,
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSchedule {
    pub epochs: Vec<Epoch>,
    /// One view id per iteration.
    pub views: Vec<String>,
    pub seed: u64,
    /// The fused pool was smaller than the auxiliary set, so subsets were
    /// drawn with replacement.
    pub with_replacement: bool,
}

impl SampleSchedule {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

pub fn balanced_schedule(
    fused_ids: &[String],
    aux_ids: &[String],
    iterations: usize,
    seed: u64,
) -> Result<SampleSchedule> {
    if fused_ids.is_empty() || aux_ids.is_empty() {
        return Err(Error::invalid(
            "balanced schedule needs fused and auxiliary views",
        ));
    }
    let mut rng = stream_rng(seed, 7000);
    let with_replacement = fused_ids.len() < aux_ids.len();
    let mut epochs = Vec::new();
    let mut views = Vec::with_capacity(iterations);
    while views.len() < iterations {
        let fused: Vec<String> = if with_replacement {
            (0..aux_ids.len())
                .map(|_| fused_ids[rng.random_range(0..fused_ids.len())].clone())
                .collect()
        } else {
            fused_ids
                .choose_multiple(&mut rng, aux_ids.len())
                .cloned()
                .collect()
        };
        let mut order: Vec<String> = fused.iter().chain(aux_ids).cloned().collect();
        order.shuffle(&mut rng);
        let take = (iterations - views.len()).min(order.len());
        views.extend(order[..take].iter().cloned());
        epochs.push(Epoch {
            fused,
            aux: aux_ids.to_vec(),
            order,
        });
    }
    Ok(SampleSchedule {
        epochs,
        views,
        seed,
        with_replacement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_position: f64,
    pub lr_log_sigma: f64,
    pub lr_color: f64,
    pub lr_logit: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            lr_position: 1e-4,
            lr_log_sigma: 5e-3,
            lr_color: 1e-2,
            lr_logit: 2.5e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lr_position,
            self.lr_log_sigma,
            self.lr_color,
            self.lr_logit,
        ];
        let ok = rates.iter().all(|r| *r >= 0.0 && r.is_finite())
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training config {self:?}")))
        }
    }
}

/// A registered training view.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub pose: CameraPose,
    pub image: RgbImage,
    pub mask: SilhouetteMask,
}

pub type ViewMap = HashMap<String, TrainView>;

/// Per-splat gradient of the photometric loss, in the training
/// parameterization: position, log radius, color and logit opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGradient {
    pub position: Vec<Vec3>,
    pub log_sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub logit: Vec<f64>,
}

impl SplatGradient {
    fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); n],
            log_sigma: vec![0.0; n],
            color: vec![[0.0; 3]; n],
            logit: vec![0.0; n],
        }
    }
}

struct Contribution {
    pixel: u32,
    footprint: u32,
    g: f64,
    /// Composite behind this splat.
    behind: [f64; 3],
}

/// Masked L1 photometric loss of one view and its exact gradient through
/// back-to-front compositing. Pixels at the footprint cutoff are treated as
/// fixed, and the subgradient of |x| at 0 is taken as 0.
pub fn photometric_gradient(
    cloud: &SplatCloud,
    view: &TrainView,
) -> Result<(MaskedLoss, SplatGradient)> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let cam = &view.pose;
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    if (view.image.width, view.image.height) != (w, h) {
        return Err(Error::DimensionMismatch(
            view.image.width,
            view.image.height,
            w,
            h,
        ));
    }
    if (view.mask.width, view.mask.height) != (w, h) {
        return Err(Error::DimensionMismatch(
            view.mask.width,
            view.mask.height,
            w,
            h,
        ));
    }
    let mut fps = footprints(cloud, cam);
    depth_order(&mut fps);
    let mut pixels = vec![[0.0f64; 3]; (w * h) as usize];
    let mut contributions = Vec::new();
    for (fi, fp) in fps.iter().enumerate() {
        let s = &cloud.splats[fp.index];
        for_each_pixel(fp, |x, y, g| {
            let p = (y * w + x) as usize;
            let a = s.opacity * g;
            let px = &mut pixels[p];
            if view.mask.bits[p] {
                contributions.push(Contribution {
                    pixel: p as u32,
                    footprint: fi as u32,
                    g,
                    behind: *px,
                });
            }
            for (p, c) in px.iter_mut().zip(s.color) {
                *p = a * c + (1.0 - a) * *p;
            }
        });
    }

    let n = view.mask.count();
    let mut grad = SplatGradient::zeros(cloud.len());
    if n == 0 {
        return Ok((
            MaskedLoss {
                value: 0.0,
                pixels: 0,
            },
            grad,
        ));
    }
    let norm = 1.0 / (3 * n) as f64;
    let mut sum = 0.0;
    let mut d_out = vec![[0.0f64; 3]; pixels.len()];
    for (p, (px, reference)) in pixels.iter().zip(&view.image.pixels).enumerate() {
        if view.mask.bits[p] {
            for c in 0..3 {
                let r = px[c].clamp(0.0, 1.0) - reference[c];
                sum += r.abs();
                d_out[p][c] = if r > 0.0 {
                    norm
                } else if r < 0.0 {
                    -norm
                } else {
                    0.0
                };
            }
        }
    }

    // Walking contributions backwards visits each pixel's splats near to
    // far, so the running transmittance is the product over splats in front.
    let mut trans = vec![1.0f64; pixels.len()];
    let mut d_u = vec![0.0f64; fps.len()];
    let mut d_v = vec![0.0f64; fps.len()];
    let mut d_s = vec![0.0f64; fps.len()];
    for e in contributions.iter().rev() {
        let p = e.pixel as usize;
        let fp = &fps[e.footprint as usize];
        let s = &cloud.splats[fp.index];
        let t = trans[p];
        let a = s.opacity * e.g;
        let dc = d_out[p];
        let mut d_alpha = 0.0;
        let gc = &mut grad.color[fp.index];
        for c in 0..3 {
            gc[c] += dc[c] * a * t;
            d_alpha += dc[c] * (s.color[c] - e.behind[c]) * t;
        }
        trans[p] = t * (1.0 - a);
        grad.logit[fp.index] += d_alpha * e.g * s.opacity * (1.0 - s.opacity);
        let d_g = d_alpha * s.opacity * e.g;
        let x = (e.pixel % w) as f64;
        let y = (e.pixel / w) as f64;
        let (dx, dy) = (x - fp.u, y - fp.v);
        let inv_s2 = 1.0 / (fp.s * fp.s);
        d_u[e.footprint as usize] += d_g * dx * inv_s2;
        d_v[e.footprint as usize] += d_g * dy * inv_s2;
        d_s[e.footprint as usize] += d_g * (dx * dx + dy * dy) * inv_s2 / fp.s;
    }

    let k = &cam.intrinsics;
    for (fi, fp) in fps.iter().enumerate() {
        if d_u[fi] == 0.0 && d_v[fi] == 0.0 && d_s[fi] == 0.0 {
            continue;
        }
        let s = &cloud.splats[fp.index];
        let (px, py, pz) = (fp.cam.x, fp.cam.y, fp.cam.z);
        let iz = 1.0 / pz;
        let d_cam = Vec3::new(
            d_u[fi] * k.fx * iz,
            d_v[fi] * k.fy * iz,
            -(d_u[fi] * k.fx * px + d_v[fi] * k.fy * py + d_s[fi] * k.fx * s.sigma) * iz * iz,
        );
        grad.position[fp.index] += cam.rotation * d_cam;
        grad.log_sigma[fp.index] += d_s[fi] * k.fx * iz * s.sigma;
    }
    Ok((
        MaskedLoss {
            value: sum * norm,
            pixels: n,
        },
        grad,
    ))
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Adam step for entry `i`; returns the parameter increment.
    fn step(&mut self, i: usize, g: f64, lr: f64, cfg: &TrainConfig, t: i32) -> f64 {
        self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
        self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = self.m[i] / (1.0 - cfg.beta1.powi(t));
        let v_hat = self.v[i] / (1.0 - cfg.beta2.powi(t));
        -lr * m_hat / (v_hat.sqrt() + cfg.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub cloud: SplatCloud,
    /// Loss of the scheduled view before each update.
    pub losses: Vec<f64>,
    /// Iteration at which a non-finite loss stopped training; `cloud` is
    /// then the last finite snapshot.
    pub stopped_at: Option<usize>,
}

/// Adam on the masked photometric loss, one scheduled view per iteration.
/// Fields with a zero learning rate are never written. Splat count and
/// camera poses are unchanged.
pub fn finetune_splats(
    model: &SplatCloud,
    views: &ViewMap,
    schedule: &SampleSchedule,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if let Some(id) = schedule.views.iter().find(|id| !views.contains_key(*id)) {
        return Err(Error::MissingImage(id.clone()));
    }
    let n = model.len();
    let mut cloud = model.clone();
    let mut pos = Moments::new(3 * n);
    let mut log_sigma = Moments::new(n);
    let mut color = Moments::new(3 * n);
    let mut logit = Moments::new(n);
    let mut losses = Vec::with_capacity(schedule.len());
    for (it, id) in schedule.views.iter().enumerate() {
        let (loss, grad) = photometric_gradient(&cloud, &views[id])?;
        let finite = loss.value.is_finite()
            && grad
                .position
                .iter()
                .all(|p| p.iter().all(|v| v.is_finite()))
            && grad
                .log_sigma
                .iter()
                .chain(&grad.logit)
                .all(|v| v.is_finite());
        if !finite {
            return Ok(FinetuneOutcome {
                cloud,
                losses,
                stopped_at: Some(it),
            });
        }
        losses.push(loss.value);
        let t = (it + 1).min(i32::MAX as usize) as i32;
        for (i, s) in cloud.splats.iter_mut().enumerate() {
            if cfg.lr_position > 0.0 {
                for a in 0..3 {
                    s.position[a] +=
                        pos.step(3 * i + a, grad.position[i][a], cfg.lr_position, cfg, t);
                }
            }
            if cfg.lr_log_sigma > 0.0 {
                let d = log_sigma.step(i, grad.log_sigma[i], cfg.lr_log_sigma, cfg, t);
                s.sigma *= d.exp();
            }
            if cfg.lr_color > 0.0 {
                for c in 0..3 {
                    let d = color.step(3 * i + c, grad.color[i][c], cfg.lr_color, cfg, t);
                    s.color[c] = (s.color[c] + d).clamp(0.0, 1.0);
                }
            }
            if cfg.lr_logit > 0.0 {
                let d = logit.step(i, grad.logit[i], cfg.lr_logit, cfg, t);
                if d != 0.0 {
                    let l =
                        ((s.opacity / (1.0 - s.opacity)).ln() + d).clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
                    s.opacity = 1.0 / (1.0 + (-l).exp());
                }
            }
        }
    }
    Ok(FinetuneOutcome {
        cloud,
        losses,
        stopped_at: None,
    })
}

/// Mean masked photometric loss over the given views.
pub fn mean_view_loss(cloud: &SplatCloud, views: &ViewMap, ids: &[String]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::invalid("no views to evaluate"));
    }
    let mut sum = 0.0;
    for id in ids {
        let v = views
            .get(id)
            .ok_or_else(|| Error::MissingImage(id.clone()))?;
        let img = crate::render::render_rgb(cloud, &v.pose)?.image;
        sum += crate::render::photometric_loss(&img, &v.image, &v.mask)?.value;
    }
    Ok(sum / ids.len() as f64)
}

/// Images, masks and descriptors of one placement, cameras in its own gauge.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryInput {
    pub label: String,
    pub cameras: PoseSet,
    pub images: ImageMap,
    pub masks: MaskMap,
    pub descriptors: DescriptorSet,
}

/// Everything fused so far, in the model frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub cameras: PoseSet,
    pub views: ViewMap,
    pub descriptors: DescriptorSet,
    pub model: SplatCloud,
    /// Transform applied to each fused auxiliary set, in fusion order.
    pub registrations: Vec<Sim3>,
}

impl FusionState {
    /// State seeded from the main placement, whose cameras define the frame.
    pub fn from_main(
        cameras: PoseSet,
        images: &ImageMap,
        masks: &MaskMap,
        descriptors: DescriptorSet,
        model: SplatCloud,
    ) -> Result<Self> {
        let views = to_views(&cameras, images, masks)?;
        Ok(Self {
            cameras,
            views,
            descriptors,
            model,
            registrations: Vec::new(),
        })
    }
}

pub fn to_views(cameras: &PoseSet, images: &ImageMap, masks: &MaskMap) -> Result<ViewMap> {
    cameras
        .iter()
        .map(|c| {
            let image = images
                .get(&c.id)
                .ok_or_else(|| Error::MissingImage(c.id.clone()))?;
            let mask = masks
                .get(&c.id)
                .ok_or_else(|| Error::MissingMask(c.id.clone()))?;
            Ok((
                c.id.clone(),
                TrainView {
                    pose: c.clone(),
                    image: image.clone(),
                    mask: mask.clone(),
                },
            ))
        })
        .collect()
}

/// How the mixed-pose images are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum MixedChoice {
    Selected(SelectionParams),
    /// Seeded random subsets of the given sizes, bypassing selection.
    Random {
        m: usize,
        n: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub mixed: MixedChoice,
    pub fusion: FusionParams,
    /// `None` skips local refinement.
    pub refine: Option<(RefineConfig, RefineConfig)>,
    /// `None` skips completion.
    pub train: Option<TrainConfig>,
    /// Views of each set held out from training.
    pub holdout: Vec<String>,
}

/// Places mixed-set images in one shared frame: the jointly predicting
/// multi-view model, given main ids then auxiliary ids.
pub type MixedPredictor<'a> = dyn Fn(&[String], &[String]) -> Result<PoseSet> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionStep {
    pub selection: Option<MixedPoseSelection>,
    pub mixed_ids: (Vec<String>, Vec<String>),
    pub mixed: PoseSet,
    pub registration: RegistrationOutput,
    pub refinement: Option<LocalRefineOutcome>,
    /// Auxiliary-to-model transform after every enabled stage.
    pub transform: Sim3,
    pub schedule: Option<SampleSchedule>,
    pub finetune: Option<FinetuneOutcome>,
    pub seconds: StageSeconds,
}

/// Wall time spent in each stage of one fusion step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageSeconds {
    pub selection: f64,
    pub prediction: f64,
    pub global: f64,
    pub refine: f64,
    pub completion: f64,
}

/// Registers one more placement against everything fused so far and
/// fine-tunes the model on the grown view pool.
pub fn iterate_auxiliary_poses(
    state: &FusionState,
    aux: &AuxiliaryInput,
    oracle: &PosePrediction,
    predictor: &MixedPredictor<'_>,
    cfg: &StageConfig,
) -> Result<(FusionState, FusionStep)> {
    let mut seconds = StageSeconds::default();
    let clock = Instant::now();
    let (selection, mixed_ids) = match &cfg.mixed {
        MixedChoice::Selected(params) => {
            let s = select_mixed_set(
                &state.descriptors,
                &aux.descriptors,
                &state.cameras,
                &aux.cameras,
                oracle,
                params,
            )
            .stage("selection")?;
            let ids = (s.main_ids.clone(), s.aux_ids.clone());
            (Some(s), ids)
        }
        MixedChoice::Random { m, n, seed } => (
            None,
            crate::synth::random_mixed_ids(&state.cameras, &aux.cameras, *m, *n, *seed),
        ),
    };
    seconds.selection = lap(&clock);
    let mixed = predictor(&mixed_ids.0, &mixed_ids.1).stage("mixed prediction")?;
    seconds.prediction = lap(&clock) - seconds.selection;
    let registration = global_register(
        &state.cameras,
        &aux.cameras,
        &mixed,
        &state.model,
        &aux.masks,
        &cfg.fusion,
    )
    .stage("global registration")?;
    seconds.global = lap(&clock) - seconds.selection - seconds.prediction;
    let mut transform = registration.stage2.transform;
    let refinement = match &cfg.refine {
        Some((sil, photo)) => {
            let r = local_refine(
                &aux.cameras,
                &state.model,
                &aux.images,
                &aux.masks,
                &transform,
                sil,
                photo,
            )
            .stage("local refinement")?;
            transform = r.transform;
            Some(r)
        }
        None => None,
    };
    let before_refine = seconds.selection + seconds.prediction + seconds.global;
    seconds.refine = lap(&clock) - before_refine;

    let registered = aux
        .cameras
        .transformed(&transform)
        .relabeled(state.cameras.label.clone());
    let aux_views = to_views(&registered, &aux.images, &aux.masks)?;
    let mut views = state.views.clone();
    views.extend(aux_views);
    let cameras = state
        .cameras
        .merged(&registered, state.cameras.label.clone())?;

    let (schedule, finetune, model) = match &cfg.train {
        Some(train) => {
            let trainable = |set: &PoseSet| -> Vec<String> {
                let mut ids: Vec<String> = set
                    .ids()
                    .filter(|id| !cfg.holdout.iter().any(|h| h == id))
                    .map(str::to_owned)
                    .collect();
                ids.sort();
                ids
            };
            let schedule = balanced_schedule(
                &trainable(&state.cameras),
                &trainable(&registered),
                train.iterations,
                train.seed,
            )
            .stage("completion")?;
            let out =
                finetune_splats(&state.model, &views, &schedule, train).stage("completion")?;
            let model = out.cloud.clone();
            (Some(schedule), Some(out), model)
        }
        None => (None, None, state.model.clone()),
    };
    seconds.completion = lap(&clock) - before_refine - seconds.refine;

    let mut registrations = state.registrations.clone();
    registrations.push(transform);
    let next = FusionState {
        cameras,
        views,
        descriptors: state.descriptors.merged(&aux.descriptors),
        model,
        registrations,
    };
    Ok((
        next,
        FusionStep {
            selection,
            mixed_ids,
            mixed,
            registration,
            refinement,
            transform,
            schedule,
            finetune,
            seconds,
        },
    ))
}

/// Folds each placement into the state in order.
pub fn fuse_all(
    state: FusionState,
    placements: &[(AuxiliaryInput, StageConfig)],
    oracle: &PosePrediction,
    predictor: &MixedPredictor<'_>,
) -> Result<(FusionState, Vec<FusionStep>)> {
    let mut state = state;
    let mut steps = Vec::with_capacity(placements.len());
    for (aux, cfg) in placements {
        let (next, step) = iterate_auxiliary_poses(&state, aux, oracle, predictor, cfg)?;
        state = next;
        steps.push(step);
    }
    Ok((state, steps))
}

fn lap(clock: &Instant) -> f64 {
    clock.elapsed().as_secs_f64()
}
