//! Synthetic multi-pose datasets with full ground truth.
//!
//! One object is captured in several physical placements. Pose 0 defines
//! the model frame; every other placement moves the object rigidly and
//! stores its cameras in an independent similarity gauge, the way separate
//! structure-from-motion runs would.

use nalgebra::{DMatrix, DVector, Unit, UnitQuaternion};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MaskMap;
use crate::geometry::{
    angle_between_deg, CameraIntrinsics, CameraPose, PoseSet, Rotation, Sim3, Vec3,
};
use crate::refine::ImageMap;
use crate::render::{mask_iou, render_mask, render_rgb, Splat, SplatCloud};
use crate::selection::{DescriptorSet, PairGaps, PosePrediction};

/// Seeded generator for an independent random stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
                q[0], q[1], q[2], q[3],
            ));
        }
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

fn random_in_ball(rng: &mut impl Rng, radius: f64) -> Vec3 {
    random_unit(rng) * radius * rng.random::<f64>().cbrt()
}

/// Behaviour of the simulated multi-view predictor that places a mixed
/// image set in one shared frame.
///
/// Accuracy degrades as views from the two placements stop resembling each
/// other and as the image count drops: each camera's rotation noise grows
/// quadratically with the angle to its nearest view from the other
/// placement, and the whole auxiliary group is displaced by a common
/// rotation proportional to the mean such angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Per-camera rotation noise for well-matched views, degrees.
    pub rotation_noise_deg: f64,
    /// Image count at which `rotation_noise_deg` applies.
    pub reference_views: usize,
    /// Cross-placement angle at which the per-camera noise doubles.
    pub gap_scale_deg: f64,
    pub noise_cap_deg: f64,
    /// Common auxiliary-group rotation per degree of mean cross-placement
    /// angle.
    pub group_error_per_deg: f64,
    pub group_cap_deg: f64,
    /// Output the prediction in a random similarity frame.
    pub random_gauge: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            rotation_noise_deg: 0.3,
            reference_views: 30,
            gap_scale_deg: 15.0,
            noise_cap_deg: 20.0,
            group_error_per_deg: 0.25,
            group_cap_deg: 30.0,
            random_gauge: true,
        }
    }
}

impl PredictorConfig {
    /// A predictor that returns ground truth in its own gauge.
    pub fn exact() -> Self {
        Self {
            rotation_noise_deg: 0.0,
            group_error_per_deg: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_splats: usize,
    pub views_per_pose: usize,
    pub n_poses: usize,
    pub camera_radius: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    /// Store auxiliary cameras in random similarity gauges.
    pub gauge: bool,
    pub gauge_scale_min: f64,
    pub gauge_scale_max: f64,
    /// Maximum gauge translation as a fraction of the camera-set diameter.
    pub gauge_translation: f64,
    /// Move the object between placements.
    pub pose_change: bool,
    pub tilt_min_deg: f64,
    pub tilt_max_deg: f64,
    pub max_shift: f64,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    pub oracle_noise_deg: f64,
    /// Paint the underside of the object a color the main placement never
    /// sees; the main model carries it in neutral gray.
    pub hidden_patch: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_splats: 2000,
            views_per_pose: 150,
            n_poses: 2,
            camera_radius: 3.5,
            focal: 140.0,
            width: 128,
            height: 128,
            gauge: true,
            gauge_scale_min: 0.5,
            gauge_scale_max: 2.0,
            gauge_translation: 0.5,
            pose_change: true,
            tilt_min_deg: 25.0,
            tilt_max_deg: 40.0,
            max_shift: 0.1,
            descriptor_dim: 64,
            descriptor_noise: 0.0,
            oracle_noise_deg: 0.0,
            hidden_patch: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_splats >= 1
            && self.views_per_pose >= 2
            && self.n_poses >= 2
            && self.camera_radius > 1.0
            && self.focal > 0.0
            && self.width >= 11
            && self.height >= 11
            && self.gauge_scale_min > 0.0
            && self.gauge_scale_min <= self.gauge_scale_max
            && self.gauge_translation >= 0.0
            && self.tilt_min_deg <= self.tilt_max_deg
            && self.max_shift >= 0.0
            && self.descriptor_dim >= 12
            && self.descriptor_noise >= 0.0
            && self.oracle_noise_deg >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid synthetic config {self:?}")))
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::centered(self.focal, self.width, self.height)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            path: "<synth config>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

const BLOBS: usize = 6;
const SPLAT_SIGMA: f64 = 0.05;
const SPLAT_OPACITY: f64 = 0.8;
const MAX_RADIUS: f64 = 0.92;
const SYMMETRY_IOU: f64 = 0.95;
/// Below this count the cloud is too sparse for silhouettes to tell
/// viewpoints apart, and the symmetry check is skipped.
const SYMMETRY_CHECK_MIN_SPLATS: usize = 100;
/// Fraction of splats, lowest first, forming the hidden patch.
const PATCH_FRACTION: f64 = 0.08;
const PATCH_COLOR: [f64; 3] = [0.95, 0.1, 0.85];
const PATCH_GRAY: [f64; 3] = [0.5, 0.5, 0.5];

fn hue_color(h: f64) -> [f64; 3] {
    let (s, v) = (0.75, 0.9);
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn blob_cloud(rng: &mut impl Rng, n_splats: usize) -> SplatCloud {
    struct Blob {
        center: Vec3,
        radii: Vec3,
        rotation: Rotation,
        color: [f64; 3],
    }
    let hue0: f64 = rng.random();
    let blobs: Vec<Blob> = (0..BLOBS)
        .map(|i| Blob {
            center: random_in_ball(rng, 0.5),
            radii: Vec3::from_fn(|_, _| rng.random_range(0.12..0.32)),
            rotation: random_rotation(rng),
            color: hue_color(hue0 + i as f64 / BLOBS as f64 + rng.random_range(-0.04..0.04)),
        })
        .collect();
    let weights: Vec<f64> = blobs.iter().map(|b| b.radii.product()).collect();
    let pick = WeightedIndex::new(&weights).expect("positive blob volumes");
    let phase = Vec3::from_fn(|_, _| rng.random_range(0.0..std::f64::consts::TAU));
    let splats = (0..n_splats)
        .map(|_| {
            let b = &blobs[pick.sample(rng)];
            let u = random_in_ball(rng, 1.0);
            let mut p = b.center + b.rotation * u.component_mul(&b.radii);
            if p.norm() > MAX_RADIUS {
                p *= MAX_RADIUS / p.norm();
            }
            let texture = 0.8
                + 0.2
                    * ((7.0 * p.x + phase.x).sin()
                        * (7.0 * p.y + phase.y).sin()
                        * (7.0 * p.z + phase.z).sin());
            Splat {
                position: p,
                sigma: SPLAT_SIGMA,
                color: b.color.map(|c| (c * texture).clamp(0.0, 1.0)),
                opacity: SPLAT_OPACITY,
            }
        })
        .collect();
    SplatCloud::new(splats, "pose0")
}

/// Views along the four horizontal principal directions.
pub fn principal_views(radius: f64, intrinsics: CameraIntrinsics) -> Vec<CameraPose> {
    [
        ("+x", Vec3::x()),
        ("-x", -Vec3::x()),
        ("+y", Vec3::y()),
        ("-y", -Vec3::y()),
    ]
    .into_iter()
    .map(|(id, d)| CameraPose::look_at(id, d * radius, Vec3::zeros(), Vec3::z(), intrinsics))
    .collect()
}

/// Largest silhouette IoU between any two principal views.
pub fn principal_symmetry(cloud: &SplatCloud) -> Result<f64> {
    let views = principal_views(3.5, CameraIntrinsics::centered(70.0, 64, 64));
    let masks = views
        .iter()
        .map(|v| render_mask(cloud, v).map(|r| r.image))
        .collect::<Result<Vec<_>>>()?;
    let mut worst: f64 = 0.0;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            worst = worst.max(mask_iou(&masks[i], &masks[j])?);
        }
    }
    Ok(worst)
}

/// Asymmetric cloud of colored, textured blobs inside the unit sphere.
/// Candidates whose principal silhouettes look alike are discarded and the
/// next sub-seed is tried.
pub fn gen_object(seed: u64, n_splats: usize) -> Result<SplatCloud> {
    if n_splats == 0 {
        return Err(Error::invalid("n_splats must be at least 1"));
    }
    for attempt in 0..64 {
        let cloud = blob_cloud(&mut stream_rng(seed, attempt), n_splats);
        if n_splats < SYMMETRY_CHECK_MIN_SPLATS || principal_symmetry(&cloud)? <= SYMMETRY_IOU {
            return Ok(cloud);
        }
    }
    Err(Error::invalid(format!(
        "no asymmetric object found for seed {seed}"
    )))
}

/// Indices of the splats forming the underside patch.
pub fn hidden_patch_indices(cloud: &SplatCloud) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by(|&a, &b| {
        cloud.splats[a]
            .position
            .z
            .total_cmp(&cloud.splats[b].position.z)
            .then(a.cmp(&b))
    });
    let n = ((cloud.len() as f64) * PATCH_FRACTION).ceil() as usize;
    order.truncate(n.min(cloud.len()));
    order.sort_unstable();
    order
}

fn painted(cloud: &SplatCloud, indices: &[usize], color: [f64; 3]) -> SplatCloud {
    let mut out = cloud.clone();
    for &i in indices {
        out.splats[i].color = color;
    }
    out
}

pub fn camera_id(pose: usize, index: usize) -> String {
    format!("pose{pose}_{index:04}")
}

/// Fibonacci-spiral cameras on the upper hemisphere, all looking at the
/// origin with image up following +Z. Camera 0 sits at the pole.
pub fn sample_hemisphere_cameras(
    pose: usize,
    n: usize,
    radius: f64,
    intrinsics: CameraIntrinsics,
    seed: u64,
) -> Result<PoseSet> {
    if n == 0 {
        return Err(Error::invalid("at least one camera required"));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let offset = stream_rng(seed, 1000 + pose as u64).random_range(0.0..std::f64::consts::TAU);
    let poses = (0..n)
        .map(|i| {
            let z = 1.0 - i as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let a = offset + golden * i as f64;
            let c = radius * Vec3::new(r * a.cos(), r * a.sin(), z);
            CameraPose::look_at(camera_id(pose, i), c, Vec3::zeros(), Vec3::z(), intrinsics)
        })
        .collect();
    PoseSet::new(format!("pose{pose}"), poses)
}

/// Rigid placement change: a tilt about a horizontal axis,
/// a free yaw and a small shift.
pub fn random_pose_change(rng: &mut impl Rng, cfg: &SynthConfig) -> Sim3 {
    let beta = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = Unit::new_normalize(Vec3::new(beta.cos(), beta.sin(), 0.0));
    let tilt = rng
        .random_range(cfg.tilt_min_deg..=cfg.tilt_max_deg)
        .to_radians();
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let rot = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), yaw)
        * UnitQuaternion::from_axis_angle(&axis, tilt);
    Sim3::rigid(rot, random_in_ball(rng, cfg.max_shift))
}

pub fn random_gauge(
    rng: &mut impl Rng,
    scale_min: f64,
    scale_max: f64,
    max_translation: f64,
) -> Sim3 {
    let scale = if scale_min < scale_max {
        (rng.random_range(scale_min.ln()..scale_max.ln())).exp()
    } else {
        scale_min
    };
    Sim3::new(
        scale,
        random_rotation(rng),
        random_in_ball(rng, max_translation),
    )
}

/// Fixed random linear encoder from view direction to descriptor space.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorModel {
    basis: DMatrix<f64>,
    noise: f64,
}

impl DescriptorModel {
    pub fn new(seed: u64, dim: usize, noise: f64) -> Result<Self> {
        if dim < 12 {
            return Err(Error::invalid(format!(
                "descriptor dimension {dim} below 12"
            )));
        }
        let mut rng = stream_rng(seed, 2000);
        let m = DMatrix::from_fn(dim, 12, |_, _| StandardNormal.sample(&mut rng));
        let basis = m.qr().q();
        Ok(Self { basis, noise })
    }

    /// Linear and quadratic view-direction features. With unit inputs the
    /// cosine between two feature vectors is `(t + t^2/4) / 1.25` for
    /// `t = u.v`, strictly increasing in `t`.
    fn features(v: &Vec3) -> DVector<f64> {
        let mut f = DVector::zeros(12);
        for i in 0..3 {
            f[i] = v[i];
            for j in 0..3 {
                f[3 + 3 * i + j] = 0.5 * v[i] * v[j];
            }
        }
        f
    }

    pub fn describe(&self, direction: &Vec3, rng: &mut impl Rng) -> Vec<f64> {
        let mut d = &self.basis * Self::features(&direction.normalize());
        if self.noise > 0.0 {
            for x in d.iter_mut() {
                *x += self.noise * Distribution::<f64>::sample(&StandardNormal, rng);
            }
        }
        let n = d.norm();
        (d / n).iter().copied().collect()
    }
}

/// Cameras of one placement together with everything rendered from them.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseData {
    pub index: usize,
    /// Cameras in this placement's own reconstruction gauge.
    pub cameras: PoseSet,
    pub images: ImageMap,
    pub masks: MaskMap,
    pub descriptors: DescriptorSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Object motion from the main placement into placement k.
    pub pose_changes: Vec<Sim3>,
    /// Map from placement k's world frame into its stored camera gauge.
    pub gauges: Vec<Sim3>,
    /// The object in each placement's world frame.
    pub clouds: Vec<SplatCloud>,
}

impl GroundTruth {
    /// Transform taking placement k's stored cameras into the model frame.
    pub fn alignment(&self, k: usize) -> Sim3 {
        self.pose_changes[k]
            .inverse()
            .compose(&self.gauges[k].inverse())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiPoseDataset {
    pub poses: Vec<PoseData>,
    /// Model reconstructed from the main placement.
    pub main_model: SplatCloud,
    pub oracle: PosePrediction,
    pub gt: Option<GroundTruth>,
}

impl MultiPoseDataset {
    /// Ground-truth model-frame cameras of placement k.
    pub fn gt_cameras(&self, k: usize) -> Result<PoseSet> {
        let gt = self
            .gt
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has no ground truth"))?;
        Ok(self.poses[k].cameras.transformed(&gt.alignment(k)))
    }

    /// Ground-truth model-frame cameras of every placement in one set.
    pub fn gt_all_cameras(&self) -> Result<PoseSet> {
        let mut all = self.gt_cameras(0)?;
        for k in 1..self.poses.len() {
            all = all.merged(&self.gt_cameras(k)?, "gt")?;
        }
        Ok(all)
    }
}

/// Forward and up angle gaps between two model-frame cameras.
pub fn pair_gaps(a: &CameraPose, b: &CameraPose) -> PairGaps {
    PairGaps {
        forward_deg: angle_between_deg(&a.forward(), &b.forward()),
        up_deg: angle_between_deg(&a.up(), &b.up()),
    }
}

fn noisy_gap(gap: f64, noise_deg: f64, rng: &mut impl Rng) -> f64 {
    if noise_deg == 0.0 {
        return gap;
    }
    let n: f64 = StandardNormal.sample(rng);
    (gap + noise_deg * n).abs().min(180.0)
}

pub fn make_dataset(cfg: &SynthConfig) -> Result<MultiPoseDataset> {
    cfg.validate()?;
    let intr = cfg.intrinsics();
    let object = gen_object(cfg.seed, cfg.n_splats)?;
    let patch = if cfg.hidden_patch {
        hidden_patch_indices(&object)
    } else {
        Vec::new()
    };
    let truth = painted(&object, &patch, PATCH_COLOR);
    let main_model = painted(&object, &patch, PATCH_GRAY);
    let descriptor_model =
        DescriptorModel::new(cfg.seed, cfg.descriptor_dim, cfg.descriptor_noise)?;

    let mut pose_changes = Vec::new();
    let mut gauges = Vec::new();
    let mut clouds = Vec::new();
    let mut poses = Vec::new();
    let mut gt_sets = Vec::new();
    for k in 0..cfg.n_poses {
        let mut rng = stream_rng(cfg.seed, 10 + k as u64);
        let world =
            sample_hemisphere_cameras(k, cfg.views_per_pose, cfg.camera_radius, intr, cfg.seed)?;
        let change = if k > 0 && cfg.pose_change {
            random_pose_change(&mut rng, cfg)
        } else {
            Sim3::identity()
        };
        let gauge = if k > 0 && cfg.gauge {
            random_gauge(
                &mut rng,
                cfg.gauge_scale_min,
                cfg.gauge_scale_max,
                cfg.gauge_translation * world.diameter(),
            )
        } else {
            Sim3::identity()
        };
        let cloud = truth.transformed(&change).relabeled(format!("pose{k}"));
        let gt_cams = world.transformed(&change.inverse());
        let mut images = ImageMap::new();
        let mut masks = MaskMap::new();
        let mut raw_desc = Vec::new();
        let mut desc_rng = stream_rng(cfg.seed, 3000 + k as u64);
        for cam in &world {
            images.insert(cam.id.clone(), render_rgb(&cloud, cam)?.image.quantized());
            masks.insert(cam.id.clone(), render_mask(&cloud, cam)?.image);
            let dir = gt_cams.get(&cam.id).expect("same ids").center;
            raw_desc.push((
                cam.id.clone(),
                descriptor_model.describe(&dir, &mut desc_rng),
            ));
        }
        poses.push(PoseData {
            index: k,
            cameras: world.transformed(&gauge),
            images,
            masks,
            descriptors: DescriptorSet::new(raw_desc)?,
        });
        gt_sets.push(gt_cams);
        pose_changes.push(change);
        gauges.push(gauge);
        clouds.push(cloud);
    }

    let mut oracle = PosePrediction::default();
    let mut rng = stream_rng(cfg.seed, 4000);
    for a in 0..cfg.n_poses {
        for b in a + 1..cfg.n_poses {
            for ca in &gt_sets[a] {
                for cb in &gt_sets[b] {
                    let g = pair_gaps(ca, cb);
                    let gaps = PairGaps {
                        forward_deg: noisy_gap(g.forward_deg, cfg.oracle_noise_deg, &mut rng),
                        up_deg: noisy_gap(g.up_deg, cfg.oracle_noise_deg, &mut rng),
                    };
                    oracle.insert(&ca.id, &cb.id, gaps);
                }
            }
        }
    }

    Ok(MultiPoseDataset {
        poses,
        main_model: main_model.relabeled("pose0"),
        oracle,
        gt: Some(GroundTruth {
            pose_changes,
            gauges,
            clouds,
        }),
    })
}

/// Simulated mixed-pose predictor: places the chosen main and auxiliary
/// images in one shared frame, with errors shaped by [`PredictorConfig`].
/// `gt` must hold the model-frame cameras of every requested id.
pub fn predict_mixed_poses(
    main_ids: &[String],
    aux_ids: &[String],
    gt: &PoseSet,
    cfg: &PredictorConfig,
    seed: u64,
) -> Result<PoseSet> {
    let fetch = |id: &String| {
        gt.get(id)
            .cloned()
            .ok_or_else(|| Error::IdMismatch(format!("no ground truth for '{id}'")))
    };
    let main: Vec<CameraPose> = main_ids.iter().map(fetch).collect::<Result<_>>()?;
    let aux: Vec<CameraPose> = aux_ids.iter().map(fetch).collect::<Result<_>>()?;
    if main.is_empty() || aux.is_empty() {
        return Err(Error::invalid("mixed set needs views from both placements"));
    }
    let nearest_gap = |c: &CameraPose, others: &[CameraPose]| {
        others
            .iter()
            .map(|o| angle_between_deg(&c.center, &o.center))
            .fold(f64::INFINITY, f64::min)
    };
    let main_gaps: Vec<f64> = main.iter().map(|c| nearest_gap(c, &aux)).collect();
    let aux_gaps: Vec<f64> = aux.iter().map(|c| nearest_gap(c, &main)).collect();
    let total = (main.len() + aux.len()) as f64;
    let count_factor = (cfg.reference_views as f64 / total).sqrt();
    let mean_gap = main_gaps.iter().chain(&aux_gaps).sum::<f64>() / total;

    let mut rng = stream_rng(seed, 5000);
    let group_angle = (cfg.group_error_per_deg * mean_gap * count_factor).min(cfg.group_cap_deg);
    let group = Sim3::rigid(
        UnitQuaternion::from_axis_angle(
            &Unit::new_normalize(random_unit(&mut rng)),
            group_angle.to_radians(),
        ),
        Vec3::zeros(),
    );

    let perturb = |c: &CameraPose, gap: f64, rng: &mut ChaCha8Rng| {
        let ratio = gap / cfg.gap_scale_deg;
        let sigma = (cfg.rotation_noise_deg * count_factor * (1.0 + ratio * ratio))
            .min(cfg.noise_cap_deg)
            .to_radians();
        let mut out = c.clone();
        if sigma > 0.0 {
            let w = Vec3::from_fn(|_, _| StandardNormal.sample(rng)) * (sigma / 3f64.sqrt());
            let dc = Vec3::from_fn(|_, _| StandardNormal.sample(rng))
                * (sigma * c.center.norm() / 3f64.sqrt());
            out.rotation = UnitQuaternion::from_scaled_axis(w) * c.rotation;
            out.center = c.center + dc;
        }
        out
    };
    let mut predicted = Vec::with_capacity(main.len() + aux.len());
    for (c, g) in main.iter().zip(&main_gaps) {
        predicted.push(perturb(c, *g, &mut rng));
    }
    for (c, g) in aux.iter().zip(&aux_gaps) {
        predicted.push(group.apply_pose(&perturb(c, *g, &mut rng)));
    }
    let frame = if cfg.random_gauge {
        random_gauge(&mut rng, 0.5, 2.0, 1.0)
    } else {
        Sim3::identity()
    };
    PoseSet::new(
        "mixed",
        predicted.iter().map(|p| frame.apply_pose(p)).collect(),
    )
}

/// Seeded random subsets of the two placements, bypassing selection.
pub fn random_mixed_ids(
    main: &PoseSet,
    aux: &PoseSet,
    m: usize,
    n: usize,
    seed: u64,
) -> (Vec<String>, Vec<String>) {
    let mut rng = stream_rng(seed, 6000);
    let mut pick = |set: &PoseSet, count: usize| {
        let mut ids: Vec<String> = set.ids().map(str::to_owned).collect();
        ids.sort();
        ids.shuffle(&mut rng);
        ids.truncate(count);
        ids
    };
    let a = pick(main, m);
    let b = pick(aux, n);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_splat_object() {
        let c = gen_object(3, 1).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.splats[0].position.norm() <= 1.0);
        assert_eq!(gen_object(3, 1).unwrap(), c);
    }

    #[test]
    fn object_is_deterministic_bounded_and_asymmetric() {
        let a = gen_object(11, 2000).unwrap();
        assert_eq!(a, gen_object(11, 2000).unwrap());
        assert!(a
            .splats
            .iter()
            .all(|s| s.position.norm() <= 1.0 && s.is_valid()));
        assert!(principal_symmetry(&a).unwrap() <= SYMMETRY_IOU);
        assert_ne!(a, gen_object(12, 2000).unwrap());
    }

    #[test]
    fn single_camera_sits_at_pole() {
        let s = sample_hemisphere_cameras(0, 1, 3.0, CameraIntrinsics::centered(100.0, 64, 64), 0)
            .unwrap();
        let c = &s.poses()[0];
        assert!((c.center - Vec3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        assert!((c.forward() + Vec3::z()).norm() < 1e-12);
        assert!(c.up().dot(&c.forward()).abs() < 1e-12);
        assert_eq!(c.id, "pose0_0000");
    }

    #[test]
    fn hemisphere_cameras_face_origin_and_spread() {
        let s =
            sample_hemisphere_cameras(1, 150, 3.5, CameraIntrinsics::centered(140.0, 128, 128), 9)
                .unwrap();
        assert_eq!(s.len(), 150);
        for c in &s {
            assert!((c.forward() + c.center.normalize()).norm() < 1e-9);
            assert!(c.center.z >= 0.0);
            assert!(c.id.starts_with("pose1_"));
        }
        let mut min_sep = f64::INFINITY;
        for (i, a) in s.iter().enumerate() {
            for b in s.iter().skip(i + 1) {
                min_sep = min_sep.min(angle_between_deg(&a.center, &b.center));
            }
        }
        assert!(min_sep > 5.0, "{min_sep}");
    }

    #[test]
    fn descriptor_cosine_decreases_with_view_angle() {
        let m = DescriptorModel::new(1, 64, 0.0).unwrap();
        let mut rng = stream_rng(0, 0);
        let base = Vec3::new(0.2, -0.4, 0.9).normalize();
        let d0 = DVector::from_vec(m.describe(&base, &mut rng));
        let axis = Unit::new_normalize(base.cross(&Vec3::x()));
        let mut last = f64::INFINITY;
        for step in 0..=36 {
            let v = UnitQuaternion::from_axis_angle(&axis, (step as f64 * 5.0).to_radians()) * base;
            let cos = d0.dot(&DVector::from_vec(m.describe(&v, &mut rng)));
            assert!(cos < last || step == 0);
            last = cos;
        }
        let same = d0.dot(&DVector::from_vec(m.describe(&base, &mut rng)));
        assert!((same - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_predictor_is_a_pure_gauge() {
        let intr = CameraIntrinsics::centered(100.0, 64, 64);
        let a = sample_hemisphere_cameras(0, 10, 3.0, intr, 0).unwrap();
        let b = sample_hemisphere_cameras(1, 10, 3.0, intr, 0).unwrap();
        let all = a.merged(&b, "all").unwrap();
        let m: Vec<String> = a.ids().take(4).map(str::to_owned).collect();
        let n: Vec<String> = b.ids().take(4).map(str::to_owned).collect();
        let p = predict_mixed_poses(&m, &n, &all, &PredictorConfig::exact(), 3).unwrap();
        assert_eq!(p.len(), 8);
        // relative geometry is preserved up to one similarity
        let (x, y) = (p.get(&m[0]).unwrap(), p.get(&n[0]).unwrap());
        let (gx, gy) = (all.get(&m[0]).unwrap(), all.get(&n[0]).unwrap());
        let rel = x.rotation.inverse() * y.rotation;
        let grel = gx.rotation.inverse() * gy.rotation;
        assert!(rel.angle_to(&grel) < 1e-9);
    }
}
