//! File formats: JSON camera sets, splat clouds, descriptors, predictor
//! output and transforms; binary PGM masks and PPM images; dataset
//! directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionResult, MaskMap, RegistrationOutput};
use crate::geometry::{CameraIntrinsics, CameraPose, PoseSet, Sim3, Vec3};
use crate::refine::{ImageMap, RefineTrace};
use crate::render::{RgbImage, SilhouetteMask, Splat, SplatCloud};
use crate::selection::{DescriptorSet, MixedPoseSelection, PairGaps, PosePrediction};
use crate::synth::{GroundTruth, MultiPoseDataset, PoseData};

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sim3Json {
    pub s: f64,
    /// `[w, x, y, z]`
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&Sim3> for Sim3Json {
    fn from(t: &Sim3) -> Self {
        let q = t.rotation.quaternion();
        Self {
            s: t.scale,
            q: [q.w, q.i, q.j, q.k],
            t: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

fn quaternion(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3]))
}

fn check_unit(q: [f64; 4], path: &Path) -> Result<()> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(format_err(
            path,
            format!("quaternion {q:?} is not unit length"),
        ));
    }
    Ok(())
}

impl Sim3Json {
    pub fn to_sim3(&self, path: &Path) -> Result<Sim3> {
        check_unit(self.q, path)?;
        let t = Sim3::new(self.s, quaternion(self.q), Vec3::from(self.t));
        if !t.is_valid() {
            return Err(format_err(path, "invalid similarity transform"));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraJson {
    id: String,
    q: [f64; 4],
    c: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    w: u32,
    h: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseSetJson {
    label: String,
    cameras: Vec<CameraJson>,
}

impl From<&PoseSet> for PoseSetJson {
    fn from(set: &PoseSet) -> Self {
        Self {
            label: set.label.clone(),
            cameras: set
                .iter()
                .map(|p| {
                    let q = p.rotation.quaternion();
                    let k = &p.intrinsics;
                    CameraJson {
                        id: p.id.clone(),
                        q: [q.w, q.i, q.j, q.k],
                        c: [p.center.x, p.center.y, p.center.z],
                        fx: k.fx,
                        fy: k.fy,
                        cx: k.cx,
                        cy: k.cy,
                        w: k.width,
                        h: k.height,
                    }
                })
                .collect(),
        }
    }
}

impl PoseSetJson {
    pub fn to_pose_set(&self, path: &Path) -> Result<PoseSet> {
        let poses = self
            .cameras
            .iter()
            .map(|c| {
                check_unit(c.q, path)?;
                let intr = CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy, c.w, c.h)
                    .map_err(|e| format_err(path, e))?;
                Ok(CameraPose::new(
                    c.id.clone(),
                    quaternion(c.q),
                    Vec3::from(c.c),
                    intr,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        PoseSet::new(self.label.clone(), poses).map_err(|e| format_err(path, e))
    }
}

pub fn read_poses(path: &Path) -> Result<PoseSet> {
    read_json::<PoseSetJson>(path)?.to_pose_set(path)
}

pub fn write_poses(path: &Path, set: &PoseSet) -> Result<()> {
    write_json(path, &PoseSetJson::from(set))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplatJson {
    p: [f64; 3],
    sigma: f64,
    rgb: [f64; 3],
    alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplatCloudJson {
    frame: String,
    splats: Vec<SplatJson>,
}

pub fn read_splats(path: &Path) -> Result<SplatCloud> {
    let raw: SplatCloudJson = read_json(path)?;
    let splats: Vec<Splat> = raw
        .splats
        .iter()
        .map(|s| Splat {
            position: Vec3::from(s.p),
            sigma: s.sigma,
            color: s.rgb,
            opacity: s.alpha,
        })
        .collect();
    if let Some(i) = splats.iter().position(|s| !s.is_valid()) {
        return Err(format_err(path, format!("splat {i} is invalid")));
    }
    Ok(SplatCloud::new(splats, raw.frame))
}

pub fn write_splats(path: &Path, cloud: &SplatCloud) -> Result<()> {
    let raw = SplatCloudJson {
        frame: cloud.frame.clone(),
        splats: cloud
            .splats
            .iter()
            .map(|s| SplatJson {
                p: [s.position.x, s.position.y, s.position.z],
                sigma: s.sigma,
                rgb: s.color,
                alpha: s.opacity,
            })
            .collect(),
    };
    write_json(path, &raw)
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let raw: BTreeMap<String, Vec<f64>> = read_json(path)?;
    DescriptorSet::new(raw).map_err(|e| format_err(path, e))
}

pub fn write_descriptors(path: &Path, set: &DescriptorSet) -> Result<()> {
    let raw: BTreeMap<&str, &[f64]> = set.raw().collect();
    write_json(path, &raw)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GapsJson {
    fwd_deg: f64,
    up_deg: f64,
}

pub fn read_oracle(path: &Path) -> Result<PosePrediction> {
    let raw: BTreeMap<String, GapsJson> = read_json(path)?;
    let mut out = PosePrediction::default();
    for (key, g) in raw {
        let (m, a) = key
            .split_once('|')
            .ok_or_else(|| format_err(path, format!("key '{key}' is not 'main|aux'")))?;
        out.insert(
            m,
            a,
            PairGaps {
                forward_deg: g.fwd_deg,
                up_deg: g.up_deg,
            },
        );
    }
    Ok(out)
}

pub fn write_oracle(path: &Path, oracle: &PosePrediction) -> Result<()> {
    let raw: BTreeMap<String, GapsJson> = oracle
        .gaps
        .iter()
        .map(|((m, a), g)| {
            (
                format!("{m}|{a}"),
                GapsJson {
                    fwd_deg: g.forward_deg,
                    up_deg: g.up_deg,
                },
            )
        })
        .collect();
    write_json(path, &raw)
}

fn read_netpbm(path: &Path, magic: &[u8; 2]) -> Result<(u32, u32, u32, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(
            path,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, "bad header field"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format_err(path, "bad header values"));
    }
    Ok((w, h, maxval, bytes.get(pos..).unwrap_or_default().to_vec()))
}

/// Binary PGM, 0 for background and 255 for foreground.
pub fn write_mask(path: &Path, mask: &SilhouetteMask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Any nonzero sample counts as foreground.
pub fn read_mask(path: &Path) -> Result<SilhouetteMask> {
    let (w, h, maxval, data) = read_netpbm(path, b"P5")?;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let n = (w * h) as usize;
    if data.len() < n * bytes_per {
        return Err(format_err(path, "truncated raster"));
    }
    let bits = (0..n)
        .map(|i| {
            data[i * bytes_per..(i + 1) * bytes_per]
                .iter()
                .any(|&b| b != 0)
        })
        .collect();
    Ok(SilhouetteMask {
        width: w,
        height: h,
        bits,
    })
}

/// Binary 16-bit PPM.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for p in &img.pixels {
        for c in p {
            let v = (c.clamp(0.0, 1.0) * 65535.0).round() as u16;
            out.extend(v.to_be_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads 8- or 16-bit binary PPM into [0, 1] channels.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let (w, h, maxval, data) = read_netpbm(path, b"P6")?;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let n = (w * h) as usize;
    if data.len() < n * 3 * bytes_per {
        return Err(format_err(path, "truncated raster"));
    }
    let sample = |i: usize| -> f64 {
        let v = if bytes_per == 2 {
            u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as f64
        } else {
            data[i] as f64
        };
        v / maxval as f64
    };
    let pixels = (0..n)
        .map(|i| [sample(3 * i), sample(3 * i + 1), sample(3 * i + 2)])
        .collect();
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

fn stem_files(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Every `*.pgm` in `dir`, keyed by file stem.
pub fn read_mask_dir(dir: &Path) -> Result<MaskMap> {
    stem_files(dir, "pgm")?
        .into_iter()
        .map(|(id, p)| Ok((id, read_mask(&p)?)))
        .collect()
}

/// Every `*.ppm` in `dir`, keyed by file stem.
pub fn read_image_dir(dir: &Path) -> Result<ImageMap> {
    stem_files(dir, "ppm")?
        .into_iter()
        .map(|(id, p)| Ok((id, read_image(&p)?)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseTransformsJson {
    pose: usize,
    pose_change: Sim3Json,
    gauge: Sim3Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransformsJson {
    poses: Vec<PoseTransformsJson>,
}

pub fn pose_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("pose{k}"))
}

pub fn write_dataset(root: &Path, ds: &MultiPoseDataset) -> Result<()> {
    for pose in &ds.poses {
        let dir = pose_dir(root, pose.index);
        write_poses(&dir.join("cameras.json"), &pose.cameras)?;
        write_descriptors(&dir.join("descriptors.json"), &pose.descriptors)?;
        for cam in &pose.cameras {
            let img = pose
                .images
                .get(&cam.id)
                .ok_or_else(|| Error::MissingImage(cam.id.clone()))?;
            let mask = pose
                .masks
                .get(&cam.id)
                .ok_or_else(|| Error::MissingMask(cam.id.clone()))?;
            write_image(&dir.join("images").join(format!("{}.ppm", cam.id)), img)?;
            write_mask(&dir.join("masks").join(format!("{}.pgm", cam.id)), mask)?;
        }
    }
    write_splats(&root.join("model.json"), &ds.main_model)?;
    let gt_dir = root.join("gt");
    write_oracle(&gt_dir.join("oracle.json"), &ds.oracle)?;
    if let Some(gt) = &ds.gt {
        let transforms = TransformsJson {
            poses: (0..gt.pose_changes.len())
                .map(|k| PoseTransformsJson {
                    pose: k,
                    pose_change: (&gt.pose_changes[k]).into(),
                    gauge: (&gt.gauges[k]).into(),
                })
                .collect(),
        };
        write_json(&gt_dir.join("transforms.json"), &transforms)?;
        for (k, cloud) in gt.clouds.iter().enumerate() {
            write_splats(&gt_dir.join(format!("splats_pose{k}.json")), cloud)?;
        }
    }
    Ok(())
}

pub fn read_pose_data(root: &Path, k: usize) -> Result<PoseData> {
    let dir = pose_dir(root, k);
    let cameras = read_poses(&dir.join("cameras.json"))?;
    let images = read_image_dir(&dir.join("images"))?;
    let masks = read_mask_dir(&dir.join("masks"))?;
    let descriptors = read_descriptors(&dir.join("descriptors.json"))?;
    for cam in &cameras {
        if !images.contains_key(&cam.id) {
            return Err(Error::MissingImage(cam.id.clone()));
        }
        if !masks.contains_key(&cam.id) {
            return Err(Error::MissingMask(cam.id.clone()));
        }
        if descriptors.get(&cam.id).is_none() {
            return Err(format_err(&dir, format!("no descriptor for '{}'", cam.id)));
        }
    }
    Ok(PoseData {
        index: k,
        cameras,
        images,
        masks,
        descriptors,
    })
}

/// Reads every `pose{k}` directory in order, the main model and, when
/// present, the ground truth.
pub fn read_dataset(root: &Path) -> Result<MultiPoseDataset> {
    let mut poses = Vec::new();
    while pose_dir(root, poses.len()).is_dir() {
        poses.push(read_pose_data(root, poses.len())?);
    }
    if poses.len() < 2 {
        return Err(format_err(
            root,
            "dataset needs pose0 and at least one auxiliary pose",
        ));
    }
    let main_model = read_splats(&root.join("model.json"))?;
    let gt_dir = root.join("gt");
    let oracle_path = gt_dir.join("oracle.json");
    let oracle = if oracle_path.exists() {
        read_oracle(&oracle_path)?
    } else {
        PosePrediction::default()
    };
    let transforms_path = gt_dir.join("transforms.json");
    let gt = if transforms_path.exists() {
        let raw: TransformsJson = read_json(&transforms_path)?;
        if raw.poses.len() != poses.len() || raw.poses.iter().enumerate().any(|(k, p)| p.pose != k)
        {
            return Err(format_err(
                &transforms_path,
                "transform list does not match pose directories",
            ));
        }
        let mut pose_changes = Vec::new();
        let mut gauges = Vec::new();
        let mut clouds = Vec::new();
        for p in &raw.poses {
            pose_changes.push(p.pose_change.to_sim3(&transforms_path)?);
            gauges.push(p.gauge.to_sim3(&transforms_path)?);
            let cloud_path = gt_dir.join(format!("splats_pose{}.json", p.pose));
            clouds.push(if cloud_path.exists() {
                read_splats(&cloud_path)?
            } else {
                SplatCloud::new(Vec::new(), format!("pose{}", p.pose))
            });
        }
        Some(GroundTruth {
            pose_changes,
            gauges,
            clouds,
        })
    } else {
        None
    };
    Ok(MultiPoseDataset {
        poses,
        main_model,
        oracle,
        gt,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionJson {
    pub main_ids: Vec<String>,
    pub aux_ids: Vec<String>,
    pub seed_main: Option<String>,
    pub seed_aux: Option<String>,
    pub seed_similarity: Option<f64>,
    pub score: Option<f64>,
}

impl From<&MixedPoseSelection> for SelectionJson {
    fn from(s: &MixedPoseSelection) -> Self {
        Self {
            main_ids: s.main_ids.clone(),
            aux_ids: s.aux_ids.clone(),
            seed_main: Some(s.seed_pair.main_id.clone()),
            seed_aux: Some(s.seed_pair.aux_id.clone()),
            seed_similarity: Some(s.seed_pair.similarity),
            score: Some(s.score),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionJson {
    pub transform: Sim3Json,
    pub score: f64,
    pub winning_pair: (String, String),
    pub anchor: u8,
    pub evaluated_pairs: usize,
    pub evaluated_candidates: usize,
}

impl From<&FusionResult> for FusionJson {
    fn from(r: &FusionResult) -> Self {
        Self {
            transform: (&r.transform).into(),
            score: r.score,
            winning_pair: r.winning_pair.clone(),
            anchor: r.anchor,
            evaluated_pairs: r.evaluated_pairs,
            evaluated_candidates: r.evaluated_candidates,
        }
    }
}

/// Registration of one auxiliary set: the transform taking its stored
/// cameras into the model frame, plus the aligned cameras.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationJson {
    pub stage1: Option<FusionJson>,
    pub stage2: Option<FusionJson>,
    pub transform: Sim3Json,
    pub aligned_aux: PoseSetJson,
}

impl RegistrationJson {
    pub fn from_output(out: &RegistrationOutput) -> Self {
        Self {
            stage1: Some((&out.stage1).into()),
            stage2: Some((&out.stage2).into()),
            transform: (&out.stage2.transform).into(),
            aligned_aux: (&out.aligned_aux).into(),
        }
    }

    pub fn from_transform(transform: &Sim3, aux: &PoseSet) -> Self {
        Self {
            stage1: None,
            stage2: None,
            transform: transform.into(),
            aligned_aux: (&aux.transformed(transform)).into(),
        }
    }
}

/// Reads the aux-to-model transform from a registration file.
pub fn read_registration_transform(path: &Path) -> Result<Sim3> {
    read_json::<RegistrationJson>(path)?.transform.to_sim3(path)
}

/// One CSV row per trace entry.
pub fn trace_csv(stage: &str, trace: &RefineTrace) -> String {
    let mut out = String::new();
    for r in &trace.rows {
        let q = r.transform.rotation.quaternion();
        let t = r.transform.translation;
        out.push_str(&format!(
            "{stage},{},{:e},{:e},{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.loss,
            r.step,
            r.accepted,
            r.transform.scale,
            q.w,
            q.i,
            q.j,
            q.k,
            t.x,
            t.y,
            t.z
        ));
    }
    out
}

pub const TRACE_HEADER: &str = "stage,iteration,loss,step,accepted,s,qw,qx,qy,qz,tx,ty,tz\n";
