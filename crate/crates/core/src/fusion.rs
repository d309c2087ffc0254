//! Silhouette-consensus fusion and two-stage global registration.
//!
//! A candidate similarity transform is built from every corresponding
//! camera pair: one camera is moved onto its counterpart (position and
//! forward direction) and the scale comes from the ratio of pair distances.
//! Each candidate is scored by rendering the model from the transformed
//! reference cameras and averaging mask IoU against the reference masks.
//! The highest average wins.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result, StageExt};
use crate::geometry::{align_pose_pair, pair_scale, CameraPose, PoseSet, Sim3};
use crate::render::{mask_iou, render_mask, SilhouetteMask, SplatCloud};

pub type MaskMap = HashMap<String, SilhouetteMask>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    /// Raster size for consensus renders.
    pub consensus_res: (u32, u32),
    /// Cap on evaluated pairs; the farthest-apart source pairs are kept.
    pub max_pairs: Option<usize>,
    /// Degenerate-pair threshold relative to the target set diameter.
    pub eps_rel: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            consensus_res: (128, 128),
            max_pairs: None,
            eps_rel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub transform: Sim3,
    /// Best average IoU.
    pub score: f64,
    pub winning_pair: (String, String),
    /// 1 when the first pair element was the anchor, 2 for the second.
    pub anchor: u8,
    pub evaluated_pairs: usize,
    pub evaluated_candidates: usize,
}

/// Similarity transform moving `src_anchor` onto `tgt_anchor` with the given
/// scale applied about the anchor.
pub fn anchored_candidate(
    src_anchor: &CameraPose,
    tgt_anchor: &CameraPose,
    scale: f64,
) -> Result<Sim3> {
    let rigid = align_pose_pair(src_anchor, tgt_anchor)?;
    let translation = tgt_anchor.center - scale * (rigid.rotation * src_anchor.center);
    Ok(Sim3::new(scale, rigid.rotation, translation))
}

/// Reference masks resampled to the consensus raster.
pub struct ConsensusReference<'a> {
    model: &'a SplatCloud,
    cams: Vec<CameraPose>,
    masks: Vec<SilhouetteMask>,
}

impl<'a> ConsensusReference<'a> {
    pub fn new(
        p_ref: &PoseSet,
        model: &'a SplatCloud,
        masks: &MaskMap,
        res: (u32, u32),
    ) -> Result<Self> {
        if model.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut cams = Vec::with_capacity(p_ref.len());
        let mut rs = Vec::with_capacity(p_ref.len());
        for p in p_ref {
            let m = masks
                .get(&p.id)
                .ok_or_else(|| Error::MissingMask(p.id.clone()))?;
            let mut c = p.clone();
            c.intrinsics = p.intrinsics.resized(res.0, res.1);
            cams.push(c);
            rs.push(m.resized(res.0, res.1));
        }
        Ok(Self {
            model,
            cams,
            masks: rs,
        })
    }

    /// Average IoU after moving every reference camera by `t`.
    pub fn score(&self, t: &Sim3) -> Result<f64> {
        let mut sum = 0.0;
        for (cam, reference) in self.cams.iter().zip(&self.masks) {
            let rendered = render_mask(self.model, &t.apply_pose(cam))?;
            sum += mask_iou(&rendered.image, reference)?;
        }
        Ok(sum / self.cams.len() as f64)
    }
}

/// Average consensus IoU of a given transform.
pub fn consensus_score(
    t: &Sim3,
    p_ref: &PoseSet,
    model: &SplatCloud,
    masks: &MaskMap,
    params: &FusionParams,
) -> Result<f64> {
    ConsensusReference::new(p_ref, model, masks, params.consensus_res)?.score(t)
}

/// Corresponding id pairs in enumeration order: ids sorted, pairs `(i<j)`
/// lexicographic. With a cap, the farthest-apart source pairs survive and
/// keep their enumeration order.
pub fn candidate_pairs(
    p_src: &PoseSet,
    p_tgt: &PoseSet,
    max_pairs: Option<usize>,
) -> Result<Vec<(String, String)>> {
    let shared: BTreeSet<&str> = p_src.ids().filter(|id| p_tgt.contains(id)).collect();
    if shared.len() < 2 {
        return Err(Error::InsufficientCorrespondence(shared.len()));
    }
    let shared: Vec<&str> = shared.into_iter().collect();
    let mut pairs = Vec::with_capacity(shared.len() * (shared.len() - 1) / 2);
    for (i, a) in shared.iter().enumerate() {
        for b in &shared[i + 1..] {
            pairs.push((a.to_string(), b.to_string()));
        }
    }
    if let Some(cap) = max_pairs {
        if pairs.len() > cap {
            let dist = |(a, b): &(String, String)| {
                (p_src.get(a).unwrap().center - p_src.get(b).unwrap().center).norm()
            };
            let mut ranked: Vec<(usize, f64)> = pairs.iter().map(dist).enumerate().collect();
            ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            let mut keep: Vec<usize> = ranked.into_iter().take(cap).map(|(i, _)| i).collect();
            keep.sort_unstable();
            pairs = keep.into_iter().map(|i| pairs[i].clone()).collect();
        }
    }
    Ok(pairs)
}

/// Silhouette-consensus fusion: the similarity transform that aligns
/// `p_src` to `p_tgt`, judged by silhouette agreement over `p_ref`.
pub fn silhouette_consensus_fusion(
    p_src: &PoseSet,
    p_tgt: &PoseSet,
    p_ref: &PoseSet,
    model: &SplatCloud,
    ref_masks: &MaskMap,
    params: &FusionParams,
) -> Result<FusionResult> {
    let pairs = candidate_pairs(p_src, p_tgt, params.max_pairs)?;
    let reference = ConsensusReference::new(p_ref, model, ref_masks, params.consensus_res)?;
    let eps = params.eps_rel * p_tgt.diameter();

    let mut best: Option<FusionResult> = None;
    let mut evaluated_pairs = 0;
    let mut evaluated_candidates = 0;
    for (a, b) in &pairs {
        let (s1, s2) = (p_src.get(a).unwrap(), p_src.get(b).unwrap());
        let (t1, t2) = (p_tgt.get(a).unwrap(), p_tgt.get(b).unwrap());
        let scale = match pair_scale(s1, s2, t1, t2, eps) {
            Ok(s) => s,
            Err(Error::DegeneratePair(..)) => {
                log::debug!("skipping degenerate pair {a},{b}");
                continue;
            }
            Err(e) => return Err(e),
        };
        evaluated_pairs += 1;
        for (anchor, src, tgt) in [(1u8, s1, t1), (2u8, s2, t2)] {
            let t = anchored_candidate(src, tgt, scale)?;
            let score = reference.score(&t)?;
            evaluated_candidates += 1;
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(FusionResult {
                    transform: t,
                    score,
                    winning_pair: (a.clone(), b.clone()),
                    anchor,
                    evaluated_pairs: 0,
                    evaluated_candidates: 0,
                });
            }
        }
    }
    let mut best = best.ok_or(Error::AllCandidatesDegenerate)?;
    best.evaluated_pairs = evaluated_pairs;
    best.evaluated_candidates = evaluated_candidates;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationOutput {
    pub stage1: FusionResult,
    pub stage2: FusionResult,
    pub aligned_mixed: PoseSet,
    pub aligned_aux: PoseSet,
}

/// Two-stage registration of an auxiliary camera set into the main frame
/// through a jointly predicted mixed set.
///
/// Stage 1 aligns the main-image part of the mixed prediction to the main
/// cameras, scored on the auxiliary part; stage 2 aligns the auxiliary
/// cameras to their stage-1-aligned mixed counterparts, scored on all
/// auxiliary cameras.
pub fn global_register(
    p_main: &PoseSet,
    p_aux: &PoseSet,
    p_mix: &PoseSet,
    model: &SplatCloud,
    aux_masks: &MaskMap,
    params: &FusionParams,
) -> Result<RegistrationOutput> {
    let mix_main = p_mix
        .filter("mixed-main", |id| p_main.contains(id))
        .map_err(|_| Error::InsufficientCorrespondence(0))
        .stage("stage 1")?;
    let mix_aux = p_mix
        .filter("mixed-aux", |id| p_aux.contains(id))
        .map_err(|_| Error::InsufficientCorrespondence(0))
        .stage("stage 1")?;
    if mix_aux.len() < 2 {
        return Err(Error::InsufficientCorrespondence(mix_aux.len())).stage("stage 1");
    }

    let stage1 = silhouette_consensus_fusion(&mix_main, p_main, &mix_aux, model, aux_masks, params)
        .stage("stage 1")?;
    let aligned_mixed = p_mix.transformed(&stage1.transform);
    let aligned_mix_aux = mix_aux.transformed(&stage1.transform);

    let stage2 =
        silhouette_consensus_fusion(p_aux, &aligned_mix_aux, p_aux, model, aux_masks, params)
            .stage("stage 2")?;
    let aligned_aux = p_aux.transformed(&stage2.transform);

    Ok(RegistrationOutput {
        stage1,
        stage2,
        aligned_mixed,
        aligned_aux,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{angle_between_deg, CameraIntrinsics, Vec3};
    use crate::metrics::registration_error;
    use crate::refine::axis_rotation;
    use crate::synth::{gen_object, random_gauge, sample_hemisphere_cameras, stream_rng};

    fn scene() -> (SplatCloud, PoseSet, MaskMap) {
        let model = gen_object(21, 600).unwrap();
        let cams =
            sample_hemisphere_cameras(0, 12, 3.5, CameraIntrinsics::centered(40.0, 48, 48), 3)
                .unwrap();
        let masks = masks_of(&model, &cams);
        (model, cams, masks)
    }

    fn masks_of(model: &SplatCloud, cams: &PoseSet) -> MaskMap {
        cams.iter()
            .map(|c| (c.id.clone(), render_mask(model, c).unwrap().image))
            .collect()
    }

    fn params() -> FusionParams {
        FusionParams {
            consensus_res: (48, 48),
            max_pairs: Some(12),
            ..Default::default()
        }
    }

    fn rotation_gap_deg(a: &Sim3, b: &Sim3) -> f64 {
        a.rotation.angle_to(&b.rotation).to_degrees()
    }

    #[test]
    fn aligned_sets_give_identity() {
        let (model, cams, masks) = scene();
        let r =
            silhouette_consensus_fusion(&cams, &cams, &cams, &model, &masks, &params()).unwrap();
        assert!((r.transform.scale - 1.0).abs() < 1e-6);
        assert!(rotation_gap_deg(&r.transform, &Sim3::identity()) < 1e-6);
        assert!(r.transform.translation.norm() < 1e-6);
        assert!((r.score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gauge_is_recovered() {
        let (model, cams, masks) = scene();
        let mut rng = stream_rng(9, 0);
        let g = random_gauge(&mut rng, 0.5, 2.0, 1.5);
        let src = cams.transformed(&g.inverse()).relabeled("src");
        let r = silhouette_consensus_fusion(&src, &cams, &src, &model, &masks, &params()).unwrap();
        assert!(rotation_gap_deg(&r.transform, &g) < 1e-4);
        assert!((r.transform.translation - g.translation).norm() < 1e-4 * cams.diameter());
        assert!((r.transform.scale / g.scale - 1.0).abs() < 1e-6);
        assert!(r.score > 0.99);
    }

    #[test]
    fn four_ids_give_twelve_candidates() {
        let (model, cams, masks) = scene();
        let four = cams.filter("four", |id| id < "pose0_0004").unwrap();
        assert_eq!(four.len(), 4);
        assert_eq!(candidate_pairs(&four, &four, None).unwrap().len(), 6);
        let r = silhouette_consensus_fusion(
            &four,
            &four,
            &four,
            &model,
            &masks,
            &FusionParams::default(),
        )
        .unwrap();
        assert_eq!((r.evaluated_pairs, r.evaluated_candidates), (6, 12));
    }

    #[test]
    fn pair_cap_keeps_farthest_pairs_in_order() {
        let (_, cams, _) = scene();
        let all = candidate_pairs(&cams, &cams, None).unwrap();
        let capped = candidate_pairs(&cams, &cams, Some(5)).unwrap();
        assert_eq!(capped.len(), 5);
        let dist = |(a, b): &(String, String)| {
            (cams.get(a).unwrap().center - cams.get(b).unwrap().center).norm()
        };
        let shortest_kept = capped.iter().map(dist).fold(f64::INFINITY, f64::min);
        let longer_dropped = all
            .iter()
            .filter(|p| !capped.contains(p))
            .any(|p| dist(p) > shortest_kept);
        assert!(!longer_dropped);
        let positions: Vec<usize> = capped
            .iter()
            .map(|p| all.iter().position(|q| q == p).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn degenerate_pairs_are_skipped() {
        let (model, cams, masks) = scene();
        let mut poses: Vec<CameraPose> = cams.poses()[..4].to_vec();
        poses[1].center = poses[0].center;
        let src = PoseSet::new("src", poses).unwrap();
        let tgt = cams.filter("tgt", |id| src.contains(id)).unwrap();
        let r = silhouette_consensus_fusion(&src, &tgt, &tgt, &model, &masks, &params()).unwrap();
        assert_eq!(r.evaluated_pairs, 5);

        let two = PoseSet::new("two", src.poses()[..2].to_vec()).unwrap();
        let r = silhouette_consensus_fusion(&two, &tgt, &tgt, &model, &masks, &params());
        assert!(matches!(r, Err(Error::AllCandidatesDegenerate)));
        let one = PoseSet::new("one", src.poses()[..1].to_vec()).unwrap();
        let r = silhouette_consensus_fusion(&one, &tgt, &tgt, &model, &masks, &params());
        assert!(matches!(r, Err(Error::InsufficientCorrespondence(1))));
    }

    struct Registration {
        model: SplatCloud,
        main: PoseSet,
        aux_truth: PoseSet,
        aux_masks: MaskMap,
        mixed: PoseSet,
    }

    /// Main and auxiliary rigs in the model frame, with an exact mixed set
    /// of four cameras from each.
    fn registration_scene() -> Registration {
        let (model, main, _) = scene();
        let intr = CameraIntrinsics::centered(40.0, 48, 48);
        let aux_truth = sample_hemisphere_cameras(1, 12, 3.5, intr, 4).unwrap();
        let aux_masks = masks_of(&model, &aux_truth);
        let mixed = main
            .filter("m", |id| id < "pose0_0004")
            .unwrap()
            .merged(
                &aux_truth.filter("a", |id| id < "pose1_0004").unwrap(),
                "mixed",
            )
            .unwrap();
        Registration {
            model,
            main,
            aux_truth,
            aux_masks,
            mixed,
        }
    }

    #[test]
    fn rigid_object_move_is_undone() {
        let s = registration_scene();
        let motion = Sim3::rigid(
            axis_rotation(Vec3::new(0.3, 1.0, 0.2), 0.9),
            Vec3::new(0.2, -0.1, 0.05),
        );
        let aux = s.aux_truth.transformed(&motion);
        let out =
            global_register(&s.main, &aux, &s.mixed, &s.model, &s.aux_masks, &params()).unwrap();
        let e = registration_error(&out.aligned_aux, &s.aux_truth).unwrap();
        assert!(e.max_angle() < 1e-3, "{e:?}");
        assert!(e.dp < 1e-3 * s.main.diameter(), "{e:?}");
    }

    #[test]
    fn registered_input_is_a_no_op() {
        let s = registration_scene();
        let out = global_register(
            &s.main,
            &s.aux_truth,
            &s.mixed,
            &s.model,
            &s.aux_masks,
            &params(),
        )
        .unwrap();
        assert!(rotation_gap_deg(&out.stage1.transform, &Sim3::identity()) < 1e-4);
        assert!(rotation_gap_deg(&out.stage2.transform, &Sim3::identity()) < 1e-4);
    }

    #[test]
    fn gauge_scale_is_inverted_by_stage_two() {
        let s = registration_scene();
        let aux = s.aux_truth.transformed(&Sim3::from_scale(0.5));
        let out =
            global_register(&s.main, &aux, &s.mixed, &s.model, &s.aux_masks, &params()).unwrap();
        assert!((out.stage2.transform.scale / 2.0 - 1.0).abs() < 1e-3);
        let fwd = angle_between_deg(
            &out.aligned_aux.poses()[0].forward(),
            &s.aux_truth.poses()[0].forward(),
        );
        assert!(fwd < 1e-6);
    }

    #[test]
    fn mixed_set_without_auxiliary_cameras_is_rejected() {
        let s = registration_scene();
        let only_main = s.mixed.filter("m", |id| id.starts_with("pose0")).unwrap();
        let r = global_register(
            &s.main,
            &s.aux_truth,
            &only_main,
            &s.model,
            &s.aux_masks,
            &params(),
        );
        assert!(r.is_err());
    }
}
