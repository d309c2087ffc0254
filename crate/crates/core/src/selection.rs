//! Mixed-pose image selection.
//!
//! Ranks main/auxiliary image pairs by descriptor similarity, drops pairs a
//! two-view pose predictor reports as geometrically inconsistent, grows each
//! surviving seed pair into an M x N neighbourhood and keeps the
//! neighbourhood with the highest mean cross-set similarity.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::geometry::PoseSet;

pub const DEFAULT_M: usize = 15;
pub const DEFAULT_N: usize = 15;
pub const DEFAULT_K: usize = 50;
pub const DEFAULT_PHI_DEG: f64 = 60.0;
pub const DEFAULT_DELTA_DEG: f64 = 45.0;

/// Feature vectors keyed by image id, compared after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    entries: BTreeMap<String, DVector<f64>>,
    raw: BTreeMap<String, Vec<f64>>,
}

impl DescriptorSet {
    /// Normalizes every vector; zero vectors are rejected.
    pub fn new(raw: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut originals = BTreeMap::new();
        let mut dim = None;
        for (id, v) in raw {
            originals.insert(id.clone(), v.clone());
            let v = DVector::from_vec(v);
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::invalid(format!(
                    "descriptor {id} has dimension {}",
                    v.len()
                )));
            }
            let n = v.norm();
            if n.is_nan() || n < 1e-12 {
                return Err(Error::ZeroDescriptor(id));
            }
            entries.insert(id, v / n);
        }
        if entries.is_empty() {
            return Err(Error::invalid("descriptor set is empty"));
        }
        Ok(Self {
            entries,
            raw: originals,
        })
    }

    pub fn get(&self, id: &str) -> Option<&DVector<f64>> {
        self.entries.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DVector<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Vectors as supplied, before normalization.
    pub fn raw(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.raw.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Restricts to the given ids.
    pub fn restricted<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<DescriptorSet> {
        let entries = ids
            .into_iter()
            .map(|id| {
                self.entries
                    .get(id)
                    .map(|v| (id.to_string(), v.clone()))
                    .ok_or_else(|| Error::IdMismatch(format!("no descriptor for {id}")))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let raw = entries
            .keys()
            .map(|k| (k.clone(), self.raw[k].clone()))
            .collect();
        Ok(Self { entries, raw })
    }

    pub fn merged(&self, other: &DescriptorSet) -> DescriptorSet {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.clone());
        let mut raw = self.raw.clone();
        raw.extend(other.raw.clone());
        Self { entries, raw }
    }
}

/// Cosine similarities, rows = main ids, columns = aux ids, both sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub main_ids: Vec<String>,
    pub aux_ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.aux_ids.len() + j]
    }

    pub fn rows(&self) -> usize {
        self.main_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.aux_ids.len()
    }
}

pub fn similarity_matrix(main: &DescriptorSet, aux: &DescriptorSet) -> Result<SimilarityMatrix> {
    if main.is_empty() || aux.is_empty() {
        return Err(Error::invalid("descriptor sets must be non-empty"));
    }
    let mut values = Vec::with_capacity(main.len() * aux.len());
    for (_, a) in main.iter() {
        for (_, b) in aux.iter() {
            if a.len() != b.len() {
                return Err(Error::invalid("descriptor dimensions differ"));
            }
            values.push(a.dot(b));
        }
    }
    Ok(SimilarityMatrix {
        main_ids: main.ids().map(String::from).collect(),
        aux_ids: aux.ids().map(String::from).collect(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub main_id: String,
    pub aux_id: String,
    pub similarity: f64,
}

fn by_similarity_then_ids(a: &CandidatePair, b: &CandidatePair) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.main_id.cmp(&b.main_id))
        .then_with(|| a.aux_id.cmp(&b.aux_id))
}

/// The `k` most similar pairs, descending; ties by (main id, aux id).
pub fn top_k_pairs(matrix: &SimilarityMatrix, k: usize) -> Vec<CandidatePair> {
    let mut all = Vec::with_capacity(matrix.rows() * matrix.cols());
    for (i, m) in matrix.main_ids.iter().enumerate() {
        for (j, a) in matrix.aux_ids.iter().enumerate() {
            all.push(CandidatePair {
                main_id: m.clone(),
                aux_id: a.clone(),
                similarity: matrix.get(i, j),
            });
        }
    }
    all.sort_by(by_similarity_then_ids);
    all.truncate(k);
    all
}

/// Angular gaps in degrees between the two cameras of a pair, as reported
/// by an external two-view pose predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGaps {
    pub forward_deg: f64,
    pub up_deg: f64,
}

/// Two-view predictions keyed by `(main id, aux id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PosePrediction {
    pub gaps: BTreeMap<(String, String), PairGaps>,
}

impl PosePrediction {
    pub fn get(&self, main_id: &str, aux_id: &str) -> Option<PairGaps> {
        self.gaps
            .get(&(main_id.to_string(), aux_id.to_string()))
            .copied()
    }

    pub fn insert(&mut self, main_id: &str, aux_id: &str, gaps: PairGaps) {
        self.gaps
            .insert((main_id.to_string(), aux_id.to_string()), gaps);
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verified {
    pub kept: Vec<CandidatePair>,
    /// Pairs dropped because the predictor had nothing for them.
    pub missing: usize,
}

/// Keeps pairs whose forward gap is at most `phi` and up gap at most
/// `delta` degrees; order preserved.
pub fn geometric_verify(
    pairs: &[CandidatePair],
    oracle: &PosePrediction,
    phi: f64,
    delta: f64,
) -> Result<Verified> {
    if !(phi > 0.0 && phi <= 180.0 && delta > 0.0 && delta <= 180.0) {
        return Err(Error::invalid(format!(
            "thresholds out of range: phi={phi} delta={delta}"
        )));
    }
    let mut kept = Vec::new();
    let mut missing = 0;
    for p in pairs {
        match oracle.get(&p.main_id, &p.aux_id) {
            Some(g) if g.forward_deg <= phi && g.up_deg <= delta => kept.push(p.clone()),
            Some(_) => {}
            None => {
                log::warn!("no pose prediction for {}|{}", p.main_id, p.aux_id);
                missing += 1;
            }
        }
    }
    Ok(Verified { kept, missing })
}

fn nearest(poses: &PoseSet, seed: &str, count: usize) -> Result<Vec<String>> {
    let origin = poses
        .get(seed)
        .ok_or_else(|| Error::IdMismatch(format!("seed {seed} not in {}", poses.label)))?
        .center;
    let mut others: Vec<(f64, &str)> = poses
        .iter()
        .filter(|p| p.id != seed)
        .map(|p| ((p.center - origin).norm(), p.id.as_str()))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut ids = vec![seed.to_string()];
    ids.extend(
        others
            .into_iter()
            .take(count - 1)
            .map(|(_, id)| id.to_string()),
    );
    Ok(ids)
}

/// Seed images followed by their nearest neighbours by camera-center
/// distance, each set measured in its own frame.
pub fn expand_neighborhood(
    pair: &CandidatePair,
    main_poses: &PoseSet,
    aux_poses: &PoseSet,
    m: usize,
    n: usize,
) -> Result<(Vec<String>, Vec<String>)> {
    if m == 0 || n == 0 || m > main_poses.len() || n > aux_poses.len() {
        return Err(Error::invalid(format!(
            "cannot pick {m} of {} main and {n} of {} aux cameras",
            main_poses.len(),
            aux_poses.len()
        )));
    }
    Ok((
        nearest(main_poses, &pair.main_id, m)?,
        nearest(aux_poses, &pair.aux_id, n)?,
    ))
}

/// Mean cosine similarity over all main x aux combinations.
pub fn mean_cross_similarity(
    main: &DescriptorSet,
    aux: &DescriptorSet,
    main_ids: &[String],
    aux_ids: &[String],
) -> Result<f64> {
    let lookup = |set: &DescriptorSet, id: &str| {
        set.get(id)
            .cloned()
            .ok_or_else(|| Error::IdMismatch(format!("no descriptor for {id}")))
    };
    let a: Vec<_> = main_ids
        .iter()
        .map(|id| lookup(main, id))
        .collect::<Result<_>>()?;
    let b: Vec<_> = aux_ids
        .iter()
        .map(|id| lookup(aux, id))
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    for x in &a {
        for y in &b {
            sum += x.dot(y);
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub phi_deg: f64,
    pub delta_deg: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            n: DEFAULT_N,
            k: DEFAULT_K,
            phi_deg: DEFAULT_PHI_DEG,
            delta_deg: DEFAULT_DELTA_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedPoseSelection {
    pub main_ids: Vec<String>,
    pub aux_ids: Vec<String>,
    pub seed_pair: CandidatePair,
    pub score: f64,
}

pub fn select_mixed_set(
    main_desc: &DescriptorSet,
    aux_desc: &DescriptorSet,
    main_poses: &PoseSet,
    aux_poses: &PoseSet,
    oracle: &PosePrediction,
    params: &SelectionParams,
) -> Result<MixedPoseSelection> {
    if params.k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let matrix = similarity_matrix(main_desc, aux_desc)?;
    let candidates = top_k_pairs(&matrix, params.k);
    let verified = geometric_verify(&candidates, oracle, params.phi_deg, params.delta_deg)?;
    if verified.kept.is_empty() {
        return Err(no_verified(&candidates, oracle, verified.missing));
    }

    let mut best: Option<MixedPoseSelection> = None;
    for seed in &verified.kept {
        let (main_ids, aux_ids) =
            expand_neighborhood(seed, main_poses, aux_poses, params.m, params.n)?;
        let score = mean_cross_similarity(main_desc, aux_desc, &main_ids, &aux_ids)?;
        let better = match &best {
            None => true,
            Some(b) => match score.total_cmp(&b.score) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => by_similarity_then_ids(seed, &b.seed_pair) == Ordering::Less,
            },
        };
        if better {
            best = Some(MixedPoseSelection {
                main_ids,
                aux_ids,
                seed_pair: seed.clone(),
                score,
            });
        }
    }
    Ok(best.expect("at least one verified pair"))
}

fn no_verified(candidates: &[CandidatePair], oracle: &PosePrediction, missing: usize) -> Error {
    let gaps: Vec<PairGaps> = candidates
        .iter()
        .filter_map(|p| oracle.get(&p.main_id, &p.aux_id))
        .collect();
    let fold = |f: fn(&PairGaps) -> f64| {
        gaps.iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
    };
    let (min_forward, max_forward) = fold(|g| g.forward_deg);
    let (min_up, max_up) = fold(|g| g.up_deg);
    Error::NoVerifiedPairs {
        candidates: candidates.len(),
        missing,
        min_forward,
        max_forward,
        min_up,
        max_up,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose, Rotation, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(items: &[(&str, Vec<f64>)]) -> DescriptorSet {
        DescriptorSet::new(items.iter().map(|(k, v)| (k.to_string(), v.clone()))).unwrap()
    }

    fn line(prefix: &str, xs: &[f64]) -> PoseSet {
        let k = CameraIntrinsics::centered(50.0, 32, 32);
        PoseSet::new(
            prefix,
            xs.iter()
                .enumerate()
                .map(|(i, &x)| {
                    CameraPose::new(
                        format!("{prefix}{i}"),
                        Rotation::identity(),
                        Vec3::new(x, 0.0, 0.0),
                        k,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_extremes() {
        let main = desc(&[("a", vec![1.0, 0.0])]);
        let aux = desc(&[
            ("b", vec![2.0, 0.0]),
            ("c", vec![0.0, 3.0]),
            ("d", vec![-1.0, 0.0]),
        ]);
        let m = similarity_matrix(&main, &aux).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(0, 2), -1.0);
    }

    #[test]
    fn zero_descriptor_rejected() {
        let r = DescriptorSet::new([("z".to_string(), vec![0.0, 0.0])]);
        assert!(matches!(r, Err(Error::ZeroDescriptor(_))));
    }

    #[test]
    fn top_k_larger_than_matrix_returns_all_sorted() {
        let main = desc(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        let aux = desc(&[("x", vec![1.0, 1.0])]);
        let m = similarity_matrix(&main, &aux).unwrap();
        let top = top_k_pairs(&m, 10);
        assert_eq!(top.len(), 2);
        // equal similarity: lexicographic main id wins
        assert_eq!(top[0].main_id, "a");
        assert_eq!(top[1].main_id, "b");
    }

    #[test]
    fn top_k_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gen = |p: &str| -> Vec<(String, Vec<f64>)> {
            (0..3)
                .map(|i| {
                    (
                        format!("{p}{i}"),
                        (0..5).map(|_| rng.random::<f64>() - 0.5).collect(),
                    )
                })
                .collect()
        };
        let main = DescriptorSet::new(gen("m")).unwrap();
        let aux = DescriptorSet::new(gen("a")).unwrap();
        let m = similarity_matrix(&main, &aux).unwrap();
        let top = top_k_pairs(&m, 4);

        let mut brute = Vec::new();
        for (mi, mv) in main.iter() {
            for (ai, av) in aux.iter() {
                let cos = mv.dot(av) / (mv.norm() * av.norm());
                brute.push((cos, mi.to_string(), ai.to_string()));
            }
        }
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (got, want) in top.iter().zip(&brute) {
            assert_eq!((&got.main_id, &got.aux_id), (&want.1, &want.2));
            assert!((got.similarity - want.0).abs() < 1e-9);
        }
        let k1 = top_k_pairs(&m, 1);
        assert_eq!(k1[0], top[0]);
    }

    fn pair(m: &str, a: &str) -> CandidatePair {
        CandidatePair {
            main_id: m.into(),
            aux_id: a.into(),
            similarity: 0.9,
        }
    }

    #[test]
    fn verification_rules() {
        let mut oracle = PosePrediction::default();
        oracle.insert(
            "m0",
            "a0",
            PairGaps {
                forward_deg: 0.0,
                up_deg: 0.0,
            },
        );
        oracle.insert(
            "m1",
            "a1",
            PairGaps {
                forward_deg: 60.0,
                up_deg: 10.0,
            },
        );
        oracle.insert(
            "m2",
            "a2",
            PairGaps {
                forward_deg: 10.0,
                up_deg: 50.0,
            },
        );
        let pairs = vec![
            pair("m0", "a0"),
            pair("m1", "a1"),
            pair("m2", "a2"),
            pair("m3", "a3"),
        ];
        let v = geometric_verify(&pairs, &oracle, 60.0, 45.0).unwrap();
        assert_eq!(v.kept, vec![pair("m0", "a0"), pair("m1", "a1")]);
        assert_eq!(v.missing, 1);
        assert!(geometric_verify(&pairs, &oracle, 0.0, 45.0).is_err());
    }

    #[test]
    fn expansion_cases() {
        let main = line("m", &[0.0, 1.0, 2.0, 3.0]);
        let aux = line("a", &[0.0, 5.0]);
        let seed = pair("m0", "a1");
        let (m, a) = expand_neighborhood(&seed, &main, &aux, 1, 1).unwrap();
        assert_eq!((m, a), (vec!["m0".to_string()], vec!["a1".to_string()]));
        let (m, _) = expand_neighborhood(&seed, &main, &aux, 3, 1).unwrap();
        assert_eq!(m, vec!["m0", "m1", "m2"]);
        let (m, a) = expand_neighborhood(&pair("m2", "a0"), &main, &aux, 4, 2).unwrap();
        // m1 and m3 tie at distance 1; id order decides
        assert_eq!(m, vec!["m2", "m1", "m3", "m0"]);
        assert_eq!(a, vec!["a0", "a1"]);
        assert!(expand_neighborhood(&seed, &main, &aux, 5, 1).is_err());
    }

    #[test]
    fn select_single_candidate() {
        let main = line("m", &[0.0, 1.0]);
        let aux = line("a", &[0.0, 1.0]);
        let md = desc(&[("m0", vec![1.0, 0.0]), ("m1", vec![0.0, 1.0])]);
        let ad = desc(&[("a0", vec![1.0, 0.1]), ("a1", vec![-1.0, 0.0])]);
        let mut oracle = PosePrediction::default();
        oracle.insert(
            "m0",
            "a0",
            PairGaps {
                forward_deg: 1.0,
                up_deg: 1.0,
            },
        );
        let params = SelectionParams {
            m: 2,
            n: 2,
            k: 4,
            ..Default::default()
        };
        let s = select_mixed_set(&md, &ad, &main, &aux, &oracle, &params).unwrap();
        assert_eq!(s.seed_pair.main_id, "m0");
        assert_eq!(s.main_ids, vec!["m0", "m1"]);
        let recomputed = mean_cross_similarity(&md, &ad, &s.main_ids, &s.aux_ids).unwrap();
        assert!((recomputed - s.score).abs() < 1e-12);
    }

    #[test]
    fn select_prefers_coherent_block() {
        // two clusters; the second seed has the higher similarity but its
        // neighbourhood mixes in an unrelated camera
        let main = line("m", &[0.0, 1.0, 10.0, 11.0]);
        let aux = line("a", &[0.0, 1.0, 10.0, 11.0]);
        let e = |x: f64, y: f64, z: f64| vec![x, y, z];
        let md = desc(&[
            ("m0", e(1.0, 0.0, 0.0)),
            ("m1", e(1.0, 0.05, 0.0)),
            ("m2", e(0.0, 1.0, 0.0)),
            ("m3", e(0.0, 0.0, 1.0)),
        ]);
        let ad = desc(&[
            ("a0", e(1.0, 0.1, 0.0)),
            ("a1", e(1.0, 0.0, 0.1)),
            ("a2", e(0.0, 1.0, 0.0)),
            ("a3", e(0.0, -0.2, -1.0)),
        ]);
        let mut oracle = PosePrediction::default();
        for m in ["m0", "m1", "m2", "m3"] {
            for a in ["a0", "a1", "a2", "a3"] {
                oracle.insert(
                    m,
                    a,
                    PairGaps {
                        forward_deg: 5.0,
                        up_deg: 5.0,
                    },
                );
            }
        }
        let params = SelectionParams {
            m: 2,
            n: 2,
            k: 16,
            ..Default::default()
        };
        let s = select_mixed_set(&md, &ad, &main, &aux, &oracle, &params).unwrap();
        let mut main_ids = s.main_ids.clone();
        main_ids.sort();
        assert_eq!(main_ids, vec!["m0", "m1"]);
        assert_eq!(s.aux_ids.len(), 2);
        assert!(s.aux_ids.contains(&"a0".to_string()) && s.aux_ids.contains(&"a1".to_string()));
    }

    #[test]
    fn nothing_verified_is_an_error() {
        let main = line("m", &[0.0]);
        let aux = line("a", &[0.0]);
        let md = desc(&[("m0", vec![1.0])]);
        let ad = desc(&[("a0", vec![1.0])]);
        let mut oracle = PosePrediction::default();
        oracle.insert(
            "m0",
            "a0",
            PairGaps {
                forward_deg: 170.0,
                up_deg: 3.0,
            },
        );
        let err = select_mixed_set(
            &md,
            &ad,
            &main,
            &aux,
            &oracle,
            &SelectionParams {
                m: 1,
                n: 1,
                ..Default::default()
            },
        )
        .unwrap_err();
        match err {
            Error::NoVerifiedPairs { max_forward, .. } => assert_eq!(max_forward, 170.0),
            e => panic!("{e}"),
        }
    }
}
