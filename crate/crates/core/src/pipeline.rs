//! End-to-end orchestration: selection, global registration, local
//! refinement and completion for every auxiliary placement, followed by
//! evaluation against ground truth and report emission.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::complete::{
    iterate_auxiliary_poses, AuxiliaryInput, FusionState, FusionStep, MixedChoice, StageConfig,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::geometry::{PoseSet, Sim3};
use crate::io;
use crate::metrics::{
    holdout_split, psnr, registration_error, ssim, RegistrationError, DEFAULT_TRAIN_RATIO,
};
use crate::refine::RefineConfig;
use crate::render::{render_rgb, SplatCloud};
use crate::selection::SelectionParams;
use crate::synth::{predict_mixed_poses, MultiPoseDataset, PredictorConfig};

/// Refinement batch used by the pipeline; the stage default is all views.
pub const PIPELINE_REFINE_BATCH: usize = 30;

pub const REPORT_HEADER: &str =
    "case,stage,dtheta_x,dtheta_y,dtheta_z,dp,psnr,ssim,lpips,wall_seconds";

/// Pipeline configuration. `seed` drives every stochastic stage: mixed-set
/// prediction and random subsets, refinement batches, training and the
/// held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub case: String,
    pub seed: u64,
    pub selection: SelectionParams,
    /// Bypass selection with seeded random subsets of sizes M and N.
    pub random_mixed: bool,
    pub predictor: PredictorConfig,
    pub fusion: FusionParams,
    pub skip_refine: bool,
    pub silhouette: RefineConfig,
    pub photometric: RefineConfig,
    pub complete: bool,
    pub train: TrainConfig,
    pub train_ratio: f64,
    /// Write wall times into the report; off makes reports reproducible
    /// byte for byte.
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let refine = RefineConfig {
            batch: Some(PIPELINE_REFINE_BATCH),
            ..Default::default()
        };
        Self {
            case: "synthetic".into(),
            seed: 0,
            selection: SelectionParams::default(),
            random_mixed: false,
            predictor: PredictorConfig::default(),
            fusion: FusionParams::default(),
            skip_refine: false,
            silhouette: refine.clone(),
            photometric: refine,
            complete: true,
            train: TrainConfig::default(),
            train_ratio: DEFAULT_TRAIN_RATIO,
            record_timings: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("pipeline config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io::io_err(path))?;
        Self::from_toml(&text).map_err(|e| Error::Format {
            path: path.to_owned(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    fn stage_config(&self, holdout: Vec<String>, pose: usize) -> StageConfig {
        let mixed = if self.random_mixed {
            MixedChoice::Random {
                m: self.selection.m,
                n: self.selection.n,
                seed: self.seed.wrapping_add(pose as u64),
            }
        } else {
            MixedChoice::Selected(self.selection.clone())
        };
        let seeded = |c: &RefineConfig| RefineConfig {
            batch_seed: self.seed,
            ..c.clone()
        };
        StageConfig {
            mixed,
            fusion: self.fusion.clone(),
            refine: (!self.skip_refine)
                .then(|| (seeded(&self.silhouette), seeded(&self.photometric))),
            train: self.complete.then(|| TrainConfig {
                seed: self.seed.wrapping_add(pose as u64),
                ..self.train.clone()
            }),
            holdout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NvsScores {
    pub psnr: f64,
    pub ssim: f64,
}

/// Held-out evaluation of one auxiliary placement before and after
/// completion.
#[derive(Debug, Clone, PartialEq)]
pub struct NvsEval {
    pub test_ids: Vec<String>,
    pub baseline: Vec<NvsScores>,
    pub completed: Vec<NvsScores>,
}

impl NvsEval {
    pub fn mean_baseline(&self) -> NvsScores {
        mean_scores(&self.baseline)
    }

    pub fn mean_completed(&self) -> NvsScores {
        mean_scores(&self.completed)
    }
}

fn mean_scores(s: &[NvsScores]) -> NvsScores {
    let n = s.len().max(1) as f64;
    NvsScores {
        psnr: s.iter().map(|x| x.psnr).sum::<f64>() / n,
        ssim: s.iter().map(|x| x.ssim).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseRun {
    pub pose: usize,
    pub step: FusionStep,
    /// Errors after global registration and after refinement, when ground
    /// truth exists.
    pub global_error: Option<RegistrationError>,
    pub refined_error: Option<RegistrationError>,
    pub nvs: Option<NvsEval>,
}

impl PoseRun {
    /// Error of the final transform.
    pub fn final_error(&self) -> Option<RegistrationError> {
        self.refined_error.or(self.global_error)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub poses: Vec<PoseRun>,
    pub state: FusionState,
    /// Diameter of the ground-truth camera rig of the main placement.
    pub diameter: f64,
}

/// Runs every stage on an in-memory dataset.
pub fn run_on_dataset(ds: &MultiPoseDataset, cfg: &PipelineConfig) -> Result<PipelineRun> {
    if ds.poses.len() < 2 {
        return Err(Error::invalid(
            "dataset needs a main and at least one auxiliary placement",
        ));
    }
    if !(cfg.train_ratio > 0.0 && cfg.train_ratio < 1.0) {
        return Err(Error::invalid(format!(
            "train ratio {} outside (0, 1)",
            cfg.train_ratio
        )));
    }
    let gt_all =
        match &ds.gt {
            Some(_) => ds.gt_all_cameras()?,
            None => return Err(Error::invalid(
                "mixed-pose prediction is simulated from ground truth, which this dataset lacks",
            )),
        };
    let main = &ds.poses[0];
    let diameter = main.cameras.diameter();
    let mut holdout = Vec::new();
    for p in &ds.poses {
        holdout.extend(holdout_split(&p.cameras, cfg.train_ratio, cfg.seed)?.1);
    }

    let mut state = FusionState::from_main(
        main.cameras.clone(),
        &main.images,
        &main.masks,
        main.descriptors.clone(),
        ds.main_model.clone(),
    )?;
    let mut poses = Vec::new();
    for (k, aux) in ds.poses.iter().enumerate().skip(1) {
        log::info!("registering placement {k}");
        let input = AuxiliaryInput {
            label: aux.cameras.label.clone(),
            cameras: aux.cameras.clone(),
            images: aux.images.clone(),
            masks: aux.masks.clone(),
            descriptors: aux.descriptors.clone(),
        };
        let predictor_seed = cfg.seed.wrapping_add(k as u64);
        let predictor = |m: &[String], a: &[String]| {
            predict_mixed_poses(m, a, &gt_all, &cfg.predictor, predictor_seed)
        };
        let stage = cfg.stage_config(holdout.clone(), k);
        let (next, step) = iterate_auxiliary_poses(&state, &input, &ds.oracle, &predictor, &stage)?;

        let gt = ds.gt_cameras(k)?;
        let global_error = Some(registration_error(&step.registration.aligned_aux, &gt)?);
        let refined_error = match &step.refinement {
            Some(r) => Some(registration_error(
                &aux.cameras.transformed(&r.transform),
                &gt,
            )?),
            None => None,
        };
        let nvs = if cfg.complete {
            let test: Vec<String> = holdout
                .iter()
                .filter(|id| aux.cameras.contains(id))
                .cloned()
                .collect();
            Some(evaluate_views(&state.model, &next.model, &next, &test)?)
        } else {
            None
        };
        if let Some(e) = refined_error.or(global_error) {
            log::info!(
                "placement {k}: mean angle {:.4} deg, dp {:.5}",
                e.mean_angle(),
                e.dp
            );
        }
        poses.push(PoseRun {
            pose: k,
            step,
            global_error,
            refined_error,
            nvs,
        });
        state = next;
    }
    Ok(PipelineRun {
        config: cfg.clone(),
        poses,
        state,
        diameter,
    })
}

fn evaluate_views(
    before: &SplatCloud,
    after: &SplatCloud,
    state: &FusionState,
    ids: &[String],
) -> Result<NvsEval> {
    let mut baseline = Vec::new();
    let mut completed = Vec::new();
    for id in ids {
        let view = state
            .views
            .get(id)
            .ok_or_else(|| Error::MissingImage(id.clone()))?;
        for (model, out) in [(before, &mut baseline), (after, &mut completed)] {
            let img = render_rgb(model, &view.pose)?.image;
            out.push(NvsScores {
                psnr: psnr(&img, &view.image)?,
                ssim: ssim(&img, &view.image)?,
            });
        }
    }
    Ok(NvsEval {
        test_ids: ids.to_vec(),
        baseline,
        completed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub case: String,
    pub stage: String,
    pub error: Option<RegistrationError>,
    pub scores: Option<NvsScores>,
    pub wall_seconds: Option<f64>,
}

pub fn report_rows(run: &PipelineRun) -> Vec<ReportRow> {
    let timed = |s: f64| run.config.record_timings.then_some(s);
    let row = |stage: String, error, scores, wall| ReportRow {
        case: run.config.case.clone(),
        stage,
        error,
        scores,
        wall_seconds: wall,
    };
    let mut rows = Vec::new();
    for p in &run.poses {
        let s = &p.step.seconds;
        let tag = format!("pose{}", p.pose);
        rows.push(row(
            format!("{tag}/global"),
            p.global_error,
            None,
            timed(s.selection + s.prediction + s.global),
        ));
        if p.step.refinement.is_some() {
            rows.push(row(
                format!("{tag}/refined"),
                p.refined_error,
                None,
                timed(s.refine),
            ));
        }
        if let Some(nvs) = &p.nvs {
            rows.push(row(
                format!("{tag}/baseline"),
                None,
                Some(nvs.mean_baseline()),
                None,
            ));
            rows.push(row(
                format!("{tag}/completed"),
                None,
                Some(nvs.mean_completed()),
                timed(s.completion),
            ));
        }
    }
    rows
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let e = r.error;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},,{}",
            r.case,
            r.stage,
            opt(e.map(|e| e.dtheta_x)),
            opt(e.map(|e| e.dtheta_y)),
            opt(e.map(|e| e.dtheta_z)),
            opt(e.map(|e| e.dp)),
            opt(r.scores.map(|s| s.psnr)),
            opt(r.scores.map(|s| s.ssim)),
            r.wall_seconds
                .map(|w| format!("{w:.3}"))
                .unwrap_or_default(),
        );
    }
    out
}

pub fn report_text(run: &PipelineRun) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "case {}  seed {}  diameter {:.6}",
        run.config.case, run.config.seed, run.diameter
    );
    for p in &run.poses {
        let step = &p.step;
        let _ = writeln!(out, "\nplacement {}", p.pose);
        match &step.selection {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "  selection: seed pair {} / {} (similarity {:.6}), mean cross similarity {:.6}",
                    s.seed_pair.main_id, s.seed_pair.aux_id, s.seed_pair.similarity, s.score
                );
            }
            None => {
                let _ = writeln!(out, "  selection: random subsets");
            }
        }
        let _ = writeln!(
            out,
            "  mixed set: {} main + {} auxiliary images",
            step.mixed_ids.0.len(),
            step.mixed_ids.1.len()
        );
        for (name, r) in [
            ("stage 1", &step.registration.stage1),
            ("stage 2", &step.registration.stage2),
        ] {
            let _ = writeln!(
                out,
                "  {name}: IoU {:.6}, pair {} / {}, anchor {}, {} pairs, {} candidates",
                r.score,
                r.winning_pair.0,
                r.winning_pair.1,
                r.anchor,
                r.evaluated_pairs,
                r.evaluated_candidates
            );
        }
        write_error(&mut out, "global", p.global_error, run.diameter);
        if let Some(r) = &step.refinement {
            for (name, o) in [
                ("silhouette", &r.silhouette),
                ("photometric", &r.photometric),
            ] {
                let _ = writeln!(
                    out,
                    "  {name} refinement: loss {:.6e} -> {:.6e}, {} iterations, converged {}, stalled {}",
                    o.initial_loss,
                    o.final_loss,
                    o.trace.rows.len(),
                    o.converged,
                    o.stalled
                );
            }
            write_error(&mut out, "refined", p.refined_error, run.diameter);
        }
        if let Some(nvs) = &p.nvs {
            let (b, c) = (nvs.mean_baseline(), nvs.mean_completed());
            let _ = writeln!(
                out,
                "  held-out views: {}  baseline PSNR {:.4} SSIM {:.4}  completed PSNR {:.4} SSIM {:.4}",
                nvs.test_ids.len(),
                b.psnr,
                b.ssim,
                c.psnr,
                c.ssim
            );
            for ((id, b), c) in nvs.test_ids.iter().zip(&nvs.baseline).zip(&nvs.completed) {
                let _ = writeln!(
                    out,
                    "    {id}: PSNR {:.4} -> {:.4}  SSIM {:.4} -> {:.4}",
                    b.psnr, c.psnr, b.ssim, c.ssim
                );
            }
        }
        if run.config.record_timings {
            let s = &step.seconds;
            let _ = writeln!(
                out,
                "  seconds: selection {:.2}, prediction {:.2}, global {:.2}, refine {:.2}, completion {:.2}",
                s.selection, s.prediction, s.global, s.refine, s.completion
            );
        }
    }
    out
}

fn write_error(out: &mut String, stage: &str, e: Option<RegistrationError>, diameter: f64) {
    if let Some(e) = e {
        let _ = writeln!(
            out,
            "  {stage} error: dtheta x {:.6} y {:.6} z {:.6} deg, dp {:.6} ({:.4}% of diameter)",
            e.dtheta_x,
            e.dtheta_y,
            e.dtheta_z,
            e.dp,
            100.0 * e.dp / diameter
        );
    }
}

/// Writes every intermediate artifact and the reports under `out`.
pub fn write_run(out: &Path, run: &PipelineRun, aux_cameras: &[PoseSet]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io::io_err(out))?;
    io::write_text(&out.join("config.toml"), &run.config.to_toml())?;
    for (p, aux) in run.poses.iter().zip(aux_cameras) {
        let dir = out.join(format!("pose{}", p.pose));
        std::fs::create_dir_all(&dir).map_err(io::io_err(&dir))?;
        let step = &p.step;
        let selection = match &step.selection {
            Some(s) => io::SelectionJson::from(s),
            None => io::SelectionJson {
                main_ids: step.mixed_ids.0.clone(),
                aux_ids: step.mixed_ids.1.clone(),
                seed_main: None,
                seed_aux: None,
                seed_similarity: None,
                score: None,
            },
        };
        io::write_json(&dir.join("selection.json"), &selection)?;
        io::write_poses(&dir.join("mixed.json"), &step.mixed)?;
        io::write_json(
            &dir.join("global.json"),
            &io::RegistrationJson::from_output(&step.registration),
        )?;
        if let Some(r) = &step.refinement {
            let mut trace = io::TRACE_HEADER.to_owned();
            trace.push_str(&io::trace_csv("silhouette", &r.silhouette.trace));
            trace.push_str(&io::trace_csv("photometric", &r.photometric.trace));
            io::write_text(&dir.join("refine_trace.csv"), &trace)?;
            io::write_json(
                &dir.join("refined.json"),
                &io::RegistrationJson::from_transform(&r.transform, aux),
            )?;
        }
        if let Some(f) = &step.finetune {
            let mut losses = String::from("iteration,view,loss\n");
            let views = step
                .schedule
                .as_ref()
                .map(|s| s.views.as_slice())
                .unwrap_or_default();
            for (i, (l, v)) in f.losses.iter().zip(views).enumerate() {
                let _ = writeln!(losses, "{i},{v},{l:e}");
            }
            io::write_text(&dir.join("train_loss.csv"), &losses)?;
        }
    }
    io::write_poses(&out.join("cameras_registered.json"), &run.state.cameras)?;
    let transforms: Vec<io::Sim3Json> = run
        .state
        .registrations
        .iter()
        .map(io::Sim3Json::from)
        .collect();
    io::write_json(&out.join("transforms.json"), &transforms)?;
    io::write_splats(&out.join("model_fused.json"), &run.state.model)?;
    io::write_text(&out.join("report.txt"), &report_text(run))?;
    io::write_text(&out.join("report.csv"), &report_csv(&report_rows(run)))?;
    Ok(())
}

/// Reads a dataset, runs every stage and persists the results.
pub fn run_pipeline(dataset_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let ds = io::read_dataset(dataset_dir)?;
    let run = run_on_dataset(&ds, cfg)?;
    let aux: Vec<PoseSet> = ds.poses[1..].iter().map(|p| p.cameras.clone()).collect();
    write_run(out, &run, &aux)?;
    Ok(run)
}

/// Transform of placement k's stored cameras into the model frame.
pub fn final_transform(run: &PipelineRun, k: usize) -> Option<Sim3> {
    run.poses
        .iter()
        .find(|p| p.pose == k)
        .map(|p| p.step.transform)
}
