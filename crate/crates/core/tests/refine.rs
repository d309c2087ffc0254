use posefuse::geometry::{Sim3, Vec3};
use posefuse::metrics::registration_error;
use posefuse::refine::{axis_rotation, refine_photometric, refine_silhouette, RefineConfig};
use posefuse::synth::{make_dataset, MultiPoseDataset, SynthConfig};

fn fixture() -> MultiPoseDataset {
    let cfg = SynthConfig {
        seed: 5,
        n_splats: 1000,
        views_per_pose: 40,
        width: 64,
        height: 64,
        focal: 70.0,
        ..Default::default()
    };
    make_dataset(&cfg).unwrap()
}

fn gt_transform(ds: &MultiPoseDataset) -> Sim3 {
    ds.gt.as_ref().unwrap().alignment(1)
}

/// Rotates by `deg` about an oblique axis through the model centroid and
/// shifts by `frac` of the rig diameter.
fn perturbed(ds: &MultiPoseDataset, deg: f64, frac: f64) -> Sim3 {
    let gt = gt_transform(ds);
    let c = ds.main_model.centroid();
    let r = axis_rotation(Vec3::new(1.0, -0.5, 0.3), deg.to_radians());
    let diameter = ds.gt_cameras(1).unwrap().diameter();
    let shift = Vec3::new(0.6, 0.8, 0.0) * frac * diameter;
    let about = Sim3::new(1.0, r, c - r * c + shift);
    about.compose(&gt)
}

fn transform_gap(a: &Sim3, b: &Sim3) -> f64 {
    let probes = [Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
    probes
        .iter()
        .map(|p| (a.transform_point(p) - b.transform_point(p)).norm())
        .fold(0.0, f64::max)
}

#[test]
fn ground_truth_is_nearly_stationary() {
    let ds = fixture();
    let aux = &ds.poses[1];
    let gt = gt_transform(&ds);
    let cfg = RefineConfig {
        max_iters: 30,
        ..Default::default()
    };
    let sil = refine_silhouette(&aux.cameras, &ds.main_model, &aux.masks, &gt, &cfg).unwrap();
    let photo = refine_photometric(
        &aux.cameras,
        &ds.main_model,
        &aux.images,
        &aux.masks,
        &gt,
        &cfg,
    )
    .unwrap();
    let truth = ds.gt_cameras(1).unwrap();
    let sil_err = registration_error(&aux.cameras.transformed(&sil.transform), &truth).unwrap();
    let photo_err = registration_error(&aux.cameras.transformed(&photo.transform), &truth).unwrap();
    // The soft-silhouette objective is minimized slightly away from the
    // truth; the photometric one is not.
    assert!(sil_err.max_angle() < 0.5, "{sil_err:?}");
    assert!(transform_gap(&photo.transform, &gt) < 1e-5, "{photo_err:?}");
}

#[test]
fn perturbed_start_is_pulled_back() {
    let ds = fixture();
    let aux = &ds.poses[1];
    let init = perturbed(&ds, 2.0, 0.02);
    let truth = ds.gt_cameras(1).unwrap();
    let before = registration_error(&aux.cameras.transformed(&init), &truth).unwrap();
    let cfg = RefineConfig::default();
    let sil = refine_silhouette(&aux.cameras, &ds.main_model, &aux.masks, &init, &cfg).unwrap();
    let sil_err = registration_error(&aux.cameras.transformed(&sil.transform), &truth).unwrap();
    let photo = refine_photometric(
        &aux.cameras,
        &ds.main_model,
        &aux.images,
        &aux.masks,
        &sil.transform,
        &cfg,
    )
    .unwrap();
    let photo_err = registration_error(&aux.cameras.transformed(&photo.transform), &truth).unwrap();
    assert!(
        sil_err.max_angle() < before.max_angle(),
        "{before:?} -> {sil_err:?}"
    );
    assert!(photo.final_loss <= photo.initial_loss);
    assert!(
        photo_err.max_angle() <= sil_err.max_angle(),
        "{sil_err:?} -> {photo_err:?}"
    );
    assert!(photo_err.max_angle() < 0.1, "{photo_err:?}");
    let accepted = photo.trace.accepted_losses();
    assert!(accepted.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn constant_color_model_stalls_photometric_stage() {
    let ds = fixture();
    let aux = &ds.poses[1];
    let mut flat = ds.main_model.clone();
    // Splats share the backdrop color, so every pose renders the same image.
    for s in &mut flat.splats {
        s.color = [0.0; 3];
    }
    let images = aux
        .images
        .keys()
        .map(|id| (id.clone(), posefuse::RgbImage::filled(64, 64, [0.0; 3])))
        .collect();
    let init = perturbed(&ds, 0.5, 0.005);
    let cfg = RefineConfig {
        max_iters: 20,
        ..Default::default()
    };
    let out = refine_photometric(&aux.cameras, &flat, &images, &aux.masks, &init, &cfg).unwrap();
    assert!(out.stalled);
    assert_eq!(out.transform, init);
}
