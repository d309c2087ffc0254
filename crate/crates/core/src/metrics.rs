//! Registration error and image quality metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{angle_between_deg, PoseSet, Vec3};
use crate::render::RgbImage;

pub const PSNR_CAP: f64 = 99.0;
/// Fraction of views kept for training: 131 of every 150.
pub const DEFAULT_TRAIN_RATIO: f64 = 131.0 / 150.0;

/// Mean per-axis angular gaps (degrees) and mean center error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegistrationError {
    pub dtheta_x: f64,
    pub dtheta_y: f64,
    pub dtheta_z: f64,
    pub dp: f64,
}

impl RegistrationError {
    pub fn max_angle(&self) -> f64 {
        self.dtheta_x.max(self.dtheta_y).max(self.dtheta_z)
    }

    pub fn mean_angle(&self) -> f64 {
        (self.dtheta_x + self.dtheta_y + self.dtheta_z) / 3.0
    }
}

/// Compares cameras by id. Both sets must hold exactly the same ids.
pub fn registration_error(est: &PoseSet, gt: &PoseSet) -> Result<RegistrationError> {
    if est.len() != gt.len() {
        return Err(Error::IdMismatch(format!(
            "{} estimated cameras vs {} ground-truth cameras",
            est.len(),
            gt.len()
        )));
    }
    let mut acc = RegistrationError::default();
    for e in est {
        let g = gt
            .get(&e.id)
            .ok_or_else(|| Error::IdMismatch(format!("'{}' missing from ground truth", e.id)))?;
        acc.dtheta_x += angle_between_deg(&(e.rotation * Vec3::x()), &(g.rotation * Vec3::x()));
        acc.dtheta_y += angle_between_deg(&(e.rotation * Vec3::y()), &(g.rotation * Vec3::y()));
        acc.dtheta_z += angle_between_deg(&(e.rotation * Vec3::z()), &(g.rotation * Vec3::z()));
        acc.dp += (e.center - g.center).norm();
    }
    let n = est.len() as f64;
    Ok(RegistrationError {
        dtheta_x: acc.dtheta_x / n,
        dtheta_y: acc.dtheta_y / n,
        dtheta_z: acc.dtheta_z / n,
        dp: acc.dp / n,
    })
}

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.pixels.len()) as f64)
}

/// Peak signal-to-noise ratio for values in [0, 1], capped at 99 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable filtering over valid positions only.
fn filter_valid(img: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW)
                .map(|k| w[k] * img[y * width + x + k])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|k| w[k] * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels
        .iter()
        .map(|p| (p[0] + p[1] + p[2]) / 3.0)
        .collect()
}

/// Structural similarity of the channel-mean luminance.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    if (a.width as usize) < SSIM_WINDOW || (a.height as usize) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall(a.width, a.height));
    }
    let (w, h) = (a.width as usize, a.height as usize);
    let win = gaussian_window();
    let la = luminance(a);
    let lb = luminance(b);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&la, w, h, &win);
    let mu_b = filter_valid(&lb, w, h, &win);
    let aa = filter_valid(&prod(&la, &la), w, h, &win);
    let bb = filter_valid(&prod(&lb, &lb), w, h, &win);
    let ab = filter_valid(&prod(&la, &lb), w, h, &win);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(sum / mu_a.len() as f64)
}

/// Seeded per-set train/test split. `ratio` is the training fraction.
pub fn holdout_split(poses: &PoseSet, ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "train ratio {ratio} outside (0, 1)"
        )));
    }
    let mut ids: Vec<String> = poses.ids().map(str::to_owned).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((ids.len() as f64) * ratio).round() as usize;
    let test = ids.split_off(n_train.min(ids.len()));
    ids.sort();
    let mut test = test;
    test.sort();
    Ok((ids, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, CameraPose, Sim3};
    use nalgebra::UnitQuaternion;
    use rand::Rng;

    fn ring(n: usize) -> PoseSet {
        let intr = CameraIntrinsics::centered(100.0, 64, 64);
        let poses = (0..n)
            .map(|i| {
                let a = i as f64 * 0.7;
                let c = Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 1.0);
                CameraPose::look_at(format!("c{i:03}"), c, Vec3::zeros(), Vec3::z(), intr)
            })
            .collect();
        PoseSet::new("ring", poses).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_error() {
        let s = ring(5);
        let e = registration_error(&s, &s).unwrap();
        assert_eq!(e, RegistrationError::default());
    }

    #[test]
    fn world_z_rotation_moves_x_and_y_axes_only() {
        let intr = CameraIntrinsics::centered(100.0, 64, 64);
        let cam = CameraPose::new(
            "a",
            UnitQuaternion::identity(),
            Vec3::new(1.0, 0.0, 0.0),
            intr,
        );
        let gt = PoseSet::new("gt", vec![cam]).unwrap();
        let t = Sim3::rigid(
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), 10f64.to_radians()),
            Vec3::zeros(),
        );
        let est = gt.transformed(&t);
        let e = registration_error(&est, &gt).unwrap();
        assert!((e.dtheta_x - 10.0).abs() < 1e-9);
        assert!((e.dtheta_y - 10.0).abs() < 1e-9);
        assert!(e.dtheta_z.abs() < 1e-9);
        // chord of a 10 degree arc at unit radius
        assert!((e.dp - 2.0 * (5f64.to_radians()).sin()).abs() < 1e-12);
    }

    #[test]
    fn id_mismatch_is_reported() {
        let a = ring(3);
        let b = ring(4);
        assert!(matches!(
            registration_error(&a, &b),
            Err(Error::IdMismatch(_))
        ));
        let c = ring(3).filter("x", |id| id != "c001").unwrap();
        let d = PoseSet::new("d", {
            let mut v = c.poses().to_vec();
            let mut extra = a.get("c001").unwrap().clone();
            extra.id = "zz".into();
            v.push(extra);
            v
        })
        .unwrap();
        assert!(matches!(
            registration_error(&d, &a),
            Err(Error::IdMismatch(_))
        ));
    }

    #[test]
    fn error_is_invariant_under_shared_rigid_motion() {
        let gt = ring(6);
        let est = gt.transformed(&Sim3::new(
            1.01,
            UnitQuaternion::from_euler_angles(0.01, 0.0, 0.02),
            Vec3::new(0.01, 0.0, 0.0),
        ));
        let m = Sim3::rigid(
            UnitQuaternion::from_euler_angles(0.5, -0.3, 1.2),
            Vec3::new(2.0, 1.0, -1.0),
        );
        let e0 = registration_error(&est, &gt).unwrap();
        let e1 = registration_error(&est.transformed(&m), &gt.transformed(&m)).unwrap();
        assert!((e0.dtheta_x - e1.dtheta_x).abs() < 1e-9);
        assert!((e0.dtheta_y - e1.dtheta_y).abs() < 1e-9);
        assert!((e0.dtheta_z - e1.dtheta_z).abs() < 1e-9);
        assert!((e0.dp - e1.dp).abs() < 1e-9);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RgbImage::filled(16, 16, [0.0; 3]);
        let b = RgbImage::filled(16, 16, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        let c = RgbImage::filled(16, 16, [0.1; 3]);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&b, &a).unwrap(), psnr(&a, &b).unwrap());
    }

    #[test]
    fn dimension_mismatch() {
        let a = RgbImage::filled(16, 16, [0.0; 3]);
        let b = RgbImage::filled(16, 15, [0.0; 3]);
        assert!(matches!(psnr(&a, &b), Err(Error::DimensionMismatch(..))));
        assert!(matches!(ssim(&a, &b), Err(Error::DimensionMismatch(..))));
    }

    #[test]
    fn ssim_identity_and_constant_fields() {
        let a = RgbImage::filled(20, 20, [0.2; 3]);
        let b = RgbImage::filled(20, 20, [0.7; 3]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let expected = (2.0 * 0.2 * 0.7 + SSIM_C1) / (0.04 + 0.49 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = RgbImage::filled(10, 20, [0.2; 3]);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall(10, 20))));
    }

    #[test]
    fn ssim_of_independent_noise_is_low() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut noise = || {
                let mut img = RgbImage::filled(64, 64, [0.0; 3]);
                for p in &mut img.pixels {
                    *p = [rng.random(), rng.random(), rng.random()];
                }
                img
            };
            let a = noise();
            let b = noise();
            let s = ssim(&a, &b).unwrap();
            assert!(s < 0.2, "seed {seed}: {s}");
            assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn split_of_150_views() {
        let s = ring(150);
        let (train, test) = holdout_split(&s, DEFAULT_TRAIN_RATIO, 4).unwrap();
        assert_eq!((train.len(), test.len()), (131, 19));
        assert_eq!(
            holdout_split(&s, DEFAULT_TRAIN_RATIO, 4).unwrap(),
            (train.clone(), test.clone())
        );
        assert!(test.iter().all(|t| !train.contains(t)));
        assert!(holdout_split(&s, 1.0, 4).is_err());
        assert!(holdout_split(&s, 0.0, 4).is_err());
    }
}
