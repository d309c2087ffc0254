//! CPU rasterizer for isotropic Gaussian splats.
//!
//! Produces soft occupancy (accumulated opacity), thresholded silhouettes and
//! back-to-front alpha-composited RGB renders, plus the overlap and loss
//! functions the registration stages score with.

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Sim3, Vec3};

/// Splats closer to the camera plane than this are skipped.
pub const Z_NEAR: f64 = 1e-3;
/// Footprint cutoff in standard deviations.
pub const KAPPA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub position: Vec3,
    /// Isotropic standard deviation in world units.
    pub sigma: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl Splat {
    pub fn is_valid(&self) -> bool {
        self.sigma > 0.0
            && self.opacity > 0.0
            && self.opacity <= 1.0
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && self.position.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatCloud {
    pub splats: Vec<Splat>,
    pub frame: String,
}

impl SplatCloud {
    pub fn new(splats: Vec<Splat>, frame: impl Into<String>) -> Self {
        Self {
            splats,
            frame: frame.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Moves every splat by `t`; radii scale with it.
    pub fn transformed(&self, t: &Sim3) -> SplatCloud {
        SplatCloud {
            splats: self
                .splats
                .iter()
                .map(|s| Splat {
                    position: t.transform_point(&s.position),
                    sigma: s.sigma * t.scale,
                    ..*s
                })
                .collect(),
            frame: self.frame.clone(),
        }
    }

    pub fn relabeled(mut self, frame: impl Into<String>) -> SplatCloud {
        self.frame = frame.into();
        self
    }

    pub fn centroid(&self) -> Vec3 {
        if self.splats.is_empty() {
            return Vec3::zeros();
        }
        self.splats.iter().map(|s| s.position).sum::<Vec3>() / self.splats.len() as f64
    }
}

/// Accumulated opacity before thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftOccupancy {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl SoftOccupancy {
    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; (width * height) as usize],
        }
    }
}

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilhouetteMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl SilhouetteMask {
    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resampling to another raster size.
    pub fn resized(&self, width: u32, height: u32) -> SilhouetteMask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        SilhouetteMask::from_fn(width, height, |x, y| {
            let sx =
                (((x as f64 + 0.5) * self.width as f64 / width as f64) as u32).min(self.width - 1);
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as u32)
                .min(self.height - 1);
            self.bits[(sy * self.width + sx) as usize]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; (width * height) as usize],
        }
    }

    /// Rounds every channel to the 16-bit grid used on disk.
    pub fn quantized(mut self) -> Self {
        for p in &mut self.pixels {
            *p = p.map(|c| (c.clamp(0.0, 1.0) * 65535.0).round() / 65535.0);
        }
        self
    }
}

/// A rendered raster and how many splats landed in the viewport.
/// Zero visible splats is the empty-render condition: the raster is blank
/// and callers decide whether that matters.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered<T> {
    pub image: T,
    pub visible: usize,
}

impl<T> Rendered<T> {
    pub fn is_empty_render(&self) -> bool {
        self.visible == 0
    }
}

/// Screen-space footprint of one splat.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Footprint {
    pub index: usize,
    /// Camera-space position.
    pub cam: Vec3,
    pub u: f64,
    pub v: f64,
    /// Screen-space standard deviation in pixels.
    pub s: f64,
    /// Cutoff radius in pixels.
    pub r: f64,
    pub x0: u32,
    pub x1: u32,
    pub y0: u32,
    pub y1: u32,
}

pub(crate) fn project(splat: &Splat, index: usize, cam: &CameraPose) -> Option<Footprint> {
    let k = &cam.intrinsics;
    let p = cam.to_camera(&splat.position);
    if p.z <= Z_NEAR {
        return None;
    }
    let u = k.fx * p.x / p.z + k.cx;
    let v = k.fy * p.y / p.z + k.cy;
    let s = k.fx * splat.sigma / p.z;
    let r = KAPPA * s;
    let (w, h) = (k.width as f64, k.height as f64);
    if u + r < 0.0 || v + r < 0.0 || u - r > w - 1.0 || v - r > h - 1.0 {
        return None;
    }
    let x0 = (u - r).ceil().max(0.0) as u32;
    let x1 = (u + r).floor().min(w - 1.0) as i64;
    let y0 = (v - r).ceil().max(0.0) as u32;
    let y1 = (v + r).floor().min(h - 1.0) as i64;
    if x1 < x0 as i64 || y1 < y0 as i64 {
        return None;
    }
    Some(Footprint {
        index,
        cam: p,
        u,
        v,
        s,
        r,
        x0,
        x1: x1 as u32,
        y0,
        y1: y1 as u32,
    })
}

/// Fills `out[k] = exp(inv * (d0 + k)^2)` with three exponentials and a
/// multiplicative recurrence.
#[inline]
fn gaussian_run(d0: f64, inv: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    let mut g = (inv * d0 * d0).exp();
    out[0] = g;
    if out.len() == 1 {
        return;
    }
    let mut ratio = (inv * (2.0 * d0 + 1.0)).exp();
    let step = (2.0 * inv).exp();
    for v in out.iter_mut().skip(1) {
        g *= ratio;
        ratio *= step;
        *v = g;
    }
}

/// Visits every in-cutoff pixel of a footprint with its Gaussian weight.
#[inline]
pub(crate) fn for_each_pixel(fp: &Footprint, mut f: impl FnMut(u32, u32, f64)) {
    const STACK: usize = 64;
    let inv = -0.5 / (fp.s * fp.s);
    let r2 = fp.r * fp.r;
    let nx = (fp.x1 - fp.x0 + 1) as usize;
    let ny = (fp.y1 - fp.y0 + 1) as usize;
    let mut stack = [0.0f64; 2 * STACK];
    let mut heap = Vec::new();
    let buf: &mut [f64] = if nx <= STACK && ny <= STACK {
        &mut stack[..nx + ny]
    } else {
        heap.resize(nx + ny, 0.0);
        &mut heap
    };
    let (gx, gy) = buf.split_at_mut(nx);
    gaussian_run(fp.x0 as f64 - fp.u, inv, gx);
    gaussian_run(fp.y0 as f64 - fp.v, inv, gy);
    for (j, y) in (fp.y0..=fp.y1).enumerate() {
        let dy = y as f64 - fp.v;
        let dy2 = dy * dy;
        if dy2 > r2 {
            continue;
        }
        let wy = gy[j];
        for (i, x) in (fp.x0..=fp.x1).enumerate() {
            let dx = x as f64 - fp.u;
            if dx * dx + dy2 <= r2 {
                f(x, y, gx[i] * wy);
            }
        }
    }
}

fn check_inputs(cloud: &SplatCloud, cam: &CameraPose) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    cam.intrinsics.validate()
}

pub(crate) fn footprints(cloud: &SplatCloud, cam: &CameraPose) -> Vec<Footprint> {
    cloud
        .splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| project(s, i, cam))
        .collect()
}

/// Per-pixel `1 - prod(1 - opacity * g)` over splats covering the pixel.
pub fn render_occupancy(cloud: &SplatCloud, cam: &CameraPose) -> Result<Rendered<SoftOccupancy>> {
    check_inputs(cloud, cam)?;
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let mut trans = vec![1.0f64; (w * h) as usize];
    let fps = footprints(cloud, cam);
    for fp in &fps {
        let a = cloud.splats[fp.index].opacity;
        for_each_pixel(fp, |x, y, g| {
            trans[(y * w + x) as usize] *= 1.0 - a * g;
        });
    }
    let values = trans
        .into_iter()
        .map(|t| (1.0 - t).clamp(0.0, 1.0))
        .collect();
    Ok(Rendered {
        image: SoftOccupancy {
            width: w,
            height: h,
            values,
        },
        visible: fps.len(),
    })
}

/// Foreground iff `value >= tau`.
pub fn threshold_mask(occ: &SoftOccupancy, tau: f64) -> SilhouetteMask {
    SilhouetteMask {
        width: occ.width,
        height: occ.height,
        bits: occ.values.iter().map(|&v| v >= tau).collect(),
    }
}

/// Silhouette at the default threshold of 0.5.
pub fn render_mask(cloud: &SplatCloud, cam: &CameraPose) -> Result<Rendered<SilhouetteMask>> {
    let occ = render_occupancy(cloud, cam)?;
    Ok(Rendered {
        image: threshold_mask(&occ.image, 0.5),
        visible: occ.visible,
    })
}

/// Splat indices sorted far to near; equal depths keep index order.
pub(crate) fn depth_order(fps: &mut [Footprint]) {
    fps.sort_by(|a, b| b.cam.z.total_cmp(&a.cam.z));
}

/// Painter's-algorithm render over a black background.
pub fn render_rgb(cloud: &SplatCloud, cam: &CameraPose) -> Result<Rendered<RgbImage>> {
    check_inputs(cloud, cam)?;
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let mut pixels = vec![[0.0f64; 3]; (w * h) as usize];
    let mut fps = footprints(cloud, cam);
    depth_order(&mut fps);
    for fp in &fps {
        let s = &cloud.splats[fp.index];
        for_each_pixel(fp, |x, y, g| {
            let a = s.opacity * g;
            let px = &mut pixels[(y * w + x) as usize];
            for (p, c) in px.iter_mut().zip(s.color) {
                *p = a * c + (1.0 - a) * *p;
            }
        });
    }
    for px in &mut pixels {
        for c in px.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
    }
    Ok(Rendered {
        image: RgbImage {
            width: w,
            height: h,
            pixels,
        },
        visible: fps.len(),
    })
}

fn same_dims(a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Intersection over union; two empty masks agree perfectly.
pub fn mask_iou(a: &SilhouetteMask, b: &SilhouetteMask) -> Result<f64> {
    same_dims((a.width, a.height), (b.width, b.height))?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean squared difference between occupancy and a binary reference.
pub fn soft_silhouette_loss(occ: &SoftOccupancy, reference: &SilhouetteMask) -> Result<f64> {
    same_dims((occ.width, occ.height), (reference.width, reference.height))?;
    let sum: f64 = occ
        .values
        .iter()
        .zip(&reference.bits)
        .map(|(&v, &b)| {
            let d = v - if b { 1.0 } else { 0.0 };
            d * d
        })
        .sum();
    Ok(sum / occ.values.len() as f64)
}

/// Loss restricted to a reference foreground; `pixels == 0` flags an empty
/// mask, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub pixels: usize,
}

impl MaskedLoss {
    pub fn is_empty_mask(&self) -> bool {
        self.pixels == 0
    }
}

/// Mean absolute per-channel difference over the reference foreground.
pub fn photometric_loss(
    img: &RgbImage,
    reference: &RgbImage,
    ref_mask: &SilhouetteMask,
) -> Result<MaskedLoss> {
    same_dims((img.width, img.height), (reference.width, reference.height))?;
    same_dims((img.width, img.height), (ref_mask.width, ref_mask.height))?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &m) in img.pixels.iter().zip(&reference.pixels).zip(&ref_mask.bits) {
        if m {
            sum += (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
            n += 1;
        }
    }
    Ok(MaskedLoss {
        value: if n == 0 { 0.0 } else { sum / (3 * n) as f64 },
        pixels: n,
    })
}
