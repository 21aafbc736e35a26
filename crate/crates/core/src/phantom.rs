//! Synthetic ultrasound-like phantoms with exact ground-truth masks and
//! parameterized device-shift perturbations.
//!
//! Each phantom shows a dark (hypoechoic) cartilage-like arc bounded by two
//! bright interface curves over multiplicative speckle with depth-dependent
//! attenuation. Speckle is low-pass-filtered exponential noise, which has
//! magnitude statistics close enough to ultrasound speckle to exercise the
//! phase features; wave simulation is out of scope.
//!
//! Generation is a pure function of the config: every sample draws from its
//! own counter-derived RNG substream.

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::pgm::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Imaging depth in mm; pixel spacing is depth / image height.
pub const IMAGING_DEPTH_MM: f64 = 40.0;

#[derive(Debug, Clone)]
pub struct ShiftRanges {
    pub gain_db: (f64, f64),
    pub contrast_gamma: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub speckle_scale: (f64, f64),
    pub tilt_degrees: (f64, f64),
}

impl Default for ShiftRanges {
    fn default() -> Self {
        ShiftRanges {
            gain_db: (-8.0, 8.0),
            contrast_gamma: (0.6, 1.6),
            blur_sigma: (0.2, 0.8),
            speckle_scale: (0.1, 0.3),
            tilt_degrees: (-5.0, 5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    /// Cartilage band thickness range in pixels.
    pub thickness_px: (f64, f64),
    /// Band center depth as a fraction of image height.
    pub center_depth: (f64, f64),
    /// Quadratic arc curvature in 1/px.
    pub curvature: (f64, f64),
    /// Hypoechoic band interior level relative to the 0.45 background.
    pub band_level: (f64, f64),
    /// Peak brightness of the echogenic interface curves.
    pub ridge_amp: (f64, f64),
    /// Box-blur radius of the speckle grain.
    pub speckle_grain: usize,
    /// Multiplicative speckle mix range in [0, 1], drawn per sample.
    pub speckle_strength: (f64, f64),
    pub shift: ShiftRanges,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            count: 1,
            image_size: 256,
            thickness_px: (6.0, 18.0),
            center_depth: (0.35, 0.6),
            curvature: (0.0003, 0.0025),
            band_level: (0.08, 0.28),
            ridge_amp: (0.5, 1.0),
            speckle_grain: 2,
            speckle_strength: (0.35, 0.7),
            shift: ShiftRanges::default(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("phantom count must be >= 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidArgument("image size must be >= 32".into()));
        }
        if !(self.thickness_px.0 > 0.0 && self.thickness_px.1 >= self.thickness_px.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid thickness range {:?}",
                self.thickness_px
            )));
        }
        for (name, v) in [
            ("thickness", self.thickness_px),
            ("center_depth", self.center_depth),
            ("curvature", self.curvature),
        ] {
            if !(v.0.is_finite() && v.1.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite {name} range")));
            }
        }
        Ok(())
    }

    pub fn pixel_spacing(&self) -> f64 {
        IMAGING_DEPTH_MM / self.image_size as f64
    }
}

/// One concrete device-shift draw.
#[derive(Debug, Clone)]
pub struct DeviceShift {
    pub gain_db: f64,
    pub contrast_gamma: f64,
    pub blur_sigma: f64,
    pub speckle_scale: f64,
    pub tilt_degrees: f64,
    pub speckle_seed: u64,
}

impl DeviceShift {
    pub fn none() -> Self {
        DeviceShift {
            gain_db: 0.0,
            contrast_gamma: 1.0,
            blur_sigma: 0.0,
            speckle_scale: 0.0,
            tilt_degrees: 0.0,
            speckle_seed: 0,
        }
    }

    pub fn sample(ranges: &ShiftRanges, rng: &mut ChaCha12Rng) -> Self {
        let u = |rng: &mut ChaCha12Rng, (lo, hi): (f64, f64)| lo + rng.random::<f64>() * (hi - lo);
        DeviceShift {
            gain_db: u(rng, ranges.gain_db),
            contrast_gamma: u(rng, ranges.contrast_gamma),
            blur_sigma: u(rng, ranges.blur_sigma),
            speckle_scale: u(rng, ranges.speckle_scale),
            tilt_degrees: u(rng, ranges.tilt_degrees),
            speckle_seed: rng.random::<u64>(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: GrayImage,
    pub mask: Vec<bool>,
    pub pixel_spacing: f64,
}

impl Phantom {
    pub fn gt_mask(&self) -> BinaryMask {
        BinaryMask::new(
            self.image.h,
            self.image.w,
            self.mask.clone(),
            self.pixel_spacing,
        )
        .expect("phantom invariants")
    }
}

/// Low-pass-filtered unit-mean exponential noise field.
fn speckle_field(s: usize, grain: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut field: Vec<f64> = (0..s * s)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    if grain > 0 {
        field = box_blur(&field, s, s, grain);
        field = box_blur(&field, s, s, grain);
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    for v in &mut field {
        *v /= mean;
    }
    field
}

fn box_blur(img: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    let k = (2 * radius + 1) as f64;
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for d in -(radius as isize)..=(radius as isize) {
                let cc = (c as isize + d).clamp(0, w as isize - 1) as usize;
                acc += img[r * w + cc];
            }
            tmp[r * w + c] = acc / k;
        }
    }
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for d in -(radius as isize)..=(radius as isize) {
                let rr = (r as isize + d).clamp(0, h as isize - 1) as usize;
                acc += tmp[rr * w + c];
            }
            out[r * w + c] = acc / k;
        }
    }
    out
}

struct BandGeometry {
    top: Vec<f64>,
    thickness: f64,
    band_level: f64,
    ridge_top: f64,
    ridge_bottom: f64,
    speckle_mix: f64,
}

fn draw_geometry(cfg: &PhantomConfig, rng: &mut ChaCha12Rng) -> BandGeometry {
    let s = cfg.image_size as f64;
    let u = |rng: &mut ChaCha12Rng, (lo, hi): (f64, f64)| lo + rng.random::<f64>() * (hi - lo);
    let depth = u(rng, cfg.center_depth) * s;
    let curv = u(rng, cfg.curvature);
    let thickness = u(rng, cfg.thickness_px);
    let cx = s * (0.5 + 0.2 * (rng.random::<f64>() - 0.5));
    let band_level = u(rng, cfg.band_level);
    let ridge_top = u(rng, cfg.ridge_amp);
    let ridge_bottom = u(rng, cfg.ridge_amp).max(ridge_top * 0.8);
    let speckle_mix = u(rng, cfg.speckle_strength);
    let top = (0..cfg.image_size)
        .map(|x| depth + curv * (x as f64 - cx).powi(2))
        .collect();
    BandGeometry {
        top,
        thickness,
        band_level,
        ridge_top,
        ridge_bottom,
        speckle_mix,
    }
}

fn geometry_fits(geo: &BandGeometry, size: usize) -> bool {
    let margin = 6.0;
    geo.top
        .iter()
        .all(|&t| t > margin && t + geo.thickness < size as f64 - margin)
}

fn render(cfg: &PhantomConfig, geo: &BandGeometry, rng: &mut ChaCha12Rng) -> (Vec<u8>, Vec<bool>) {
    let s = cfg.image_size;
    let mut mask = vec![false; s * s];
    let mut base = vec![0.0f64; s * s];
    let ridge_sigma = 1.6f64;
    for x in 0..s {
        let top = geo.top[x];
        let bottom = top + geo.thickness;
        for y in 0..s {
            let yf = y as f64;
            let in_band = yf >= top && yf < bottom;
            if in_band {
                mask[y * s + x] = true;
            }
            let mut level = if in_band { geo.band_level } else { 0.45 };
            // bright interface curves above and below the band
            let d_top = (yf - (top - 1.0)) / ridge_sigma;
            let d_bot = (yf - (bottom + 1.0)) / ridge_sigma;
            level += geo.ridge_top * (-0.5 * d_top * d_top).exp();
            level += geo.ridge_bottom * (-0.5 * d_bot * d_bot).exp();
            // depth attenuation
            level *= (-0.7 * yf / s as f64).exp();
            base[y * s + x] = level;
        }
    }
    let speckle = speckle_field(s, cfg.speckle_grain, rng);
    let sv = geo.speckle_mix;
    let pixels = base
        .iter()
        .zip(&speckle)
        .map(|(&b, &n)| {
            let v = b * (1.0 - sv + sv * n) * 190.0;
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    (pixels, mask)
}

/// Generate `cfg.count` phantoms; deterministic given the seed. Degenerate
/// geometry draws (band outside the frame) retry on the next RNG substream.
pub fn generate(cfg: &PhantomConfig) -> Result<Vec<Phantom>> {
    cfg.validate()?;
    let spacing = cfg.pixel_spacing();
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut geo = None;
        for attempt in 0..64u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            rng.set_stream((attempt << 32) | i as u64);
            let candidate = draw_geometry(cfg, &mut rng);
            if geometry_fits(&candidate, cfg.image_size) {
                let (pixels, mask) = render(cfg, &candidate, &mut rng);
                out.push(Phantom {
                    image: GrayImage::new(cfg.image_size, cfg.image_size, pixels)?,
                    mask,
                    pixel_spacing: spacing,
                });
                geo = Some(());
                break;
            }
        }
        if geo.is_none() {
            return Err(Error::Numeric(format!(
                "phantom {i}: no in-frame geometry after 64 attempts; check config ranges"
            )));
        }
    }
    Ok(out)
}

/// Intensity-only device shift: gain (dB), gamma contrast, Gaussian blur, and
/// speckle re-noising. The segmentation mask is untouched by construction.
pub fn perturb(image: &GrayImage, shift: &DeviceShift) -> GrayImage {
    let (h, w) = (image.h, image.w);
    let mut v: Vec<f64> = image.pixels.iter().map(|&p| p as f64).collect();
    let gain = 10f64.powf(shift.gain_db / 20.0);
    for x in &mut v {
        *x *= gain;
    }
    if (shift.contrast_gamma - 1.0).abs() > 1e-12 {
        for x in &mut v {
            *x = 255.0 * (x.max(0.0) / 255.0).powf(shift.contrast_gamma);
        }
    }
    if shift.blur_sigma > 1e-3 {
        v = gaussian_blur(&v, h, w, shift.blur_sigma);
    }
    if shift.speckle_scale > 1e-12 {
        let mut rng = ChaCha12Rng::seed_from_u64(shift.speckle_seed);
        let field = speckle_field(w.max(h), 1, &mut rng);
        for (i, x) in v.iter_mut().enumerate() {
            let (r, c) = (i / w, i % w);
            let n = field[r * w.max(h) + c];
            *x *= 1.0 - shift.speckle_scale + shift.speckle_scale * n;
        }
    }
    let pixels = v
        .iter()
        .map(|&x| x.round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage { h, w, pixels }
}

fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / ksum).collect();
    let mut tmp = vec![0.0; h * w];
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let cc = (c as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * img[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let rr = (r as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Rotate an image and its mask together (probe-tilt emulation): bilinear
/// with zero padding for the image, nearest-neighbor for the mask.
pub fn tilt_pair(image: &GrayImage, mask: &[bool], degrees: f64) -> (GrayImage, Vec<bool>) {
    let (h, w) = (image.h, image.w);
    let rad = degrees.to_radians();
    let (sin, cos) = (-rad).sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0u8; h * w];
    let mut out_mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let y = r as f64 - cy;
            let x = c as f64 - cx;
            let sx = cos * x - sin * y + cx;
            let sy = sin * x + cos * y + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            let mut acc = 0.0;
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let xi = x0 + dx;
                    let yi = y0 + dy;
                    if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
                        acc += wy * wx * image.pixels[yi as usize * w + xi as usize] as f64;
                    }
                }
            }
            out[r * w + c] = acc.round().clamp(0.0, 255.0) as u8;
            let nx = sx.round();
            let ny = sy.round();
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                out_mask[r * w + c] = mask[ny as usize * w + nx as usize];
            }
        }
    }
    (GrayImage { h, w, pixels: out }, out_mask)
}

/// Shifted-domain dataset: clean phantoms with a per-sample device shift,
/// including the paired tilt applied to image and mask together.
pub fn generate_shifted(cfg: &PhantomConfig) -> Result<Vec<Phantom>> {
    let clean = generate(cfg)?;
    let mut out = Vec::with_capacity(clean.len());
    for (i, p) in clean.into_iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5141F7);
        rng.set_stream(i as u64);
        let shift = DeviceShift::sample(&cfg.shift, &mut rng);
        let (tilted, tilted_mask) = tilt_pair(&p.image, &p.mask, shift.tilt_degrees);
        let image = perturb(&tilted, &shift);
        out.push(Phantom {
            image,
            mask: tilted_mask,
            pixel_spacing: p.pixel_spacing,
        });
    }
    Ok(out)
}
