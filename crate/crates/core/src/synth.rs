//! Synthetic identity faces, procedural occluders and labeled manifests.
//!
//! Every record is generated from its own RNG stream keyed by
//! `(global_seed, record index)`, so the output never depends on
//! generation order or worker count.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::patterns::{enumerate_patterns, PatternMatcher, PixelBox};

pub const MANIFEST_VERSION: u32 = 1;

/// Channel-major image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to_u8 = |v: f32| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
        let mut rgb = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px: [u8; 3] =
                    std::array::from_fn(|c| to_u8(self.at(c.min(self.channels - 1), y, x)));
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        rgb.save(path)?;
        Ok(())
    }

    /// Inverse of [`Image::save_png`] up to 8-bit quantization.
    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        let dynimg = image::open(path)?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let rgb = dynimg.to_rgb8();
        let mut img = Image::filled(w, h, channels, 0.0);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..channels {
                let v = px.0[c.min(2)] as f32 / 127.5 - 1.0;
                img.set(c, y as usize, x as usize, v);
            }
        }
        Ok(img)
    }
}

/// Per-sample appearance perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub max_shift: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl Jitter {
    pub const DEFAULT: Jitter = Jitter {
        max_shift: 3.0,
        brightness: 0.1,
        noise_sigma: 0.02,
    };
    pub const NONE: Jitter = Jitter {
        max_shift: 0.0,
        brightness: 0.0,
        noise_sigma: 0.0,
    };
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    // 1 inside (x < edge - 0.5), 0 outside, linear ramp one pixel wide.
    (edge - x + 0.5).clamp(0.0, 1.0)
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    amp: [f64; 3],
}

/// Identity-keyed face layout in normalized coordinates.
#[derive(Clone, Debug)]
struct FaceParams {
    bg: [f64; 3],
    bg_tilt: f64,
    face_c: (f64, f64),
    face_r: (f64, f64),
    skin: [f64; 3],
    hair: [f64; 3],
    hairline: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_r: (f64, f64),
    iris: [f64; 3],
    brow_gap: f64,
    brow_thick: f64,
    brow_tilt: f64,
    nose_len: f64,
    nose_w: f64,
    nose_shade: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_h: f64,
    lips: [f64; 3],
    blobs: Vec<Blob>,
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_amp: f64,
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

impl FaceParams {
    fn new(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed ^ 0x5eed_face_0000_0001);
        let tone = rng.random_range(-0.5..0.6);
        let skin = std::array::from_fn(|c| tone + [0.15, 0.0, -0.12][c] + rng.random_range(-0.12..0.12));
        let blobs = (0..rng.random_range(3..6))
            .map(|_| Blob {
                cx: rng.random_range(0.25..0.75),
                cy: rng.random_range(0.2..0.85),
                r: rng.random_range(0.04..0.12),
                amp: color(&mut rng, -0.5, 0.5),
            })
            .collect();
        Self {
            bg: color(&mut rng, -0.9, 0.9),
            bg_tilt: rng.random_range(-0.4..0.4),
            face_c: (rng.random_range(0.47..0.53), rng.random_range(0.5..0.56)),
            face_r: (rng.random_range(0.32..0.44), rng.random_range(0.38..0.47)),
            skin,
            hair: color(&mut rng, -1.0, 0.6),
            hairline: rng.random_range(0.12..0.3),
            eye_y: rng.random_range(0.36..0.44),
            eye_dx: rng.random_range(0.13..0.2),
            eye_r: (rng.random_range(0.05..0.09), rng.random_range(0.025..0.05)),
            iris: color(&mut rng, -1.0, 0.2),
            brow_gap: rng.random_range(0.05..0.09),
            brow_thick: rng.random_range(0.015..0.035),
            brow_tilt: rng.random_range(-0.25..0.25),
            nose_len: rng.random_range(0.12..0.22),
            nose_w: rng.random_range(0.03..0.07),
            nose_shade: rng.random_range(-0.4..0.2),
            mouth_y: rng.random_range(0.68..0.77),
            mouth_w: rng.random_range(0.1..0.2),
            mouth_h: rng.random_range(0.02..0.045),
            lips: color(&mut rng, -0.6, 0.8),
            blobs,
            stripe_freq: rng.random_range(3.0..9.0),
            stripe_angle: rng.random_range(0.0..std::f64::consts::PI),
            stripe_amp: rng.random_range(0.0..0.15),
        }
    }

    /// Color at normalized position `(u, v)`; `px` is one pixel in
    /// normalized width units, used for edge antialiasing.
    fn shade(&self, u: f64, v: f64, c: usize, px: (f64, f64)) -> f64 {
        let val = self.bg[c] + self.bg_tilt * (u - 0.5);
        // face ellipse
        let (fx, fy) = ((u - self.face_c.0) / self.face_r.0, (v - self.face_c.1) / self.face_r.1);
        let fd = (fx * fx + fy * fy).sqrt();
        let radius_px = (self.face_r.0 / px.0).min(self.face_r.1 / px.1);
        let face_cov = ((1.0 - fd) * radius_px + 0.5).clamp(0.0, 1.0);
        let mut skin = self.skin[c];
        let sd = self.stripe_angle.sin() * u + self.stripe_angle.cos() * v;
        skin += self.stripe_amp * (sd * self.stripe_freq * std::f64::consts::TAU).sin();
        for b in &self.blobs {
            let d2 = ((u - b.cx).powi(2) + (v - b.cy).powi(2)) / (b.r * b.r);
            skin += b.amp[c] * (-d2).exp();
        }
        // hair: top band of the face
        let hair_cov = smoothstep(self.hairline / px.1, v / px.1);
        skin = skin * (1.0 - hair_cov) + self.hair[c] * hair_cov;
        // eyes and brows
        for side in [-1.0, 1.0] {
            let ex = self.face_c.0 + side * self.eye_dx;
            let d = ((u - ex) / self.eye_r.0).powi(2) + ((v - self.eye_y) / self.eye_r.1).powi(2);
            let white = ((1.0 - d.sqrt()) * 6.0 + 0.5).clamp(0.0, 1.0);
            skin = skin * (1.0 - white) + 0.9 * white;
            let di = ((u - ex).powi(2) + (v - self.eye_y).powi(2)).sqrt() / (self.eye_r.1 * 0.9);
            let iris = ((1.0 - di) * 6.0 + 0.5).clamp(0.0, 1.0);
            skin = skin * (1.0 - iris) + self.iris[c] * iris;
            let by = self.eye_y - self.brow_gap + side * self.brow_tilt * (u - ex);
            let in_brow = (u - ex).abs() < self.eye_r.0 * 1.2;
            if in_brow {
                let cov = smoothstep(self.brow_thick / px.1, (v - by).abs() / px.1);
                skin = skin * (1.0 - cov) + self.hair[c] * cov;
            }
        }
        // nose
        let ny0 = self.eye_y + 0.05;
        if v > ny0 && v < ny0 + self.nose_len {
            let cov = smoothstep(self.nose_w / px.0, (u - self.face_c.0).abs() / px.0);
            skin += self.nose_shade * cov;
        }
        // mouth
        let md = ((u - self.face_c.0) / self.mouth_w).powi(2) + ((v - self.mouth_y) / self.mouth_h).powi(2);
        let mouth = ((1.0 - md.sqrt()) * 5.0 + 0.5).clamp(0.0, 1.0);
        skin = skin * (1.0 - mouth) + self.lips[c] * mouth;
        val * (1.0 - face_cov) + skin * face_cov
    }
}

/// Face image for one identity with per-sample jitter drawn from `rng`.
pub fn synth_identity_image(
    identity_seed: u64,
    width: usize,
    height: usize,
    channels: usize,
    jitter: &Jitter,
    rng: &mut ChaCha8Rng,
) -> Image {
    let params = FaceParams::new(identity_seed);
    let shift = |rng: &mut ChaCha8Rng| {
        if jitter.max_shift > 0.0 {
            rng.random_range(-jitter.max_shift..=jitter.max_shift).round()
        } else {
            0.0
        }
    };
    let dx = shift(rng);
    let dy = shift(rng);
    let bright = if jitter.brightness > 0.0 {
        rng.random_range(-jitter.brightness..=jitter.brightness)
    } else {
        0.0
    };
    let noise = (jitter.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, jitter.noise_sigma).expect("valid sigma"));
    let px = (1.0 / width as f64, 1.0 / height as f64);
    let mut img = Image::filled(width, height, channels, 0.0);
    for c in 0..channels {
        let cc = c % 3;
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 + 0.5 - dx) / width as f64;
                let v = (y as f64 + 0.5 - dy) / height as f64;
                let mut val = params.shade(u, v, cc, px) + bright;
                if let Some(n) = &noise {
                    val += n.sample(rng);
                }
                img.set(c, y, x, val.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    img
}

/// Procedural occluder families standing in for real occluder bitmaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OccluderFamily {
    Solid,
    Stripes,
    Checker,
    Blob,
    Ring,
    Gradient,
    Noise,
    Cross,
    Disk,
}

impl OccluderFamily {
    pub const ALL: [OccluderFamily; 9] = [
        OccluderFamily::Solid,
        OccluderFamily::Stripes,
        OccluderFamily::Checker,
        OccluderFamily::Blob,
        OccluderFamily::Ring,
        OccluderFamily::Gradient,
        OccluderFamily::Noise,
        OccluderFamily::Cross,
        OccluderFamily::Disk,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OccluderFamily::Solid => "solid",
            OccluderFamily::Stripes => "stripes",
            OccluderFamily::Checker => "checker",
            OccluderFamily::Blob => "blob",
            OccluderFamily::Ring => "ring",
            OccluderFamily::Gradient => "gradient",
            OccluderFamily::Noise => "noise",
            OccluderFamily::Cross => "cross",
            OccluderFamily::Disk => "disk",
        }
    }
}

impl fmt::Display for OccluderFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OccluderFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config("families", format!("unknown occluder family `{s}`")))
    }
}

/// An occluder texture at its base size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccluderSpec {
    pub family: OccluderFamily,
    pub base_w: usize,
    pub base_h: usize,
    pub texture_seed: u64,
}

impl OccluderSpec {
    pub fn new(family: OccluderFamily, base_w: usize, base_h: usize, texture_seed: u64) -> Result<Self> {
        if base_w < 4 || base_h < 4 {
            return Err(Error::invalid(format!(
                "occluder base size {base_w}x{base_h} below 4 px"
            )));
        }
        Ok(Self {
            family,
            base_w,
            base_h,
            texture_seed,
        })
    }

    /// Render at base size; channel-major `[channels][base_h][base_w]`.
    pub fn render(&self, channels: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(self.texture_seed);
        let a = color(&mut rng, -1.0, 1.0);
        let mut b = color(&mut rng, -1.0, 1.0);
        // keep the two tones apart so textured families stay textured
        if (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() < 0.6 {
            b = std::array::from_fn(|c| -a[c]);
        }
        let (w, h) = (self.base_w, self.base_h);
        let period = rng.random_range(2..=(w.min(h) / 2).max(2));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.15..0.4),
                    rng.random_range(0.3..1.0),
                )
            })
            .collect();
        let noise: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bar = rng.random_range(0.15..0.35);
        let mut img = Image::filled(w, h, channels, 0.0);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                // t in [0,1]: blend factor between the two tones
                let t = match self.family {
                    OccluderFamily::Solid => 0.0,
                    OccluderFamily::Stripes => {
                        let d = angle.cos() * x as f64 + angle.sin() * y as f64;
                        ((d / period as f64).floor().rem_euclid(2.0) == 1.0) as u8 as f64
                    }
                    OccluderFamily::Checker => (((x / period) + (y / period)) % 2) as f64,
                    OccluderFamily::Blob => blobs
                        .iter()
                        .map(|&(bx, by, r, amp)| {
                            amp * (-((u - bx).powi(2) + (v - by).powi(2)) / (r * r)).exp()
                        })
                        .sum::<f64>()
                        .min(1.0),
                    OccluderFamily::Ring => {
                        let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                        ((d * 2.0 * period as f64).floor().rem_euclid(2.0) == 1.0) as u8 as f64
                    }
                    OccluderFamily::Gradient => (angle.cos() * u + angle.sin() * v).rem_euclid(1.0),
                    OccluderFamily::Noise => 0.5 + 0.5 * noise[y * w + x],
                    OccluderFamily::Cross => {
                        ((u - 0.5).abs() < bar / 2.0 || (v - 0.5).abs() < bar / 2.0) as u8 as f64
                    }
                    OccluderFamily::Disk => {
                        (((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt() < 0.35) as u8 as f64
                    }
                };
                for c in 0..channels {
                    let cc = c % 3;
                    img.set(c, y, x, (a[cc] * (1.0 - t) + b[cc] * t) as f32);
                }
            }
        }
        img
    }

    /// Render and resample (nearest neighbour) to `w x h`.
    pub fn render_at(&self, w: usize, h: usize, channels: usize) -> Image {
        let base = self.render(channels);
        let mut out = Image::filled(w, h, channels, 0.0);
        for c in 0..channels {
            for y in 0..h {
                let sy = (y * base.height / h.max(1)).min(base.height - 1);
                for x in 0..w {
                    let sx = (x * base.width / w.max(1)).min(base.width - 1);
                    out.set(c, y, x, base.at(c, sy, sx));
                }
            }
        }
        out
    }

    pub fn scaled_size(&self, s: f64) -> (usize, usize) {
        (
            (s * self.base_w as f64).round() as usize,
            (s * self.base_h as f64).round() as usize,
        )
    }
}

fn paste(img: &mut Image, patch: &Image, left: isize, top: isize) -> PixelBox {
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let x0 = clip(left, img.width);
    let y0 = clip(top, img.height);
    let x1 = clip(left + patch.width as isize, img.width);
    let y1 = clip(top + patch.height as isize, img.height);
    if x1 <= x0 || y1 <= y0 {
        return PixelBox::EMPTY;
    }
    for c in 0..img.channels {
        for y in y0..y1 {
            for x in x0..x1 {
                let v = patch.at(c, (y as isize - top) as usize, (x as isize - left) as usize);
                img.set(c, y, x, v);
            }
        }
    }
    PixelBox::new(x0, y0, x1, y1)
}

/// Paste an occluder scaled by `s` centred on a random pixel of `img`,
/// clipped at the borders. Returns the composite and the clipped box.
pub fn apply_occlusion(
    img: &Image,
    occ: &OccluderSpec,
    s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, PixelBox)> {
    let cx = rng.random_range(0..img.width);
    let cy = rng.random_range(0..img.height);
    apply_occlusion_at(img, occ, s, cx, cy)
}

/// [`apply_occlusion`] with an explicit centre pixel.
pub fn apply_occlusion_at(
    img: &Image,
    occ: &OccluderSpec,
    s: f64,
    cx: usize,
    cy: usize,
) -> Result<(Image, PixelBox)> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("occluder scale {s} must be positive")));
    }
    let (w, h) = occ.scaled_size(s);
    if w > 4 * img.width || h > 4 * img.height {
        return Err(Error::invalid(format!(
            "scaled occluder {w}x{h} exceeds 4x the {}x{} image",
            img.width, img.height
        )));
    }
    let mut out = img.clone();
    if w == 0 || h == 0 {
        return Ok((out, PixelBox::EMPTY));
    }
    let patch = occ.render_at(w, h, img.channels);
    let left = cx as isize - (w / 2) as isize;
    let top = cy as isize - (h / 2) as isize;
    let b = paste(&mut out, &patch, left, top);
    Ok((out, b))
}

/// Fill a fixed box with the occluder texture.
pub fn occlude_box(img: &Image, occ: &OccluderSpec, b: &PixelBox) -> Image {
    let mut out = img.clone();
    if b.is_empty() {
        return out;
    }
    let patch = occ.render_at(b.width(), b.height(), img.channels);
    paste(&mut out, &patch, b.x0 as isize, b.y0 as isize);
    out
}

pub fn occluded_fraction(b: &PixelBox, w_img: usize, h_img: usize) -> f64 {
    b.area() as f64 / (w_img * h_img) as f64
}

/// How occluder scales are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum ScalePolicy {
    Fixed { s: f64 },
    /// Uniform over `start, start+step, ..., end`.
    Grid { start: f64, step: f64, end: f64 },
}

impl ScalePolicy {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            ScalePolicy::Fixed { s } => vec![s],
            ScalePolicy::Grid { start, step, end } => {
                let count = ((end - start) / step + 1e-9).floor() as usize + 1;
                (0..count).map(|i| start + i as f64 * step).collect()
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let v = self.values();
        v[rng.random_range(0..v.len())]
    }
}

impl FromStr for ScalePolicy {
    type Err = Error;

    /// `fixed:2.0` or `grid:1.0:0.5:5.0`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("scale", format!("cannot parse `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.trim().parse::<f64>().map_err(|_| bad());
        let policy = match parts.as_slice() {
            ["fixed", v] => ScalePolicy::Fixed { s: num(v)? },
            ["grid", a, b, c] => ScalePolicy::Grid {
                start: num(a)?,
                step: num(b)?,
                end: num(c)?,
            },
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl fmt::Display for ScalePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalePolicy::Fixed { s } => write!(f, "fixed:{s}"),
            ScalePolicy::Grid { start, step, end } => write!(f, "grid:{start}:{step}:{end}"),
        }
    }
}

impl ScalePolicy {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalePolicy::Fixed { s } => s > 0.0 && s.is_finite(),
            ScalePolicy::Grid { start, step, end } => start > 0.0 && step > 0.0 && end >= start,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("scale", "scales must be positive and ordered"))
        }
    }
}

/// Where occluders go.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Centre on a uniformly random pixel.
    Random,
    Upper,
    Lower,
    Left,
    Right,
    Eyes,
    Nose,
    Mouth,
    Full,
}

impl Placement {
    pub const REGIONS: [Placement; 8] = [
        Placement::Upper,
        Placement::Lower,
        Placement::Left,
        Placement::Right,
        Placement::Eyes,
        Placement::Nose,
        Placement::Mouth,
        Placement::Full,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Placement::Random => "random",
            Placement::Upper => "upper",
            Placement::Lower => "lower",
            Placement::Left => "left",
            Placement::Right => "right",
            Placement::Eyes => "eyes",
            Placement::Nose => "nose",
            Placement::Mouth => "mouth",
            Placement::Full => "full",
        }
    }

    /// Fixed box for region placements, in pixels.
    pub fn region_box(&self, w: usize, h: usize) -> Option<PixelBox> {
        let frac = |x0: f64, y0: f64, x1: f64, y1: f64| {
            let px = |f: f64, d: usize| (f * d as f64).round() as usize;
            PixelBox::new(px(x0, w), px(y0, h), px(x1, w), px(y1, h))
        };
        Some(match self {
            Placement::Random => return None,
            Placement::Upper => frac(0.0, 0.0, 1.0, 0.5),
            Placement::Lower => frac(0.0, 0.5, 1.0, 1.0),
            Placement::Left => frac(0.0, 0.0, 0.5, 1.0),
            Placement::Right => frac(0.5, 0.0, 1.0, 1.0),
            Placement::Eyes => frac(0.1, 0.28, 0.9, 0.5),
            Placement::Nose => frac(0.33, 0.42, 0.67, 0.68),
            Placement::Mouth => frac(0.2, 0.62, 0.8, 0.84),
            Placement::Full => frac(0.0, 0.0, 1.0, 1.0),
        })
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Placement::Random)
            .chain(Placement::REGIONS)
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("placement", format!("unknown placement `{s}`")))
    }
}

/// Everything needed to (re)generate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub identities: usize,
    pub identity_offset: usize,
    pub samples_per_identity: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub k: usize,
    pub scale: ScalePolicy,
    /// Occluder base size as a fraction of the image dims.
    pub occluder_base_frac: f64,
    pub families: Vec<OccluderFamily>,
    pub clean_fraction: f64,
    pub placement: Placement,
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            identities: 40,
            identity_offset: 0,
            samples_per_identity: 50,
            width: 48,
            height: 56,
            channels: 3,
            k: 5,
            scale: ScalePolicy::Grid {
                start: 1.0,
                step: 0.5,
                end: 5.0,
            },
            occluder_base_frac: 0.15,
            families: OccluderFamily::ALL.to_vec(),
            clean_fraction: 1.0 / 3.0,
            placement: Placement::Random,
            jitter: Jitter::DEFAULT,
            seed: 100,
        }
    }
}

pub const DATASET_KEYS: &[&str] = &[
    "identities",
    "identity_offset",
    "samples_per_identity",
    "width",
    "height",
    "channels",
    "k",
    "scale",
    "occluder_base_frac",
    "families",
    "clean_fraction",
    "placement",
    "jitter",
    "seed",
];

impl DatasetConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(DATASET_KEYS)?;
        let d = Self::default();
        let families = match kv.raw("families") {
            None | Some("all") => d.families.clone(),
            Some(list) => list
                .split(',')
                .map(|f| f.trim().parse())
                .collect::<Result<Vec<_>>>()?,
        };
        let cfg = Self {
            identities: kv.get_or("identities", d.identities)?,
            identity_offset: kv.get_or("identity_offset", d.identity_offset)?,
            samples_per_identity: kv.get_or("samples_per_identity", d.samples_per_identity)?,
            width: kv.get_or("width", d.width)?,
            height: kv.get_or("height", d.height)?,
            channels: kv.get_or("channels", d.channels)?,
            k: kv.get_or("k", d.k)?,
            scale: kv.get_or("scale", d.scale)?,
            occluder_base_frac: kv.get_or("occluder_base_frac", d.occluder_base_frac)?,
            families,
            clean_fraction: kv.get_or("clean_fraction", d.clean_fraction)?,
            placement: kv.get_or("placement", d.placement)?,
            jitter: if kv.get_or("jitter", true)? {
                Jitter::DEFAULT
            } else {
                Jitter::NONE
            },
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("identities", self.identities),
            ("samples_per_identity", self.samples_per_identity),
            ("width", self.width),
            ("height", self.height),
            ("channels", self.channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(1..=crate::patterns::MAX_GRID).contains(&self.k) {
            return Err(Error::config("k", "grid resolution outside [1, 16]"));
        }
        self.scale.validate()?;
        if !(self.occluder_base_frac > 0.0 && self.occluder_base_frac <= 4.0) {
            return Err(Error::config("occluder_base_frac", "must be in (0, 4]"));
        }
        if self.families.is_empty() {
            return Err(Error::config("families", "at least one family required"));
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return Err(Error::config("clean_fraction", "must be in [0, 1]"));
        }
        let (bw, bh) = self.base_size();
        if bw < 4 || bh < 4 {
            return Err(Error::config("occluder_base_frac", "occluder base below 4 px"));
        }
        let max_s = self.scale.values().into_iter().fold(0.0, f64::max);
        if max_s * bw as f64 > 4.0 * self.width as f64 || max_s * bh as f64 > 4.0 * self.height as f64 {
            return Err(Error::config("scale", "largest occluder exceeds 4x the image"));
        }
        Ok(())
    }

    pub fn base_size(&self) -> (usize, usize) {
        (
            (self.occluder_base_frac * self.width as f64).round() as usize,
            (self.occluder_base_frac * self.height as f64).round() as usize,
        )
    }

    pub fn len(&self) -> usize {
        self.identities * self.samples_per_identity
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Identity appearance depends only on the identity id, so manifests with
/// different seeds share faces.
pub fn identity_seed(identity: usize) -> u64 {
    (identity as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x0123_4567_89ab_cdef
}

/// RNG stream for one record.
pub fn record_rng(global_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub config: DatasetConfig,
}

/// One labeled sample; the image is regenerated from `(seed, index)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub identity: usize,
    pub occluder: Option<OccluderSpec>,
    pub scale_s: f64,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub pattern_label: usize,
    pub occluded_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

#[derive(Clone, Debug)]
pub struct OccludedSample {
    pub image: Image,
    pub bbox: PixelBox,
    pub pattern_label: usize,
    pub identity: usize,
    pub scale_s: f64,
}

/// Generate one record and its image.
pub fn generate_record(
    cfg: &DatasetConfig,
    matcher: &PatternMatcher,
    index: usize,
) -> Result<(ManifestRecord, Image)> {
    let mut rng = record_rng(cfg.seed, index);
    let identity = cfg.identity_offset + index / cfg.samples_per_identity;
    let clean = rng.random::<f64>() < cfg.clean_fraction;
    let face = synth_identity_image(
        identity_seed(identity),
        cfg.width,
        cfg.height,
        cfg.channels,
        &cfg.jitter,
        &mut rng,
    );
    if clean {
        let rec = ManifestRecord {
            index,
            identity,
            occluder: None,
            scale_s: 0.0,
            bbox: PixelBox::EMPTY,
            pattern_label: 0,
            occluded_fraction: 0.0,
        };
        return Ok((rec, face));
    }
    let family = cfg.families[rng.random_range(0..cfg.families.len())];
    let (bw, bh) = cfg.base_size();
    let occ = OccluderSpec::new(family, bw, bh, rng.random())?;
    let (image, bbox, s) = match cfg.placement.region_box(cfg.width, cfg.height) {
        Some(b) => (occlude_box(&face, &occ, &b), b, 0.0),
        None => {
            let s = cfg.scale.sample(&mut rng);
            let (img, b) = apply_occlusion(&face, &occ, s, &mut rng)?;
            (img, b, s)
        }
    };
    let rec = ManifestRecord {
        index,
        identity,
        occluder: Some(occ),
        scale_s: s,
        bbox,
        pattern_label: matcher.match_box(&bbox),
        occluded_fraction: occluded_fraction(&bbox, cfg.width, cfg.height),
    };
    Ok((rec, image))
}

fn matcher_for(cfg: &DatasetConfig) -> Result<PatternMatcher> {
    Ok(PatternMatcher::new(enumerate_patterns(cfg.k)?, cfg.width, cfg.height))
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let matcher = matcher_for(cfg)?;
    let records = par::map_indexed(cfg.len(), |i| generate_record(cfg, &matcher, i).map(|r| r.0))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            config: cfg.clone(),
        },
        records,
    })
}

impl DatasetManifest {
    pub fn config(&self) -> &DatasetConfig {
        &self.header.config
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Regenerate the sample behind `record` from its seed recipe.
    pub fn render(&self, record: &ManifestRecord) -> Result<OccludedSample> {
        let matcher = matcher_for(self.config())?;
        self.render_with(&matcher, record)
    }

    fn render_with(&self, matcher: &PatternMatcher, record: &ManifestRecord) -> Result<OccludedSample> {
        let (rec, image) = generate_record(self.config(), matcher, record.index)?;
        if &rec != record {
            return Err(Error::Manifest(format!(
                "record {} does not match its seed recipe",
                record.index
            )));
        }
        Ok(OccludedSample {
            image,
            bbox: rec.bbox,
            pattern_label: rec.pattern_label,
            identity: rec.identity,
            scale_s: rec.scale_s,
        })
    }

    /// Regenerate every image, in record order.
    pub fn render_all(&self) -> Result<Vec<OccludedSample>> {
        let matcher = matcher_for(self.config())?;
        par::map_indexed(self.records.len(), |i| self.render_with(&matcher, &self.records[i]))
            .into_iter()
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Manifest("empty manifest".into()))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                header.version
            )));
        }
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { header, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    /// Write every sample as `<index>_id<identity>_p<label>.png`.
    pub fn export_images(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (rec, sample) in self.records.iter().zip(self.render_all()?) {
            let name = format!("{:06}_id{}_p{}.png", rec.index, rec.identity, rec.pattern_label);
            sample.image.save_png(&dir.join(name))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            identities: 3,
            samples_per_identity: 4,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn identity_images_are_deterministic_and_bounded() {
        let mut a = record_rng(7, 3);
        let mut b = record_rng(7, 3);
        let x = synth_identity_image(11, 48, 56, 3, &Jitter::DEFAULT, &mut a);
        let y = synth_identity_image(11, 48, 56, 3, &Jitter::DEFAULT, &mut b);
        assert_eq!(x, y);
        let (lo, hi) = x.min_max();
        assert!(lo >= -1.0 && hi <= 1.0);
    }

    #[test]
    fn full_cover_occluder() {
        let img = Image::filled(48, 56, 3, 0.0);
        let occ = OccluderSpec::new(OccluderFamily::Solid, 48, 56, 1).unwrap();
        let (_, b) = apply_occlusion_at(&img, &occ, 2.0, 24, 28).unwrap();
        assert_eq!(b, PixelBox::new(0, 0, 48, 56));
        assert_eq!(occluded_fraction(&b, 48, 56), 1.0);
    }

    #[test]
    fn corner_centre_clips_to_a_quarter() {
        let img = Image::filled(96, 112, 1, 0.0);
        let occ = OccluderSpec::new(OccluderFamily::Checker, 20, 30, 5).unwrap();
        let (out, b) = apply_occlusion_at(&img, &occ, 1.0, 0, 0).unwrap();
        assert_eq!(b, PixelBox::new(0, 0, 10, 15));
        assert_eq!(b.area(), 10 * 15);
        // nothing outside the box changed
        assert_eq!(out.at(0, 20, 20), 0.0);
        let (_, b) = apply_occlusion_at(&img, &occ, 1.0, 95, 111).unwrap();
        assert_eq!(b, PixelBox::new(85, 96, 96, 112));
    }

    #[test]
    fn oversize_occluder_rejected() {
        let img = Image::filled(10, 10, 1, 0.0);
        let occ = OccluderSpec::new(OccluderFamily::Solid, 10, 10, 0).unwrap();
        assert!(apply_occlusion_at(&img, &occ, 4.5, 5, 5).is_err());
        assert!(apply_occlusion_at(&img, &occ, 0.0, 5, 5).is_err());
        assert!(OccluderSpec::new(OccluderFamily::Solid, 3, 10, 0).is_err());
    }

    #[test]
    fn fraction_arithmetic() {
        assert_eq!(occluded_fraction(&PixelBox::new(0, 0, 48, 56), 96, 112), 0.25);
        assert_eq!(occluded_fraction(&PixelBox::EMPTY, 96, 112), 0.0);
    }

    #[test]
    fn occluder_render_is_pure() {
        for fam in OccluderFamily::ALL {
            let spec = OccluderSpec::new(fam, 12, 9, 42).unwrap();
            assert_eq!(spec.render(3), spec.render(3));
        }
    }

    #[test]
    fn clean_only_dataset() {
        let cfg = DatasetConfig {
            clean_fraction: 1.0,
            ..small_cfg()
        };
        let m = build_dataset(&cfg).unwrap();
        assert!(m.records.iter().all(|r| r.pattern_label == 0 && r.bbox.is_empty()));
    }

    #[test]
    fn manifest_roundtrip_and_render() {
        let m = build_dataset(&small_cfg()).unwrap();
        let text = m.to_jsonl_string().unwrap();
        let back = DatasetManifest::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, m);
        let s = back.render(&back.records[5]).unwrap();
        assert_eq!(s.pattern_label, back.records[5].pattern_label);
    }

    #[test]
    fn config_parsing() {
        let kv = KvConfig::parse("identities = 2\nscale = fixed:2.5\nfamilies = solid,disk\n").unwrap();
        let cfg = DatasetConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.identities, 2);
        assert_eq!(cfg.scale, ScalePolicy::Fixed { s: 2.5 });
        assert_eq!(cfg.families, vec![OccluderFamily::Solid, OccluderFamily::Disk]);
        let bad = KvConfig::parse("clean_fraction = 1.5").unwrap();
        let err = DatasetConfig::from_kv(&bad).unwrap_err().to_string();
        assert!(err.contains("clean_fraction"), "{err}");
        let bad = KvConfig::parse("identities = 0").unwrap();
        assert!(DatasetConfig::from_kv(&bad).unwrap_err().to_string().contains("identities"));
    }

    #[test]
    fn scale_grid_values() {
        let p: ScalePolicy = "grid:1.0:0.5:5.0".parse().unwrap();
        assert_eq!(p.values().len(), 9);
        assert_eq!(p.values()[8], 5.0);
        assert!("fixed:-1".parse::<ScalePolicy>().is_err());
    }
}
