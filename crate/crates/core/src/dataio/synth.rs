//! Synthetic field-emitter tip micrographs.
//!
//! Each image shows a bright tip on a dark background: a shank whose base of
//! width `W` sits on the bottom edge, tapering upward over height `H` into a
//! circular apex of radius `R` that is tangent to both flanks. The
//! silhouette is the convex hull of the apex disk and the base segment.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::GrayImage;
use super::manifest::{DatasetManifest, ManifestRecord, Sample, Split, TipLabels, ACQUISITION_KEYS, SCALE_KEY};
use crate::error::{Result, SimicError};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub scale_nm_per_px: f64,
    pub width_um: (f64, f64),
    pub height_um: (f64, f64),
    pub radius_um: (f64, f64),
    /// Weight in `[0, 1]` pulling the radius toward the value matching the
    /// width's relative position in its range (wider tips get blunter apexes);
    /// 0 samples the radius independently.
    pub radius_coupling: f64,
    /// Gaussian blur sigma range in pixels.
    pub blur_sigma: (f64, f64),
    /// Additive noise sigma range in gray levels.
    pub noise_sigma: (f64, f64),
    pub foreground: u8,
    pub background: u8,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            scale_nm_per_px: 10.0,
            width_um: (0.20, 0.40),
            height_um: (0.25, 0.50),
            radius_um: (0.03, 0.08),
            radius_coupling: 0.0,
            blur_sigma: (0.0, 1.0),
            noise_sigma: (0.0, 8.0),
            foreground: 200,
            background: 30,
            seed: 0,
            max_retries: 100,
        }
    }
}

impl SynthSpec {
    pub fn noiseless(mut self) -> Self {
        self.blur_sigma = (0.0, 0.0);
        self.noise_sigma = (0.0, 0.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimicError::config("synth", m));
        if self.image_width < 8 || self.image_height < 8 {
            return bad(format!("image {}x{} too small", self.image_width, self.image_height));
        }
        if !(self.scale_nm_per_px > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale_nm_per_px));
        }
        for (name, (lo, hi)) in [
            ("width_um", self.width_um),
            ("height_um", self.height_um),
            ("radius_um", self.radius_um),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}] is empty or nonpositive"));
            }
        }
        for (name, (lo, hi)) in [("blur_sigma", self.blur_sigma), ("noise_sigma", self.noise_sigma)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if !(0.0..=1.0).contains(&self.radius_coupling) {
            return bad(format!("radius_coupling {} outside [0, 1]", self.radius_coupling));
        }
        if self.radius_um.1 >= self.width_um.0 {
            return bad("radius range must lie below the width range".into());
        }
        Ok(())
    }

    /// Blends an independently drawn radius with the width-matched one.
    fn coupled_radius(&self, width_um: f64, free: f64) -> f64 {
        let c = self.radius_coupling;
        if c == 0.0 {
            return free;
        }
        let (wl, wh) = self.width_um;
        let (rl, rh) = self.radius_um;
        let t = if wh > wl { (width_um - wl) / (wh - wl) } else { 0.5 };
        c * (rl + t * (rh - rl)) + (1.0 - c) * free
    }

    pub fn um_to_px(&self, um: f64) -> f64 {
        um * 1000.0 / self.scale_nm_per_px
    }
}

/// Tip geometry in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TipGeometry {
    pub width: f64,
    pub height: f64,
    pub radius: f64,
}

impl TipGeometry {
    /// Whether the tip is a proper tapered shape that fits the frame with a
    /// one-pixel margin at the sides and top.
    pub fn fits(&self, image_width: usize, image_height: usize) -> bool {
        self.radius > 0.0
            && 2.0 * self.radius < self.width
            && self.height > 2.0 * self.radius
            && self.width <= image_width as f64 - 2.0
            && self.height <= image_height as f64 - 1.0
    }

    /// Tangent point of the right flank on the apex circle, as
    /// `(x, y)` with x from the axis and y up from the base.
    fn tangent_point(&self) -> (f64, f64) {
        let cy = self.height - self.radius;
        let (vx, vy) = (self.width / 2.0, -cy);
        let d2 = vx * vx + vy * vy;
        let l = (d2 - self.radius * self.radius).max(0.0).sqrt();
        let r = self.radius;
        (r * r / d2 * vx + r * l / d2 * (-vy), cy + r * r / d2 * vy + r * l / d2 * vx)
    }

    /// Point-in-silhouette test, coordinates as in [`Self::tangent_point`].
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if y < 0.0 || y > self.height {
            return false;
        }
        let cy = self.height - self.radius;
        if x * x + (y - cy) * (y - cy) <= self.radius * self.radius {
            return true;
        }
        let (tx, ty) = self.tangent_point();
        if y > ty {
            return false;
        }
        let half = self.width / 2.0 + (tx - self.width / 2.0) * y / ty;
        x.abs() <= half
    }

    /// Binary rasterization sampled at pixel centers, tip axis at the image
    /// center and base on the bottom edge.
    pub fn rasterize(&self, image_width: usize, image_height: usize) -> Vec<bool> {
        let cx = image_width as f64 / 2.0;
        let mut mask = vec![false; image_width * image_height];
        for row in 0..image_height {
            let y = image_height as f64 - (row as f64 + 0.5);
            for col in 0..image_width {
                let x = col as f64 + 0.5 - cx;
                mask[row * image_width + col] = self.contains(x, y);
            }
        }
        mask
    }
}

pub fn render_tip(
    geometry: &TipGeometry,
    image_width: usize,
    image_height: usize,
    foreground: u8,
    background: u8,
    blur_sigma: f64,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> GrayImage {
    let mask = geometry.rasterize(image_width, image_height);
    let mut field: Vec<f64> = mask
        .iter()
        .map(|&m| if m { foreground as f64 } else { background as f64 })
        .collect();
    if blur_sigma > 0.0 {
        field = gaussian_blur(&field, image_width, image_height, blur_sigma);
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        for v in field.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let pixels = field
        .iter()
        .map(|v| (v.clamp(0.0, 255.0) + 0.5).floor() as u8)
        .collect();
    GrayImage::new(image_width, image_height, pixels).expect("sized buffer")
}

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * src[r * w + clampi(c as isize + k as isize - radius, w)];
            }
            tmp[r * w + c] = acc / norm;
        }
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[clampi(r as isize + k as isize - radius, h) * w + c];
            }
            out[r * w + c] = acc / norm;
        }
    }
    out
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_id(index: usize) -> String {
    format!("tip_{index:05}")
}

/// Draws `n` samples. Geometries that do not fit the frame are redrawn up
/// to `max_retries` times per sample.
pub fn generate_synthetic(spec: &SynthSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(SimicError::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut accepted = None;
        for _ in 0..=spec.max_retries {
            let width_um = uniform(&mut rng, spec.width_um);
            let height_um = uniform(&mut rng, spec.height_um);
            let free = uniform(&mut rng, spec.radius_um);
            let labels = TipLabels {
                width_um,
                height_um,
                radius_um: spec.coupled_radius(width_um, free),
            };
            let geometry = TipGeometry {
                width: spec.um_to_px(labels.width_um),
                height: spec.um_to_px(labels.height_um),
                radius: spec.um_to_px(labels.radius_um),
            };
            if geometry.fits(spec.image_width, spec.image_height) && labels.validate().is_ok() {
                accepted = Some((labels, geometry));
                break;
            }
        }
        let (labels, geometry) = accepted.ok_or_else(|| {
            SimicError::InvalidArgument(format!(
                "sample {i}: no geometry fits a {}x{} frame after {} retries",
                spec.image_width, spec.image_height, spec.max_retries
            ))
        })?;
        let blur = uniform(&mut rng, spec.blur_sigma);
        let noise = uniform(&mut rng, spec.noise_sigma);
        let image = render_tip(
            &geometry,
            spec.image_width,
            spec.image_height,
            spec.foreground,
            spec.background,
            blur,
            noise,
            &mut rng,
        );
        samples.push(Sample {
            id: sample_id(i),
            image,
            labels,
        });
    }
    Ok(samples)
}

pub fn synthetic_metadata(spec: &SynthSpec) -> Vec<(String, String)> {
    let mut meta = vec![
        ("source".to_string(), "synthetic".to_string()),
        (SCALE_KEY.to_string(), spec.scale_nm_per_px.to_string()),
        (
            "image_size".to_string(),
            format!("{}x{}", spec.image_width, spec.image_height),
        ),
        ("seed".to_string(), spec.seed.to_string()),
    ];
    for key in ACQUISITION_KEYS {
        meta.push((key.to_string(), "n/a (synthetic)".to_string()));
    }
    meta
}

/// Writes `images/<id>.pgm` files plus `manifest.csv` into `dir` and returns
/// the manifest. Splits are left unassigned.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &SynthSpec, samples: &[Sample]) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| SimicError::io(&images, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = PathBuf::from("images").join(format!("{}.pgm", s.id));
        s.image.write(dir.join(&rel))?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            file: rel,
            labels: s.labels,
            split: Split::Unassigned,
        });
    }
    let manifest = DatasetManifest {
        metadata: synthetic_metadata(spec),
        records,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topmost_row(mask: &[bool], w: usize) -> usize {
        mask.iter().position(|&m| m).unwrap() / w
    }

    #[test]
    fn noiseless_apex_row_matches_height() {
        let spec = SynthSpec {
            seed: 3,
            ..SynthSpec::default().noiseless()
        };
        for s in generate_synthetic(&spec, 40).unwrap() {
            let fg: Vec<bool> = s.image.pixels().iter().map(|&p| p == spec.foreground).collect();
            assert!(fg.iter().any(|&b| b));
            let h_px = spec.um_to_px(s.labels.height_um);
            let apex = topmost_row(&fg, 64) as f64;
            assert!((apex - (64.0 - h_px)).abs() <= 1.0, "apex {apex} vs H {h_px}");
        }
    }

    #[test]
    fn base_row_width_matches_w() {
        let g = TipGeometry {
            width: 40.0,
            height: 50.0,
            radius: 8.0,
        };
        let mask = g.rasterize(64, 64);
        let base = mask[63 * 64..].iter().filter(|&&m| m).count() as f64;
        assert!((base - 40.0).abs() <= 1.0, "{base}");
        let apex = topmost_row(&mask, 64);
        assert_eq!(apex, 14);
    }

    #[test]
    fn flank_is_tangent_to_apex_circle() {
        let g = TipGeometry {
            width: 30.0,
            height: 40.0,
            radius: 5.0,
        };
        let (tx, ty) = g.tangent_point();
        let cy = g.height - g.radius;
        assert!(((tx * tx + (ty - cy) * (ty - cy)).sqrt() - g.radius).abs() < 1e-12);
        // Radius at the tangent point is perpendicular to the flank direction.
        let (fx, fy) = (tx - g.width / 2.0, ty);
        assert!((fx * tx + fy * (ty - cy)).abs() < 1e-9);
    }

    #[test]
    fn equal_seeds_give_identical_images() {
        let spec = SynthSpec {
            seed: 11,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec, 5).unwrap();
        let b = generate_synthetic(&spec, 5).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic(&SynthSpec { seed: 12, ..spec }, 5).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn labels_are_generating_parameters() {
        let spec = SynthSpec::default();
        for s in generate_synthetic(&spec, 30).unwrap() {
            let l = s.labels;
            assert!(l.width_um >= spec.width_um.0 && l.width_um <= spec.width_um.1);
            assert!(l.radius_um < l.width_um);
            assert!(l.validate().is_ok());
        }
    }

    #[test]
    fn impossible_geometry_exhausts_retries() {
        let spec = SynthSpec {
            width_um: (1.0, 2.0),
            max_retries: 5,
            ..SynthSpec::default()
        };
        let err = generate_synthetic(&spec, 1).unwrap_err().to_string();
        assert!(err.contains("retries"), "{err}");
        assert!(generate_synthetic(&SynthSpec::default(), 0).is_err());
        let overlapping = SynthSpec {
            radius_um: (0.1, 0.3),
            ..SynthSpec::default()
        };
        assert!(overlapping.validate().is_err());
    }

    #[test]
    fn writes_decodable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let samples = generate_synthetic(&spec, 100).unwrap();
        let m = write_dataset(dir.path(), &spec, &samples).unwrap();
        assert_eq!(m.len(), 100);
        let loaded = super::super::manifest::load_manifest(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded.len(), 100);
        for (r, s) in loaded.records.iter().zip(&samples) {
            assert_eq!(loaded.load_image(r).unwrap(), s.image);
            assert_eq!(r.labels, s.labels);
        }
    }
}
