//! Brightness/contrast augmentation: each variant is `α·I + β`, clamped to
//! the 8-bit range and rounded half-up.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::{DatasetManifest, GrayImage, ManifestRecord, Split};
use crate::error::{Result, SimicError};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    /// Contrast factors.
    pub alphas: Vec<f64>,
    /// Brightness offsets in gray levels.
    pub betas: Vec<f64>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            alphas: vec![0.6, 1.1, 1.6],
            betas: vec![-40.0, 10.0, 60.0],
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.betas.is_empty() {
            return Err(SimicError::InvalidArgument(
                "augmentation needs at least one alpha and one beta".into(),
            ));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(SimicError::InvalidArgument(format!("alpha must be positive, got {a}")));
        }
        if let Some(b) = self.betas.iter().find(|b| !b.is_finite()) {
            return Err(SimicError::InvalidArgument(format!("beta must be finite, got {b}")));
        }
        Ok(())
    }

    /// `(alpha index, beta index, alpha, beta)` in row-major order over the
    /// alpha × beta grid.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.alphas.iter().enumerate().flat_map(move |(i, &a)| {
            self.betas.iter().enumerate().map(move |(j, &b)| (i, j, a, b))
        })
    }

    pub fn variant_count(&self) -> usize {
        self.alphas.len() * self.betas.len()
    }
}

pub fn adjust_pixel(pixel: u8, alpha: f64, beta: f64) -> u8 {
    let v = (alpha * pixel as f64 + beta).clamp(0.0, 255.0);
    (v + 0.5).floor() as u8
}

pub fn adjust(image: &GrayImage, alpha: f64, beta: f64) -> GrayImage {
    let lut: Vec<u8> = (0..=255u8).map(|p| adjust_pixel(p, alpha, beta)).collect();
    let pixels = image.pixels().iter().map(|&p| lut[p as usize]).collect();
    GrayImage::new(image.width(), image.height(), pixels).expect("same dimensions")
}

pub fn augment(image: &GrayImage, spec: &AugmentationSpec) -> Result<Vec<GrayImage>> {
    spec.validate()?;
    Ok(spec.pairs().map(|(_, _, a, b)| adjust(image, a, b)).collect())
}

pub fn variant_id(id: &str, alpha_index: usize, beta_index: usize) -> String {
    format!("{id}_a{alpha_index}b{beta_index}")
}

/// One augmented row to be materialized from a parent row.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantPlan {
    pub parent: usize,
    pub alpha: f64,
    pub beta: f64,
    pub record: ManifestRecord,
}

/// Expands every training row into itself plus one row per (α, β) pair.
/// Validation and evaluation rows pass through unchanged. Variant images are
/// placed under `augmented/` relative to the manifest directory.
pub fn expand_training_set(
    manifest: &DatasetManifest,
    spec: &AugmentationSpec,
) -> Result<(DatasetManifest, Vec<VariantPlan>)> {
    spec.validate()?;
    let existing: HashSet<&str> = manifest.records.iter().map(|r| r.id.as_str()).collect();
    let mut records = Vec::with_capacity(manifest.len() + manifest.count(Split::Train) * spec.variant_count());
    let mut plans = Vec::new();
    for (parent, r) in manifest.records.iter().enumerate() {
        records.push(r.clone());
        if r.split != Split::Train {
            continue;
        }
        for (i, j, alpha, beta) in spec.pairs() {
            let id = variant_id(&r.id, i, j);
            if existing.contains(id.as_str()) {
                return Err(SimicError::Manifest {
                    row: parent + 1,
                    message: format!("augmented id {id:?} collides with an existing row"),
                });
            }
            let record = ManifestRecord {
                file: PathBuf::from("augmented").join(format!("{id}.pgm")),
                id,
                labels: r.labels,
                split: Split::Train,
            };
            records.push(record.clone());
            plans.push(VariantPlan {
                parent,
                alpha,
                beta,
                record,
            });
        }
    }
    let mut metadata = manifest.metadata.clone();
    metadata.retain(|(k, _)| k != "augmentation");
    metadata.push(("augmentation".into(), describe(spec)));
    let expanded = DatasetManifest {
        metadata,
        records,
        base_dir: manifest.base_dir.clone(),
    };
    Ok((expanded, plans))
}

fn describe(spec: &AugmentationSpec) -> String {
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    format!("alphas {}; betas {}", join(&spec.alphas), join(&spec.betas))
}

/// Expands the manifest, writes every variant image and saves the expanded
/// manifest at `out` (which must live in the source manifest's directory so
/// relative paths stay valid).
pub fn materialize(manifest: &DatasetManifest, spec: &AugmentationSpec, out: &Path) -> Result<DatasetManifest> {
    let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    if normalize(&out_dir) != normalize(&manifest.base_dir) {
        return Err(SimicError::InvalidArgument(format!(
            "augmented manifest must be written next to the source manifest in {}",
            manifest.base_dir.display()
        )));
    }
    let (expanded, plans) = expand_training_set(manifest, spec)?;
    let aug_dir = manifest.base_dir.join("augmented");
    fs::create_dir_all(&aug_dir).map_err(|e| SimicError::io(&aug_dir, e))?;
    let mut last_parent = None;
    let mut source = None;
    for plan in &plans {
        if last_parent != Some(plan.parent) {
            source = Some(manifest.load_image(&manifest.records[plan.parent])?);
            last_parent = Some(plan.parent);
        }
        let img = adjust(source.as_ref().expect("loaded"), plan.alpha, plan.beta);
        img.write(expanded.resolve(&plan.record))?;
    }
    expanded.save(out)?;
    Ok(expanded)
}

fn normalize(p: &Path) -> PathBuf {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}
