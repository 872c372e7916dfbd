//! Synthetic 2-D segmentation data: an elliptical "organ" with an optional
//! circular "tumor" inside it on a noisy background. Silos differ by an
//! intensity offset applied to the whole image and by how often tumors
//! appear. The pretraining source uses rectangles instead of ellipses.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FatError, Result};
use crate::loss::LabelMap;
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;
use crate::trainer::SiloDataset;

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const TUMOR: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiloStyle {
    pub intensity_offset: f64,
    pub organ_radius_min: f64,
    pub organ_radius_max: f64,
    pub tumor_frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_silos: usize,
    pub supervised_ids: Vec<usize>,
    pub samples_per_silo: Vec<usize>,
    pub image_size: usize,
    pub n_classes: usize,
    pub styles: Vec<SiloStyle>,
    pub test_samples: usize,
    pub source_samples: usize,
    pub noise_std: f64,
    pub organ_intensity: f64,
    pub tumor_intensity: f64,
    pub tumor_radius_min: f64,
    pub tumor_radius_max: f64,
    /// Supplied by the experiment seed; not part of config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let style = |offset: f64, tumor: f64| SiloStyle {
            intensity_offset: offset,
            organ_radius_min: 3.5,
            organ_radius_max: 6.0,
            tumor_frequency: tumor,
        };
        DatasetSpec {
            n_silos: 6,
            supervised_ids: vec![0, 1],
            samples_per_silo: vec![24, 16, 12, 12, 8, 8],
            image_size: 16,
            n_classes: 3,
            styles: vec![
                style(0.0, 0.5),
                style(0.1, 0.5),
                style(0.2, 0.6),
                style(0.3, 0.6),
                style(0.4, 0.7),
                style(0.5, 0.7),
            ],
            test_samples: 32,
            source_samples: 48,
            noise_std: 0.1,
            organ_intensity: 0.5,
            tumor_intensity: 1.0,
            tumor_radius_min: 1.0,
            tumor_radius_max: 2.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FatError::Config(m));
        if self.n_silos < 1 {
            return bad("n_silos must be >= 1".into());
        }
        if self.samples_per_silo.len() != self.n_silos || self.styles.len() != self.n_silos {
            return bad(format!(
                "need {} sample counts and styles, got {} and {}",
                self.n_silos,
                self.samples_per_silo.len(),
                self.styles.len()
            ));
        }
        let mut ids = self.supervised_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() || ids.len() != self.supervised_ids.len() || ids.iter().any(|&i| i >= self.n_silos) {
            return bad(format!("supervised_ids {:?} must be distinct, non-empty, < n_silos", self.supervised_ids));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(2) {
            return bad(format!("image_size must be even and >= 8, got {}", self.image_size));
        }
        if self.n_classes != 3 {
            return bad(format!("the generator produces 3 classes, n_classes = {}", self.n_classes));
        }
        if self.samples_per_silo.contains(&0) || self.test_samples == 0 || self.source_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(self.tumor_radius_min >= 1.0 && self.tumor_radius_min <= self.tumor_radius_max) || !(self.noise_std >= 0.0) {
            return bad("tumor radius range must start at >= 1 and noise_std >= 0".into());
        }
        let half = self.image_size as f64 / 2.0;
        for (i, s) in self.styles.iter().enumerate() {
            if !(s.organ_radius_min >= self.tumor_radius_max + 1.5
                && s.organ_radius_min <= s.organ_radius_max
                && s.organ_radius_max <= half - 2.0)
                || !(0.0..=1.0).contains(&s.tumor_frequency)
            {
                return bad(format!("silo {i}: invalid style {s:?}"));
            }
        }
        Ok(())
    }

    pub fn is_supervised(&self, silo_id: usize) -> bool {
        self.supervised_ids.contains(&silo_id)
    }

    /// Silo id of the held-out test set.
    pub fn test_silo_id(&self) -> usize {
        self.n_silos
    }

    pub fn source_silo_id(&self) -> usize {
        self.n_silos + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OrganShape {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Organ {
    pub shape: OrganShape,
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes (ellipse) or half-extents (rectangle).
    pub rx: f64,
    pub ry: f64,
    pub intensity: f64,
}

impl Organ {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = ((px - self.cx) / self.rx, (py - self.cy) / self.ry);
        match self.shape {
            OrganShape::Ellipse => dx * dx + dy * dy <= 1.0,
            OrganShape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }
}

/// Disk (ellipse recipes) or square of half-size `r` (rectangle recipes).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tumor {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRecipe {
    pub background_noise: f64,
    pub offset: f64,
    pub organ: Organ,
    pub tumor: Option<Tumor>,
}

impl SampleRecipe {
    fn tumor_contains(&self, px: f64, py: f64) -> bool {
        self.tumor.is_some_and(|t| match self.organ.shape {
            OrganShape::Ellipse => (px - t.cx).powi(2) + (py - t.cy).powi(2) <= t.r * t.r,
            OrganShape::Rectangle => (px - t.cx).abs() <= t.r && (py - t.cy).abs() <= t.r,
        })
    }

    /// Class of the pixel whose center is `(x + 0.5, y + 0.5)`.
    pub fn label_at(&self, x: usize, y: usize) -> u8 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if self.tumor_contains(px, py) {
            TUMOR
        } else if self.organ.contains(px, py) {
            ORGAN
        } else {
            BACKGROUND
        }
    }

    pub fn rasterize<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> (Vec<f32>, Vec<u8>) {
        let noise = Normal::new(0.0, self.background_noise.max(0.0)).expect("finite std");
        let mut image = Vec::with_capacity(size * size);
        let mut labels = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let label = self.label_at(x, y);
                let base = match label {
                    TUMOR => self.tumor.map_or(0.0, |t| t.intensity),
                    ORGAN => self.organ.intensity,
                    _ => 0.0,
                };
                let n: f64 = if self.background_noise > 0.0 { noise.sample(rng) } else { 0.0 };
                image.push((base + self.offset + n) as f32);
                labels.push(label);
            }
        }
        (image, labels)
    }
}

fn organ_and_tumor<R: Rng + ?Sized>(
    spec: &DatasetSpec,
    style: &SiloStyle,
    shape: OrganShape,
    rng: &mut R,
) -> SampleRecipe {
    let size = spec.image_size;
    let half = size as f64 / 2.0;
    let jitter = 1.5;
    let organ = Organ {
        shape,
        cx: half + rng.random_range(-jitter..=jitter),
        cy: half + rng.random_range(-jitter..=jitter),
        rx: rng.random_range(style.organ_radius_min..=style.organ_radius_max),
        ry: rng.random_range(style.organ_radius_min..=style.organ_radius_max),
        intensity: spec.organ_intensity,
    };
    let mut recipe = SampleRecipe {
        background_noise: spec.noise_std,
        offset: style.intensity_offset,
        organ,
        tumor: None,
    };
    if rng.random_bool(style.tumor_frequency) {
        let r = rng.random_range(spec.tumor_radius_min..=spec.tumor_radius_max);
        for _ in 0..32 {
            // candidate center in the organ shrunk by the tumor radius
            let (ux, uy): (f64, f64) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let candidate = Tumor {
                cx: organ.cx + ux * (organ.rx - r).max(0.0),
                cy: organ.cy + uy * (organ.ry - r).max(0.0),
                r,
                intensity: spec.tumor_intensity,
            };
            let trial = SampleRecipe {
                tumor: Some(candidate),
                ..recipe
            };
            if tumor_fits(&trial, size) {
                recipe = trial;
                break;
            }
        }
    }
    recipe
}

/// Every rasterized tumor pixel lies inside the organ, and the tumor leaves
/// at least one organ pixel and covers at least one pixel.
fn tumor_fits(recipe: &SampleRecipe, size: usize) -> bool {
    let mut tumor_px = 0;
    let mut organ_px = 0;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if recipe.tumor_contains(px, py) {
                if !recipe.organ.contains(px, py) {
                    return false;
                }
                tumor_px += 1;
            } else if recipe.organ.contains(px, py) {
                organ_px += 1;
            }
        }
    }
    tumor_px > 0 && organ_px > 0
}

fn build(
    spec: &DatasetSpec,
    n: usize,
    rng: &mut StreamRng,
    mut recipe_for: impl FnMut(&mut StreamRng) -> SampleRecipe,
) -> Result<(Tensor, LabelMap, Vec<SampleRecipe>)> {
    let size = spec.image_size;
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n * size * size);
    let mut recipes = Vec::with_capacity(n);
    for _ in 0..n {
        let recipe = recipe_for(rng);
        let (img, lab) = recipe.rasterize(size, rng);
        images.extend(img);
        labels.extend(lab);
        recipes.push(recipe);
    }
    Ok((
        Tensor::new(vec![n, 1, size, size], images)?,
        LabelMap::new(n, size, size, spec.n_classes, labels)?,
        recipes,
    ))
}

/// Silo data together with the recipe of every sample.
pub fn generate_silo_with_recipes(spec: &DatasetSpec, silo_id: usize) -> Result<(SiloDataset, Vec<SampleRecipe>)> {
    spec.validate()?;
    if silo_id >= spec.n_silos {
        return Err(FatError::invalid(format!("silo id {silo_id} out of range {}", spec.n_silos)));
    }
    let style = spec.styles[silo_id];
    let mut rng = rng::stream(spec.seed, "silo", &[silo_id as u64]);
    let (images, labels, recipes) = build(spec, spec.samples_per_silo[silo_id], &mut rng, |r| {
        organ_and_tumor(spec, &style, OrganShape::Ellipse, r)
    })?;
    let silo = if spec.is_supervised(silo_id) {
        SiloDataset::supervised(silo_id, images, labels)?
    } else {
        SiloDataset::unsupervised(silo_id, images, Some(labels))?
    };
    Ok((silo, recipes))
}

pub fn generate_silo(spec: &DatasetSpec, silo_id: usize) -> Result<SiloDataset> {
    generate_silo_with_recipes(spec, silo_id).map(|(s, _)| s)
}

pub fn generate_silos(spec: &DatasetSpec) -> Result<Vec<SiloDataset>> {
    (0..spec.n_silos).map(|i| generate_silo(spec, i)).collect()
}

fn span(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Held-out test set. Each sample's style is drawn uniformly between the
/// training silos' extremes.
pub fn generate_test_set(spec: &DatasetSpec) -> Result<SiloDataset> {
    spec.validate()?;
    let (off_lo, off_hi) = span(spec.styles.iter().map(|s| s.intensity_offset));
    let (tf_lo, tf_hi) = span(spec.styles.iter().map(|s| s.tumor_frequency));
    let (rmin_lo, rmin_hi) = span(spec.styles.iter().map(|s| s.organ_radius_min));
    let (rmax_lo, rmax_hi) = span(spec.styles.iter().map(|s| s.organ_radius_max));
    let mut rng = rng::stream(spec.seed, "test", &[]);
    let draw = |r: &mut StreamRng, lo: f64, hi: f64| if lo < hi { r.random_range(lo..=hi) } else { lo };
    let (images, labels, _) = build(spec, spec.test_samples, &mut rng, |r| {
        let rmin = draw(r, rmin_lo, rmin_hi);
        let style = SiloStyle {
            intensity_offset: draw(r, off_lo, off_hi),
            organ_radius_min: rmin,
            organ_radius_max: draw(r, rmax_lo, rmax_hi).max(rmin),
            tumor_frequency: draw(r, tf_lo, tf_hi),
        };
        organ_and_tumor(spec, &style, OrganShape::Ellipse, r)
    })?;
    SiloDataset::supervised(spec.test_silo_id(), images, labels)
}

/// Source task for pretraining: rectangles with square lesions, no
/// intensity offset, same classes.
pub fn generate_pretrain_source_with_recipes(spec: &DatasetSpec) -> Result<(SiloDataset, Vec<SampleRecipe>)> {
    spec.validate()?;
    let (rmin, _) = span(spec.styles.iter().map(|s| s.organ_radius_min));
    let (_, rmax) = span(spec.styles.iter().map(|s| s.organ_radius_max));
    let style = SiloStyle {
        intensity_offset: 0.0,
        organ_radius_min: rmin,
        organ_radius_max: rmax,
        tumor_frequency: 0.5,
    };
    let mut rng = rng::stream(spec.seed, "source", &[]);
    let (images, labels, recipes) = build(spec, spec.source_samples, &mut rng, |r| {
        organ_and_tumor(spec, &style, OrganShape::Rectangle, r)
    })?;
    Ok((SiloDataset::supervised(spec.source_silo_id(), images, labels)?, recipes))
}

pub fn generate_pretrain_source(spec: &DatasetSpec) -> Result<SiloDataset> {
    generate_pretrain_source_with_recipes(spec).map(|(s, _)| s)
}
