//! The two supervision datasets, the synthetic long-tailed benchmark, and
//! repeat-factor sampling.
//!
//! Detection images carry instance annotations (boxes + categories); weak
//! images carry a single category label and, after region generation, one
//! pre-defined box. Categories are binned by how many detection images they
//! appear in: rare (1-10), common (11-100), frequent (>100), with thresholds
//! scalable for differently sized datasets.

mod io;
mod synth;

pub use io::{load_benchmark, save_benchmark, save_weak_annotations};
pub use synth::{generate_longtail_benchmark, Benchmark, BenchmarkConfig};

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClisError, Result};
use crate::geometry::BoxCxcywh;

/// Dense RGB pixel buffer, row-major, 8-bit channels. The canonical pixel
/// contract is `[0,1]`; `u8` storage makes the `value = byte / 255` mapping
/// exact and keeps dataset files byte-reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageData {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// `[3, H, W]` tensor in `[0,1]` for the network.
    pub fn to_chw(&self) -> Array3<f64> {
        let mut out = Array3::zeros((3, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.get(x, y);
                for c in 0..3 {
                    out[(c, y, x)] = px[c] as f64 / 255.0;
                }
            }
        }
        out
    }

    /// Nearest-neighbor resize; sample centers map proportionally.
    pub fn resize_nearest(&self, new_w: usize, new_h: usize) -> Self {
        assert!(new_w > 0 && new_h > 0);
        let mut out = Self::new(new_w, new_h);
        for y in 0..new_h {
            let sy = (((y as f64 + 0.5) * self.height as f64 / new_h as f64) as usize)
                .min(self.height - 1);
            for x in 0..new_w {
                let sx = (((x as f64 + 0.5) * self.width as f64 / new_w as f64) as usize)
                    .min(self.width - 1);
                out.put(x, y, self.get(sx, sy));
            }
        }
        out
    }

    pub fn hflip(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Copy a rectangular window (clamped to bounds).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let w = w.min(self.width.saturating_sub(x0)).max(1);
        let h = h.min(self.height.saturating_sub(y0)).max(1);
        let mut out = Self::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.put(x, y, self.get(x0 + x, y0 + y));
            }
        }
        out
    }

    /// Blit `src` with its top-left corner at `(x0, y0)`; out-of-bounds parts
    /// are dropped.
    pub fn blit(&mut self, src: &ImageData, x0: usize, y0: usize) {
        for y in 0..src.height {
            if y0 + y >= self.height {
                break;
            }
            for x in 0..src.width {
                if x0 + x >= self.width {
                    break;
                }
                self.put(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize, rgb: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.put(x, y, rgb);
            }
        }
    }
}

/// How a category is drawn by the synthesizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderRecipe {
    pub shape: ShapeKind,
    pub color: [u8; 3],
    pub secondary: [u8; 3],
    pub texture: TextureKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureKind {
    Solid,
    Stripes,
    Dots,
}

/// A category of the detection vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: usize,
    pub name: String,
    pub recipe: RenderRecipe,
}

/// One annotated instance: a box plus its category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub bbox: BoxCxcywh,
    pub category: usize,
}

/// Instance-level supervised image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionImage {
    pub image_id: u64,
    pub pixels: ImageData,
    pub annotations: Vec<InstanceAnnotation>,
}

/// Image-level supervised image: one label, optionally one pre-defined box.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakImage {
    pub image_id: u64,
    pub pixels: ImageData,
    pub label: usize,
    pub predefined_region: Option<BoxCxcywh>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyGroup {
    Rare,
    Common,
    Frequent,
}

/// Partition of the category set by detection-image frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGroups {
    pub group: BTreeMap<usize, FrequencyGroup>,
    pub image_count: BTreeMap<usize, usize>,
}

impl FrequencyGroups {
    pub fn of(&self, category: usize) -> FrequencyGroup {
        self.group[&category]
    }

    pub fn members(&self, which: FrequencyGroup) -> Vec<usize> {
        self.group
            .iter()
            .filter(|(_, &g)| g == which)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn all_groups_nonempty(&self) -> bool {
        [
            FrequencyGroup::Rare,
            FrequencyGroup::Common,
            FrequencyGroup::Frequent,
        ]
        .iter()
        .all(|&g| self.group.values().any(|&v| v == g))
    }
}

/// Bin categories 0..k by the number of detection images containing them.
/// Thresholds are `1-10 / 11-100 / >100`, each scaled by `threshold_scale`.
/// Every category must appear in at least one image.
pub fn assign_frequency_groups(
    detection: &[DetectionImage],
    num_categories: usize,
    threshold_scale: f64,
) -> Result<FrequencyGroups> {
    let mut image_count: BTreeMap<usize, usize> = (0..num_categories).map(|c| (c, 0)).collect();
    for img in detection {
        let mut seen: Vec<usize> = img.annotations.iter().map(|a| a.category).collect();
        seen.sort_unstable();
        seen.dedup();
        for c in seen {
            *image_count
                .get_mut(&c)
                .ok_or_else(|| ClisError::Dataset(format!("category {c} out of range")))? += 1;
        }
    }
    let rare_max = 10.0 * threshold_scale;
    let common_max = 100.0 * threshold_scale;
    let mut group = BTreeMap::new();
    for (&c, &n) in &image_count {
        if n == 0 {
            return Err(ClisError::Dataset(format!(
                "category {c} appears in no detection image"
            )));
        }
        let g = if (n as f64) <= rare_max {
            FrequencyGroup::Rare
        } else if (n as f64) <= common_max {
            FrequencyGroup::Common
        } else {
            FrequencyGroup::Frequent
        };
        group.insert(c, g);
    }
    Ok(FrequencyGroups { group, image_count })
}

/// Repeat factor of one image: `max over its categories of
/// max(1, sqrt(threshold / f_c))` where `f_c` is the fraction of images
/// containing category `c`.
pub fn repeat_factor(image: &DetectionImage, fractions: &BTreeMap<usize, f64>, threshold: f64) -> f64 {
    image
        .annotations
        .iter()
        .map(|a| (threshold / fractions[&a.category]).sqrt().max(1.0))
        .fold(1.0, f64::max)
}

/// One epoch of image ids under repeat-factor sampling: each image is listed
/// `floor(r)` times plus one more with probability `frac(r)` (stochastic
/// rounding), then the list is shuffled. Deterministic given the seed.
pub fn repeat_factor_sample(
    detection: &[DetectionImage],
    threshold: f64,
    seed: u64,
) -> Vec<u64> {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "repeat-factor threshold must lie in (0,1)"
    );
    let n = detection.len() as f64;
    let mut fractions: BTreeMap<usize, f64> = BTreeMap::new();
    for img in detection {
        let mut seen: Vec<usize> = img.annotations.iter().map(|a| a.category).collect();
        seen.sort_unstable();
        seen.dedup();
        for c in seen {
            *fractions.entry(c).or_insert(0.0) += 1.0;
        }
    }
    for f in fractions.values_mut() {
        *f /= n;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch = Vec::new();
    for img in detection {
        let r = repeat_factor(img, &fractions, threshold);
        let mut copies = r.floor() as usize;
        if rng.gen::<f64>() < r.fract() {
            copies += 1;
        }
        for _ in 0..copies {
            epoch.push(img.image_id);
        }
    }
    // Fisher-Yates
    for i in (1..epoch.len()).rev() {
        let j = rng.gen_range(0..=i);
        epoch.swap(i, j);
    }
    epoch
}

#[cfg(test)]
pub(crate) fn tiny_detection_image(image_id: u64, categories: &[usize]) -> DetectionImage {
    DetectionImage {
        image_id,
        pixels: ImageData::filled(8, 8, [40, 40, 40]),
        annotations: categories
            .iter()
            .map(|&c| InstanceAnnotation {
                bbox: BoxCxcywh::new(4.0, 4.0, 4.0, 4.0),
                category: c,
            })
            .collect(),
    }
}
