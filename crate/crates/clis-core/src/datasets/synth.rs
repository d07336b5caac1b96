//! Synthetic long-tailed benchmark: textured shapes on cluttered backgrounds.
//!
//! Detection images draw instance categories from a power law so the
//! frequency bins are populated; weak images are object-centric (one large
//! labeled instance near the center, smaller distractors around it) over a
//! near-uniform label distribution, mirroring how image-level datasets are
//! collected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_frequency_groups, CategorySpec, DetectionImage, FrequencyGroups, ImageData,
    InstanceAnnotation, RenderRecipe, ShapeKind, TextureKind, WeakImage,
};
use crate::error::{ClisError, Result};
use crate::geometry::{iou, BoxCxcywh};
use crate::nn::fnv1a64;

pub const DETECTION_ID_BASE: u64 = 1;
pub const VAL_ID_BASE: u64 = 500_001;
pub const WEAK_ID_BASE: u64 = 1_000_001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub num_categories: usize,
    /// Exponent of the rank power law used when sampling instance categories.
    pub power_exponent: f64,
    pub image_size: usize,
    pub detection_images: usize,
    /// `|D_i| = weak_multiplier * |D_d|`.
    pub weak_multiplier: f64,
    pub val_images: usize,
    /// The `weak_excluded` most frequent ranks are left out of `C_i`.
    pub weak_excluded: usize,
    /// Scales the 1-10 / 11-100 / >100 frequency thresholds.
    pub frequency_scale: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            num_categories: 20,
            power_exponent: 1.6,
            image_size: 64,
            detection_images: 280,
            weak_multiplier: 10.0,
            val_images: 160,
            weak_excluded: 2,
            frequency_scale: 1.0,
            seed: 7,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 3 {
            return Err(ClisError::Config(format!(
                "need at least 3 categories to populate all frequency groups, got {}",
                self.num_categories
            )));
        }
        if self.power_exponent <= 0.0 || !self.power_exponent.is_finite() {
            return Err(ClisError::Config("power_exponent must be positive".into()));
        }
        if self.image_size < 32 {
            return Err(ClisError::Config("image_size must be >= 32".into()));
        }
        if self.weak_multiplier < 0.0 {
            return Err(ClisError::Config("weak_multiplier must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything the pipeline needs, generated in memory.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub categories: Vec<CategorySpec>,
    pub detection: Vec<DetectionImage>,
    pub weak: Vec<WeakImage>,
    pub val: Vec<DetectionImage>,
    pub groups: FrequencyGroups,
    /// Ground-truth box of each weak image's labeled instance. Diagnostic
    /// only; region generation must recover regions from a detector instead.
    pub weak_true_boxes: Vec<BoxCxcywh>,
}

impl Benchmark {
    /// Categories eligible for weak supervision (`C_i`).
    pub fn weak_categories(&self) -> Vec<usize> {
        (self.config.weak_excluded..self.config.num_categories).collect()
    }

    pub fn detection_by_id(&self, id: u64) -> &DetectionImage {
        let idx = (id - DETECTION_ID_BASE) as usize;
        &self.detection[idx]
    }
}

const PALETTE: [([u8; 3], &str); 7] = [
    ([200, 40, 40], "red"),
    ([40, 170, 60], "green"),
    ([50, 80, 210], "blue"),
    ([220, 200, 40], "yellow"),
    ([190, 60, 190], "magenta"),
    ([50, 190, 200], "cyan"),
    ([230, 140, 40], "orange"),
];

const SHAPES: [(ShapeKind, &str); 6] = [
    (ShapeKind::Circle, "circle"),
    (ShapeKind::Square, "square"),
    (ShapeKind::Triangle, "triangle"),
    (ShapeKind::Diamond, "diamond"),
    (ShapeKind::Ring, "ring"),
    (ShapeKind::Cross, "cross"),
];

const TEXTURES: [(TextureKind, &str); 3] = [
    (TextureKind::Solid, "solid"),
    (TextureKind::Stripes, "striped"),
    (TextureKind::Dots, "dotted"),
];

/// Categories take distinct (shape, color, texture) combinations, walked in
/// a scrambled order so adjacent ids differ in more than one attribute.
fn build_categories(k: usize) -> Result<Vec<CategorySpec>> {
    let total = SHAPES.len() * PALETTE.len() * TEXTURES.len();
    if k > total {
        return Err(ClisError::Config(format!(
            "at most {total} distinct categories supported, requested {k}"
        )));
    }
    // 37 is coprime with 126, so the walk visits every combination once.
    let mut specs = Vec::with_capacity(k);
    for i in 0..k {
        let combo = (i * 37) % total;
        let shape = SHAPES[combo % SHAPES.len()];
        let color = PALETTE[(combo / SHAPES.len()) % PALETTE.len()];
        let texture = TEXTURES[combo / (SHAPES.len() * PALETTE.len())];
        let secondary = PALETTE[(combo / SHAPES.len() + 3) % PALETTE.len()].0;
        specs.push(CategorySpec {
            id: i,
            name: format!("{}_{}_{}", texture.1, color.1, shape.1),
            recipe: RenderRecipe {
                shape: shape.0,
                color: color.0,
                secondary,
                texture: texture.0,
            },
        });
    }
    Ok(specs)
}

fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(tag.as_bytes()) ^ index.wrapping_mul(0x9E3779B97F4A7C15))
}

fn jitter_color(base: [u8; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        let j: i32 = rng.gen_range(-18..=18);
        out[c] = (base[c] as i32 + j).clamp(0, 255) as u8;
    }
    out
}

fn render_background(img: &mut ImageData, rng: &mut ChaCha8Rng) {
    let base: u8 = rng.gen_range(85..=150);
    let tint: [i32; 3] = [
        rng.gen_range(-12..=12),
        rng.gen_range(-12..=12),
        rng.gen_range(-12..=12),
    ];
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let noise: i32 = rng.gen_range(-8..=8);
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (base as i32 + tint[c] + noise).clamp(0, 255) as u8;
            }
            img.put(x, y, px);
        }
    }
    // muted clutter rectangles and bars
    let n = rng.gen_range(4..=8);
    for _ in 0..n {
        let cw = rng.gen_range(3..=w / 4);
        let ch = rng.gen_range(2..=h / 4);
        let x0 = rng.gen_range(0..w.saturating_sub(cw).max(1));
        let y0 = rng.gen_range(0..h.saturating_sub(ch).max(1));
        let g: u8 = rng.gen_range(60..=180);
        let off: i32 = rng.gen_range(-10..=10);
        let px = [
            (g as i32 + off).clamp(0, 255) as u8,
            g,
            (g as i32 - off).clamp(0, 255) as u8,
        ];
        img.fill_rect(x0, y0, cw, ch, px);
    }
}

fn shape_member(shape: ShapeKind, nx: f64, ny: f64) -> bool {
    match shape {
        ShapeKind::Circle => nx * nx + ny * ny <= 1.0,
        ShapeKind::Square => true,
        ShapeKind::Triangle => nx.abs() <= (ny + 1.0) * 0.5,
        ShapeKind::Diamond => nx.abs() + ny.abs() <= 1.0,
        ShapeKind::Ring => {
            let r = (nx * nx + ny * ny).sqrt();
            (0.55..=1.0).contains(&r)
        }
        ShapeKind::Cross => nx.abs() <= 0.34 || ny.abs() <= 0.34,
    }
}

fn draw_instance(img: &mut ImageData, bbox: &BoxCxcywh, recipe: &RenderRecipe, rng: &mut ChaCha8Rng) {
    let primary = jitter_color(recipe.color, rng);
    let secondary = jitter_color(recipe.secondary, rng);
    let (x0f, y0f, x1f, y1f) = bbox.corners();
    let x0 = x0f.max(0.0) as usize;
    let y0 = y0f.max(0.0) as usize;
    let x1 = (x1f.min(img.width() as f64) as usize).max(x0 + 1);
    let y1 = (y1f.min(img.height() as f64) as usize).max(y0 + 1);
    let period = ((bbox.w.min(bbox.h) / 4.0).round() as usize).max(3);
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            let nx = ((x as f64 + 0.5) - bbox.cx) / (bbox.w * 0.5);
            let ny = ((y as f64 + 0.5) - bbox.cy) / (bbox.h * 0.5);
            if !shape_member(recipe.shape, nx, ny) {
                continue;
            }
            let local_x = x - x0;
            let local_y = y - y0;
            let use_secondary = match recipe.texture {
                TextureKind::Solid => false,
                TextureKind::Stripes => (local_x + local_y) / period % 2 == 1,
                TextureKind::Dots => {
                    let dx = local_x % period;
                    let dy = local_y % period;
                    let r = period as f64 / 3.0;
                    let cx = period as f64 / 2.0;
                    let ddx = dx as f64 + 0.5 - cx;
                    let ddy = dy as f64 + 0.5 - cx;
                    ddx * ddx + ddy * ddy <= r * r
                }
            };
            img.put(x, y, if use_secondary { secondary } else { primary });
        }
    }
}

/// Sample a box of roughly `side` pixels (aspect-jittered) placed fully
/// inside the canvas with IoU at most `max_overlap` against `existing`.
fn place_box(
    rng: &mut ChaCha8Rng,
    image_size: usize,
    side_range: (f64, f64),
    existing: &[BoxCxcywh],
    max_overlap: f64,
    center_pull: Option<f64>,
) -> Option<BoxCxcywh> {
    let s = image_size as f64;
    for _ in 0..20 {
        let side = rng.gen_range(side_range.0..side_range.1) * s;
        let aspect = rng.gen_range(0.75..1.33);
        let w = (side * aspect).clamp(6.0, s - 2.0);
        let h = (side / aspect).clamp(6.0, s - 2.0);
        let (cx, cy) = match center_pull {
            Some(radius) => (
                s * 0.5 + rng.gen_range(-radius..radius) * s,
                s * 0.5 + rng.gen_range(-radius..radius) * s,
            ),
            None => (
                rng.gen_range(w * 0.5 + 1.0..s - w * 0.5 - 1.0),
                rng.gen_range(h * 0.5 + 1.0..s - h * 0.5 - 1.0),
            ),
        };
        let b = BoxCxcywh::new(cx, cy, w, h);
        if !b.within_bounds(s, s) {
            continue;
        }
        if existing.iter().all(|e| iou(e, &b) <= max_overlap) {
            return Some(b);
        }
    }
    None
}

/// Power-law categorical sampler over ranks `0..k`: `p(r) ~ (r+1)^-exponent`.
struct PowerLaw {
    cdf: Vec<f64>,
}

impl PowerLaw {
    fn new(k: usize, exponent: f64) -> Self {
        let mut weights: Vec<f64> = (0..k).map(|r| ((r + 1) as f64).powf(-exponent)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        for w in weights.iter_mut() {
            acc += *w / total;
            *w = acc;
        }
        Self { cdf: weights }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        self.cdf.iter().position(|&c| u <= c).unwrap_or(self.cdf.len() - 1)
    }
}

fn render_detection_image(
    image_id: u64,
    categories: &[CategorySpec],
    forced_category: Option<usize>,
    law: &PowerLaw,
    cfg: &BenchmarkConfig,
    rng: &mut ChaCha8Rng,
) -> DetectionImage {
    let s = cfg.image_size;
    let mut pixels = ImageData::new(s, s);
    render_background(&mut pixels, rng);
    let n_inst = rng.gen_range(2..=5);
    let mut annotations: Vec<InstanceAnnotation> = Vec::new();
    for slot in 0..n_inst {
        let category = match (slot, forced_category) {
            (0, Some(c)) => c,
            _ => law.sample(rng),
        };
        let existing: Vec<BoxCxcywh> = annotations.iter().map(|a| a.bbox).collect();
        let Some(bbox) = place_box(rng, s, (0.22, 0.47), &existing, 0.25, None) else {
            continue;
        };
        draw_instance(&mut pixels, &bbox, &categories[category].recipe, rng);
        annotations.push(InstanceAnnotation { bbox, category });
    }
    debug_assert!(!annotations.is_empty(), "first placement cannot fail");
    DetectionImage {
        image_id,
        pixels,
        annotations,
    }
}

fn render_weak_image(
    image_id: u64,
    label: usize,
    categories: &[CategorySpec],
    cfg: &BenchmarkConfig,
    rng: &mut ChaCha8Rng,
) -> (WeakImage, BoxCxcywh) {
    let s = cfg.image_size;
    let mut pixels = ImageData::new(s, s);
    render_background(&mut pixels, rng);
    // object-centric main instance
    let main = place_box(rng, s, (0.42, 0.68), &[], 1.0, Some(0.12))
        .unwrap_or_else(|| BoxCxcywh::new(s as f64 / 2.0, s as f64 / 2.0, s as f64 * 0.5, s as f64 * 0.5));
    let main = main.clipped(s as f64, s as f64);
    // peripheral distractors of other categories, drawn first so the main
    // instance stays on top where they overlap
    let n_distract = rng.gen_range(0..=2);
    let mut placed = vec![main];
    for _ in 0..n_distract {
        let mut distract_cat = rng.gen_range(0..categories.len());
        if distract_cat == label {
            distract_cat = (distract_cat + 1) % categories.len();
        }
        if let Some(b) = place_box(rng, s, (0.16, 0.28), &placed, 0.15, None) {
            draw_instance(&mut pixels, &b, &categories[distract_cat].recipe, rng);
            placed.push(b);
        }
    }
    draw_instance(&mut pixels, &main, &categories[label].recipe, rng);
    (
        WeakImage {
            image_id,
            pixels,
            label,
            predefined_region: None,
        },
        main,
    )
}

fn render_val_image(
    image_id: u64,
    index: usize,
    categories: &[CategorySpec],
    cfg: &BenchmarkConfig,
    rng: &mut ChaCha8Rng,
) -> DetectionImage {
    let s = cfg.image_size;
    let mut pixels = ImageData::new(s, s);
    render_background(&mut pixels, rng);
    let n_inst = rng.gen_range(2..=4);
    let mut annotations: Vec<InstanceAnnotation> = Vec::new();
    for slot in 0..n_inst {
        // round-robin first instance keeps per-category support near-uniform
        let category = if slot == 0 {
            index % categories.len()
        } else {
            rng.gen_range(0..categories.len())
        };
        let existing: Vec<BoxCxcywh> = annotations.iter().map(|a| a.bbox).collect();
        let Some(bbox) = place_box(rng, s, (0.22, 0.47), &existing, 0.25, None) else {
            continue;
        };
        draw_instance(&mut pixels, &bbox, &categories[category].recipe, rng);
        annotations.push(InstanceAnnotation { bbox, category });
    }
    DetectionImage {
        image_id,
        pixels,
        annotations,
    }
}

/// Generate the full benchmark. Deterministic: the same config (seed
/// included) produces byte-identical pixels and annotations.
pub fn generate_longtail_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    config.validate()?;
    let categories = build_categories(config.num_categories)?;
    let law = PowerLaw::new(config.num_categories, config.power_exponent);

    let mut detection = Vec::with_capacity(config.detection_images);
    for i in 0..config.detection_images {
        let mut rng = stream(config.seed, "detection", i as u64);
        detection.push(render_detection_image(
            DETECTION_ID_BASE + i as u64,
            &categories,
            None,
            &law,
            config,
            &mut rng,
        ));
    }
    // guarantee every category appears in at least one image
    let mut present = vec![false; config.num_categories];
    for img in &detection {
        for a in &img.annotations {
            present[a.category] = true;
        }
    }
    for c in 0..config.num_categories {
        if !present[c] {
            let idx = detection.len();
            let mut rng = stream(config.seed, "detection-fixup", c as u64);
            detection.push(render_detection_image(
                DETECTION_ID_BASE + idx as u64,
                &categories,
                Some(c),
                &law,
                config,
                &mut rng,
            ));
        }
    }

    let groups = assign_frequency_groups(&detection, config.num_categories, config.frequency_scale)?;
    if !groups.all_groups_nonempty() {
        return Err(ClisError::Dataset(
            "generated dataset does not populate all three frequency groups; \
             adjust power_exponent or detection_images"
                .into(),
        ));
    }

    let weak_cats: Vec<usize> = (config.weak_excluded..config.num_categories).collect();
    if weak_cats.is_empty() {
        return Err(ClisError::Config(
            "weak_excluded leaves no categories for image-level supervision".into(),
        ));
    }
    let n_weak = (config.weak_multiplier * detection.len() as f64).round() as usize;
    let mut weak = Vec::with_capacity(n_weak);
    let mut weak_true_boxes = Vec::with_capacity(n_weak);
    for i in 0..n_weak {
        let label = weak_cats[i % weak_cats.len()];
        let mut rng = stream(config.seed, "weak", i as u64);
        let (img, true_box) =
            render_weak_image(WEAK_ID_BASE + i as u64, label, &categories, config, &mut rng);
        weak.push(img);
        weak_true_boxes.push(true_box);
    }

    let mut val = Vec::with_capacity(config.val_images);
    for i in 0..config.val_images {
        let mut rng = stream(config.seed, "val", i as u64);
        val.push(render_val_image(
            VAL_ID_BASE + i as u64,
            i,
            &categories,
            config,
            &mut rng,
        ));
    }

    Ok(Benchmark {
        config: config.clone(),
        categories,
        detection,
        weak,
        val,
        groups,
        weak_true_boxes,
    })
}
