//! On-disk dataset layout.
//!
//! ```text
//! <dir>/images/<id>.png        all splits share one image directory
//! <dir>/annotations.json       [{image_id, boxes: [[cx,cy,w,h]..], categories: [id..]}]
//! <dir>/val_annotations.json   same record shape, held-out split
//! <dir>/weak_annotations.json  [{image_id, label, predefined_box: [cx,cy,w,h] | null}]
//! <dir>/categories.json        [{id, name, group}]
//! <dir>/benchmark_meta.json    generator config + render recipes (resume support)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{Benchmark, BenchmarkConfig};
use super::{
    assign_frequency_groups, CategorySpec, DetectionImage, FrequencyGroup, ImageData,
    InstanceAnnotation, WeakImage,
};
use crate::error::{ClisError, Result};
use crate::geometry::BoxCxcywh;

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image_id: u64,
    boxes: Vec<[f64; 4]>,
    categories: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeakRecord {
    image_id: u64,
    label: usize,
    predefined_box: Option<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct CategoryRecord {
    id: usize,
    name: String,
    group: FrequencyGroup,
}

#[derive(Serialize, Deserialize)]
struct BenchmarkMeta {
    config: BenchmarkConfig,
    categories: Vec<CategorySpec>,
    weak_true_boxes: Vec<[f64; 4]>,
}

fn box_to_arr(b: &BoxCxcywh) -> [f64; 4] {
    [b.cx, b.cy, b.w, b.h]
}

fn arr_to_box(a: &[f64; 4]) -> BoxCxcywh {
    BoxCxcywh::new(a[0], a[1], a[2], a[3])
}

fn write_png(path: &Path, img: &ImageData) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.raw().to_vec())
        .expect("pixel buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<ImageData> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageData::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            out.put(x, y, [px[0], px[1], px[2]]);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_vec_pretty(value)?;
    fs::write(path, body).map_err(|e| ClisError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = fs::read(path).map_err(|e| ClisError::io(path, e))?;
    Ok(serde_json::from_slice(&body)?)
}

fn detection_records(images: &[DetectionImage]) -> Vec<DetectionRecord> {
    images
        .iter()
        .map(|img| DetectionRecord {
            image_id: img.image_id,
            boxes: img.annotations.iter().map(|a| box_to_arr(&a.bbox)).collect(),
            categories: img.annotations.iter().map(|a| a.category).collect(),
        })
        .collect()
}

fn records_to_detection(
    records: Vec<DetectionRecord>,
    images_dir: &Path,
) -> Result<Vec<DetectionImage>> {
    records
        .into_iter()
        .map(|r| {
            let pixels = read_png(&images_dir.join(format!("{}.png", r.image_id)))?;
            if r.boxes.len() != r.categories.len() {
                return Err(ClisError::Dataset(format!(
                    "image {}: box/category count mismatch",
                    r.image_id
                )));
            }
            Ok(DetectionImage {
                image_id: r.image_id,
                pixels,
                annotations: r
                    .boxes
                    .iter()
                    .zip(&r.categories)
                    .map(|(b, &c)| InstanceAnnotation {
                        bbox: arr_to_box(b),
                        category: c,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Write the whole benchmark under `dir`.
pub fn save_benchmark(dir: &Path, benchmark: &Benchmark) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| ClisError::io(&images_dir, e))?;

    for img in benchmark.detection.iter().chain(benchmark.val.iter()) {
        write_png(&images_dir.join(format!("{}.png", img.image_id)), &img.pixels)?;
    }
    for img in &benchmark.weak {
        write_png(&images_dir.join(format!("{}.png", img.image_id)), &img.pixels)?;
    }

    write_json(
        &dir.join("annotations.json"),
        &detection_records(&benchmark.detection),
    )?;
    write_json(
        &dir.join("val_annotations.json"),
        &detection_records(&benchmark.val),
    )?;
    save_weak_annotations(dir, &benchmark.weak)?;

    let cats: Vec<CategoryRecord> = benchmark
        .categories
        .iter()
        .map(|c| CategoryRecord {
            id: c.id,
            name: c.name.clone(),
            group: benchmark.groups.of(c.id),
        })
        .collect();
    write_json(&dir.join("categories.json"), &cats)?;

    write_json(
        &dir.join("benchmark_meta.json"),
        &BenchmarkMeta {
            config: benchmark.config.clone(),
            categories: benchmark.categories.clone(),
            weak_true_boxes: benchmark.weak_true_boxes.iter().map(box_to_arr).collect(),
        },
    )?;
    Ok(())
}

/// Rewrite `weak_annotations.json` (region generation updates boxes in place).
pub fn save_weak_annotations(dir: &Path, weak: &[WeakImage]) -> Result<()> {
    let records: Vec<WeakRecord> = weak
        .iter()
        .map(|w| WeakRecord {
            image_id: w.image_id,
            label: w.label,
            predefined_box: w.predefined_region.as_ref().map(box_to_arr),
        })
        .collect();
    write_json(&dir.join("weak_annotations.json"), &records)
}

/// Load a benchmark previously written by [`save_benchmark`].
pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let meta: BenchmarkMeta = read_json(&dir.join("benchmark_meta.json"))?;
    let images_dir = dir.join("images");

    let detection = records_to_detection(read_json(&dir.join("annotations.json"))?, &images_dir)?;
    let val = records_to_detection(read_json(&dir.join("val_annotations.json"))?, &images_dir)?;

    let weak_records: Vec<WeakRecord> = read_json(&dir.join("weak_annotations.json"))?;
    let weak: Vec<WeakImage> = weak_records
        .into_iter()
        .map(|r| {
            let pixels = read_png(&images_dir.join(format!("{}.png", r.image_id)))?;
            Ok(WeakImage {
                image_id: r.image_id,
                pixels,
                label: r.label,
                predefined_region: r.predefined_box.as_ref().map(arr_to_box),
            })
        })
        .collect::<Result<_>>()?;

    let groups = assign_frequency_groups(
        &detection,
        meta.config.num_categories,
        meta.config.frequency_scale,
    )?;

    Ok(Benchmark {
        config: meta.config,
        categories: meta.categories,
        detection,
        weak,
        val,
        groups,
        weak_true_boxes: meta.weak_true_boxes.iter().map(arr_to_box).collect(),
    })
}
