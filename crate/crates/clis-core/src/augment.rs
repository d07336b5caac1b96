//! Weak-image augmentation (scale, flip, cutout, mosaic) and the
//! instance-paste operation that builds the detection-scene view of a weak
//! instance.
//!
//! Geometry and pixels transform together: every op returns the applied map
//! so boxes can be traced through it, and pixel-level invariants (quadrant
//! tiling, paste equality) hold exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DetectionImage, ImageData, WeakImage};
use crate::error::{ClisError, Result};
use crate::geometry::{intersection_over_area, iou, BoxCxcywh};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Cutout hole side as a fraction of the (smaller) image side.
    pub cutout_frac: f64,
    /// Re-sample the hole while it covers more than this fraction of the
    /// pre-defined region; after `cutout_tries` failures the cutout is
    /// skipped entirely so the labeled evidence always survives.
    pub cutout_max_region_cover: f64,
    pub cutout_tries: usize,
    pub paste_scale_range: (f64, f64),
    pub paste_max_iou: f64,
    pub paste_tries: usize,
    pub mosaic_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.5, 1.5),
            flip_prob: 0.5,
            cutout_frac: 0.25,
            cutout_max_region_cover: 0.5,
            cutout_tries: 50,
            paste_scale_range: (0.5, 1.0),
            paste_max_iou: 0.05,
            paste_tries: 20,
            mosaic_size: 128,
        }
    }
}

/// Record of the geometric map applied by an augmentation: scale by
/// `(sx, sy)`, then horizontal flip if `flipped`. The cutout hole, when one
/// was placed, is `(x0, y0, w, h)` in output coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoMap {
    pub sx: f64,
    pub sy: f64,
    pub flipped: bool,
    pub out_w: usize,
    pub out_h: usize,
    pub cutout_rect: Option<[usize; 4]>,
}

impl GeoMap {
    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let px = x * self.sx;
        let py = y * self.sy;
        if self.flipped {
            (self.out_w as f64 - px, py)
        } else {
            (px, py)
        }
    }

    pub fn apply_box(&self, b: &BoxCxcywh) -> BoxCxcywh {
        let (cx, cy) = self.apply_point(b.cx, b.cy);
        BoxCxcywh::new(cx, cy, b.w * self.sx, b.h * self.sy)
    }
}

/// Scale + optional flip on pixels, returning the map. Nearest-neighbor
/// resampling keeps pixel/box correspondence within one pixel.
fn apply_geo(pixels: &ImageData, scale: f64, flip: bool) -> (ImageData, GeoMap) {
    let (w, h) = (pixels.width(), pixels.height());
    let out_w = ((w as f64 * scale).round() as usize).max(8);
    let out_h = ((h as f64 * scale).round() as usize).max(8);
    let mut out = if out_w == w && out_h == h {
        pixels.clone()
    } else {
        pixels.resize_nearest(out_w, out_h)
    };
    if flip {
        out = out.hflip();
    }
    (
        out,
        GeoMap {
            sx: out_w as f64 / w as f64,
            sy: out_h as f64 / h as f64,
            flipped: flip,
            out_w,
            out_h,
            cutout_rect: None,
        },
    )
}

/// One gray square hole, re-sampled so it never hides more than the allowed
/// fraction of the pre-defined region. Returns the hole rect if placed.
fn apply_cutout(
    pixels: &mut ImageData,
    region: Option<&BoxCxcywh>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Option<[usize; 4]> {
    let (w, h) = (pixels.width(), pixels.height());
    let side = ((w.min(h) as f64 * cfg.cutout_frac).round() as usize).max(2);
    if side >= w || side >= h {
        return None;
    }
    for _ in 0..cfg.cutout_tries {
        let x0 = rng.gen_range(0..=w - side);
        let y0 = rng.gen_range(0..=h - side);
        let hole = BoxCxcywh::from_corners(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64);
        let acceptable = match region {
            Some(r) => intersection_over_area(r, &hole) <= cfg.cutout_max_region_cover,
            None => true,
        };
        if acceptable {
            pixels.fill_rect(x0, y0, side, side, [128, 128, 128]);
            return Some([x0, y0, side, side]);
        }
    }
    None
}

/// Scale jitter, horizontal flip, cutout. The pre-defined region follows the
/// geometric map; the cutout respects it.
pub fn augment_weak(
    image: &WeakImage,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (WeakImage, GeoMap) {
    let scale = rng.gen_range(cfg.scale_range.0..cfg.scale_range.1);
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let (mut pixels, mut map) = apply_geo(&image.pixels, scale, flip);
    let region = image.predefined_region.as_ref().map(|r| map.apply_box(r));
    map.cutout_rect = apply_cutout(&mut pixels, region.as_ref(), cfg, rng);
    (
        WeakImage {
            image_id: image.image_id,
            pixels,
            label: image.label,
            predefined_region: region,
        },
        map,
    )
}

/// Scale jitter and horizontal flip on a detection image; all annotation
/// boxes follow the map. No cutout or mosaic on this pipeline.
pub fn augment_detection(
    image: &DetectionImage,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (DetectionImage, GeoMap) {
    let scale = rng.gen_range(cfg.scale_range.0..cfg.scale_range.1);
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let (pixels, map) = apply_geo(&image.pixels, scale, flip);
    let annotations = image
        .annotations
        .iter()
        .map(|a| crate::datasets::InstanceAnnotation {
            bbox: map.apply_box(&a.bbox),
            category: a.category,
        })
        .collect();
    (
        DetectionImage {
            image_id: image.image_id,
            pixels,
            annotations,
        },
        map,
    )
}

/// Where one mosaic quadrant came from and how it was mapped.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantProvenance {
    pub source_id: u64,
    /// Source crop in source coordinates (the full source image here).
    pub source_crop: BoxCxcywh,
    /// Destination quadrant in mosaic coordinates.
    pub dest: BoxCxcywh,
    /// Pre-defined regions of the source mapped into mosaic coordinates.
    pub mapped_regions: Vec<BoxCxcywh>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosaicImage {
    pub pixels: ImageData,
    pub provenance: [QuadrantProvenance; 4],
}

/// Tile four weak images around a random center in the middle half of an
/// `out_size` canvas. Each source is resized (whole image) into its
/// quadrant, so the per-quadrant map is the affine `source -> dest` scale.
pub fn mosaic(images: &[WeakImage], out_size: usize, rng: &mut ChaCha8Rng) -> Result<MosaicImage> {
    if images.len() != 4 {
        return Err(ClisError::Dataset(format!(
            "mosaic requires exactly 4 images, got {}",
            images.len()
        )));
    }
    if out_size < 32 || out_size % 2 != 0 {
        return Err(ClisError::Config(format!(
            "mosaic out_size must be even and >= 32, got {out_size}"
        )));
    }
    let s = out_size;
    let cx = rng.gen_range(s / 4..=3 * s / 4);
    let cy = rng.gen_range(s / 4..=3 * s / 4);
    // quadrants: TL, TR, BL, BR; half-open rects tile the canvas exactly
    let rects = [
        (0, 0, cx, cy),
        (cx, 0, s - cx, cy),
        (0, cy, cx, s - cy),
        (cx, cy, s - cx, s - cy),
    ];
    let mut pixels = ImageData::new(s, s);
    let mut provenance = Vec::with_capacity(4);
    for (img, &(qx, qy, qw, qh)) in images.iter().zip(&rects) {
        let resized = img.pixels.resize_nearest(qw.max(1), qh.max(1));
        pixels.blit(&resized, qx, qy);
        let sx = qw as f64 / img.pixels.width() as f64;
        let sy = qh as f64 / img.pixels.height() as f64;
        let mapped_regions = img
            .predefined_region
            .iter()
            .map(|r| {
                BoxCxcywh::new(
                    r.cx * sx + qx as f64,
                    r.cy * sy + qy as f64,
                    r.w * sx,
                    r.h * sy,
                )
            })
            .collect();
        provenance.push(QuadrantProvenance {
            source_id: img.image_id,
            source_crop: BoxCxcywh::from_corners(
                0.0,
                0.0,
                img.pixels.width() as f64,
                img.pixels.height() as f64,
            ),
            dest: BoxCxcywh::from_corners(
                qx as f64,
                qy as f64,
                (qx + qw) as f64,
                (qy + qh) as f64,
            ),
            mapped_regions,
        });
    }
    Ok(MosaicImage {
        pixels,
        provenance: provenance.try_into().expect("exactly four quadrants"),
    })
}

/// A weak instance pasted into a detection scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PastedComposite {
    pub pixels: ImageData,
    /// Exact placement, integer-aligned so the pasted pixels equal the
    /// resized source crop byte for byte.
    pub paste_box: BoxCxcywh,
    pub source_id: u64,
    pub source_crop: BoxCxcywh,
    pub label: usize,
}

/// Crop the weak image's pre-defined region, rescale it, and place it in the
/// target scene with bounded overlap against existing annotations.
pub fn paste_instance(
    weak: &WeakImage,
    target: &DetectionImage,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PastedComposite> {
    let region = weak.predefined_region.as_ref().ok_or_else(|| {
        ClisError::Dataset(format!(
            "weak image {} has no pre-defined region; run region generation first",
            weak.image_id
        ))
    })?;
    let (tw, th) = (target.pixels.width(), target.pixels.height());

    // integer crop rect clamped to the source
    let (rx0, ry0, rx1, ry1) = region.corners();
    let cx0 = (rx0.round().max(0.0) as usize).min(weak.pixels.width() - 1);
    let cy0 = (ry0.round().max(0.0) as usize).min(weak.pixels.height() - 1);
    let cw = ((rx1.round() as usize).min(weak.pixels.width()) - cx0).max(1);
    let ch = ((ry1.round() as usize).min(weak.pixels.height()) - cy0).max(1);
    let crop = weak.pixels.crop(cx0, cy0, cw, ch);

    let scale = rng.gen_range(cfg.paste_scale_range.0..cfg.paste_scale_range.1);
    let mut dw = ((cw as f64 * scale).round() as usize).clamp(4, tw.saturating_sub(1));
    let mut dh = ((ch as f64 * scale).round() as usize).clamp(4, th.saturating_sub(1));
    // preserve enough of the aspect if clamping hit one side
    dw = dw.min(tw - 1);
    dh = dh.min(th - 1);
    let resized = crop.resize_nearest(dw, dh);

    let existing: Vec<BoxCxcywh> = target.annotations.iter().map(|a| a.bbox).collect();
    for _ in 0..cfg.paste_tries {
        let x0 = rng.gen_range(0..=tw - dw);
        let y0 = rng.gen_range(0..=th - dh);
        let paste_box =
            BoxCxcywh::from_corners(x0 as f64, y0 as f64, (x0 + dw) as f64, (y0 + dh) as f64);
        if existing.iter().any(|e| iou(e, &paste_box) > cfg.paste_max_iou) {
            continue;
        }
        let mut pixels = target.pixels.clone();
        pixels.blit(&resized, x0, y0);
        return Ok(PastedComposite {
            pixels,
            paste_box,
            source_id: weak.image_id,
            source_crop: BoxCxcywh::from_corners(
                cx0 as f64,
                cy0 as f64,
                (cx0 + cw) as f64,
                (cy0 + ch) as f64,
            ),
            label: weak.label,
        });
    }
    Err(ClisError::Unplaceable {
        attempts: cfg.paste_tries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::InstanceAnnotation;
    use rand::SeedableRng;

    fn weak_with_region(id: u64, w: usize, h: usize, color: [u8; 3]) -> WeakImage {
        WeakImage {
            image_id: id,
            pixels: ImageData::filled(w, h, color),
            label: 0,
            predefined_region: Some(BoxCxcywh::new(w as f64 / 2.0, h as f64 / 2.0, 10.0, 8.0)),
        }
    }

    /// Image where every pixel has a distinct color, for tracing geometry.
    fn gradient_image(w: usize, h: usize) -> ImageData {
        let mut img = ImageData::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn mosaic_quadrants_are_uniform_for_solid_sources() {
        let colors = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255]];
        let images: Vec<WeakImage> = colors
            .iter()
            .enumerate()
            .map(|(i, &c)| weak_with_region(i as u64, 40, 40, c))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = mosaic(&images, 64, &mut rng).unwrap();
        for (q, &color) in m.provenance.iter().zip(&colors) {
            let (x0, y0, x1, y1) = q.dest.corners();
            for y in y0 as usize..y1 as usize {
                for x in x0 as usize..x1 as usize {
                    assert_eq!(m.pixels.get(x, y), color, "quadrant not uniform at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn mosaic_tiles_exactly_and_is_deterministic() {
        let images: Vec<WeakImage> = (0..4)
            .map(|i| weak_with_region(i, 30 + i as usize, 30, [i as u8 * 60, 0, 0]))
            .collect();
        let m1 = mosaic(&images, 448, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let m2 = mosaic(&images, 448, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(m1.pixels.width(), 448);
        assert_eq!(m1.pixels.height(), 448);
        assert_eq!(m1, m2, "seeded mosaic must reproduce bit-exactly");

        let total_area: f64 = m1.provenance.iter().map(|q| q.dest.area()).sum();
        assert_eq!(total_area, 448.0 * 448.0);
        for i in 0..4 {
            for j in (i + 1)..4 {
                let a = &m1.provenance[i].dest;
                let b = &m1.provenance[j].dest;
                assert_eq!(iou(a, b), 0.0, "quadrants {i} and {j} overlap");
            }
            // mapped regions stay inside their quadrant
            for r in &m1.provenance[i].mapped_regions {
                let (x0, y0, x1, y1) = r.corners();
                let (qx0, qy0, qx1, qy1) = m1.provenance[i].dest.corners();
                assert!(x0 >= qx0 - 1e-9 && y0 >= qy0 - 1e-9 && x1 <= qx1 + 1e-9 && y1 <= qy1 + 1e-9);
            }
        }
    }

    #[test]
    fn mosaic_rejects_wrong_arity() {
        let images: Vec<WeakImage> = (0..3).map(|i| weak_with_region(i, 20, 20, [0; 3])).collect();
        assert!(mosaic(&images, 64, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn geo_map_flip_and_scale_transform_boxes() {
        let img = ImageData::filled(100, 50, [10, 10, 10]);
        let (_, map) = apply_geo(&img, 1.0, true);
        let r = map.apply_box(&BoxCxcywh::new(10.0, 20.0, 6.0, 8.0));
        assert_eq!(r.cx, 90.0);
        assert_eq!(r.cy, 20.0);

        let img = ImageData::filled(64, 64, [10, 10, 10]);
        let (scaled, map) = apply_geo(&img, 2.0, false);
        assert_eq!((scaled.width(), scaled.height()), (128, 128));
        let r = map.apply_box(&BoxCxcywh::new(16.0, 8.0, 10.0, 12.0));
        assert_eq!((r.cx, r.cy, r.w, r.h), (32.0, 16.0, 20.0, 24.0));
    }

    #[test]
    fn cutout_never_covers_most_of_the_region_over_many_draws() {
        let cfg = AugmentConfig::default();
        let base = WeakImage {
            image_id: 1,
            pixels: gradient_image(64, 64),
            label: 0,
            predefined_region: Some(BoxCxcywh::new(32.0, 30.0, 12.0, 10.0)),
        };
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, map) = augment_weak(&base, &cfg, &mut rng);
            if let Some([x0, y0, w, h]) = map.cutout_rect {
                let hole = BoxCxcywh::from_corners(
                    x0 as f64,
                    y0 as f64,
                    (x0 + w) as f64,
                    (y0 + h) as f64,
                );
                let region = out.predefined_region.unwrap();
                let cover = intersection_over_area(&region, &hole);
                assert!(
                    cover <= cfg.cutout_max_region_cover + 1e-12,
                    "seed {seed}: cutout covers {cover:.3} of the region"
                );
            }
        }
    }

    #[test]
    fn augmented_pixels_follow_the_recorded_map_within_one_pixel() {
        // every pixel of the gradient image encodes its own source
        // coordinates, so the output pixel at a mapped box corner can be
        // decoded and traced back through the map
        let base = DetectionImage {
            image_id: 3,
            pixels: gradient_image(64, 64),
            annotations: vec![InstanceAnnotation {
                bbox: BoxCxcywh::new(20.0, 28.0, 16.0, 12.0),
                category: 0,
            }],
        };
        let cfg = AugmentConfig::default();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, map) = augment_detection(&base, &cfg, &mut rng);
            let (bx0, by0, bx1, by1) = base.annotations[0].bbox.corners();
            for (x, y) in [(bx0, by0), (bx1 - 1.0, by1 - 1.0), (bx0, by1 - 1.0)] {
                let (mx, my) = map.apply_point(x, y);
                let cx = (mx.round() as usize).min(out.pixels.width() - 1);
                let cy = (my.round() as usize).min(out.pixels.height() - 1);
                let [r, g, _] = out.pixels.get(cx, cy);
                // decode the sampled source pixel and map it forward: it
                // must land within nearest-neighbor reach of the corner
                // (one pixel plus the two half-pixel center roundings)
                let (fx, fy) = map.apply_point(r as f64 + 0.5, g as f64 + 0.5);
                let dist = ((fx - mx).powi(2) + (fy - my).powi(2)).sqrt();
                assert!(
                    dist <= 2.0,
                    "seed {seed}: corner ({x},{y}) drifted {dist:.2} px under the map"
                );
            }
        }
    }

    #[test]
    fn paste_pixels_equal_resized_crop_exactly() {
        let weak = WeakImage {
            image_id: 11,
            pixels: gradient_image(64, 64),
            label: 4,
            predefined_region: Some(BoxCxcywh::new(30.0, 30.0, 20.0, 16.0)),
        };
        let target = DetectionImage {
            image_id: 1,
            pixels: ImageData::filled(64, 64, [7, 7, 7]),
            annotations: vec![],
        };
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = paste_instance(&weak, &target, &cfg, &mut rng).unwrap();
        let (x0, y0, x1, y1) = p.paste_box.corners();
        let (sx0, sy0, sx1, sy1) = p.source_crop.corners();
        let crop = weak.pixels.crop(
            sx0 as usize,
            sy0 as usize,
            (sx1 - sx0) as usize,
            (sy1 - sy0) as usize,
        );
        let resized = crop.resize_nearest((x1 - x0) as usize, (y1 - y0) as usize);
        for y in 0..resized.height() {
            for x in 0..resized.width() {
                assert_eq!(
                    p.pixels.get(x0 as usize + x, y0 as usize + y),
                    resized.get(x, y),
                    "paste not byte-exact at ({x},{y})"
                );
            }
        }
        assert_eq!(p.label, 4);
    }

    #[test]
    fn paste_respects_overlap_limit() {
        let weak = weak_with_region(5, 64, 64, [200, 0, 0]);
        let target = DetectionImage {
            image_id: 2,
            pixels: ImageData::filled(64, 64, [0; 3]),
            annotations: vec![
                InstanceAnnotation {
                    bbox: BoxCxcywh::new(16.0, 16.0, 20.0, 20.0),
                    category: 0,
                },
                InstanceAnnotation {
                    bbox: BoxCxcywh::new(48.0, 48.0, 20.0, 20.0),
                    category: 1,
                },
            ],
        };
        let cfg = AugmentConfig::default();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let Ok(p) = paste_instance(&weak, &target, &cfg, &mut rng) {
                for a in &target.annotations {
                    assert!(
                        iou(&a.bbox, &p.paste_box) <= cfg.paste_max_iou + 1e-12,
                        "seed {seed} violates the overlap limit"
                    );
                }
            }
        }
    }

    #[test]
    fn paste_on_fully_covered_target_is_unplaceable() {
        let weak = weak_with_region(5, 64, 64, [200, 0, 0]);
        let target = DetectionImage {
            image_id: 2,
            pixels: ImageData::filled(64, 64, [0; 3]),
            annotations: vec![InstanceAnnotation {
                bbox: BoxCxcywh::new(32.0, 32.0, 64.0, 64.0),
                category: 0,
            }],
        };
        let cfg = AugmentConfig {
            paste_max_iou: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        match paste_instance(&weak, &target, &cfg, &mut rng) {
            Err(ClisError::Unplaceable { .. }) => {}
            other => panic!("expected Unplaceable, got {other:?}"),
        }
    }

    #[test]
    fn paste_requires_a_region() {
        let weak = WeakImage {
            image_id: 9,
            pixels: ImageData::filled(32, 32, [1, 2, 3]),
            label: 0,
            predefined_region: None,
        };
        let target = DetectionImage {
            image_id: 2,
            pixels: ImageData::filled(64, 64, [0; 3]),
            annotations: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(paste_instance(&weak, &target, &AugmentConfig::default(), &mut rng).is_err());
    }
}
