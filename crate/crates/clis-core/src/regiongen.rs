//! Offline pre-defined region generation: run a trained baseline detector
//! over every weak image and keep, per image, the highest-scoring box of the
//! annotated category. Picking the globally highest-scoring box instead would
//! favour head categories, which is exactly what the rank-within-category
//! rule avoids.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{DetectionImage, WeakImage};
use crate::detector::Detector;
use crate::error::Result;
use crate::evalkit::{score_image, Detection};
use crate::geometry::BoxCxcywh;
use crate::nn::ParamStore;

/// A candidate box with its category and score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoxCxcywh,
    pub category: usize,
    pub score: f64,
}

impl From<&Detection> for ScoredBox {
    fn from(d: &Detection) -> Self {
        ScoredBox {
            bbox: d.bbox,
            category: d.category,
            score: d.score,
        }
    }
}

/// Apply the category-rank-first rule: the highest-scoring box whose category
/// equals the image label. When no prediction of that category exists, fall
/// back to the whole-image box and flag it.
pub fn category_rank_first(
    predictions: &[ScoredBox],
    label: usize,
    image_w: f64,
    image_h: f64,
) -> (BoxCxcywh, bool) {
    let best = predictions
        .iter()
        .filter(|p| p.category == label)
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    match best {
        Some(p) => (p.bbox, false),
        None => (
            BoxCxcywh::from_corners(0.0, 0.0, image_w, image_h),
            true,
        ),
    }
}

/// Coverage report for one generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegiongenReport {
    pub total: usize,
    pub fallbacks: usize,
    pub fallback_rate: f64,
}

/// Fill `predefined_region` on every weak image using the given baseline
/// parameters. Candidates keep arbitrarily small scores within the labeled
/// category: only the ranking matters. Per-image work is independent, so
/// images run in parallel; results are written back in input order.
pub fn generate_predefined_regions(
    det: &Detector,
    params: &ParamStore,
    weak: &mut [WeakImage],
) -> Result<RegiongenReport> {
    let regions: Vec<Result<(BoxCxcywh, bool)>> = weak
        .par_iter()
        .map(|w| {
            let as_det = DetectionImage {
                image_id: w.image_id,
                pixels: w.pixels.clone(),
                annotations: Vec::new(),
            };
            // no score floor: keep every candidate of the labeled category
            let scored = score_image(det, params, &as_det, 0.5)?;
            let candidates: Vec<ScoredBox> = scored.iter().map(ScoredBox::from).collect();
            Ok(category_rank_first(
                &candidates,
                w.label,
                w.pixels.width() as f64,
                w.pixels.height() as f64,
            ))
        })
        .collect();

    let mut fallbacks = 0;
    for (w, r) in weak.iter_mut().zip(regions) {
        let (bbox, fell_back) = r?;
        if fell_back {
            fallbacks += 1;
        }
        w.predefined_region = Some(bbox);
    }
    Ok(RegiongenReport {
        total: weak.len(),
        fallbacks,
        fallback_rate: if weak.is_empty() {
            0.0
        } else {
            fallbacks as f64 / weak.len() as f64
        },
    })
}

/// Write the coverage report next to the dataset.
pub fn save_report(dir: &Path, report: &RegiongenReport) -> Result<()> {
    let body = serde_json::to_vec_pretty(report)?;
    std::fs::write(dir.join("regiongen_report.json"), body)
        .map_err(|e| crate::error::ClisError::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(cx: f64, cy: f64) -> BoxCxcywh {
        BoxCxcywh::new(cx, cy, 10.0, 10.0)
    }

    #[test]
    fn picks_best_box_of_the_labeled_category_not_the_global_best() {
        // the labeled category here scores lower than another category's
        // box: the rule must still pick within the label
        let eagle = 3usize;
        let dog = 7usize;
        let box_a = boxed(20.0, 20.0);
        let box_b = boxed(40.0, 40.0);
        let preds = vec![
            ScoredBox {
                bbox: box_a,
                category: eagle,
                score: 0.3,
            },
            ScoredBox {
                bbox: box_b,
                category: dog,
                score: 0.9,
            },
        ];
        let (chosen, fallback) = category_rank_first(&preds, eagle, 64.0, 64.0);
        assert_eq!(chosen, box_a);
        assert!(!fallback);

        // global argmax diverges: it would pick the dog box
        let global = preds
            .iter()
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
            .unwrap();
        assert_eq!(global.bbox, box_b);
        assert_ne!(global.bbox, chosen);
    }

    #[test]
    fn argmax_within_category_takes_the_higher_score() {
        let preds = vec![
            ScoredBox {
                bbox: boxed(10.0, 10.0),
                category: 2,
                score: 0.7,
            },
            ScoredBox {
                bbox: boxed(30.0, 30.0),
                category: 2,
                score: 0.4,
            },
        ];
        let (chosen, fallback) = category_rank_first(&preds, 2, 64.0, 64.0);
        assert_eq!(chosen, boxed(10.0, 10.0));
        assert!(!fallback);
    }

    #[test]
    fn missing_category_falls_back_to_whole_image_flagged() {
        let preds = vec![ScoredBox {
            bbox: boxed(10.0, 10.0),
            category: 0,
            score: 0.9,
        }];
        let (chosen, fallback) = category_rank_first(&preds, 5, 64.0, 48.0);
        assert!(fallback);
        assert_eq!(chosen, BoxCxcywh::from_corners(0.0, 0.0, 64.0, 48.0));
    }

    #[test]
    fn rule_is_invariant_to_monotone_rescaling_within_the_category() {
        let preds = vec![
            ScoredBox {
                bbox: boxed(10.0, 10.0),
                category: 1,
                score: 0.6,
            },
            ScoredBox {
                bbox: boxed(30.0, 30.0),
                category: 1,
                score: 0.2,
            },
            ScoredBox {
                bbox: boxed(50.0, 50.0),
                category: 0,
                score: 0.99,
            },
        ];
        let (base, _) = category_rank_first(&preds, 1, 64.0, 64.0);
        let rescaled: Vec<ScoredBox> = preds
            .iter()
            .map(|p| ScoredBox {
                score: if p.category == 1 {
                    (p.score * 5.0).exp() / 100.0
                } else {
                    p.score
                },
                ..*p
            })
            .collect();
        let (after, _) = category_rank_first(&rescaled, 1, 64.0, 64.0);
        assert_eq!(base, after);
    }
}
