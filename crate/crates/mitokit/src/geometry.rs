//! Centroids to disk-shaped segmentation targets and back.
//!
//! Detection is trained as binary segmentation: every annotated centroid is
//! dilated into a disk ([`render_disk_mask`]); predicted probability maps are
//! post-processed back into point detections ([`mask_to_detections`]) and
//! scored against ground truth with a greedy radius matcher
//! ([`match_detections`]).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;

/// Radius within which a predicted centroid counts as a hit (7.5 um at
/// 0.25 microns per pixel).
pub const DEFAULT_MATCH_RADIUS_PX: f64 = 30.0;

/// Components smaller than this many pixels are discarded as noise.
pub const DEFAULT_MIN_COMPONENT_AREA_PX: usize = 25;

/// Geometry of the disk targets rendered at annotated centroids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskTargetSpec {
    pub diameter_px: usize,
    pub patch_size_px: usize,
    pub mpp: f64,
}

impl Default for DiskTargetSpec {
    fn default() -> Self {
        DiskTargetSpec {
            diameter_px: 21,
            patch_size_px: 512,
            mpp: 0.25,
        }
    }
}

impl DiskTargetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.diameter_px % 2 == 0 || self.diameter_px == 0 {
            return Err(Error::InvalidParameter(
                "disk diameter must be odd and >= 1".into(),
            ));
        }
        if self.patch_size_px < self.diameter_px {
            return Err(Error::InvalidParameter(
                "patch size must be >= disk diameter".into(),
            ));
        }
        if self.mpp <= 0.0 {
            return Err(Error::InvalidParameter("mpp must be > 0".into()));
        }
        Ok(())
    }

    /// Spec with the same diameter on a smaller patch, for tests.
    pub fn with_patch_size(self, patch_size_px: usize) -> Self {
        DiskTargetSpec {
            patch_size_px,
            ..self
        }
    }
}

/// One predicted centroid with its confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Union of inclusive disks around each centroid.
///
/// Pixel `(i, j)` is set iff some centroid `(cx, cy)` satisfies
/// `(i - cy)^2 + (j - cx)^2 <= (diameter/2)^2`.
pub fn render_disk_mask(centroids: &[(f64, f64)], spec: &DiskTargetSpec) -> Result<Array2<u8>> {
    spec.validate()?;
    let size = spec.patch_size_px;
    let mut mask = Array2::<u8>::zeros((size, size));
    let r = spec.diameter_px as f64 / 2.0;
    let r2 = r * r;
    for &(cx, cy) in centroids {
        if cx < 0.0 || cy < 0.0 || cx >= size as f64 || cy >= size as f64 {
            return Err(Error::CentroidOutOfBounds {
                x: cx,
                y: cy,
                width: size,
                height: size,
            });
        }
        let i_lo = ((cy - r).floor().max(0.0)) as usize;
        let i_hi = ((cy + r).ceil() as usize).min(size - 1);
        let j_lo = ((cx - r).floor().max(0.0)) as usize;
        let j_hi = ((cx + r).ceil() as usize).min(size - 1);
        for i in i_lo..=i_hi {
            for j in j_lo..=j_hi {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                if dy * dy + dx * dx <= r2 {
                    mask[(i, j)] = 1;
                }
            }
        }
    }
    Ok(mask)
}

/// Threshold a probability map and reduce connected components to centroids.
///
/// Pixels with probability `>= threshold` are foreground; components are
/// 8-connected; those below `min_area_px` pixels are dropped. Each surviving
/// component yields one [`Detection`] at its pixel centroid with the maximum
/// probability inside as score. Output is sorted by `(y, x)`.
pub fn mask_to_detections<T: Scalar>(
    prob_map: &Array2<T>,
    threshold: f64,
    min_area_px: usize,
) -> Result<Vec<Detection>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::InvalidParameter(
            "detection threshold must be in (0, 1)".into(),
        ));
    }
    let (h, w) = prob_map.dim();
    let thr = T::of_f64(threshold);
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut out = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if seen[(si, sj)] || prob_map[(si, sj)] < thr {
                continue;
            }
            // flood-fill one 8-connected component
            let mut queue = VecDeque::from([(si, sj)]);
            seen[(si, sj)] = true;
            let mut sum_i = 0.0;
            let mut sum_j = 0.0;
            let mut area = 0usize;
            let mut best = prob_map[(si, sj)];
            while let Some((i, j)) = queue.pop_front() {
                area += 1;
                sum_i += i as f64;
                sum_j += j as f64;
                best = best.max(prob_map[(i, j)]);
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if !seen[(ni, nj)] && prob_map[(ni, nj)] >= thr {
                            seen[(ni, nj)] = true;
                            queue.push_back((ni, nj));
                        }
                    }
                }
            }
            if area >= min_area_px {
                out.push(Detection {
                    x: sum_j / area as f64,
                    y: sum_i / area as f64,
                    score: best.as_f64(),
                });
            }
        }
    }
    out.sort_by(|a, b| (a.y, a.x).partial_cmp(&(b.y, b.x)).unwrap());
    Ok(out)
}

/// Outcome of matching predictions against ground-truth centroids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Matched `(prediction index, truth index)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedy matching in descending score order.
///
/// Each prediction claims the nearest still-unmatched truth within
/// `radius_px` (inclusive); every truth is matched at most once.
pub fn match_detections(
    preds: &[Detection],
    truths: &[(f64, f64)],
    radius_px: f64,
) -> Result<MatchResult> {
    if radius_px <= 0.0 {
        return Err(Error::InvalidParameter(
            "matching radius must be > 0".into(),
        ));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap());
    let r2 = radius_px * radius_px;
    let mut truth_taken = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(f64, usize)> = None;
        for (ti, &(tx, ty)) in truths.iter().enumerate() {
            if truth_taken[ti] {
                continue;
            }
            let d2 = (p.x - tx).powi(2) + (p.y - ty).powi(2);
            if d2 <= r2 && best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, ti));
            }
        }
        if let Some((_, ti)) = best {
            truth_taken[ti] = true;
            pairs.push((pi, ti));
        }
    }
    pairs.sort_unstable();
    let tp = pairs.len();
    Ok(MatchResult {
        true_positives: tp,
        false_positives: preds.len() - tp,
        false_negatives: truths.len() - tp,
        pairs,
    })
}

/// Write detections as `patch_id,x,y,score` CSV rows with a header.
pub fn save_detections(path: &Path, rows: &[(String, Detection)]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "patch_id,x,y,score")?;
    for (id, d) in rows {
        writeln!(file, "{id},{:.3},{:.3},{:.6}", d.x, d.y, d.score)?;
    }
    Ok(())
}

/// Read a detection CSV written by [`save_detections`].
pub fn load_detections(path: &Path) -> Result<Vec<(String, Detection)>> {
    let file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?,
    );
    let mut rows = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Schema {
                record: format!("line {}", lineno + 1),
                reason: format!("bad number `{s}` in detection file"),
            })
        };
        if parts.len() != 4 {
            return Err(Error::Schema {
                record: format!("line {}", lineno + 1),
                reason: "expected patch_id,x,y,score".into(),
            });
        }
        rows.push((
            parts[0].to_string(),
            Detection {
                x: parse(parts[1])?,
                y: parse(parts[2])?,
                score: parse(parts[3])?,
            },
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent lattice enumeration of `dx^2 + dy^2 <= (d/2)^2`.
    fn disk_lattice_count(diameter: usize) -> usize {
        let r = diameter as f64 / 2.0;
        let span = r.ceil() as i64;
        let mut count = 0;
        for dy in -span..=span {
            for dx in -span..=span {
                if (dx * dx + dy * dy) as f64 <= r * r {
                    count += 1;
                }
            }
        }
        count
    }

    fn mask_area(mask: &Array2<u8>) -> usize {
        mask.iter().filter(|&&v| v == 1).count()
    }

    #[test]
    fn empty_centroid_list_gives_zero_mask() {
        let mask = render_disk_mask(&[], &DiskTargetSpec::default()).unwrap();
        assert_eq!(mask_area(&mask), 0);
    }

    #[test]
    fn disk_pixel_count_matches_lattice_oracle() {
        let spec = DiskTargetSpec::default();
        let mask = render_disk_mask(&[(256.0, 256.0)], &spec).unwrap();
        let oracle = disk_lattice_count(21);
        assert_eq!(oracle, 349, "enumeration oracle itself");
        assert_eq!(mask_area(&mask), oracle);
    }

    #[test]
    fn overlapping_disks_union_rather_than_add() {
        let spec = DiskTargetSpec::default();
        let mask = render_disk_mask(&[(250.0, 256.0), (255.0, 256.0)], &spec).unwrap();
        let area = mask_area(&mask);
        assert!(area < 2 * 349, "area {area} must show overlap");
        // independent union count over the joint lattice
        let mut oracle = 0;
        for i in 200..300usize {
            for j in 200..300usize {
                let near = |cx: f64, cy: f64| {
                    (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2) <= 10.5 * 10.5
                };
                if near(250.0, 256.0) || near(255.0, 256.0) {
                    oracle += 1;
                }
            }
        }
        assert_eq!(area, oracle);
    }

    #[test]
    fn out_of_bounds_centroid_is_reported() {
        let spec = DiskTargetSpec::default().with_patch_size(64);
        let err = render_disk_mask(&[(10.0, 64.0)], &spec).unwrap_err();
        assert!(matches!(err, Error::CentroidOutOfBounds { .. }));
    }

    #[test]
    fn spec_validation() {
        let even = DiskTargetSpec {
            diameter_px: 20,
            ..Default::default()
        };
        assert!(even.validate().is_err());
        let tiny = DiskTargetSpec {
            patch_size_px: 11,
            diameter_px: 21,
            ..Default::default()
        };
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn clean_disk_round_trips_to_its_centroid() {
        let spec = DiskTargetSpec::default().with_patch_size(128);
        for centroid in [(64.0, 64.0), (40.5, 70.25)] {
            let mask = render_disk_mask(&[centroid], &spec).unwrap();
            let probs = mask.mapv(|v| v as f64);
            let dets = mask_to_detections(&probs, 0.5, 25).unwrap();
            assert_eq!(dets.len(), 1);
            assert!((dets[0].x - centroid.0).abs() <= 0.5, "{:?}", dets[0]);
            assert!((dets[0].y - centroid.1).abs() <= 0.5, "{:?}", dets[0]);
            assert_eq!(dets[0].score, 1.0);
        }
    }

    #[test]
    fn all_zero_map_has_no_detections() {
        let probs = Array2::<f64>::zeros((64, 64));
        assert!(mask_to_detections(&probs, 0.5, 1).unwrap().is_empty());
    }

    #[test]
    fn disjoint_disks_become_two_detections_in_scan_order() {
        let spec = DiskTargetSpec::default().with_patch_size(128);
        let centroids = [(90.0, 30.0), (30.0, 90.0)];
        let mask = render_disk_mask(&centroids, &spec).unwrap();
        let probs = mask.mapv(|v| v as f64);
        let dets = mask_to_detections(&probs, 0.5, 25).unwrap();
        assert_eq!(dets.len(), 2);
        // sorted by y: (90, 30) comes first
        assert!((dets[0].y - 30.0).abs() <= 0.5 && (dets[0].x - 90.0).abs() <= 0.5);
        assert!((dets[1].y - 90.0).abs() <= 0.5 && (dets[1].x - 30.0).abs() <= 0.5);
    }

    #[test]
    fn small_components_are_filtered() {
        let mut probs = Array2::<f64>::zeros((32, 32));
        probs[(5, 5)] = 0.9;
        assert!(mask_to_detections(&probs, 0.5, 25).unwrap().is_empty());
        assert_eq!(mask_to_detections(&probs, 0.5, 1).unwrap().len(), 1);
    }

    #[test]
    fn bad_threshold_is_rejected() {
        let probs = Array2::<f64>::zeros((8, 8));
        assert!(mask_to_detections(&probs, 0.0, 1).is_err());
        assert!(mask_to_detections(&probs, 1.0, 1).is_err());
    }

    /// Exhaustive component labeling by repeated scanning, as an oracle.
    fn oracle_components(fg: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = fg.dim();
        let mut label = Array2::<usize>::zeros((h, w)); // 0 = background
        let mut next = 1;
        for i in 0..h {
            for j in 0..w {
                if fg[(i, j)] && label[(i, j)] == 0 {
                    // naive fill via fixpoint iteration
                    label[(i, j)] = next;
                    loop {
                        let mut changed = false;
                        for a in 0..h {
                            for b in 0..w {
                                if label[(a, b)] != next {
                                    continue;
                                }
                                for da in -1i64..=1 {
                                    for db in -1i64..=1 {
                                        let (na, nb) = (a as i64 + da, b as i64 + db);
                                        if na < 0 || nb < 0 || na >= h as i64 || nb >= w as i64 {
                                            continue;
                                        }
                                        let (na, nb) = (na as usize, nb as usize);
                                        if fg[(na, nb)] && label[(na, nb)] == 0 {
                                            label[(na, nb)] = next;
                                            changed = true;
                                        }
                                    }
                                }
                            }
                        }
                        if !changed {
                            break;
                        }
                    }
                    next += 1;
                }
            }
        }
        let mut comps = vec![Vec::new(); next - 1];
        for i in 0..h {
            for j in 0..w {
                if label[(i, j)] > 0 {
                    comps[label[(i, j)] - 1].push((i, j));
                }
            }
        }
        comps
    }

    #[test]
    fn component_labeling_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..5 {
            let fg = Array2::from_shape_fn((24, 24), |_| rng.gen_bool(0.3));
            let probs = fg.mapv(|v| if v { 1.0f64 } else { 0.0 });
            let dets = mask_to_detections(&probs, 0.5, 1).unwrap();
            let comps = oracle_components(&fg);
            assert_eq!(dets.len(), comps.len());
            let mut expected: Vec<(f64, f64)> = comps
                .iter()
                .map(|c| {
                    let n = c.len() as f64;
                    (
                        c.iter().map(|&(i, _)| i as f64).sum::<f64>() / n,
                        c.iter().map(|&(_, j)| j as f64).sum::<f64>() / n,
                    )
                })
                .collect();
            expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (d, (ey, ex)) in dets.iter().zip(expected.iter()) {
                assert!((d.y - ey).abs() < 1e-9 && (d.x - ex).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn exact_matches_count_fully() {
        let truths = [(10.0, 10.0), (50.0, 50.0)];
        let preds: Vec<Detection> = truths
            .iter()
            .map(|&(x, y)| Detection { x, y, score: 0.9 })
            .collect();
        let m = match_detections(&preds, &truths, 30.0).unwrap();
        assert_eq!(
            (m.true_positives, m.false_positives, m.false_negatives),
            (2, 0, 0)
        );
    }

    #[test]
    fn far_prediction_is_both_fp_and_fn() {
        let preds = [Detection {
            x: 100.0,
            y: 0.0,
            score: 0.9,
        }];
        let truths = [(0.0, 0.0)];
        let m = match_detections(&preds, &truths, 30.0).unwrap();
        assert_eq!(
            (m.true_positives, m.false_positives, m.false_negatives),
            (0, 1, 1)
        );
    }

    /// Brute force over all injective pred-to-truth assignments.
    fn optimal_match_count(preds: &[Detection], truths: &[(f64, f64)], radius: f64) -> usize {
        fn rec(
            pi: usize,
            preds: &[Detection],
            truths: &[(f64, f64)],
            used: &mut Vec<bool>,
            r2: f64,
        ) -> usize {
            if pi == preds.len() {
                return 0;
            }
            let mut best = rec(pi + 1, preds, truths, used, r2);
            for ti in 0..truths.len() {
                if used[ti] {
                    continue;
                }
                let d2 = (preds[pi].x - truths[ti].0).powi(2)
                    + (preds[pi].y - truths[ti].1).powi(2);
                if d2 <= r2 {
                    used[ti] = true;
                    best = best.max(1 + rec(pi + 1, preds, truths, used, r2));
                    used[ti] = false;
                }
            }
            best
        }
        rec(0, preds, truths, &mut vec![false; truths.len()], radius * radius)
    }

    #[test]
    fn greedy_matches_optimal_on_constructed_instance() {
        let preds = [
            Detection {
                x: 0.0,
                y: 0.0,
                score: 0.9,
            },
            Detection {
                x: 10.0,
                y: 0.0,
                score: 0.8,
            },
            Detection {
                x: 100.0,
                y: 100.0,
                score: 0.7,
            },
        ];
        let truths = [(1.0, 0.0), (11.0, 0.0)];
        let m = match_detections(&preds, &truths, 5.0).unwrap();
        assert_eq!(m.true_positives, optimal_match_count(&preds, &truths, 5.0));
        assert_eq!(
            (m.true_positives, m.false_positives, m.false_negatives),
            (2, 1, 0)
        );
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn matcher_identities_hold_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..100 {
            let np = rng.gen_range(0..8);
            let nt = rng.gen_range(0..8);
            let preds: Vec<Detection> = (0..np)
                .map(|_| Detection {
                    x: rng.gen_range(0.0..100.0),
                    y: rng.gen_range(0.0..100.0),
                    score: rng.gen_range(0.0..1.0),
                })
                .collect();
            let truths: Vec<(f64, f64)> = (0..nt)
                .map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
                .collect();
            let m = match_detections(&preds, &truths, 20.0).unwrap();
            assert_eq!(m.true_positives + m.false_negatives, truths.len());
            assert_eq!(m.true_positives + m.false_positives, preds.len());
            assert_eq!(m.pairs.len(), m.true_positives);
        }
    }

    #[test]
    fn detections_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.csv");
        let rows = vec![
            (
                "p1".to_string(),
                Detection {
                    x: 12.5,
                    y: 90.25,
                    score: 0.875,
                },
            ),
            (
                "p2".to_string(),
                Detection {
                    x: 5.0,
                    y: 6.0,
                    score: 1.0,
                },
            ),
        ];
        save_detections(&path, &rows).unwrap();
        let back = load_detections(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "p1");
        assert!((back[0].1.x - 12.5).abs() < 1e-3);
        assert!((back[0].1.score - 0.875).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn mask_is_permutation_invariant_and_monotone(
            pts in prop::collection::vec((5.0f64..59.0, 5.0f64..59.0), 1..6),
            extra in (5.0f64..59.0, 5.0f64..59.0),
        ) {
            let spec = DiskTargetSpec {
                diameter_px: 9,
                patch_size_px: 64,
                mpp: 0.25,
            };
            let mask = render_disk_mask(&pts, &spec).unwrap();
            let mut reversed = pts.clone();
            reversed.reverse();
            prop_assert_eq!(&mask, &render_disk_mask(&reversed, &spec).unwrap());

            let mut grown = pts.clone();
            grown.push(extra);
            let bigger = render_disk_mask(&grown, &spec).unwrap();
            for (m, b) in mask.iter().zip(bigger.iter()) {
                prop_assert!(b >= m, "adding a centroid cleared a pixel");
            }
        }

        #[test]
        fn disjoint_disks_are_recovered_within_half_pixel(
            idx in prop::collection::hash_set(0usize..9, 1..5)
        ) {
            // 3x3 grid with 40 px spacing keeps 9 px disks far apart
            let spec = DiskTargetSpec {
                diameter_px: 9,
                patch_size_px: 128,
                mpp: 0.25,
            };
            let centroids: Vec<(f64, f64)> = idx
                .iter()
                .map(|&i| (24.0 + 40.0 * (i % 3) as f64, 24.0 + 40.0 * (i / 3) as f64))
                .collect();
            let mask = render_disk_mask(&centroids, &spec).unwrap();
            let probs = mask.mapv(|v| v as f64);
            let dets = mask_to_detections(&probs, 0.5, 10).unwrap();
            prop_assert_eq!(dets.len(), centroids.len());
            for &(cx, cy) in &centroids {
                let hit = dets
                    .iter()
                    .any(|d| (d.x - cx).abs() <= 0.5 && (d.y - cy).abs() <= 0.5);
                prop_assert!(hit, "centroid ({}, {}) not recovered", cx, cy);
            }
        }
    }
}
