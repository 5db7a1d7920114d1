//! Counting and centroid localization from density maps: local-maximum
//! extraction and minimum-cost one-to-one matching against ground truth.

use serde::{Deserialize, Serialize};

use crate::raster::Raster;

/// Minimum peak separation used unless configured otherwise.
pub const DEFAULT_MIN_DISTANCE: usize = 2;

/// Object count: the sum of the positive part of the density map.
pub fn count_from_density(density: &Raster<f32>) -> f64 {
    density.data().iter().map(|&v| (v as f64).max(0.0)).sum()
}

/// Peak floor of 5% of a unit Gaussian's peak at the given sigma.
pub fn default_min_intensity(mean_sigma: f64) -> f64 {
    0.05 / (2.0 * std::f64::consts::PI * mean_sigma * mean_sigma)
}

/// Integer `(x, y)` pixel location.
pub type Peak = (usize, usize);

/// Local maxima of a `(2 * min_distance + 1)` square window, at least
/// `min_intensity` and strictly positive. Candidates are visited in order of
/// decreasing value (ties by row, then column) and dropped when an accepted
/// peak lies within `min_distance` in Chebyshev distance. Returned in that
/// visiting order.
pub fn detect_peaks(density: &Raster<f32>, min_distance: usize, min_intensity: f64) -> Vec<Peak> {
    let (w, h) = density.dims();
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let d = min_distance.max(1);
    let data = density.data();
    // Separable running maximum: rows, then columns.
    let mut row_max = vec![f32::NEG_INFINITY; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(d);
            let hi = (x + d + 1).min(w);
            row_max[y * w + x] = row[lo..hi].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        }
    }
    let mut candidates = Vec::new();
    for y in 0..h {
        let lo = y.saturating_sub(d);
        let hi = (y + d + 1).min(h);
        for x in 0..w {
            let v = data[y * w + x];
            if !(v > 0.0) || (v as f64) < min_intensity {
                continue;
            }
            let m = (lo..hi).map(|yy| row_max[yy * w + x]).fold(f32::NEG_INFINITY, f32::max);
            if v >= m {
                candidates.push((v, y, x));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; w * h];
    let mut peaks = Vec::new();
    for (_, y, x) in candidates {
        let (y0, y1) = (y.saturating_sub(d), (y + d + 1).min(h));
        let (x0, x1) = (x.saturating_sub(d), (x + d + 1).min(w));
        let blocked = (y0..y1).any(|yy| taken[yy * w + x0..yy * w + x1].iter().any(|&t| t));
        if !blocked {
            taken[y * w + x] = true;
            peaks.push((x, y));
        }
    }
    peaks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt_index: usize,
    pub pred_index: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Sorted by `gt_index`.
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl MatchResult {
    /// Sum of pair distances, accumulated in `gt_index` order.
    pub fn total_cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }
}

/// Minimum-cost assignment for a `rows x cols` matrix with `rows <= cols`.
/// Returns the column assigned to each row. Shortest augmenting paths with
/// row/column potentials, O(rows^2 cols).
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "hungarian needs rows <= cols");
    assert_eq!(cost.len(), rows * cols);
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0, following the classic formulation.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Minimum-total-Euclidean-distance one-to-one matching of size `min(N, M)`.
pub fn match_peaks(gt: &[(f64, f64)], pred: &[(f64, f64)]) -> MatchResult {
    let (n, m) = (gt.len(), pred.len());
    let mut pairs = Vec::with_capacity(n.min(m));
    if n > 0 && m > 0 {
        if n <= m {
            let cost: Vec<f64> = gt.iter().flat_map(|&g| pred.iter().map(move |&p| dist(g, p))).collect();
            for (gi, pi) in hungarian(&cost, n, m).into_iter().enumerate() {
                pairs.push(MatchedPair {
                    gt_index: gi,
                    pred_index: pi,
                    distance: cost[gi * m + pi],
                });
            }
        } else {
            let cost: Vec<f64> = pred.iter().flat_map(|&p| gt.iter().map(move |&g| dist(g, p))).collect();
            for (pi, gi) in hungarian(&cost, m, n).into_iter().enumerate() {
                pairs.push(MatchedPair {
                    gt_index: gi,
                    pred_index: pi,
                    distance: cost[pi * n + gi],
                });
            }
            pairs.sort_by_key(|p| p.gt_index);
        }
    }
    let mut gt_used = vec![false; n];
    let mut pred_used = vec![false; m];
    for p in &pairs {
        gt_used[p.gt_index] = true;
        pred_used[p.pred_index] = true;
    }
    MatchResult {
        pairs,
        unmatched_gt: (0..n).filter(|&i| !gt_used[i]).collect(),
        unmatched_pred: (0..m).filter(|&i| !pred_used[i]).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeParams {
    pub min_distance: usize,
    pub min_intensity: f64,
}

impl LocalizeParams {
    /// Defaults for a dataset whose mean training sigma is `mean_sigma`.
    pub fn for_sigma(mean_sigma: f64) -> Self {
        Self {
            min_distance: DEFAULT_MIN_DISTANCE,
            min_intensity: default_min_intensity(mean_sigma),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub count: f64,
    pub peaks: Vec<Peak>,
    pub matching: MatchResult,
}

impl Localization {
    /// `{"count", "peaks": [[x, y]], "pairs": [[gi, pi, dist]], "unmatched_gt", "unmatched_pred"}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "count": self.count,
            "peaks": self.peaks.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>(),
            "pairs": self.matching.pairs.iter()
                .map(|p| serde_json::json!([p.gt_index, p.pred_index, p.distance]))
                .collect::<Vec<_>>(),
            "unmatched_gt": self.matching.unmatched_gt,
            "unmatched_pred": self.matching.unmatched_pred,
        })
    }
}

/// Peak extraction followed by matching against the ground-truth centroids.
pub fn localize(density: &Raster<f32>, gt: &[(f64, f64)], params: &LocalizeParams) -> Localization {
    let peaks = detect_peaks(density, params.min_distance, params.min_intensity);
    let pred: Vec<(f64, f64)> = peaks.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    Localization {
        count: count_from_density(density),
        matching: match_peaks(gt, &pred),
        peaks,
    }
}
