//! Unsupervised part segmentation from stable salient regions.
//!
//! A candidate is a `(layer, tier set)` pair. Across the clouds of one class
//! it yields one salient region per cloud; the candidate qualifies when the
//! region centroids barely move from cloud to cloud. Qualified candidates
//! become axis-aligned boxes (class-level mean of the per-cloud boxes) that
//! cut new clouds into parts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalmetrics::part_iou;
use crate::netcore::Model;
use crate::pointops::{self, Point3, PointCloud};
use crate::relflow::{self, FlowConfig};
use crate::saliency::{self, TierSet};
use crate::{Error, Result};

pub const DEFAULT_Q: f64 = 0.05;
pub const DEFAULT_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// Points in the selected tiers.
    Salient,
    /// Points outside the bounding box of the salient region.
    Complement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartDetector {
    pub layer: String,
    pub tiers: TierSet,
    pub kind: RegionKind,
    pub class: usize,
    pub box_min: Point3,
    pub box_max: Point3,
    pub margin: f64,
    /// Largest per-axis standard deviation of the region centroid.
    pub stability: f64,
}

impl PartDetector {
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|d| p[d] >= self.box_min[d] - self.margin && p[d] <= self.box_max[d] + self.margin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub q: f64,
    pub margin: f64,
    pub tier_sets: Vec<TierSet>,
    pub complement: bool,
    pub flow: FlowConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            q: DEFAULT_Q,
            margin: DEFAULT_MARGIN,
            tier_sets: vec![TierSet::SALIENT, TierSet::RED],
            complement: true,
            flow: FlowConfig::default(),
        }
    }
}

/// Per-cloud regions of one candidate, aligned with the clouds they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRegions {
    pub layer: String,
    pub tiers: TierSet,
    pub kind: RegionKind,
    pub regions: Vec<Vec<usize>>,
}

fn bbox(points: &[Point3], idx: &[usize]) -> Option<(Point3, Point3)> {
    let first = points[*idx.first()?];
    let (mut lo, mut hi) = (first, first);
    for &i in idx {
        for d in 0..3 {
            lo[d] = lo[d].min(points[i][d]);
            hi[d] = hi[d].max(points[i][d]);
        }
    }
    Some((lo, hi))
}

/// Indices of the points outside the bounding box of `region`.
pub fn complement_region(points: &[Point3], region: &[usize]) -> Vec<usize> {
    match bbox(points, region) {
        None => (0..points.len()).collect(),
        Some((lo, hi)) => (0..points.len())
            .filter(|&i| (0..3).any(|d| points[i][d] < lo[d] || points[i][d] > hi[d]))
            .collect(),
    }
}

/// Salient regions of every requested layer and tier set for every cloud.
/// An empty `layers` list means every point-mapped layer.
pub fn candidate_regions(
    model: &Model,
    clouds: &[PointCloud],
    layers: &[String],
    cfg: &DetectorConfig,
) -> Result<Vec<CandidateRegions>> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("no clouds to build detectors from".into()));
    }
    // Per cloud: per layer, per tier set, the region.
    let per_cloud: Vec<Vec<(String, Vec<Vec<usize>>)>> = clouds
        .par_iter()
        .map(|cloud| {
            let (_, trace) = model.forward_cloud(cloud)?;
            let input = trace.layers[0].name.clone();
            let (map, _) = relflow::relevance_flow(model, &trace, &input, &cfg.flow)?;
            relflow::spatial_saliences(&trace, &map)
                .into_iter()
                .filter(|s| layers.is_empty() || layers.contains(&s.layer))
                .map(|s| {
                    let m = saliency::tier(&s.values, &s.layer)?;
                    let sets = cfg.tier_sets.iter().map(|&t| saliency::salient_points(&m, t)).collect();
                    Ok((s.layer, sets))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if let Some(missing) = layers.iter().find(|l| !per_cloud[0].iter().any(|(n, _)| n == *l)) {
        return Err(Error::UnknownLayer(format!("{missing} (not a point-mapped layer)")));
    }
    let mut out = Vec::new();
    for (j, (layer, _)) in per_cloud[0].iter().enumerate() {
        for (t, &tiers) in cfg.tier_sets.iter().enumerate() {
            let regions: Vec<Vec<usize>> = per_cloud.iter().map(|c| c[j].1[t].clone()).collect();
            if cfg.complement {
                let comp = regions.iter().zip(clouds).map(|(r, c)| complement_region(&c.points, r)).collect();
                out.push(CandidateRegions { layer: layer.clone(), tiers, kind: RegionKind::Complement, regions: comp });
            }
            out.push(CandidateRegions { layer: layer.clone(), tiers, kind: RegionKind::Salient, regions });
        }
    }
    Ok(out)
}

/// Class-level detector for one candidate, whether or not it qualifies.
pub fn detector_from_regions(
    cand: &CandidateRegions,
    clouds: &[PointCloud],
    class: usize,
    margin: f64,
) -> Option<PartDetector> {
    let mut centroids = Vec::new();
    let mut lo_sum = [0.0; 3];
    let mut hi_sum = [0.0; 3];
    for (region, cloud) in cand.regions.iter().zip(clouds) {
        let Some((lo, hi)) = bbox(&cloud.points, region) else { continue };
        centroids.push(pointops::centroid(region.iter().map(|&i| &cloud.points[i])));
        for d in 0..3 {
            lo_sum[d] += lo[d];
            hi_sum[d] += hi[d];
        }
    }
    if centroids.is_empty() {
        return None;
    }
    let n = centroids.len() as f64;
    let mean = pointops::centroid(centroids.iter());
    let stability = (0..3)
        .map(|d| (centroids.iter().map(|c| (c[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt())
        .fold(0.0, f64::max);
    Some(PartDetector {
        layer: cand.layer.clone(),
        tiers: cand.tiers,
        kind: cand.kind,
        class,
        box_min: lo_sum.map(|v| v / n),
        box_max: hi_sum.map(|v| v / n),
        margin,
        stability,
    })
}

/// Detectors whose centroid deviation is below `q`, most stable first.
pub fn qualify(candidates: &[CandidateRegions], clouds: &[PointCloud], class: usize, q: f64, margin: f64) -> Vec<PartDetector> {
    let mut ds: Vec<PartDetector> = candidates
        .iter()
        .filter_map(|c| detector_from_regions(c, clouds, class, margin))
        .filter(|d| d.stability < q)
        .collect();
    ds.sort_by(|a, b| a.stability.total_cmp(&b.stability));
    ds
}

/// Qualified detectors for the clouds of `class`.
pub fn build_detectors(
    model: &Model,
    clouds: &[PointCloud],
    class: usize,
    layers: &[String],
    cfg: &DetectorConfig,
) -> Result<Vec<PartDetector>> {
    let members: Vec<PointCloud> = clouds.iter().filter(|c| c.class_label == Some(class)).cloned().collect();
    if members.is_empty() {
        return Err(Error::InvalidArgument(format!("no clouds of class {class}")));
    }
    let cands = candidate_regions(model, &members, layers, cfg)?;
    Ok(qualify(&cands, &members, class, cfg.q, cfg.margin))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Detector index per point, `-1` when unassigned.
    pub labels: Vec<i32>,
    /// No detector box contained any point.
    pub none_fired: bool,
}

/// First containing box wins; the rest take the part of their nearest
/// assigned point (lowest index on ties).
pub fn segment(cloud: &PointCloud, detectors: &[PartDetector]) -> Result<Segmentation> {
    if detectors.is_empty() {
        return Err(Error::InvalidArgument("segmentation needs at least one detector".into()));
    }
    let mut labels: Vec<i32> = cloud
        .points
        .iter()
        .map(|p| detectors.iter().position(|d| d.contains(p)).map_or(-1, |i| i as i32))
        .collect();
    let assigned: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
    if assigned.is_empty() {
        return Ok(Segmentation { labels, none_fired: true });
    }
    let fixed = labels.clone();
    for (i, l) in labels.iter_mut().enumerate() {
        if *l < 0 {
            let p = &cloud.points[i];
            let nearest = assigned
                .iter()
                .copied()
                .min_by(|&a, &b| pointops::dist2(p, &cloud.points[a]).total_cmp(&pointops::dist2(p, &cloud.points[b])))
                .expect("nonempty");
            *l = fixed[nearest];
        }
    }
    Ok(Segmentation { labels, none_fired: false })
}

/// Maximum-weight assignment on a rectangular matrix (rows to distinct
/// columns). Returns the column for each row, `None` when rows outnumber
/// columns and the row is left out.
pub fn hungarian(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let max = weights.iter().flatten().copied().fold(0.0, f64::max);
    // Square cost matrix, 1-based as in the classic potential formulation.
    let cost = |i: usize, j: usize| -> f64 {
        if i <= rows && j <= cols {
            max - weights[i - 1][j - 1]
        } else {
            max
        }
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= rows && j <= cols {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Mean over ground-truth parts of the IoU with the optimally matched
/// predicted part (unmatched parts score 0).
pub fn object_miou(pred: &[i32], truth: &[i32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} predicted labels for {} points", pred.len(), truth.len())));
    }
    let ids = |v: &[i32]| {
        let mut u: Vec<i32> = v.iter().copied().filter(|&x| x >= 0).collect();
        u.sort_unstable();
        u.dedup();
        u
    };
    let (gt_ids, pr_ids) = (ids(truth), ids(pred));
    if gt_ids.is_empty() {
        return Err(Error::InvalidArgument("ground truth has no parts".into()));
    }
    let members = |v: &[i32], id: i32| -> Vec<usize> { (0..v.len()).filter(|&i| v[i] == id).collect() };
    let n = pred.len();
    let matrix: Vec<Vec<f64>> = gt_ids
        .iter()
        .map(|&g| {
            let gs = members(truth, g);
            pr_ids.iter().map(|&p| part_iou(&members(pred, p), &gs, n).map(|r| r.iou)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let assign = hungarian(&matrix);
    let total: f64 = assign.iter().enumerate().map(|(g, a)| a.map_or(0.0, |p| matrix[g][p])).sum();
    Ok(total / gt_ids.len() as f64)
}

/// Per-part IoU under the optimal matching, keyed by ground-truth part id.
pub fn matched_part_ious(pred: &[i32], truth: &[i32]) -> Result<Vec<(i32, f64)>> {
    let mut gt_ids: Vec<i32> = truth.iter().copied().filter(|&x| x >= 0).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    let mut pr_ids: Vec<i32> = pred.iter().copied().filter(|&x| x >= 0).collect();
    pr_ids.sort_unstable();
    pr_ids.dedup();
    let n = pred.len();
    let members = |v: &[i32], id: i32| -> Vec<usize> { (0..v.len()).filter(|&i| v[i] == id).collect() };
    let matrix: Vec<Vec<f64>> = gt_ids
        .iter()
        .map(|&g| {
            let gs = members(truth, g);
            pr_ids.iter().map(|&p| part_iou(&members(pred, p), &gs, n).map(|r| r.iou)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let assign = hungarian(&matrix);
    Ok(gt_ids.iter().zip(assign).map(|(&g, a)| (g, a.map_or(0.0, |p| matrix[gt_ids.iter().position(|&x| x == g).unwrap()][p]))).collect())
}

/// Mean object mIoU over a set of segmentations.
pub fn miou(segmentations: &[Vec<i32>], truths: &[Vec<i32>]) -> Result<f64> {
    if segmentations.len() != truths.len() || segmentations.is_empty() {
        return Err(Error::DimensionMismatch("segmentations and ground truth must pair up".into()));
    }
    let mut sum = 0.0;
    for (p, t) in segmentations.iter().zip(truths) {
        sum += object_miou(p, t)?;
    }
    Ok(sum / segmentations.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartScore {
    pub part_id: i32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSegmentation {
    pub class: String,
    /// Candidate chosen on the calibration clouds.
    pub layer: String,
    pub tiers: String,
    pub detectors: Vec<PartDetector>,
    pub miou: f64,
    pub baseline_miou: f64,
    pub parts: Vec<PartScore>,
    pub calibration_miou: f64,
    pub qualified: usize,
}

/// Picks the `(layer, tier set)` whose salient/complement detector pair
/// segments the calibration clouds best, then scores it on `eval` clouds.
/// Returns `None` when no candidate yields two qualified detectors.
pub fn best_layer_segmentation(
    model: &Model,
    calibration: &[PointCloud],
    eval: &[PointCloud],
    class: usize,
    cfg: &DetectorConfig,
) -> Result<Option<ClassSegmentation>> {
    let cal: Vec<PointCloud> = calibration.iter().filter(|c| c.class_label == Some(class)).cloned().collect();
    let ev: Vec<PointCloud> = eval.iter().filter(|c| c.class_label == Some(class)).cloned().collect();
    if cal.is_empty() || ev.is_empty() {
        return Err(Error::InvalidArgument(format!("class {class} needs calibration and evaluation clouds")));
    }
    if cal.iter().chain(&ev).any(|c| c.part_labels.is_none()) {
        return Err(Error::InvalidArgument("segmentation scoring needs part labels".into()));
    }
    let cfg_pair = DetectorConfig { complement: true, ..cfg.clone() };
    let qualified = build_detectors(model, &cal, class, &[], &cfg_pair)?;
    let mut best: Option<(f64, Vec<PartDetector>)> = None;
    let mut keys: Vec<(String, TierSet)> = qualified.iter().map(|d| (d.layer.clone(), d.tiers)).collect();
    keys.dedup();
    let mut seen = Vec::new();
    for key in keys {
        if seen.contains(&key) {
            continue;
        }
        seen.push(key.clone());
        // The salient box cuts first; its complement takes what is left.
        let mut pair: Vec<PartDetector> =
            qualified.iter().filter(|d| d.layer == key.0 && d.tiers == key.1).cloned().collect();
        pair.sort_by_key(|d| d.kind != RegionKind::Salient);
        if pair.len() < 2 {
            continue;
        }
        let score = score_detectors(&cal, &pair)?;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, pair));
        }
    }
    let Some((cal_score, detectors)) = best else { return Ok(None) };
    let segs: Vec<Vec<i32>> = ev.iter().map(|c| segment(c, &detectors).map(|s| s.labels)).collect::<Result<_>>()?;
    let truths: Vec<Vec<i32>> = ev.iter().map(|c| c.part_labels.clone().expect("checked")).collect();
    let score = miou(&segs, &truths)?;
    let baseline = miou(&truths.iter().map(|t| vec![0; t.len()]).collect::<Vec<_>>(), &truths)?;
    let mut per_part: Vec<(i32, f64)> = Vec::new();
    for (s, t) in segs.iter().zip(&truths) {
        for (id, iou) in matched_part_ious(s, t)? {
            match per_part.iter_mut().find(|(p, _)| *p == id) {
                Some(e) => e.1 += iou,
                None => per_part.push((id, iou)),
            }
        }
    }
    per_part.sort_by_key(|p| p.0);
    let names = model.class_names();
    Ok(Some(ClassSegmentation {
        class: names[class].clone(),
        layer: detectors[0].layer.clone(),
        tiers: detectors[0].tiers.label(),
        detectors,
        miou: score,
        baseline_miou: baseline,
        parts: per_part.into_iter().map(|(part_id, s)| PartScore { part_id, iou: s / ev.len() as f64 }).collect(),
        calibration_miou: cal_score,
        qualified: qualified.len(),
    }))
}

fn score_detectors(clouds: &[PointCloud], detectors: &[PartDetector]) -> Result<f64> {
    let segs: Vec<Vec<i32>> = clouds.iter().map(|c| segment(c, detectors).map(|s| s.labels)).collect::<Result<_>>()?;
    let truths: Vec<Vec<i32>> = clouds.iter().map(|c| c.part_labels.clone().unwrap_or_default()).collect();
    miou(&segs, &truths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(lo: Point3, hi: Point3) -> PartDetector {
        PartDetector {
            layer: "x".into(),
            tiers: TierSet::SALIENT,
            kind: RegionKind::Salient,
            class: 0,
            box_min: lo,
            box_max: hi,
            margin: 0.0,
            stability: 0.0,
        }
    }

    fn two_clusters() -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push([-1.0 + 0.01 * i as f64, 0.0, 0.0]);
            pts.push([1.0 - 0.01 * i as f64, 0.0, 0.0]);
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn whole_box_gives_one_part() {
        let c = two_clusters();
        let s = segment(&c, &[det([-2.0; 3], [2.0; 3])]).unwrap();
        assert!(s.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn disjoint_boxes_split_exactly() {
        let c = two_clusters();
        let ds = [det([-1.5, -1.0, -1.0], [-0.5, 1.0, 1.0]), det([0.5, -1.0, -1.0], [1.5, 1.0, 1.0])];
        let s = segment(&c, &ds).unwrap();
        for (p, l) in c.points.iter().zip(&s.labels) {
            assert_eq!(*l, if p[0] < 0.0 { 0 } else { 1 });
        }
    }

    #[test]
    fn completion_uses_nearest_assigned_point() {
        let c = two_clusters();
        let s = segment(&c, &[det([0.95, -1.0, -1.0], [1.5, 1.0, 1.0])]).unwrap();
        assert!(s.labels.iter().all(|&l| l == 0));
        let none = segment(&c, &[det([5.0; 3], [6.0; 3])]).unwrap();
        assert!(none.none_fired && none.labels.iter().all(|&l| l == -1));
    }

    #[test]
    fn miou_examples() {
        let gt = vec![0, 0, 1, 1];
        assert_eq!(object_miou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(object_miou(&[5, 5, 3, 3], &gt).unwrap(), 1.0);
        assert_eq!(object_miou(&[0, 0, 0, 0], &gt).unwrap(), 0.25);
        assert!(object_miou(&[0, 0], &gt).is_err());
    }

    #[test]
    fn identical_clouds_qualify_everything() {
        let c = two_clusters();
        let clouds = vec![c.clone(), c.clone(), c];
        let cand = CandidateRegions {
            layer: "x".into(),
            tiers: TierSet::SALIENT,
            kind: RegionKind::Salient,
            regions: vec![vec![0, 2, 4]; 3],
        };
        let ds = qualify(&[cand], &clouds, 0, DEFAULT_Q, DEFAULT_MARGIN);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].stability, 0.0);
    }

    #[test]
    fn complement_of_a_box() {
        let c = two_clusters();
        let left: Vec<usize> = (0..20).filter(|&i| c.points[i][0] < 0.0).collect();
        let comp = complement_region(&c.points, &left);
        assert_eq!(comp, (0..20).filter(|&i| c.points[i][0] > 0.0).collect::<Vec<_>>());
    }

    fn brute_assignment(w: &[Vec<f64>]) -> f64 {
        fn rec(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == w.len() {
                return 0.0;
            }
            // Leaving a row unmatched is allowed only when columns run out.
            let mut best = if w.len() > w[0].len() { rec(w, row + 1, used) } else { f64::NEG_INFINITY };
            for j in 0..w[0].len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(w[row][j] + rec(w, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(w, 0, &mut vec![false; w[0].len()])
    }

    proptest! {
        #[test]
        fn hungarian_matches_brute_force(rows in 1usize..5, cols in 1usize..5, seed in prop::collection::vec(0.0f64..1.0, 16)) {
            let w: Vec<Vec<f64>> = (0..rows).map(|i| (0..cols).map(|j| seed[i * 4 + j]).collect()).collect();
            let a = hungarian(&w);
            let got: f64 = a.iter().enumerate().map(|(i, c)| c.map_or(0.0, |j| w[i][j])).sum();
            let mut cols_used: Vec<usize> = a.iter().flatten().copied().collect();
            let n_used = cols_used.len();
            cols_used.sort_unstable();
            cols_used.dedup();
            prop_assert_eq!(cols_used.len(), n_used);
            prop_assert_eq!(n_used, rows.min(cols));
            prop_assert!((got - brute_assignment(&w)).abs() < 1e-9);
        }

        #[test]
        fn miou_is_permutation_invariant(labels in prop::collection::vec(0i32..3, 4..40), perm in 0usize..6) {
            let p = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
            let relabeled: Vec<i32> = labels.iter().map(|&l| p[l as usize]).collect();
            prop_assert!((object_miou(&relabeled, &labels).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn more_detectors_assign_no_fewer_points(x in prop::collection::vec(-1.0f64..1.0, 30)) {
            let pts: Vec<Point3> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let cloud = PointCloud::new(pts).unwrap();
            let a = det([-0.5; 3], [0.2; 3]);
            let b = det([0.0; 3], [0.9; 3]);
            let count = |ds: &[PartDetector]| cloud.points.iter().filter(|p| ds.iter().any(|d| d.contains(p))).count();
            prop_assert!(count(&[a.clone(), b]) >= count(&[a]));
        }
    }
}
