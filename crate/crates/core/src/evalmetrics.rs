//! Plane-level consistency of salient regions, part-level IoU, and the
//! per-class / per-layer tables built from them.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::netcore::Model;
use crate::pointops::{self, Point3, PointCloud};
use crate::relflow::{self, FlowConfig};
use crate::saliency::{self, TierSet};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.15;
pub const DEFAULT_KN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub normals: Vec<Point3>,
    /// Neighborhoods whose covariance has rank below 2.
    pub degenerate: Vec<bool>,
    pub k: usize,
}

fn covariance<'a>(pts: impl Iterator<Item = &'a Point3> + Clone) -> Matrix3<f64> {
    let mean = Vector3::from(pointops::centroid(pts.clone()));
    let mut cov = Matrix3::zeros();
    let mut n = 0.0;
    for p in pts {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
        n += 1.0;
    }
    cov / n
}

/// Sorted (ascending) eigenpairs of a symmetric 3x3 matrix.
fn eigen_sorted(m: Matrix3<f64>) -> [(f64, Vector3<f64>); 3] {
    let e = SymmetricEigen::new(m);
    let mut pairs: [(f64, Vector3<f64>); 3] = [0, 1, 2].map(|i| (e.eigenvalues[i], e.eigenvectors.column(i).into_owned()));
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}

/// Flips `n` so that z > 0, breaking z = 0 ties toward +x, then +y.
fn canonical_sign(n: Vector3<f64>) -> Vector3<f64> {
    let key = if n.z != 0.0 { n.z } else if n.x != 0.0 { n.x } else { n.y };
    if key < 0.0 {
        -n
    } else {
        n
    }
}

/// PCA normals over each point's `k` nearest neighbors.
pub fn estimate_normals(points: &[Point3], k: usize) -> Result<NormalField> {
    if k < 3 || points.len() < k {
        return Err(Error::InvalidArgument(format!("normal estimation needs 3 <= k <= N, got k = {k}, N = {}", points.len())));
    }
    let centers: Vec<usize> = (0..points.len()).collect();
    let groups = pointops::group_knn(points, &centers, k)?;
    let mut normals = Vec::with_capacity(points.len());
    let mut degenerate = Vec::with_capacity(points.len());
    for c in 0..points.len() {
        let nbrs = groups.neighbors_of(c);
        let cov = covariance(nbrs.iter().map(|&i| &points[i]));
        let pairs = eigen_sorted(cov);
        let scale = pairs[2].0.max(f64::MIN_POSITIVE);
        if pairs[2].0 <= 0.0 || pairs[1].0 <= 1e-12 * scale {
            normals.push([0.0, 0.0, 1.0]);
            degenerate.push(true);
        } else {
            let n = canonical_sign(pairs[0].1.normalize());
            normals.push([n.x, n.y, n.z]);
            degenerate.push(false);
        }
    }
    Ok(NormalField { normals, degenerate, k })
}

/// Flips every normal into the hemisphere of the set's principal axis
/// (dominant eigenvector of the second-moment matrix).
pub fn orient_to_principal(normals: &[Point3]) -> Vec<Point3> {
    if normals.is_empty() {
        return Vec::new();
    }
    let mut m = Matrix3::zeros();
    for n in normals {
        let v = Vector3::from(*n);
        m += v * v.transpose();
    }
    let u = canonical_sign(eigen_sorted(m)[2].1);
    normals
        .iter()
        .map(|n| {
            let v = Vector3::from(*n);
            if v.dot(&u) < 0.0 {
                [-n[0], -n[1], -n[2]]
            } else {
                *n
            }
        })
        .collect()
}

/// Trace of the covariance of the given unit normals (used as provided) and
/// whether it falls below `tau`.
pub fn plane_consistency(normals: &[Point3], tau: f64) -> Result<(f64, bool)> {
    if normals.is_empty() {
        return Err(Error::InvalidArgument("no salient normals".into()));
    }
    let var = covariance(normals.iter()).trace().max(0.0);
    Ok((var, var < tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    pub iou: f64,
    pub n_cor: usize,
    pub n_cls: usize,
    pub n_seg: usize,
    /// Both sets were empty; `iou` is reported as 0.
    pub empty: bool,
}

/// IoU of two index sets over `n` points (duplicates ignored).
pub fn part_iou(salient: &[usize], segment: &[usize], n: usize) -> Result<IouResult> {
    let mut a = vec![false; n];
    let mut b = vec![false; n];
    for (set, mask) in [(salient, &mut a), (segment, &mut b)] {
        for &i in set {
            if i >= n {
                return Err(Error::InvalidArgument(format!("index {i} out of range for {n} points")));
            }
            mask[i] = true;
        }
    }
    let n_cls = a.iter().filter(|&&x| x).count();
    let n_seg = b.iter().filter(|&&x| x).count();
    let n_cor = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = n_cls + n_seg - n_cor;
    Ok(IouResult {
        iou: if union == 0 { 0.0 } else { n_cor as f64 / union as f64 },
        n_cor,
        n_cls,
        n_seg,
        empty: union == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub tau: f64,
    pub k_normals: usize,
    pub tiers: TierSet,
    pub flow: FlowConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, k_normals: DEFAULT_KN, tiers: TierSet::SALIENT, flow: FlowConfig::default() }
    }
}

/// Per-cloud analysis shared by the plane and part tables.
#[derive(Debug, Clone)]
pub struct CloudAnalysis {
    pub class: usize,
    pub predicted: usize,
    /// `(layer, salient indices)` for every point-mapped layer.
    pub salient: Vec<(String, Vec<usize>)>,
}

pub fn analyze(model: &Model, cloud: &PointCloud, tiers: TierSet, flow: &FlowConfig) -> Result<CloudAnalysis> {
    let class = cloud.class_label.ok_or_else(|| Error::InvalidArgument("cloud without class label".into()))?;
    let (logits, trace) = model.forward_cloud(cloud)?;
    let input = trace.layers[0].name.clone();
    let (map, _) = relflow::relevance_flow(model, &trace, &input, flow)?;
    let salient = relflow::spatial_saliences(&trace, &map)
        .into_iter()
        .map(|s| {
            let m = saliency::tier(&s.values, &s.layer)?;
            Ok((s.layer, saliency::salient_points(&m, tiers)))
        })
        .collect::<Result<_>>()?;
    Ok(CloudAnalysis { class, predicted: crate::netcore::layers::argmax(&logits), salient })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCp {
    pub layer: String,
    pub n_p: usize,
    pub c_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCp {
    pub name: String,
    pub n_p: usize,
    pub n_t: usize,
    pub c_p: f64,
    /// Layer the reported value comes from.
    pub layer: String,
    pub per_layer: Vec<LayerCp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartIou {
    pub class: String,
    pub layer: String,
    pub part_id: i32,
    pub iou: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub format_version: u32,
    /// Requested layer, or `max` for the best layer per class.
    pub layer: String,
    pub tau: f64,
    pub tiers: String,
    pub classes: Vec<ClassCp>,
    pub parts: Vec<PartIou>,
}

fn class_members(clouds: &[PointCloud], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); n_classes];
    for (i, c) in clouds.iter().enumerate() {
        let l = c.class_label.ok_or_else(|| Error::InvalidArgument("cloud without class label".into()))?;
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!("class {l} out of range")));
        }
        members[l].push(i);
    }
    Ok(members)
}

/// C_p per class. `layer = None` reports the maximum over point-mapped
/// layers; every layer's value is kept in `per_layer`. Classes without clouds
/// are skipped; an empty input is an error.
pub fn class_cp(model: &Model, clouds: &[PointCloud], layer: Option<&str>, cfg: &MetricConfig) -> Result<Vec<ClassCp>> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("no clouds to evaluate".into()));
    }
    let names = model.class_names();
    let members = class_members(clouds, names.len())?;
    // Per cloud, per layer: does the salient region qualify?
    let per_cloud: Vec<(usize, Vec<(String, bool)>)> = clouds
        .par_iter()
        .map(|cloud| {
            let a = analyze(model, cloud, cfg.tiers, &cfg.flow)?;
            let field = estimate_normals(&cloud.points, cfg.k_normals)?;
            let flags = a
                .salient
                .iter()
                .filter(|(name, _)| layer.is_none_or(|l| l == name))
                .map(|(name, idx)| {
                    let ns: Vec<Point3> = idx.iter().map(|&i| field.normals[i]).collect();
                    let ok = !ns.is_empty() && plane_consistency(&orient_to_principal(&ns), cfg.tau)?.1;
                    Ok((name.clone(), ok))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((a.class, flags))
        })
        .collect::<Result<_>>()?;
    if let Some(l) = layer {
        if per_cloud[0].1.is_empty() {
            return Err(Error::UnknownLayer(format!("{l} (not a point-mapped layer)")));
        }
    }

    let mut out = Vec::new();
    for (class, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let layers: Vec<String> = per_cloud[idx[0]].1.iter().map(|(n, _)| n.clone()).collect();
        let n_t = idx.len();
        let per_layer: Vec<LayerCp> = layers
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let n_p = idx.iter().filter(|&&i| per_cloud[i].1[j].1).count();
                LayerCp { layer: name.clone(), n_p, c_p: n_p as f64 / n_t as f64 }
            })
            .collect();
        // Highest C_p, earliest layer on ties.
        let best = per_layer.iter().fold(&per_layer[0], |b, x| if x.n_p > b.n_p { x } else { b });
        out.push(ClassCp {
            name: names[class].clone(),
            n_p: best.n_p,
            n_t,
            c_p: best.c_p,
            layer: best.layer.clone(),
            per_layer: per_layer.clone(),
        });
    }
    Ok(out)
}

/// Mean IoU of each layer's salient set against each ground-truth part, per
/// class; the best part per `(class, layer)` is flagged.
pub fn layer_part_table(model: &Model, clouds: &[PointCloud], cfg: &MetricConfig) -> Result<Vec<PartIou>> {
    if clouds.iter().any(|c| c.part_labels.is_none()) {
        return Err(Error::InvalidArgument("part table needs part labels on every cloud".into()));
    }
    let names = model.class_names();
    let members = class_members(clouds, names.len())?;
    let analyses: Vec<CloudAnalysis> =
        clouds.par_iter().map(|c| analyze(model, c, cfg.tiers, &cfg.flow)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (class, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut parts: Vec<i32> = idx.iter().flat_map(|&i| clouds[i].part_ids()).collect();
        parts.sort_unstable();
        parts.dedup();
        let layers: Vec<String> = analyses[idx[0]].salient.iter().map(|(n, _)| n.clone()).collect();
        for (j, layer) in layers.iter().enumerate() {
            let start = rows.len();
            for &part in &parts {
                let mut sum = 0.0;
                for &i in idx {
                    let seg = clouds[i].part_indices(part);
                    sum += part_iou(&analyses[i].salient[j].1, &seg, clouds[i].len())?.iou;
                }
                rows.push(PartIou {
                    class: names[class].clone(),
                    layer: layer.clone(),
                    part_id: part,
                    iou: sum / idx.len() as f64,
                    best: false,
                });
            }
            if let Some(b) = (start..rows.len()).reduce(|b, r| if rows[r].iou > rows[b].iou { r } else { b }) {
                rows[b].best = true;
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                [r * t.cos(), r * t.sin(), z]
            })
            .collect()
    }

    #[test]
    fn flat_plane_normals_point_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Point3> = (0..200).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0]).collect();
        let f = estimate_normals(&pts, 16).unwrap();
        for n in &f.normals {
            assert!((n[2] - 1.0).abs() < 1e-12 && n[0].abs() < 1e-6 && n[1].abs() < 1e-6, "{n:?}");
        }
    }

    fn fibonacci_sphere(n: usize) -> Vec<Point3> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                [r * t.cos(), r * t.sin(), z]
            })
            .collect()
    }

    fn radial_cosines(pts: &[Point3], k: usize) -> Vec<f64> {
        let f = estimate_normals(pts, k).unwrap();
        pts.iter()
            .zip(&f.normals)
            .map(|(p, n)| {
                assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-9);
                (0..3).map(|d| p[d] * n[d]).sum::<f64>().abs()
            })
            .collect()
    }

    #[test]
    fn sphere_normals_are_radial() {
        let cos10 = 10f64.to_radians().cos();
        let even = radial_cosines(&fibonacci_sphere(512), 8);
        assert!(even.iter().all(|&c| c >= cos10));
        // Random sampling leaves a few clumped neighborhoods slightly worse.
        let mut rand = radial_cosines(&sphere(512, 2), 8);
        rand.sort_by(f64::total_cmp);
        assert!(rand[5] >= cos10, "1st percentile cos {}", rand[5]);
    }

    #[test]
    fn too_few_points_for_normals() {
        assert!(estimate_normals(&[[0.0; 3], [1.0, 0.0, 0.0]], 3).is_err());
    }

    #[test]
    fn collinear_neighborhood_is_flagged() {
        let pts: Vec<Point3> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let f = estimate_normals(&pts, 4).unwrap();
        assert!(f.degenerate.iter().all(|&d| d));
        assert!(f.normals.iter().all(|n| *n == [0.0, 0.0, 1.0]));
    }

    #[test]
    fn consistency_examples() {
        let (v, ok) = plane_consistency(&[[0.0, 0.0, 1.0]; 5], 0.15).unwrap();
        assert!(v.abs() < 1e-15 && ok);
        let mixed = [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let (v, ok) = plane_consistency(&mixed, 0.15).unwrap();
        assert!((v - 0.5).abs() < 1e-12 && !ok);
        let (v, ok) = plane_consistency(&sphere(10_000, 3), 0.15).unwrap();
        assert!((v - 1.0).abs() < 0.02 && !ok, "{v}");
        assert!(plane_consistency(&[], 0.15).is_err());
    }

    #[test]
    fn principal_orientation_removes_sign_noise() {
        let ns = [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.0, 0.1f64.sin(), -(0.1f64.cos())]];
        let (raw, _) = plane_consistency(&ns, 0.15).unwrap();
        let (fixed, ok) = plane_consistency(&orient_to_principal(&ns), 0.15).unwrap();
        assert!(raw > 0.5 && fixed < 0.01 && ok);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(part_iou(&[1, 2, 3], &[2, 3, 4], 5).unwrap().iou, 0.5);
        assert_eq!(part_iou(&[1, 2], &[1, 2], 5).unwrap().iou, 1.0);
        assert_eq!(part_iou(&[0], &[1], 5).unwrap().iou, 0.0);
        let e = part_iou(&[], &[], 5).unwrap();
        assert!(e.empty && e.iou == 0.0);
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(part_iou(&all, &[2, 3, 4], 10).unwrap().iou, 0.3);
        assert!(part_iou(&[10], &[], 10).is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in prop::collection::btree_set(0usize..40, 0..40), b in prop::collection::btree_set(0usize..40, 0..40)) {
            let a: Vec<usize> = a.into_iter().collect();
            let b: Vec<usize> = b.into_iter().collect();
            let x = part_iou(&a, &b, 40).unwrap();
            let y = part_iou(&b, &a, 40).unwrap();
            prop_assert_eq!(x.iou, y.iou);
            prop_assert!(x.n_cor <= x.n_cls.min(x.n_seg));
            prop_assert!((0.0..=1.0).contains(&x.iou));
        }

        #[test]
        fn consistency_is_rotation_invariant(seed in 0u64..1000, ax in -3.0f64..3.0, ay in -3.0f64..3.0) {
            let ns = sphere(50, seed);
            let r = nalgebra::Rotation3::from_euler_angles(ax, ay, 0.3);
            let rot: Vec<Point3> = ns.iter().map(|n| { let v = r * Vector3::from(*n); [v.x, v.y, v.z] }).collect();
            let (a, _) = plane_consistency(&ns, 0.15).unwrap();
            let (b, _) = plane_consistency(&rot, 0.15).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn normals_are_rotation_equivariant(seed in 0u64..200, ang in -3.0f64..3.0) {
            let pts = sphere(128, seed);
            let r = nalgebra::Rotation3::from_euler_angles(0.4, ang, -0.2);
            let rot: Vec<Point3> = pts.iter().map(|p| { let v = r * Vector3::from(*p); [v.x, v.y, v.z] }).collect();
            let a = estimate_normals(&pts, 8).unwrap();
            let b = estimate_normals(&rot, 8).unwrap();
            for (na, nb) in a.normals.iter().zip(&b.normals) {
                let ra = r * Vector3::from(*na);
                let c = ra.dot(&Vector3::from(*nb)).abs();
                prop_assert!((c - 1.0).abs() < 1e-6, "{}", c);
            }
        }
    }
}
