//! Point-set operations: sampling, grouping, shared per-group convolution and
//! channel-wise max pooling.
//!
//! Every routine is deterministic. Ties are always broken toward the lowest
//! index so that repeated runs produce bit-identical topology.

use serde::{Deserialize, Serialize};

use crate::netcore::{layers, Activation, Tensor};
use crate::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    #[serde(default)]
    pub part_labels: Option<Vec<i32>>,
    #[serde(default)]
    pub class_label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        let cloud = Self { points, part_labels: None, class_label: None };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_labels(mut self, part_labels: Option<Vec<i32>>, class_label: Option<usize>) -> Result<Self> {
        self.part_labels = part_labels;
        self.class_label = class_label;
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("point cloud must hold at least one point".into()));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        if let Some(labels) = &self.part_labels {
            if labels.len() != self.points.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} part labels for {} points",
                    labels.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }

    /// Centers on the centroid and scales into the unit ball (max norm 1).
    pub fn normalize(&mut self) {
        let c = centroid(self.points.iter());
        for p in &mut self.points {
            *p = sub(p, &c);
        }
        let m = self.max_norm();
        if m > 0.0 {
            for p in &mut self.points {
                for v in p.iter_mut() {
                    *v /= m;
                }
            }
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::new(vec![self.points.len(), 3], data).expect("consistent shape")
    }

    /// Indices of points carrying part id `part`.
    pub fn part_indices(&self, part: i32) -> Vec<usize> {
        self.part_labels
            .as_ref()
            .map(|l| l.iter().enumerate().filter(|(_, &p)| p == part).map(|(i, _)| i).collect())
            .unwrap_or_default()
    }

    /// Distinct part ids in ascending order.
    pub fn part_ids(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self.part_labels.clone().unwrap_or_default();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Center indices plus fixed-size neighbor lists for each center.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedSet {
    pub centers: Vec<usize>,
    pub k: usize,
    /// `centers.len() * k` indices into the parent point set.
    pub neighbors: Vec<usize>,
    /// `neighbor - center` for every slot, same layout as `neighbors`.
    pub offsets: Vec<Point3>,
}

impl GroupedSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn neighbors_of(&self, c: usize) -> &[usize] {
        &self.neighbors[c * self.k..(c + 1) * self.k]
    }

    fn build(points: &[Point3], centers: &[usize], k: usize, neighbors: Vec<usize>) -> Self {
        let offsets = neighbors
            .chunks(k.max(1))
            .zip(centers)
            .flat_map(|(nbrs, &c)| nbrs.iter().map(move |&n| sub(&points[n], &points[c])))
            .collect();
        Self { centers: centers.to_vec(), k, neighbors, offsets }
    }
}

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn norm(p: &Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn centroid<'a>(points: impl Iterator<Item = &'a Point3>) -> Point3 {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for p in points {
        for d in 0..3 {
            acc[d] += p[d];
        }
        n += 1;
    }
    if n > 0 {
        for v in &mut acc {
            *v /= n as f64;
        }
    }
    acc
}

/// Farthest point sampling.
///
/// Starts from the point of largest norm and repeatedly takes the point
/// farthest from the already chosen set.
pub fn sample_fps(points: &[Point3], count: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if count > n {
        return Err(Error::InvalidArgument(format!("cannot sample {count} of {n} points")));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut start = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let v = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if v > best {
            best = v;
            start = i;
        }
    }
    let mut chosen = Vec::with_capacity(count);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = start;
    for _ in 0..count {
        chosen.push(current);
        taken[current] = true;
        let cp = points[current];
        let mut next = usize::MAX;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > far {
                far = min_d[i];
                next = i;
            }
        }
        current = next;
    }
    Ok(chosen)
}

/// Indices of all points sorted by `(distance to query, index)`, truncated to
/// `k`.
fn nearest_sorted(points: &[Point3], query: &Point3, k: usize, scratch: &mut Vec<(f64, usize)>) -> Vec<usize> {
    scratch.clear();
    scratch.extend(points.iter().enumerate().map(|(i, p)| (dist2(p, query), i)));
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
    scratch.iter().map(|&(_, i)| i).collect()
}

/// The `k` nearest points to every center (Euclidean, ties by lowest index).
pub fn group_knn(points: &[Point3], centers: &[usize], k: usize) -> Result<GroupedSet> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    check_centers(centers, n)?;
    let mut scratch = Vec::with_capacity(n);
    let mut neighbors = Vec::with_capacity(centers.len() * k);
    for &c in centers {
        let mut nbrs = nearest_sorted(points, &points[c], k, &mut scratch);
        // Coincident points may outrank the center on index; the center
        // always leads its own group.
        if nbrs[0] != c {
            if let Some(pos) = nbrs.iter().position(|&i| i == c) {
                nbrs.remove(pos);
            } else {
                nbrs.pop();
            }
            nbrs.insert(0, c);
        }
        neighbors.extend(nbrs);
    }
    Ok(GroupedSet::build(points, centers, k, neighbors))
}

/// Ball query: up to `k` points within `radius` of each center, nearest
/// first, padded with the center's own index.
pub fn group_ball(points: &[Point3], centers: &[usize], radius: f64, k: usize) -> Result<GroupedSet> {
    let n = points.len();
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    check_centers(centers, n)?;
    let r2 = radius * radius;
    let mut scratch = Vec::with_capacity(n);
    let mut neighbors = Vec::with_capacity(centers.len() * k);
    for &c in centers {
        let cp = points[c];
        scratch.clear();
        scratch.extend(
            points.iter().enumerate().filter_map(|(i, p)| {
                let d = dist2(p, &cp);
                (d <= r2 && i != c).then_some((d, i))
            }),
        );
        scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        neighbors.push(c);
        neighbors.extend(scratch.iter().take(k - 1).map(|&(_, i)| i));
        let filled = 1 + scratch.len().min(k - 1);
        neighbors.extend(std::iter::repeat(c).take(k - filled));
    }
    Ok(GroupedSet::build(points, centers, k, neighbors))
}

fn check_centers(centers: &[usize], n: usize) -> Result<()> {
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::InvalidArgument(format!("center index {bad} out of range for {n} points")));
    }
    Ok(())
}

/// Shared linear map + ReLU applied identically to every `(center, neighbor)`
/// feature vector of a `C x K x D` tensor.
pub fn conv_group(features: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "grouped features must be C x K x D, got {:?}",
            features.shape()
        )));
    }
    layers::shared_linear(features, weight, bias, Activation::Relu)
}

/// Channel-wise max over the neighbor axis of a `C x K x D` tensor.
///
/// Returns the pooled `C x D` tensor and, for every `(center, channel)`, the
/// winning neighbor slot (lowest slot on ties).
pub fn pool_max(h: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [c, k, d] = match *h.shape() {
        [c, k, d] => [c, k, d],
        _ => {
            return Err(Error::DimensionMismatch(format!("pool_max expects C x K x D, got {:?}", h.shape())))
        }
    };
    if k == 0 {
        return Err(Error::InvalidArgument("cannot pool over zero neighbors".into()));
    }
    let src = h.data();
    let mut out = vec![f64::NEG_INFINITY; c * d];
    let mut arg = vec![0usize; c * d];
    for ci in 0..c {
        let o = &mut out[ci * d..(ci + 1) * d];
        let a = &mut arg[ci * d..(ci + 1) * d];
        for ki in 0..k {
            let row = &src[(ci * k + ki) * d..(ci * k + ki + 1) * d];
            for ch in 0..d {
                if row[ch] > o[ch] {
                    o[ch] = row[ch];
                    a[ch] = ki;
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, d], out)?, arg))
}
