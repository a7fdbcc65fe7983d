//! Synthetic labelled shapes with known planes and parts.
//!
//! Each class is a [`Recipe`]: a handful of surface primitives grouped into
//! parts. Instances get a random anisotropic stretch, optional tilt and yaw,
//! uniform surface sampling, Gaussian-free uniform jitter, and are normalized
//! into the unit ball.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pointops::{Point3, PointCloud};
use crate::{Error, Result};

pub const BUILTIN_CLASSES: [&str; 4] = ["table", "lamp", "plane-sheet", "ball"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Flat rectangle `center + a*u + b*v`, `a, b` in `[-1, 1]`.
    Patch { center: Point3, u: Point3, v: Point3 },
    /// Surface of an axis-aligned box.
    Box { center: Point3, half: Point3 },
    /// Lateral surface of a z-aligned cylinder.
    Cylinder { base: Point3, radius: f64, height: f64 },
    /// Lateral surface of a z-aligned cone frustum.
    Frustum { base: Point3, r_bottom: f64, r_top: f64, height: f64 },
    Sphere { center: Point3, radius: f64 },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Patch { u, v, .. } => 4.0 * norm(cross(u, v)),
            Primitive::Box { half: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Primitive::Cylinder { radius, height, .. } => 2.0 * PI * radius * height,
            Primitive::Frustum { r_bottom, r_top, height, .. } => {
                PI * (r_bottom + r_top) * ((r_bottom - r_top).powi(2) + height * height).sqrt()
            }
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        }
    }

    fn is_valid(&self) -> bool {
        let finite = |p: &Point3| p.iter().all(|v| v.is_finite());
        match self {
            Primitive::Patch { center, u, v } => finite(center) && norm(cross(*u, *v)) > 0.0,
            Primitive::Box { center, half } => finite(center) && half.iter().all(|&h| h > 0.0),
            Primitive::Cylinder { base, radius, height } => finite(base) && *radius > 0.0 && *height > 0.0,
            Primitive::Frustum { base, r_bottom, r_top, height } => {
                finite(base) && *r_bottom >= 0.0 && *r_top >= 0.0 && r_bottom + r_top > 0.0 && *height > 0.0
            }
            Primitive::Sphere { center, radius } => finite(center) && *radius > 0.0,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        match *self {
            Primitive::Patch { center, u, v } => {
                let (a, b) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
                [0, 1, 2].map(|d| center[d] + a * u[d] + b * v[d])
            }
            Primitive::Box { center: c, half: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
                let axis = if pick < areas[0] { 0 } else if pick < areas[0] + areas[1] { 1 } else { 2 };
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for d in 0..3 {
                    p[d] = c[d] + if d == axis { sign * h[d] } else { rng.gen_range(-h[d]..=h[d]) };
                }
                p
            }
            Primitive::Cylinder { base, radius, height } => {
                let t = rng.gen_range(0.0..2.0 * PI);
                [base[0] + radius * t.cos(), base[1] + radius * t.sin(), base[2] + rng.gen_range(0.0..=height)]
            }
            Primitive::Frustum { base, r_bottom, r_top, height } => {
                // Radius-weighted height so samples are uniform over the area.
                let rmax = r_bottom.max(r_top);
                let s = loop {
                    let s: f64 = rng.gen_range(0.0..=1.0);
                    let r = r_bottom + (r_top - r_bottom) * s;
                    if rng.gen_range(0.0..=rmax) <= r {
                        break s;
                    }
                };
                let r = r_bottom + (r_top - r_bottom) * s;
                let t = rng.gen_range(0.0..2.0 * PI);
                [base[0] + r * t.cos(), base[1] + r * t.sin(), base[2] + s * height]
            }
            Primitive::Sphere { center, radius } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let t = rng.gen_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).max(0.0).sqrt();
                [center[0] + radius * r * t.cos(), center[1] + radius * r * t.sin(), center[2] + radius * z]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    pub id: i32,
    pub primitives: Vec<Primitive>,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub class_name: String,
    pub parts: Vec<PartSpec>,
    /// Uniform jitter half-width, in normalized units.
    pub jitter: f64,
    /// Per-axis relative stretch drawn from `[-stretch, stretch]`.
    pub stretch: f64,
    /// Maximum tilt about the x axis (radians).
    pub tilt: f64,
    /// Random rotation about z.
    pub yaw: bool,
    pub seed: u64,
}

impl Recipe {
    pub fn total_points(&self) -> usize {
        self.parts.iter().map(|p| p.points).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("recipe `{}`: {m}", self.class_name)));
        if self.parts.is_empty() {
            return bad("no parts");
        }
        let mut ids: Vec<i32> = self.parts.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.parts.len() {
            return bad("part ids must be distinct");
        }
        for p in &self.parts {
            if p.points == 0 || p.primitives.is_empty() || !p.primitives.iter().all(Primitive::is_valid) {
                return bad(&format!("part `{}` is empty or degenerate", p.name));
            }
        }
        if !(self.jitter >= 0.0 && self.stretch >= 0.0 && self.stretch < 1.0 && self.tilt >= 0.0) {
            return bad("jitter/stretch/tilt out of range");
        }
        Ok(())
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let part = |name: &str, id, primitives, points| PartSpec { name: name.into(), id, primitives, points };
        let (parts, tilt) = match name {
            "table" => {
                let legs = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
                    .map(|(sx, sy)| Primitive::Box { center: [0.7 * sx, 0.4 * sy, 0.325], half: [0.04, 0.04, 0.325] })
                    .to_vec();
                let top = Primitive::Patch { center: [0.0, 0.0, 0.75], u: [0.8, 0.0, 0.0], v: [0.0, 0.5, 0.0] };
                (vec![part("top", 0, vec![top], 256), part("legs", 1, legs, 256)], 0.0)
            }
            "lamp" => {
                let pole = Primitive::Cylinder { base: [0.0; 3], radius: 0.04, height: 0.9 };
                let shade = Primitive::Frustum { base: [0.0, 0.0, 0.8], r_bottom: 0.35, r_top: 0.15, height: 0.35 };
                (vec![part("pole", 0, vec![pole], 224), part("shade", 1, vec![shade], 288)], 0.0)
            }
            "plane-sheet" => {
                let sheet = Primitive::Patch { center: [0.0; 3], u: [0.8, 0.0, 0.0], v: [0.0, 0.6, 0.0] };
                (vec![part("sheet", 0, vec![sheet], 512)], 1.0)
            }
            "ball" => (vec![part("sphere", 0, vec![Primitive::Sphere { center: [0.0; 3], radius: 0.5 }], 512)], 0.0),
            other => return Err(Error::InvalidArgument(format!("no builtin recipe `{other}`"))),
        };
        Ok(Self { class_name: name.into(), parts, jitter: 0.01, stretch: 0.15, tilt, yaw: false, seed: 0 })
    }
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Splits `total` across weights by largest remainder.
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = total - out.iter().sum::<usize>();
    for &i in rest.iter().take(missing) {
        out[i] += 1;
    }
    out
}

/// One instance of `recipe`; `index` selects an independent random stream.
pub fn generate_one(recipe: &Recipe, class_label: usize, index: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    rng.set_stream(index);
    let stretch: Point3 = [0; 3].map(|_| 1.0 + rng.gen_range(-recipe.stretch..=recipe.stretch));
    let tilt = if recipe.tilt > 0.0 { rng.gen_range(-recipe.tilt..=recipe.tilt) } else { 0.0 };
    let yaw = if recipe.yaw { rng.gen_range(0.0..2.0 * PI) } else { 0.0 };
    let (st, ct) = tilt.sin_cos();
    let (sy, cy) = yaw.sin_cos();

    let mut points = Vec::with_capacity(recipe.total_points());
    let mut labels = Vec::with_capacity(recipe.total_points());
    for part in &recipe.parts {
        let areas: Vec<f64> = part.primitives.iter().map(Primitive::area).collect();
        for (prim, n) in part.primitives.iter().zip(allocate(part.points, &areas)) {
            for _ in 0..n {
                let p = prim.sample(&mut rng);
                let p = [p[0] * stretch[0], p[1] * stretch[1], p[2] * stretch[2]];
                let p = [p[0], ct * p[1] - st * p[2], st * p[1] + ct * p[2]];
                points.push([cy * p[0] - sy * p[1], sy * p[0] + cy * p[1], p[2]]);
                labels.push(part.id);
            }
        }
    }
    let mut cloud = PointCloud { points, part_labels: Some(labels), class_label: Some(class_label) };
    cloud.normalize();
    if recipe.jitter > 0.0 {
        for p in &mut cloud.points {
            for v in p.iter_mut() {
                *v += rng.gen_range(-recipe.jitter..=recipe.jitter);
            }
        }
        cloud.normalize();
    }
    cloud
}

pub fn generate(recipe: &Recipe, class_label: usize, count: usize) -> Result<Vec<PointCloud>> {
    recipe.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    Ok((0..count as u64).map(|i| generate_one(recipe, class_label, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: BUILTIN_CLASSES.iter().map(|s| s.to_string()).collect(),
            train_per_class: 200,
            test_per_class: 50,
            jitter: 0.01,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub seed: u64,
}

fn mix(seed: u64, class: u64, split: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ class.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ split.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn synthetic_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, name) in cfg.classes.iter().enumerate() {
        let mut recipe = Recipe::builtin(name)?;
        recipe.jitter = cfg.jitter;
        recipe.seed = mix(cfg.seed, c as u64, 0);
        train.extend(generate(&recipe, c, cfg.train_per_class)?);
        recipe.seed = mix(cfg.seed, c as u64, 1);
        test.extend(generate(&recipe, c, cfg.test_per_class)?);
    }
    Ok(Dataset { classes: cfg.classes.clone(), train, test, seed: cfg.seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_sheet_is_planar() {
        let mut r = Recipe::builtin("plane-sheet").unwrap();
        r.jitter = 0.0;
        for cloud in generate(&r, 0, 5).unwrap() {
            let p = &cloud.points;
            let n = cross(crate::pointops::sub(&p[1], &p[0]), crate::pointops::sub(&p[2], &p[0]));
            let n = n.map(|v| v / norm(n));
            let d0: f64 = (0..3).map(|d| n[d] * p[0][d]).sum();
            for q in p {
                let d: f64 = (0..3).map(|d| n[d] * q[d]).sum();
                assert!((d - d0).abs() < 1e-12, "off-plane by {}", d - d0);
            }
        }
    }

    #[test]
    fn same_seed_same_clouds() {
        let r = Recipe::builtin("lamp").unwrap();
        assert_eq!(generate(&r, 1, 3).unwrap(), generate(&r, 1, 3).unwrap());
    }

    #[test]
    fn table_part_histogram_matches_recipe() {
        let r = Recipe::builtin("table").unwrap();
        let cloud = &generate(&r, 0, 1).unwrap()[0];
        assert_eq!(cloud.len(), 512);
        for part in &r.parts {
            assert_eq!(cloud.part_indices(part.id).len(), part.points);
        }
    }

    #[test]
    fn normalized_to_unit_ball() {
        for name in BUILTIN_CLASSES {
            for cloud in generate(&Recipe::builtin(name).unwrap(), 0, 3).unwrap() {
                assert!((cloud.max_norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_recipes_rejected() {
        let mut r = Recipe::builtin("table").unwrap();
        r.parts[1].id = 0;
        assert!(generate(&r, 0, 1).is_err());
        let r = Recipe::builtin("ball").unwrap();
        assert!(generate(&r, 0, 0).is_err());
        assert!(Recipe::builtin("teapot").is_err());
    }

    fn shape_stats(c: &PointCloud) -> Vec<f64> {
        let n = c.len() as f64;
        let mut cov = nalgebra::Matrix3::<f64>::zeros();
        let mean = crate::pointops::centroid(c.points.iter());
        for p in &c.points {
            let d = nalgebra::Vector3::from(crate::pointops::sub(p, &mean));
            cov += d * d.transpose();
        }
        let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v / n).collect();
        ev.sort_by(f64::total_cmp);
        let radii: Vec<f64> = c.points.iter().map(crate::pointops::norm).collect();
        let mr = radii.iter().sum::<f64>() / n;
        let sr = (radii.iter().map(|r| (r - mr).powi(2)).sum::<f64>() / n).sqrt();
        vec![ev[0], ev[1], ev[2], mr, sr]
    }

    #[test]
    fn nearest_centroid_baseline_separates_classes() {
        let cfg = DatasetConfig { train_per_class: 40, test_per_class: 20, ..Default::default() };
        let ds = synthetic_dataset(&cfg).unwrap();
        let k = ds.classes.len();
        let mut centroids = vec![vec![0.0; 5]; k];
        let mut counts = vec![0.0; k];
        for c in &ds.train {
            let l = c.class_label.unwrap();
            for (a, v) in centroids[l].iter_mut().zip(shape_stats(c)) {
                *a += v;
            }
            counts[l] += 1.0;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let hits = ds
            .test
            .iter()
            .filter(|c| {
                let s = shape_stats(c);
                let best = (0..k)
                    .min_by(|&a, &b| {
                        let da: f64 = s.iter().zip(&centroids[a]).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = s.iter().zip(&centroids[b]).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                Some(best) == c.class_label
            })
            .count();
        let acc = hits as f64 / ds.test.len() as f64;
        assert!(acc > 0.7, "nearest-centroid accuracy {acc}");
    }
}
