//! Region-collapse attack: pick `N` centers, gather each center's `K`
//! nearest points and translate the region so its centroid lands on the
//! centroid of the low-salience (blue) points.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::FORMAT_VERSION;
use crate::netcore::Model;
use crate::pointops::{self, Point3, PointCloud};
use crate::relflow::{self, FlowConfig};
use crate::saliency::{self, Tier};
use crate::{Error, Result};

pub const DEFAULT_NS: [usize; 5] = [1, 5, 10, 15, 20];
pub const DEFAULT_KS: [usize; 3] = [10, 20, 40];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterMode {
    /// Highest input salience first, lowest index on ties.
    Salient,
    /// Uniform draw without replacement.
    Random,
}

impl std::str::FromStr for CenterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salient" => Ok(Self::Salient),
            "random" => Ok(Self::Random),
            _ => Err(Error::InvalidArgument(format!("unknown center mode {s:?} (salient|random)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Destination {
    /// Centroid of the blue tier, falling back to the cloud centroid.
    BlueCentroid,
    CloudCentroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub regions: usize,
    pub neighbors: usize,
    pub mode: CenterMode,
    pub destination: Destination,
    pub seed: u64,
    pub flow: FlowConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            regions: 5,
            neighbors: 40,
            mode: CenterMode::Salient,
            destination: Destination::BlueCentroid,
            seed: 7,
            flow: FlowConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crafted {
    pub cloud: PointCloud,
    pub centers: Vec<usize>,
    pub moved: Vec<usize>,
    pub destination: Point3,
    /// The blue tier was empty and the cloud centroid was used instead.
    pub fallback: bool,
}

fn choose_centers(salience: &[f64], cfg: &AttackConfig, stream: u64) -> Vec<usize> {
    let n = cfg.regions.min(salience.len());
    match cfg.mode {
        CenterMode::Salient => {
            let mut order: Vec<usize> = (0..salience.len()).collect();
            order.sort_by(|&a, &b| salience[b].total_cmp(&salience[a]).then(a.cmp(&b)));
            order.truncate(n);
            order
        }
        CenterMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            rand::seq::index::sample(&mut rng, salience.len(), n).into_vec()
        }
    }
}

/// Builds the adversarial cloud from a precomputed input salience.
/// `stream` decorrelates random centers between clouds.
pub fn craft_sample(cloud: &PointCloud, salience: &[f64], cfg: &AttackConfig, stream: u64) -> Result<Crafted> {
    if salience.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!("{} salience values for {} points", salience.len(), cloud.len())));
    }
    let map = saliency::tier(salience, "input")?;
    let blue: Vec<usize> = (0..cloud.len()).filter(|&i| map.tiers[i] == Tier::Blue).collect();
    let (destination, fallback) = match cfg.destination {
        Destination::BlueCentroid if !blue.is_empty() => (pointops::centroid(blue.iter().map(|&i| &cloud.points[i])), false),
        Destination::BlueCentroid => (pointops::centroid(cloud.points.iter()), true),
        Destination::CloudCentroid => (pointops::centroid(cloud.points.iter()), false),
    };
    let centers = choose_centers(salience, cfg, stream);
    let k = cfg.neighbors.min(cloud.len());
    if centers.is_empty() || k == 0 {
        return Ok(Crafted { cloud: cloud.clone(), centers, moved: Vec::new(), destination, fallback });
    }
    let groups = pointops::group_knn(&cloud.points, &centers, k)?;
    let mut out = cloud.clone();
    let mut moved_mask = vec![false; cloud.len()];
    let mut moved = Vec::new();
    for c in 0..centers.len() {
        let region: Vec<usize> = groups.neighbors_of(c).iter().copied().filter(|&i| !moved_mask[i]).collect();
        if region.is_empty() {
            continue;
        }
        let g = pointops::centroid(region.iter().map(|&i| &cloud.points[i]));
        let shift = pointops::sub(&destination, &g);
        for &i in &region {
            for d in 0..3 {
                out.points[i][d] = cloud.points[i][d] + shift[d];
            }
            moved_mask[i] = true;
            moved.push(i);
        }
    }
    Ok(Crafted { cloud: out, centers, moved, destination, fallback })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub original: usize,
    pub adversarial: usize,
    pub success: bool,
    pub fallback: bool,
    pub time_s: f64,
}

/// Salience, crafting and the second forward pass for one cloud.
pub fn attack_once(model: &Model, cloud: &PointCloud, cfg: &AttackConfig, stream: u64) -> Result<AttackOutcome> {
    let start = Instant::now();
    let (original, s) = relflow::input_salience(model, cloud, &cfg.flow)?;
    let crafted = craft_sample(cloud, &s.values, cfg, stream)?;
    let adversarial = model.predict(&crafted.cloud)?;
    Ok(AttackOutcome {
        original,
        adversarial,
        success: adversarial != original,
        fallback: crafted.fallback,
        time_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAttack {
    pub class: String,
    pub accuracy: f64,
    pub attempts: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub mode: CenterMode,
    pub rate: f64,
    pub successes: usize,
    pub attempts: usize,
    pub fallbacks: usize,
    pub per_class: Vec<ClassAttack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub modes: Vec<CenterMode>,
    pub destination: Destination,
    pub seed: u64,
    pub flow: FlowConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ns: DEFAULT_NS.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            modes: vec![CenterMode::Salient, CenterMode::Random],
            destination: Destination::BlueCentroid,
            seed: 7,
            flow: FlowConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub format_version: u32,
    pub model: String,
    pub config: SweepConfig,
    pub clouds: usize,
    pub grid: Vec<GridCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub mode: CenterMode,
    pub mean_time_s: f64,
    pub per_class: Vec<(String, f64)>,
}

/// Wall-clock measurements, kept apart so the report itself is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTimings {
    pub format_version: u32,
    pub salience_mean_s: f64,
    pub grid: Vec<CellTiming>,
}

/// Runs every `(N, K, mode)` cell over `clouds`. Each cloud's salience is
/// computed once and its cost is added to every attack's time.
pub fn sweep(model: &Model, model_name: &str, clouds: &[PointCloud], cfg: &SweepConfig) -> Result<(AttackReport, AttackTimings)> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("attack sweep needs at least one cloud".into()));
    }
    if cfg.ns.is_empty() || cfg.ks.is_empty() || cfg.modes.is_empty() {
        return Err(Error::InvalidArgument("attack grid is empty".into()));
    }
    let prepared: Vec<(usize, Vec<f64>, f64)> = clouds
        .par_iter()
        .map(|c| {
            let start = Instant::now();
            let (pred, s) = relflow::input_salience(model, c, &cfg.flow)?;
            Ok((pred, s.values, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;
    let names = model.class_names();
    let mut grid = Vec::new();
    let mut timing = Vec::new();
    for &mode in &cfg.modes {
        for &n in &cfg.ns {
            for &k in &cfg.ks {
                let acfg = AttackConfig { regions: n, neighbors: k, mode, destination: cfg.destination, seed: cfg.seed, flow: cfg.flow };
                let outcomes: Vec<(bool, bool, f64)> = clouds
                    .par_iter()
                    .zip(&prepared)
                    .enumerate()
                    .map(|(i, (c, (pred, s, t0)))| {
                        let start = Instant::now();
                        let crafted = craft_sample(c, s, &acfg, i as u64)?;
                        let adv = model.predict(&crafted.cloud)?;
                        Ok((adv != *pred, crafted.fallback, t0 + start.elapsed().as_secs_f64()))
                    })
                    .collect::<Result<_>>()?;
                let mut per_class = Vec::new();
                let mut per_class_time = Vec::new();
                for (ci, name) in names.iter().enumerate() {
                    let idx: Vec<usize> = (0..clouds.len()).filter(|&i| clouds[i].class_label == Some(ci)).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let correct = idx.iter().filter(|&&i| prepared[i].0 == ci).count();
                    let successes = idx.iter().filter(|&&i| outcomes[i].0).count();
                    per_class.push(ClassAttack {
                        class: name.clone(),
                        accuracy: correct as f64 / idx.len() as f64,
                        attempts: idx.len(),
                        successes,
                        rate: successes as f64 / idx.len() as f64,
                    });
                    per_class_time.push((name.clone(), idx.iter().map(|&i| outcomes[i].2).sum::<f64>() / idx.len() as f64));
                }
                let successes = outcomes.iter().filter(|o| o.0).count();
                grid.push(GridCell {
                    n,
                    k,
                    mode,
                    rate: successes as f64 / clouds.len() as f64,
                    successes,
                    attempts: clouds.len(),
                    fallbacks: outcomes.iter().filter(|o| o.1).count(),
                    per_class,
                });
                timing.push(CellTiming {
                    n,
                    k,
                    mode,
                    mean_time_s: outcomes.iter().map(|o| o.2).sum::<f64>() / clouds.len() as f64,
                    per_class: per_class_time,
                });
            }
        }
    }
    let report = AttackReport { format_version: FORMAT_VERSION, model: model_name.to_owned(), config: cfg.clone(), clouds: clouds.len(), grid };
    let timings = AttackTimings {
        format_version: FORMAT_VERSION,
        salience_mean_s: prepared.iter().map(|p| p.2).sum::<f64>() / clouds.len() as f64,
        grid: timing,
    };
    Ok((report, timings))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

impl AttackReport {
    pub fn cell(&self, n: usize, k: usize, mode: CenterMode) -> Option<&GridCell> {
        self.grid.iter().find(|c| c.n == n && c.k == k && c.mode == mode)
    }

    /// Spearman correlation between `N` and the success rate at fixed `K`.
    pub fn rate_trend(&self, k: usize, mode: CenterMode) -> Option<f64> {
        let cells: Vec<&GridCell> = self.grid.iter().filter(|c| c.k == k && c.mode == mode).collect();
        let ns: Vec<f64> = cells.iter().map(|c| c.n as f64).collect();
        let rates: Vec<f64> = cells.iter().map(|c| c.rate).collect();
        spearman(&ns, &rates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn zero_regions_leave_the_cloud_alone() {
        let c = line(6);
        let s = vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0];
        let cfg = AttackConfig { regions: 0, ..Default::default() };
        let out = craft_sample(&c, &s, &cfg, 0).unwrap();
        assert_eq!(out.cloud, c);
        assert!(out.moved.is_empty());
    }

    #[test]
    fn salient_centers_break_ties_by_index() {
        let s = vec![0.5, 1.0, 1.0, 0.0, 1.0];
        let cfg = AttackConfig { regions: 2, ..Default::default() };
        assert_eq!(choose_centers(&s, &cfg, 0), vec![1, 2]);
    }

    #[test]
    fn region_lands_on_blue_centroid() {
        let c = line(10);
        let mut s = vec![0.0; 10];
        s[9] = 1.0;
        s[8] = 0.9;
        let cfg = AttackConfig { regions: 1, neighbors: 2, ..Default::default() };
        let out = craft_sample(&c, &s, &cfg, 0).unwrap();
        // Blue is points 0..=7, centroid x = 3.5. Region {9, 8} has centroid 8.5.
        assert_eq!(out.destination, [3.5, 0.0, 0.0]);
        let mut moved = out.moved.clone();
        moved.sort_unstable();
        assert_eq!(moved, vec![8, 9]);
        assert_eq!(out.cloud.points[9], [4.0, 0.0, 0.0]);
        assert_eq!(out.cloud.points[8], [3.0, 0.0, 0.0]);
        assert_eq!(&out.cloud.points[..8], &c.points[..8]);
    }

    #[test]
    fn whole_cloud_region_moves_onto_blue_centroid() {
        let c = line(5);
        let s = vec![0.0, 0.0, 0.0, 0.0, 1.0];
        let cfg = AttackConfig { regions: 1, neighbors: 5, ..Default::default() };
        let out = craft_sample(&c, &s, &cfg, 0).unwrap();
        assert!(!out.fallback);
        assert_eq!(out.destination, [1.5, 0.0, 0.0]);
        let xs: Vec<f64> = out.cloud.points.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-0.5, 0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn constant_salience_has_no_blue_tier() {
        let c = line(4);
        let s = vec![0.3; 4];
        let mut cfg = AttackConfig { regions: 1, neighbors: 1, ..Default::default() };
        let out = craft_sample(&c, &s, &cfg, 0).unwrap();
        assert!(out.fallback);
        assert_eq!(out.destination, [1.5, 0.0, 0.0]);
        cfg.destination = Destination::CloudCentroid;
        assert!(!craft_sample(&c, &s, &cfg, 0).unwrap().fallback);
    }

    #[test]
    fn random_centers_are_seeded() {
        let s = vec![0.0; 100];
        let cfg = AttackConfig { regions: 5, mode: CenterMode::Random, ..Default::default() };
        assert_eq!(choose_centers(&s, &cfg, 3), choose_centers(&s, &cfg, 3));
        assert_ne!(choose_centers(&s, &cfg, 3), choose_centers(&s, &cfg, 4));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.1, 0.5, 0.9]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.9, 0.5, 0.1]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.3, 0.3, 0.9]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    proptest! {
        #[test]
        fn moved_points_keep_their_offsets(pts in prop::collection::vec(-1.0f64..1.0, 60), sal in prop::collection::vec(0.0f64..1.0, 20), n in 1usize..4, k in 1usize..8) {
            let cloud = PointCloud::new(pts.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
            let cfg = AttackConfig { regions: n, neighbors: k, ..Default::default() };
            let out = craft_sample(&cloud, &sal, &cfg, 0).unwrap();
            let mut seen = out.moved.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), out.moved.len());
            prop_assert!(out.moved.len() <= n * k);
            for i in 0..cloud.len() {
                if !out.moved.contains(&i) {
                    prop_assert_eq!(out.cloud.points[i], cloud.points[i]);
                }
            }
        }
    }
}
