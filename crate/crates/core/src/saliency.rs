//! Three-tier saliency maps and their PLY / JSON exports.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::write_atomic;
use crate::pointops::{Point3, PointCloud};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Blue,
    Pink,
    Red,
}

impl Tier {
    pub fn color(self) -> [u8; 3] {
        match self {
            Tier::Blue => [0, 0, 255],
            Tier::Pink => [255, 105, 180],
            Tier::Red => [255, 0, 0],
        }
    }

    pub fn from_color(c: [u8; 3]) -> Option<Self> {
        [Tier::Blue, Tier::Pink, Tier::Red].into_iter().find(|t| t.color() == c)
    }
}

/// A nonempty subset of tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierSet {
    pub blue: bool,
    pub pink: bool,
    pub red: bool,
}

impl TierSet {
    pub const SALIENT: Self = Self { blue: false, pink: true, red: true };
    pub const RED: Self = Self { blue: false, pink: false, red: true };
    pub const BLUE: Self = Self { blue: true, pink: false, red: false };
    pub const ALL: Self = Self { blue: true, pink: true, red: true };

    pub fn contains(&self, t: Tier) -> bool {
        match t {
            Tier::Blue => self.blue,
            Tier::Pink => self.pink,
            Tier::Red => self.red,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.blue || self.pink || self.red)
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.blue, "blue"), (self.pink, "pink"), (self.red, "red")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        parts.join("+")
    }
}

impl Default for TierSet {
    fn default() -> Self {
        Self::SALIENT
    }
}

impl FromStr for TierSet {
    type Err = Error;

    /// Accepts `salient`, `red`, `all`, or a `+`-joined list such as `pink+red`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salient" => return Ok(Self::SALIENT),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut set = Self { blue: false, pink: false, red: false };
        for part in s.split('+') {
            match part.trim() {
                "blue" => set.blue = true,
                "pink" => set.pink = true,
                "red" => set.red = true,
                other => return Err(Error::InvalidArgument(format!("unknown tier `{other}`"))),
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub layer: String,
    pub salience: Vec<f64>,
    pub tiers: Vec<Tier>,
    /// `[m + d/3, m + 2d/3]`.
    pub boundaries: [f64; 2],
}

/// Splits `[min, max]` into thirds: blue below the first boundary, red at or
/// above the second. A constant input is all red.
pub fn tier(salience: &[f64], layer: &str) -> Result<SaliencyMap> {
    if salience.is_empty() {
        return Err(Error::InvalidArgument("cannot tier an empty salience vector".into()));
    }
    if salience.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("salience".into()));
    }
    let m = salience.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = salience.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let d = hi - m;
    let b = [m + d / 3.0, m + 2.0 * d / 3.0];
    let tiers = salience
        .iter()
        .map(|&v| {
            if d == 0.0 || v >= b[1] {
                Tier::Red
            } else if v >= b[0] {
                Tier::Pink
            } else {
                Tier::Blue
            }
        })
        .collect();
    Ok(SaliencyMap { layer: layer.to_owned(), salience: salience.to_vec(), tiers, boundaries: b })
}

pub fn salient_points(map: &SaliencyMap, tiers: TierSet) -> Vec<usize> {
    map.tiers.iter().enumerate().filter(|(_, t)| tiers.contains(**t)).map(|(i, _)| i).collect()
}

#[derive(Serialize, Deserialize)]
struct JsonPoint {
    i: usize,
    salience: f64,
    tier: Tier,
}

#[derive(Serialize, Deserialize)]
struct JsonMap {
    layer: String,
    boundaries: [f64; 2],
    points: Vec<JsonPoint>,
}

pub fn to_json(map: &SaliencyMap) -> Result<String> {
    let doc = JsonMap {
        layer: map.layer.clone(),
        boundaries: map.boundaries,
        points: map
            .salience
            .iter()
            .zip(&map.tiers)
            .enumerate()
            .map(|(i, (&salience, &tier))| JsonPoint { i, salience, tier })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

pub fn export_json(map: &SaliencyMap, path: &Path) -> Result<()> {
    write_atomic(path, to_json(map)?.as_bytes())
}

/// ASCII PLY with per-vertex tier colors.
pub fn export_ply(cloud: &PointCloud, map: &SaliencyMap, path: &Path) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot export an empty cloud".into()));
    }
    if cloud.len() != map.tiers.len() {
        return Err(Error::DimensionMismatch(format!("{} points but {} tiers", cloud.len(), map.tiers.len())));
    }
    let mut s = String::with_capacity(64 * cloud.len() + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "comment layer {}", map.layer);
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, t) in cloud.points.iter().zip(&map.tiers) {
        let [r, g, b] = t.color();
        let _ = writeln!(s, "{} {} {} {r} {g} {b}", p[0], p[1], p[2]);
    }
    write_atomic(path, s.as_bytes())
}

/// Reads back the vertices written by [`export_ply`].
pub fn read_ply(path: &Path) -> Result<(Vec<Point3>, Vec<[u8; 3]>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let mut count = None;
    for (_, line) in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = n.trim().parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::Parse { line: 1, message: "no vertex element in header".into() })?;
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for (no, line) in lines.take(count) {
        let bad = |m: &str| Error::Parse { line: no + 1, message: m.to_owned() };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad("expected x y z r g b"));
        }
        let xyz: Vec<f64> = f[..3].iter().map(|v| v.parse()).collect::<Result<_, _>>().map_err(|_| bad("bad coordinate"))?;
        let rgb: Vec<u8> = f[3..].iter().map(|v| v.parse()).collect::<Result<_, _>>().map_err(|_| bad("bad color"))?;
        points.push([xyz[0], xyz[1], xyz[2]]);
        colors.push([rgb[0], rgb[1], rgb[2]]);
    }
    if points.len() != count {
        return Err(Error::Parse { line: text.lines().count(), message: "fewer vertices than declared".into() });
    }
    Ok((points, colors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn three_values_three_tiers() {
        let m = tier(&[0.0, 0.5, 1.0], "x").unwrap();
        assert_eq!(m.tiers, vec![Tier::Blue, Tier::Pink, Tier::Red]);
        assert_eq!(salient_points(&m, TierSet::RED), vec![2]);
        assert_eq!(salient_points(&m, TierSet::ALL), vec![0, 1, 2]);
    }

    #[test]
    fn constant_is_all_red() {
        assert!(tier(&[0.3; 3], "x").unwrap().tiers.iter().all(|&t| t == Tier::Red));
    }

    #[test]
    fn uniform_values_fill_thirds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = tier(&v, "x").unwrap();
        for t in [Tier::Blue, Tier::Pink, Tier::Red] {
            let c = m.tiers.iter().filter(|&&x| x == t).count() as f64;
            assert!((c - 1000.0 / 3.0).abs() <= 50.0, "{t:?}: {c}");
        }
    }

    #[test]
    fn tier_set_parsing() {
        assert_eq!("salient".parse::<TierSet>().unwrap(), TierSet::SALIENT);
        assert_eq!("pink+red".parse::<TierSet>().unwrap(), TierSet::SALIENT);
        assert_eq!("red".parse::<TierSet>().unwrap(), TierSet::RED);
        assert!("green".parse::<TierSet>().is_err());
    }

    #[test]
    fn ply_colors_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.3], [-0.5, 0.25, 1.0 / 3.0], [0.0, 0.0, -1.0]]).unwrap();
        let m = tier(&[0.0, 0.5, 1.0], "input").unwrap();
        export_ply(&cloud, &m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 3\n"));
        let (pts, cols) = read_ply(&path).unwrap();
        assert_eq!(cols, vec![[0, 0, 255], [255, 105, 180], [255, 0, 0]]);
        for (a, b) in pts.iter().zip(&cloud.points) {
            assert!((0..3).all(|d| (a[d] - b[d]).abs() < 1e-6));
        }
        let tiers: Vec<Tier> = cols.into_iter().map(|c| Tier::from_color(c).unwrap()).collect();
        assert_eq!(tiers, m.tiers);
    }

    #[test]
    fn empty_cloud_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ply");
        let cloud = PointCloud { points: vec![], part_labels: None, class_label: None };
        let m = SaliencyMap { layer: "x".into(), salience: vec![], tiers: vec![], boundaries: [0.0, 0.0] };
        assert!(export_ply(&cloud, &m, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn json_layout() {
        let m = tier(&[0.0, 1.0], "SA1-conv3").unwrap();
        let v: serde_json::Value = serde_json::from_str(&to_json(&m).unwrap()).unwrap();
        assert_eq!(v["layer"], "SA1-conv3");
        assert_eq!(v["points"][1]["tier"], "red");
        assert_eq!(v["boundaries"].as_array().unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn tiers_are_monotone(v in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            let m = tier(&v, "x").unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(m.tiers[i] >= m.tiers[j]);
                    }
                }
            }
        }

        #[test]
        fn tiers_are_affine_invariant(v in prop::collection::vec(0.0f64..1.0, 2..64), a in 0.5f64..4.0, b in -3.0f64..3.0) {
            let m = tier(&v, "x").unwrap();
            let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let n = tier(&w, "x").unwrap();
            // Values within rounding distance of a boundary may legitimately flip.
            for i in 0..v.len() {
                let near = m.boundaries.iter().any(|&bd| (v[i] - bd).abs() < 1e-9);
                if !near {
                    prop_assert_eq!(m.tiers[i], n.tiers[i]);
                }
            }
        }

        #[test]
        fn salient_filter_matches_brute_force(v in prop::collection::vec(0.0f64..1.0, 1..64)) {
            let m = tier(&v, "x").unwrap();
            let expect: Vec<usize> = (0..v.len()).filter(|&i| m.tiers[i] != Tier::Blue).collect();
            prop_assert_eq!(salient_points(&m, TierSet::default()), expect);
        }
    }
}
