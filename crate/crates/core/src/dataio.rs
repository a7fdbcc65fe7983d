//! Point-cloud text files, dataset manifests and JSON report persistence.
//!
//! Every writer goes through [`write_atomic`]: data lands in a temporary file
//! in the target directory and is renamed over the destination.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::Dataset;
use crate::pointops::PointCloud;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Parses `x y z [part_id]` lines; blank lines and `#` comments are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels: Vec<i32> = Vec::new();
    let mut columns = None;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: no + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(bad(format!("expected 3 or 4 columns, found {}", fields.len())));
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => return Err(bad(format!("expected {c} columns like earlier lines"))),
            _ => {}
        }
        let mut p = [0.0; 3];
        for d in 0..3 {
            p[d] = fields[d].parse::<f64>().map_err(|_| bad(format!("`{}` is not a number", fields[d])))?;
            if !p[d].is_finite() {
                return Err(bad(format!("non-finite coordinate `{}`", fields[d])));
            }
        }
        points.push(p);
        if fields.len() == 4 {
            labels.push(fields[3].parse().map_err(|_| bad(format!("`{}` is not a part id", fields[3])))?);
        }
    }
    if points.is_empty() {
        return Err(Error::Parse { line: 0, message: "no points".into() });
    }
    let labels = (columns == Some(4)).then_some(labels);
    PointCloud::new(points)?.with_labels(labels, None)
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&std::fs::read_to_string(path)?)
}

/// Coordinates use the shortest exact decimal form, so reading back is lossless.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 64);
    for (i, p) in cloud.points.iter().enumerate() {
        s.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
        if let Some(l) = &cloud.part_labels {
            s.push_str(&format!(" {}", l[i]));
        }
        s.push('\n');
    }
    s
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_atomic(path, format_xyz(cloud).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub classes: Vec<String>,
    pub seed: u64,
    /// Clouds per class, per split.
    pub counts: BTreeMap<String, Vec<usize>>,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
    /// Directory the entry paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.format_version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        for entries in self.splits.values() {
            for e in entries {
                if e.class >= self.classes.len() {
                    return Err(Error::Schema(format!("`{}` has class {} out of range", e.path, e.class)));
                }
                let p = self.root.join(&e.path);
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(())
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<PointCloud>> {
        let entries = self.splits.get(split).ok_or_else(|| Error::Schema(format!("no split `{split}`")))?;
        entries
            .iter()
            .map(|e| {
                let mut c = read_xyz(&self.root.join(&e.path))?;
                c.class_label = Some(e.class);
                Ok(c)
            })
            .collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_owned()),
        _ => Error::Io(e),
    })?;
    let mut m: Manifest = serde_json::from_str(&text)?;
    m.root = path.parent().map(Path::to_owned).unwrap_or_default();
    m.validate()?;
    Ok(m)
}

/// Writes `<dir>/<split>/<class>/<index>.xyz` files and `<dir>/manifest.json`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Manifest> {
    let mut counts = BTreeMap::new();
    let mut splits = BTreeMap::new();
    for (split, clouds) in [("train", &ds.train), ("test", &ds.test)] {
        let mut per_class = vec![0usize; ds.classes.len()];
        let mut entries = Vec::with_capacity(clouds.len());
        for cloud in clouds {
            let class = cloud.class_label.ok_or_else(|| Error::Schema("cloud without class label".into()))?;
            let rel = format!("{split}/{}/{:04}.xyz", ds.classes[class], per_class[class]);
            per_class[class] += 1;
            let path = dir.join(&rel);
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            write_xyz(cloud, &path)?;
            entries.push(ManifestEntry { path: rel, class });
        }
        counts.insert(split.to_owned(), per_class);
        splits.insert(split.to_owned(), entries);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        classes: ds.classes.clone(),
        seed: ds.seed,
        counts,
        splits,
        root: dir.to_owned(),
    };
    write_atomic(&dir.join("manifest.json"), (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let m = read_manifest(manifest_path)?;
    Ok(Dataset {
        classes: m.classes.clone(),
        train: m.load_split("train")?,
        test: m.load_split("test")?,
        seed: m.seed,
    })
}

const UNIT_FIELDS: [&str; 5] = ["rate", "c_p", "iou", "accuracy", "miou"];

/// Structural checks shared by every report: a `format_version`, unit-range
/// fractions and consistent counts anywhere in the document.
pub fn validate_report(v: &Value) -> Result<()> {
    match v.get("format_version").and_then(Value::as_u64) {
        Some(x) if x == u64::from(FORMAT_VERSION) => {}
        _ => return Err(Error::Schema("report lacks a supported `format_version`".into())),
    }
    check_node(v, "$")
}

fn check_node(v: &Value, at: &str) -> Result<()> {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let here = format!("{at}.{k}");
                if UNIT_FIELDS.contains(&k.as_str()) {
                    match x.as_f64() {
                        Some(f) if (0.0..=1.0).contains(&f) => {}
                        Some(f) => return Err(Error::Schema(format!("{here} = {f} is outside [0, 1]"))),
                        None if x.is_null() => {}
                        None => return Err(Error::Schema(format!("{here} must be a number"))),
                    }
                }
                check_node(x, &here)?;
            }
            let get = |k: &str| map.get(k).and_then(Value::as_u64);
            for (part, whole) in [("n_p", "n_t"), ("successes", "attempts")] {
                if let (Some(a), Some(b)) = (get(part), get(whole)) {
                    if a > b {
                        return Err(Error::Schema(format!("{at}: {part} = {a} exceeds {whole} = {b}")));
                    }
                }
            }
            Ok(())
        }
        Value::Array(items) => items.iter().enumerate().try_for_each(|(i, x)| check_node(x, &format!("{at}[{i}]"))),
        Value::Number(n) if n.as_f64().is_some_and(|f| !f.is_finite()) => {
            Err(Error::Schema(format!("{at} is not finite")))
        }
        _ => Ok(()),
    }
}

pub fn report_to_string<T: Serialize>(report: &T) -> Result<String> {
    let v = serde_json::to_value(report)?;
    validate_report(&v)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn write_report<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    write_atomic(path, report_to_string(report)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parse_examples() {
        assert_eq!(parse_xyz("0 0 0\n1 0 0").unwrap().len(), 2);
        let c = parse_xyz("# header\n\n0 0 0 2  # trailing\n").unwrap();
        assert_eq!(c.part_labels, Some(vec![2]));
        match parse_xyz("a b c") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_xyz("0 0 0\n0 0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_xyz("0 0 0 1\n0 0 0\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn xyz_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![[0.1, 1.0 / 3.0, -2e-7], [5.5, 0.0, 1e10]])
            .unwrap()
            .with_labels(Some(vec![0, 7]), None)
            .unwrap();
        let p = dir.path().join("c.xyz");
        write_xyz(&cloud, &p).unwrap();
        assert_eq!(read_xyz(&p).unwrap(), cloud);
    }

    #[test]
    fn report_schema() {
        let ok = json!({"format_version": 1, "grid": [{"rate": 0.5, "successes": 1, "attempts": 2}]});
        validate_report(&ok).unwrap();
        let bad = json!({"format_version": 1, "grid": [{"rate": 1.5}]});
        assert!(matches!(validate_report(&bad), Err(Error::Schema(_))));
        let bad = json!({"format_version": 1, "classes": [{"n_p": 3, "n_t": 2}]});
        assert!(validate_report(&bad).is_err());
        assert!(validate_report(&json!({"rate": 0.1})).is_err());
    }

    #[test]
    fn rejected_report_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        assert!(write_report(&json!({"format_version": 1, "rate": 2.0}), &p).is_err());
        assert!(!p.exists());
    }

    #[test]
    fn manifest_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::datagen::DatasetConfig { train_per_class: 2, test_per_class: 1, ..Default::default() };
        let ds = crate::datagen::synthetic_dataset(&cfg).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back.train, ds.train);
        assert_eq!(back.test, ds.test);

        let victim = dir.path().join("test/ball/0000.xyz");
        std::fs::remove_file(&victim).unwrap();
        match read_manifest(&dir.path().join("manifest.json")) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("test/ball/0000.xyz")),
            other => panic!("{other:?}"),
        }
    }
}
