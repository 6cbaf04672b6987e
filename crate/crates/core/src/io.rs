//! XYZ and PTC1 point files, dataset directories and metrics tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::sampler::{DistributionKind, Provenance, Record};

pub const PTC1_MAGIC: &[u8; 4] = b"PTC1";
pub const MANIFEST: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "file\tclass_label\ttransform_kind\tseed_path";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Xyz,
    Ptc1,
}

impl Format {
    pub fn name(self) -> &'static str {
        match self {
            Format::Xyz => "xyz",
            Format::Ptc1 => "ptc1",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(Format::Xyz),
            "ptc1" => Ok(Format::Ptc1),
            other => Err(Error::InvalidInput(format!("unknown format {other:?}"))),
        }
    }
}

/// Parses the text format: three coordinates per line, an optional integer
/// label, `#` comment lines.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::format("XYZ", format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(bad(&format!("expected 3 or 4 columns, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (x, f) in p.iter_mut().zip(&fields) {
            *x = f.parse().map_err(|_| bad(&format!("bad coordinate {f:?}")))?;
        }
        points.push(p);
        if let Some(l) = fields.get(3) {
            labels.push(l.parse::<u16>().map_err(|_| bad(&format!("bad label {l:?}")))?);
        }
    }
    if labels.is_empty() {
        PointCloud::new(points)
    } else if labels.len() == points.len() {
        PointCloud::with_labels(points, labels)
    } else {
        Err(Error::format("XYZ", "labels must be given on every line or none"))
    }
}

/// Shortest round-tripping decimal form, so parsing gives back the same bits.
pub fn to_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
        if let Some(labels) = cloud.labels() {
            let _ = write!(out, " {}", labels[i]);
        }
        out.push('\n');
    }
    out
}

pub fn parse_ptc1(bytes: &[u8]) -> Result<PointCloud> {
    let bad = |detail: String| Error::format("PTC1", detail);
    if bytes.len() < 9 || &bytes[..4] != PTC1_MAGIC {
        return Err(bad("missing PTC1 header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let has_labels = match bytes[8] {
        0 => false,
        1 => true,
        f => return Err(bad(format!("label flag must be 0 or 1, found {f}"))),
    };
    let expected = 9 + n * 12 + if has_labels { n * 2 } else { 0 };
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {n} points, found {}",
            bytes.len()
        )));
    }
    let coords = &bytes[9..9 + n * 12];
    let points = coords
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2)]
        })
        .collect();
    if has_labels {
        let labels = bytes[9 + n * 12..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        PointCloud::with_labels(points, labels)
    } else {
        PointCloud::new(points)
    }
}

/// Coordinates are stored as `f32`.
pub fn to_ptc1(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut out = Vec::with_capacity(9 + n * 14);
    out.extend_from_slice(PTC1_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.push(cloud.labels().is_some() as u8);
    for p in cloud.points() {
        for &x in p {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some(labels) = cloud.labels() {
        for &l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

/// Reads either format, recognizing PTC1 by its magic bytes.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(PTC1_MAGIC) {
        parse_ptc1(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format("XYZ", "file is not UTF-8"))?;
        parse_xyz(&text)
    }
}

pub fn encode_cloud(cloud: &PointCloud, format: Format) -> Vec<u8> {
    match format {
        Format::Xyz => to_xyz(cloud).into_bytes(),
        Format::Ptc1 => to_ptc1(cloud),
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud, format: Format) -> Result<()> {
    fs::write(path, encode_cloud(cloud, format))?;
    Ok(())
}

/// Writes PTC1 files and `manifest.tsv` into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, records: &[Record]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for r in records {
        if r.name.is_empty() || r.name.contains(['/', '\\', '\t', '\n']) {
            return Err(Error::InvalidInput(format!(
                "record name {:?} is not a plain file stem",
                r.name
            )));
        }
        let file = format!("{}.ptc1", r.name);
        fs::write(dir.join(&file), to_ptc1(&r.cloud))?;
        let (kind, seed_path) = match &r.provenance {
            Some(p) => (p.kind.name(), p.seed_path.as_str()),
            None => ("none", "-"),
        };
        let _ = writeln!(manifest, "{file}\t{}\t{kind}\t{seed_path}", r.class_label);
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format("manifest", "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |what: &str| Error::format("manifest", format!("row {}: {what}", i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        let [file, label, kind, seed_path] = cols[..] else {
            return Err(bad("expected 4 columns"));
        };
        let class_label = label.parse().map_err(|_| bad("bad class label"))?;
        let provenance = match kind {
            "none" => None,
            k => Some(Provenance {
                kind: k.parse::<DistributionKind>()?,
                seed_path: seed_path.to_string(),
                rejections: 0,
                transform: None,
            }),
        };
        out.push(Record {
            name: file.strip_suffix(".ptc1").unwrap_or(file).to_string(),
            cloud: read_cloud(&dir.join(file))?,
            class_label,
            provenance,
        });
    }
    Ok(out)
}

/// `root/{train,val,test}` dataset directories.
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean part IoU; `None` for classification.
    pub miou: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch\tsplit\tloss\taccuracy\tmiou";

pub fn metrics_tsv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let miou = r.miou.map_or_else(|| "-".to_string(), |m| format!("{m:.6}"));
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{:.6}\t{miou}",
            r.epoch, r.split, r.loss, r.accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, ShapeKind, ShapeSpec};

    #[test]
    fn xyz_round_trip_is_exact() {
        let c = generate(ShapeSpec::new(ShapeKind::Lollipop, 50, 1).with_noise(0.01)).unwrap();
        assert_eq!(parse_xyz(&to_xyz(&c)).unwrap(), c);
        let plain = generate(ShapeSpec::new(ShapeKind::RandomUniform, 20, 2)).unwrap();
        assert_eq!(parse_xyz(&to_xyz(&plain)).unwrap(), plain);
    }

    #[test]
    fn xyz_comments_and_errors() {
        let c = parse_xyz("# header\n1 2 3\n\n4 5 6\n").unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert!(parse_xyz("1 2\n").is_err());
        assert!(parse_xyz("1 2 3 0\n4 5 6\n").is_err());
        assert!(parse_xyz("1 2 x\n").is_err());
        assert!(parse_xyz("# nothing\n").is_err());
    }

    #[test]
    fn ptc1_round_trip_quantizes_to_f32() {
        let c = generate(ShapeSpec::new(ShapeKind::Lollipop, 33, 3).with_noise(0.01)).unwrap();
        let back = parse_ptc1(&to_ptc1(&c)).unwrap();
        assert_eq!(back.labels(), c.labels());
        for (a, b) in c.points().iter().zip(back.points()) {
            for k in 0..3 {
                assert_eq!(b[k], a[k] as f32 as f64);
            }
        }
        assert_eq!(parse_ptc1(&to_ptc1(&back)).unwrap(), back);
    }

    #[test]
    fn ptc1_layout() {
        let c = PointCloud::with_labels(vec![[1.0, -2.0, 0.5]], vec![7]).unwrap();
        let bytes = to_ptc1(&c);
        assert_eq!(&bytes[..4], b"PTC1");
        assert_eq!(&bytes[4..9], &[1, 0, 0, 0, 1]);
        assert_eq!(&bytes[9..13], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[21..], &[7, 0]);
        assert!(parse_ptc1(&bytes[..20]).is_err());
        assert!(parse_ptc1(b"PTC2\x01\0\0\0\0").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<Record> = (0..3)
            .map(|i| Record {
                name: format!("c{i}"),
                cloud: parse_ptc1(&to_ptc1(
                    &generate(ShapeSpec::new(ShapeKind::TwoCluster, 16, i)).unwrap(),
                ))
                .unwrap(),
                class_label: i as u16,
                provenance: (i > 0).then(|| Provenance {
                    kind: DistributionKind::Affine,
                    seed_path: format!("5/{i}/0"),
                    rejections: 0,
                    transform: None,
                }),
            })
            .collect();
        write_dataset(dir.path(), &records).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.starts_with("file\tclass_label\ttransform_kind\tseed_path\n"));
        assert!(manifest.contains("c1.ptc1\t1\taffine\t5/1/0"));
        assert_eq!(read_dataset(dir.path()).unwrap(), records);
    }

    #[test]
    fn metrics_table() {
        let rows = [MetricsRow {
            epoch: 1,
            split: "val".into(),
            loss: 0.5,
            accuracy: 0.75,
            miou: None,
        }];
        assert_eq!(
            metrics_tsv(&rows),
            "epoch\tsplit\tloss\taccuracy\tmiou\n1\tval\t0.500000\t0.750000\t-\n"
        );
    }
}
