//! Datasets: CSV and IDX loaders, seeded synthetic generators, and the label /
//! input noise protocols.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use flatmin_core::{rng, Batch, Matrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub label_noise_alpha: f64,
    pub data_noise_sigma: f64,
    /// Seed of the generator (synthetic data) or 0 for files.
    pub seed: u64,
    /// Seeds of the noise injections applied, in order.
    pub noise_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        inputs: Matrix<f64>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        source: impl Into<String>,
    ) -> Result<Self> {
        // Batch::new validates lengths and label range
        Batch::new(inputs.clone(), labels.clone(), classes)?;
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split,
            provenance: Provenance {
                source: source.into(),
                label_noise_alpha: 0.0,
                data_noise_sigma: 0.0,
                seed: 0,
                noise_seeds: vec![],
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn to_batch(&self) -> Batch<f64> {
        Batch::new(self.inputs.clone(), self.labels.clone(), self.classes)
            .expect("dataset invariants hold")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Blobs,
    Moons,
    Spirals,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "moons" => Ok(SyntheticKind::Moons),
            "spirals" => Ok(SyntheticKind::Spirals),
            _ => Err(HarnessError::config(format!(
                "unknown synthetic dataset `{s}`"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::Blobs => "blobs",
            SyntheticKind::Moons => "moons",
            SyntheticKind::Spirals => "spirals",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    /// Within-class standard deviation.
    pub noise: f64,
    /// Blobs only: centers are drawn from `N(0, separation² I)`.
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSpec {
    Csv {
        path: PathBuf,
        classes: Option<usize>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        classes: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

pub fn load_dataset(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    match spec {
        DatasetSpec::Csv { path, classes } => read_csv(path, *classes, split),
        DatasetSpec::Idx {
            images,
            labels,
            classes,
        } => read_idx(images, labels, *classes, split),
        DatasetSpec::Synthetic(s) => synthetic(s, split),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

fn infer_classes(labels: &[usize], classes: Option<usize>, what: &str) -> Result<usize> {
    let seen = labels.iter().max().map_or(0, |m| m + 1);
    match classes {
        Some(c) if seen > c => Err(HarnessError::parse(format!(
            "{what}: label {} out of range for {c} classes",
            seen - 1
        ))),
        Some(c) => Ok(c),
        None => Ok(seen.max(2)),
    }
}

/// One example per row, features then an integer label. A first row that does
/// not parse as numbers is taken as a header.
pub fn read_csv(path: &Path, classes: Option<usize>, split: Split) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(&bytes[..]);
    let name = path.display().to_string();
    let mut width = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::parse(format!("{name}: {e}")))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Option<Vec<f64>> = rec
            .iter()
            .take(rec.len().saturating_sub(1))
            .map(|f| f.parse().ok())
            .collect();
        if i == 0
            && (parsed.is_none()
                || rec
                    .iter()
                    .last()
                    .and_then(|l| l.parse::<f64>().ok())
                    .is_none())
        {
            continue;
        }
        let feats = parsed
            .ok_or_else(|| HarnessError::parse(format!("{name}:{line}: non-numeric feature")))?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w || w < 2 {
            return Err(HarnessError::parse(format!(
                "{name}:{line}: expected {w} fields, found {}",
                rec.len()
            )));
        }
        let label: usize = rec[w - 1].parse().map_err(|_| {
            HarnessError::parse(format!(
                "{name}:{line}: label `{}` is not a class index",
                &rec[w - 1]
            ))
        })?;
        if let Some(c) = classes {
            if label >= c {
                return Err(HarnessError::parse(format!(
                    "{name}:{line}: label {label} out of range for {c} classes"
                )));
            }
        }
        values.extend(feats);
        labels.push(label);
    }
    let width = width.ok_or_else(|| HarnessError::parse(format!("{name}: no data rows")))?;
    let classes = infer_classes(&labels, classes, &name)?;
    let inputs = Matrix::from_vec(labels.len(), width - 1, values)?;
    Dataset::new(inputs, labels, classes, split, format!("csv:{name}"))
}

/// Writes features with shortest round-trip formatting, then the label.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.dim())
        .map(|j| format!("x{j}"))
        .chain(["label".to_string()])
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.len() {
        for v in ds.inputs.row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", ds.labels[i]));
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| HarnessError::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| HarnessError::parse(format!("{name}: truncated header at byte {offset}")))
}

/// IDX image and label files; pixels are scaled to `[0, 1]`.
pub fn read_idx(
    images: &Path,
    labels: &Path,
    classes: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let (iname, lname) = (images.display().to_string(), labels.display().to_string());
    let ib = read_file(images)?;
    let magic = be_u32(&ib, 0, &iname)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(HarnessError::parse(format!(
            "{iname}: bad magic {magic:#010x} at byte 0, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(&ib, 4, &iname)? as usize;
    let rows = be_u32(&ib, 8, &iname)? as usize;
    let cols = be_u32(&ib, 12, &iname)? as usize;
    let d = rows * cols;
    let body = &ib[16..];
    if body.len() != n * d {
        return Err(HarnessError::parse(format!(
            "{iname}: {} pixel bytes from byte 16, header declares {n}x{rows}x{cols}",
            body.len()
        )));
    }

    let lb = read_file(labels)?;
    let magic = be_u32(&lb, 0, &lname)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(HarnessError::parse(format!(
            "{lname}: bad magic {magic:#010x} at byte 0, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let nl = be_u32(&lb, 4, &lname)? as usize;
    if nl != n || lb.len() != 8 + n {
        return Err(HarnessError::parse(format!(
            "{lname}: {} label bytes from byte 8, expected {n}",
            lb.len().saturating_sub(8)
        )));
    }
    let labels: Vec<usize> = lb[8..].iter().map(|&b| b as usize).collect();
    if let Some(c) = classes {
        if let Some(pos) = labels.iter().position(|&l| l >= c) {
            return Err(HarnessError::parse(format!(
                "{lname}: label {} at byte {} out of range",
                labels[pos],
                8 + pos
            )));
        }
    }
    let classes = infer_classes(&labels, classes, &lname)?;
    let inputs = Matrix::from_vec(n, d, body.iter().map(|&b| b as f64 / 255.0).collect())?;
    Dataset::new(inputs, labels, classes, split, format!("idx:{iname}"))
}

/// Encodes images (values in `[0, 1]`, rounded to bytes) and labels as IDX.
pub fn write_idx(
    ds: &Dataset,
    rows: usize,
    cols: usize,
    images: &Path,
    labels: &Path,
) -> Result<()> {
    if rows * cols != ds.dim() || ds.classes > 256 {
        return Err(HarnessError::config(
            "dataset shape does not fit the IDX layout",
        ));
    }
    let mut ib = Vec::with_capacity(16 + ds.len() * ds.dim());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(
        ds.inputs
            .as_slice()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lb = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(images, ib).map_err(|e| HarnessError::io(images, e))?;
    fs::write(labels, lb).map_err(|e| HarnessError::io(labels, e))
}

/// Seeded synthetic data. Train and test splits share the class geometry and
/// use independent point streams.
pub fn synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    let SyntheticSpec {
        kind,
        n,
        dim,
        classes,
        noise,
        separation,
        seed,
    } = *spec;
    if n == 0 || classes < 2 || !(noise >= 0.0) {
        return Err(HarnessError::config(
            "synthetic data needs n >= 1, classes >= 2 and noise >= 0",
        ));
    }
    if kind != SyntheticKind::Blobs && dim < 2 {
        return Err(HarnessError::config(format!(
            "{} need at least two dimensions",
            kind.as_str()
        )));
    }
    if kind == SyntheticKind::Moons && classes != 2 {
        return Err(HarnessError::config("moons have exactly two classes"));
    }
    let mut s = rng::stream(seed, &[0xda7a, split.key()]);
    let mut x = vec![0.0; n * dim];
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let centers: Vec<f64> = {
        let mut c = rng::stream(seed, &[0xda7a, 0xce]);
        rng::standard_normal_vec::<f64>(&mut c, classes * dim)
            .into_iter()
            .map(|v| v * separation)
            .collect()
    };
    for i in 0..n {
        let k = labels[i];
        let row = &mut x[i * dim..(i + 1) * dim];
        match kind {
            SyntheticKind::Blobs => row.copy_from_slice(&centers[k * dim..(k + 1) * dim]),
            SyntheticKind::Moons => {
                let t = s.random_range(0.0..PI);
                (row[0], row[1]) = if k == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
            }
            SyntheticKind::Spirals => {
                let t: f64 = s.random_range(0.0..1.0);
                let angle = 3.5 * PI * t + 2.0 * PI * k as f64 / classes as f64;
                (row[0], row[1]) = (t * angle.cos(), t * angle.sin());
            }
        }
        let z: Vec<f64> = rng::standard_normal_vec(&mut s, dim);
        row.iter_mut().zip(z).for_each(|(v, zv)| *v += noise * zv);
    }
    let mut ds = Dataset::new(
        Matrix::from_vec(n, dim, x)?,
        labels,
        classes,
        split,
        format!("synthetic:{}", kind.as_str()),
    )?;
    ds.provenance.seed = seed;
    Ok(ds)
}

/// Flips each label with probability `alpha` to a class drawn uniformly from
/// the other `C - 1` classes.
pub fn inject_label_noise(ds: &Dataset, alpha: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HarnessError::config(format!(
            "label noise {alpha} outside [0, 1]"
        )));
    }
    if ds.classes < 2 {
        return Err(HarnessError::config(
            "cannot flip labels with a single class",
        ));
    }
    let mut s = rng::stream(seed, &[0x1abe1]);
    let mut out = ds.clone();
    for l in out.labels.iter_mut() {
        let u: f64 = s.random();
        let other = s.random_range(0..ds.classes - 1);
        if u < alpha {
            *l = if other >= *l { other + 1 } else { other };
        }
    }
    out.provenance.label_noise_alpha = alpha;
    out.provenance.noise_seeds.push(seed);
    Ok(out)
}

/// Adds `N(0, sigma²)` to every input coordinate.
pub fn inject_data_noise(ds: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(HarnessError::config(format!(
            "data noise {sigma} must be non-negative"
        )));
    }
    let mut out = ds.clone();
    if sigma > 0.0 {
        let mut s = rng::stream(seed, &[0xda7a_0015e]);
        let z: Vec<f64> = rng::standard_normal_vec(&mut s, out.inputs.as_slice().len());
        out.inputs
            .as_mut_slice()
            .iter_mut()
            .zip(z)
            .for_each(|(v, zv)| *v += sigma * zv);
    }
    out.provenance.data_noise_sigma = sigma;
    out.provenance.noise_seeds.push(seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            kind: SyntheticKind::Blobs,
            n,
            dim: 2,
            classes: 2,
            noise: 1.0,
            separation: 3.0,
            seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        for kind in [
            SyntheticKind::Blobs,
            SyntheticKind::Moons,
            SyntheticKind::Spirals,
        ] {
            let spec = SyntheticSpec {
                kind,
                ..blobs(100, 0)
            };
            assert_eq!(
                synthetic(&spec, Split::Train).unwrap(),
                synthetic(&spec, Split::Train).unwrap()
            );
            assert_ne!(
                synthetic(&spec, Split::Train).unwrap().inputs,
                synthetic(&spec, Split::Test).unwrap().inputs
            );
        }
    }

    #[test]
    fn label_noise_extremes() {
        let ds = synthetic(
            &SyntheticSpec {
                classes: 3,
                ..blobs(300, 1)
            },
            Split::Train,
        )
        .unwrap();
        assert_eq!(inject_label_noise(&ds, 0.0, 5).unwrap().labels, ds.labels);
        let all = inject_label_noise(&ds, 1.0, 5).unwrap();
        assert!(all
            .labels
            .iter()
            .zip(&ds.labels)
            .all(|(a, b)| a != b && *a < 3));
        assert_eq!(all.provenance.label_noise_alpha, 1.0);
    }

    #[test]
    fn label_noise_rate() {
        let ds = synthetic(&blobs(10_000, 2), Split::Train).unwrap();
        let noisy = inject_label_noise(&ds, 0.3, 9).unwrap();
        let flipped = noisy
            .labels
            .iter()
            .zip(&ds.labels)
            .filter(|(a, b)| a != b)
            .count() as f64
            / 1e4;
        assert!((0.28..=0.32).contains(&flipped), "{flipped}");
        let single = Dataset::new(Matrix::zeros(2, 1), vec![0, 0], 1, Split::Train, "t").unwrap();
        assert!(inject_label_noise(&single, 0.5, 0).is_err());
    }

    #[test]
    fn data_noise_statistics() {
        let ds = Dataset::new(
            Matrix::zeros(1000, 100),
            vec![0; 1000],
            2,
            Split::Train,
            "zeros",
        )
        .unwrap();
        assert_eq!(inject_data_noise(&ds, 0.0, 1).unwrap().inputs, ds.inputs);
        let noisy = inject_data_noise(&ds, 0.7, 1).unwrap();
        let v = noisy.inputs.as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!((sd - 0.7).abs() <= 0.02 * 0.7);
        assert_eq!(noisy.labels, ds.labels);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic(
            &SyntheticSpec {
                dim: 3,
                classes: 3,
                ..blobs(50, 4)
            },
            Split::Train,
        )
        .unwrap();
        let p = dir.path().join("d.csv");
        write_csv(&ds, &p).unwrap();
        let back = read_csv(&p, Some(3), Split::Train).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.inputs.as_slice().iter().zip(ds.inputs.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }

        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "1.0,2.0,0\n1.0,1\n").unwrap();
        let err = read_csv(&bad, None, Split::Train).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        fs::write(&bad, "1.0,2.0,0\n1.0,2.0,7\n").unwrap();
        assert!(read_csv(&bad, Some(3), Split::Train).is_err());
    }

    #[test]
    fn noise_commutes_with_serialization() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic(&blobs(200, 6), Split::Train).unwrap();
        let p = dir.path().join("d.csv");
        let noisy = inject_label_noise(&ds, 0.25, 3).unwrap();
        write_csv(&noisy, &p).unwrap();
        let a = read_csv(&p, Some(2), Split::Train).unwrap();
        write_csv(&ds, &p).unwrap();
        let b = inject_label_noise(&read_csv(&p, Some(2), Split::Train).unwrap(), 0.25, 3).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inputs, b.inputs);
    }

    #[test]
    fn idx_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = rng::stream(0, &[]);
        let pixels: Vec<f64> = (0..10 * 784)
            .map(|_| s.random_range(0..=255u8) as f64 / 255.0)
            .collect();
        let ds = Dataset::new(
            Matrix::from_vec(10, 784, pixels).unwrap(),
            (0..10).collect(),
            10,
            Split::Train,
            "t",
        )
        .unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(&ds, 28, 28, &ip, &lp).unwrap();
        let back = read_idx(&ip, &lp, None, Split::Train).unwrap();
        assert_eq!((back.inputs.rows(), back.inputs.cols()), (10, 784));
        assert!(back
            .inputs
            .as_slice()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in back.inputs.as_slice().iter().zip(ds.inputs.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(back.labels, ds.labels);

        let mut bytes = fs::read(&ip).unwrap();
        bytes[3] = 0x01;
        fs::write(&ip, bytes).unwrap();
        let err = read_idx(&ip, &lp, None, Split::Train)
            .unwrap_err()
            .to_string();
        assert!(err.contains("magic") && err.contains("byte 0"), "{err}");
    }
}
