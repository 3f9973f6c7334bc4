//! Datasets: IDX and CSV ingestion, synthetic Gaussian blobs, and seeded splits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::data(format!("{} feature rows but {} labels", features.rows(), labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::data(format!("label {l} at row {i} outside [0, {num_classes})")));
        }
        if !features.is_finite() {
            return Err(Error::data("non-finite feature value"));
        }
        Ok(Dataset { features, labels, num_classes, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub(crate) fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            Err(Error::data(format!("{what} dataset is empty")))
        } else {
            Ok(())
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated {what} header")))
}

/// Parses an IDX image buffer into `(count, rows*cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")));
    }
    let n = be_u32(bytes, 4, "image")? as usize;
    let rows = be_u32(bytes, 8, "image")? as usize;
    let cols = be_u32(bytes, 12, "image")? as usize;
    let dim = rows * cols;
    let need = 16 + n * dim;
    if bytes.len() < need {
        return Err(Error::format(bytes.len() as u64, format!("image payload truncated: need {need} bytes, have {}", bytes.len())));
    }
    Ok((n, dim, &bytes[16..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")));
    }
    let n = be_u32(bytes, 4, "label")? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(Error::format(bytes.len() as u64, format!("label payload truncated: need {need} bytes, have {}", bytes.len())));
    }
    Ok(&bytes[8..need])
}

/// Builds a 10-class dataset from IDX buffers; pixels are scaled by 1/255.
pub fn idx_dataset(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let (n, dim, pixels) = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if lab.len() != n {
        return Err(Error::format(4, format!("{n} images but {} labels", lab.len())));
    }
    if let Some((i, &l)) = lab.iter().enumerate().find(|(_, &l)| l >= 10) {
        return Err(Error::format(8 + i as u64, format!("label {l} outside [0, 10)")));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let features = Matrix::from_vec(n, dim, data)?;
    Dataset::new(features, lab.iter().map(|&l| l as usize).collect(), 10, name)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let name = images_path.file_name().map_or_else(|| "idx".to_string(), |f| f.to_string_lossy().into_owned());
    idx_dataset(&images, &labels, &name)
}

/// Serialises a dataset into IDX buffers (features must lie in [0, 1]; they are
/// rescaled by 255 and rounded). `rows * cols` must equal the feature width.
pub fn to_idx(dataset: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != dataset.dim() {
        return Err(Error::shape(format!("{rows}x{cols} images for {} features", dataset.dim())));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.features.len());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(dataset.features.as_slice().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Reads a headed numeric CSV; `label_column` names the class column and the
/// remaining columns become features in header order.
pub fn load_csv(path: &Path, label_column: &str, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map_or_else(|| "csv".to_string(), |f| f.to_string_lossy().into_owned());
    parse_csv(&text, label_column, num_classes, &name)
}

pub fn parse_csv(text: &str, label_column: &str, num_classes: usize, name: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::CsvFormat { row: 1, msg: "missing header".into() });
    };
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let Some(label_idx) = columns.iter().position(|c| *c == label_column) else {
        return Err(Error::CsvFormat { row: 1, msg: format!("no column named {label_column:?}") });
    };
    let width = columns.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        let row = line_no + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(Error::CsvFormat { row, msg: format!("{} cells, header has {width}", cells.len()) });
        }
        for (j, cell) in cells.iter().enumerate() {
            if j == label_idx {
                let label: usize = cell
                    .parse()
                    .map_err(|_| Error::CsvFormat { row, msg: format!("label {cell:?} is not a class index") })?;
                if label >= num_classes {
                    return Err(Error::CsvFormat { row, msg: format!("label {label} >= num_classes {num_classes}") });
                }
                labels.push(label);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::CsvFormat { row, msg: format!("column {:?}: {cell:?} is not a number", columns[j]) })?;
                if !v.is_finite() {
                    return Err(Error::CsvFormat { row, msg: format!("column {:?} is not finite", columns[j]) });
                }
                data.push(v);
            }
        }
    }
    let features = Matrix::from_vec(labels.len(), width - 1, data)?;
    Dataset::new(features, labels, num_classes, name)
}

/// Writes `f0..f{d-1},label` with shortest round-trip float formatting.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..dataset.dim() {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for (row, &label) in dataset.features.iter_rows().zip(&dataset.labels) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Balanced Gaussian blobs with unit variance; class means sit pairwise
/// `separation` apart (scaled basis vectors, or ±separation/2 on one axis for
/// two classes in one dimension).
pub fn synth_blobs(n: usize, dim: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("synthetic blobs need at least two classes"));
    }
    if !(separation > 0.0) {
        return Err(Error::config("blob separation must be positive"));
    }
    if n < classes {
        return Err(Error::data(format!("{n} examples cannot cover {classes} classes")));
    }
    let means: Vec<Vec<f64>> = if dim >= classes {
        let s = separation / std::f64::consts::SQRT_2;
        (0..classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = s;
                m
            })
            .collect()
    } else if classes == 2 && dim >= 1 {
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        a[0] = -separation / 2.0;
        b[0] = separation / 2.0;
        vec![a, b]
    } else {
        return Err(Error::config(format!("{classes} equidistant blobs need at least {classes} dimensions")));
    };
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(means[c].iter().map(|&m| m + rng.normal()));
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, classes, "blobs")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

fn default_true() -> bool {
    true
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64, stratified: bool) -> Self {
        SplitSpec { train, val, test, seed, stratified }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::config("split fractions must be non-negative"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions sum to {}, not 1", f.iter().sum::<f64>())));
        }
        Ok(())
    }
}

/// Rounded sizes for `n` items that always sum to `n`.
fn allocate(n: usize, spec: &SplitSpec) -> [usize; 3] {
    let train = ((n as f64) * spec.train).round() as usize;
    let val = (((n as f64) * spec.val).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    [train, val, n - train - val]
}

/// Seeded train/val/test partition. With `stratified`, each class is split
/// separately, so per-class proportions are preserved to within rounding.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    if spec.stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
        for (i, &l) in dataset.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for mut idx in by_class {
            rng.shuffle(&mut idx);
            let sizes = allocate(idx.len(), spec);
            parts[0].extend_from_slice(&idx[..sizes[0]]);
            parts[1].extend_from_slice(&idx[sizes[0]..sizes[0] + sizes[1]]);
            parts[2].extend_from_slice(&idx[sizes[0] + sizes[1]..]);
        }
        for p in &mut parts {
            rng.shuffle(p);
        }
    } else {
        let idx = rng.permutation(dataset.len());
        let sizes = allocate(idx.len(), spec);
        parts[0] = idx[..sizes[0]].to_vec();
        parts[1] = idx[sizes[0]..sizes[0] + sizes[1]].to_vec();
        parts[2] = idx[sizes[0] + sizes[1]..].to_vec();
    }
    for (name, frac, p) in [("train", spec.train, &parts[0]), ("val", spec.val, &parts[1]), ("test", spec.test, &parts[2])] {
        if frac > 0.0 && p.is_empty() {
            return Err(Error::data(format!(
                "{name} split is empty: {} examples are too few for fraction {frac}",
                dataset.len()
            )));
        }
    }
    let [a, b, c] = parts;
    Ok((dataset.subset(&a), dataset.subset(&b), dataset.subset(&c)))
}

/// Seeded class-balanced sample of `n` examples (all of them when `n >= len`).
pub fn stratified_sample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n >= dataset.len() {
        return Ok(dataset.clone());
    }
    if n == 0 {
        return Err(Error::config("subsample size must be at least 1"));
    }
    let frac = n as f64 / dataset.len() as f64;
    let mut rng = Rng::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut picked = Vec::with_capacity(n);
    for mut idx in by_class {
        rng.shuffle(&mut idx);
        let take = ((idx.len() as f64) * frac).round() as usize;
        picked.extend_from_slice(&idx[..take.min(idx.len())]);
    }
    rng.shuffle(&mut picked);
    Ok(dataset.subset(&picked))
}
