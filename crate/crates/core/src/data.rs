//! Deterministic datasets: synthetic spirals, an IDX (MNIST) reader, seeded
//! splits and a content hash.

use std::fmt;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// Labelled inputs. `inputs` has shape `[N, ...sample_shape]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
    hash: String,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::dims("dataset", inputs.shape(), &[labels.len()]));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        let hash = content_hash(&inputs, &labels, num_classes);
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            split,
            hash,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Hex SHA-256 of the canonical little-endian serialisation.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample (inputs shape without the leading axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels for the given sample indices, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Result<Dataset> {
        let (inputs, labels) = self.batch(indices);
        Dataset::new(inputs, labels, self.num_classes, split)
    }

    /// First `n` samples (or all of them when `n` exceeds the length).
    pub fn take(&self, n: usize, split: SplitTag) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, split)
    }

    /// Manifest line `name = hash`.
    pub fn manifest_line(&self, name: &str) -> String {
        format!("{name} = {}", self.hash)
    }
}

fn content_hash(inputs: &Tensor, labels: &[usize], num_classes: usize) -> String {
    let mut h = Sha256::new();
    h.update(b"ZTWDATA1");
    h.update((inputs.rank() as u64).to_le_bytes());
    for &d in inputs.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in inputs.data() {
        h.update(v.to_le_bytes());
    }
    h.update((num_classes as u64).to_le_bytes());
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Interleaved 2-D spirals, one arm per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiralSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Standard deviation of the angular noise.
    pub noise: f64,
    /// Revolutions α of each arm.
    pub revolutions: f64,
    pub seed: u64,
}

impl Default for SpiralSpec {
    fn default() -> Self {
        SpiralSpec {
            classes: 4,
            per_class: 500,
            noise: 0.1,
            revolutions: 1.0,
            seed: 0,
        }
    }
}

/// For class `k` and sample `i`: `t = i/(N−1)`, `r = t`,
/// `θ = 2πk/K + 2π·α·t + ε` with `ε ~ N(0, σ²)`, point `(r cos θ, r sin θ)`.
/// Noise is drawn in class-major, sample-minor order from one stream.
pub fn gen_spirals(spec: &SpiralSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class < 1 || !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("invalid spiral spec {spec:?}")));
    }
    let mut rng = Rng::new(spec.seed);
    let n = spec.per_class;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(2 * n * spec.classes);
    let mut labels = Vec::with_capacity(n * spec.classes);
    for k in 0..spec.classes {
        for i in 0..n {
            let t = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.0
            };
            let eps = if spec.noise > 0.0 {
                spec.noise * rng.normal()
            } else {
                0.0
            };
            let theta =
                two_pi * k as f64 / spec.classes as f64 + spec.revolutions * t * two_pi + eps;
            data.push(t * theta.cos());
            data.push(t * theta.sin());
            labels.push(k);
        }
    }
    let inputs = Tensor::new(vec![n * spec.classes, 2], data)?;
    Dataset::new(inputs, labels, spec.classes, SplitTag::Full)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxCursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl IdxCursor<'_> {
    fn format_err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.format_err(self.pos, "truncated header"))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            self.format_err(
                self.bytes.len(),
                format!(
                    "truncated payload: need {len} bytes after offset {}",
                    self.pos
                ),
            )
        })
    }
}

/// Reads an IDX image file (`u8`, `N×H×W`) and its label file. Pixels are
/// scaled to `[0, 1]`; inputs have shape `[N, 1, H, W]`; the class count is
/// one more than the largest label.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;

    let mut ic = IdxCursor {
        path: images,
        bytes: &img_bytes,
        pos: 0,
    };
    let magic = ic.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ic.format_err(0, format!("bad image magic {magic:#010x}")));
    }
    let n = ic.u32_be()? as usize;
    let h = ic.u32_be()? as usize;
    let w = ic.u32_be()? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(ic.format_err(4, format!("empty image dimensions {n}x{h}x{w}")));
    }
    let pixels = ic.body(n * h * w)?;

    let mut lc = IdxCursor {
        path: labels,
        bytes: &lbl_bytes,
        pos: 0,
    };
    let magic = lc.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(lc.format_err(0, format!("bad label magic {magic:#010x}")));
    }
    let ln = lc.u32_be()? as usize;
    if ln != n {
        return Err(lc.format_err(
            4,
            format!("label count {ln} does not match image count {n}"),
        ));
    }
    let raw_labels = lc.body(n)?;

    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let inputs = Tensor::new(vec![n, 1, h, w], data)?;
    Dataset::new(inputs, labels, classes.max(2), SplitTag::Full)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

/// Seeded shuffled partition into train/val/test. Counts are
/// `round(f·N)` for train and val, the remainder for test; within each part
/// the original sample order is kept.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = dataset.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (name, count, frac) in [
        ("train", n_train, fractions[0]),
        ("val", n_val, fractions[1]),
        ("test", n_test, fractions[2]),
    ] {
        if frac > 0.0 && count == 0 {
            return Err(Error::Config(format!(
                "{name} split is empty for {n} samples"
            )));
        }
    }
    if n_train == 0 {
        return Err(Error::Config("train split is empty".into()));
    }
    let perm = Rng::new(seed).permutation(n);
    let part = |range: std::ops::Range<usize>, tag: SplitTag| -> Result<Option<Dataset>> {
        if range.is_empty() {
            return Ok(None);
        }
        let mut idx = perm[range].to_vec();
        idx.sort_unstable();
        dataset.subset(&idx, tag).map(Some)
    };
    Ok(Splits {
        train: part(0..n_train, SplitTag::Train)?.expect("non-empty train"),
        val: part(n_train..n_train + n_val, SplitTag::Val)?,
        test: part(n_train + n_val..n, SplitTag::Test)?,
    })
}
