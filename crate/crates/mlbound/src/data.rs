//! Dataset ingestion: IDX container parsing, binarization of multi-class
//! labels, label corruption, and seeded subsampling.
//!
//! All randomness goes through ChaCha8, a counter-based stream generator,
//! so index sets are bit-reproducible across platforms and across runs
//! with the same seed.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Pre-binarization image data, pixels kept as raw bytes.
#[derive(Debug, Clone)]
pub struct RawDataset {
    /// count x rows x cols, row-major.
    pub images: Vec<u8>,
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u8>,
    pub class_count: usize,
}

/// How corrupted labels are produced from clean ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptionMode {
    /// Flip the binary label (every corrupted item is wrong).
    Flip,
    /// Resample uniformly from {0, 1} (a corrupted item may keep its label).
    Resample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub class_split: String,
    pub corruption_fraction: f64,
    pub seed: u64,
}

/// Binary-labeled dataset with inputs normalized into [0, 1].
#[derive(Debug, Clone)]
pub struct BinaryDataset {
    /// count x dim, row-major.
    pub inputs: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<u8>,
    pub meta: DatasetMeta,
}

impl BinaryDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let to_io = |source| DataError::Io {
        path: path.to_owned(),
        source,
    };
    // accept `foo.idx` or `foo.idx.gz`; when given the bare name, fall
    // back to the gzipped sibling
    let (actual, gz): (PathBuf, bool) = if path.exists() {
        let gz = path.extension().is_some_and(|e| e == "gz");
        (path.to_owned(), gz)
    } else {
        let mut os = path.as_os_str().to_owned();
        os.push(".gz");
        let p = PathBuf::from(os);
        if !p.exists() {
            return Err(DataError::Io {
                path: path.to_owned(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            });
        }
        (p, true)
    };
    let f = File::open(&actual).map_err(to_io)?;
    let mut buf = Vec::new();
    if gz {
        GzDecoder::new(f).read_to_end(&mut buf).map_err(to_io)?;
    } else {
        std::io::BufReader::new(f)
            .read_to_end(&mut buf)
            .map_err(to_io)?;
    }
    Ok(buf)
}

fn be_u32(buf: &[u8], off: usize, path: &Path, field: &str) -> Result<u32, DataError> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            path: path.to_owned(),
            detail: format!("truncated header: missing {field}"),
        })
}

/// Load an IDX image/label file pair (big-endian, magic 0x803 / 0x801;
/// gzip handled transparently).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset, DataError> {
    let ibuf = open_maybe_gz(images_path)?;
    let magic = be_u32(&ibuf, 0, images_path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::Format {
            path: images_path.to_owned(),
            detail: format!("bad images magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
        });
    }
    let count = be_u32(&ibuf, 4, images_path, "count")? as usize;
    let rows = be_u32(&ibuf, 8, images_path, "rows")? as usize;
    let cols = be_u32(&ibuf, 12, images_path, "cols")? as usize;
    let expected = 16 + count * rows * cols;
    if ibuf.len() != expected {
        return Err(DataError::Format {
            path: images_path.to_owned(),
            detail: format!(
                "payload size {} does not match header ({count} x {rows} x {cols} = {} bytes)",
                ibuf.len() - 16,
                count * rows * cols
            ),
        });
    }

    let lbuf = open_maybe_gz(labels_path)?;
    let lmagic = be_u32(&lbuf, 0, labels_path, "magic")?;
    if lmagic != LABELS_MAGIC {
        return Err(DataError::Format {
            path: labels_path.to_owned(),
            detail: format!("bad labels magic 0x{lmagic:08x}, expected 0x{LABELS_MAGIC:08x}"),
        });
    }
    let lcount = be_u32(&lbuf, 4, labels_path, "count")? as usize;
    if lbuf.len() != 8 + lcount {
        return Err(DataError::Format {
            path: labels_path.to_owned(),
            detail: format!(
                "payload size {} does not match count {lcount}",
                lbuf.len() - 8
            ),
        });
    }
    if lcount != count {
        return Err(DataError::Consistency(format!(
            "image count {count} != label count {lcount}"
        )));
    }
    let labels = lbuf[8..].to_vec();
    let class_count = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    if class_count < 2 {
        return Err(DataError::Consistency(format!(
            "need at least 2 classes, found {class_count}"
        )));
    }
    Ok(RawDataset {
        images: ibuf[16..].to_vec(),
        count,
        rows,
        cols,
        labels,
        class_count,
    })
}

/// Collapse a K-class dataset to binary labels and normalize pixels to
/// [0, 1]. Classes below ceil(K/2) map to 0, the rest to 1.
pub fn binarize(raw: &RawDataset, source: &str) -> BinaryDataset {
    let dim = raw.rows * raw.cols;
    let split = raw.class_count.div_ceil(2);
    let inputs: Vec<f64> = raw.images.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<u8> = raw
        .labels
        .iter()
        .map(|&c| u8::from((c as usize) >= split))
        .collect();
    BinaryDataset {
        inputs,
        dim,
        labels,
        meta: DatasetMeta {
            source: source.to_owned(),
            class_split: format!("first {split} of {} classes -> 0", raw.class_count),
            corruption_fraction: 0.0,
            seed: 0,
        },
    }
}

/// Corrupt exactly floor(rho * m) labels, chosen uniformly without
/// replacement by the seeded generator.
pub fn corrupt_labels(
    ds: &BinaryDataset,
    rho: f64,
    seed: u64,
    mode: CorruptionMode,
) -> Result<BinaryDataset, DataError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(DataError::Argument(format!(
            "corruption fraction must be in [0, 1], got {rho}"
        )));
    }
    let m = ds.len();
    let n_corrupt = (rho * m as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..m).collect();
    indices.shuffle(&mut rng);
    indices.truncate(n_corrupt);

    let mut out = ds.clone();
    for &i in &indices {
        out.labels[i] = match mode {
            CorruptionMode::Flip => 1 - out.labels[i],
            CorruptionMode::Resample => {
                use rand::Rng;
                rng.gen_range(0..2u8)
            }
        };
    }
    out.meta.corruption_fraction = rho;
    out.meta.seed = seed;
    Ok(out)
}

/// Sample `m` items uniformly without replacement; returns (train,
/// remainder). Same seed, same index sets.
pub fn sample_subset(
    ds: &BinaryDataset,
    m: usize,
    seed: u64,
) -> Result<(BinaryDataset, BinaryDataset), DataError> {
    let total = ds.len();
    if m == 0 || m > total {
        return Err(DataError::Argument(format!(
            "subset size {m} out of range 1..={total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..total).collect();
    indices.shuffle(&mut rng);
    let (take, rest) = indices.split_at(m);
    Ok((project(ds, take, seed), project(ds, rest, seed)))
}

fn project(ds: &BinaryDataset, indices: &[usize], seed: u64) -> BinaryDataset {
    let mut inputs = Vec::with_capacity(indices.len() * ds.dim);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        inputs.extend_from_slice(ds.input(i));
        labels.push(ds.labels[i]);
    }
    let mut meta = ds.meta.clone();
    meta.seed = seed;
    BinaryDataset {
        inputs,
        dim: ds.dim,
        labels,
        meta,
    }
}

/// Resolve `<root>/<name>/{train,test}-{images,labels}.idx[.gz]` and load
/// the requested split.
pub fn load_split(root: &Path, name: &str, split: &str) -> Result<RawDataset, DataError> {
    let dir = root.join(name);
    load_idx(
        &dir.join(format!("{split}-images.idx")),
        &dir.join(format!("{split}-labels.idx")),
    )
}
