//! GP prior covariance over training inputs: the exact arc-cosine
//! recursion for fully connected ReLU networks, and the Monte-Carlo
//! estimator built from random-initialization forward passes.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("invalid kernel config: {0}")]
    Config(String),
    #[error("inputs must share one dimension >= 1")]
    BadInputs,
    #[error("non-finite kernel entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt kernel file: {0}")]
    Corrupt(String),
}

/// Hyperparameters of the network prior.
///
/// `width` and `mc_draws` only matter for the Monte-Carlo estimator.
/// Weight variance is sigma_w^2 / fan-in per layer; bias variance is
/// sigma_b^2 directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    /// Hidden-layer count (L - 1).
    pub depth: usize,
    /// Hidden width for the MC estimator.
    pub width: usize,
    /// Number of parameter draws for the MC estimator.
    pub mc_draws: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            sigma_w2: 1.41,
            sigma_b2: 0.0,
            depth: 2,
            width: 1024,
            mc_draws: 1,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self, mc: bool) -> Result<(), KernelError> {
        if self.sigma_w2 <= 0.0 {
            return Err(KernelError::Config(format!(
                "sigma_w2 must be > 0, got {}",
                self.sigma_w2
            )));
        }
        if self.sigma_b2 < 0.0 {
            return Err(KernelError::Config(format!(
                "sigma_b2 must be >= 0, got {}",
                self.sigma_b2
            )));
        }
        if self.depth < 1 {
            return Err(KernelError::Config("depth must be >= 1".into()));
        }
        if mc && (self.width < 1 || self.mc_draws < 1) {
            return Err(KernelError::Config(
                "MC estimator needs width >= 1 and mc_draws >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Default draw count from the m = |S| it will be paired with:
    /// ceil(0.1 m), never below 1.
    pub fn default_mc_draws(m: usize) -> usize {
        ((0.1 * m as f64).ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Construction {
    Analytic,
    MonteCarlo,
}

/// Symmetric PSD prior covariance with construction metadata.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
    pub construction: Construction,
    pub config: KernelConfig,
    pub seed: u64,
    /// Arc-cosine arguments that had to be clamped into [-1, 1].
    pub clamp_events: usize,
    /// Inputs whose activations were identically zero on every draw.
    pub degenerate_inputs: Vec<usize>,
}

impl KernelMatrix {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn mean_diagonal(&self) -> f64 {
        self.values.diag().mean().unwrap_or(0.0)
    }

    /// Check the kernel invariants: symmetry to 1e-10 relative, and
    /// min eigenvalue >= -1e-8 x mean diagonal (certified by a Cholesky
    /// of the shifted matrix).
    pub fn validate(&self) -> Result<(), String> {
        let k = &self.values;
        let m = k.nrows();
        let max_abs = k.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..m {
            if k[[i, i]] <= 0.0 {
                return Err(format!("non-positive diagonal at {i}: {}", k[[i, i]]));
            }
            for j in (i + 1)..m {
                if (k[[i, j]] - k[[j, i]]).abs() > 1e-10 * max_abs {
                    return Err(format!(
                        "asymmetry at ({i}, {j}): {} vs {}",
                        k[[i, j]],
                        k[[j, i]]
                    ));
                }
            }
        }
        let shift = 1e-8 * self.mean_diagonal();
        let mut shifted = k.clone();
        for i in 0..m {
            shifted[[i, i]] += shift;
        }
        linalg::cholesky(shifted.view())
            .map(|_| ())
            .map_err(|e| format!("kernel fails shifted PSD check: {e}"))
    }
}

fn as_matrix<'a>(inputs: &'a [f64], dim: usize) -> Result<ArrayView2<'a, f64>, KernelError> {
    if dim == 0 || inputs.is_empty() || inputs.len() % dim != 0 {
        return Err(KernelError::BadInputs);
    }
    ArrayView2::from_shape((inputs.len() / dim, dim), inputs).map_err(|_| KernelError::BadInputs)
}

/// Exact NNGP kernel for a ReLU FCN via the arc-cosine recursion.
///
/// Layer 0: K0 = sigma_b^2 + sigma_w^2 (x . x') / d, then `depth`
/// applications of
///   K_{l+1}(x, x') = sigma_b^2 + sigma_w^2 / (2 pi) sqrt(Kxx Kx'x')
///                    (sin t + (pi - t) cos t),  t = arccos(Kxx' / sqrt(Kxx Kx'x')).
pub fn analytic_fcn_kernel(
    inputs: &[f64],
    dim: usize,
    config: &KernelConfig,
) -> Result<KernelMatrix, KernelError> {
    config.validate(false)?;
    let x = as_matrix(inputs, dim)?;
    let m = x.nrows();
    let d = dim as f64;

    // K0 via one gemm
    let mut k = x.dot(&x.t());
    k.mapv_inplace(|v| config.sigma_b2 + config.sigma_w2 * v / d);

    let mut clamp_events = 0usize;
    for _ in 0..config.depth {
        let diag: Array1<f64> = k.diag().to_owned();
        let mut next = Array2::zeros((m, m));
        for i in 0..m {
            for j in i..m {
                let denom = (diag[i] * diag[j]).sqrt();
                let v = if denom == 0.0 {
                    0.0
                } else {
                    let mut c = k[[i, j]] / denom;
                    if !(-1.0..=1.0).contains(&c) {
                        if c.abs() > 1.0 + 1e-8 {
                            log::warn!(
                                "arc-cosine argument {c} out of range at ({i}, {j}); clamping"
                            );
                        }
                        c = c.clamp(-1.0, 1.0);
                        clamp_events += 1;
                    }
                    let theta = c.acos();
                    denom * (theta.sin() + (PI - theta) * theta.cos()) / (2.0 * PI)
                };
                let e = config.sigma_b2 + config.sigma_w2 * v;
                next[[i, j]] = e;
                next[[j, i]] = e;
            }
        }
        k = next;
    }

    for ((i, j), v) in k.indexed_iter() {
        if !v.is_finite() {
            return Err(KernelError::NonFinite(i, j));
        }
    }
    Ok(KernelMatrix {
        values: k,
        construction: Construction::Analytic,
        config: *config,
        seed: 0,
        clamp_events,
        degenerate_inputs: Vec::new(),
    })
}

/// Monte-Carlo kernel estimate from `mc_draws` random initializations:
///   K~(x, x') = sigma_w^2 / (M n) sum_m sum_c h_c(x) h_c(x') + sigma_b^2
/// with h the last-hidden-layer ReLU activations.
///
/// Each draw gets its own generator derived from (seed, draw index) and
/// contributions are accumulated in draw order, so the result does not
/// depend on scheduling.
pub fn mc_kernel(
    inputs: &[f64],
    dim: usize,
    config: &KernelConfig,
    seed: u64,
) -> Result<KernelMatrix, KernelError> {
    config.validate(true)?;
    let x = as_matrix(inputs, dim)?;
    let m = x.nrows();
    let n = config.width;

    let mut acc: Array2<f64> = Array2::zeros((m, m));
    let mut nonzero_seen = vec![false; m];

    for draw in 0..config.mc_draws {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (draw as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut h = x.to_owned();
        let mut fan_in = dim;
        for _layer in 0..config.depth {
            let w_std = (config.sigma_w2 / fan_in as f64).sqrt();
            let wdist = Normal::new(0.0, w_std).unwrap();
            let w = Array2::from_shape_fn((fan_in, n), |_| wdist.sample(&mut rng));
            let mut a = h.dot(&w);
            if config.sigma_b2 > 0.0 {
                let bdist = Normal::new(0.0, config.sigma_b2.sqrt()).unwrap();
                let b = Array1::from_shape_fn(n, |_| bdist.sample(&mut rng));
                a += &b;
            }
            a.mapv_inplace(|v| v.max(0.0));
            h = a;
            fan_in = n;
        }
        for (i, row) in h.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&v| v != 0.0) {
                nonzero_seen[i] = true;
            }
        }
        acc = acc + h.dot(&h.t());
    }

    let scale = config.sigma_w2 / (config.mc_draws as f64 * n as f64);
    acc.mapv_inplace(|v| v * scale + config.sigma_b2);

    let degenerate_inputs: Vec<usize> = (0..m).filter(|&i| !nonzero_seen[i]).collect();
    if !degenerate_inputs.is_empty() {
        log::warn!(
            "MC kernel: {} input(s) with all-zero activations on every draw",
            degenerate_inputs.len()
        );
    }
    Ok(KernelMatrix {
        values: acc,
        construction: Construction::MonteCarlo,
        config: *config,
        seed,
        clamp_events: 0,
        degenerate_inputs,
    })
}

const KERNEL_MAGIC: &[u8; 8] = b"MLBKRN01";

impl KernelMatrix {
    /// Binary container: magic, header, then row-major little-endian f64.
    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(KERNEL_MAGIC)?;
        let m = self.size() as u64;
        f.write_all(&m.to_le_bytes())?;
        f.write_all(&[match self.construction {
            Construction::Analytic => 0u8,
            Construction::MonteCarlo => 1u8,
        }])?;
        f.write_all(&self.config.sigma_w2.to_le_bytes())?;
        f.write_all(&self.config.sigma_b2.to_le_bytes())?;
        f.write_all(&(self.config.depth as u32).to_le_bytes())?;
        f.write_all(&(self.config.width as u32).to_le_bytes())?;
        f.write_all(&(self.config.mc_draws as u32).to_le_bytes())?;
        f.write_all(&self.seed.to_le_bytes())?;
        for v in self.values.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<KernelMatrix, KernelError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != KERNEL_MAGIC {
            return Err(KernelError::Corrupt("bad magic".into()));
        }
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        let mut b1 = [0u8; 1];
        f.read_exact(&mut b8)?;
        let m = u64::from_le_bytes(b8) as usize;
        f.read_exact(&mut b1)?;
        let construction = match b1[0] {
            0 => Construction::Analytic,
            1 => Construction::MonteCarlo,
            v => return Err(KernelError::Corrupt(format!("bad construction tag {v}"))),
        };
        f.read_exact(&mut b8)?;
        let sigma_w2 = f64::from_le_bytes(b8);
        f.read_exact(&mut b8)?;
        let sigma_b2 = f64::from_le_bytes(b8);
        f.read_exact(&mut b4)?;
        let depth = u32::from_le_bytes(b4) as usize;
        f.read_exact(&mut b4)?;
        let width = u32::from_le_bytes(b4) as usize;
        f.read_exact(&mut b4)?;
        let mc_draws = u32::from_le_bytes(b4) as usize;
        f.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut values = Array2::zeros((m, m));
        for v in values.iter_mut() {
            f.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        Ok(KernelMatrix {
            values,
            construction,
            config: KernelConfig {
                sigma_w2,
                sigma_b2,
                depth,
                width,
                mc_draws,
            },
            seed,
            clamp_events: 0,
            degenerate_inputs: Vec::new(),
        })
    }

    /// Plain CSV of the matrix values, one row per line.
    pub fn export_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}
