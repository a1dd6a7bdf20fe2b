//! End-to-end experiment pipeline: sample a training set, corrupt
//! labels, build the kernel, run EP, compute the bound, optionally
//! train the reference network, and emit one CSV row per cell.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::{compute_bound, BoundInputs};
use crate::data::{self, BinaryDataset, CorruptionMode};
use crate::ep::{ep_log_ml, EpConfig};
use crate::kernel::{analytic_fcn_kernel, mc_kernel, KernelConfig};
use crate::trainer::{evaluate_error, train_to_zero_error, TrainConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("dataset: {0}")]
    Data(#[from] data::DataError),
    #[error("output io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Analytic,
    Mc,
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Analytic => "analytic",
            KernelKind::Mc => "mc",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub dataset_root: PathBuf,
    pub m_grid: Vec<usize>,
    pub rho_grid: Vec<f64>,
    pub kernel_kind: KernelKind,
    pub kernel: KernelConfig,
    pub ep: EpConfig,
    pub delta: f64,
    pub gamma: f64,
    /// None runs bound-only; Some trains the reference network per cell.
    pub trainer: Option<TrainConfig>,
    pub corruption_mode: CorruptionMode,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.m_grid.is_empty() || self.rho_grid.is_empty() || self.seeds.is_empty() {
            return Err(ExperimentError::Spec(
                "m grid, rho grid, and seeds must all be non-empty".into(),
            ));
        }
        if self.m_grid.iter().any(|&m| m < 2) {
            return Err(ExperimentError::Spec("every m must be at least 2".into()));
        }
        if self
            .rho_grid
            .iter()
            .any(|&r| !(0.0..=1.0).contains(&r) || !r.is_finite())
        {
            return Err(ExperimentError::Spec(
                "rho values must lie in [0, 1]".into(),
            ));
        }
        for (name, v) in [("delta", self.delta), ("gamma", self.gamma)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ExperimentError::Spec(format!("{name} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// One output row; optional fields are empty in bound-only runs or
/// after a cell-level failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRow {
    pub dataset: String,
    pub m: usize,
    pub rho: f64,
    pub seed: u64,
    pub kernel_kind: KernelKind,
    pub depth: usize,
    pub sigma_w2: f64,
    pub log_ml: Option<f64>,
    pub ep_converged: Option<bool>,
    pub ep_sweeps: Option<usize>,
    pub delta: f64,
    pub gamma: f64,
    pub raw_rhs: Option<f64>,
    pub epsilon_bound: Option<f64>,
    pub test_error: Option<f64>,
    pub train_epochs: Option<usize>,
    pub reached_zero: Option<bool>,
    pub error_code: String,
}

pub const CSV_HEADER: &str = "dataset,m,rho,seed,kernel_kind,depth,sigma_w2,log_ml,ep_converged,ep_sweeps,delta,gamma,raw_rhs,epsilon_bound,test_error,train_epochs,reached_zero,error_code";

impl CellRow {
    pub fn to_csv_line(&self) -> String {
        fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref().map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.dataset,
            self.m,
            self.rho,
            self.seed,
            self.kernel_kind,
            self.depth,
            self.sigma_w2,
            opt(&self.log_ml),
            opt(&self.ep_converged),
            opt(&self.ep_sweeps),
            self.delta,
            self.gamma,
            opt(&self.raw_rhs),
            opt(&self.epsilon_bound),
            opt(&self.test_error),
            opt(&self.train_epochs),
            opt(&self.reached_zero),
            self.error_code
        )
    }
}

fn mix_seed(seed: u64, m: usize, rho: f64) -> u64 {
    let mut h = seed;
    h ^= (m as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= rho.to_bits().wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h
}

/// Run one cell of the grid. Failures are reported in the row's
/// error_code, never propagated; only spec/IO-level problems abort a
/// pipeline.
pub fn run_cell(
    spec: &ExperimentSpec,
    train_pool: &BinaryDataset,
    test_set: Option<&BinaryDataset>,
    m: usize,
    rho: f64,
    seed: u64,
) -> CellRow {
    let mut row = CellRow {
        dataset: spec.dataset.clone(),
        m,
        rho,
        seed,
        kernel_kind: spec.kernel_kind,
        depth: spec.kernel.depth,
        sigma_w2: spec.kernel.sigma_w2,
        log_ml: None,
        ep_converged: None,
        ep_sweeps: None,
        delta: spec.delta,
        gamma: spec.gamma,
        raw_rhs: None,
        epsilon_bound: None,
        test_error: None,
        train_epochs: None,
        reached_zero: None,
        error_code: String::new(),
    };
    let cell_seed = mix_seed(seed, m, rho);

    let (subset, _rest) = match data::sample_subset(train_pool, m, cell_seed) {
        Ok(v) => v,
        Err(e) => {
            log::error!("cell (m={m}, rho={rho}, seed={seed}): subsample failed: {e}");
            row.error_code = "subsample_failed".into();
            return row;
        }
    };
    let subset = if rho > 0.0 {
        match data::corrupt_labels(&subset, rho, cell_seed ^ 0x5bf0_3635, spec.corruption_mode) {
            Ok(v) => v,
            Err(e) => {
                log::error!("cell (m={m}, rho={rho}, seed={seed}): corruption failed: {e}");
                row.error_code = "corruption_failed".into();
                return row;
            }
        }
    } else {
        subset
    };

    let mut kcfg = spec.kernel;
    if spec.kernel_kind == KernelKind::Mc && kcfg.mc_draws == 0 {
        kcfg.mc_draws = KernelConfig::default_mc_draws(m);
    }
    let kernel = match spec.kernel_kind {
        KernelKind::Analytic => analytic_fcn_kernel(&subset.inputs, subset.dim, &kcfg),
        KernelKind::Mc => mc_kernel(&subset.inputs, subset.dim, &kcfg, cell_seed ^ 0x6b43_21f7),
    };
    let kernel = match kernel {
        Ok(k) => k,
        Err(e) => {
            log::error!("cell (m={m}, rho={rho}, seed={seed}): kernel failed: {e}");
            row.error_code = "kernel_failed".into();
            return row;
        }
    };

    match ep_log_ml(&kernel, &subset.labels, &spec.ep) {
        Ok(ev) => {
            row.log_ml = Some(ev.log_ml);
            row.ep_converged = Some(ev.converged);
            row.ep_sweeps = Some(ev.sweeps_used);
            match compute_bound(&BoundInputs {
                log_ml: ev.log_ml.min(0.0),
                m,
                delta: spec.delta,
                gamma: spec.gamma,
            }) {
                Ok(b) => {
                    row.raw_rhs = Some(b.raw_rhs);
                    row.epsilon_bound = Some(b.epsilon_bound);
                }
                Err(e) => {
                    log::error!("cell (m={m}, rho={rho}, seed={seed}): bound failed: {e}");
                    row.error_code = "bound_failed".into();
                }
            }
        }
        Err(e) => {
            log::error!("cell (m={m}, rho={rho}, seed={seed}): EP failed: {e}");
            row.error_code = "ep_failed".into();
        }
    }

    if let Some(tcfg) = &spec.trainer {
        let mut tcfg = tcfg.clone();
        tcfg.seed = cell_seed ^ 0x7f4a_11d3;
        match train_to_zero_error(&subset, &tcfg) {
            Ok(model) => {
                row.train_epochs = Some(model.outcome.epochs_used);
                row.reached_zero = Some(model.outcome.reached_zero);
                if let Some(test) = test_set {
                    match evaluate_error(&model.params, test) {
                        Ok(e) => row.test_error = Some(e),
                        Err(e) => {
                            log::error!("cell (m={m}, rho={rho}, seed={seed}): eval failed: {e}");
                            if row.error_code.is_empty() {
                                row.error_code = "eval_failed".into();
                            }
                        }
                    }
                }
            }
            Err(e) => {
                log::error!("cell (m={m}, rho={rho}, seed={seed}): training failed: {e}");
                if row.error_code.is_empty() {
                    row.error_code = "train_failed".into();
                }
            }
        }
    }
    row
}

pub struct PipelineOutcome {
    pub rows: Vec<CellRow>,
    pub failed_cells: usize,
}

/// Run the full grid in deterministic (m, rho, seed) order and write
/// the CSV plus a JSON sidecar echoing the spec.
pub fn run_pipeline(spec: &ExperimentSpec) -> Result<PipelineOutcome, ExperimentError> {
    spec.validate()?;
    let raw = data::load_split(&spec.dataset_root, &spec.dataset, "train")?;
    let train_pool = data::binarize(&raw, &spec.dataset);
    let test_set = if spec.trainer.is_some() {
        let raw_test = data::load_split(&spec.dataset_root, &spec.dataset, "test")?;
        Some(data::binarize(&raw_test, &spec.dataset))
    } else {
        None
    };

    let mut rows = Vec::new();
    for &m in &spec.m_grid {
        for &rho in &spec.rho_grid {
            for &seed in &spec.seeds {
                log::info!("cell m={m} rho={rho} seed={seed}");
                rows.push(run_cell(spec, &train_pool, test_set.as_ref(), m, rho, seed));
            }
        }
    }
    let failed_cells = rows.iter().filter(|r| !r.error_code.is_empty()).count();

    write_outputs(spec, &rows)?;
    Ok(PipelineOutcome { rows, failed_cells })
}

pub fn write_outputs(spec: &ExperimentSpec, rows: &[CellRow]) -> Result<(), ExperimentError> {
    if let Some(parent) = spec.output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&spec.output)?);
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    writeln!(f, "# generated_at_unix={stamp}")?;
    writeln!(f, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(f, "{}", row.to_csv_line())?;
    }
    f.flush()?;

    let sidecar = spec.output.with_extension("json");
    let echo = serde_json::to_string_pretty(spec)?;
    std::fs::write(sidecar, echo)?;
    Ok(())
}

/// Read rows back from a pipeline CSV, skipping comment lines.
pub fn read_csv(path: &Path) -> Result<Vec<CellRow>, ExperimentError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line == CSV_HEADER || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 18 {
            return Err(ExperimentError::Spec(format!(
                "malformed CSV line ({} fields): {line}",
                parts.len()
            )));
        }
        fn opt_parse<T: std::str::FromStr>(s: &str) -> Result<Option<T>, ExperimentError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| ExperimentError::Spec(format!("bad field value: {s}")))
            }
        }
        fn parse<T: std::str::FromStr>(s: &str) -> Result<T, ExperimentError> {
            s.parse()
                .map_err(|_| ExperimentError::Spec(format!("bad field value: {s}")))
        }
        rows.push(CellRow {
            dataset: parts[0].to_string(),
            m: parse(parts[1])?,
            rho: parse(parts[2])?,
            seed: parse(parts[3])?,
            kernel_kind: match parts[4] {
                "analytic" => KernelKind::Analytic,
                "mc" => KernelKind::Mc,
                other => return Err(ExperimentError::Spec(format!("bad kernel kind: {other}"))),
            },
            depth: parse(parts[5])?,
            sigma_w2: parse(parts[6])?,
            log_ml: opt_parse(parts[7])?,
            ep_converged: opt_parse(parts[8])?,
            ep_sweeps: opt_parse(parts[9])?,
            delta: parse(parts[10])?,
            gamma: parse(parts[11])?,
            raw_rhs: opt_parse(parts[12])?,
            epsilon_bound: opt_parse(parts[13])?,
            test_error: opt_parse(parts[14])?,
            train_epochs: opt_parse(parts[15])?,
            reached_zero: opt_parse(parts[16])?,
            error_code: parts[17].to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;

    fn tiny_spec(dir: &Path, output: PathBuf) -> ExperimentSpec {
        ExperimentSpec {
            dataset: "synthetic".into(),
            dataset_root: dir.to_path_buf(),
            m_grid: vec![8],
            rho_grid: vec![0.0],
            kernel_kind: KernelKind::Analytic,
            kernel: KernelConfig {
                depth: 2,
                ..KernelConfig::default()
            },
            ep: EpConfig::default(),
            delta: 0.01,
            gamma: 0.01,
            trainer: None,
            corruption_mode: CorruptionMode::Flip,
            seeds: vec![1, 2],
            output,
        }
    }

    fn synthetic_pool(n: usize) -> BinaryDataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let dim = 5;
        let inputs: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        BinaryDataset {
            inputs,
            dim,
            labels,
            meta: DatasetMeta {
                source: "synthetic".into(),
                class_split: "none".into(),
                corruption_fraction: 0.0,
                seed: 0,
            },
        }
    }

    #[test]
    fn run_cell_produces_valid_bound() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path(), dir.path().join("out.csv"));
        let pool = synthetic_pool(32);
        let row = run_cell(&spec, &pool, None, 8, 0.0, 1);
        assert!(row.error_code.is_empty(), "error: {}", row.error_code);
        assert!(row.log_ml.unwrap() < 0.0);
        let eb = row.epsilon_bound.unwrap();
        assert!(eb > 0.0 && eb < 1.0);
    }

    #[test]
    fn cell_rows_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path(), dir.path().join("out.csv"));
        let pool = synthetic_pool(32);
        let a = run_cell(&spec, &pool, None, 8, 0.25, 7);
        let b = run_cell(&spec, &pool, None, 8, 0.25, 7);
        assert_eq!(a.to_csv_line(), b.to_csv_line());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("rows.csv");
        let spec = tiny_spec(dir.path(), out.clone());
        let pool = synthetic_pool(32);
        let rows = vec![
            run_cell(&spec, &pool, None, 8, 0.0, 1),
            run_cell(&spec, &pool, None, 8, 0.0, 2),
        ];
        write_outputs(&spec, &rows).unwrap();
        let back = read_csv(&out).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].to_csv_line(), rows[0].to_csv_line());
        assert!(out.with_extension("json").exists());
    }

    #[test]
    fn spec_validation_catches_bad_grids() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(dir.path(), dir.path().join("out.csv"));
        spec.m_grid = vec![1];
        assert!(spec.validate().is_err());
        spec.m_grid = vec![10];
        spec.rho_grid = vec![1.5];
        assert!(spec.validate().is_err());
        spec.rho_grid = vec![0.5];
        spec.delta = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn failed_cell_sets_error_code() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(dir.path(), dir.path().join("out.csv"));
        let pool = synthetic_pool(4);
        // m larger than the pool: subsampling must fail, row must survive
        let row = run_cell(&spec, &pool, None, 8, 0.0, 1);
        assert_eq!(row.error_code, "subsample_failed");
        assert!(row.log_ml.is_none());
    }
}
