//! Saliency-profile matrices: storage, per-filter statistics, thresholds.
//!
//! On disk a matrix is a `manifest.json` next to a headerless file of
//! `N·L` little-endian `f32` values in row-major order (one row per sample).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MATRIX_FILE: &str = "profiles.f32";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterMeta {
    pub filter_id: usize,
    pub layer_name: String,
    pub layer_group: String,
    /// Size of the filter's parameter index set.
    pub num_params: usize,
}

/// `N × L` matrix of filter-wise saliency profiles, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMatrix {
    num_samples: usize,
    values: Vec<f32>,
    filters: Vec<FilterMeta>,
}

impl SaliencyMatrix {
    /// Build from row-major values; validates shape, finiteness, sign and
    /// filter metadata.
    pub fn new(num_samples: usize, values: Vec<f32>, filters: Vec<FilterMeta>) -> Result<Self> {
        let num_filters = filters.len();
        if num_samples == 0 || num_filters == 0 {
            return Err(Error::EmptyInput("saliency matrix needs N >= 1 and L >= 1"));
        }
        if values.len() != num_samples * num_filters {
            return Err(Error::Shape {
                expected: num_samples * num_filters,
                actual: values.len(),
            });
        }
        validate_filters(&filters)?;
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!(
                "saliency entries must be finite and >= 0, found {v}"
            )));
        }
        Ok(SaliencyMatrix {
            num_samples,
            values,
            filters,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], filters: Vec<FilterMeta>) -> Result<Self> {
        let l = filters.len();
        let mut values = Vec::with_capacity(rows.len() * l);
        for row in rows {
            if row.len() != l {
                return Err(Error::Shape {
                    expected: l,
                    actual: row.len(),
                });
            }
            values.extend(row.iter().map(|&v| v as f32));
        }
        Self::new(rows.len(), values, filters)
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn filters(&self) -> &[FilterMeta] {
        &self.filters
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, sample: usize) -> &[f32] {
        let l = self.num_filters();
        &self.values[sample * l..(sample + 1) * l]
    }

    pub fn column(&self, filter_id: usize) -> Result<Vec<f64>> {
        let l = self.num_filters();
        if filter_id >= l {
            return Err(Error::Index {
                index: filter_id,
                len: l,
            });
        }
        Ok((0..self.num_samples)
            .map(|i| self.values[i * l + filter_id] as f64)
            .collect())
    }
}

fn validate_filters(filters: &[FilterMeta]) -> Result<()> {
    for (i, f) in filters.iter().enumerate() {
        if f.filter_id != i {
            return Err(Error::Validation(format!(
                "filter ids must be contiguous from 0; position {i} has id {}",
                f.filter_id
            )));
        }
        if f.num_params == 0 {
            return Err(Error::Validation(format!("filter {i} has num_params = 0")));
        }
    }
    Ok(())
}

/// Per-filter reference statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub mean: f64,
    /// Population standard deviation (divisor N).
    pub std: f64,
    pub threshold: f64,
    /// Count of reference values strictly above `threshold`.
    pub n_exceed: usize,
    pub n_total: usize,
}

/// Mean of the parameter-wise saliencies of one filter.
pub fn aggregate_filter_profile(param_saliencies: &[f64]) -> Result<f64> {
    if param_saliencies.is_empty() {
        return Err(Error::EmptyInput("filter has no parameters"));
    }
    Ok(param_saliencies.iter().sum::<f64>() / param_saliencies.len() as f64)
}

/// Empirical quantile of already sorted data, interpolating linearly between
/// the order statistics at `(N-1)·q`.
pub fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn column_stats(column: &[f64], quantile: f64) -> Result<FilterStats> {
    check_quantile(quantile)?;
    let n = column.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "filter statistics need N >= 2 samples, got {n}"
        )));
    }
    let mean = column.iter().sum::<f64>() / n as f64;
    let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted_quantile(&sorted, quantile);
    let n_exceed = column.iter().filter(|&&v| v > threshold).count();
    Ok(FilterStats {
        mean,
        std: var.sqrt(),
        threshold,
        n_exceed,
        n_total: n,
    })
}

pub fn compute_stats(matrix: &SaliencyMatrix, quantile: f64) -> Result<Vec<FilterStats>> {
    check_quantile(quantile)?;
    if matrix.num_samples() < 2 {
        return Err(Error::InsufficientData(format!(
            "filter statistics need N >= 2 samples, got {}",
            matrix.num_samples()
        )));
    }
    (0..matrix.num_filters())
        .map(|j| column_stats(&matrix.column(j)?, quantile))
        .collect()
}

pub(crate) fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("quantile must lie in (0, 1), got {q}")))
    }
}

/// `{v - threshold : v > threshold}` for one filter, in row order.
pub fn excesses_for_filter(matrix: &SaliencyMatrix, filter_id: usize, threshold: f64) -> Result<Vec<f64>> {
    Ok(matrix
        .column(filter_id)?
        .into_iter()
        .filter(|&v| v > threshold)
        .map(|v| v - threshold)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileManifest {
    pub version: u32,
    pub num_samples: usize,
    pub num_filters: usize,
    pub dtype: String,
    pub matrix_file: String,
    pub filters: Vec<FilterMeta>,
}

/// Write `manifest.json` and the matrix file into `dir`, creating it if
/// needed. Returns the manifest path.
pub fn save_profiles(matrix: &SaliencyMatrix, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ProfileManifest {
        version: FORMAT_VERSION,
        num_samples: matrix.num_samples(),
        num_filters: matrix.num_filters(),
        dtype: DTYPE.to_string(),
        matrix_file: MATRIX_FILE.to_string(),
        filters: matrix.filters.clone(),
    };
    let bytes: Vec<u8> = matrix.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let matrix_path = dir.join(MATRIX_FILE);
    fs::write(&matrix_path, bytes).map_err(|e| Error::io(&matrix_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn load_profiles(manifest_path: &Path) -> Result<SaliencyMatrix> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ProfileManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::format(
            manifest_path,
            format!("unsupported version {}", manifest.version),
        ));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::format(
            manifest_path,
            format!("unsupported dtype {:?}", manifest.dtype),
        ));
    }
    if manifest.filters.len() != manifest.num_filters {
        return Err(Error::format(
            manifest_path,
            format!(
                "num_filters = {} but {} filter entries",
                manifest.num_filters,
                manifest.filters.len()
            ),
        ));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let matrix_path = base.join(&manifest.matrix_file);
    let bytes = fs::read(&matrix_path).map_err(|e| Error::io(&matrix_path, e))?;
    let expected = manifest.num_samples * manifest.num_filters * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &matrix_path,
            format!(
                "declared {}x{} f32 matrix needs {expected} bytes, file has {}",
                manifest.num_samples,
                manifest.num_filters,
                bytes.len()
            ),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::format(&matrix_path, format!("non-finite entry {v}")));
    }
    SaliencyMatrix::new(manifest.num_samples, values, manifest.filters)
        .map_err(|e| Error::format(manifest_path, e.to_string()))
}
