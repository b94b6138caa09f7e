//! Per-filter tail models fitted from a reference saliency matrix, and the
//! `tail_model.json` format that persists them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::evt::{fit_gpd, GpdParams};
use crate::profiles::{check_quantile, column_stats, FilterStats, SaliencyMatrix};

/// Default exceedance quantile for per-filter thresholds.
pub const DEFAULT_QUANTILE: f64 = 0.90;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTail {
    pub filter_id: usize,
    pub stats: FilterStats,
    pub params: GpdParams,
    /// Fewer than two exceedances, or a zero-spread excess sample.
    pub degenerate: bool,
    /// Reference column sorted ascending; backs the empirical survival used
    /// below the threshold.
    pub reference: Vec<f64>,
}

impl FilterTail {
    /// Number of reference values `>= value`.
    pub fn count_at_least(&self, value: f64) -> usize {
        let below = self.reference.partition_point(|&r| r < value);
        self.reference.len() - below
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailModel {
    pub quantile: f64,
    pub filters: Vec<FilterTail>,
}

impl TailModel {
    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn num_degenerate(&self) -> usize {
        self.filters.iter().filter(|f| f.degenerate).count()
    }
}

/// Thresholds every filter at `quantile` and fits a GPD to its excesses.
pub fn fit_tail_model(matrix: &SaliencyMatrix, quantile: f64) -> Result<TailModel> {
    check_quantile(quantile)?;
    if matrix.num_samples() < 2 {
        return Err(Error::InsufficientData(format!(
            "tail fitting needs N >= 2 samples, got {}",
            matrix.num_samples()
        )));
    }
    let filters = (0..matrix.num_filters())
        .map(|j| fit_filter(j, matrix.column(j)?, quantile))
        .collect::<Result<Vec<_>>>()?;
    Ok(TailModel { quantile, filters })
}

fn fit_filter(filter_id: usize, column: Vec<f64>, quantile: f64) -> Result<FilterTail> {
    let stats = column_stats(&column, quantile)?;
    let excesses: Vec<f64> = column
        .iter()
        .filter(|&&v| v > stats.threshold)
        .map(|v| v - stats.threshold)
        .collect();
    let (params, degenerate) = if excesses.len() >= 2 {
        let fit = fit_gpd(&excesses)?;
        (fit.params, fit.diagnostics.degenerate)
    } else {
        let scale = excesses.first().copied().unwrap_or(1.0);
        (GpdParams::exponential(scale)?, true)
    };
    let mut reference = column;
    reference.sort_by(f64::total_cmp);
    Ok(FilterTail {
        filter_id,
        stats,
        params,
        degenerate,
        reference,
    })
}

// Reals are written with 17 significant digits so every f64 survives a
// text round trip exactly.
fn push_real(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

/// Serializes the model as `tail_model.json` text. Output is a pure function
/// of the model.
pub fn tail_model_to_json(model: &TailModel) -> Result<String> {
    let finite = |v: f64, what: &str, j: usize| {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::Validation(format!("filter {j}: non-finite {what} {v}")))
        }
    };
    let mut out = String::new();
    out.push_str("{\n  \"quantile\": ");
    push_real(&mut out, model.quantile);
    out.push_str(",\n  \"filters\": [");
    for (j, f) in model.filters.iter().enumerate() {
        let s = &f.stats;
        for (v, what) in [
            (s.mean, "mean"),
            (s.std, "std"),
            (s.threshold, "threshold"),
            (f.params.scale, "scale"),
            (f.params.shape, "shape"),
        ] {
            finite(v, what, j)?;
        }
        out.push_str(if j == 0 { "\n    {" } else { ",\n    {" });
        write!(out, "\"filter_id\": {}, \"mean\": ", f.filter_id).unwrap();
        push_real(&mut out, s.mean);
        out.push_str(", \"std\": ");
        push_real(&mut out, s.std);
        out.push_str(", \"threshold\": ");
        push_real(&mut out, s.threshold);
        write!(
            out,
            ", \"n_exceed\": {}, \"n_total\": {}, \"scale\": ",
            s.n_exceed, s.n_total
        )
        .unwrap();
        push_real(&mut out, f.params.scale);
        out.push_str(", \"shape\": ");
        push_real(&mut out, f.params.shape);
        write!(out, ", \"degenerate\": {}, \"reference\": [", f.degenerate).unwrap();
        for (i, &r) in f.reference.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            push_real(&mut out, r);
        }
        out.push_str("]}");
    }
    out.push_str("\n  ]\n}\n");
    Ok(out)
}

#[derive(Deserialize)]
struct RawModel {
    quantile: f64,
    filters: Vec<RawFilter>,
}

#[derive(Deserialize)]
struct RawFilter {
    filter_id: usize,
    mean: f64,
    std: f64,
    threshold: f64,
    n_exceed: usize,
    n_total: usize,
    scale: f64,
    shape: f64,
    degenerate: bool,
    reference: Vec<f64>,
}

pub fn tail_model_from_json(text: &str, origin: &Path) -> Result<TailModel> {
    let raw: RawModel = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
    check_quantile(raw.quantile).map_err(|e| Error::format(origin, e.to_string()))?;
    let mut filters = Vec::with_capacity(raw.filters.len());
    for (i, f) in raw.filters.into_iter().enumerate() {
        let bad = |msg: String| Error::format(origin, format!("filter {i}: {msg}"));
        if f.filter_id != i {
            return Err(bad(format!("expected contiguous id {i}, got {}", f.filter_id)));
        }
        if f.n_exceed > f.n_total || f.reference.len() != f.n_total {
            return Err(bad("inconsistent sample counts".into()));
        }
        if !f.reference.windows(2).all(|w| w[0] <= w[1]) {
            return Err(bad("reference values not sorted".into()));
        }
        if !f.degenerate && f.n_exceed < 2 {
            return Err(bad("non-degenerate entry with fewer than 2 exceedances".into()));
        }
        let params = GpdParams::new(f.scale, f.shape).map_err(|e| bad(e.to_string()))?;
        filters.push(FilterTail {
            filter_id: f.filter_id,
            stats: FilterStats {
                mean: f.mean,
                std: f.std,
                threshold: f.threshold,
                n_exceed: f.n_exceed,
                n_total: f.n_total,
            },
            params,
            degenerate: f.degenerate,
            reference: f.reference,
        });
    }
    Ok(TailModel {
        quantile: raw.quantile,
        filters,
    })
}

pub fn save_tail_model(model: &TailModel, path: &Path) -> Result<()> {
    let text = tail_model_to_json(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_tail_model(path: &Path) -> Result<TailModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    tail_model_from_json(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::FilterMeta;

    fn matrix(cols: &[Vec<f64>]) -> SaliencyMatrix {
        let n = cols[0].len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let metas = (0..cols.len())
            .map(|i| FilterMeta {
                filter_id: i,
                layer_name: format!("l{i}"),
                layer_group: "g".into(),
                num_params: 3,
            })
            .collect();
        SaliencyMatrix::from_rows(&rows, metas).unwrap()
    }

    #[test]
    fn constant_column_is_degenerate() {
        let m = matrix(&[vec![1.0; 20], (0..20).map(|i| (i * i) as f64 * 0.1).collect()]);
        let model = fit_tail_model(&m, 0.9).unwrap();
        assert!(model.filters[0].degenerate);
        assert_eq!(model.filters[0].stats.n_exceed, 0);
        assert!(!model.filters[1].degenerate);
        assert_eq!(model.filters[1].stats.n_exceed, 2);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let col: Vec<f64> = (0..40).map(|i| ((i * 7919) % 97) as f64 / 13.0).collect();
        let m = matrix(&[col, vec![0.25; 40]]);
        let model = fit_tail_model(&m, 0.9).unwrap();
        let text = tail_model_to_json(&model).unwrap();
        let back = tail_model_from_json(&text, Path::new("mem")).unwrap();
        assert_eq!(back, model);
        assert_eq!(tail_model_to_json(&back).unwrap(), text);
        assert!(text.contains("\"quantile\": 9.0000000000000002e-1"));
    }

    #[test]
    fn rejects_inconsistent_json() {
        let text = r#"{"quantile": 0.9, "filters": [{"filter_id": 1, "mean": 0, "std": 0,
            "threshold": 0, "n_exceed": 0, "n_total": 1, "scale": 1, "shape": 0,
            "degenerate": true, "reference": [0]}]}"#;
        assert!(tail_model_from_json(text, Path::new("x")).is_err());
        let text = r#"{"quantile": 0.9, "filters": [{"filter_id": 0, "mean": 0, "std": 0,
            "threshold": 0, "n_exceed": 0, "n_total": 1, "scale": -1, "shape": 0,
            "degenerate": true, "reference": [0]}]}"#;
        assert!(tail_model_from_json(text, Path::new("x")).is_err());
    }

    #[test]
    fn survival_count() {
        let m = matrix(&[vec![1.0, 2.0, 2.0, 3.0]]);
        let model = fit_tail_model(&m, 0.5).unwrap();
        let f = &model.filters[0];
        assert_eq!(f.count_at_least(2.0), 3);
        assert_eq!(f.count_at_least(0.0), 4);
        assert_eq!(f.count_at_least(3.5), 0);
    }
}
