//! Pruning and one-step fine-tuning sweeps over misclassified samples.
//!
//! For every misclassified sample a ranking is computed from that sample's
//! own saliency profile. The top `k` filters are then zeroed (pruning) or
//! given one gradient step (fine-tuning) for `k = 0..=max_filters`, and the
//! softmax confidence of the wrongly predicted class, of the true class, and
//! whether the argmax now matches the label are averaged over samples.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{argmax, ToyCnn};
use crate::data::{Sample, SyntheticDataset};
use crate::error::{Error, Result};
use crate::profiles::SaliencyMatrix;
use crate::rank::{
    group_attribution, last_group_ranking, pot_saliency, random_ranking, rank, zscore_saliency,
    FilterRanking, GroupShare, Method,
};
use crate::tail::{TailModel, DEFAULT_QUANTILE};

pub const DEFAULT_MAX_FILTERS: usize = 50;
pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_RANDOM_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Prune,
    Finetune,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Prune => "prune",
            Experiment::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prune" => Ok(Experiment::Prune),
            "finetune" => Ok(Experiment::Finetune),
            other => Err(Error::Validation(format!("unknown experiment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub method: Method,
    pub max_filters: usize,
    pub lr: f64,
    /// Only used by the random method; one permutation per seed and sample.
    pub random_seeds: Vec<u64>,
    /// Quantile the tail model must have been fitted with.
    pub quantile: f64,
}

impl EvalConfig {
    pub fn new(method: Method) -> Self {
        EvalConfig {
            method,
            max_filters: DEFAULT_MAX_FILTERS,
            lr: DEFAULT_LEARNING_RATE,
            random_seeds: DEFAULT_RANDOM_SEEDS.to_vec(),
            quantile: DEFAULT_QUANTILE,
        }
    }

    pub fn validate(&self, num_filters: usize) -> Result<()> {
        if self.max_filters == 0 || self.max_filters > num_filters {
            return Err(Error::Config(format!(
                "max_filters must lie in 1..={num_filters}, got {}",
                self.max_filters
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.method == Method::Random && self.random_seeds.is_empty() {
            return Err(Error::Config("random method needs at least one seed".into()));
        }
        Ok(())
    }

    /// Rankings averaged per sample: the seed count for random, else 1.
    pub fn num_seeds(&self) -> usize {
        match self.method {
            Method::Random => self.random_seeds.len(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Misclassified {
    pub sample: Sample,
    pub predicted: usize,
}

/// Samples whose argmax prediction differs from the label, in dataset order.
pub fn collect_misclassified(net: &ToyCnn, dataset: &SyntheticDataset) -> Result<Vec<Misclassified>> {
    let predictions: Vec<usize> = dataset
        .samples
        .par_iter()
        .map(|s| net.forward(&s.image).map(|p| p.argmax()))
        .collect::<Result<_>>()?;
    Ok(dataset
        .samples
        .iter()
        .zip(predictions)
        .filter(|(s, p)| *p != s.label)
        .map(|(s, p)| Misclassified {
            sample: s.clone(),
            predicted: p,
        })
        .collect())
}

/// Saliency profile of every sample of `dataset`, one row per sample.
pub fn collect_profiles(net: &ToyCnn, dataset: &SyntheticDataset) -> Result<SaliencyMatrix> {
    let rows: Vec<Vec<f64>> = dataset
        .samples
        .par_iter()
        .map(|s| net.filter_saliency_profile(&s.image, s.label))
        .collect::<Result<_>>()?;
    SaliencyMatrix::from_rows(&rows, net.architecture().filter_meta())
}

/// Produces the per-sample filter rankings for one method.
#[derive(Debug, Clone)]
pub enum Ranker<'a> {
    Pot(&'a TailModel),
    Zscore(&'a TailModel),
    Random(Vec<u64>),
    LastGroup,
}

impl<'a> Ranker<'a> {
    /// POT and z-score need a tail model fitted at `config.quantile`.
    pub fn from_config(config: &EvalConfig, model: Option<&'a TailModel>) -> Result<Self> {
        let need_model = || -> Result<&'a TailModel> {
            let m =
                model.ok_or_else(|| Error::Config(format!("method {} needs a tail model", config.method)))?;
            if m.quantile != config.quantile {
                return Err(Error::Config(format!(
                    "tail model was fitted at quantile {}, config asks for {}",
                    m.quantile, config.quantile
                )));
            }
            Ok(m)
        };
        Ok(match config.method {
            Method::Pot => Ranker::Pot(need_model()?),
            Method::Zscore => Ranker::Zscore(need_model()?),
            Method::Random => Ranker::Random(config.random_seeds.clone()),
            Method::LastGroup => Ranker::LastGroup,
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Ranker::Pot(_) => Method::Pot,
            Ranker::Zscore(_) => Method::Zscore,
            Ranker::Random(_) => Method::Random,
            Ranker::LastGroup => Method::LastGroup,
        }
    }

    /// Rankings for one sample given its profile. Random permutations are
    /// seeded by `(seed, sample index)`, so they do not depend on which
    /// other samples are evaluated or in what order.
    pub fn rankings(&self, net: &ToyCnn, sample: &Sample, profile: &[f64]) -> Result<Vec<FilterRanking>> {
        Ok(match self {
            Ranker::Pot(m) => vec![rank(&pot_saliency(profile, m)?, profile, Method::Pot)?],
            Ranker::Zscore(m) => vec![rank(&zscore_saliency(profile, m)?, profile, Method::Zscore)?],
            Ranker::Random(seeds) => seeds
                .iter()
                .map(|&seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(sample.index as u64);
                    random_ranking(net.num_filters(), &mut rng)
                })
                .collect(),
            Ranker::LastGroup => {
                let arch = net.architecture();
                vec![last_group_ranking(
                    profile,
                    &arch.filter_meta(),
                    &arch.last_group(),
                )?]
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub k: usize,
    pub incorrect_conf: f64,
    pub correct_conf: f64,
    pub frac_corrected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: Method,
    pub experiment: Experiment,
    pub n_samples: usize,
    pub n_seeds: usize,
    /// One row for each `k = 0..=max_filters`.
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, k: usize) -> Option<&EvalRow> {
        self.rows.get(k)
    }
}

/// Zeroes the top `k` filters of each sample's ranking.
pub fn pruning_sweep(
    net: &ToyCnn,
    misclassified: &[Misclassified],
    ranker: &Ranker<'_>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    sweep(net, misclassified, ranker, config, Experiment::Prune)
}

/// Applies one step of size `config.lr` to the top `k` filters. The gradient
/// is taken once per sample at the unmodified network.
pub fn finetune_sweep(
    net: &ToyCnn,
    misclassified: &[Misclassified],
    ranker: &Ranker<'_>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    sweep(net, misclassified, ranker, config, Experiment::Finetune)
}

pub fn run_sweep(
    experiment: Experiment,
    net: &ToyCnn,
    misclassified: &[Misclassified],
    ranker: &Ranker<'_>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    sweep(net, misclassified, ranker, config, experiment)
}

type Curve = Vec<[f64; 3]>;

fn sweep(
    net: &ToyCnn,
    misclassified: &[Misclassified],
    ranker: &Ranker<'_>,
    config: &EvalConfig,
    experiment: Experiment,
) -> Result<EvalReport> {
    config.validate(net.num_filters())?;
    if ranker.method() != config.method {
        return Err(Error::Config(format!(
            "ranker is {} but config asks for {}",
            ranker.method(),
            config.method
        )));
    }
    let curves: Vec<Vec<Curve>> = misclassified
        .par_iter()
        .map(|m| sample_curves(net, m, ranker, config, experiment))
        .collect::<Result<_>>()?;
    let trials: Vec<&Curve> = curves.iter().flatten().collect();

    let rows = (0..=config.max_filters)
        .map(|k| {
            let mean = |metric: usize| {
                // Sorting first makes the sum independent of sample order.
                let mut v: Vec<f64> = trials.iter().map(|c| c[k][metric]).collect();
                v.sort_by(f64::total_cmp);
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            EvalRow {
                k,
                incorrect_conf: mean(0),
                correct_conf: mean(1),
                frac_corrected: mean(2),
            }
        })
        .collect();
    Ok(EvalReport {
        method: config.method,
        experiment,
        n_samples: misclassified.len(),
        n_seeds: config.num_seeds(),
        rows,
    })
}

fn sample_curves(
    net: &ToyCnn,
    m: &Misclassified,
    ranker: &Ranker<'_>,
    config: &EvalConfig,
    experiment: Experiment,
) -> Result<Vec<Curve>> {
    let s = &m.sample;
    let grad = net.backward(&s.image, s.label)?.values;
    let profile = net.profile_from_gradient(&grad);
    let arch = net.architecture();
    let metrics = |state: &ToyCnn| -> Result<[f64; 3]> {
        let probs = state.forward(&s.image)?.probs;
        let corrected = if argmax(&probs) == s.label { 1.0 } else { 0.0 };
        Ok([probs[m.predicted], probs[s.label], corrected])
    };

    let mut out = Vec::new();
    for ranking in ranker.rankings(net, s, &profile)? {
        let mut state = net.clone();
        let mut curve = Vec::with_capacity(config.max_filters + 1);
        curve.push(metrics(&state)?);
        for j in ranking.top(config.max_filters) {
            let (kernel, bias) = arch.filter_params(j)?;
            let params = state.params_mut();
            for i in kernel.chain(std::iter::once(bias)) {
                params[i] = match experiment {
                    Experiment::Prune => 0.0,
                    Experiment::Finetune => params[i] - config.lr * grad[i],
                };
            }
            curve.push(metrics(&state)?);
        }
        out.push(curve);
    }
    Ok(out)
}

/// Layer-group shares of the top `k` filters pooled over every sample's
/// rankings. With no samples every group is reported at 0.
pub fn attribution_report(
    net: &ToyCnn,
    misclassified: &[Misclassified],
    ranker: &Ranker<'_>,
    k: usize,
) -> Result<Vec<GroupShare>> {
    let filters = net.architecture().filter_meta();
    if k == 0 || k > filters.len() {
        return Err(Error::Config(format!(
            "attribution k must lie in 1..={}, got {k}",
            filters.len()
        )));
    }
    let per_sample: Vec<Vec<FilterRanking>> = misclassified
        .par_iter()
        .map(|m| {
            let profile = net.filter_saliency_profile(&m.sample.image, m.sample.label)?;
            ranker.rankings(net, &m.sample, &profile)
        })
        .collect::<Result<_>>()?;
    let rankings: Vec<FilterRanking> = per_sample.into_iter().flatten().collect();
    if rankings.is_empty() {
        let mut shares: Vec<GroupShare> = Vec::new();
        for f in &filters {
            if !shares.iter().any(|g| g.layer_group == f.layer_group) {
                shares.push(GroupShare {
                    layer_group: f.layer_group.clone(),
                    percent: 0.0,
                });
            }
        }
        return Ok(shares);
    }
    group_attribution(&rankings, k, &filters)
}

/// Writes `method,k,incorrect_conf,correct_conf,frac_corrected,n_samples,n_seeds`.
pub fn write_report_csv<W: Write>(out: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "k",
        "incorrect_conf",
        "correct_conf",
        "frac_corrected",
        "n_samples",
        "n_seeds",
    ])?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.method.to_string(),
                row.k.to_string(),
                row.incorrect_conf.to_string(),
                row.correct_conf.to_string(),
                row.frac_corrected.to_string(),
                r.n_samples.to_string(),
                r.n_seeds.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<report csv>", e))?;
    Ok(())
}

/// Writes `method,k,layer_group,percent`.
pub fn write_attribution_csv<W: Write>(out: W, tables: &[(Method, usize, Vec<GroupShare>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "k", "layer_group", "percent"])?;
    for (method, k, shares) in tables {
        for s in shares {
            w.write_record([
                method.to_string(),
                k.to_string(),
                s.layer_group.clone(),
                s.percent.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<attribution csv>", e))?;
    Ok(())
}
