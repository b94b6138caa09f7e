//! Filter scoring and ranking: z-score baseline, POT tail probability, and
//! layer-group attribution of top-ranked filters.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::FilterMeta;
use crate::tail::TailModel;

/// Floor applied to a filter's standard deviation before dividing.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Zscore,
    Pot,
    Random,
    #[serde(rename = "lastgroup")]
    LastGroup,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Pot, Method::Zscore, Method::Random, Method::LastGroup];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Zscore => "zscore",
            Method::Pot => "pot",
            Method::Random => "random",
            Method::LastGroup => "lastgroup",
        }
    }

    /// POT scores are probabilities (small is salient); everything else is
    /// ranked largest first.
    pub fn ascending(self) -> bool {
        matches!(self, Method::Pot)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Method::Zscore),
            "pot" => Ok(Method::Pot),
            "random" => Ok(Method::Random),
            "lastgroup" => Ok(Method::LastGroup),
            other => Err(Error::Validation(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedFilter {
    pub filter_id: usize,
    pub score: f64,
}

/// Filters in salience order, most salient first.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRanking {
    pub method: Method,
    pub entries: Vec<RankedFilter>,
}

impl FilterRanking {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn order(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.filter_id).collect()
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().take(k).map(|e| e.filter_id)
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape { expected, actual })
    }
}

/// `(s̄_j - μ_j) / max(σ_j, 1e-12)` for every filter.
pub fn zscore_saliency(profile: &[f64], model: &TailModel) -> Result<Vec<f64>> {
    check_len(model.num_filters(), profile.len())?;
    Ok(profile
        .iter()
        .zip(&model.filters)
        .map(|(&s, f)| (s - f.stats.mean) / f.stats.std.max(STD_FLOOR))
        .collect())
}

/// Standard normal survival function `P(Z > z)`.
pub fn normal_tail_probability(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Tail probability of each observed filter profile under the fitted model.
///
/// Above the threshold the GPD tail gives `(n/N)·(1 - G(s̄ - T))`. At or below
/// it the empirical survival `#{reference >= s̄} / N` is used, which never
/// drops under `n/N`, so the score is nonincreasing in `s̄` across the
/// threshold. Degenerate filters score 1.
pub fn pot_saliency(profile: &[f64], model: &TailModel) -> Result<Vec<f64>> {
    check_len(model.num_filters(), profile.len())?;
    Ok(profile
        .iter()
        .zip(&model.filters)
        .map(|(&s, f)| {
            if f.degenerate {
                return 1.0;
            }
            let n_total = f.stats.n_total as f64;
            if s > f.stats.threshold {
                let rate = f.stats.n_exceed as f64 / n_total;
                rate * f.params.survival(s - f.stats.threshold)
            } else {
                f.count_at_least(s) as f64 / n_total
            }
        })
        .collect())
}

/// Orders filters by score (ascending for POT, descending otherwise). Ties go
/// to the larger raw profile value, then to the smaller filter id.
pub fn rank(scores: &[f64], profile: &[f64], method: Method) -> Result<FilterRanking> {
    check_len(scores.len(), profile.len())?;
    if let Some((j, s)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::Validation(format!("filter {j} has non-finite score {s}")));
    }
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        let primary = if method.ascending() {
            scores[a].total_cmp(&scores[b])
        } else {
            scores[b].total_cmp(&scores[a])
        };
        primary
            .then_with(|| profile[b].total_cmp(&profile[a]))
            .then(a.cmp(&b))
    });
    Ok(FilterRanking {
        method,
        entries: ids
            .into_iter()
            .map(|j| RankedFilter {
                filter_id: j,
                score: scores[j],
            })
            .collect(),
    })
}

/// Filters of `group` by raw profile descending, then every other filter by
/// raw profile descending. Scores are the raw profile values.
pub fn last_group_ranking(profile: &[f64], filters: &[FilterMeta], group: &str) -> Result<FilterRanking> {
    check_len(filters.len(), profile.len())?;
    let in_group = |j: usize| filters[j].layer_group == group;
    let mut ids: Vec<usize> = (0..profile.len()).collect();
    ids.sort_by(|&a, &b| {
        in_group(b)
            .cmp(&in_group(a))
            .then_with(|| profile[b].total_cmp(&profile[a]))
            .then(a.cmp(&b))
    });
    Ok(FilterRanking {
        method: Method::LastGroup,
        entries: ids
            .into_iter()
            .map(|j| RankedFilter {
                filter_id: j,
                score: profile[j],
            })
            .collect(),
    })
}

/// A uniformly random permutation; the score is the filter's position.
pub fn random_ranking<R: rand::Rng + ?Sized>(num_filters: usize, rng: &mut R) -> FilterRanking {
    use rand::seq::SliceRandom;
    let mut ids: Vec<usize> = (0..num_filters).collect();
    ids.shuffle(rng);
    FilterRanking {
        method: Method::Random,
        entries: ids
            .into_iter()
            .enumerate()
            .map(|(pos, j)| RankedFilter {
                filter_id: j,
                score: pos as f64,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupShare {
    pub layer_group: String,
    pub percent: f64,
}

/// Share of top-`k` slots held by each layer group, pooled over all
/// rankings. Groups appear in the order they first occur in `filters`, and
/// groups that never make the top `k` are reported at 0.
pub fn group_attribution(
    rankings: &[FilterRanking],
    k: usize,
    filters: &[FilterMeta],
) -> Result<Vec<GroupShare>> {
    if rankings.is_empty() {
        return Err(Error::EmptyInput("group attribution needs at least one ranking"));
    }
    if k == 0 || k > filters.len() {
        return Err(Error::Config(format!(
            "attribution k must lie in 1..={}, got {k}",
            filters.len()
        )));
    }
    let mut groups: Vec<&str> = Vec::new();
    let mut group_of = Vec::with_capacity(filters.len());
    for f in filters {
        let idx = match groups.iter().position(|g| *g == f.layer_group) {
            Some(i) => i,
            None => {
                groups.push(&f.layer_group);
                groups.len() - 1
            }
        };
        group_of.push(idx);
    }
    let mut counts = vec![0usize; groups.len()];
    let mut total = 0usize;
    for r in rankings {
        check_len(filters.len(), r.len())?;
        for j in r.top(k) {
            counts[group_of[j]] += 1;
            total += 1;
        }
    }
    Ok(groups
        .into_iter()
        .zip(counts)
        .map(|(g, c)| GroupShare {
            layer_group: g.to_string(),
            percent: 100.0 * c as f64 / total as f64,
        })
        .collect())
}

/// Writes `rank,filter_id,layer_name,layer_group,score,method` rows for the
/// first `top` entries (all of them when `None`).
pub fn write_ranking_csv<W: Write>(
    out: W,
    ranking: &FilterRanking,
    filters: &[FilterMeta],
    top: Option<usize>,
) -> Result<()> {
    check_len(filters.len(), ranking.len())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "rank",
        "filter_id",
        "layer_name",
        "layer_group",
        "score",
        "method",
    ])?;
    let take = top.unwrap_or(ranking.len());
    for (pos, e) in ranking.entries.iter().take(take).enumerate() {
        let meta = &filters[e.filter_id];
        w.write_record([
            (pos + 1).to_string(),
            e.filter_id.to_string(),
            meta.layer_name.clone(),
            meta.layer_group.clone(),
            e.score.to_string(),
            ranking.method.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<ranking csv>", e))?;
    Ok(())
}
