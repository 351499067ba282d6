//! Retrieval, metrics and the evaluation report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::model::{Mode, Model};
use crate::synth::{ScenePair, LOCATION_SPACING_M};

/// Default SDM length scale: one lattice cell.
pub const DEFAULT_SDM_SIGMA_M: f64 = LOCATION_SPACING_M;

/// Gallery descriptors with their location ids and coordinates.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    descriptors: Vec<Vec<f64>>,
    ids: Vec<usize>,
    coords: BTreeMap<usize, (f64, f64)>,
}

impl RetrievalIndex {
    pub fn new(descriptors: Vec<Vec<f64>>, ids: Vec<usize>, coords: Vec<(f64, f64)>) -> Result<Self> {
        if descriptors.len() != ids.len() || ids.len() != coords.len() {
            return Err(input_err!(
                "index sizes disagree: {} descriptors, {} ids, {} coordinates",
                descriptors.len(),
                ids.len(),
                coords.len()
            ));
        }
        let unique: BTreeSet<usize> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(input_err!("gallery ids must be unique"));
        }
        for (d, id) in descriptors.iter().zip(&ids) {
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(input_err!("gallery descriptor {id} has norm {n}"));
            }
            if d.len() != descriptors[0].len() {
                return Err(input_err!("gallery descriptor {id} has length {}", d.len()));
            }
        }
        let coords = ids.iter().copied().zip(coords).collect();
        Ok(RetrievalIndex { descriptors, ids, coords })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn coords(&self) -> &BTreeMap<usize, (f64, f64)> {
        &self.coords
    }

    /// The `k` most similar gallery ids with cosine similarities, descending;
    /// equal similarities are ordered by ascending id.
    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(input_err!("retrieval index is empty"));
        }
        if k > self.len() {
            return Err(input_err!("k = {k} exceeds gallery size {}", self.len()));
        }
        if query.len() != self.descriptors[0].len() {
            return Err(input_err!(
                "query length {} vs descriptor length {}",
                query.len(),
                self.descriptors[0].len()
            ));
        }
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(usize, f64)> = self
            .descriptors
            .iter()
            .zip(&self.ids)
            .map(|(d, &id)| {
                let dot: f64 = d.iter().zip(query).map(|(a, b)| a * b).sum();
                (id, if qn > 0.0 { dot / qn } else { 0.0 })
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Full ranking of gallery ids for `query`.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<usize>> {
        Ok(self.retrieve(query, self.len())?.into_iter().map(|(id, _)| id).collect())
    }
}

fn truth_rank(ranking: &[usize], truth: usize) -> Result<usize> {
    ranking
        .iter()
        .position(|&id| id == truth)
        .map(|p| p + 1)
        .ok_or_else(|| input_err!("truth id {truth} is not in the gallery"))
}

fn check_lengths(rankings: &[Vec<usize>], n: usize) -> Result<()> {
    if rankings.is_empty() {
        return Err(input_err!("no queries"));
    }
    if rankings.len() != n {
        return Err(input_err!("{} rankings vs {n} query labels", rankings.len()));
    }
    Ok(())
}

/// Fraction of queries whose truth is among the first `k` results.
pub fn recall_at_k(rankings: &[Vec<usize>], truths: &[usize], k: usize) -> Result<f64> {
    check_lengths(rankings, truths.len())?;
    let mut hits = 0;
    for (r, &t) in rankings.iter().zip(truths) {
        if truth_rank(r, t)? <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / truths.len() as f64)
}

/// Mean reciprocal rank of the single true item.
pub fn average_precision(rankings: &[Vec<usize>], truths: &[usize]) -> Result<f64> {
    check_lengths(rankings, truths.len())?;
    let mut s = 0.0;
    for (r, &t) in rankings.iter().zip(truths) {
        s += 1.0 / truth_rank(r, t)? as f64;
    }
    Ok(s / truths.len() as f64)
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn coord_of(coords: &BTreeMap<usize, (f64, f64)>, id: usize) -> Result<(f64, f64)> {
    coords
        .get(&id)
        .copied()
        .ok_or_else(|| input_err!("no coordinates for gallery id {id}"))
}

/// Rank-weighted spatial score of one ranking, given its result distances.
pub fn sdm_from_distances(d: &[f64], sigma: f64) -> f64 {
    let k = d.len();
    let norm = (k * (k + 1)) as f64 / 2.0;
    d.iter()
        .enumerate()
        .map(|(i, di)| (k - i) as f64 / norm * (-di / sigma).exp())
        .sum()
}

/// Mean SDM@k over queries located at `query_coords`.
pub fn sdm_at_k(
    rankings: &[Vec<usize>],
    query_coords: &[(f64, f64)],
    gallery_coords: &BTreeMap<usize, (f64, f64)>,
    k: usize,
    sigma: f64,
) -> Result<f64> {
    check_lengths(rankings, query_coords.len())?;
    if sigma <= 0.0 {
        return Err(input_err!("SDM length scale must be positive, got {sigma}"));
    }
    let mut s = 0.0;
    for (r, &qc) in rankings.iter().zip(query_coords) {
        if r.len() < k {
            return Err(input_err!("ranking has {} entries, SDM@{k} needs {k}", r.len()));
        }
        let d = r[..k]
            .iter()
            .map(|&id| Ok(distance(coord_of(gallery_coords, id)?, qc)))
            .collect::<Result<Vec<f64>>>()?;
        s += sdm_from_distances(&d, sigma);
    }
    Ok(s / rankings.len() as f64)
}

/// Mean meter distance between the top result and the query location.
pub fn dis_at_1(
    rankings: &[Vec<usize>],
    query_coords: &[(f64, f64)],
    gallery_coords: &BTreeMap<usize, (f64, f64)>,
) -> Result<f64> {
    check_lengths(rankings, query_coords.len())?;
    let mut s = 0.0;
    for (r, &qc) in rankings.iter().zip(query_coords) {
        let top = *r.first().ok_or_else(|| input_err!("empty ranking"))?;
        s += distance(coord_of(gallery_coords, top)?, qc);
    }
    Ok(s / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub ap: f64,
    pub sdm_at_3: f64,
    pub dis_at_1_m: f64,
    pub mode: Mode,
    pub fingerprint: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub mode: Mode,
    pub sdm_sigma_m: f64,
    /// Recorded in the report; evaluation itself draws no randomness.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub warnings: Vec<String>,
    /// Full ranking per query, in query order.
    pub rankings: Vec<Vec<usize>>,
}

/// Mean of `w(1−w)` over the routing weights of both views of every pair.
/// Lower is more polarized.
pub fn polarization(model: &Model, pairs: &[&ScenePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(input_err!("no pairs"));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for p in pairs {
        let (wq, wg) = model.routing(&model.featurize(&p.raw_q)?, &model.featurize(&p.raw_g)?)?;
        for w in wq.iter().chain(&wg) {
            s += w * (1.0 - w);
            n += 1;
        }
    }
    Ok(s / n as f64)
}

/// Mode the model can actually serve, plus any mismatch warnings.
pub fn effective_mode(model: &Model, mode: Mode) -> (Mode, Vec<String>) {
    let ab = model.cfg.ablation;
    match mode {
        Mode::Augmented if !ab.ocva => (
            Mode::Vanilla,
            vec!["model was trained without augmentation; augmented mode falls back to the vanilla path".into()],
        ),
        Mode::Vanilla if ab.ocva && !ab.rd => (
            Mode::Vanilla,
            vec!["model was trained without relational distillation; vanilla descriptors are untrained".into()],
        ),
        m => (m, vec![]),
    }
}

/// Retrieve every query of `pairs` against the gallery views of `pairs`.
pub fn evaluate(model: &Model, pairs: &[&ScenePair], opts: &EvalOptions) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(input_err!("evaluation split is empty"));
    }
    let (mode, warnings) = effective_mode(model, opts.mode);
    let describe = |raw| -> Result<Vec<f64>> { model.describe(&model.featurize(raw)?, mode) };
    let gallery = pairs.iter().map(|p| describe(&p.raw_g)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = pairs.iter().map(|p| p.location_id).collect();
    let coords: Vec<(f64, f64)> = pairs.iter().map(|p| p.coords).collect();
    let index = RetrievalIndex::new(gallery, ids.clone(), coords.clone())?;
    let rankings = pairs
        .iter()
        .map(|p| index.rank(&describe(&p.raw_q)?))
        .collect::<Result<Vec<_>>>()?;
    let k = |k: usize| k.min(index.len());
    let report = MetricsReport {
        r_at_1: recall_at_k(&rankings, &ids, 1)?,
        r_at_5: recall_at_k(&rankings, &ids, 5)?,
        r_at_10: recall_at_k(&rankings, &ids, 10)?,
        ap: average_precision(&rankings, &ids)?,
        sdm_at_3: sdm_at_k(&rankings, &coords, index.coords(), k(3), opts.sdm_sigma_m)?,
        dis_at_1_m: dis_at_1(&rankings, &coords, index.coords())?,
        mode: opts.mode,
        fingerprint: model.cfg.fingerprint(),
        seed: opts.seed,
    };
    Ok(Evaluation {
        report,
        warnings,
        rankings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn index3() -> RetrievalIndex {
        RetrievalIndex::new(
            vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])],
            vec![10, 11, 12],
            vec![(0.0, 0.0), (50.0, 0.0), (0.0, 50.0)],
        )
        .unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let r = index3().retrieve(&unit(&[0.0, 1.0]), 3).unwrap();
        assert_eq!(r[0].0, 11);
        assert!((r[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = RetrievalIndex::new(
            vec![unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0]), unit(&[0.0, 1.0, 1.0])],
            vec![5, 2, 9],
            vec![(0.0, 0.0); 3],
        )
        .unwrap();
        let r = idx.retrieve(&[1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 5, 9]);
        assert!(r.iter().all(|x| x.1 == 0.0));
    }

    #[test]
    fn index_contract_errors() {
        let empty = RetrievalIndex::new(vec![], vec![], vec![]).unwrap();
        assert!(empty.retrieve(&[1.0], 0).is_err());
        assert!(index3().retrieve(&[1.0, 0.0], 4).is_err());
        assert!(RetrievalIndex::new(vec![vec![2.0]], vec![0], vec![(0.0, 0.0)]).is_err());
        assert!(RetrievalIndex::new(vec![vec![1.0], vec![1.0]], vec![0, 0], vec![(0.0, 0.0); 2]).is_err());
    }

    #[test]
    fn rank_arithmetic() {
        let rankings = vec![vec![1, 7, 3]];
        assert_eq!(recall_at_k(&rankings, &[7], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&rankings, &[7], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&rankings, &[7]).unwrap(), 0.5);
        assert!(recall_at_k(&rankings, &[4], 1).is_err());
    }

    #[test]
    fn sdm_closed_form() {
        let s = sdm_from_distances(&[0.0, 50.0, 100.0], 50.0);
        let expect = (3.0 + 2.0 * (-1f64).exp() + (-2f64).exp()) / 6.0;
        assert!((s - expect).abs() < 1e-15);
        assert!((s - 0.645_182_3).abs() < 1e-7);
        assert!((sdm_from_distances(&[0.0; 3], 50.0) - 1.0).abs() < 1e-15);
        assert!(sdm_from_distances(&[1e6; 3], 50.0) < 1e-100);
    }

    #[test]
    fn distance_metrics_on_lattice() {
        let idx = index3();
        let rankings = vec![vec![11, 10, 12], vec![10, 11, 12]];
        let q = [(0.0, 0.0), (0.0, 0.0)];
        assert_eq!(dis_at_1(&rankings, &q, idx.coords()).unwrap(), 25.0);
        let s = sdm_at_k(&rankings, &q, idx.coords(), 3, 50.0).unwrap();
        assert!(s > 0.0 && s <= 1.0);
        let mut far = idx.coords().clone();
        far.remove(&12);
        assert!(sdm_at_k(&rankings, &q, &far, 3, 50.0).is_err());
    }
}
