//! Finite-difference gradient suites over the primitives and every loss term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::config::{Ablation, TrainConfig};
use crate::error::{numeric_err, Result};
use crate::gradcheck::{grad_check, grad_check_with, Coverage, DEFAULT_STEP};
use crate::model::Model;
use crate::synth::{FeatureMap, RawGrid};
use crate::tensor::Tensor;
use crate::trainer::{batch_objective, Terms};

pub const ELEMENTWISE_TOL: f64 = 1e-6;
pub const SPECTRAL_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
/// Smallest eigenvalue or singular value gap in spectral trials.
pub const SPECTRAL_GAP: f64 = 1e-2;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub checks: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;
type Inputs = fn(&mut ChaCha8Rng, usize, usize) -> Vec<Tensor>;

struct Op {
    name: &'static str,
    inputs: Inputs,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn any(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Tensor> {
    vec![uniform(rng, &[r, c], -2.0, 2.0)]
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Tensor> {
    vec![uniform(rng, &[r, c], 0.5, 2.0)]
}

/// Smallest row spread, row norm and row separation for ops with kinks or
/// singular points at coinciding or constant rows.
const SPREAD: f64 = 0.3;

fn well_spread(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Tensor> {
    loop {
        let t = uniform(rng, &[r, c], -2.0, 2.0);
        let row = |i: usize| t.row(i).to_vec();
        let std = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let rows_ok = (0..r).all(|i| {
            let v = row(i);
            (c == 1 || std(&v) >= SPREAD) && dist(&v, &vec![0.0; c]) >= SPREAD
        });
        let apart = (0..r).all(|i| (0..i).all(|j| dist(&row(i), &row(j)) >= SPREAD));
        if rows_ok && apart {
            return vec![t];
        }
    }
}

fn two(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Tensor> {
    vec![uniform(rng, &[r, c], -2.0, 2.0), uniform(rng, &[r, c], -2.0, 2.0)]
}

fn over_positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Tensor> {
    vec![uniform(rng, &[r, c], -2.0, 2.0), uniform(rng, &[r, c], 0.5, 2.0)]
}

fn with_row(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Tensor> {
    vec![uniform(rng, &[r, c], -2.0, 2.0), uniform(rng, &[1, c], -2.0, 2.0)]
}

fn with_col(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Tensor> {
    vec![uniform(rng, &[r, c], -2.0, 2.0), uniform(rng, &[r, 1], -2.0, 2.0)]
}

fn chain(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Tensor> {
    let k = rng.random_range(1..=4);
    vec![
        uniform(rng, &[r, c], -2.0, 2.0),
        uniform(rng, &[c, k], -2.0, 2.0),
        uniform(rng, &[1, k], -2.0, 2.0),
    ]
}

fn primitive_ops() -> Vec<Op> {
    macro_rules! op {
        ($name:expr, $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
            Op {
                name: $name,
                inputs: $inputs,
                build: |$g: &mut Graph, $v: &[Var]| $body,
            }
        };
    }
    vec![
        op!("add", two, |g, v| g.add(v[0], v[1])),
        op!("sub", two, |g, v| g.sub(v[0], v[1])),
        op!("mul", two, |g, v| g.mul(v[0], v[1])),
        op!("div", over_positive, |g, v| g.div(v[0], v[1])),
        op!("add_row", with_row, |g, v| g.add(v[0], v[1])),
        op!("mul_col", with_col, |g, v| g.mul(v[0], v[1])),
        op!("scale", any, |g, v| g.scale(v[0], -1.7)),
        op!("add_scalar", any, |g, v| g.add_scalar(v[0], 0.3)),
        op!("one_minus", any, |g, v| g.one_minus(v[0])),
        op!("matmul", chain, |g, v| g.matmul(v[0], v[1])),
        op!("linear", chain, |g, v| g.linear(v[0], v[1], Some(v[2]))),
        op!("transpose", any, |g, v| g.transpose(v[0])),
        op!("reshape", any, |g, v| {
            let n = g.value(v[0]).numel();
            g.reshape(v[0], &[n, 1])
        }),
        op!("sigmoid", any, |g, v| g.sigmoid(v[0])),
        op!("tanh", any, |g, v| g.tanh(v[0])),
        op!("gelu", any, |g, v| g.gelu(v[0])),
        op!("exp", any, |g, v| g.exp(v[0])),
        op!("log", positive, |g, v| g.log(v[0])),
        op!("sqrt", positive, |g, v| g.sqrt(v[0])),
        op!("square", any, |g, v| g.square(v[0])),
        op!("softmax0", any, |g, v| g.softmax(v[0], 0)),
        op!("softmax1", any, |g, v| g.softmax(v[0], 1)),
        op!("log_softmax1", any, |g, v| g.log_softmax(v[0], 1)),
        op!("sum_axis0", any, |g, v| g.sum_axis(v[0], 0)),
        op!("mean_axis1", any, |g, v| g.mean_axis(v[0], 1)),
        op!("mean_all", any, |g, v| g.mean_all(v[0])),
        op!("var_axis1", any, |g, v| g.var_axis(v[0], 1)),
        op!("layer_norm", well_spread, |g, v| g.layer_norm(v[0])),
        op!("concat0", two, |g, v| g.concat(&[v[0], v[1]], 0)),
        op!("concat1", two, |g, v| g.concat(&[v[0], v[1]], 1)),
        op!("slice", any, |g, v| g.slice(v[0], 0, 0, 1)),
        op!("gather", any, |g, v| g.gather(v[0], 0, &[0, 0])),
        op!("norm", well_spread, |g, v| g.norm(v[0])),
        op!("l2_normalize_rows", well_spread, |g, v| g.l2_normalize_rows(v[0])),
        op!("pairwise_dist", well_spread, |g, v| g.pairwise_dist(v[0])),
        op!("mse", two, |g, v| g.mse(v[0], v[1])),
    ]
}

/// `Σ W ⊙ out` for a fixed random `W` matching the output shape.
fn weighted_check(build: Build, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let w = uniform(rng, g.shape(out), -1.0, 1.0);
    grad_check(
        |g, v| {
            let out = build(g, v)?;
            let w = g.constant(w.clone());
            let p = g.mul(out, w)?;
            g.sum_all(p)
        },
        inputs,
        DEFAULT_STEP,
    )
}

/// Randomized trials cycling through every elementwise, reduction and
/// structural primitive on shapes up to 4 × 4.
pub fn primitive_suite(trials: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let ops = primitive_ops();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SuiteResult> = ops
        .iter()
        .map(|o| SuiteResult {
            name: o.name.to_string(),
            checks: 0,
            max_rel_err: 0.0,
            tol: ELEMENTWISE_TOL,
        })
        .collect();
    for t in 0..trials {
        let i = t % ops.len();
        let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let inputs = (ops[i].inputs)(&mut rng, r, c);
        let err = weighted_check(ops[i].build, &inputs, &mut rng)?;
        out[i].checks += 1;
        out[i].max_rel_err = out[i].max_rel_err.max(err);
    }
    Ok(out)
}

fn min_gap(sorted: &[f64]) -> f64 {
    sorted.windows(2).map(|w| (w[1] - w[0]).abs()).fold(f64::INFINITY, f64::min)
}

fn symmetric(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let a = uniform(rng, &[n, n], -1.0, 1.0);
    Tensor::from_fn(&[n, n], |i| 0.5 * (a.data()[i] + a.data()[(i % n) * n + i / n]))
}

/// Eigen and singular value decompositions on random matrices whose spectra
/// are separated by at least [`SPECTRAL_GAP`].
pub fn spectral_suite(trials: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eig = SuiteResult {
        name: "sym_eig".into(),
        checks: 0,
        max_rel_err: 0.0,
        tol: SPECTRAL_TOL,
    };
    let mut svd = SuiteResult {
        name: "svd".into(),
        ..eig.clone()
    };
    while eig.checks < trials {
        let n = rng.random_range(2..=5);
        let m = symmetric(&mut rng, n);
        let (vals, _) = crate::linalg::sym_eig(&m)?;
        if min_gap(&vals) < SPECTRAL_GAP {
            continue;
        }
        let err = weighted_check(
            |g, v| {
                let t = g.transpose(v[0])?;
                let s = g.add(v[0], t)?;
                let s = g.scale(s, 0.5)?;
                let (vals, vecs) = g.sym_eig(s)?;
                let vals = g.reshape(vals, &[1, vecs_len(g, vecs)])?;
                g.concat(&[vals, vecs], 0)
            },
            &[m],
            &mut rng,
        )?;
        eig.checks += 1;
        eig.max_rel_err = eig.max_rel_err.max(err);
    }
    while svd.checks < trials {
        let n = rng.random_range(2..=5);
        let m = uniform(&mut rng, &[n, n], -1.0, 1.0);
        let (_, s, _) = crate::linalg::svd_small(&m)?;
        let mut sorted = s.clone();
        sorted.push(0.0);
        if min_gap(&sorted) < SPECTRAL_GAP {
            continue;
        }
        let err = weighted_check(
            |g, v| {
                let (u, s, vt) = g.svd(v[0])?;
                let n = g.shape(u)[0];
                let s = g.reshape(s, &[1, n])?;
                g.concat(&[u, s, vt], 0)
            },
            &[m],
            &mut rng,
        )?;
        svd.checks += 1;
        svd.max_rel_err = svd.max_rel_err.max(err);
    }
    Ok(vec![eig, svd])
}

fn vecs_len(g: &Graph, vecs: Var) -> usize {
    g.shape(vecs)[1]
}

/// Small configuration for loss-level checks: 16 cells, 4 slots, rank 2.
pub fn micro_config() -> TrainConfig {
    TrainConfig {
        grid_size: 16,
        patch: 4,
        channels: 8,
        k_slots: 4,
        c_slot: 8,
        iters: 2,
        dec_hidden: 8,
        heads: 2,
        rank: 2,
        c_cond: 8,
        mix_depth: 1,
        d_depth: 4,
        n_rows: 2,
        seed: 11,
        ..TrainConfig::desk()
    }
}

/// Two random (query, gallery) feature pairs for a micro model.
pub fn micro_pairs(model: &Model, seed: u64) -> Result<Vec<(FeatureMap, FeatureMap)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.cfg.grid_size;
    let grid = |rng: &mut ChaCha8Rng| {
        let mut raw = RawGrid::filled(n, 0.0);
        for x in raw.data.iter_mut() {
            *x = rng.random_range(0.0..1.0);
        }
        raw
    };
    (0..2)
        .map(|_| {
            let q = grid(&mut rng);
            let g = grid(&mut rng);
            Ok((model.featurize(&q)?, model.featurize(&g)?))
        })
        .collect()
}

pub const LOSS_TERMS: [&str; 6] = ["rec", "cacs", "struct", "align", "distill", "total"];

/// Parameter jitter used to move the micro model off its near-degenerate
/// initialization, where all slot maps coincide.
const LOSS_JITTER: f64 = 0.5;
const LOSS_ATTEMPTS: u64 = 64;

/// Smallest gap between consecutive non-trivial Laplacian eigenvalues of the
/// concept graphs built for `pairs`.
pub fn concept_gap(model: &Model, pairs: &[(&FeatureMap, &FeatureMap)]) -> Result<f64> {
    let mut gap = f64::INFINITY;
    for (fq, fg) in pairs {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        let tq = g.constant(fq.tokens.clone());
        let tg = g.constant(fg.tokens.clone());
        let sq = model.run_slots(&mut g, &b, tq, None)?;
        let sg = model.run_slots(&mut g, &b, tg, None)?;
        let selq = model.select(&mut g, &b, sq.a_d, sg.a_d)?;
        let selg = model.select(&mut g, &b, sg.a_d, sq.a_d)?;
        let s = crate::csrr::struct_loss(&mut g, selq.a_hat, selg.a_hat, model.cfg.rank)?;
        for sp in [&s.embed_q.spectrum, &s.embed_g.spectrum] {
            gap = gap.min(min_gap(&sp[1..]));
        }
    }
    Ok(gap)
}

/// A micro model with jittered parameters and a 2-pair batch whose concept
/// spectra are separated by at least [`SPECTRAL_GAP`].
pub fn loss_check_point(seed: u64) -> Result<(Model, Vec<(FeatureMap, FeatureMap)>)> {
    let base = Model::new(micro_config().with_ablation(Ablation::FULL))?;
    let noise = Normal::new(0.0, LOSS_JITTER).map_err(|e| numeric_err!("{e}"))?;
    for attempt in 0..LOSS_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(LOSS_ATTEMPTS).wrapping_add(attempt));
        let mut model = base.clone();
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for n in names {
            for x in model.params.get_mut(&n)?.data_mut() {
                *x += noise.sample(&mut rng);
            }
        }
        let feats = micro_pairs(&model, rng.random())?;
        let pairs: Vec<(&FeatureMap, &FeatureMap)> = feats.iter().map(|(q, g)| (q, g)).collect();
        if concept_gap(&model, &pairs)? >= SPECTRAL_GAP {
            return Ok((model, feats));
        }
    }
    Err(numeric_err!("no micro check point with separated concept spectra in {LOSS_ATTEMPTS} attempts"))
}

/// Checks each loss term against every parameter tensor of a micro model on a
/// 2-pair batch. `per_input` caps the probed entries per tensor.
pub fn loss_suite(tol: f64, per_input: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let (model, feats) = loss_check_point(seed)?;
    let pairs: Vec<(&FeatureMap, &FeatureMap)> = feats.iter().map(|(q, g)| (q, g)).collect();
    let inputs = model.params.tensors();
    let info_weight = model.cfg.lambda2;
    LOSS_TERMS
        .iter()
        .map(|&term| {
            let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
                let b = model.params.bind_vars(v)?;
                let obj = batch_objective(&model, g, &b, &pairs, None, info_weight)?;
                pick(term, obj.total, &obj.terms)
            };
            let err = grad_check_with(f, &inputs, DEFAULT_STEP, Coverage::Sample { per_input, seed })?;
            Ok(SuiteResult {
                name: term.to_string(),
                checks: inputs.iter().map(|t| t.numel().min(per_input)).sum(),
                max_rel_err: err,
                tol,
            })
        })
        .collect()
}

fn pick(term: &str, total: Var, t: &Terms) -> Result<Var> {
    let v = match term {
        "rec" => t.rec,
        "cacs" => t.cacs,
        "struct" => t.structure,
        "align" => Some(t.align),
        "distill" => t.distill,
        _ => Some(total),
    };
    v.ok_or_else(|| numeric_err!("loss term {term} is not active on the micro batch"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_match_finite_differences() {
        for r in primitive_suite(1000, 3).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.checks >= 27, "{r:?}");
        }
    }

    #[test]
    fn spectral_backward_matches_finite_differences() {
        for r in spectral_suite(30, 5).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn check_point_spectra_are_separated() {
        let (model, feats) = loss_check_point(3).unwrap();
        let pairs: Vec<(&FeatureMap, &FeatureMap)> = feats.iter().map(|(q, g)| (q, g)).collect();
        assert!(concept_gap(&model, &pairs).unwrap() >= SPECTRAL_GAP);
    }

    #[test]
    fn every_loss_term_matches_finite_differences() {
        let rs = loss_suite(LOSS_TOL, 4, 1).unwrap();
        assert_eq!(rs.len(), LOSS_TERMS.len());
        for r in rs {
            assert!(r.passed(), "{r:?}");
        }
    }
}
