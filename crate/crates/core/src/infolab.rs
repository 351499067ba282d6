//! Exact and estimated mutual information: discrete tables, Markov chains,
//! a KSG nearest-neighbour estimator, the InfoNCE bound and a feature probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::function::gamma::digamma;

use crate::autodiff::Graph;
use crate::error::{input_err, Result};
use crate::model::Model;
use crate::synth::{render_pair, DatasetManifest};
use crate::tensor::Tensor;
use crate::trainer::info_nce;

pub const MAX_ALPHABET: usize = 64;
const SUM_TOL: f64 = 1e-12;
pub const DPI_SLACK: f64 = 1e-12;

/// Probability table over two or three finite alphabets, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    shape: Vec<usize>,
    p: Vec<f64>,
}

impl JointTable {
    pub fn new(shape: Vec<usize>, p: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&shape.len()) {
            return Err(input_err!("joint table needs 2 or 3 variables, got {}", shape.len()));
        }
        if shape.iter().any(|&n| n == 0 || n > MAX_ALPHABET) {
            return Err(input_err!("alphabet sizes must lie in 1..={MAX_ALPHABET}, got {shape:?}"));
        }
        if shape.iter().product::<usize>() != p.len() {
            return Err(input_err!("{} probabilities for shape {shape:?}", p.len()));
        }
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(input_err!("probabilities must be finite and non-negative"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(input_err!("probabilities sum to {s}, not 1"));
        }
        Ok(JointTable { shape, p })
    }

    /// Normalize non-negative weights into a table.
    pub fn from_weights(shape: Vec<usize>, w: Vec<f64>) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) {
            return Err(input_err!("weights must have a positive sum"));
        }
        JointTable::new(shape, w.into_iter().map(|x| x / s).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for i in (0..self.shape.len() - 1).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    fn check_axes(&self, axes: &[usize]) -> Result<()> {
        for (i, &a) in axes.iter().enumerate() {
            if a >= self.shape.len() || axes[..i].contains(&a) {
                return Err(input_err!("invalid variable selection {axes:?} for {} variables", self.shape.len()));
            }
        }
        Ok(())
    }

    /// Marginal over `axes`, row-major in the given axis order.
    pub fn marginal(&self, axes: &[usize]) -> Result<Vec<f64>> {
        self.check_axes(axes)?;
        let strides = self.strides();
        let dims: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut out = vec![0.0; dims.iter().product()];
        for (flat, &v) in self.p.iter().enumerate() {
            let mut o = 0;
            for &a in axes {
                o = o * self.shape[a] + (flat / strides[a]) % self.shape[a];
            }
            out[o] += v;
        }
        Ok(out)
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `Σ p(a,b) ln p(a,b)/(p(a)p(b))` of an `na × nb` table.
fn mi_of_matrix(pab: &[f64], na: usize, nb: usize) -> f64 {
    let mut pa = vec![0.0; na];
    let mut pb = vec![0.0; nb];
    for i in 0..na {
        for j in 0..nb {
            pa[i] += pab[i * nb + j];
            pb[j] += pab[i * nb + j];
        }
    }
    let mut s = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let p = pab[i * nb + j];
            if p > 0.0 {
                s += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    s
}

pub fn exact_mi(t: &JointTable, a: usize, b: usize) -> Result<f64> {
    let m = t.marginal(&[a, b])?;
    Ok(mi_of_matrix(&m, t.shape[a], t.shape[b]))
}

/// `I(X;Y | Z) = Σ_z p(z) I(X;Y | Z=z)`.
pub fn exact_cond_mi(t: &JointTable, x: usize, y: usize, z: usize) -> Result<f64> {
    let m = t.marginal(&[z, x, y])?;
    let (nz, nx, ny) = (t.shape[z], t.shape[x], t.shape[y]);
    let mut s = 0.0;
    for k in 0..nz {
        let slice = &m[k * nx * ny..(k + 1) * nx * ny];
        let pz: f64 = slice.iter().sum();
        if pz > 0.0 {
            let cond: Vec<f64> = slice.iter().map(|v| v / pz).collect();
            s += pz * mi_of_matrix(&cond, nx, ny);
        }
    }
    Ok(s)
}

/// Head marginal followed by row-stochastic transitions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainSpec {
    pub head: Vec<f64>,
    pub transitions: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DpiReport {
    pub i_head_mid: f64,
    pub i_head_tail: f64,
    pub slack: f64,
    pub holds: bool,
}

impl ChainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.transitions.len() < 2 {
            return Err(input_err!("a chain needs at least 2 transitions, got {}", self.transitions.len()));
        }
        let s: f64 = self.head.iter().sum();
        if self.head.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > SUM_TOL {
            return Err(input_err!("head marginal is not a distribution"));
        }
        let mut from = self.head.len();
        for (k, t) in self.transitions.iter().enumerate() {
            if t.len() != from {
                return Err(input_err!("transition {k} has {} rows, expected {from}", t.len()));
            }
            let to = t.first().map_or(0, Vec::len);
            for row in t {
                let s: f64 = row.iter().sum();
                if row.len() != to || to == 0 || row.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > SUM_TOL {
                    return Err(input_err!("transition {k} is not row-stochastic"));
                }
            }
            from = to;
        }
        Ok(())
    }

    /// `p(head, stage)` after `stage` transitions, `n_head × n_stage`.
    pub fn joint_with(&self, stage: usize) -> Vec<Vec<f64>> {
        let mut cur: Vec<Vec<f64>> = (0..self.head.len())
            .map(|i| {
                let mut r = vec![0.0; self.head.len()];
                r[i] = self.head[i];
                r
            })
            .collect();
        for t in &self.transitions[..stage] {
            cur = cur
                .iter()
                .map(|row| {
                    let mut out = vec![0.0; t[0].len()];
                    for (a, &pa) in row.iter().enumerate() {
                        for (b, &tab) in t[a].iter().enumerate() {
                            out[b] += pa * tab;
                        }
                    }
                    out
                })
                .collect();
        }
        cur
    }

    fn mi_with(&self, stage: usize) -> f64 {
        let j = self.joint_with(stage);
        let nb = j[0].len();
        let flat: Vec<f64> = j.concat();
        mi_of_matrix(&flat, self.head.len(), nb)
    }
}

/// Exact `I(head; first stage)` and `I(head; last stage)`.
pub fn dpi_check(chain: &ChainSpec) -> Result<DpiReport> {
    chain.validate()?;
    let mid = chain.mi_with(1);
    let tail = chain.mi_with(chain.transitions.len());
    Ok(DpiReport {
        i_head_mid: mid,
        i_head_tail: tail,
        slack: mid - tail,
        holds: tail <= mid + DPI_SLACK,
    })
}

pub fn binary_symmetric(flip: f64) -> Vec<Vec<f64>> {
    vec![vec![1.0 - flip, flip], vec![flip, 1.0 - flip]]
}

fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.random_range(f64::EPSILON..1.0).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Uniformly random head and transitions over `states` symbols.
pub fn random_chain(rng: &mut impl Rng, states: usize, links: usize) -> ChainSpec {
    ChainSpec {
        head: random_simplex(rng, states),
        transitions: (0..links)
            .map(|_| (0..states).map(|_| random_simplex(rng, states)).collect())
            .collect(),
    }
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// KSG estimator (first form) on one sample set.
fn ksg(x: &[&[f64]], y: &[&[f64]], k: usize) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    let mut joint: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        joint.clear();
        joint.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (max_dist(x[i], x[j]).max(max_dist(y[i], y[j])), j)),
        );
        joint.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let eps = joint[k - 1].0;
        let nx = (0..n).filter(|&j| j != i && max_dist(x[i], x[j]) < eps).count();
        let ny = (0..n).filter(|&j| j != i && max_dist(y[i], y[j]) < eps).count();
        acc += digamma((nx + 1) as f64) + digamma((ny + 1) as f64);
    }
    digamma(k as f64) + digamma(n as f64) - acc / n as f64
}

const TIE_NOISE: f64 = 1e-10;

// Exact duplicates make the k-th neighbour distance zero and the digamma counts
// degenerate; a fixed-seed perturbation far below any real spacing breaks them.
fn break_ties(v: &[Vec<f64>], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    v.iter()
        .map(|row| row.iter().map(|&a| a + TIE_NOISE * (1.0 + a.abs()) * rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// k-nearest-neighbour MI estimate in nats with max-norm distances. With
/// `labels` the estimate is conditional: one estimate per label, weighted by
/// label frequency. Tied samples are separated by a negligible seeded jitter.
pub fn knn_mi(x: &[Vec<f64>], y: &[Vec<f64>], k: usize, labels: Option<&[usize]>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(input_err!("{} x samples vs {} y samples", x.len(), y.len()));
    }
    if k == 0 {
        return Err(input_err!("k must be positive"));
    }
    let strata: Vec<(usize, Vec<usize>)> = match labels {
        None => vec![(0, (0..x.len()).collect())],
        Some(l) => {
            if l.len() != x.len() {
                return Err(input_err!("{} labels for {} samples", l.len(), x.len()));
            }
            let mut m = std::collections::BTreeMap::<usize, Vec<usize>>::new();
            for (i, &lab) in l.iter().enumerate() {
                m.entry(lab).or_default().push(i);
            }
            m.into_iter().collect()
        }
    };
    let (x, y) = (&break_ties(x, 0x5eed_0001), &break_ties(y, 0x5eed_0002));
    let mut total = 0.0;
    for (label, idx) in &strata {
        if idx.len() < k + 1 {
            return Err(input_err!("stratum {label} has {} samples, need at least {}", idx.len(), k + 1));
        }
        let xs: Vec<&[f64]> = idx.iter().map(|&i| x[i].as_slice()).collect();
        let ys: Vec<&[f64]> = idx.iter().map(|&i| y[i].as_slice()).collect();
        total += idx.len() as f64 / x.len() as f64 * ksg(&xs, &ys, k);
    }
    Ok(total)
}

pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

#[derive(Clone, Debug, Serialize)]
pub struct NceBoundReport {
    pub rho: f64,
    pub tau: f64,
    pub batch: usize,
    pub batches: usize,
    pub mean_loss: f64,
    /// `ln N − mean InfoNCE loss`.
    pub bound: f64,
    pub exact_mi: f64,
    pub tolerance: f64,
    pub holds: bool,
    pub below_cap: bool,
}

/// Averages the one-directional InfoNCE loss with critic `x·y/τ` over batches
/// of correlated standard Gaussian pairs and compares `ln N − loss` with the
/// exact mutual information.
pub fn nce_bound_check(rho: f64, tau: f64, n: usize, batches: usize, tolerance: f64, seed: u64) -> Result<NceBoundReport> {
    if n < 2 || batches == 0 || !(-1.0 < rho && rho < 1.0) {
        return Err(input_err!("need batch >= 2, at least one batch and |rho| < 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (1.0 - rho * rho).sqrt();
    let mut sum = 0.0;
    for _ in 0..batches {
        let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            xs.push(a);
            ys.push(rho * a + s * e);
        }
        let mut g = Graph::new();
        let fx = g.constant(Tensor::new(vec![n, 1], xs)?);
        let fy = g.constant(Tensor::new(vec![n, 1], ys)?);
        let l = info_nce(&mut g, fx, fy, tau, false)?;
        sum += g.scalar_value(l);
    }
    let mean_loss = sum / batches as f64;
    let bound = (n as f64).ln() - mean_loss;
    let exact = gaussian_mi(rho);
    Ok(NceBoundReport {
        rho,
        tau,
        batch: n,
        batches,
        mean_loss,
        bound,
        exact_mi: exact,
        tolerance,
        holds: bound <= exact + tolerance,
        below_cap: bound <= (n as f64).ln(),
    })
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    /// Nuisance draws rendered per train location.
    pub draws: usize,
    pub k: usize,
    /// Dimension of the seeded random projection applied before estimation.
    pub dim: usize,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            draws: 16,
            k: 3,
            dim: 8,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MiReport {
    pub i_zq_zg: f64,
    pub i_zq_zg_given_y: f64,
    pub i_zhat_q_zhat_g: f64,
    pub i_zhat_q_zhat_g_given_y: f64,
    pub estimator: String,
    pub k: usize,
    pub projection_dim: usize,
    pub samples: usize,
    pub strata: usize,
}

impl MiReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

fn project(p: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..p.rows()).map(|r| p.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Pooled `Z` and `Ẑ` of both views over several nuisance draws of every train
/// location, projected to `dim` dimensions, fed to [`knn_mi`] with and without
/// the location label as condition.
pub fn mi_probe(model: &Model, manifest: &DatasetManifest, opts: &ProbeOptions) -> Result<MiReport> {
    let train = &manifest.splits.train;
    if train.is_empty() {
        return Err(input_err!("dataset has no train split"));
    }
    if opts.draws < opts.k + 1 {
        return Err(input_err!("{} draws per location cannot support k = {}", opts.draws, opts.k));
    }
    let c = model.cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let proj = Tensor::from_fn(&[opts.dim, c], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z / (opts.dim as f64).sqrt()
    });
    let (mut zq, mut zg, mut hq, mut hg, mut labels) = (vec![], vec![], vec![], vec![], vec![]);
    for &loc in train {
        for draw in 0..opts.draws as u64 {
            let pair = render_pair(&manifest.spec, loc, manifest.n_locations, draw)?;
            let iq = model.inspect(&model.featurize(&pair.raw_q)?)?;
            let ig = model.inspect(&model.featurize(&pair.raw_g)?)?;
            zq.push(project(&proj, &iq.z_pooled));
            zg.push(project(&proj, &ig.z_pooled));
            hq.push(project(&proj, &iq.z_hat_pooled));
            hg.push(project(&proj, &ig.z_hat_pooled));
            labels.push(loc);
        }
    }
    Ok(MiReport {
        i_zq_zg: knn_mi(&zq, &zg, opts.k, None)?,
        i_zq_zg_given_y: knn_mi(&zq, &zg, opts.k, Some(&labels))?,
        i_zhat_q_zhat_g: knn_mi(&hq, &hg, opts.k, None)?,
        i_zhat_q_zhat_g_given_y: knn_mi(&hq, &hg, opts.k, Some(&labels))?,
        estimator: format!("ksg1-maxnorm-k{}-proj{}", opts.k, opts.dim),
        k: opts.k,
        projection_dim: opts.dim,
        samples: labels.len(),
        strata: train.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hb(p: f64) -> f64 {
        -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
    }

    #[test]
    fn mi_examples() {
        let t = JointTable::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert!((exact_mi(&t, 0, 1).unwrap() - 2f64.ln()).abs() < 1e-15);

        let px = [0.3, 0.7];
        let py = [0.1, 0.6, 0.3];
        let prod: Vec<f64> = px.iter().flat_map(|a| py.iter().map(move |b| a * b)).collect();
        let t = JointTable::new(vec![2, 3], prod).unwrap();
        assert!(exact_mi(&t, 0, 1).unwrap().abs() < 1e-15);

        let t = JointTable::new(vec![2, 2], vec![0.45, 0.05, 0.05, 0.45]).unwrap();
        let oracle = 2f64.ln() - hb(0.1);
        assert!((exact_mi(&t, 0, 1).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.368).abs() < 1e-3);
    }

    #[test]
    fn invalid_tables_are_input_errors() {
        assert!(JointTable::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(JointTable::new(vec![2, 2], vec![1.5, -0.5, 0.0, 0.0]).is_err());
        assert!(JointTable::new(vec![2], vec![0.5, 0.5]).is_err());
        assert!(JointTable::new(vec![65, 1], vec![1.0 / 65.0; 65]).is_err());
        let t = JointTable::new(vec![2, 2], vec![0.25; 4]).unwrap();
        assert!(exact_mi(&t, 0, 0).is_err());
        assert!(exact_mi(&t, 0, 2).is_err());
    }

    #[test]
    fn conditional_examples() {
        // X, Y noisy copies of Z.
        let noisy = |z: usize, v: usize| if z == v { 0.8 } else { 0.2 };
        let t = JointTable::from_weights(vec![2, 2, 2], (0..8).map(|i| 0.5 * noisy(i & 1, i >> 2) * noisy(i & 1, (i >> 1) & 1)).collect()).unwrap();
        assert!(exact_cond_mi(&t, 0, 1, 2).unwrap().abs() < 1e-15);

        // X = Y, Z independent.
        let px = [0.2, 0.5, 0.3];
        let pz = [0.6, 0.4];
        let mut w = vec![0.0; 18];
        for x in 0..3 {
            for z in 0..2 {
                w[x * 6 + x * 2 + z] = px[x] * pz[z];
            }
        }
        let t = JointTable::new(vec![3, 3, 2], w).unwrap();
        assert!((exact_cond_mi(&t, 0, 1, 2).unwrap() - entropy(&px)).abs() < 1e-15);
    }

    #[test]
    fn conditional_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let t = JointTable::from_weights(vec![2, 2, 2], (0..8).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
            let p = |x: usize, y: usize, z: usize| t.probs()[x * 4 + y * 2 + z];
            let mut naive = 0.0;
            for x in 0..2 {
                for y in 0..2 {
                    for z in 0..2 {
                        let pz: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| p(a, b, z)).sum();
                        let pxz: f64 = (0..2).map(|b| p(x, b, z)).sum();
                        let pyz: f64 = (0..2).map(|a| p(a, y, z)).sum();
                        naive += p(x, y, z) * (p(x, y, z) * pz / (pxz * pyz)).ln();
                    }
                }
            }
            assert!((exact_cond_mi(&t, 0, 1, 2).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetry_and_chain_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let t = JointTable::from_weights(vec![3, 2, 4], (0..24).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            assert!((exact_mi(&t, 0, 1).unwrap() - exact_mi(&t, 1, 0).unwrap()).abs() < 1e-12);
            // I(X; Y,Z) from the 3 × 8 table.
            let m = t.marginal(&[0, 1, 2]).unwrap();
            let joint = JointTable::new(vec![3, 8], m).unwrap();
            let lhs = exact_mi(&joint, 0, 1).unwrap();
            let rhs = exact_mi(&t, 0, 2).unwrap() + exact_cond_mi(&t, 0, 1, 2).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn cascaded_flips() {
        let chain = ChainSpec {
            head: vec![0.5, 0.5],
            transitions: vec![binary_symmetric(0.1), binary_symmetric(0.1)],
        };
        let r = dpi_check(&chain).unwrap();
        assert!((r.i_head_mid - (2f64.ln() - hb(0.1))).abs() < 1e-12);
        assert!((r.i_head_tail - (2f64.ln() - hb(0.18))).abs() < 1e-12);
        assert!((r.i_head_tail - 0.222).abs() < 1e-3);
        assert!(r.holds);

        let lossless = ChainSpec {
            head: vec![0.5, 0.5],
            transitions: vec![binary_symmetric(0.1), binary_symmetric(0.0)],
        };
        let r = dpi_check(&lossless).unwrap();
        assert!(r.slack.abs() < 1e-12);
    }

    #[test]
    fn dpi_holds_on_random_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = dpi_check(&random_chain(&mut rng, 4, 2)).unwrap();
            assert!(r.holds && r.slack >= -DPI_SLACK, "{r:?}");
        }
    }

    #[test]
    fn bad_chains_are_input_errors() {
        let one = ChainSpec {
            head: vec![0.5, 0.5],
            transitions: vec![binary_symmetric(0.1)],
        };
        assert!(dpi_check(&one).is_err());
        let bad = ChainSpec {
            head: vec![0.5, 0.5],
            transitions: vec![binary_symmetric(0.1), vec![vec![0.5, 0.6], vec![0.5, 0.5]]],
        };
        assert!(dpi_check(&bad).is_err());
    }

    fn gaussian_pairs(n: usize, rho: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 - rho * rho).sqrt();
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let e: f64 = StandardNormal.sample(&mut rng);
                (vec![a], vec![rho * a + s * e])
            })
            .unzip()
    }

    #[test]
    fn knn_gaussian_oracles() {
        let (x, y) = gaussian_pairs(2000, 0.0, 1);
        assert!(knn_mi(&x, &y, 3, None).unwrap().abs() < 0.05);
        let (x, y) = gaussian_pairs(2000, 0.5, 2);
        let est = knn_mi(&x, &y, 3, None).unwrap();
        assert!((est - gaussian_mi(0.5)).abs() < 0.05, "{est}");
        assert!((gaussian_mi(0.5) - 0.1438).abs() < 1e-4);
        assert!(knn_mi(&x, &x, 3, None).unwrap() > 1.0);
    }

    #[test]
    fn knn_is_order_invariant_and_checks_strata() {
        let (x, y) = gaussian_pairs(300, 0.6, 3);
        let a = knn_mi(&x, &y, 3, None).unwrap();
        let (xr, yr): (Vec<_>, Vec<_>) = x.iter().cloned().zip(y.iter().cloned()).rev().collect();
        assert!((a - knn_mi(&xr, &yr, 3, None).unwrap()).abs() < 1e-12);
        let labels: Vec<usize> = (0..300).map(|i| if i < 297 { i % 2 } else { 2 }).collect();
        assert!(knn_mi(&x, &y, 3, Some(&labels)).is_err());
    }

    #[test]
    fn knn_duplicates_against_constant_are_independent() {
        // Strata of 16 draws over a handful of distinct values, paired with a
        // constant: the true conditional MI is 0.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut x, mut y, mut labels) = (vec![], vec![], vec![]);
        for s in 0..20 {
            let values: Vec<Vec<f64>> = (0..6).map(|_| (0..8).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            let c: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            for _ in 0..16 {
                x.push(values[rng.random_range(0..6)].clone());
                y.push(c.clone());
                labels.push(s);
            }
        }
        let est = knn_mi(&x, &y, 3, Some(&labels)).unwrap();
        assert!(est.abs() < 0.1, "{est}");
    }

    #[test]
    fn nce_bound_examples() {
        let ln32 = 32f64.ln();
        for (rho, seed) in [(0.0, 1), (0.9, 2)] {
            let r = nce_bound_check(rho, 1.0, 32, 200, 0.05, seed).unwrap();
            assert!(r.holds && r.below_cap, "{r:?}");
            assert!(r.bound <= ln32);
        }
        assert!((gaussian_mi(0.9) - 0.830).abs() < 1e-3);
    }
}
