//! Object-centric augmentation of global features and the shared descriptor
//! aggregator.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::TrainConfig;
use crate::error::{config_err, shape_err, Result};
use crate::params::{fan_in, normal, Bound, ParamStore};
use crate::tensor::Tensor;

pub fn init_params(cfg: &TrainConfig, rng: &mut impl Rng, p: &mut ParamStore) {
    let (c, cc, n) = (cfg.channels, cfg.c_cond, cfg.n_tokens() as f64);
    // Pooled affinities sum over up to N cells.
    p.insert("ocva.g.w1", normal(rng, &[c, c], 1.0 / ((c as f64).sqrt() * n.sqrt())));
    p.insert("ocva.g.b1", Tensor::zeros(&[1, c]));
    p.insert("ocva.g.w2", fan_in(rng, c, cc));
    p.insert("ocva.g.b2", Tensor::zeros(&[1, cc]));
    p.insert("ocva.p.w", normal(rng, &[cc, c], 0.1 / (cc as f64).sqrt()));
    p.insert("ocva.p.b", Tensor::zeros(&[1, c]));
}

pub fn init_aggregator(cfg: &TrainConfig, rng: &mut impl Rng, p: &mut ParamStore) {
    let (c, n) = (cfg.channels, cfg.n_tokens());
    for i in 0..cfg.mix_depth {
        p.insert(format!("agg.mix{i}.w"), Tensor::zeros(&[n, n]));
        p.insert(format!("agg.mix{i}.b"), Tensor::zeros(&[1, n]));
    }
    p.insert("agg.depth.w", fan_in(rng, c, cfg.d_depth).transpose().expect("matrix"));
    p.insert("agg.depth.b", Tensor::zeros(&[cfg.d_depth, 1]));
    // Identity mixing and near-average pooling at init.
    let avg = 1.0 / n as f64;
    let mut row = normal(rng, &[n, cfg.n_rows], 0.01 * avg);
    for x in row.data_mut() {
        *x += avg;
    }
    p.insert("agg.row.w", row);
    p.insert("agg.row.b", Tensor::zeros(&[1, cfg.n_rows]));
}

/// Attention-weighted global pool `Σ_k Σ_i Â(k,i)·Z(:,i)` through a two-layer
/// MLP. `maps` is `K × N`, `tokens` is `N × C`; returns `1 × C_cond`.
pub fn affinity_vector(g: &mut Graph, b: &Bound, maps: Var, tokens: Var) -> Result<Var> {
    if g.shape(maps)[1] != g.shape(tokens)[0] {
        return Err(shape_err!(
            "maps over {} cells, features over {}",
            g.shape(maps)[1],
            g.shape(tokens)[0]
        ));
    }
    let pooled = affinity_pool(g, maps, tokens)?;
    let h = g.linear(pooled, b.var("ocva.g.w1")?, Some(b.var("ocva.g.b1")?))?;
    let h = g.gelu(h)?;
    g.linear(h, b.var("ocva.g.w2")?, Some(b.var("ocva.g.b2")?))
}

/// The pooled `1 × C` vector before the MLP.
pub fn affinity_pool(g: &mut Graph, maps: Var, tokens: Var) -> Result<Var> {
    let mass = g.sum_axis(maps, 0)?;
    g.matmul(mass, tokens)
}

/// `Ẑ = Z ⊙ (1 + γ)` with `γ = sigmoid(P v_h)` per channel. `z` is `C × N`.
/// Returns `(Ẑ, γ as C × 1)`.
pub fn film_modulate(g: &mut Graph, b: &Bound, z: Var, v_h: Var) -> Result<(Var, Var)> {
    let c = g.shape(z)[0];
    let logits = g.linear(v_h, b.var("ocva.p.w")?, Some(b.var("ocva.p.b")?))?;
    let gamma = g.sigmoid(logits)?;
    let gamma = g.reshape(gamma, &[c, 1])?;
    let s = g.add_scalar(gamma, 1.0)?;
    Ok((g.mul(z, s)?, gamma))
}

/// `α·Ẑ + (1−α)·Z`.
pub fn fuse(g: &mut Graph, z_hat: Var, z: Var, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config_err!("alpha must lie in [0, 1], got {alpha}"));
    }
    let a = g.scale(z_hat, alpha)?;
    let b = g.scale(z, 1.0 - alpha)?;
    g.add(a, b)
}

/// Mixer blocks over the cell axis of a `C × N` map, then depth and row
/// projections; returns a unit-norm `1 × (d_depth·n_rows)` descriptor.
pub fn aggregate(g: &mut Graph, b: &Bound, z: Var, mix_depth: usize) -> Result<Var> {
    let mut x = z;
    for i in 0..mix_depth {
        let h = g.layer_norm(x)?;
        let h = g.linear(h, b.var(&format!("agg.mix{i}.w"))?, Some(b.var(&format!("agg.mix{i}.b"))?))?;
        let h = g.gelu(h)?;
        x = g.add(x, h)?;
    }
    let d = g.matmul(b.var("agg.depth.w")?, x)?;
    let d = g.add(d, b.var("agg.depth.b")?)?;
    let r = g.linear(d, b.var("agg.row.w")?, Some(b.var("agg.row.b")?))?;
    let dim = g.value(r).numel();
    let flat = g.reshape(r, &[1, dim])?;
    g.l2_normalize_rows(flat)
}

/// Pairwise Euclidean distances between descriptor rows.
pub fn relation_matrix(g: &mut Graph, f: Var) -> Result<Var> {
    let n = g.shape(f)[0];
    if n < 2 {
        return Err(config_err!("relation matrix needs at least 2 descriptors, got {n}"));
    }
    g.pairwise_dist(f)
}

/// `½ Σ_v ‖R(f_v) − R(f̃_v)‖_F` with the augmented relations as a fixed target.
/// `views` holds `(vanilla, augmented)` batches.
pub fn distill_loss(g: &mut Graph, views: &[(Var, Var)]) -> Result<Var> {
    let mut total = None;
    for &(f, f_aug) in views {
        if g.shape(f) != g.shape(f_aug) {
            return Err(shape_err!("batches {:?} vs {:?}", g.shape(f), g.shape(f_aug)));
        }
        let r = relation_matrix(g, f)?;
        let teacher = relation_matrix(g, f_aug)?;
        let teacher = g.detach(teacher);
        let d = g.sub(r, teacher)?;
        let n = g.norm(d)?;
        total = Some(match total {
            None => n,
            Some(t) => g.add(t, n)?,
        });
    }
    let t = total.ok_or_else(|| config_err!("distillation needs at least one view"))?;
    g.scale(t, 0.5)
}
