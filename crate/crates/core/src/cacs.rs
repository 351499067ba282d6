//! Cross-view concept selection over decoding attention maps.
//!
//! Each slot's flattened map is one token of dimension `N`. Attention across
//! views fuses them, a linear router scores every fused token, and the
//! sigmoid score reweights the original map.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::TrainConfig;
use crate::error::{config_err, shape_err, Result};
use crate::params::{fan_in, normal, Bound, ParamStore};
use crate::tensor::Tensor;

pub fn init_params(cfg: &TrainConfig, rng: &mut impl Rng, p: &mut ParamStore) {
    let n = cfg.n_tokens();
    for name in ["cacs.mha.wq", "cacs.mha.wk", "cacs.mha.wv"] {
        p.insert(name, fan_in(rng, n, n));
    }
    p.insert("cacs.mha.wo", normal(rng, &[n, n], 0.1 / (n as f64).sqrt()));
    p.insert("cacs.router.w", normal(rng, &[n, 1], 0.01));
    p.insert("cacs.router.b", Tensor::zeros(&[1, 1]));
}

/// Projection weights of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl MhaWeights {
    pub fn bound(b: &Bound) -> Result<Self> {
        Ok(MhaWeights {
            wq: b.var("cacs.mha.wq")?,
            wk: b.var("cacs.mha.wk")?,
            wv: b.var("cacs.mha.wv")?,
            wo: b.var("cacs.mha.wo")?,
        })
    }
}

/// `LayerNorm(A_from + MHA(A_from, A_other, A_other))`, maps `K × N`.
pub fn cross_view_fuse(g: &mut Graph, w: MhaWeights, heads: usize, a_from: Var, a_other: Var) -> Result<Var> {
    let (k, n) = (g.shape(a_from)[0], g.shape(a_from)[1]);
    if g.shape(a_other)[1] != n {
        return Err(shape_err!(
            "fusing maps of {n} and {} cells",
            g.shape(a_other)[1]
        ));
    }
    if heads == 0 || n % heads != 0 {
        return Err(config_err!("{n} cells not divisible by {heads} heads"));
    }
    let dh = n / heads;
    let q = g.matmul(a_from, w.wq)?;
    let kk = g.matmul(a_other, w.wk)?;
    let v = g.matmul(a_other, w.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(kk, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kht = g.transpose(kh)?;
        let s = g.matmul(qh, kht)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let s = g.softmax(s, 1)?;
        outs.push(g.matmul(s, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let m = g.matmul(o, w.wo)?;
    debug_assert_eq!(g.shape(m), &[k, n]);
    let r = g.add(a_from, m)?;
    g.layer_norm(r)
}

/// Per-slot weights in (0, 1), shape `K × 1`.
pub fn route_concepts(g: &mut Graph, b: &Bound, fused: Var) -> Result<Var> {
    let s = g.linear(fused, b.var("cacs.router.w")?, Some(b.var("cacs.router.b")?))?;
    g.sigmoid(s)
}

/// Scale every slot map by its weight.
pub fn reweight(g: &mut Graph, a_d: Var, w: Var) -> Result<Var> {
    if g.shape(w) != [g.shape(a_d)[0], 1] {
        return Err(shape_err!(
            "weights {:?} for {} slots",
            g.shape(w),
            g.shape(a_d)[0]
        ));
    }
    g.mul(a_d, w)
}

/// `mean(w(1−w)) − Var(w)` across slots for one view.
pub fn cacs_term(g: &mut Graph, w: Var) -> Result<Var> {
    let om = g.one_minus(w)?;
    let amb = g.mul(w, om)?;
    let amb = g.mean_all(amb)?;
    let var = g.var_axis(w, 0)?;
    let var = g.reshape(var, &[1])?;
    g.sub(amb, var)
}

/// Average of the per-view terms.
pub fn cacs_loss(g: &mut Graph, w_q: Var, w_g: Var) -> Result<Var> {
    let a = cacs_term(g, w_q)?;
    let b = cacs_term(g, w_g)?;
    let s = g.add(a, b)?;
    g.scale(s, 0.5)
}

/// Plain-value form of [`cacs_term`].
pub fn cacs_value(w: &[f64]) -> f64 {
    let k = w.len() as f64;
    let amb = w.iter().map(|x| x * (1.0 - x)).sum::<f64>() / k;
    let mean = w.iter().sum::<f64>() / k;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
    amb - var
}
