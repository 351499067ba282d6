//! Slot attention: token encoder, iterative slot aggregation, mixture decoder.
//!
//! Attention maps are kept slot-major, `K × N` with `N = H'·W'`.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{AggregateMode, TrainConfig};
use crate::error::{numeric_err, shape_err, Error, Result};
use crate::params::{fan_in, normal, Bound, ParamStore};
use crate::tensor::Tensor;

const WEIGHTED_MEAN_EPS: f64 = 1e-8;
const INIT_LOG_SCALE: f64 = -2.0;

pub fn init_params(cfg: &TrainConfig, rng: &mut impl Rng, p: &mut ParamStore) {
    let (c, cs, k, n, hd) = (cfg.channels, cfg.c_slot, cfg.k_slots, cfg.n_tokens(), cfg.dec_hidden);
    p.insert("ocl.enc.w1", fan_in(rng, c, cs));
    p.insert("ocl.enc.b1", Tensor::zeros(&[1, cs]));
    p.insert("ocl.enc.w2", fan_in(rng, cs, cs));
    p.insert("ocl.enc.b2", Tensor::zeros(&[1, cs]));
    p.insert("ocl.slot.mu", normal(rng, &[k, cs], 1.0));
    p.insert("ocl.slot.log_scale", Tensor::full(&[k, cs], INIT_LOG_SCALE));
    p.insert("ocl.attn.wq", fan_in(rng, cs, cs));
    p.insert("ocl.attn.wk", fan_in(rng, cs, cs));
    p.insert("ocl.attn.wv", fan_in(rng, cs, cs));
    p.insert("ocl.gru.wx", fan_in(rng, cs, 3 * cs));
    p.insert("ocl.gru.bx", Tensor::zeros(&[1, 3 * cs]));
    p.insert("ocl.gru.wzr", fan_in(rng, cs, 2 * cs));
    p.insert("ocl.gru.wh", fan_in(rng, cs, cs));
    p.insert("ocl.mlp.w1", fan_in(rng, cs, cs));
    p.insert("ocl.mlp.b1", Tensor::zeros(&[1, cs]));
    p.insert("ocl.mlp.w2", normal(rng, &[cs, cs], 0.1 / (cs as f64).sqrt()));
    p.insert("ocl.mlp.b2", Tensor::zeros(&[1, cs]));
    p.insert("ocl.dec.w1", fan_in(rng, cs, hd));
    p.insert("ocl.dec.pos", normal(rng, &[n, hd], 1.0));
    p.insert("ocl.dec.w2", fan_in(rng, hd, c + 1));
    p.insert("ocl.dec.b2", Tensor::zeros(&[1, c + 1]));
}

/// Two-layer MLP from `N × C` tokens to `N × C_slot`.
pub fn slot_encode(g: &mut Graph, b: &Bound, tokens: Var) -> Result<Var> {
    let h = g.linear(tokens, b.var("ocl.enc.w1")?, Some(b.var("ocl.enc.b1")?))?;
    let h = g.gelu(h)?;
    g.linear(h, b.var("ocl.enc.w2")?, Some(b.var("ocl.enc.b2")?))
}

/// Initial slots: the learned mean, optionally perturbed by `noise` scaled by
/// the learned per-entry scale.
pub fn slot_init(g: &mut Graph, b: &Bound, noise: Option<&Tensor>) -> Result<Var> {
    let mu = b.var("ocl.slot.mu")?;
    match noise {
        None => Ok(mu),
        Some(eps) => {
            let eps = g.constant(eps.clone());
            let scale = g.exp(b.var("ocl.slot.log_scale")?)?;
            let d = g.mul(scale, eps)?;
            g.add(mu, d)
        }
    }
}

fn name_iteration(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(m) => numeric_err!("slot attention iteration {t}: {m}"),
        other => other,
    }
}

/// Iterative slot refinement. Returns the final slots `K × C_slot` and the
/// last iteration's aggregation attention `K × N` (softmax over slots).
pub fn slot_aggregate(
    g: &mut Graph,
    b: &Bound,
    encoded: Var,
    init: Var,
    iters: usize,
    mode: AggregateMode,
) -> Result<(Var, Var)> {
    if iters == 0 {
        return Err(shape_err!("slot attention needs at least one iteration"));
    }
    let cs = g.shape(encoded)[1];
    let e = g.layer_norm(encoded)?;
    let k = g.matmul(e, b.var("ocl.attn.wk")?)?;
    let kt = g.transpose(k)?;
    let v = g.matmul(e, b.var("ocl.attn.wv")?)?;
    let scale = 1.0 / (cs as f64).sqrt();

    let mut slots = init;
    let mut attn = None;
    for t in 1..=iters {
        let step = |g: &mut Graph| -> Result<(Var, Var)> {
            let s = g.layer_norm(slots)?;
            let q = g.matmul(s, b.var("ocl.attn.wq")?)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, scale)?;
            let a = g.softmax(logits, 0)?;
            let wts = match mode {
                AggregateMode::Mean => {
                    let tot = g.sum_axis(a, 1)?;
                    let tot = g.add_scalar(tot, WEIGHTED_MEAN_EPS)?;
                    g.div(a, tot)?
                }
                AggregateMode::Sum => a,
            };
            let u = g.matmul(wts, v)?;
            let next = gru(g, b, u, slots, cs)?;
            let h = g.layer_norm(next)?;
            let h = g.linear(h, b.var("ocl.mlp.w1")?, Some(b.var("ocl.mlp.b1")?))?;
            let h = g.gelu(h)?;
            let h = g.linear(h, b.var("ocl.mlp.w2")?, Some(b.var("ocl.mlp.b2")?))?;
            Ok((g.add(next, h)?, a))
        };
        let (s, a) = step(g).map_err(name_iteration(t))?;
        slots = s;
        attn = Some(a);
    }
    Ok((slots, attn.expect("at least one iteration")))
}

fn gru(g: &mut Graph, b: &Bound, x: Var, h: Var, cs: usize) -> Result<Var> {
    let gx = g.linear(x, b.var("ocl.gru.wx")?, Some(b.var("ocl.gru.bx")?))?;
    let gh = g.matmul(h, b.var("ocl.gru.wzr")?)?;
    let xz = g.slice(gx, 1, 0, cs)?;
    let xr = g.slice(gx, 1, cs, cs)?;
    let xh = g.slice(gx, 1, 2 * cs, cs)?;
    let hz = g.slice(gh, 1, 0, cs)?;
    let hr = g.slice(gh, 1, cs, cs)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let rh = g.matmul(rh, b.var("ocl.gru.wh")?)?;
    let cand = g.add(xh, rh)?;
    let cand = g.tanh(cand)?;
    let delta = g.sub(cand, h)?;
    let delta = g.mul(z, delta)?;
    g.add(h, delta)
}

/// Decode every slot to per-cell features and a mask logit, then compose.
/// Returns the reconstruction `N × C` and the decoding attention `K × N`
/// (softmax over slots). `_clues` is part of the decoder interface; the
/// mixture decoder does not read it.
pub fn slot_decode(g: &mut Graph, b: &Bound, slots: Var, _clues: Option<Var>) -> Result<(Var, Var)> {
    let k = g.shape(slots)[0];
    let pos = b.var("ocl.dec.pos")?;
    let (n, hd) = (g.shape(pos)[0], g.shape(pos)[1]);
    let c1 = g.shape(b.var("ocl.dec.w2")?)[1];
    let c = c1 - 1;

    let s = g.matmul(slots, b.var("ocl.dec.w1")?)?;
    let s = g.reshape(s, &[k, 1, hd])?;
    let p = g.reshape(pos, &[1, n, hd])?;
    let h = g.add(s, p)?;
    let h = g.gelu(h)?;
    let h = g.reshape(h, &[k * n, hd])?;
    let out = g.linear(h, b.var("ocl.dec.w2")?, Some(b.var("ocl.dec.b2")?))?;
    let out = g.reshape(out, &[k, n, c1])?;
    let feats = g.slice(out, 2, 0, c)?;
    let logits = g.slice(out, 2, c, 1)?;
    let a = g.softmax(logits, 0)?;
    let mixed = g.mul(a, feats)?;
    let z = g.sum_axis(mixed, 0)?;
    let z = g.reshape(z, &[n, c])?;
    let a = g.reshape(a, &[k, n])?;
    Ok((z, a))
}

/// Sum over both views of the mean squared reconstruction error.
pub fn rec_loss(g: &mut Graph, zq_rec: Var, zq: Var, zg_rec: Var, zg: Var) -> Result<Var> {
    let a = g.mse(zq_rec, zq)?;
    let b = g.mse(zg_rec, zg)?;
    g.add(a, b)
}
