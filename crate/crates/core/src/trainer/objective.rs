//! Per-batch training objective.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cacs;
use crate::csrr;
use crate::error::{config_err, Result};
use crate::model::Model;
use crate::ocl;
use crate::ocva;
use crate::params::Bound;
use crate::synth::FeatureMap;
use crate::tensor::Tensor;

/// Loss terms of one optimizer step. Disabled terms are exactly zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub epoch: usize,
    pub align: f64,
    pub rec: f64,
    pub cacs: f64,
    #[serde(rename = "struct")]
    pub structure: f64,
    pub info: f64,
    pub distill: f64,
    /// Weight applied to `info` at this step.
    pub info_weight: f64,
    pub total: f64,
}

/// Graph nodes of the individual loss terms; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct Terms {
    pub align: Var,
    pub rec: Option<Var>,
    pub cacs: Option<Var>,
    pub structure: Option<Var>,
    pub distill: Option<Var>,
}

/// Recorded objective for one batch.
pub struct Objective {
    pub total: Var,
    pub terms: Terms,
    pub breakdown: LossBreakdown,
    /// Pairs whose concept graphs had too few informative eigenvectors.
    pub degenerate_pairs: usize,
}

/// InfoNCE over a batch of matched rows. With `symmetric` the query-to-gallery
/// and gallery-to-query directions are averaged.
pub fn info_nce(g: &mut Graph, fq: Var, fg: Var, tau: f64, symmetric: bool) -> Result<Var> {
    let b = g.shape(fq)[0];
    if b < 2 {
        return Err(config_err!("contrastive alignment needs a batch of at least 2, got {b}"));
    }
    if tau <= 0.0 {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    let fgt = g.transpose(fg)?;
    let logits = g.matmul(fq, fgt)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let eye = g.constant(Tensor::eye(b));
    let diag_mean = |g: &mut Graph, axis: usize| -> Result<Var> {
        let ls = g.log_softmax(logits, axis)?;
        let d = g.mul(ls, eye)?;
        let s = g.sum_all(d)?;
        g.scale(s, -1.0 / b as f64)
    };
    let forward = diag_mean(g, 1)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = diag_mean(g, 0)?;
    let both = g.add(forward, backward)?;
    g.scale(both, 0.5)
}

/// Standard normal slot noise for one view.
pub fn slot_noise(rng: &mut impl Rng, k: usize, c_slot: usize) -> Tensor {
    Tensor::from_fn(&[k, c_slot], |_| rng.sample(StandardNormal))
}

struct ViewOut {
    vanilla: Option<Var>,
    augmented: Option<Var>,
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Option<Var>> {
    if xs.is_empty() {
        return Ok(None);
    }
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(Some(g.scale(acc, 1.0 / xs.len() as f64)?))
}

/// Record the full objective for `pairs` (query, gallery) on `g`.
///
/// `noise` supplies slot initialization noise; `None` starts from the learned
/// mean. `info_weight` scales the concept terms.
pub fn batch_objective(
    model: &Model,
    g: &mut Graph,
    b: &Bound,
    pairs: &[(&FeatureMap, &FeatureMap)],
    mut noise: Option<&mut dyn FnMut() -> Tensor>,
    info_weight: f64,
) -> Result<Objective> {
    let cfg = &model.cfg;
    let ab = cfg.ablation;
    if ab.rd && !ab.ocva {
        return Err(config_err!("relation distillation requires augmentation"));
    }
    let ocl_on = ab.ocl_active();
    let mut rec = Vec::new();
    let mut cacs_terms = Vec::new();
    let mut struct_terms = Vec::new();
    let mut degenerate = 0;
    let mut q_out = Vec::with_capacity(pairs.len());
    let mut g_out = Vec::with_capacity(pairs.len());

    for (fq, fg) in pairs {
        let zq = g.constant(fq.by_channel.clone());
        let zg = g.constant(fg.by_channel.clone());
        let mut out_q = ViewOut {
            vanilla: None,
            augmented: None,
        };
        let mut out_g = ViewOut {
            vanilla: None,
            augmented: None,
        };
        if ocl_on {
            let tq = g.constant(fq.tokens.clone());
            let tg = g.constant(fg.tokens.clone());
            let nq = noise.as_mut().map(|f| f());
            let ng = noise.as_mut().map(|f| f());
            let sq = model.run_slots(g, b, tq, nq.as_ref())?;
            let sg = model.run_slots(g, b, tg, ng.as_ref())?;
            rec.push(ocl::rec_loss(g, sq.recon, tq, sg.recon, tg)?);
            let selq = model.select(g, b, sq.a_d, sg.a_d)?;
            let selg = model.select(g, b, sg.a_d, sq.a_d)?;
            if ab.cacs {
                cacs_terms.push(cacs::cacs_loss(g, selq.w_cv, selg.w_cv)?);
            }
            if ab.structure {
                let s = csrr::struct_loss(g, selq.a_hat, selg.a_hat, cfg.rank)?;
                match s.loss {
                    Some(l) => struct_terms.push(l),
                    None => degenerate += 1,
                }
            }
            if ab.ocva {
                out_q.augmented = Some(model.augment(g, b, selq.a_hat, zq, tq)?.descriptor);
                out_g.augmented = Some(model.augment(g, b, selg.a_hat, zg, tg)?.descriptor);
            }
        }
        if !ab.ocva || ab.rd {
            out_q.vanilla = Some(model.aggregate(g, b, zq)?);
            out_g.vanilla = Some(model.aggregate(g, b, zg)?);
        }
        q_out.push(out_q);
        g_out.push(out_g);
    }

    let stack = |g: &mut Graph, outs: &[ViewOut], aug: bool| -> Result<Var> {
        let rows: Vec<Var> = outs
            .iter()
            .map(|o| if aug { o.augmented } else { o.vanilla }.expect("descriptor recorded"))
            .collect();
        g.concat(&rows, 0)
    };
    let fq = stack(g, &q_out, ab.ocva)?;
    let fg = stack(g, &g_out, ab.ocva)?;
    let align = info_nce(g, fq, fg, cfg.tau, cfg.symmetric_nce)?;
    let mut total = align;
    let mut bd = LossBreakdown {
        align: g.scalar_value(align),
        info_weight,
        ..Default::default()
    };

    let rec_mean = mean_of(g, &rec)?;
    if let Some(r) = rec_mean {
        bd.rec = g.scalar_value(r);
        let t = g.scale(r, cfg.lambda1)?;
        total = g.add(total, t)?;
    }
    let cacs_mean = mean_of(g, &cacs_terms)?;
    // Degenerate pairs contribute zero but still count toward the mean.
    let struct_mean = match mean_of(g, &struct_terms)? {
        Some(s) => Some(g.scale(s, struct_terms.len() as f64 / pairs.len() as f64)?),
        None => None,
    };
    let info = match (cacs_mean, struct_mean) {
        (Some(a), Some(s)) => Some(g.add(a, s)?),
        (a, s) => a.or(s),
    };
    if let Some(c) = cacs_mean {
        bd.cacs = g.scalar_value(c);
    }
    if let Some(s) = struct_mean {
        bd.structure = g.scalar_value(s);
    }
    if let Some(i) = info {
        bd.info = g.scalar_value(i);
        let t = g.scale(i, info_weight)?;
        total = g.add(total, t)?;
    }
    let mut distill = None;
    if ab.rd {
        let fq_v = stack(g, &q_out, false)?;
        let fg_v = stack(g, &g_out, false)?;
        let d = ocva::distill_loss(g, &[(fq_v, fq), (fg_v, fg)])?;
        bd.distill = g.scalar_value(d);
        let t = g.scale(d, cfg.lambda3)?;
        total = g.add(total, t)?;
        distill = Some(d);
    }
    bd.total = g.scalar_value(total);
    Ok(Objective {
        total,
        terms: Terms {
            align,
            rec: rec_mean,
            cacs: cacs_mean,
            structure: struct_mean,
            distill,
        },
        breakdown: bd,
        degenerate_pairs: degenerate,
    })
}
