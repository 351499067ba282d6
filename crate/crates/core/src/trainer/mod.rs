//! Optimization loop, schedule and checkpoints.

mod checkpoint;
mod objective;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{config_err, numeric_err, Error, Result};
use crate::model::Model;
use crate::synth::{FeatureMap, RawGrid, ScenePair, CELL};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use objective::{batch_objective, info_nce, slot_noise, LossBreakdown, Objective, Terms};
pub use optim::{AdamW, Schedule};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.igeo";

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const NOISE_STREAM: u64 = 0x4E4F_4953;
const VIEW_STREAM: u64 = 0x5649_4557;

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for the step log and the per-epoch checkpoint.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<LossBreakdown>,
    /// Total loss after each epoch on fixed batches of the stored views,
    /// without augmentation or slot noise.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub seconds: f64,
    pub degenerate_pairs: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Mean total loss of the steps in `epoch`.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let xs: Vec<f64> = self.history.iter().filter(|b| b.epoch == epoch).map(|b| b.total).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// One training view: a random quarter turn and a cyclic shift of up to one
/// cell in each direction when augmentation is on, the stored view otherwise.
fn augmented_view(model: &Model, raw: &RawGrid, rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    if !model.cfg.augment {
        return model.featurize(raw);
    }
    let turn = rng.random_range(0..4);
    let dr = (rng.random_range(0..3) as isize - 1) * CELL as isize;
    let dc = (rng.random_range(0..3) as isize - 1) * CELL as isize;
    model.featurize(&raw.rotated(turn).rolled(dr, dc))
}

/// Batches of indices for one epoch. A trailing batch with a single pair is
/// dropped, since contrastive alignment needs at least two.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM ^ ((epoch as u64) << 32));
    idx.shuffle(&mut rng);
    idx.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Mean total loss over consecutive batches in index order.
fn fixed_loss(model: &Model, stored: &[(FeatureMap, FeatureMap)], info_weight: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for chunk in stored.chunks(model.cfg.batch_size).filter(|c| c.len() >= 2) {
        let pairs: Vec<(&FeatureMap, &FeatureMap)> = chunk.iter().map(|(q, g)| (q, g)).collect();
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        sum += batch_objective(model, &mut g, &b, &pairs, None, info_weight)?.breakdown.total;
        n += 1;
    }
    Ok(sum / n as f64)
}

pub fn train(model: &mut Model, data: &[&ScenePair], opts: &TrainOptions) -> Result<TrainReport> {
    let cfg = model.cfg.clone();
    cfg.validate()?;
    if data.len() < 2 || cfg.batch_size < 2 {
        return Err(config_err!(
            "training needs at least two pairs and a batch of at least two (got {} pairs, batch {})",
            data.len(),
            cfg.batch_size
        ));
    }
    let per_epoch = epoch_batches(data.len(), cfg.batch_size, cfg.seed, 0).len();
    let schedule = Schedule::new(cfg.lr, per_epoch * cfg.epochs, cfg.warmup_ratio);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut view_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VIEW_STREAM);
    let use_noise = cfg.slot_noise && cfg.ablation.ocl_active();

    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let ckpt_path = opts.out_dir.as_deref().map(|d: &Path| d.join(CHECKPOINT_FILE));

    let stored = data
        .iter()
        .map(|p| Ok((model.featurize(&p.raw_q)?, model.featurize(&p.raw_g)?)))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let mut history = Vec::new();
    let mut epoch_loss = Vec::new();
    let mut degenerate = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let views = batch
                .iter()
                .map(|&i| {
                    let q = augmented_view(model, &data[i].raw_q, &mut view_rng)?;
                    Ok((q, augmented_view(model, &data[i].raw_g, &mut view_rng)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(&FeatureMap, &FeatureMap)> = views.iter().map(|(q, g)| (q, g)).collect();
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, true);
            let mut draw = || slot_noise(&mut noise_rng, cfg.k_slots, cfg.c_slot);
            let noise: Option<&mut dyn FnMut() -> crate::Tensor> = if use_noise { Some(&mut draw) } else { None };
            let info_weight = cfg.lambda2 * schedule.ramp(step);
            let at_step = |e: Error| match e {
                Error::Numeric(m) => numeric_err!("step {step} (epoch {epoch}): {m}"),
                other => other,
            };
            let obj = batch_objective(model, &mut g, &b, &pairs, noise, info_weight).map_err(at_step)?;
            if !obj.breakdown.total.is_finite() {
                return Err(numeric_err!("step {step} (epoch {epoch}): non-finite loss {:?}", obj.breakdown));
            }
            let grads = g.backward(obj.total).map_err(at_step)?;
            let grads = b.collect(&grads);
            opt.step(&mut model.params, &grads, schedule.lr(step))?;

            let mut bd = obj.breakdown;
            bd.step = step;
            bd.epoch = epoch;
            degenerate += obj.degenerate_pairs;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &bd)?;
                w.write_all(b"\n")?;
            }
            history.push(bd);
            step += 1;
        }
        epoch_loss.push(fixed_loss(model, &stored, cfg.lambda2 * schedule.ramp(step))?);
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(p) = &ckpt_path {
            save_checkpoint(p, model)?;
        }
        if opts.verbose {
            let mean = history.iter().filter(|b| b.epoch == epoch).map(|b| b.total).sum::<f64>() / per_epoch as f64;
            eprintln!("epoch {epoch:>3}  loss {mean:.4}  {:.1}s", start.elapsed().as_secs_f64());
        }
    }
    Ok(TrainReport {
        history,
        epoch_loss,
        steps: step,
        seconds: start.elapsed().as_secs_f64(),
        degenerate_pairs: degenerate,
        checkpoint: ckpt_path,
    })
}
