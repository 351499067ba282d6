//! The assembled model: frozen featurizer, slot attention, concept selection,
//! augmentation and the shared descriptor aggregator.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cacs::{self, MhaWeights};
use crate::config::TrainConfig;
use crate::csrr;
use crate::error::{config_err, Error, Result};
use crate::ocl;
use crate::ocva;
use crate::params::{Bound, ParamStore};
use crate::synth::{FeatureMap, Featurizer, RawGrid};
use crate::tensor::Tensor;

/// Which inference path produces descriptors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Featurizer then aggregator; no object-centric modules.
    Vanilla,
    /// Slot attention, concept selection and augmentation before aggregation.
    Augmented,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "augmented" => Ok(Mode::Augmented),
            other => Err(config_err!("unknown mode {other:?} (vanilla or augmented)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Augmented => "augmented",
        })
    }
}

/// Slot attention outputs for one view.
#[derive(Clone, Copy, Debug)]
pub struct ViewSlots {
    pub slots: Var,
    /// Aggregation attention `K × N`.
    pub a_a: Var,
    /// Decoding attention `K × N`.
    pub a_d: Var,
    /// Reconstructed tokens `N × C`.
    pub recon: Var,
}

/// Concept selection outputs for one view.
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    pub fused: Var,
    /// Router weights `K × 1`.
    pub w_cv: Var,
    /// Reweighted decoding attention `K × N`.
    pub a_hat: Var,
}

/// Augmentation outputs for one view.
#[derive(Clone, Copy, Debug)]
pub struct Augmented {
    pub v_h: Var,
    pub gamma: Var,
    /// Modulated map `C × N`.
    pub z_hat: Var,
    /// Fused map `C × N`.
    pub z_tilde: Var,
    /// Descriptor `1 × D`.
    pub descriptor: Var,
}

/// Plain values of every intermediate for one image, for probes and exports.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub a_a: Tensor,
    pub a_d: Tensor,
    pub w_cv: Vec<f64>,
    pub a_hat: Tensor,
    pub graph: Tensor,
    pub spectrum: Vec<f64>,
    pub embedding: Tensor,
    pub gamma: Vec<f64>,
    /// Spatial mean of the feature map, length `C`.
    pub z_pooled: Vec<f64>,
    /// Spatial mean of the modulated map, length `C`.
    pub z_hat_pooled: Vec<f64>,
}

pub struct Model {
    pub cfg: TrainConfig,
    pub params: ParamStore,
    featurizer: Featurizer,
    slot_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            featurizer: self.featurizer.clone(),
            slot_calls: AtomicUsize::new(self.slot_attention_calls()),
        }
    }
}

const INIT_STREAM: u64 = 0x1A17_0000_0000_0001;

impl Model {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Self::fresh_params(&cfg);
        Self::assemble(cfg, params)
    }

    /// A model with externally supplied parameters, e.g. from a checkpoint.
    pub fn from_params(cfg: TrainConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        Self::fresh_params(&cfg).check_layout(&params)?;
        Self::assemble(cfg, params)
    }

    fn assemble(cfg: TrainConfig, params: ParamStore) -> Result<Self> {
        let featurizer = Featurizer::new(cfg.grid_size, cfg.patch, cfg.channels)?;
        Ok(Model {
            cfg,
            params,
            featurizer,
            slot_calls: AtomicUsize::new(0),
        })
    }

    fn fresh_params(cfg: &TrainConfig) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        let mut p = ParamStore::new();
        ocl::init_params(cfg, &mut rng, &mut p);
        cacs::init_params(cfg, &mut rng, &mut p);
        ocva::init_params(cfg, &mut rng, &mut p);
        ocva::init_aggregator(cfg, &mut rng, &mut p);
        p
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn featurize(&self, raw: &RawGrid) -> Result<FeatureMap> {
        self.featurizer.featurize(raw)
    }

    /// Number of slot attention passes run by this instance.
    pub fn slot_attention_calls(&self) -> usize {
        self.slot_calls.load(Ordering::Relaxed)
    }

    /// Encode, aggregate and decode one view.
    pub fn run_slots(&self, g: &mut Graph, b: &Bound, tokens: Var, noise: Option<&Tensor>) -> Result<ViewSlots> {
        self.slot_calls.fetch_add(1, Ordering::Relaxed);
        let enc = ocl::slot_encode(g, b, tokens)?;
        let init = ocl::slot_init(g, b, noise)?;
        let (slots, a_a) = ocl::slot_aggregate(g, b, enc, init, self.cfg.iters, self.cfg.aggregate_mode)?;
        let (recon, a_d) = ocl::slot_decode(g, b, slots, Some(tokens))?;
        Ok(ViewSlots {
            slots,
            a_a,
            a_d,
            recon,
        })
    }

    /// Fuse `a_d` with `other`, route and reweight.
    pub fn select(&self, g: &mut Graph, b: &Bound, a_d: Var, other: Var) -> Result<Selection> {
        let fused = cacs::cross_view_fuse(g, MhaWeights::bound(b)?, self.cfg.heads, a_d, other)?;
        let w_cv = cacs::route_concepts(g, b, fused)?;
        let a_hat = cacs::reweight(g, a_d, w_cv)?;
        Ok(Selection { fused, w_cv, a_hat })
    }

    /// Affinity, modulation, fusion and aggregation for one view.
    pub fn augment(&self, g: &mut Graph, b: &Bound, a_hat: Var, z: Var, tokens: Var) -> Result<Augmented> {
        let v_h = ocva::affinity_vector(g, b, a_hat, tokens)?;
        let (z_hat, gamma) = ocva::film_modulate(g, b, z, v_h)?;
        let z_tilde = ocva::fuse(g, z_hat, z, self.cfg.alpha)?;
        let descriptor = self.aggregate(g, b, z_tilde)?;
        Ok(Augmented {
            v_h,
            gamma,
            z_hat,
            z_tilde,
            descriptor,
        })
    }

    pub fn aggregate(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
        ocva::aggregate(g, b, z, self.cfg.mix_depth)
    }

    /// Unit-norm descriptor of one image. Augmented mode fuses the image's
    /// decoding attention with itself, since the paired view is unknown at
    /// retrieval time. A model trained without augmentation has no augmented
    /// path and answers with the vanilla descriptor.
    pub fn describe(&self, fm: &FeatureMap, mode: Mode) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let z = g.constant(fm.by_channel.clone());
        let f = if mode == Mode::Augmented && self.cfg.ablation.ocva {
            let tokens = g.constant(fm.tokens.clone());
            let s = self.run_slots(&mut g, &b, tokens, None)?;
            let sel = self.select(&mut g, &b, s.a_d, s.a_d)?;
            self.augment(&mut g, &b, sel.a_hat, z, tokens)?.descriptor
        } else {
            self.aggregate(&mut g, &b, z)?
        };
        Ok(g.value(f).data().to_vec())
    }

    /// Cross-view routing weights `(w_q, w_g)` for a query and gallery image.
    pub fn routing(&self, fq: &FeatureMap, fg: &FeatureMap) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let tq = g.constant(fq.tokens.clone());
        let tg = g.constant(fg.tokens.clone());
        let sq = self.run_slots(&mut g, &b, tq, None)?;
        let sg = self.run_slots(&mut g, &b, tg, None)?;
        let wq = self.select(&mut g, &b, sq.a_d, sg.a_d)?.w_cv;
        let wg = self.select(&mut g, &b, sg.a_d, sq.a_d)?.w_cv;
        Ok((g.value(wq).data().to_vec(), g.value(wg).data().to_vec()))
    }

    /// Every intermediate of the augmented path for one image.
    pub fn inspect(&self, fm: &FeatureMap) -> Result<Inspection> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let z = g.constant(fm.by_channel.clone());
        let tokens = g.constant(fm.tokens.clone());
        let s = self.run_slots(&mut g, &b, tokens, None)?;
        let sel = self.select(&mut g, &b, s.a_d, s.a_d)?;
        let aug = self.augment(&mut g, &b, sel.a_hat, z, tokens)?;
        let (graph, spectrum, embedding) = if self.cfg.k_slots >= 2 && self.cfg.rank < self.cfg.k_slots {
            let (gm, deg) = csrr::concept_graph(&mut g, sel.a_hat)?;
            let lap = csrr::normalized_laplacian(&mut g, gm, deg)?;
            let e = csrr::spectral_embed(&mut g, lap, self.cfg.rank)?;
            (g.value(gm).clone(), e.spectrum, g.value(e.u).clone())
        } else {
            (Tensor::eye(1), vec![], Tensor::zeros(&[1, 1]))
        };
        let mean_rows = |t: &Tensor| -> Vec<f64> {
            let (c, n) = (t.rows(), t.cols());
            (0..c).map(|i| t.row(i).iter().sum::<f64>() / n as f64).collect()
        };
        Ok(Inspection {
            a_a: g.value(s.a_a).clone(),
            a_d: g.value(s.a_d).clone(),
            w_cv: g.value(sel.w_cv).data().to_vec(),
            a_hat: g.value(sel.a_hat).clone(),
            graph,
            spectrum,
            embedding,
            gamma: g.value(aug.gamma).data().to_vec(),
            z_pooled: mean_rows(&fm.by_channel),
            z_hat_pooled: mean_rows(g.value(aug.z_hat)),
        })
    }

    /// Parameter names per module group.
    pub fn group_of(name: &str) -> &'static str {
        match name.split('.').next() {
            Some("ocl") => "ocl",
            Some("cacs") => "cacs",
            Some("ocva") => "ocva",
            Some("agg") => "aggregator",
            _ => "other",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_pair, SceneSpec};

    #[test]
    fn descriptors_have_configured_dim() {
        let m = Model::new(TrainConfig::desk()).unwrap();
        let p = render_pair(&SceneSpec::default(), 0, 4, 0).unwrap();
        let fm = m.featurize(&p.raw_g).unwrap();
        for mode in [Mode::Vanilla, Mode::Augmented] {
            let d = m.describe(&fm, mode).unwrap();
            assert_eq!(d.len(), 128);
            let n: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn vanilla_never_runs_slot_attention() {
        let m = Model::new(TrainConfig::desk()).unwrap();
        let p = render_pair(&SceneSpec::default(), 1, 4, 0).unwrap();
        let fm = m.featurize(&p.raw_q).unwrap();
        m.describe(&fm, Mode::Vanilla).unwrap();
        assert_eq!(m.slot_attention_calls(), 0);
        m.describe(&fm, Mode::Augmented).unwrap();
        assert_eq!(m.slot_attention_calls(), 1);
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::new(TrainConfig::desk()).unwrap();
        let b = Model::new(TrainConfig::desk()).unwrap();
        assert_eq!(a.params, b.params);
        let mut cfg = TrainConfig::desk();
        cfg.seed = 8;
        assert_ne!(Model::new(cfg).unwrap().params, a.params);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("vanilla".parse::<Mode>().unwrap(), Mode::Vanilla);
        assert!("both".parse::<Mode>().is_err());
    }
}
