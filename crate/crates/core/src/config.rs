//! Model and training configuration.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::synth::SceneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

/// How slot updates pool the attended values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregateMode {
    /// Attention renormalized over inputs per slot.
    Mean,
    /// Raw attention-weighted sum.
    Sum,
}

/// Which objective terms and modules are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub cacs: bool,
    #[serde(rename = "struct")]
    pub structure: bool,
    pub rd: bool,
    pub ocva: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        cacs: true,
        structure: true,
        rd: true,
        ocva: true,
    };
    pub const OCVA_ONLY: Ablation = Ablation {
        cacs: false,
        structure: false,
        rd: false,
        ocva: true,
    };
    pub const ALIGN_ONLY: Ablation = Ablation {
        cacs: false,
        structure: false,
        rd: false,
        ocva: false,
    };

    /// Slot attention runs during training whenever any object-centric term
    /// needs it.
    pub fn ocl_active(&self) -> bool {
        self.ocva || self.cacs || self.structure
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub preset: Preset,

    pub grid_size: usize,
    pub patch: usize,
    /// Feature channels `C` of the frozen featurizer.
    pub channels: usize,
    pub k_slots: usize,
    pub c_slot: usize,
    pub iters: usize,
    pub aggregate_mode: AggregateMode,
    /// Decoder family; only `"mixture"` is implemented.
    pub decoder: String,
    pub dec_hidden: usize,
    pub heads: usize,
    pub rank: usize,
    pub c_cond: usize,
    pub mix_depth: usize,
    pub d_depth: usize,
    pub n_rows: usize,
    pub alpha: f64,

    pub tau: f64,
    pub symmetric_nce: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// Sample initial slots around their learned mean while training.
    pub slot_noise: bool,
    /// Random quarter turn and one-cell cyclic shift of each training view.
    pub augment: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            preset: Preset::Desk,
            grid_size: 32,
            patch: 4,
            channels: 64,
            k_slots: 8,
            c_slot: 64,
            iters: 3,
            aggregate_mode: AggregateMode::Mean,
            decoder: "mixture".into(),
            dec_hidden: 64,
            heads: 4,
            rank: 4,
            c_cond: 64,
            mix_depth: 2,
            d_depth: 32,
            n_rows: 4,
            alpha: 0.8,
            tau: 0.1,
            symmetric_nce: true,
            lambda1: 0.05,
            lambda2: 0.05,
            lambda3: 0.1,
            lr: 2e-3,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 30,
            warmup_ratio: 0.1,
            seed: 7,
            slot_noise: true,
            augment: true,
            ablation: Ablation::FULL,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            preset: Preset::Paper,
            k_slots: 16,
            c_slot: 1024,
            dec_hidden: 1024,
            d_depth: 1024,
            n_rows: 4,
            lambda3: 0.85,
            lr: 6.5e-4,
            batch_size: 8,
            epochs: 40,
            ..TrainConfig::desk()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn side(&self) -> usize {
        self.grid_size / self.patch
    }

    pub fn n_tokens(&self) -> usize {
        self.side() * self.side()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.d_depth * self.n_rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.grid_size % self.patch != 0 {
            return Err(config_err!(
                "grid_size {} not divisible by patch {}",
                self.grid_size,
                self.patch
            ));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("k_slots", self.k_slots),
            ("c_slot", self.c_slot),
            ("iters", self.iters),
            ("dec_hidden", self.dec_hidden),
            ("heads", self.heads),
            ("rank", self.rank),
            ("c_cond", self.c_cond),
            ("d_depth", self.d_depth),
            ("n_rows", self.n_rows),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(config_err!("{name} must be positive"));
            }
        }
        if self.decoder != "mixture" {
            return Err(config_err!("unknown decoder {:?}", self.decoder));
        }
        if self.n_tokens() % self.heads != 0 {
            return Err(config_err!(
                "{} tokens not divisible by {} heads",
                self.n_tokens(),
                self.heads
            ));
        }
        if self.ablation.structure && self.rank + 1 > self.k_slots {
            return Err(config_err!(
                "rank {} needs at least {} slots",
                self.rank,
                self.rank + 1
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return Err(config_err!("tau must be positive"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch_size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(config_err!("warmup_ratio must lie in [0, 1)"));
        }
        if self.ablation.rd && !self.ablation.ocva {
            return Err(config_err!("relational distillation needs the augmented path (ocva)"));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// JSON with object keys sorted.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// CRC32 of [`TrainConfig::canonical_json`], as lowercase hex.
    pub fn fingerprint(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.canonical_json().as_bytes()))
    }
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub n_locations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            scene: SceneSpec::default(),
            n_locations: 64,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err!("invalid config: {e}"))
    }
}
