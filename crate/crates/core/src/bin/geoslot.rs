use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geoslot::config::RunConfig;
use geoslot::eval::{evaluate, EvalOptions, DEFAULT_SDM_SIGMA_M};
use geoslot::export::export_attention;
use geoslot::gradsuite::{loss_suite, primitive_suite, spectral_suite, LOSS_TOL};
use geoslot::infolab::{dpi_check, mi_probe, random_chain, ProbeOptions};
use geoslot::synth::{generate_dataset, load_dataset, SceneSpec};
use geoslot::trainer::{load_checkpoint, train, TrainOptions};
use geoslot::{Ablation, Error, Mode, Model, Result};

#[derive(Parser)]
#[command(name = "geoslot", version, about = "Object-centric cross-view retrieval on synthetic scenes")]
struct Cli {
    /// JSON run configuration with optional `train`, `scene` and `n_locations` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and scene seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a dataset and write it with its manifest.
    GenData {
        #[arg(long)]
        n_locations: Option<usize>,
        /// Distractors, occlusion and weather.
        #[arg(long)]
        corrupted: bool,
    },
    /// Train on the train split and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// full, no-cacs, no-struct, no-rd, ocva-only or align-only.
        #[arg(long, default_value = "full")]
        ablation: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Retrieval metrics for a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "augmented")]
        mode: Mode,
        /// Where to write the metrics JSON; defaults to `<out>/metrics.json`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// k-NN mutual information between pooled view representations.
    MiProbe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        draws: usize,
    },
    /// Data processing inequality on random Markov chains.
    DpiCheck {
        #[arg(long, default_value_t = 100)]
        chains: usize,
        #[arg(long, default_value_t = 4)]
        states: usize,
    },
    /// Finite-difference gradient checks; fails if any suite exceeds its tolerance.
    GradCheck {
        /// Tolerance for the loss-term suite.
        #[arg(long, default_value_t = LOSS_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
    /// Dump attention maps, routing weights and concept graphs of one location.
    ExportAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        location: usize,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    let full = Ablation::FULL;
    Ok(match s {
        "full" => full,
        "no-cacs" => Ablation { cacs: false, ..full },
        "no-struct" => Ablation { structure: false, ..full },
        "no-rd" => Ablation { rd: false, ..full },
        "ocva-only" => Ablation::OCVA_ONLY,
        "align-only" => Ablation::ALIGN_ONLY,
        other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut rc = match &cli.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        rc.train.seed = s;
        rc.scene.seed = s;
    }
    Ok(rc)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let rc = load_config(&cli)?;
    let out = &cli.out;
    match cli.cmd {
        Cmd::GenData { n_locations, corrupted } => {
            let spec = if corrupted { SceneSpec::corrupted() } else { rc.scene.clone() };
            let n = n_locations.unwrap_or(rc.n_locations);
            let m = generate_dataset(&spec, n, cli.seed.unwrap_or(rc.scene.seed), out)?;
            println!("{} locations ({} train, {} test) in {}", n, m.splits.train.len(), m.splits.test.len(), out.display());
            println!("manifest sha256 {}", m.checksum()?);
        }
        Cmd::Train { data, ablation, epochs } => {
            let ds = load_dataset(&data)?;
            let mut cfg = rc.train.with_ablation(parse_ablation(&ablation)?);
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let mut model = Model::new(cfg)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                verbose: true,
            };
            let report = train(&mut model, &ds.train(), &opts)?;
            println!("{} steps in {:.1}s", report.steps, report.seconds);
            if let Some(l) = report.epoch_loss.last() {
                println!("final loss {l:.6}");
            }
            if let Some(p) = report.checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            mode,
            metrics,
            split,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let pairs = match split.as_str() {
                "test" => ds.test(),
                "train" => ds.train(),
                "all" => ds.pairs.iter().collect(),
                other => return Err(Error::Config(format!("unknown split {other:?}"))),
            };
            let opts = EvalOptions {
                mode,
                sdm_sigma_m: DEFAULT_SDM_SIGMA_M,
                seed: rc.train.seed,
            };
            let ev = evaluate(&model, &pairs, &opts)?;
            for w in &ev.warnings {
                eprintln!("warning: {w}");
            }
            let json = ev.report.to_json()?;
            write_out(&metrics.unwrap_or_else(|| out.join("metrics.json")), &json)?;
            print!("{json}");
        }
        Cmd::MiProbe { ckpt, data, draws } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let opts = ProbeOptions {
                draws,
                seed: rc.train.seed,
                ..ProbeOptions::default()
            };
            let json = mi_probe(&model, &ds.manifest, &opts)?.to_json()?;
            write_out(&out.join("mi.json"), &json)?;
            print!("{json}");
        }
        Cmd::DpiCheck { chains, states } => {
            let mut rng = ChaCha8Rng::seed_from_u64(rc.train.seed);
            let mut text = String::from("chain,i_head_mid,i_head_tail,slack,holds\n");
            let mut violations = 0;
            for c in 0..chains {
                let r = dpi_check(&random_chain(&mut rng, states, 2))?;
                violations += usize::from(!r.holds);
                text.push_str(&format!("{c},{:.12},{:.12},{:.3e},{}\n", r.i_head_mid, r.i_head_tail, r.slack, r.holds));
            }
            write_out(&out.join("dpi.csv"), &text)?;
            println!("{chains} chains, {violations} violations");
            if violations > 0 {
                return Err(Error::Contract(format!("{violations} chains violate the inequality")));
            }
        }
        Cmd::GradCheck { tol, trials } => {
            let seed = rc.train.seed;
            let mut results = primitive_suite(trials, seed)?;
            results.extend(spectral_suite(trials.div_ceil(10), seed)?);
            results.extend(loss_suite(tol, 4, seed)?);
            let mut failed = 0;
            for r in &results {
                println!(
                    "{:<5} {:<24} checks {:>5}  max rel err {:.3e}  tol {:.0e}",
                    if r.passed() { "ok" } else { "FAIL" },
                    r.name,
                    r.checks,
                    r.max_rel_err,
                    r.tol
                );
                failed += usize::from(!r.passed());
            }
            write_out(&out.join("grad_check.json"), &serde_json::to_string_pretty(&results)?)?;
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} gradient checks above tolerance")));
            }
        }
        Cmd::ExportAttn { ckpt, data, location } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let pair = ds
                .pairs
                .iter()
                .find(|p| p.location_id == location)
                .ok_or_else(|| Error::Input(format!("no location {location} in dataset")))?;
            for p in export_attention(&model, pair, out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
