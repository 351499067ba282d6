//! Acceptance criteria A1 to A11. Each test prints one `A<n> PASS|FAIL` line.
//! Run with `cargo test --release --test acceptance -- --nocapture`.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use geoslot::csrr::{alignment_residual, procrustes_rotation};
use geoslot::eval::{evaluate, polarization, EvalOptions, DEFAULT_SDM_SIGMA_M};
use geoslot::gradsuite::{loss_suite, primitive_suite, LOSS_TOL};
use geoslot::infolab::{
    binary_symmetric, dpi_check, exact_mi, mi_probe, nce_bound_check, random_chain, ChainSpec, JointTable,
    ProbeOptions,
};
use geoslot::synth::{Dataset, SceneSpec, ScenePair};
use geoslot::trainer::{train, TrainReport, TrainOptions};
use geoslot::{Ablation, Mode, Model, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 4] = [0, 1, 2, 3];

fn verdict(id: &str, ok: bool, detail: String) {
    println!("{id} {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{id}: {detail}");
}

fn r_at_1(model: &Model, pairs: &[&ScenePair], mode: Mode) -> f64 {
    let opts = EvalOptions {
        mode,
        sdm_sigma_m: DEFAULT_SDM_SIGMA_M,
        seed: 0,
    };
    evaluate(model, pairs, &opts).unwrap().report.r_at_1
}

struct CleanRun {
    data: Dataset,
    model: Model,
    report: TrainReport,
}

fn clean_run() -> &'static CleanRun {
    static RUN: OnceLock<CleanRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let data = Dataset::generate(&SceneSpec::default(), 64, 7).unwrap();
        let mut model = Model::new(TrainConfig::desk()).unwrap();
        let report = train(&mut model, &data.train(), &TrainOptions::default()).unwrap();
        CleanRun { data, model, report }
    })
}

struct CorruptedRuns {
    data: Dataset,
    full: Model,
    ocva_only: Model,
    align_only: Model,
    no_cacs: Model,
}

fn corrupted_runs() -> &'static Vec<CorruptedRuns> {
    static RUNS: OnceLock<Vec<CorruptedRuns>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let data = Dataset::generate(&SceneSpec::corrupted(), 64, seed).unwrap();
                let fit = |ab: Ablation| {
                    let cfg = TrainConfig {
                        seed,
                        ..TrainConfig::desk()
                    };
                    let mut m = Model::new(cfg.with_ablation(ab)).unwrap();
                    train(&mut m, &data.train(), &TrainOptions::default()).unwrap();
                    m
                };
                CorruptedRuns {
                    full: fit(Ablation::FULL),
                    ocva_only: fit(Ablation::OCVA_ONLY),
                    align_only: fit(Ablation::ALIGN_ONLY),
                    no_cacs: fit(Ablation {
                        cacs: false,
                        ..Ablation::FULL
                    }),
                    data,
                }
            })
            .collect()
    })
}

#[test]
fn a01_gradient_suite() {
    let t = Instant::now();
    let prims = primitive_suite(1000, 1).unwrap();
    let losses = loss_suite(LOSS_TOL, 4, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let prim_worst = prims.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let loss_worst = losses.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let ok = prims.iter().all(|r| r.max_rel_err < 1e-6) && losses.iter().all(|r| r.max_rel_err < 1e-3) && secs < 120.0;
    verdict(
        "A1",
        ok,
        format!("primitives max {prim_worst:.2e} (<1e-6), loss terms max {loss_worst:.2e} (<1e-3), {secs:.1}s"),
    );
}

#[test]
fn a02_clean_retrieval() {
    let run = clean_run();
    let r1 = r_at_1(&run.model, &run.data.test(), Mode::Augmented);
    let ok = r1 >= 0.95 && run.report.seconds < 600.0;
    verdict("A2", ok, format!("R@1 {r1:.3} (>=0.95), trained in {:.0}s", run.report.seconds));
}

#[test]
fn a03_training_stability() {
    let loss = &clean_run().report.epoch_loss;
    let ma: Vec<f64> = loss.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let violations = ma.windows(2).filter(|w| w[1] >= w[0]).count();
    verdict(
        "A3",
        violations == 0,
        format!(
            "5-epoch moving average {:.4} -> {:.4}, {violations} non-decreasing steps",
            ma[0],
            ma[ma.len() - 1]
        ),
    );
}

#[test]
fn a04_ablation_direction() {
    let mut holds = 0;
    let mut detail = Vec::new();
    for (seed, run) in SEEDS.iter().zip(corrupted_runs()) {
        let test = run.data.test();
        let full = r_at_1(&run.full, &test, Mode::Augmented);
        let ocva = r_at_1(&run.ocva_only, &test, Mode::Augmented);
        let base = r_at_1(&run.align_only, &test, Mode::Vanilla);
        holds += usize::from(full >= ocva && ocva >= base);
        detail.push(format!("s{seed} {full:.3}/{ocva:.3}/{base:.3}"));
    }
    verdict("A4", holds >= 3, format!("full/ocva-only/align-only R@1: {} ({holds}/4 ordered)", detail.join(", ")));
}

#[test]
fn a05_rd_parity() {
    let mut holds = 0;
    let mut detail = Vec::new();
    let mut counter_ok = true;
    for (seed, run) in SEEDS.iter().zip(corrupted_runs()) {
        let test = run.data.test();
        let before = run.full.slot_attention_calls();
        let van = r_at_1(&run.full, &test, Mode::Vanilla);
        counter_ok &= run.full.slot_attention_calls() == before;
        let aug = r_at_1(&run.full, &test, Mode::Augmented);
        counter_ok &= run.full.slot_attention_calls() > before;
        holds += usize::from((van - aug).abs() <= 0.10);
        detail.push(format!("s{seed} {van:.3}/{aug:.3}"));
    }
    verdict(
        "A5",
        holds >= 3 && counter_ok,
        format!(
            "vanilla/augmented R@1: {} ({holds}/4 within 0.10), vanilla slot-attention calls 0: {counter_ok}",
            detail.join(", ")
        ),
    );
}

#[test]
fn a06_mi_probe() {
    let run = clean_run();
    let r = mi_probe(&run.model, &run.data.manifest, &ProbeOptions::default()).unwrap();
    let (joint, cond) = (r.i_zhat_q_zhat_g, r.i_zhat_q_zhat_g_given_y);
    let ok = cond.abs() < 0.1 && joint > cond + 0.05;
    verdict("A6", ok, format!("I(Zq;Zg) {joint:.3} nats, I(Zq;Zg|Y) {cond:.3} nats ({} samples)", r.samples));
}

fn chain_mi_oracle(chain: &ChainSpec, stage: usize) -> f64 {
    // Joint table built by explicit path enumeration.
    let n = chain.head.len();
    let m = chain.transitions[stage - 1][0].len();
    let mut p = vec![0.0; n * m];
    let mut path = vec![0usize; stage + 1];
    fn walk(chain: &ChainSpec, depth: usize, stage: usize, path: &mut Vec<usize>, prob: f64, p: &mut [f64], m: usize) {
        if depth == stage {
            p[path[0] * m + path[stage]] += prob;
            return;
        }
        let t = &chain.transitions[depth];
        for (b, &tb) in t[path[depth]].iter().enumerate() {
            path[depth + 1] = b;
            walk(chain, depth + 1, stage, path, prob * tb, p, m);
        }
    }
    for a in 0..n {
        path[0] = a;
        walk(chain, 0, stage, &mut path, chain.head[a], &mut p, m);
    }
    exact_mi(&JointTable::new(vec![n, m], p).unwrap(), 0, 1).unwrap()
}

#[test]
fn a07_dpi_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_slack = f64::INFINITY;
    for _ in 0..100 {
        let r = dpi_check(&random_chain(&mut rng, 4, 2)).unwrap();
        min_slack = min_slack.min(r.slack);
    }
    let bsc = ChainSpec {
        head: vec![0.5, 0.5],
        transitions: vec![binary_symmetric(0.1), binary_symmetric(0.2)],
    };
    let copy_then_merge = ChainSpec {
        head: vec![0.2, 0.3, 0.5],
        transitions: vec![
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        ],
    };
    let mut worst = 0.0f64;
    for chain in [&bsc, &copy_then_merge] {
        let r = dpi_check(chain).unwrap();
        worst = worst.max((r.i_head_mid - chain_mi_oracle(chain, 1)).abs());
        worst = worst.max((r.i_head_tail - chain_mi_oracle(chain, 2)).abs());
    }
    let ok = min_slack >= -1e-12 && worst < 1e-10;
    verdict("A7", ok, format!("min slack {min_slack:.3e} over 100 chains, hand-built chains max |dI| {worst:.1e}"));
}

fn rot(theta: f64, reflect: bool) -> Tensor {
    let (s, c) = theta.sin_cos();
    let m = if reflect { -1.0 } else { 1.0 };
    Tensor::from_rows(&[vec![c, -s * m], vec![s, c * m]]).unwrap()
}

#[test]
fn a08_procrustes_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst_gap, mut worst_inv) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..50 {
        let k = rng.random_range(3..9);
        let u_q = Tensor::from_fn(&[k, 2], |_| rng.random_range(-1.0..1.0));
        let u_g = Tensor::from_fn(&[k, 2], |_| rng.random_range(-1.0..1.0));
        let closed = alignment_residual(&u_q, &u_g, &procrustes_rotation(&u_q, &u_g).unwrap()).unwrap();
        let mut grid = f64::INFINITY;
        for deg in 0..360 {
            for reflect in [false, true] {
                let r = rot((deg as f64).to_radians(), reflect);
                grid = grid.min(alignment_residual(&u_q, &u_g, &r).unwrap());
            }
        }
        worst_gap = worst_gap.max(closed - grid);
        let r = rot(rng.random_range(0.0..std::f64::consts::TAU), rng.random());
        let g2 = u_g.matmul(&r).unwrap();
        let moved = alignment_residual(&u_q, &g2, &procrustes_rotation(&u_q, &g2).unwrap()).unwrap();
        worst_inv = worst_inv.max((moved - closed).abs());
    }
    let ok = worst_gap <= 1e-9 && worst_inv <= 1e-10;
    verdict("A8", ok, format!("max(closed - grid) {worst_gap:.2e}, rotation invariance {worst_inv:.1e}"));
}

#[test]
fn a09_infonce_bound() {
    let mut detail = Vec::new();
    let mut ok = true;
    for (i, rho) in [0.0, 0.5, 0.9].into_iter().enumerate() {
        let r = nce_bound_check(rho, 1.0, 32, 200, 0.05, 90 + i as u64).unwrap();
        ok &= r.holds;
        detail.push(format!("rho {rho}: bound {:.3} <= I {:.3}", r.bound, r.exact_mi));
    }
    verdict("A9", ok, detail.join(", "));
}

#[test]
fn a10_cacs_polarization() {
    let mut holds = 0;
    let mut detail = Vec::new();
    for (seed, run) in SEEDS.iter().zip(corrupted_runs()) {
        let test = run.data.test();
        let with = polarization(&run.full, &test).unwrap();
        let without = polarization(&run.no_cacs, &test).unwrap();
        holds += usize::from(with < without);
        detail.push(format!("s{seed} {with:.4}/{without:.4}"));
    }
    verdict("A10", holds >= 3, format!("mean w(1-w) with/without cacs: {} ({holds}/4)", detail.join(", ")));
}

fn pipeline(dir: &Path) -> [Vec<u8>; 3] {
    std::fs::write(dir.join("run.json"), r#"{"n_locations": 16, "train": {"epochs": 2}}"#).unwrap();
    let run = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_geoslot")).args(args).current_dir(dir).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let common = ["--config", "run.json", "--seed", "21"];
    run(&[&["gen-data", "--out", "data"][..], &common].concat());
    run(&[&["train", "--data", "data", "--out", "run"][..], &common].concat());
    run(&[&["eval", "--data", "data", "--ckpt", "run/checkpoint.igeo", "--metrics", "metrics.json"][..], &common].concat());
    ["data/manifest.json", "run/checkpoint.igeo", "metrics.json"].map(|f| std::fs::read(dir.join(f)).unwrap())
}

#[test]
fn a11_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (pipeline(a.path()), pipeline(b.path()));
    let same: Vec<bool> = x.iter().zip(&y).map(|(p, q)| p == q).collect();
    verdict(
        "A11",
        same.iter().all(|&s| s),
        format!("manifest/checkpoint/metrics byte-identical: {same:?}"),
    );
}
