//! Train the desk preset on nuisance-free scenes and report retrieval in both
//! inference modes.

use geoslot::eval::{evaluate, EvalOptions, DEFAULT_SDM_SIGMA_M};
use geoslot::synth::{Dataset, SceneSpec, Weather};
use geoslot::trainer::{train, TrainOptions};
use geoslot::{Mode, Model, TrainConfig};

fn main() -> geoslot::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let spec = SceneSpec {
        distractor_rate: 0.0,
        occlusion_rate: 0.0,
        weather: Weather::default(),
        ..SceneSpec::default()
    };
    let data = Dataset::generate(&spec, n, 7)?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::desk()
    };
    let mut model = Model::new(cfg)?;
    let report = train(
        &mut model,
        &data.train(),
        &TrainOptions {
            verbose: true,
            ..Default::default()
        },
    )?;
    println!("trained {} steps in {:.1}s", report.steps, report.seconds);
    for (e, l) in report.epoch_loss.iter().enumerate() {
        println!("epoch {e:>2}: {l:.4}");
    }
    for mode in [Mode::Augmented, Mode::Vanilla] {
        let ev = evaluate(
            &model,
            &data.test(),
            &EvalOptions {
                mode,
                sdm_sigma_m: DEFAULT_SDM_SIGMA_M,
                seed: 7,
            },
        )?;
        print!("{}", ev.report.to_json()?);
    }
    Ok(())
}
