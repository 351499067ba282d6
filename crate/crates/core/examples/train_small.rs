//! Train the desk model on a small nuisance-free dataset and print the loss curve.

use geoslot::synth::{Dataset, SceneSpec};
use geoslot::trainer::{train, TrainOptions};
use geoslot::{Model, TrainConfig};

fn main() -> geoslot::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let spec = SceneSpec {
        distractor_rate: 0.0,
        occlusion_rate: 0.0,
        ..SceneSpec::default()
    };
    let data = Dataset::generate(&spec, n, 7)?;
    let pairs = data.train();

    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::desk()
    };
    let mut model = Model::new(cfg)?;
    let report = train(&mut model, &pairs, &TrainOptions { verbose: true, ..Default::default() })?;
    println!(
        "{} steps in {:.1}s ({:.3}s/step)",
        report.steps,
        report.seconds,
        report.seconds / report.steps as f64
    );
    for e in 0..epochs {
        println!("epoch {e}: {:.4}", report.epoch_mean(e).unwrap_or(f64::NAN));
    }
    Ok(())
}
