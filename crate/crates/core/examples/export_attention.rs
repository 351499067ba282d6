//! Train briefly, then dump attention maps, routing weights and concept graphs
//! of one test location as CSV.

use geoslot::export::export_attention;
use geoslot::synth::{Dataset, SceneSpec};
use geoslot::trainer::{train, TrainOptions};
use geoslot::{Model, TrainConfig};

fn main() -> geoslot::Result<()> {
    let data = Dataset::generate(&SceneSpec::default(), 24, 7)?;
    let mut model = Model::new(TrainConfig {
        epochs: 3,
        ..TrainConfig::desk()
    })?;
    train(&mut model, &data.train(), &TrainOptions::default())?;
    let dir = std::env::temp_dir().join("geoslot-attention");
    for p in export_attention(&model, data.test()[0], &dir)? {
        println!("{}", p.display());
    }
    Ok(())
}
