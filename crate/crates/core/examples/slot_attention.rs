//! Slot attention on one scene: attention mass per slot and reconstruction loss.

use geoslot::ocl::rec_loss;
use geoslot::synth::{render_pair, SceneSpec};
use geoslot::{Graph, Model, TrainConfig};

fn main() -> geoslot::Result<()> {
    let model = Model::new(TrainConfig::desk())?;
    let pair = render_pair(&SceneSpec::default(), 0, 8, 0)?;
    let (fq, fg) = (model.featurize(&pair.raw_q)?, model.featurize(&pair.raw_g)?);
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, false);
    let tq = g.constant(fq.tokens.clone());
    let tg = g.constant(fg.tokens.clone());
    let sq = model.run_slots(&mut g, &b, tq, None)?;
    let sg = model.run_slots(&mut g, &b, tg, None)?;
    let a = g.value(sq.a_a).clone();
    for k in 0..a.rows() {
        let mass: f64 = a.row(k).iter().sum();
        println!("slot {k}: attention mass {mass:.3}");
    }
    let l = rec_loss(&mut g, sq.recon, tq, sg.recon, tg)?;
    println!("reconstruction loss {:.4}", g.scalar_value(l));
    Ok(())
}
