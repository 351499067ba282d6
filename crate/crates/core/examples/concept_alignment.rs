//! Cross-view concept routing and spectral structure alignment for one pair.

use geoslot::csrr::struct_loss;
use geoslot::synth::{render_pair, SceneSpec};
use geoslot::{Graph, Model, TrainConfig};

fn main() -> geoslot::Result<()> {
    let model = Model::new(TrainConfig::desk())?;
    let pair = render_pair(&SceneSpec::corrupted(), 5, 8, 0)?;
    let (fq, fg) = (model.featurize(&pair.raw_q)?, model.featurize(&pair.raw_g)?);
    let (wq, wg) = model.routing(&fq, &fg)?;
    println!("w_q {:.3?}\nw_g {:.3?}", wq, wg);

    let mut g = Graph::new();
    let b = model.params.bind(&mut g, false);
    let tq = g.constant(fq.tokens.clone());
    let tg = g.constant(fg.tokens.clone());
    let sq = model.run_slots(&mut g, &b, tq, None)?;
    let sg = model.run_slots(&mut g, &b, tg, None)?;
    let selq = model.select(&mut g, &b, sq.a_d, sg.a_d)?;
    let selg = model.select(&mut g, &b, sg.a_d, sq.a_d)?;
    let s = struct_loss(&mut g, selq.a_hat, selg.a_hat, model.cfg.rank)?;
    println!("query spectrum   {:.4?}", s.embed_q.spectrum);
    println!("gallery spectrum {:.4?}", s.embed_g.spectrum);
    match s.loss {
        Some(l) => println!("structure loss {:.5}", g.scalar_value(l)),
        None => println!("degenerate spectrum, structure loss skipped"),
    }
    Ok(())
}
