//! Render clean and corrupted cross-view pairs and write a small dataset.

use geoslot::synth::{generate_dataset, load_dataset, render_pair, SceneSpec};

fn main() -> geoslot::Result<()> {
    for (name, spec) in [("clean", SceneSpec::default()), ("corrupted", SceneSpec::corrupted())] {
        let p = render_pair(&spec, 3, 16, 0)?;
        println!(
            "{name:>9}: pixel disagreement {:.4}, nuisance {:?}",
            p.raw_q.rotated((4 - p.nuisance.rotation_deg as usize / 90) % 4).mean_abs_diff(&p.raw_g),
            p.nuisance
        );
    }
    let dir = std::env::temp_dir().join("geoslot-synth-example");
    let m = generate_dataset(&SceneSpec::corrupted(), 16, 7, &dir)?;
    let back = load_dataset(&dir)?;
    println!("wrote {} pairs to {} (manifest {})", back.pairs.len(), dir.display(), &m.checksum()?[..16]);
    Ok(())
}
