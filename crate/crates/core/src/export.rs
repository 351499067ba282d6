//! CSV dumps of slot attention, routing weights and concept graphs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Inspection, Model};
use crate::synth::ScenePair;
use crate::tensor::Tensor;

pub const ATTENTION_CSV: &str = "attention.csv";
pub const ROUTING_CSV: &str = "routing.csv";
pub const GRAPH_CSV: &str = "graph.csv";
pub const SPECTRUM_CSV: &str = "spectrum.csv";

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

fn writer(dir: &Path, name: &str, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    Ok(w)
}

fn matrix_rows(w: &mut csv::Writer<fs::File>, view: &str, map: &str, t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            let rec = [view.to_string(), map.to_string(), r.to_string(), c.to_string(), format!("{:.9}", t.at(r, c))];
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    Ok(())
}

/// Writes the four CSV files for both views of `pair` into `dir` and returns
/// their paths.
pub fn export_attention(model: &Model, pair: &ScenePair, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let views: Vec<(&str, Inspection)> = vec![
        ("query", model.inspect(&model.featurize(&pair.raw_q)?)?),
        ("gallery", model.inspect(&model.featurize(&pair.raw_g)?)?),
    ];

    let mut att = writer(dir, ATTENTION_CSV, &["view", "map", "slot", "cell", "value"])?;
    let mut route = writer(dir, ROUTING_CSV, &["view", "slot", "w_cv"])?;
    let mut graph = writer(dir, GRAPH_CSV, &["view", "map", "i", "j", "value"])?;
    let mut spec = writer(dir, SPECTRUM_CSV, &["view", "index", "eigenvalue"])?;
    for (view, ins) in &views {
        matrix_rows(&mut att, view, "a_a", &ins.a_a)?;
        matrix_rows(&mut att, view, "a_d", &ins.a_d)?;
        matrix_rows(&mut att, view, "a_hat", &ins.a_hat)?;
        for (k, w) in ins.w_cv.iter().enumerate() {
            route.write_record([*view, &k.to_string(), &format!("{w:.9}")]).map_err(csv_err)?;
        }
        matrix_rows(&mut graph, view, "g", &ins.graph)?;
        matrix_rows(&mut graph, view, "u", &ins.embedding)?;
        for (i, l) in ins.spectrum.iter().enumerate() {
            spec.write_record([*view, &i.to_string(), &format!("{l:.12}")]).map_err(csv_err)?;
        }
    }
    for w in [&mut att, &mut route, &mut graph, &mut spec] {
        w.flush()?;
    }
    Ok([ATTENTION_CSV, ROUTING_CSV, GRAPH_CSV, SPECTRUM_CSV].iter().map(|n| dir.join(n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradsuite::micro_config;

    #[test]
    fn writes_all_tables() {
        let model = Model::new(micro_config()).unwrap();
        let spec = crate::synth::SceneSpec {
            grid_size: 16,
            n_objects: 3,
            ..Default::default()
        };
        let pair = crate::synth::render_pair(&spec, 0, 4, 0).unwrap();
        let dir = std::env::temp_dir().join(format!("geoslot-export-{}", std::process::id()));
        let files = export_attention(&model, &pair, &dir).unwrap();
        let att = fs::read_to_string(&files[0]).unwrap();
        // 2 views × 3 maps × K slots × N cells, plus the header.
        let (k, n) = (model.cfg.k_slots, model.cfg.n_tokens());
        assert_eq!(att.lines().count(), 1 + 2 * 3 * k * n);
        let route = fs::read_to_string(&files[1]).unwrap();
        assert_eq!(route.lines().count(), 1 + 2 * k);
        fs::remove_dir_all(&dir).unwrap();
    }
}
