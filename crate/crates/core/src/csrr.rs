//! Concept graphs, normalized Laplacians, spectral embeddings and the
//! orthogonal Procrustes structural loss.

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, numeric_err, shape_err, Result};
use crate::linalg::svd_small;
use crate::tensor::Tensor;

pub const DEGREE_FLOOR: f64 = 1e-8;
/// Eigenvalues below this are treated as trivial.
pub const TRIVIAL_EIGENVALUE: f64 = 1e-6;

/// Cosine-similarity graph of the slot maps, affinely mapped into [0, 1].
/// Returns `(G, degrees K × 1)`.
pub fn concept_graph(g: &mut Graph, maps: Var) -> Result<(Var, Var)> {
    let k = g.shape(maps)[0];
    if k < 2 {
        return Err(config_err!("a concept graph needs at least 2 slots, got {k}"));
    }
    let unit = g.l2_normalize_rows(maps)?;
    let ut = g.transpose(unit)?;
    let cos = g.matmul(unit, ut)?;
    let off = g.constant(Tensor::from_fn(&[k, k], |i| if i / k == i % k { 0.0 } else { 1.0 }));
    let eye = g.constant(Tensor::eye(k));
    let cos = g.mul(cos, off)?;
    let cos = g.add(cos, eye)?;
    let gm = g.add_scalar(cos, 1.0)?;
    let gm = g.scale(gm, 0.5)?;
    let gm = g.clamp(gm, 0.0, 1.0)?;
    let deg = g.sum_axis(gm, 1)?;
    let deg = g.clamp(deg, DEGREE_FLOOR, f64::MAX)?;
    Ok((gm, deg))
}

/// `I − D^{-1/2} G D^{-1/2}`, symmetrized.
pub fn normalized_laplacian(g: &mut Graph, gm: Var, deg: Var) -> Result<Var> {
    let k = g.shape(gm)[0];
    if g.value(deg).data().iter().any(|&d| !(d > 0.0)) {
        return Err(numeric_err!("zero degree in concept graph"));
    }
    let root = g.sqrt(deg)?;
    let ones = g.constant(Tensor::full(&[k, 1], 1.0));
    let dinv = g.div(ones, root)?;
    let dinv_t = g.transpose(dinv)?;
    let m = g.mul(gm, dinv)?;
    let m = g.mul(m, dinv_t)?;
    let eye = g.constant(Tensor::eye(k));
    let l = g.sub(eye, m)?;
    let lt = g.transpose(l)?;
    let s = g.add(l, lt)?;
    g.scale(s, 0.5)
}

#[derive(Clone, Debug)]
pub struct SpectralEmbedding {
    /// `K × r`, zero columns when the spectrum is degenerate.
    pub u: Var,
    /// Retained eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// All eigenvalues of the Laplacian, ascending.
    pub spectrum: Vec<f64>,
    pub degenerate: bool,
}

/// The `r` eigenvectors with the smallest non-trivial eigenvalues.
pub fn spectral_embed(g: &mut Graph, lap: Var, r: usize) -> Result<SpectralEmbedding> {
    let k = g.shape(lap)[0];
    if r == 0 || r + 1 > k {
        return Err(config_err!("rank {r} needs 1 <= r <= K-1 = {}", k.saturating_sub(1)));
    }
    let (vals, vecs) = g.sym_eig(lap)?;
    let spectrum = g.value(vals).data().to_vec();
    let keep: Vec<usize> = (0..k)
        .filter(|&i| spectrum[i] >= TRIVIAL_EIGENVALUE)
        .take(r)
        .collect();
    let eigenvalues: Vec<f64> = keep.iter().map(|&i| spectrum[i]).collect();
    let degenerate = keep.len() < r;
    let u = if keep.is_empty() {
        g.constant(Tensor::zeros(&[k, r]))
    } else {
        let sel = g.gather(vecs, 1, &keep)?;
        if degenerate {
            let pad = g.constant(Tensor::zeros(&[k, r - keep.len()]));
            g.concat(&[sel, pad], 1)?
        } else {
            sel
        }
    };
    Ok(SpectralEmbedding {
        u,
        eigenvalues,
        spectrum,
        degenerate,
    })
}

/// Closed-form orthogonal alignment of `u_g` onto `u_q`: `Q* = A Bᵀ` from the
/// SVD of `u_gᵀ u_q`.
pub fn procrustes_rotation(u_q: &Tensor, u_g: &Tensor) -> Result<Tensor> {
    if u_q.shape() != u_g.shape() {
        return Err(shape_err!("embeddings {:?} vs {:?}", u_q.shape(), u_g.shape()));
    }
    let m = u_g.transpose()?.matmul(u_q)?;
    let (a, _, bt) = svd_small(&m)?;
    a.matmul(&bt)
}

/// `(Q*, ‖u_q − u_g Q*‖²_F)` with `Q*` held constant for differentiation.
pub fn procrustes_align(g: &mut Graph, u_q: Var, u_g: Var) -> Result<(Tensor, Var)> {
    let q = procrustes_rotation(g.value(u_q), g.value(u_g))?;
    let qv = g.constant(q.clone());
    let rot = g.matmul(u_g, qv)?;
    let d = g.sub(u_q, rot)?;
    let d2 = g.square(d)?;
    Ok((q, g.sum_all(d2)?))
}

/// Plain-value Procrustes loss for a given orthogonal `q`.
pub fn alignment_residual(u_q: &Tensor, u_g: &Tensor, q: &Tensor) -> Result<f64> {
    let rot = u_g.matmul(q)?;
    Ok(u_q
        .data()
        .iter()
        .zip(rot.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}

pub struct StructOutput {
    /// `None` when either view's spectrum is degenerate.
    pub loss: Option<Var>,
    pub graph_q: Var,
    pub graph_g: Var,
    pub embed_q: SpectralEmbedding,
    pub embed_g: SpectralEmbedding,
}

/// Graph → Laplacian → embedding per view, then Procrustes.
pub fn struct_loss(g: &mut Graph, maps_q: Var, maps_g: Var, r: usize) -> Result<StructOutput> {
    let embed = |g: &mut Graph, maps: Var| -> Result<(Var, SpectralEmbedding)> {
        let (gm, deg) = concept_graph(g, maps)?;
        let lap = normalized_laplacian(g, gm, deg)?;
        Ok((gm, spectral_embed(g, lap, r)?))
    };
    let (graph_q, embed_q) = embed(g, maps_q)?;
    let (graph_g, embed_g) = embed(g, maps_g)?;
    let loss = if embed_q.degenerate || embed_g.degenerate {
        None
    } else {
        Some(procrustes_align(g, embed_q.u, embed_g.u)?.1)
    };
    Ok(StructOutput {
        loss,
        graph_q,
        graph_g,
        embed_q,
        embed_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_of(rows: &[Vec<f64>]) -> Tensor {
        let mut g = Graph::new();
        let m = g.constant(Tensor::from_rows(rows).unwrap());
        let (gm, _) = concept_graph(&mut g, m).unwrap();
        g.value(gm).clone()
    }

    #[test]
    fn graph_affine_cases() {
        assert_eq!(graph_of(&[vec![1.0, 2.0], vec![1.0, 2.0]]).at(0, 1), 1.0);
        assert_eq!(graph_of(&[vec![1.0, 0.0], vec![0.0, 3.0]]).at(0, 1), 0.5);
        assert!(graph_of(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).at(0, 1).abs() < 1e-12);
        let z = graph_of(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(z.data(), &[1.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn single_slot_is_config_error() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::full(&[1, 4], 1.0));
        assert!(matches!(concept_graph(&mut g, m), Err(crate::Error::Config(_))));
    }

    #[test]
    fn laplacian_closed_forms() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[2, 2], 1.0));
        let d = g.sum_axis(ones, 1).unwrap();
        let l = normalized_laplacian(&mut g, ones, d).unwrap();
        assert!(g.value(l).max_abs_diff(&Tensor::from_rows(&[vec![0.5, -0.5], vec![-0.5, 0.5]]).unwrap()) < 1e-15);

        let eye = g.constant(Tensor::eye(3));
        let d = g.sum_axis(eye, 1).unwrap();
        let l = normalized_laplacian(&mut g, eye, d).unwrap();
        assert!(g.value(l).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_node_embedding() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[2, 2], 1.0));
        let d = g.sum_axis(ones, 1).unwrap();
        let l = normalized_laplacian(&mut g, ones, d).unwrap();
        let e = spectral_embed(&mut g, l, 1).unwrap();
        let u = g.value(e.u);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((u.at(0, 0) - h).abs() < 1e-12 && (u.at(1, 0) + h).abs() < 1e-12);
        assert!(!e.degenerate);
        assert!(spectral_embed(&mut g, l, 2).is_err());
    }

    #[test]
    fn all_trivial_spectrum_is_degenerate() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 3]));
        let e = spectral_embed(&mut g, l, 2).unwrap();
        assert!(e.degenerate);
        assert!(g.value(e.u).data().iter().all(|&x| x == 0.0));
        assert_eq!(g.shape(e.u), &[3, 2]);
    }

    #[test]
    fn two_cliques_discard_two_trivial() {
        let mut gm = Tensor::zeros(&[4, 4]);
        for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2), (0, 0), (1, 1), (2, 2), (3, 3)] {
            gm.set(i, j, 1.0);
        }
        let mut g = Graph::new();
        let gv = g.constant(gm);
        let d = g.sum_axis(gv, 1).unwrap();
        let l = normalized_laplacian(&mut g, gv, d).unwrap();
        let e = spectral_embed(&mut g, l, 2).unwrap();
        assert!(!e.degenerate);
        assert!(e.spectrum[0].abs() < 1e-12 && e.spectrum[1].abs() < 1e-12);
        for v in &e.eigenvalues {
            assert!((v - 1.0).abs() < 1e-10);
        }
        // The two retained vectors span the within-clique difference space.
        let u = g.value(e.u);
        for c in 0..2 {
            assert!((u.at(0, c) + u.at(1, c)).abs() < 1e-10);
            assert!((u.at(2, c) + u.at(3, c)).abs() < 1e-10);
        }
    }

    #[test]
    fn procrustes_identity_and_rotation() {
        let u = Tensor::from_rows(&[vec![0.5, 0.1], vec![-0.3, 0.7], vec![0.2, -0.4], vec![0.6, 0.2]]).unwrap();
        let mut g = Graph::new();
        let a = g.constant(u.clone());
        let (q, l) = procrustes_align(&mut g, a, a).unwrap();
        assert!(g.scalar_value(l) < 1e-20);
        assert!(q.max_abs_diff(&Tensor::eye(2)) < 1e-12);

        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let r = Tensor::from_rows(&[vec![c, -s], vec![s, c]]).unwrap();
        let ur = u.matmul(&r).unwrap();
        let b = g.constant(ur);
        let (q, l) = procrustes_align(&mut g, b, a).unwrap();
        assert!(g.scalar_value(l) < 1e-10);
        assert!(q.max_abs_diff(&r) < 1e-10);
    }

    #[test]
    fn struct_loss_zero_for_identical_maps() {
        let maps = Tensor::from_fn(&[5, 6], |i| ((i * 7 % 11) as f64 + 1.0) / 11.0);
        let mut g = Graph::new();
        let a = g.constant(maps);
        let out = struct_loss(&mut g, a, a, 2).unwrap();
        assert!(g.scalar_value(out.loss.unwrap()) < 1e-20);
    }
}
