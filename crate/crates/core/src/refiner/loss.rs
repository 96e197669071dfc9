//! Normalized-temperature cross-entropy over in-batch pairs.
//!
//! A batch holds N positive pairs as 2N vectors; pair m sits at rows 2m and
//! 2m+1. For an anchor i with positive p(i), the per-anchor loss is
//!
//! ```text
//! l_i = -log( exp(sim(z_i, z_p(i))/τ) / Σ_{j≠i} exp(sim(z_i, z_j)/τ) )
//! ```
//!
//! with cosine similarity; the loss is the mean of l_i over all 2N anchors.
//! The denominator runs over every in-batch vector except the anchor
//! itself, so the positive also appears in it.

use crate::{Error, Result};

/// Row index of the positive partner.
#[inline]
fn positive_of(i: usize) -> usize {
    i ^ 1
}

fn normalize_rows(projected: &[f64], rows: usize, p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = vec![0.0; rows * p];
    let mut norms = vec![0.0; rows];
    for r in 0..rows {
        let row = &projected[r * p..(r + 1) * p];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::InvalidValue(format!(
                "projected vector {r} has zero norm; cosine similarity is undefined"
            )));
        }
        norms[r] = n;
        for (o, &v) in unit[r * p..(r + 1) * p].iter_mut().zip(row) {
            *o = v / n;
        }
    }
    Ok((unit, norms))
}

fn cosine_matrix(unit: &[f64], rows: usize, p: usize) -> Vec<f64> {
    let mut sim = vec![0.0; rows * rows];
    for i in 0..rows {
        let zi = &unit[i * p..(i + 1) * p];
        for j in (i + 1)..rows {
            let zj = &unit[j * p..(j + 1) * p];
            let mut dot = 0.0;
            for (a, b) in zi.iter().zip(zj) {
                dot += a * b;
            }
            sim[i * rows + j] = dot;
            sim[j * rows + i] = dot;
        }
        sim[i * rows + i] = 1.0;
    }
    sim
}

/// Mean contrastive loss over the 2N anchors of a batch of N pairs.
pub fn ntxent_loss(projected: &[f64], n_pairs: usize, p: usize, tau: f64) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::InvalidValue("contrastive batch needs N >= 1".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidValue(format!("temperature must be positive, got {tau}")));
    }
    let rows = 2 * n_pairs;
    if projected.len() != rows * p {
        return Err(Error::Dimension {
            context: "contrastive batch",
            expected: rows * p,
            actual: projected.len(),
        });
    }
    let (unit, _) = normalize_rows(projected, rows, p)?;
    let sim = cosine_matrix(&unit, rows, p);
    let mut total = 0.0;
    for i in 0..rows {
        let mut denom = 0.0;
        for j in 0..rows {
            if j != i {
                denom += (sim[i * rows + j] / tau).exp();
            }
        }
        total += -sim[i * rows + positive_of(i)] / tau + denom.ln();
    }
    Ok(total / rows as f64)
}

/// Loss plus its gradient with respect to the projected vectors.
pub fn ntxent_loss_grad(
    projected: &[f64],
    n_pairs: usize,
    p: usize,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if n_pairs == 0 {
        return Err(Error::InvalidValue("contrastive batch needs N >= 1".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidValue(format!("temperature must be positive, got {tau}")));
    }
    let rows = 2 * n_pairs;
    if projected.len() != rows * p {
        return Err(Error::Dimension {
            context: "contrastive batch",
            expected: rows * p,
            actual: projected.len(),
        });
    }
    let (unit, norms) = normalize_rows(projected, rows, p)?;
    let sim = cosine_matrix(&unit, rows, p);

    // Softmax weights t_ij over j≠i, per anchor.
    let mut soft = vec![0.0; rows * rows];
    let mut total = 0.0;
    for i in 0..rows {
        let mut denom = 0.0;
        for j in 0..rows {
            if j != i {
                let e = (sim[i * rows + j] / tau).exp();
                soft[i * rows + j] = e;
                denom += e;
            }
        }
        for j in 0..rows {
            soft[i * rows + j] /= denom;
        }
        total += -sim[i * rows + positive_of(i)] / tau + denom.ln();
    }
    let loss = total / rows as f64;

    // dL/ds_ij = (t_ij - [j = p(i)]) / (2N τ); the symmetric slot s_ji
    // contributes through anchor j. Fold both into a_ij = dL/ds_ij +
    // dL/ds_ji, then
    //   dz_i = (1/||z_i||) ( Σ_j a_ij ẑ_j - (Σ_j a_ij s_ij) ẑ_i ).
    let scale = 1.0 / (rows as f64 * tau);
    let mut grad = vec![0.0; rows * p];
    for i in 0..rows {
        let mut diag = 0.0;
        let gi = &mut grad[i * p..(i + 1) * p];
        for j in 0..rows {
            if j == i {
                continue;
            }
            let mut a = soft[i * rows + j] + soft[j * rows + i];
            if j == positive_of(i) {
                a -= 2.0;
            }
            let a = a * scale;
            let zj = &unit[j * p..(j + 1) * p];
            for (g, &z) in gi.iter_mut().zip(zj) {
                *g += a * z;
            }
            diag += a * sim[i * rows + j];
        }
        let zi = &unit[i * p..(i + 1) * p];
        let inv_norm = 1.0 / norms[i];
        for (g, &z) in gi.iter_mut().zip(zi) {
            *g = (*g - diag * z) * inv_norm;
        }
    }
    Ok((loss, grad))
}
