//! Symmetric contrastive loss between student and teacher features.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

fn check(students: &[Array2<f64>], teacher: &Array2<f64>, tau: f64) -> Result<()> {
    let (b, d) = teacher.dim();
    if b < 2 {
        return Err(Error::validation(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if students.is_empty() {
        return Err(Error::validation("no student feature sets"));
    }
    if let Some(s) = students.iter().find(|s| s.dim() != (b, d)) {
        return Err(Error::validation(format!(
            "student features {:?} do not match teacher {:?}",
            s.dim(),
            (b, d)
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::validation(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Row-wise log-softmax of `m`, or column-wise when `by_column`.
fn log_softmax(m: &Array2<f64>, by_column: bool) -> Array2<f64> {
    let mut out = if by_column { m.t().to_owned() } else { m.clone() };
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    if by_column {
        out.reversed_axes()
    } else {
        out
    }
}

fn set_loss(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    let rows = log_softmax(logits, false);
    let cols = log_softmax(logits, true);
    let loss_r = -(0..b).map(|i| rows[[i, i]]).sum::<f64>() / b as f64;
    let loss_c = -(0..b).map(|i| cols[[i, i]]).sum::<f64>() / b as f64;
    let mut dlogits = rows.mapv(f64::exp) + cols.mapv(f64::exp);
    for i in 0..b {
        dlogits[[i, i]] -= 2.0;
    }
    dlogits /= 2.0 * b as f64;
    (0.5 * (loss_r + loss_c), dlogits)
}

/// Mean over student sets of the symmetric cross-entropy of `S·Tᵀ/τ`,
/// matching indices being the positives.
pub fn contrastive_distill_loss(students: &[Array2<f64>], teacher: &Array2<f64>, tau: f64) -> Result<f64> {
    Ok(contrastive_distill_loss_grad(students, teacher, tau)?.0)
}

/// Loss plus its gradient with respect to each student set.
pub fn contrastive_distill_loss_grad(
    students: &[Array2<f64>],
    teacher: &Array2<f64>,
    tau: f64,
) -> Result<(f64, Vec<Array2<f64>>)> {
    check(students, teacher, tau)?;
    let sets = students.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(students.len());
    for s in students {
        let logits = s.dot(&teacher.t()) / tau;
        let (loss, dlogits) = set_loss(&logits);
        total += loss;
        grads.push(dlogits.dot(teacher) / (tau * sets));
    }
    Ok((total / sets, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_embeddings_give_ln_b() {
        let t = Array2::from_shape_fn((4, 3), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let l = contrastive_distill_loss(std::slice::from_ref(&t), &t, 0.07).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_embeddings_vanish_at_low_temperature() {
        let t = Array2::eye(3);
        let l = contrastive_distill_loss(std::slice::from_ref(&t), &t, 1e-3).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let t = Array2::ones((1, 3));
        assert!(contrastive_distill_loss(std::slice::from_ref(&t), &t, 0.07).is_err());
        assert!(contrastive_distill_loss(&[], &Array2::eye(2), 0.07).is_err());
    }

    #[test]
    fn gradient_matches_central_difference() {
        let t = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 5 + j * 3) % 7) as f64 / 7.0 - 0.4);
        let s0 = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 2 + j * 5) % 9) as f64 / 9.0 - 0.5);
        let s1 = Array2::from_shape_fn((3, 4), |(i, j)| ((i + j * 7) % 4) as f64 / 4.0 - 0.3);
        let students = vec![s0, s1];
        let (_, grads) = contrastive_distill_loss_grad(&students, &t, 0.5).unwrap();
        let h = 1e-6;
        for set in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let mut plus = students.clone();
                    plus[set][[i, j]] += h;
                    let mut minus = students.clone();
                    minus[set][[i, j]] -= h;
                    let fd = (contrastive_distill_loss(&plus, &t, 0.5).unwrap()
                        - contrastive_distill_loss(&minus, &t, 0.5).unwrap())
                        / (2.0 * h);
                    assert!((fd - grads[set][[i, j]]).abs() < 1e-7);
                }
            }
        }
    }
}
