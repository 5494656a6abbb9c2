//! Dense least-squares and spectral helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{Error, Result};

/// Relative threshold on pivoted-QR diagonals (after unit-norm column
/// scaling) below which a regressor counts as linearly dependent.
pub const RANK_TOL: f64 = 1e-10;

/// Column-pivoted QR least-squares solve of `x · coef ≈ y`.
///
/// Columns are scaled to unit norm before factorization so the rank decision
/// does not depend on units. On rank deficiency the error names every
/// dependent column together with the columns it is a combination of.
pub fn lstsq(x: &DMatrix<f64>, y: &DMatrix<f64>, names: &[String]) -> Result<DMatrix<f64>> {
    let (n, k) = x.shape();
    assert_eq!(names.len(), k, "one name per regressor column");
    assert_eq!(y.nrows(), n, "response rows must match regressor rows");
    if k == 0 {
        return Ok(DMatrix::zeros(0, y.ncols()));
    }
    let norms: Vec<f64> = (0..k).map(|j| x.column(j).norm()).collect();
    let zero_cols: Vec<String> = norms
        .iter()
        .zip(names)
        .filter(|(v, _)| **v == 0.0 || !v.is_finite())
        .map(|(_, name)| name.clone())
        .collect();
    if !zero_cols.is_empty() {
        return Err(Error::RankDeficient(zero_cols));
    }
    if n < k {
        return Err(Error::RankDeficient(names[n..].to_vec()));
    }
    let mut scaled = x.clone();
    for (j, s) in norms.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }

    let qr = scaled.clone().col_piv_qr();
    let r = qr.r();
    let mut order = DMatrix::<f64>::from_fn(1, k, |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    let order: Vec<usize> = order.iter().map(|v| *v as usize).collect();

    let r00 = r[(0, 0)].abs();
    let rank = (0..k)
        .take_while(|&i| r[(i, i)].abs() > RANK_TOL * r00)
        .count();
    if rank < k {
        return Err(Error::RankDeficient(dependency_names(
            &scaled, &order, rank, names,
        )));
    }

    let qty = qr.q().transpose() * y;
    let permuted = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
    let mut coef = DMatrix::zeros(k, y.ncols());
    for (i, &j) in order.iter().enumerate() {
        coef.row_mut(j).copy_from(&(permuted.row(i) / norms[j]));
    }
    Ok(coef)
}

fn dependency_names(
    scaled: &DMatrix<f64>,
    order: &[usize],
    rank: usize,
    names: &[String],
) -> Vec<String> {
    let independent: Vec<usize> = order[..rank].to_vec();
    let basis = scaled.select_columns(independent.iter());
    let mut out: Vec<usize> = Vec::new();
    for &d in &order[rank..] {
        out.push(d);
        let target = scaled.column(d).into_owned();
        if let Some(coef) = basis.clone().svd(true, true).solve(&target, 1e-12).ok() {
            for (c, &j) in coef.iter().zip(&independent) {
                if c.abs() > 1e-6 && !out.contains(&j) {
                    out.push(j);
                }
            }
        }
    }
    out.sort_unstable();
    out.into_iter().map(|j| names[j].clone()).collect()
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::Numeric(format!("matrix is {}x{}, not square", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("eigenvalue iteration did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Sum of absolute values of every entry.
pub fn l1_norm(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let m = mean(truth);
    let ss_tot: f64 = truth.iter().map(|y| (y - m) * (y - m)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::Schema(format!(
            "matrix row has {} entries, expected {ncols}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn column_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
