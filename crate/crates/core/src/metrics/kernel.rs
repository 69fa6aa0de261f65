//! RBF kernels, CKA and its mutual-nearest-neighbour variant.

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))` over the rows of `x`.
pub fn rbf_kernel_matrix(x: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return arg_err(format!("bandwidth must be positive, got {sigma}"));
    }
    let n = x.rows();
    let denom = 2.0 * sigma * sigma;
    let mut k = Tensor::zeros(&[n, n]);
    for i in 0..n {
        k.data_mut()[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let v = (-sq_dist(x.row(i), x.row(j)) / denom).exp();
            k.data_mut()[i * n + j] = v;
            k.data_mut()[j * n + i] = v;
        }
    }
    Ok(k)
}

/// Median pairwise Euclidean distance between rows.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return arg_err("median bandwidth needs at least two rows");
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if !(med > 0.0) {
        return arg_err("all rows coincide, median bandwidth is zero");
    }
    Ok(med)
}

fn kernel(x: &Tensor, sigma: Option<f64>) -> Result<(Tensor, f64)> {
    let s = match sigma {
        Some(s) => s,
        None => median_bandwidth(x)?,
    };
    Ok((rbf_kernel_matrix(x, s)?, s))
}

/// `H K H` with `H = I - 11^T / n`.
pub fn center(k: &Tensor) -> Tensor {
    let n = k.rows();
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; n];
    let mut all = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = k.get2(i, j);
            row[i] += v;
            col[j] += v;
            all += v;
        }
    }
    let nf = n as f64;
    let mut out = k.clone();
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] -= row[i] / nf + col[j] / nf - all / (nf * nf);
        }
    }
    out
}

fn frob_inner(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// CKA of two kernel matrices.
pub fn cka_kernels(k: &Tensor, l: &Tensor) -> Result<f64> {
    if k.shape() != l.shape() || k.rows() != k.cols() {
        return dim_err(format!("kernels {:?} vs {:?}", k.shape(), l.shape()));
    }
    if k.rows() < 3 {
        return arg_err("cka needs at least three samples");
    }
    let (kc, lc) = (center(k), center(l));
    let den = (frob_inner(&kc, &kc) * frob_inner(&lc, &lc)).sqrt();
    if !(den > 0.0) {
        return Err(Error::InvalidArgument("constant features give a zero cka denominator".into()));
    }
    Ok(frob_inner(&kc, &lc) / den)
}

/// RBF CKA. `sigma = None` uses the median heuristic on each input.
pub fn cka(x: &Tensor, y: &Tensor, sigma: Option<f64>) -> Result<f64> {
    if x.rows() != y.rows() {
        return dim_err(format!("{} vs {} samples", x.rows(), y.rows()));
    }
    cka_kernels(&kernel(x, sigma)?.0, &kernel(y, sigma)?.0)
}

/// Row `i`'s `k` nearest neighbours (excluding `i`) by cosine similarity of
/// centered kernel rows; ties go to the lower index.
pub fn knn_sets(kc: &Tensor, k: usize) -> Vec<Vec<bool>> {
    let n = kc.rows();
    let norms: Vec<f64> = (0..n).map(|i| crate::numerics::tensor::dot(kc.row(i), kc.row(i)).sqrt()).collect();
    let mut sets = vec![vec![false; n]; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let sim: Vec<f64> = (0..n)
            .map(|j| {
                let d = norms[i] * norms[j];
                if d > 0.0 {
                    crate::numerics::tensor::dot(kc.row(i), kc.row(j)) / d
                } else {
                    0.0
                }
            })
            .collect();
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| sim[b].total_cmp(&sim[a]).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            sets[i][j] = true;
        }
    }
    sets
}

fn masked_align(a: &Tensor, b: &Tensor, mask: &[Vec<bool>]) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j || mask[i][j] {
                s += a.get2(i, j) * b.get2(i, j);
            }
        }
    }
    s
}

/// CKNNA of two kernel matrices. Pairs enter the alignment when `j` is among
/// the `k` nearest neighbours of `i` under both kernels; the diagonal always
/// enters, so `k = n - 1` recovers CKA.
pub fn cknna_kernels(k_mat: &Tensor, l_mat: &Tensor, k: usize) -> Result<f64> {
    if k_mat.shape() != l_mat.shape() || k_mat.rows() != k_mat.cols() {
        return dim_err(format!("kernels {:?} vs {:?}", k_mat.shape(), l_mat.shape()));
    }
    let n = k_mat.rows();
    if n < 3 {
        return arg_err("cknna needs at least three samples");
    }
    if k == 0 || k > n - 1 {
        return arg_err(format!("k = {k} outside [1, {}]", n - 1));
    }
    let (kc, lc) = (center(k_mat), center(l_mat));
    let (nk, nl) = (knn_sets(&kc, k), knn_sets(&lc, k));
    let mutual: Vec<Vec<bool>> = nk
        .iter()
        .zip(&nl)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x && *y).collect())
        .collect();
    let den = (masked_align(&kc, &kc, &nk) * masked_align(&lc, &lc, &nl)).sqrt();
    if !(den > 0.0) {
        return Err(Error::InvalidArgument("zero cknna denominator".into()));
    }
    Ok(masked_align(&kc, &lc, &mutual) / den)
}

pub fn cknna(x: &Tensor, y: &Tensor, k: usize, sigma: Option<f64>) -> Result<f64> {
    if x.rows() != y.rows() {
        return dim_err(format!("{} vs {} samples", x.rows(), y.rows()));
    }
    cknna_kernels(&kernel(x, sigma)?.0, &kernel(y, sigma)?.0, k)
}
