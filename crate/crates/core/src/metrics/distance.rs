//! Cosine, Gaussian divergences, Frechet distance, KID and class variance.

use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use super::kernel::{median_bandwidth, rbf_kernel_matrix};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::tensor::dot;
use crate::numerics::{psd_sqrt, psd_sqrt_checked, Tensor};
use crate::occupancy::OccupancyGrid;

/// Tolerated negative eigenvalue, relative to the largest, before a covariance
/// product counts as non-PSD.
const PSD_REL_TOL: f64 = 1e-8;

/// Mean row-wise cosine similarity of paired rows. Returns the mean and the
/// number of pairs skipped because a row had zero norm.
pub fn mean_cosine(za: &Tensor, zb: &Tensor) -> Result<(f64, usize)> {
    za.same_shape(zb)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for i in 0..za.rows() {
        let (a, b) = (za.row(i), zb.row(i));
        let den = (dot(a, a) * dot(b, b)).sqrt();
        if den > 0.0 {
            sum += dot(a, b) / den;
            used += 1;
        } else {
            skipped += 1;
        }
    }
    if used == 0 {
        return arg_err("every row has zero norm");
    }
    Ok((sum / used as f64, skipped))
}

fn check_gaussians(mu1: &Tensor, s1: &Tensor, mu2: &Tensor, s2: &Tensor) -> Result<()> {
    mu1.same_shape(s1)?;
    mu1.same_shape(mu2)?;
    mu1.same_shape(s2)?;
    if s1.data().iter().chain(s2.data()).any(|&s| !(s > 0.0)) {
        return arg_err("sigma must be positive");
    }
    Ok(())
}

/// `0.5 (KL(p||q) + KL(q||p))` of diagonal Gaussians, summed over the last
/// axis and averaged over the leading (cell) axes.
pub fn gaussian_sym_kl(mu1: &Tensor, s1: &Tensor, mu2: &Tensor, s2: &Tensor) -> Result<f64> {
    check_gaussians(mu1, s1, mu2, s2)?;
    let total: f64 = mu1
        .data()
        .iter()
        .zip(s1.data())
        .zip(mu2.data().iter().zip(s2.data()))
        .map(|((&m1, &a), (&m2, &b))| {
            let (va, vb, dm2) = (a * a, b * b, (m1 - m2) * (m1 - m2));
            0.5 * ((va + dm2) / (2.0 * vb) + (vb + dm2) / (2.0 * va) - 1.0)
        })
        .sum();
    Ok(total / mu1.rows() as f64)
}

/// 2-Wasserstein distance between diagonal Gaussians.
pub fn gaussian_w2(mu1: &Tensor, s1: &Tensor, mu2: &Tensor, s2: &Tensor) -> Result<f64> {
    check_gaussians(mu1, s1, mu2, s2)?;
    let dm: f64 = mu1.data().iter().zip(mu2.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let ds: f64 = s1.data().iter().zip(s2.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((dm + ds).sqrt())
}

/// Frechet distance between Gaussians given by their moments:
/// `|mu_e - mu_g|^2 + tr(S_e + S_g - 2 (S_g^1/2 S_e S_g^1/2)^1/2)`.
pub fn frechet_from_moments(mu_g: &[f64], cov_g: &Tensor, mu_e: &[f64], cov_e: &Tensor) -> Result<f64> {
    let c = mu_g.len();
    if mu_e.len() != c || cov_g.shape() != [c, c] || cov_e.shape() != [c, c] {
        return dim_err(format!("moments of dim {c} vs {} / {:?} / {:?}", mu_e.len(), cov_g.shape(), cov_e.shape()));
    }
    let root_g = psd_sqrt_checked(cov_g, PSD_REL_TOL)?;
    let mut prod = root_g.matmul(cov_e)?.matmul(&root_g)?;
    // symmetrize away round-off
    for i in 0..c {
        for j in (i + 1)..c {
            let v = 0.5 * (prod.get2(i, j) + prod.get2(j, i));
            prod.data_mut()[i * c + j] = v;
            prod.data_mut()[j * c + i] = v;
        }
    }
    let cross = psd_sqrt_checked(&prod, PSD_REL_TOL)?.trace()?;
    let dm: f64 = mu_g.iter().zip(mu_e).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = dm + cov_e.trace()? + cov_g.trace()? - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    // tiny negative values are round-off
    Ok(d.max(0.0))
}

pub fn frechet_distance(fg: &FeatureSet, fe: &FeatureSet) -> Result<f64> {
    if fg.dim() != fe.dim() {
        return dim_err(format!("feature dims {} vs {}", fg.dim(), fe.dim()));
    }
    if fg.n() <= fg.dim() || fe.n() <= fe.dim() {
        log::warn!(
            "frechet distance with {} / {} samples in {} dims: covariances are rank deficient",
            fg.n(),
            fe.n(),
            fg.dim()
        );
    }
    let (mg, cg) = fg.moments()?;
    let (me, ce) = fe.moments()?;
    frechet_from_moments(&mg, &cg, &me, &ce)
}

fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return dim_err(format!("feature dims {} vs {}", a.cols(), b.cols()));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Unbiased RBF MMD^2. `sigma = None` takes the median heuristic on the pooled
/// samples; the bandwidth used is returned alongside.
pub fn kid(fg: &FeatureSet, fe: &FeatureSet, sigma: Option<f64>) -> Result<(f64, f64)> {
    let (n, m) = (fg.n(), fe.n());
    if n < 2 || m < 2 {
        return arg_err("kid needs at least two samples per set");
    }
    let all = stack(&fg.data, &fe.data)?;
    let sigma = match sigma {
        Some(s) => s,
        None => median_bandwidth(&all)?,
    };
    let k = rbf_kernel_matrix(&all, sigma)?;
    let t = n + m;
    let (mut sgg, mut see, mut sge) = (0.0, 0.0, 0.0);
    for i in 0..t {
        for j in 0..t {
            let v = k.data()[i * t + j];
            match (i < n, j < n) {
                (true, true) if i != j => sgg += v,
                (false, false) if i != j => see += v,
                (true, false) => sge += v,
                _ => {}
            }
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    Ok((sgg / (nf * (nf - 1.0)) + see / (mf * (mf - 1.0)) - 2.0 * sge / (nf * mf), sigma))
}

/// Temporal pooling of per-frame features into one clip vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    /// Frame `t` of `T` weighted by `(t + 1)`, normalized; order sensitive.
    TimeWeighted,
}

impl Pooling {
    pub fn pool(self, frames: &Tensor) -> Result<Vec<f64>> {
        let t = frames.rows();
        if t == 0 {
            return arg_err("clip has no frames");
        }
        let w: Vec<f64> = match self {
            Pooling::Mean => vec![1.0 / t as f64; t],
            Pooling::TimeWeighted => {
                let z = (t * (t + 1)) as f64 / 2.0;
                (0..t).map(|i| (i + 1) as f64 / z).collect()
            }
        };
        let mut out = vec![0.0; frames.cols()];
        for (i, wi) in w.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(frames.row(i)) {
                *o += wi * v;
            }
        }
        Ok(out)
    }
}

/// Pool each clip's `[T, c]` frame features and return the pooled set.
pub fn pool_clips(clips: &[Tensor], pooling: Pooling, tag: &str) -> Result<FeatureSet> {
    let rows = clips.iter().map(|c| pooling.pool(c)).collect::<Result<Vec<_>>>()?;
    FeatureSet::from_rows(&rows, tag)
}

/// Frechet distance over temporally pooled clip features.
pub fn sequence_frechet(clips_g: &[Tensor], clips_e: &[Tensor], pooling: Pooling) -> Result<f64> {
    frechet_distance(&pool_clips(clips_g, pooling, "clips_g")?, &pool_clips(clips_e, pooling, "clips_e")?)
}

/// Population variance across grids of each non-empty class's voxel
/// frequency, averaged over classes `1..n_classes`.
pub fn class_variance(grids: &[&OccupancyGrid], n_classes: usize) -> Result<f64> {
    if grids.is_empty() || n_classes < 2 {
        return arg_err("class variance needs grids and at least one non-empty class");
    }
    let dims = grids[0].dims();
    let k = n_classes - 1;
    let mut freq = vec![vec![0.0; k]; grids.len()];
    for (g, f) in grids.iter().zip(freq.iter_mut()) {
        if g.dims() != dims {
            return dim_err(format!("grid dims {:?} vs {:?}", g.dims(), dims));
        }
        let total = g.len() as f64;
        for &c in g.classes() {
            let c = c as usize;
            if c == 0 {
                continue;
            }
            if c > k {
                return arg_err(format!("label {c} outside {n_classes} classes"));
            }
            f[c - 1] += 1.0 / total;
        }
    }
    let n = grids.len() as f64;
    let mut acc = 0.0;
    for c in 0..k {
        let mean = freq.iter().map(|f| f[c]).sum::<f64>() / n;
        acc += freq.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(acc / k as f64)
}

/// Bures-form Wasserstein between full-covariance Gaussians, exposed for
/// cross-checks: `sqrt(|dmu|^2 + tr(A + B - 2 (A^1/2 B A^1/2)^1/2))`.
pub fn bures_w2(mu1: &[f64], a: &Tensor, mu2: &[f64], b: &Tensor) -> Result<f64> {
    let ra = psd_sqrt(a)?;
    let cross = psd_sqrt(&ra.matmul(b)?.matmul(&ra)?)?.trace()?;
    let dm: f64 = mu1.iter().zip(mu2).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((dm + a.trace()? + b.trace()? - 2.0 * cross).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal, normal_tensor, seeded, uniform};

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn cosine_examples() {
        let mut rng = seeded(1);
        let a = normal_tensor(&mut rng, &[7, 4]);
        assert!((mean_cosine(&a, &a).unwrap().0 - 1.0).abs() < 1e-14);
        assert!((mean_cosine(&a, &a.scale(-1.0)).unwrap().0 + 1.0).abs() < 1e-14);
        let mut b = a.clone();
        b.row_mut(2).fill(0.0);
        let (m, skipped) = mean_cosine(&a, &b).unwrap();
        assert_eq!(skipped, 1);
        assert!((m - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sym_kl_examples() {
        let z = t(&[0.0]);
        let one = t(&[1.0]);
        assert_eq!(gaussian_sym_kl(&z, &one, &z, &one).unwrap(), 0.0);
        // each direction is 1/2, their average is 1/2
        assert!((gaussian_sym_kl(&z, &one, &one, &one).unwrap() - 0.5).abs() < 1e-15);
        assert!(gaussian_sym_kl(&z, &t(&[0.0]), &z, &one).is_err());
    }

    #[test]
    fn sym_kl_monte_carlo() {
        let mut rng = seeded(2);
        let (m1, s1, m2, s2) = ([0.3, -0.5], [0.8, 1.4], [-0.2, 0.4], [1.1, 0.7]);
        let logpdf = |x: &[f64], m: &[f64], s: &[f64]| -> f64 {
            (0..2)
                .map(|i| -0.5 * ((x[i] - m[i]) / s[i]).powi(2) - s[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
                .sum()
        };
        let n = 1_000_000;
        let (mut kpq, mut kqp) = (0.0, 0.0);
        for _ in 0..n {
            let x: Vec<f64> = (0..2).map(|i| m1[i] + s1[i] * normal(&mut rng)).collect();
            kpq += logpdf(&x, &m1, &s1) - logpdf(&x, &m2, &s2);
            let y: Vec<f64> = (0..2).map(|i| m2[i] + s2[i] * normal(&mut rng)).collect();
            kqp += logpdf(&y, &m2, &s2) - logpdf(&y, &m1, &s1);
        }
        let mc = 0.5 * (kpq + kqp) / n as f64;
        let r = |v: [f64; 2]| Tensor::new(vec![1, 2], v.to_vec()).unwrap();
        let got = gaussian_sym_kl(&r(m1), &r(s1), &r(m2), &r(s2)).unwrap();
        assert!((got - mc).abs() / got < 0.02, "{got} vs {mc}");
    }

    #[test]
    fn w2_examples_and_bures() {
        let s = t(&[1.0, 2.0]);
        assert_eq!(gaussian_w2(&t(&[1.0, 1.0]), &s, &t(&[1.0, 1.0]), &s).unwrap(), 0.0);
        assert!((gaussian_w2(&t(&[0.0, 0.0]), &s, &t(&[3.0, 4.0]), &s).unwrap() - 5.0).abs() < 1e-15);
        let mut rng = seeded(3);
        for _ in 0..5 {
            let mu1: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
            let mu2: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
            let s1: Vec<f64> = (0..4).map(|_| uniform(&mut rng, 0.2, 2.0)).collect();
            let s2: Vec<f64> = (0..4).map(|_| uniform(&mut rng, 0.2, 2.0)).collect();
            let diag = |s: &[f64]| {
                let mut m = Tensor::zeros(&[4, 4]);
                for i in 0..4 {
                    m.data_mut()[i * 4 + i] = s[i] * s[i];
                }
                m
            };
            let want = bures_w2(&mu1, &diag(&s1), &mu2, &diag(&s2)).unwrap();
            let got = gaussian_w2(&t(&mu1), &t(&s1), &t(&mu2), &t(&s2)).unwrap();
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn frechet_identities() {
        let mut rng = seeded(4);
        let f = FeatureSet::new(normal_tensor(&mut rng, &[40, 3]), "a").unwrap();
        assert!(frechet_distance(&f, &f).unwrap().abs() < 1e-10);
        let mu = [0.5, -1.5, 2.0];
        let i3 = Tensor::identity(3);
        let d = frechet_from_moments(&[0.0; 3], &i3, &mu, &i3).unwrap();
        assert_eq!(d, 0.25 + 2.25 + 4.0);
        // different covariances, equal means
        let d = frechet_from_moments(&[0.0; 3], &i3, &[0.0; 3], &i3.scale(4.0)).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
        let bad = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(frechet_from_moments(&[0.0; 2], &bad, &[0.0; 2], &Tensor::identity(2)).is_err());
    }

    #[test]
    fn frechet_sampled_matches_analytic() {
        let mut rng = seeded(5);
        let n = 50_000;
        let scales = [1.0, 0.5, 2.0, 1.5];
        let shift = [1.0, 0.0, -0.5, 0.5];
        let mut g = Tensor::zeros(&[n, 4]);
        let mut e = Tensor::zeros(&[n, 4]);
        for i in 0..n {
            for c in 0..4 {
                g.data_mut()[i * 4 + c] = normal(&mut rng);
                e.data_mut()[i * 4 + c] = shift[c] + scales[c] * normal(&mut rng);
            }
        }
        let analytic: f64 = (0..4).map(|c| shift[c] * shift[c] + (scales[c] - 1.0f64).powi(2)).sum();
        let got = frechet_distance(&FeatureSet::new(g, "g").unwrap(), &FeatureSet::new(e, "e").unwrap()).unwrap();
        assert!((got - analytic).abs() / analytic < 0.05, "{got} vs {analytic}");
    }

    fn naive_kid(x: &Tensor, y: &Tensor, s: f64) -> f64 {
        let k = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            (-d / (2.0 * s * s)).exp()
        };
        let (n, m) = (x.rows(), y.rows());
        let mut a = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a += k(x.row(i), x.row(j));
                }
            }
        }
        let mut b = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    b += k(y.row(i), y.row(j));
                }
            }
        }
        let mut c = 0.0;
        for i in 0..n {
            for j in 0..m {
                c += k(x.row(i), y.row(j));
            }
        }
        a / (n * (n - 1)) as f64 + b / (m * (m - 1)) as f64 - 2.0 * c / (n * m) as f64
    }

    #[test]
    fn kid_examples() {
        let a = FeatureSet::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]], "a").unwrap();
        assert!(kid(&a, &a, Some(1.0)).unwrap().0.abs() < 1e-12);
        let mut rng = seeded(6);
        for _ in 0..5 {
            let x = normal_tensor(&mut rng, &[9, 3]);
            let y = normal_tensor(&mut rng, &[6, 3]).map(|v| v + 0.4);
            let want = naive_kid(&x, &y, 1.3);
            let got = kid(&FeatureSet::new(x, "x").unwrap(), &FeatureSet::new(y, "y").unwrap(), Some(1.3)).unwrap().0;
            assert!((got - want).abs() < 1e-12);
        }
        assert!(kid(&a, &a, Some(0.0)).is_err());
    }

    #[test]
    fn kid_unbiased() {
        let mut rng = seeded(7);
        let vals: Vec<f64> = (0..200)
            .map(|_| {
                let x = FeatureSet::new(normal_tensor(&mut rng, &[10, 2]), "x").unwrap();
                let y = FeatureSet::new(normal_tensor(&mut rng, &[10, 2]), "y").unwrap();
                kid(&x, &y, Some(1.0)).unwrap().0
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / 200.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0;
        assert!(mean.abs() < 3.0 * (var / 200.0).sqrt(), "mean {mean}");
    }

    #[test]
    fn sequence_frechet_properties() {
        let mut rng = seeded(8);
        let clips: Vec<Tensor> = (0..30).map(|_| normal_tensor(&mut rng, &[4, 2])).collect();
        assert!(sequence_frechet(&clips, &clips, Pooling::Mean).unwrap().abs() < 1e-10);
        let pooled_g = pool_clips(&clips, Pooling::TimeWeighted, "g").unwrap();
        let other: Vec<Tensor> = (0..30).map(|_| normal_tensor(&mut rng, &[4, 2])).collect();
        let pooled_e = pool_clips(&other, Pooling::TimeWeighted, "e").unwrap();
        assert_eq!(
            sequence_frechet(&clips, &other, Pooling::TimeWeighted).unwrap().to_bits(),
            frechet_distance(&pooled_g, &pooled_e).unwrap().to_bits()
        );
        // frames drift over time; reversing them is visible only to weighted pooling
        let ordered: Vec<Tensor> = (0..30)
            .map(|_| {
                let mut c = normal_tensor(&mut rng, &[4, 2]).scale(0.1);
                for f in 0..4 {
                    c.row_mut(f)[0] += f as f64;
                }
                c
            })
            .collect();
        let reversed: Vec<Tensor> = ordered
            .iter()
            .map(|c| Tensor::from_rows(&(0..4).rev().map(|f| c.row(f).to_vec()).collect::<Vec<_>>()).unwrap())
            .collect();
        assert!(sequence_frechet(&ordered, &reversed, Pooling::Mean).unwrap() < 1e-9);
        assert!(sequence_frechet(&ordered, &reversed, Pooling::TimeWeighted).unwrap() > 0.5);
    }

    #[test]
    fn class_variance_examples() {
        let g = OccupancyGrid::empty([2, 2, 1], 1.0, [0.0; 3], 3).unwrap();
        assert_eq!(class_variance(&[&g, &g], 3).unwrap(), 0.0);
        let mut h = g.clone();
        h.set(0, 0, 0, 1);
        // class 1: {1/4, 0} has population variance 1/64; class 2 is constant
        assert!((class_variance(&[&g, &h], 3).unwrap() - (1.0 / 64.0) / 2.0).abs() < 1e-15);
        assert!((class_variance(&[&g, &h], 2).unwrap() - 1.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn class_variance_loop_oracle() {
        let mut rng = seeded(9);
        let grids: Vec<OccupancyGrid> = (0..6)
            .map(|_| {
                let mut g = OccupancyGrid::empty([3, 3, 2], 1.0, [0.0; 3], 4).unwrap();
                for x in 0..3 {
                    for y in 0..3 {
                        for z in 0..2 {
                            g.set(x, y, z, (uniform(&mut rng, 0.0, 4.0) as u8).min(3));
                        }
                    }
                }
                g
            })
            .collect();
        let refs: Vec<&OccupancyGrid> = grids.iter().collect();
        let mut want = 0.0;
        for c in 1..4u8 {
            let p: Vec<f64> = grids
                .iter()
                .map(|g| g.classes().iter().filter(|&&v| v == c).count() as f64 / 18.0)
                .collect();
            let m = p.iter().sum::<f64>() / 6.0;
            want += p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 6.0;
        }
        want /= 3.0;
        assert!((class_variance(&refs, 4).unwrap() - want).abs() < 1e-15);
    }
}
