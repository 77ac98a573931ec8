//! Distribution discrepancy between source and (weighted) target features.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatMetric {
    /// Squared maximum mean discrepancy, Gaussian kernel, median-heuristic bandwidth.
    Mmd,
    /// Squared Frobenius distance between covariances, scaled by `1/(4d²)`.
    Coral,
}

impl core::str::FromStr for StatMetric {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmd" => Ok(Self::Mmd),
            "coral" => Ok(Self::Coral),
            other => bail!(Argument, "unknown statistical metric '{other}'"),
        }
    }
}

impl core::fmt::Display for StatMetric {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Mmd => "mmd",
            Self::Coral => "coral",
        })
    }
}

/// Discrepancy value with gradients on both feature sets.
#[derive(Debug, Clone, PartialEq)]
pub struct StatDual {
    pub value: f64,
    pub d_source: Tensor2,
    pub d_target: Tensor2,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the squared distances over all distinct pairs of the joint
/// sample; `1.0` when the median is zero (all points coincide).
pub fn median_bandwidth(source: &Tensor2, target: &Tensor2) -> f64 {
    let rows: Vec<&[f64]> = source.iter_rows().chain(target.iter_rows()).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn check_sides(source: &Tensor2, target: &Tensor2, min_rows: usize) -> Result<()> {
    if source.cols() != target.cols() {
        bail!(
            Dimension,
            "source features are {}-dim, target {}-dim",
            source.cols(),
            target.cols()
        );
    }
    if source.rows() < min_rows || target.rows() < min_rows {
        bail!(
            Argument,
            "statistical alignment needs at least {min_rows} samples per side (got {} and {})",
            source.rows(),
            target.rows()
        );
    }
    Ok(())
}

/// `coef · Σ_ij k(a_i, b_j)`, accumulating gradients into `d_a` and `d_b`
/// (or only `d_a` when both sides are the same sample).
fn kernel_block(
    a: &Tensor2,
    b: &Tensor2,
    bandwidth: f64,
    coef: f64,
    d_a: &mut Tensor2,
    mut d_b: Option<&mut Tensor2>,
) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let (x, y) = (a.row(i), b.row(j));
            let k = math::exp(-sq_dist(x, y) / bandwidth);
            sum += k;
            let g = coef * k * (-2.0 / bandwidth);
            for c in 0..x.len() {
                let diff = g * (x[c] - y[c]);
                d_a[(i, c)] += diff;
                match d_b.as_deref_mut() {
                    Some(db) => db[(j, c)] -= diff,
                    None => d_a[(j, c)] -= diff,
                }
            }
        }
    }
    coef * sum
}

/// Biased (V-statistic) squared MMD with kernel `exp(−‖x−y‖² / bandwidth)`.
/// The bandwidth is a constant for differentiation.
pub fn mmd(source: &Tensor2, target: &Tensor2, bandwidth: f64) -> Result<StatDual> {
    check_sides(source, target, 1)?;
    if !(bandwidth > 0.0) {
        bail!(Argument, "kernel bandwidth must be positive, got {bandwidth}");
    }
    let (ns, nt, dim) = (source.rows(), target.rows(), source.cols());
    let mut d_source = Tensor2::zeros(ns, dim);
    let mut d_target = Tensor2::zeros(nt, dim);
    let kss = kernel_block(source, source, bandwidth, 1.0 / (ns * ns) as f64, &mut d_source, None);
    let ktt = kernel_block(target, target, bandwidth, 1.0 / (nt * nt) as f64, &mut d_target, None);
    let kst = kernel_block(
        source,
        target,
        bandwidth,
        -2.0 / (ns * nt) as f64,
        &mut d_source,
        Some(&mut d_target),
    );
    let value = kss + ktt + kst;
    if value < 0.0 {
        // Round-off only; the V-statistic is a squared RKHS norm.
        return Ok(StatDual {
            value: 0.0,
            d_source: Tensor2::zeros(ns, dim),
            d_target: Tensor2::zeros(nt, dim),
        });
    }
    Ok(StatDual {
        value,
        d_source,
        d_target,
    })
}

fn centered(x: &Tensor2) -> Tensor2 {
    let n = x.rows() as f64;
    let mut mean = alloc::vec![0.0; x.cols()];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// Unbiased covariance `Xcᵀ·Xc / (n − 1)`.
fn covariance(xc: &Tensor2) -> Tensor2 {
    let (n, d) = xc.shape();
    let mut cov = Tensor2::zeros(d, d);
    for row in xc.iter_rows() {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += row[a] * row[b];
            }
        }
    }
    cov.scale(1.0 / (n as f64 - 1.0));
    cov
}

/// `Xc·G·2/(n−1)` for symmetric `G`.
fn covariance_backward(xc: &Tensor2, g: &Tensor2) -> Tensor2 {
    let (n, d) = xc.shape();
    let mut out = Tensor2::zeros(n, d);
    let scale = 2.0 / (n as f64 - 1.0);
    for i in 0..n {
        let row = xc.row(i);
        for b in 0..d {
            let mut acc = 0.0;
            for a in 0..d {
                acc += row[a] * g[(a, b)];
            }
            out[(i, b)] = scale * acc;
        }
    }
    out
}

/// `‖Cov_S − Cov_T‖²_F / (4d²)` with unbiased covariances.
pub fn coral(source: &Tensor2, target: &Tensor2) -> Result<StatDual> {
    check_sides(source, target, 2)?;
    let d = source.cols() as f64;
    let (xs, xt) = (centered(source), centered(target));
    let mut diff = covariance(&xs);
    diff.add_scaled(&covariance(&xt), -1.0)?;
    let norm = 4.0 * d * d;
    let value = diff.data().iter().map(|v| v * v).sum::<f64>() / norm;
    // dL/dCov_S = 2·diff / (4d²)
    let mut g = diff;
    g.scale(2.0 / norm);
    let d_source = covariance_backward(&xs, &g);
    let mut d_target = covariance_backward(&xt, &g);
    d_target.scale(-1.0);
    Ok(StatDual {
        value,
        d_source,
        d_target,
    })
}

/// Statistical discrepancy between source and target features. For MMD the
/// bandwidth defaults to [`median_bandwidth`] of the joint sample.
pub fn statistical_loss(
    source: &Tensor2,
    target: &Tensor2,
    metric: StatMetric,
    bandwidth: Option<f64>,
) -> Result<StatDual> {
    match metric {
        StatMetric::Mmd => {
            check_sides(source, target, 1)?;
            let bw = bandwidth.unwrap_or_else(|| median_bandwidth(source, target));
            mmd(source, target, bw)
        }
        StatMetric::Coral => coral(source, target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::{check_gradients, DualValue};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize, mean: f64) -> Tensor2 {
        let data = (0..n * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                mean + z
            })
            .collect();
        Tensor2::new(n, d, data).unwrap()
    }

    #[test]
    fn identical_batches_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 6, 3, 0.0);
        for metric in [StatMetric::Mmd, StatMetric::Coral] {
            let v = statistical_loss(&x, &x, metric, None).unwrap().value;
            assert!(v.abs() <= 1e-9, "{metric}: {v}");
        }
    }

    #[test]
    fn coral_ignores_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 7, 3, 0.0);
        let mut shifted = x.clone();
        for i in 0..shifted.rows() {
            for v in shifted.row_mut(i) {
                *v += 5.0;
            }
        }
        assert!(coral(&x, &shifted).unwrap().value.abs() < 1e-9);
        assert!(matches!(
            coral(&x.select_rows(&[0]), &x),
            Err(crate::Error::Argument(_))
        ));
    }

    #[test]
    fn mmd_separates_shifted_gaussians() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = gaussian(&mut rng, 64, 2, 0.0);
            let b = gaussian(&mut rng, 64, 2, 0.0);
            let c = gaussian(&mut rng, 64, 2, 3.0);
            let same = statistical_loss(&a, &b, StatMetric::Mmd, None).unwrap().value;
            let far = statistical_loss(&a, &c, StatMetric::Mmd, None).unwrap().value;
            assert!(far > same, "seed {seed}: {far} <= {same}");
        }
    }

    #[test]
    fn median_bandwidth_of_a_line() {
        let s = Tensor2::from_rows(&[[0.0], [1.0]]).unwrap();
        let t = Tensor2::from_rows(&[[3.0]]).unwrap();
        // squared distances 1, 9, 4 -> median 4
        assert_eq!(median_bandwidth(&s, &t), 4.0);
        let z = Tensor2::zeros(2, 1);
        assert_eq!(median_bandwidth(&z, &z), 1.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let s = gaussian(&mut rng, 4, 3, 0.0);
            let shift = rng.random_range(0.0..1.0);
            let t = gaussian(&mut rng, 5, 3, shift);
            let bw = median_bandwidth(&s, &t);
            for metric in [StatMetric::Mmd, StatMetric::Coral] {
                let report = check_gradients(
                    |p| {
                        let out = statistical_loss(&p[0], &p[1], metric, Some(bw))?;
                        Ok(DualValue {
                            value: out.value,
                            grads: vec![out.d_source, out.d_target],
                        })
                    },
                    &[s.clone(), t.clone()],
                    1e-5,
                    1e-5,
                )
                .unwrap();
                assert!(report.passed(), "seed {seed} {metric}: {report:?}");
            }
        }
    }
}
