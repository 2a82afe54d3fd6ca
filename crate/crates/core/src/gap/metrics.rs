use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;
use crate::linalg::{dist_sq, dot, norm};

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("sample set"));
    }
    let d = a[0].len();
    for x in a.iter().chain(b) {
        check_dim(d, x.len())?;
    }
    Ok(d)
}

/// Squared 2-Wasserstein distance between two sorted 1D empirical measures.
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    // quantile breakpoints (i+1)/n and (j+1)/m compared on the common grid 1/(n·m)
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0usize;
    let mut total = 0.0;
    while i < n && j < m {
        let next = ((i + 1) * m).min((j + 1) * n);
        total += (next - u) as f64 * (a[i] - b[j]).powi(2);
        u = next;
        if (i + 1) * m == next {
            i += 1;
        }
        if (j + 1) * n == next {
            j += 1;
        }
    }
    total / (n * m) as f64
}

/// Sliced 2-Wasserstein distance over `n_projections` random unit directions.
///
/// Returns `sqrt(mean_θ W2²(θ·A, θ·B))`. Directions are drawn from `rng`
/// before any projection, so the value depends only on the inputs and the
/// generator state.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_projections: usize,
    rng: &mut R,
    exec: Execution,
) -> Result<f64> {
    let d = check_sets(a, b)?;
    if n_projections == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let dirs: Vec<Vec<f64>> = (0..n_projections)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&v);
            if n > 1e-12 {
                break v.iter().map(|x| x / n).collect();
            }
        })
        .collect();
    let per = exec.map(n_projections, |k| {
        let project = |set: &[Vec<f64>]| {
            let mut p: Vec<f64> = set.iter().map(|x| dot(x, &dirs[k])).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        w2_sq_sorted(&project(a), &project(b))
    });
    Ok((per.iter().sum::<f64>() / n_projections as f64).sqrt())
}

/// Biased (V-statistic) squared MMD with kernel `exp(−‖x−y‖²/(2h²))`, clamped at 0.
pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: f64, exec: Execution) -> Result<f64> {
    check_sets(a, b)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let mean_kernel = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let rows = exec.map(x.len(), |i| y.iter().map(|v| (-gamma * dist_sq(&x[i], v)).exp()).sum::<f64>());
        rows.iter().sum::<f64>() / (x.len() * y.len()) as f64
    };
    let v = mean_kernel(a, a) + mean_kernel(b, b) - 2.0 * mean_kernel(a, b);
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

/// Every `len/n`-th element, so both sets end up with `n` points.
fn strided(set: &[Vec<f64>], n: usize) -> Vec<&[f64]> {
    (0..n).map(|i| set[i * set.len() / n].as_slice()).collect()
}

/// Squared distance from each point to its `k`-th nearest neighbour in the same set.
fn knn_radii(set: &[&[f64]], k: usize, exec: Execution) -> Vec<f64> {
    exec.map(set.len(), |i| {
        let mut d: Vec<f64> = set
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, y)| dist_sq(set[i], y))
            .collect();
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        d[k - 1]
    })
}

fn coverage(points: &[&[f64]], centres: &[&[f64]], radii: &[f64], exec: Execution) -> f64 {
    let hits = exec.map(points.len(), |i| {
        centres
            .iter()
            .zip(radii)
            .any(|(c, r)| dist_sq(points[i], c) <= *r)
    });
    hits.iter().filter(|h| **h).count() as f64 / points.len() as f64
}

/// k-NN precision (generated points inside the reference manifold) and
/// recall (reference points inside the generated manifold).
///
/// The larger set is subsampled with a fixed stride to the smaller size.
pub fn knn_precision_recall(
    generated: &[Vec<f64>],
    reference: &[Vec<f64>],
    k: usize,
    exec: Execution,
) -> Result<PrecisionRecall> {
    check_sets(generated, reference)?;
    let n = generated.len().min(reference.len());
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} needs 1 <= k < {n}")));
    }
    let g = strided(generated, n);
    let r = strided(reference, n);
    let rg = knn_radii(&g, k, exec);
    let rr = knn_radii(&r, k, exec);
    Ok(PrecisionRecall {
        precision: coverage(&g, &r, &rr, exec),
        recall: coverage(&r, &g, &rg, exec),
    })
}

/// `mean + 3·sd` of metric values between independent draws of the same distribution.
pub fn noise_floor(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::EmptyInput("noise-floor calibration needs two or more values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(mean + 3.0 * var.sqrt())
}
