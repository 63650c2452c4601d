//! Dense numeric kernels shared by the rest of the crate.
//!
//! Everything here is deterministic: reductions run in a fixed sequential
//! order and all randomness flows from an explicit [`Seed`].

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Seed for a reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for a named sub-stream (splitmix64 finalizer).
    pub fn derive(self, stream: u64) -> Seed {
        let mut z = self
            .0
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Gather the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in u.iter().zip(v) {
        s += a * b;
    }
    s
}

#[inline]
pub fn norm(u: &[f64]) -> f64 {
    libm::sqrt(dot(u, u))
}

pub fn squared_distance(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in u.iter().zip(v) {
        let d = a - b;
        s += d * d;
    }
    s
}

/// Cosine similarity `u·v / (‖u‖‖v‖)`.
///
/// A zero-norm argument is an error: it signals a degenerate feature and
/// must not masquerade as "no similarity".
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u.len(), v.len())?;
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Softmax over the unmasked entries of `row`; masked entries come out as 0.
pub fn masked_softmax(row: &[f64], masked: &[usize]) -> Result<Vec<f64>> {
    let mut keep = vec![true; row.len()];
    for &m in masked {
        if m >= row.len() {
            return Err(Error::LengthMismatch {
                expected: row.len(),
                found: m + 1,
            });
        }
        keep[m] = false;
    }
    let mut max = f64::NEG_INFINITY;
    for (v, &k) in row.iter().zip(&keep) {
        if k {
            if !v.is_finite() {
                return Err(Error::NonFinite("softmax input"));
            }
            max = max.max(*v);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut out = vec![0.0; row.len()];
    let mut total = 0.0;
    for ((o, v), &k) in out.iter_mut().zip(row).zip(&keep) {
        if k {
            *o = libm::exp(v - max);
            total += *o;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Result of a K-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step, followed by
    /// the cost of the final assignment against the final centroids.
    pub wcss: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

fn cost(points: &Mat, centroids: &Mat, assign: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &a) in assign.iter().enumerate() {
        s += squared_distance(points.row(i), centroids.row(a));
    }
    s
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Indices of the first occurrence of every distinct row.
fn distinct_rows(points: &Mat) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.sort_by(|&a, &b| cmp_rows(points.row(a), points.row(b)).then(a.cmp(&b)));
    let mut out: Vec<usize> = Vec::new();
    for i in order {
        match out.last() {
            Some(&j) if cmp_rows(points.row(i), points.row(j)) == Ordering::Equal => {}
            _ => out.push(i),
        }
    }
    out.sort_unstable();
    out
}

/// Lloyd's K-means with seeded initialization from `k` distinct points.
///
/// Empty clusters are reseeded to the point farthest from its current
/// centroid, so the objective never increases between iterations.
pub fn kmeans(points: &Mat, k: usize, max_iters: usize, seed: Seed) -> Result<KMeans> {
    let n = points.rows();
    if k == 0 {
        return Err(crate::error::domain("k must be at least 1"));
    }
    if k > n {
        return Err(Error::TooFewPoints { k, points: n });
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("kmeans points"));
    }
    let dim = points.cols();
    let mut rng = seed.rng();

    let distinct = distinct_rows(points);
    let mut init: Vec<usize> = if distinct.len() >= k {
        index::sample(&mut rng, distinct.len(), k)
            .into_iter()
            .map(|i| distinct[i])
            .collect()
    } else {
        let mut chosen = distinct.clone();
        let rest: Vec<usize> = (0..n).filter(|i| !distinct.contains(i)).collect();
        for i in index::sample(&mut rng, rest.len(), k - distinct.len()) {
            chosen.push(rest[i]);
        }
        chosen
    };
    init.sort_unstable();
    let mut centroids = points.select_rows(&init);

    let mut assign = vec![usize::MAX; n];
    let mut wcss = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (i, slot) in assign.iter_mut().enumerate() {
            let (a, d) = nearest(points.row(i), &centroids);
            if *slot != a {
                changed = true;
                *slot = a;
            }
            total += d;
        }
        wcss.push(total);
        if !changed {
            break;
        }
        update_centroids(points, &assign, &mut centroids, dim);
    }
    wcss.push(cost(points, &centroids, &assign));
    Ok(KMeans {
        centroids,
        assignments: assign,
        wcss,
    })
}

fn update_centroids(points: &Mat, assign: &[usize], centroids: &mut Mat, dim: usize) {
    let k = centroids.rows();
    let mut sums = Mat::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (s, p) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += p;
        }
    }
    let mut empty = Vec::new();
    for c in 0..k {
        if counts[c] == 0 {
            empty.push(c);
            continue;
        }
        let inv = counts[c] as f64;
        for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
            *dst = s / inv;
        }
    }
    if empty.is_empty() {
        return;
    }
    // Farthest points (w.r.t. their updated centroids) seed the empty clusters.
    let mut far: Vec<(f64, usize)> = assign
        .iter()
        .enumerate()
        .map(|(i, &a)| (squared_distance(points.row(i), centroids.row(a)), i))
        .collect();
    far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (slot, &(_, i)) in empty.iter().zip(&far) {
        let p = points.row(i).to_vec();
        centroids.row_mut(*slot).copy_from_slice(&p);
    }
}

/// Central-difference gradient check.
///
/// Returns `max_i |g_fd − g_an| / max(1, |g_fd|, |g_an|)`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    check_len(x.len(), analytic.len())?;
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("objective during gradient check"));
        }
        let fd = (up - down) / (2.0 * h);
        let an = analytic[i];
        let rel = libm::fabs(fd - an) / 1f64.max(libm::fabs(fd)).max(libm::fabs(an));
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng;

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0, -1.0, 2.0], &[3.0, -1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 4 / (√5·√5)
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroNorm));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn masked_softmax_examples() {
        let out = masked_softmax(&[9.0, 1.0, 1.0], &[0]).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 0.5]);
        let out = masked_softmax(&[0.0, libm::log(3.0)], &[]).unwrap();
        assert!((out[0] - 0.25).abs() < 1e-15 && (out[1] - 0.75).abs() < 1e-15);
        assert_eq!(masked_softmax(&[5.0], &[]).unwrap(), vec![1.0]);
        assert_eq!(masked_softmax(&[1.0, 2.0], &[0, 1]), Err(Error::AllMasked));
    }

    #[test]
    fn masked_inputs_may_be_infinite() {
        let out = masked_softmax(&[f64::NEG_INFINITY, 2.0, 2.0], &[0]).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(libm::log(3.0)) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 6.0]]).unwrap();
        let km = kmeans(&pts, 1, 10, Seed(3)).unwrap();
        assert!((km.centroids.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((km.centroids.get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_distinct_points() {
        let rows = vec![
            vec![0.0, 0.0],
            vec![1.0, 5.0],
            vec![0.0, 0.0],
            vec![-4.0, 2.0],
        ];
        let pts = Mat::from_rows(&rows).unwrap();
        let km = kmeans(&pts, 3, 20, Seed(11)).unwrap();
        let mut got: Vec<Vec<f64>> = (0..3).map(|k| km.centroids.row(k).to_vec()).collect();
        got.sort_by(|a, b| cmp_rows(a, b));
        assert_eq!(got, vec![vec![-4.0, 2.0], vec![0.0, 0.0], vec![1.0, 5.0]]);
        assert_eq!(*km.wcss.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_two_blobs_match_exhaustive_partition() {
        let rows = vec![
            vec![0.0, 0.1],
            vec![0.2, -0.1],
            vec![-0.1, 0.0],
            vec![10.0, 10.2],
            vec![9.8, 10.1],
            vec![10.1, 9.9],
        ];
        let pts = Mat::from_rows(&rows).unwrap();
        // Oracle: enumerate every nontrivial 2-partition and keep the cheapest.
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << 6) - 1 {
            let mut means = vec![vec![0.0; 2]; 2];
            let mut counts = [0.0; 2];
            for (i, r) in rows.iter().enumerate() {
                let g = ((mask >> i) & 1) as usize;
                counts[g] += 1.0;
                means[g][0] += r[0];
                means[g][1] += r[1];
            }
            for g in 0..2 {
                means[g][0] /= counts[g];
                means[g][1] /= counts[g];
            }
            let c: f64 = rows
                .iter()
                .enumerate()
                .map(|(i, r)| squared_distance(r, &means[((mask >> i) & 1) as usize]))
                .sum();
            if c < best.0 {
                best = (c, means);
            }
        }
        let mut want = best.1;
        want.sort_by(|a, b| cmp_rows(a, b));
        let km = kmeans(&pts, 2, 50, Seed(5)).unwrap();
        let mut got: Vec<Vec<f64>> = (0..2).map(|k| km.centroids.row(k).to_vec()).collect();
        got.sort_by(|a, b| cmp_rows(a, b));
        for (g, w) in got.iter().zip(&want) {
            assert!((g[0] - w[0]).abs() < 1e-9 && (g[1] - w[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_rejects_too_many_clusters() {
        let pts = Mat::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(
            kmeans(&pts, 3, 5, Seed(0)),
            Err(Error::TooFewPoints { k: 3, points: 2 })
        );
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // Three coincident points and one outlier; k = 2 always ends with the
        // outlier isolated.
        let pts = Mat::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![9.0]]).unwrap();
        for s in 0..10 {
            let km = kmeans(&pts, 2, 10, Seed(s)).unwrap();
            assert_eq!(*km.wcss.last().unwrap(), 0.0);
        }
    }

    #[test]
    fn grad_check_examples() {
        let x = [0.3, -1.2, 2.5];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = grad_check(|p| dot(p, p), &x, &g, 1e-5).unwrap();
        assert!(err < 1e-8);
        let err = grad_check(|_| 4.0, &x, &[0.0; 3], 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(grad_check(|_| f64::NAN, &x, &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn grad_check_bce_at_random_points() {
        let mut rng = Seed(42).rng();
        for _ in 0..20 {
            let y: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let bce = |z: &[f64]| -> f64 {
                z.iter()
                    .zip(&y)
                    .map(|(&z, &y)| {
                        let p = sigmoid(z);
                        -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
                    })
                    .sum()
            };
            let g: Vec<f64> = z.iter().zip(&y).map(|(&z, &y)| sigmoid(z) - y).collect();
            assert!(grad_check(bce, &z, &g, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn seed_derivation_separates_streams() {
        let s = Seed(7);
        assert_ne!(s.derive(0), s.derive(1));
        assert_eq!(s.derive(3), s.derive(3));
    }
}
