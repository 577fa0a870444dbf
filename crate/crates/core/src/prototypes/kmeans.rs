//! Seeded mini-batch k-means with k-means++ initialization.
//!
//! An epoch walks a fresh seeded shuffle of the data in batches. Each batch is
//! assigned against the current centroids; a centroid then becomes the running
//! mean of every point assigned to it so far in the epoch. With one batch per
//! epoch this is exactly a Lloyd iteration.
//!
//! After every epoch the full-data objective is evaluated. If the epoch made it
//! worse, the epoch is discarded and replaced by an exact Lloyd step from the
//! previous centroids, so the recorded objective never increases.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure_finite, H2tError, Result};
use crate::linalg::{nearest_row, sq_dist};

/// Rows per parallel work unit. Fixed so reductions do not depend on the
/// thread count.
const CHUNK_ROWS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 16,
            epochs: 25,
            batch_size: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    /// Full-data nearest-centroid assignment for the final centroids.
    pub assignments: Vec<u32>,
    /// Mean squared distance to the nearest centroid: the initial value, then one entry per epoch.
    pub objective_history: Vec<f64>,
    pub epochs_run: usize,
    /// Whether the run stopped because the full-data assignment stopped changing.
    pub converged: bool,
    /// Epochs that were replaced by an exact Lloyd step.
    pub lloyd_fallbacks: usize,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("history holds the initial objective")
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_data(data: &Array2<f64>, k: usize) -> Result<&[f64]> {
    if k == 0 {
        return Err(H2tError::invalid("k must be at least 1"));
    }
    if data.ncols() == 0 {
        return Err(H2tError::invalid("feature dimension is zero"));
    }
    let flat = data
        .as_slice()
        .ok_or_else(|| H2tError::Internal("k-means expects a contiguous matrix".into()))?;
    ensure_finite(flat.iter().copied(), "clustering input")?;
    Ok(flat)
}

fn insufficient(k: usize) -> H2tError {
    H2tError::invalid(format!(
        "insufficient distinct points: fewer than k={k} distinct points to seed centroids"
    ))
}

/// k-means++ seeding: the first center uniformly, each next one with
/// probability proportional to the squared distance to the closest chosen center.
pub fn kmeans_plus_plus(data: &Array2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
    let flat = check_data(data, k)?;
    let (n, d) = data.dim();
    if n < k {
        return Err(insufficient(k));
    }
    let mut rng = rng_for(seed, 0);
    let mut centers = Array2::<f64>::zeros((k, d));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = flat
        .par_chunks(d)
        .map(|x| sq_dist(x, &flat[first * d..(first + 1) * d]))
        .collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(insufficient(k));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
        }
        let pick = pick.expect("total weight is positive");
        centers.row_mut(j).assign(&data.row(pick));
        let c = &flat[pick * d..(pick + 1) * d];
        d2.par_iter_mut()
            .zip(flat.par_chunks(d))
            .for_each(|(w, x)| *w = w.min(sq_dist(x, c)));
    }
    Ok(centers)
}

/// Statistics of one full pass over the data against fixed centroids.
struct FullPass {
    objective: f64,
    /// Per-centroid mean of the assigned points (row-major k × d).
    means: Vec<f64>,
    counts: Vec<u64>,
    assignments: Vec<u32>,
    /// Up to k `(sq distance, index)` pairs, farthest first.
    farthest: Vec<(f64, usize)>,
}

fn farthest_first(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0).expect("finite distances").then(a.1.cmp(&b.1))
}

fn full_pass(flat: &[f64], d: usize, centroids: &[f64], k: usize) -> FullPass {
    let n = flat.len() / d;
    let partials: Vec<FullPass> = flat
        .par_chunks(CHUNK_ROWS * d)
        .enumerate()
        .map(|(ci, chunk)| {
            let base = ci * CHUNK_ROWS;
            let mut p = FullPass {
                objective: 0.0,
                means: vec![0.0; k * d],
                counts: vec![0; k],
                assignments: Vec::with_capacity(chunk.len() / d),
                farthest: Vec::new(),
            };
            for (r, x) in chunk.chunks_exact(d).enumerate() {
                let (j, dist) = nearest_row(x, centroids, d);
                p.objective += dist;
                p.counts[j] += 1;
                let inv = 1.0 / p.counts[j] as f64;
                for (m, v) in p.means[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *m += (v - *m) * inv;
                }
                p.assignments.push(j as u32);
                p.farthest.push((dist, base + r));
                if p.farthest.len() >= 4 * k.max(1) {
                    p.farthest.sort_by(farthest_first);
                    p.farthest.truncate(k);
                }
            }
            p.farthest.sort_by(farthest_first);
            p.farthest.truncate(k);
            p
        })
        .collect();

    let mut out = FullPass {
        objective: 0.0,
        means: vec![0.0; k * d],
        counts: vec![0; k],
        assignments: Vec::with_capacity(n),
        farthest: Vec::new(),
    };
    for p in partials {
        out.objective += p.objective;
        for j in 0..k {
            let (na, nb) = (out.counts[j], p.counts[j]);
            if nb == 0 {
                continue;
            }
            let w = nb as f64 / (na + nb) as f64;
            for (a, b) in out.means[j * d..(j + 1) * d].iter_mut().zip(&p.means[j * d..(j + 1) * d]) {
                *a += (b - *a) * w;
            }
            out.counts[j] = na + nb;
        }
        out.assignments.extend_from_slice(&p.assignments);
        out.farthest.extend_from_slice(&p.farthest);
    }
    out.farthest.sort_by(farthest_first);
    out.farthest.truncate(k);
    out.objective /= n as f64;
    out
}

/// Moves every dead centroid onto the farthest remaining candidate point.
fn reseed_dead(
    centroids: &mut [f64],
    counts: &[u64],
    candidates: &[(f64, usize)],
    flat: &[f64],
    d: usize,
) {
    let mut next = candidates.iter().filter(|c| c.0 > 0.0);
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            if let Some(&(_, idx)) = next.next() {
                centroids[j * d..(j + 1) * d].copy_from_slice(&flat[idx * d..(idx + 1) * d]);
            }
        }
    }
}

fn lloyd_step(pass: &FullPass, previous: &[f64], flat: &[f64], d: usize) -> Vec<f64> {
    let mut next = previous.to_vec();
    for (j, &count) in pass.counts.iter().enumerate() {
        if count > 0 {
            next[j * d..(j + 1) * d].copy_from_slice(&pass.means[j * d..(j + 1) * d]);
        }
    }
    reseed_dead(&mut next, &pass.counts, &pass.farthest, flat, d);
    next
}

fn minibatch_epoch(
    flat: &[f64],
    d: usize,
    centroids: &mut [f64],
    k: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) {
    let n = flat.len() / d;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut means = vec![0.0; k * d];
    let mut counts = vec![0u64; k];
    let mut last_batch: Vec<(f64, usize)> = Vec::new();
    for batch in order.chunks(batch_size) {
        let assigned: Vec<(usize, f64)> = {
            let current: &[f64] = centroids;
            batch
                .par_iter()
                .with_min_len(256)
                .map(|&i| nearest_row(&flat[i * d..(i + 1) * d], current, d))
                .collect()
        };
        for (&i, &(j, _)) in batch.iter().zip(&assigned) {
            counts[j] += 1;
            let inv = 1.0 / counts[j] as f64;
            for (m, v) in means[j * d..(j + 1) * d].iter_mut().zip(&flat[i * d..(i + 1) * d]) {
                *m += (v - *m) * inv;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j * d..(j + 1) * d].copy_from_slice(&means[j * d..(j + 1) * d]);
            }
        }
        last_batch = batch.iter().zip(&assigned).map(|(&i, &(_, dist))| (dist, i)).collect();
    }
    if counts.contains(&0) {
        last_batch.sort_by(farthest_first);
        last_batch.truncate(k);
        reseed_dead(centroids, &counts, &last_batch, flat, d);
    }
}

/// Runs k-means from explicit initial centroids.
pub fn fit_kmeans_from(data: &Array2<f64>, init: Array2<f64>, config: &KMeansConfig) -> Result<KMeansFit> {
    let k = init.nrows();
    let flat = check_data(data, k)?;
    let d = data.ncols();
    if init.ncols() != d {
        return Err(H2tError::DimensionMismatch {
            expected: d,
            found: init.ncols(),
        });
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(H2tError::invalid("epochs and batch_size must be at least 1"));
    }
    let mut centroids: Vec<f64> = init.iter().copied().collect();
    let mut rng = rng_for(config.seed, 1);

    let mut pass = full_pass(flat, d, &centroids, k);
    let mut history = vec![pass.objective];
    let mut epochs_run = 0;
    let mut converged = false;
    let mut fallbacks = 0;

    for _ in 0..config.epochs {
        let mut candidate = centroids.clone();
        minibatch_epoch(flat, d, &mut candidate, k, config.batch_size, &mut rng);
        let mut next_pass = full_pass(flat, d, &candidate, k);
        if next_pass.objective > pass.objective {
            candidate = lloyd_step(&pass, &centroids, flat, d);
            next_pass = full_pass(flat, d, &candidate, k);
            fallbacks += 1;
        }
        epochs_run += 1;
        let stable = next_pass.assignments == pass.assignments;
        centroids = candidate;
        history.push(next_pass.objective);
        pass = next_pass;
        if stable {
            converged = true;
            break;
        }
    }

    Ok(KMeansFit {
        centroids: Array2::from_shape_vec((k, d), centroids).expect("k × d buffer"),
        assignments: pass.assignments,
        objective_history: history,
        epochs_run,
        converged,
        lloyd_fallbacks: fallbacks,
    })
}

/// k-means++ seeding followed by [`fit_kmeans_from`].
pub fn fit_kmeans(data: &Array2<f64>, config: &KMeansConfig) -> Result<KMeansFit> {
    let init = kmeans_plus_plus(data, config.k, config.seed)?;
    fit_kmeans_from(data, init, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_circle(deg: &[f64]) -> Array2<f64> {
        let mut a = Array2::zeros((deg.len(), 2));
        for (i, t) in deg.iter().enumerate() {
            let r = t.to_radians();
            a[[i, 0]] = r.cos();
            a[[i, 1]] = r.sin();
        }
        a
    }

    #[test]
    fn two_arcs() {
        let data = unit_circle(&[10.0, 20.0, 190.0, 200.0]);
        for batch in [1, 2, 4] {
            let fit = fit_kmeans(
                &data,
                &KMeansConfig {
                    k: 2,
                    epochs: 50,
                    batch_size: batch,
                    seed: 7,
                },
            )
            .unwrap();
            let mut angles: Vec<f64> = fit
                .centroids
                .rows()
                .into_iter()
                .map(|r| r[1].atan2(r[0]).to_degrees().rem_euclid(360.0))
                .collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert!((angles[0] - 15.0).abs() < 1e-9, "{angles:?}");
            assert!((angles[1] - 195.0).abs() < 1e-9, "{angles:?}");
        }
    }

    #[test]
    fn identical_points_single_cluster() {
        let data = array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]];
        let fit = fit_kmeans(&data, &KMeansConfig { k: 1, epochs: 3, batch_size: 2, seed: 0 }).unwrap();
        assert_eq!(fit.centroids.row(0).to_vec(), vec![0.6, 0.8]);
        let err = fit_kmeans(&data, &KMeansConfig { k: 2, epochs: 3, batch_size: 2, seed: 0 }).unwrap_err();
        assert!(err.to_string().contains("insufficient distinct points"));
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((3000, 6), |_| rng.random::<f64>());
        let fit = fit_kmeans(&data, &KMeansConfig { k: 8, epochs: 15, batch_size: 100, seed: 1 }).unwrap();
        for w in fit.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{:?}", fit.objective_history);
        }
        assert!(fit.objective() < fit.objective_history[0]);
    }

    #[test]
    fn reproducible_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array2::from_shape_fn((5000, 4), |_| rng.random::<f64>());
        let cfg = KMeansConfig { k: 5, epochs: 4, batch_size: 512, seed: 9 };
        let a = fit_kmeans(&data, &cfg).unwrap();
        let b = fit_kmeans(&data, &cfg).unwrap();
        let bits = |f: &KMeansFit| f.centroids.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn dead_centroid_is_reseeded() {
        // second initial centroid is far from all data and never wins a point
        let data = array![[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
        let init = array![[2.5, 2.5], [100.0, 100.0]];
        let fit = fit_kmeans_from(&data, init, &KMeansConfig { k: 2, epochs: 10, batch_size: 4, seed: 0 }).unwrap();
        assert!(fit.objective() < 0.01, "{:?}", fit.objective_history);
    }

    #[test]
    fn rejects_non_finite() {
        let data = array![[0.0, f64::NAN], [1.0, 0.0]];
        assert!(matches!(
            fit_kmeans(&data, &KMeansConfig { k: 1, ..Default::default() }),
            Err(H2tError::Numeric(_))
        ));
    }
}
