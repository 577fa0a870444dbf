//! Prototypical patterns: unit-norm k-means centroids over L2-normalized
//! patch features of a reference cohort.

mod kmeans;

use std::path::Path;

use log::{info, warn};
use ndarray::Array2;

pub use kmeans::{fit_kmeans, fit_kmeans_from, kmeans_plus_plus, KMeansConfig, KMeansFit};

use crate::error::{ensure_finite, H2tError, Result};
use crate::feature_store::bytes::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::feature_store::{read_slide_features, read_slide_header, CohortManifest};
use crate::linalg::{nearest_row, sq_dist};

pub const PROTOTYPE_MAGIC: &[u8; 4] = b"H2TP";

/// Pattern counts studied by default; others are accepted with a warning.
pub const STANDARD_K: [usize; 3] = [8, 16, 32];

/// Returns `feature / ‖feature‖₂`.
pub fn l2_normalize(feature: &[f64]) -> Result<Vec<f64>> {
    let mut out = feature.to_vec();
    l2_normalize_in_place(&mut out)?;
    Ok(out)
}

pub fn l2_normalize_in_place(feature: &mut [f64]) -> Result<()> {
    ensure_finite(feature.iter().copied(), "feature vector")?;
    let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(H2tError::invalid("zero-norm feature"));
    }
    for v in feature.iter_mut() {
        *v /= norm;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// K × d, unit-norm rows.
    pub centroids: Array2<f64>,
    pub epochs_run: usize,
    pub seed: u64,
    pub source_manifest_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub index: usize,
    /// Euclidean distance, clamped to `[0, 2]`.
    pub distance: f64,
}

impl PrototypeSet {
    /// Renormalizes `centroids` and quantizes them to `f32` precision so that an
    /// in-memory set and its on-disk copy behave identically.
    pub fn new(
        mut centroids: Array2<f64>,
        epochs_run: usize,
        seed: u64,
        source_manifest_hash: impl Into<String>,
    ) -> Result<Self> {
        if centroids.nrows() == 0 || centroids.ncols() == 0 {
            return Err(H2tError::invalid("prototype set must be non-empty"));
        }
        for mut row in centroids.rows_mut() {
            let slice = row.as_slice_mut().expect("standard layout");
            l2_normalize_in_place(slice).map_err(|e| e.context("centroid"))?;
            for v in slice.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
        Ok(Self {
            centroids: centroids.as_standard_layout().into_owned(),
            epochs_run,
            seed,
            source_manifest_hash: source_manifest_hash.into(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    fn flat(&self) -> &[f64] {
        self.centroids.as_slice().expect("standard layout")
    }

    /// Nearest pattern for a unit-norm feature; ties go to the lowest index.
    pub fn assign(&self, feature: &[f64]) -> Result<Assignment> {
        if feature.len() != self.feature_dim() {
            return Err(H2tError::DimensionMismatch {
                expected: self.feature_dim(),
                found: feature.len(),
            });
        }
        Ok(self.assign_unchecked(feature))
    }

    pub(crate) fn assign_unchecked(&self, feature: &[f64]) -> Assignment {
        let (index, sq) = nearest_row(feature, self.flat(), self.feature_dim());
        Assignment {
            index,
            distance: sq.sqrt().min(2.0),
        }
    }

    /// Distance from a feature to a given centroid.
    pub fn distance_to(&self, index: usize, feature: &[f64]) -> f64 {
        sq_dist(feature, self.centroids.row(index).as_slice().expect("standard layout"))
            .sqrt()
            .min(2.0)
    }

    pub fn encode(&self) -> Vec<u8> {
        let (k, d) = self.centroids.dim();
        let mut w = ByteWriter::with_capacity(28 + k * d * 4 + self.source_manifest_hash.len());
        w.bytes(PROTOTYPE_MAGIC);
        w.u32(k as u32);
        w.u32(d as u32);
        w.u64(self.seed);
        w.u32(self.epochs_run as u32);
        for &v in self.centroids.iter() {
            w.f32(v as f32);
        }
        w.string(&self.source_manifest_hash);
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(PROTOTYPE_MAGIC)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let seed = r.u64()?;
        let epochs_run = r.u32()? as usize;
        if k == 0 || d == 0 {
            return Err(H2tError::format("prototype file declares an empty matrix"));
        }
        r.section("centroids");
        let data = r.f32_vec(k * d)?;
        r.section("provenance trailer");
        let hash = r.string()?;
        r.finish()?;
        let centroids = Array2::from_shape_vec((k, d), data.into_iter().map(f64::from).collect())
            .expect("k × d buffer");
        for (i, row) in centroids.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !((norm - 1.0).abs() <= 1e-5) {
                return Err(H2tError::format(format!(
                    "centroid {i} has norm {norm}, expected unit norm"
                )));
            }
        }
        Ok(Self {
            centroids,
            epochs_run,
            seed,
            source_manifest_hash: hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&read_file(path)?).map_err(|e| e.context(path.display()))
    }
}

/// Nearest prototype of a unit-norm feature.
pub fn assign_pattern(feature: &[f64], prototypes: &PrototypeSet) -> Result<Assignment> {
    prototypes.assign(feature)
}

/// Reads every slide of `manifest` and stacks the L2-normalized features into
/// one N × d matrix, in manifest then on-disk order.
pub fn pooled_normalized_features(manifest: &CohortManifest) -> Result<Array2<f64>> {
    if manifest.slides.is_empty() {
        return Err(H2tError::invalid("manifest lists no slides"));
    }
    let mut total = 0usize;
    let mut dim = None;
    for s in &manifest.slides {
        let (n, d) = read_slide_header(manifest.resolve(s))?;
        match dim {
            None => dim = Some(d),
            Some(d0) if d0 != d => {
                return Err(H2tError::invalid(format!(
                    "slide {:?} has feature dimension {d}, expected {d0}",
                    s.slide_id
                )))
            }
            _ => {}
        }
        total += n;
    }
    let d = dim.expect("at least one slide");
    let mut data = Vec::with_capacity(total * d);
    for s in &manifest.slides {
        let records = read_slide_features(manifest.resolve(s))?;
        for r in &records {
            let start = data.len();
            data.extend(r.feature.iter().map(|&v| f64::from(v)));
            l2_normalize_in_place(&mut data[start..]).map_err(|e| e.context(&s.slide_id))?;
        }
    }
    if data.len() != total * d {
        return Err(H2tError::format("slide contents changed while reading"));
    }
    Ok(Array2::from_shape_vec((total, d), data).expect("N × d buffer"))
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(H2tError::invalid(format!("k must be at least 2, got {k}")));
    }
    if !STANDARD_K.contains(&k) {
        warn!("k={k} is outside the studied values {STANDARD_K:?}");
    }
    Ok(())
}

/// Fits prototypes on already-normalized pooled features.
pub fn fit_prototypes_from_features(
    features: &Array2<f64>,
    config: &KMeansConfig,
    source_manifest_hash: &str,
) -> Result<PrototypeSet> {
    check_k(config.k)?;
    let fit = fit_kmeans(features, config)?;
    info!(
        "k-means: {} epochs, objective {:.6} -> {:.6}{}",
        fit.epochs_run,
        fit.objective_history[0],
        fit.objective(),
        if fit.converged { " (converged)" } else { "" }
    );
    PrototypeSet::new(fit.centroids, fit.epochs_run, config.seed, source_manifest_hash)
}

/// Pools every patch of the reference cohort with equal weight and mines `k` patterns.
pub fn fit_prototypes(manifest: &CohortManifest, config: &KMeansConfig) -> Result<PrototypeSet> {
    check_k(config.k)?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(H2tError::invalid("epochs and batch_size must be at least 1"));
    }
    let features = pooled_normalized_features(manifest)?;
    info!("pooled {} patches of dimension {}", features.nrows(), features.ncols());
    fit_prototypes_from_features(&features, config, &manifest.content_hash())
}
