//! Projection of a slide against a prototype set: per-pattern weighted
//! average pooling of the assigned (normalized) patch features, concatenated
//! into a K × d matrix.
//!
//! The attribution weight is a scalar per patch. Rows of patterns with no
//! contributing patch are zero. Contributions are summed in grid order
//! `(grid_y, grid_x)`, which makes the output independent of the order the
//! patches are supplied in.

mod batch;
mod repr;

use std::fmt;

use ndarray::Array2;

pub use batch::{batch_over_slides, project_batch, BatchReport, SlideFailure, FAILURE_REPORT};
pub use repr::{load_representations, parse_gamma_list, SlideRepresentation, Variant, REPR_EXTENSION, REPR_MAGIC};

use crate::error::{H2tError, Result};
use crate::feature_store::{validate_records, PatchRecord};
use crate::prototypes::{l2_normalize_in_place, PrototypeSet};

/// Which side of the threshold an `H-t` filter keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Keep patches with `d ≥ X`.
    #[default]
    Above,
    /// Keep patches with `d ≤ X`.
    Below,
}

/// Attribution rule applied within each pattern's assigned set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pooling {
    /// `H`: plain mean of assigned features.
    Mean,
    /// `H-w`: `(1/|Φᵢ|) Σ (1 − d) ψ` over all assigned features.
    Weighted,
    /// `H-t(X)`: mean over assigned features passing the distance threshold.
    Threshold { x: f64, mode: ThresholdMode },
    /// `H-k(X)`: mean over the X assigned features closest to the centroid.
    Closest(usize),
    /// `H-fk(X)`: mean over the X assigned features furthest from the centroid.
    Furthest(usize),
}

impl Pooling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Pooling::Threshold { x, .. } if !(0.0..=2.0).contains(&x) => Err(H2tError::invalid(format!(
                "threshold X={x} must lie in [0, 2]"
            ))),
            Pooling::Closest(0) | Pooling::Furthest(0) => {
                Err(H2tError::invalid("top-X pooling needs X ≥ 1"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pooling::Mean => write!(f, "h"),
            Pooling::Weighted => write!(f, "h-w"),
            Pooling::Threshold { x, mode: ThresholdMode::Above } => write!(f, "h-t({x})"),
            Pooling::Threshold { x, mode: ThresholdMode::Below } => write!(f, "h-t-below({x})"),
            Pooling::Closest(n) => write!(f, "h-k({n})"),
            Pooling::Furthest(n) => write!(f, "h-fk({n})"),
        }
    }
}

/// A patch that has been normalized and assigned to its nearest pattern.
#[derive(Debug, Clone)]
struct Member {
    record: usize,
    distance: f64,
}

struct Assigned {
    features: Vec<Vec<f64>>,
    by_pattern: Vec<Vec<Member>>,
}

fn assign_all(records: &[PatchRecord], prototypes: &PrototypeSet) -> Result<Assigned> {
    let dim = validate_records(records)?;
    if dim != prototypes.feature_dim() {
        return Err(H2tError::DimensionMismatch {
            expected: prototypes.feature_dim(),
            found: dim,
        });
    }
    let mut features = Vec::with_capacity(records.len());
    let mut by_pattern: Vec<Vec<Member>> = vec![Vec::new(); prototypes.k()];
    for (i, r) in records.iter().enumerate() {
        let mut f = r.feature_f64();
        l2_normalize_in_place(&mut f).map_err(|e| e.context(format!("patch {i}")))?;
        let a = prototypes.assign_unchecked(&f);
        by_pattern[a.index].push(Member {
            record: i,
            distance: a.distance,
        });
        features.push(f);
    }
    Ok(Assigned {
        features,
        by_pattern,
    })
}

fn select(members: &[Member], pooling: Pooling) -> Vec<Member> {
    match pooling {
        Pooling::Mean | Pooling::Weighted => members.to_vec(),
        Pooling::Threshold { x, mode } => members
            .iter()
            .filter(|m| match mode {
                ThresholdMode::Above => m.distance >= x,
                ThresholdMode::Below => m.distance <= x,
            })
            .cloned()
            .collect(),
        Pooling::Closest(n) | Pooling::Furthest(n) => {
            let mut sorted = members.to_vec();
            let furthest = matches!(pooling, Pooling::Furthest(_));
            // members are already in input order, so a stable sort keeps
            // input order among equal distances
            sorted.sort_by(|a, b| {
                let o = a.distance.partial_cmp(&b.distance).expect("finite distances");
                if furthest { o.reverse() } else { o }
            });
            sorted.truncate(n);
            sorted
        }
    }
}

/// Record indices contributing to each pattern's row, in input order.
pub fn contributors(
    records: &[PatchRecord],
    prototypes: &PrototypeSet,
    pooling: Pooling,
) -> Result<Vec<Vec<usize>>> {
    pooling.validate()?;
    let assigned = assign_all(records, prototypes)?;
    Ok(assigned
        .by_pattern
        .iter()
        .map(|m| {
            let mut idx: Vec<usize> = select(m, pooling).iter().map(|m| m.record).collect();
            idx.sort_unstable();
            idx
        })
        .collect())
}

/// Projects one slide into its K × d pooled representation.
pub fn project_matrix(
    records: &[PatchRecord],
    prototypes: &PrototypeSet,
    pooling: Pooling,
) -> Result<Array2<f64>> {
    pooling.validate()?;
    let assigned = assign_all(records, prototypes)?;
    let (k, d) = (prototypes.k(), prototypes.feature_dim());
    let mut out = Array2::<f64>::zeros((k, d));
    for (i, members) in assigned.by_pattern.iter().enumerate() {
        let mut chosen = select(members, pooling);
        if chosen.is_empty() {
            continue;
        }
        chosen.sort_by_key(|m| (records[m.record].grid_y, records[m.record].grid_x));
        let denom = match pooling {
            Pooling::Weighted => members.len(),
            _ => chosen.len(),
        } as f64;
        let mut row = out.row_mut(i);
        let acc = row.as_slice_mut().expect("standard layout");
        for m in &chosen {
            let w = match pooling {
                Pooling::Weighted => 1.0 - m.distance,
                _ => 1.0,
            };
            for (a, &v) in acc.iter_mut().zip(&assigned.features[m.record]) {
                *a += w * v;
            }
        }
        for a in acc.iter_mut() {
            *a /= denom;
        }
    }
    Ok(out)
}

pub fn project(
    slide_id: &str,
    records: &[PatchRecord],
    prototypes: &PrototypeSet,
    pooling: Pooling,
) -> Result<SlideRepresentation> {
    Ok(SlideRepresentation {
        slide_id: slide_id.to_string(),
        variant: Variant::Pooled(pooling),
        matrix: project_matrix(records, prototypes, pooling)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(x: u32, y: u32, f: &[f32]) -> PatchRecord {
        PatchRecord::new(x, y, f.to_vec())
    }

    fn at_angle(x: u32, deg: f64) -> PatchRecord {
        let r = deg.to_radians();
        rec(x, 0, &[r.cos() as f32, r.sin() as f32])
    }

    #[test]
    fn mean_of_one_pattern() {
        let protos = PrototypeSet::new(array![[1.0, 1.0], [-1.0, -1.0]], 1, 0, "").unwrap();
        let recs = vec![rec(0, 0, &[1.0, 0.0]), rec(1, 0, &[0.0, 3.0])];
        let m = project_matrix(&recs, &protos, Pooling::Mean).unwrap();
        assert_eq!(m, array![[0.5, 0.5], [0.0, 0.0]]);
    }

    #[test]
    fn vacuous_filters_equal_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<_> = (0..60)
            .map(|i| rec(i % 8, i / 8, &[rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5, rng.random()]))
            .collect();
        let protos = PrototypeSet::new(
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]],
            1,
            0,
            "",
        )
        .unwrap();
        let mean = project_matrix(&recs, &protos, Pooling::Mean).unwrap();
        let t0 = project_matrix(&recs, &protos, Pooling::Threshold { x: 0.0, mode: ThresholdMode::Above }).unwrap();
        let k_all = project_matrix(&recs, &protos, Pooling::Closest(60)).unwrap();
        let fk_all = project_matrix(&recs, &protos, Pooling::Furthest(1000)).unwrap();
        let below2 = project_matrix(&recs, &protos, Pooling::Threshold { x: 2.0, mode: ThresholdMode::Below }).unwrap();
        assert_eq!(mean, t0);
        assert_eq!(mean, k_all);
        assert_eq!(mean, fk_all);
        assert_eq!(mean, below2);
    }

    #[test]
    fn weighted_toy() {
        let protos = PrototypeSet::new(array![[1.0, 0.0], [-1.0, 0.0]], 1, 0, "").unwrap();
        let recs = vec![at_angle(0, 30.0), at_angle(1, 60.0)];
        let m = project_matrix(&recs, &protos, Pooling::Weighted).unwrap();
        assert!((m[[0, 0]] - 0.2089).abs() < 5e-5, "{m}");
        assert!((m[[0, 1]] - 0.1206).abs() < 5e-5, "{m}");
        assert_eq!(m.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn weighted_keeps_negative_weights_and_unfiltered_denominator() {
        // a patch at 120° from its only centroid has d = 2 sin 60° ≈ 1.732 > 1
        let protos = PrototypeSet::new(array![[1.0, 0.0]], 1, 0, "").unwrap();
        let recs = vec![at_angle(0, 120.0)];
        let m = project_matrix(&recs, &protos, Pooling::Weighted).unwrap();
        let d = 2.0 * 60f64.to_radians().sin();
        let expected_x = (1.0 - d) * (120f64.to_radians().cos() as f32 as f64);
        assert!((m[[0, 0]] - expected_x).abs() < 1e-6);
        assert!(m[[0, 1]] < 0.0);
    }

    #[test]
    fn top_one_is_nearest_patch() {
        let protos = PrototypeSet::new(array![[1.0, 0.0], [0.0, 1.0]], 1, 0, "").unwrap();
        let recs = vec![at_angle(0, 20.0), at_angle(1, 5.0), at_angle(2, 40.0), at_angle(3, 80.0)];
        let m = project_matrix(&recs, &protos, Pooling::Closest(1)).unwrap();
        let mut f = recs[1].feature_f64();
        l2_normalize_in_place(&mut f).unwrap();
        assert_eq!(m.row(0).to_vec(), f);
        let far = project_matrix(&recs, &protos, Pooling::Furthest(1)).unwrap();
        let mut g = recs[2].feature_f64();
        l2_normalize_in_place(&mut g).unwrap();
        assert_eq!(far.row(0).to_vec(), g);
    }

    #[test]
    fn threshold_filters_and_empty_rows() {
        let protos = PrototypeSet::new(array![[1.0, 0.0], [-1.0, 0.0]], 1, 0, "").unwrap();
        let recs = vec![at_angle(0, 10.0), at_angle(1, 50.0)];
        // d(10°) ≈ 0.174, d(50°) ≈ 0.845
        let above = contributors(&recs, &protos, Pooling::Threshold { x: 0.5, mode: ThresholdMode::Above }).unwrap();
        assert_eq!(above[0], vec![1]);
        let below = contributors(&recs, &protos, Pooling::Threshold { x: 0.5, mode: ThresholdMode::Below }).unwrap();
        assert_eq!(below[0], vec![0]);
        let none = project_matrix(&recs, &protos, Pooling::Threshold { x: 1.5, mode: ThresholdMode::Above }).unwrap();
        assert!(none.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_errors() {
        let protos = PrototypeSet::new(array![[1.0, 0.0]], 1, 0, "").unwrap();
        let recs = vec![at_angle(0, 10.0)];
        assert!(project_matrix(&recs, &protos, Pooling::Closest(0)).is_err());
        assert!(project_matrix(&recs, &protos, Pooling::Furthest(0)).is_err());
        assert!(project_matrix(&recs, &protos, Pooling::Threshold { x: 2.5, mode: ThresholdMode::Above }).is_err());
        assert!(project_matrix(&recs, &protos, Pooling::Threshold { x: -0.1, mode: ThresholdMode::Above }).is_err());
        let wrong = vec![rec(0, 0, &[1.0, 0.0, 0.0])];
        assert!(project_matrix(&wrong, &protos, Pooling::Mean).is_err());
        assert!(project_matrix(&[rec(0, 0, &[0.0, 0.0])], &protos, Pooling::Mean).is_err());
    }

    fn random_slide(seed: u64, n: usize, d: usize) -> Vec<PatchRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                rec(
                    (i % 9) as u32,
                    (i / 9) as u32,
                    &(0..d).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect::<Vec<_>>(),
                )
            })
            .collect()
    }

    fn random_protos(seed: u64, k: usize, d: usize) -> PrototypeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PrototypeSet::new(Array2::from_shape_fn((k, d), |_| rng.random::<f64>() - 0.5), 1, 0, "").unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn permutation_invariance(seed in 0u64..1000, x in 1usize..6) {
            let recs = random_slide(seed, 40, 4);
            let protos = random_protos(seed + 1, 3, 4);
            let mut shuffled = recs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 2));
            for pooling in [
                Pooling::Mean,
                Pooling::Weighted,
                Pooling::Threshold { x: 0.4, mode: ThresholdMode::Above },
                Pooling::Closest(x),
                Pooling::Furthest(x),
            ] {
                // random continuous features give distinct distances
                let a = project_matrix(&recs, &protos, pooling).unwrap();
                let b = project_matrix(&shuffled, &protos, pooling).unwrap();
                let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a), bits(&b), "{}", pooling);
            }
        }

        #[test]
        fn top_x_subsets_are_nested(seed in 0u64..1000, x1 in 1usize..10, extra in 0usize..10) {
            let recs = random_slide(seed, 50, 3);
            let protos = random_protos(seed + 7, 4, 3);
            for make in [Pooling::Closest as fn(usize) -> Pooling, Pooling::Furthest] {
                let small = contributors(&recs, &protos, make(x1)).unwrap();
                let big = contributors(&recs, &protos, make(x1 + extra)).unwrap();
                for (s, b) in small.iter().zip(&big) {
                    prop_assert!(s.iter().all(|i| b.contains(i)));
                }
            }
        }

        #[test]
        fn mean_rows_inside_hull(seed in 0u64..1000) {
            // a populated H row is a convex combination of unit vectors: norm ≤ 1,
            // and each coordinate stays within the assigned features' envelope
            let recs = random_slide(seed, 30, 3);
            let protos = random_protos(seed + 3, 3, 3);
            let m = project_matrix(&recs, &protos, Pooling::Mean).unwrap();
            let members = contributors(&recs, &protos, Pooling::Mean).unwrap();
            for (i, idx) in members.iter().enumerate() {
                if idx.is_empty() {
                    prop_assert!(m.row(i).iter().all(|&v| v == 0.0));
                    continue;
                }
                let feats: Vec<Vec<f64>> = idx.iter().map(|&j| l2_normalize_ref(&recs[j])).collect();
                for c in 0..3 {
                    let lo = feats.iter().map(|f| f[c]).fold(f64::INFINITY, f64::min);
                    let hi = feats.iter().map(|f| f[c]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(m[[i, c]] >= lo - 1e-12 && m[[i, c]] <= hi + 1e-12);
                }
            }
        }
    }

    fn l2_normalize_ref(r: &PatchRecord) -> Vec<f64> {
        let f = r.feature_f64();
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        f.iter().map(|v| v / n).collect()
    }
}
