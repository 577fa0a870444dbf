use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{H2tError, Result};
use crate::feature_store::CohortManifest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub cohort: String,
    pub size: usize,
}

/// Stratified assignment of slides to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
    pub strata: Vec<Stratum>,
}

impl FoldPlan {
    pub fn fold_of(&self, slide_id: &str) -> Option<usize> {
        self.assignments.get(slide_id).copied()
    }

    /// Slide ids in `fold`, sorted.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|&(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Splits the manifest into `n_folds` folds stratified by (label, cohort).
///
/// Each stratum is shuffled with its own seeded stream and dealt round-robin,
/// starting where the previous stratum stopped so fold totals stay balanced.
pub fn make_folds(manifest: &CohortManifest, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(H2tError::invalid("need at least 2 folds"));
    }
    let mut by_stratum: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for s in &manifest.slides {
        by_stratum
            .entry((s.label.clone(), s.cohort.clone()))
            .or_default()
            .push(s.slide_id.clone());
    }
    let mut assignments = BTreeMap::new();
    let mut strata = Vec::new();
    let mut offset = 0;
    for (stream, ((label, cohort), mut ids)) in by_stratum.into_iter().enumerate() {
        if ids.len() < n_folds {
            return Err(H2tError::invalid(format!(
                "stratum (label {label:?}, cohort {cohort:?}) has {} slides, fewer than {n_folds} folds",
                ids.len()
            )));
        }
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        ids.shuffle(&mut rng);
        for (r, id) in ids.iter().enumerate() {
            assignments.insert(id.clone(), (offset + r) % n_folds);
        }
        offset = (offset + ids.len()) % n_folds;
        strata.push(Stratum {
            label,
            cohort,
            size: ids.len(),
        });
    }
    Ok(FoldPlan {
        n_folds,
        seed,
        assignments,
        strata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::SlideEntry;
    use proptest::prelude::*;

    pub(crate) fn manifest(counts: &[(&str, &str, usize)]) -> CohortManifest {
        let mut slides = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for &(label, cohort, n) in counts {
            if !labels.iter().any(|l| l == label) {
                labels.push(label.into());
            }
            for i in 0..n {
                let id = format!("{label}-{cohort}-{i}");
                slides.push(SlideEntry {
                    slide_id: id.clone(),
                    path: format!("{id}.h2t"),
                    label: label.into(),
                    cohort: cohort.into(),
                    patient_id: id,
                });
            }
        }
        CohortManifest::new(labels, slides).unwrap()
    }

    /// Counts per (fold, label) recomputed straight from the plan.
    fn label_counts(plan: &FoldPlan, m: &CohortManifest) -> BTreeMap<(usize, String), usize> {
        let mut c = BTreeMap::new();
        for s in &m.slides {
            *c.entry((plan.fold_of(&s.slide_id).unwrap(), s.label.clone())).or_insert(0) += 1;
        }
        c
    }

    #[test]
    fn exact_division() {
        let m = manifest(&[("a", "x", 5), ("b", "x", 5)]);
        let plan = make_folds(&m, 5, 3).unwrap();
        let c = label_counts(&plan, &m);
        for f in 0..5 {
            assert_eq!(c[&(f, "a".to_string())], 1);
            assert_eq!(c[&(f, "b".to_string())], 1);
        }
        assert_eq!(plan, make_folds(&m, 5, 3).unwrap());
        assert_ne!(plan, make_folds(&m, 5, 4).unwrap());
    }

    #[test]
    fn seventy_thirty() {
        let m = manifest(&[("a", "x", 70), ("b", "x", 30)]);
        let plan = make_folds(&m, 5, 0).unwrap();
        let c = label_counts(&plan, &m);
        for f in 0..5 {
            assert_eq!((c[&(f, "a".to_string())], c[&(f, "b".to_string())]), (14, 6));
        }
    }

    #[test]
    fn small_stratum_rejected() {
        let m = manifest(&[("a", "x", 7), ("b", "x", 4)]);
        let err = make_folds(&m, 5, 0).unwrap_err().to_string();
        assert!(err.contains("fewer than 5 folds"), "{err}");
    }

    proptest! {
        #[test]
        fn balanced_disjoint_covering(a in 5usize..40, b in 5usize..40, c in 5usize..20, seed in any::<u64>()) {
            let m = manifest(&[("p", "x", a), ("q", "x", b), ("p", "y", c)]);
            let plan = make_folds(&m, 5, seed).unwrap();
            prop_assert_eq!(plan.assignments.len(), m.slides.len());
            let mut per: BTreeMap<(String, String, usize), usize> = BTreeMap::new();
            for s in &m.slides {
                *per.entry((s.label.clone(), s.cohort.clone(), plan.fold_of(&s.slide_id).unwrap())).or_insert(0) += 1;
            }
            for st in &plan.strata {
                let sizes: Vec<usize> = (0..5).map(|f| per.get(&(st.label.clone(), st.cohort.clone(), f)).copied().unwrap_or(0)).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
            let totals: Vec<usize> = (0..5).map(|f| plan.members(f).len()).collect();
            prop_assert!(totals.iter().max().unwrap() - totals.iter().min().unwrap() <= 1);
        }
    }
}
