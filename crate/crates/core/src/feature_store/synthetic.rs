//! Seeded synthetic cohorts for desk-scale testing.
//!
//! Each slide's patches are drawn as `archetype center + class shift + noise`
//! and laid out row-major on a contiguous grid. Slide-level archetype mixtures
//! are either the class proportions exactly or a Dirichlet draw around them.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{CohortManifest, SlideEntry};
use super::slide::{write_slide_features, PatchRecord};
use crate::error::{H2tError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub label: String,
    pub n_slides: usize,
    /// Archetype mixture proportions; must sum to 1.
    pub proportions: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Patches sorted by archetype before placement: contiguous bands.
    #[default]
    Banded,
    /// Archetypes shuffled over the grid.
    Scattered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub n_archetypes: usize,
    /// Explicit archetype centers; drawn as `N(0, center_scale²)` when absent.
    pub archetypes: Option<Vec<Vec<f64>>>,
    pub center_scale: f64,
    pub classes: Vec<SyntheticClass>,
    pub patches_per_slide: usize,
    /// Isotropic Gaussian noise standard deviation per coordinate.
    pub noise: f64,
    /// Standard deviation of the per-(class, archetype) appearance offset.
    pub class_shift: f64,
    /// Dirichlet concentration of per-slide mixtures; `None` uses the class proportions.
    pub mixture_concentration: Option<f64>,
    pub grid_width: usize,
    pub layout: Layout,
    pub evaluation_fraction: f64,
    pub discovery_cohort: String,
    pub evaluation_cohort: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            n_archetypes: 4,
            archetypes: None,
            center_scale: 1.0,
            classes: vec![
                SyntheticClass {
                    label: "a".into(),
                    n_slides: 10,
                    proportions: vec![0.25; 4],
                },
                SyntheticClass {
                    label: "b".into(),
                    n_slides: 10,
                    proportions: vec![0.25; 4],
                },
            ],
            patches_per_slide: 100,
            noise: 0.1,
            class_shift: 0.0,
            mixture_concentration: None,
            grid_width: 10,
            layout: Layout::Banded,
            evaluation_fraction: 0.0,
            discovery_cohort: "discovery".into(),
            evaluation_cohort: "evaluation".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let g = self.n_archetypes;
        if g < 2 {
            return Err(H2tError::invalid("synthetic spec needs at least 2 archetypes"));
        }
        if self.feature_dim == 0 || self.patches_per_slide == 0 || self.grid_width == 0 {
            return Err(H2tError::invalid(
                "feature_dim, patches_per_slide and grid_width must be positive",
            ));
        }
        if let Some(a) = &self.archetypes {
            if a.len() != g || a.iter().any(|c| c.len() != self.feature_dim) {
                return Err(H2tError::invalid(format!(
                    "explicit archetypes must be {g} vectors of length {}",
                    self.feature_dim
                )));
            }
        }
        if self.classes.is_empty() {
            return Err(H2tError::invalid("synthetic spec has no classes"));
        }
        for c in &self.classes {
            if c.proportions.len() != g {
                return Err(H2tError::invalid(format!(
                    "class {:?} has {} proportions for {g} archetypes",
                    c.label,
                    c.proportions.len()
                )));
            }
            if c.proportions.iter().any(|&p| !(p >= 0.0)) {
                return Err(H2tError::invalid(format!(
                    "class {:?} has a negative proportion",
                    c.label
                )));
            }
            let sum: f64 = c.proportions.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(H2tError::invalid(format!(
                    "class {:?} proportions sum to {sum}, not 1",
                    c.label
                )));
            }
        }
        if self.noise < 0.0 || self.class_shift < 0.0 {
            return Err(H2tError::invalid("noise scales must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.evaluation_fraction) {
            return Err(H2tError::invalid("evaluation_fraction must lie in [0, 1]"));
        }
        if matches!(self.mixture_concentration, Some(c) if !(c > 0.0)) {
            return Err(H2tError::invalid("mixture_concentration must be positive"));
        }
        Ok(())
    }
}

/// Ground truth of a generated cohort, for oracle tests.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub manifest: CohortManifest,
    pub manifest_path: PathBuf,
    pub archetypes: Vec<Vec<f64>>,
    /// Per slide (manifest order), the archetype of each patch in on-disk order.
    pub patch_archetypes: Vec<Vec<usize>>,
}

struct SlidePlan {
    entry: SlideEntry,
    class: usize,
    stream: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Integer counts proportional to `p` summing to `n` (largest remainder, ties by index).
fn apportion(p: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&q| q * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if p[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Generates slides under `out_dir/slides/` and a manifest at `out_dir/manifest.toml`.
/// Output is a pure function of `(spec, seed)`.
pub fn generate_synthetic_cohort(
    spec: &SyntheticSpec,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<SyntheticCohort> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let d = spec.feature_dim;
    let g = spec.n_archetypes;

    let mut rng = stream_rng(seed, 0);
    let archetypes: Vec<Vec<f64>> = match &spec.archetypes {
        Some(a) => a.clone(),
        None => {
            let n = Normal::new(0.0, spec.center_scale).map_err(|e| H2tError::invalid(e.to_string()))?;
            (0..g).map(|_| (0..d).map(|_| n.sample(&mut rng)).collect()).collect()
        }
    };
    let shift_dist = Normal::new(0.0, spec.class_shift).map_err(|e| H2tError::invalid(e.to_string()))?;
    let shifts: Vec<Vec<Vec<f64>>> = spec
        .classes
        .iter()
        .map(|_| {
            (0..g)
                .map(|_| (0..d).map(|_| shift_dist.sample(&mut rng)).collect())
                .collect()
        })
        .collect();

    let mut plans = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        let n_eval = (class.n_slides as f64 * spec.evaluation_fraction).round() as usize;
        let n_disc = class.n_slides - n_eval;
        for j in 0..class.n_slides {
            let idx = plans.len();
            let id = format!("s{idx:05}");
            plans.push(SlidePlan {
                entry: SlideEntry {
                    path: format!("slides/{id}.h2t"),
                    slide_id: id,
                    label: class.label.clone(),
                    cohort: if j < n_disc {
                        spec.discovery_cohort.clone()
                    } else {
                        spec.evaluation_cohort.clone()
                    },
                    patient_id: format!("p{idx:05}"),
                },
                class: ci,
                stream: idx as u64 + 1,
            });
        }
    }

    let mut label_set: Vec<String> = Vec::new();
    for c in &spec.classes {
        if !label_set.contains(&c.label) {
            label_set.push(c.label.clone());
        }
    }
    let mut manifest = CohortManifest::new(label_set, plans.iter().map(|p| p.entry.clone()).collect())?;
    manifest.base_dir = out_dir.to_path_buf();

    let noise = Normal::new(0.0, spec.noise).map_err(|e| H2tError::invalid(e.to_string()))?;
    let patch_archetypes = plans
        .par_iter()
        .map(|plan| -> Result<Vec<usize>> {
            let mut rng = stream_rng(seed, plan.stream);
            let class = &spec.classes[plan.class];
            let n = spec.patches_per_slide;
            let mut kinds: Vec<usize> = match spec.mixture_concentration {
                None => apportion(&class.proportions, n)
                    .into_iter()
                    .enumerate()
                    .flat_map(|(a, c)| std::iter::repeat_n(a, c))
                    .collect(),
                Some(conc) => {
                    let mut mix: Vec<f64> = class
                        .proportions
                        .iter()
                        .map(|&p| {
                            if p > 0.0 {
                                Gamma::new(conc * p, 1.0).expect("positive shape").sample(&mut rng)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    let total: f64 = mix.iter().sum();
                    if total <= 0.0 {
                        mix = class.proportions.clone();
                    }
                    let pick = WeightedIndex::new(&mix)
                        .map_err(|e| H2tError::Internal(format!("mixture weights: {e}")))?;
                    let mut k: Vec<usize> = (0..n).map(|_| pick.sample(&mut rng)).collect();
                    k.sort_unstable();
                    k
                }
            };
            if spec.layout == Layout::Scattered {
                kinds.shuffle(&mut rng);
            }
            let records: Vec<PatchRecord> = kinds
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let feature = archetypes[a]
                        .iter()
                        .zip(&shifts[plan.class][a])
                        .map(|(&c, &s)| (c + s + noise.sample(&mut rng)) as f32)
                        .collect();
                    PatchRecord::new((i % spec.grid_width) as u32, (i / spec.grid_width) as u32, feature)
                })
                .collect();
            write_slide_features(&records, out_dir.join(&plan.entry.path))?;
            Ok(kinds)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest_path = out_dir.join("manifest.toml");
    manifest.save(&manifest_path)?;
    Ok(SyntheticCohort {
        manifest,
        manifest_path,
        archetypes,
        patch_archetypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::read_slide_features;

    fn three_archetypes() -> SyntheticSpec {
        SyntheticSpec {
            feature_dim: 5,
            n_archetypes: 3,
            classes: vec![
                SyntheticClass {
                    label: "x".into(),
                    n_slides: 3,
                    proportions: vec![0.5, 0.5, 0.0],
                },
                SyntheticClass {
                    label: "y".into(),
                    n_slides: 3,
                    proportions: vec![0.2, 0.3, 0.5],
                },
            ],
            patches_per_slide: 30,
            noise: 0.0,
            grid_width: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_noise_patches_are_centers() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic_cohort(&three_archetypes(), 3, dir.path()).unwrap();
        for (slide, kinds) in c.manifest.slides.iter().zip(&c.patch_archetypes) {
            let recs = read_slide_features(c.manifest.resolve(slide)).unwrap();
            for (r, &a) in recs.iter().zip(kinds) {
                let center: Vec<f32> = c.archetypes[a].iter().map(|&v| v as f32).collect();
                assert_eq!(r.feature, center);
            }
        }
    }

    #[test]
    fn deterministic_bytes() {
        let spec = SyntheticSpec {
            noise: 0.3,
            mixture_concentration: Some(5.0),
            layout: Layout::Scattered,
            ..three_archetypes()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = generate_synthetic_cohort(&spec, 11, a.path()).unwrap();
        generate_synthetic_cohort(&spec, 11, b.path()).unwrap();
        for s in &ca.manifest.slides {
            let fa = std::fs::read(a.path().join(&s.path)).unwrap();
            let fb = std::fs::read(b.path().join(&s.path)).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.toml")).unwrap(),
            std::fs::read(b.path().join("manifest.toml")).unwrap()
        );
        let c = tempfile::tempdir().unwrap();
        generate_synthetic_cohort(&spec, 12, c.path()).unwrap();
        let s = &ca.manifest.slides[0];
        assert_ne!(
            std::fs::read(a.path().join(&s.path)).unwrap(),
            std::fs::read(c.path().join(&s.path)).unwrap()
        );
    }

    #[test]
    fn spec_errors() {
        let mut spec = three_archetypes();
        spec.n_archetypes = 1;
        assert!(spec.validate().unwrap_err().to_string().contains("at least 2"));
        let mut spec = three_archetypes();
        spec.classes[0].proportions = vec![0.5, 0.5, 0.1];
        assert!(spec.validate().unwrap_err().to_string().contains("sum to"));
        let mut spec = three_archetypes();
        spec.classes[0].proportions = vec![0.5, 0.5, 1e-7];
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(&[0.5, 0.5, 0.0], 31), vec![16, 15, 0]);
        assert_eq!(apportion(&[0.2, 0.3, 0.5], 30), vec![6, 9, 15]);
        assert_eq!(apportion(&[1.0 / 3.0; 3], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn cohort_split() {
        let spec = SyntheticSpec {
            evaluation_fraction: 1.0 / 3.0,
            ..three_archetypes()
        };
        let dir = tempfile::tempdir().unwrap();
        let c = generate_synthetic_cohort(&spec, 1, dir.path()).unwrap();
        let eval = c.manifest.slides.iter().filter(|s| s.cohort == "evaluation").count();
        assert_eq!(eval, 2);
    }
}
