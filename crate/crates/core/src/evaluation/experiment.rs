//! Cross-validated linear probing of one representation variant.
//!
//! The discovery cohort is split into stratified folds. For each fold a probe
//! is trained on the remaining folds, the checkpoint is picked on the held-out
//! fold, and that checkpoint is also scored on the evaluation cohort.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::{info, warn};
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::{make_folds, FoldPlan};
use super::metrics::{auroc, average_precision, macro_ap, macro_auroc};
use super::probe::{train_probe_with, LinearProbe, ProbeConfig};
use crate::error::{H2tError, Result};
use crate::feature_store::CohortManifest;
use crate::projection::SlideRepresentation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Checkpoint {
    /// Epoch with the highest validation AUROC (macro AUROC for > 2 classes).
    #[default]
    BestValidation,
    FinalEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub name: String,
    /// Label subset in class order; empty uses the manifest label set. For two
    /// classes the second is the positive class.
    pub labels: Vec<String>,
    /// Cohort used for folds; `None` uses every slide not in the evaluation cohort.
    pub discovery_cohort: Option<String>,
    pub evaluation_cohort: Option<String>,
    pub n_folds: usize,
    pub seed: u64,
    pub probe: ProbeConfig,
    pub standardize: bool,
    pub checkpoint: Checkpoint,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: "task".into(),
            labels: Vec::new(),
            discovery_cohort: None,
            evaluation_cohort: None,
            n_folds: 5,
            seed: 0,
            probe: ProbeConfig::default(),
            standardize: false,
            checkpoint: Checkpoint::BestValidation,
        }
    }
}

impl TaskConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| H2tError::config(format!("task config: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation across folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_valid: usize,
    /// 1-based epoch of the selected checkpoint.
    pub epoch: usize,
    pub valid: Metrics,
    pub test: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub valid_auroc: MeanStd,
    pub valid_ap: MeanStd,
    pub test_auroc: Option<MeanStd>,
    pub test_ap: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub variant: String,
    pub classes: Vec<String>,
    /// How the per-fold checkpoint was chosen.
    pub selection: String,
    pub n_folds: usize,
    pub folds: Vec<FoldResult>,
    pub summary: Summary,
    pub fold_plan: FoldPlan,
    pub evaluation_ids: Vec<String>,
}

impl ExperimentReport {
    /// Per-fold scores for method comparison: test AUROC when an evaluation
    /// cohort exists, validation AUROC otherwise.
    pub fn fold_scores(&self) -> Vec<f64> {
        self.folds
            .iter()
            .map(|f| f.test.map_or(f.valid.auroc, |t| t.auroc))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| H2tError::format(format!("report: {e}")))
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task: {}  variant: {}  classes: {}", self.task, self.variant, self.classes.join(","));
        let _ = writeln!(s, "selection: {}", self.selection);
        let _ = writeln!(
            s,
            "{:>8} {:>7} {:>7} {:>5} {:>13} {:>13} {:>13} {:>13}",
            "fold", "n_train", "n_valid", "epoch", "valid_auroc", "valid_ap", "test_auroc", "test_ap"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:>8} {:>7} {:>7} {:>5} {:>13.4} {:>13.4} {:>13} {:>13}",
                f.fold,
                f.n_train,
                f.n_valid,
                f.epoch,
                f.valid.auroc,
                f.valid.ap,
                opt(f.test.map(|t| t.auroc)),
                opt(f.test.map(|t| t.ap))
            );
        }
        let ms = |m: Option<MeanStd>| m.map_or("-".to_string(), |m| format!("{:.4}±{:.4}", m.mean, m.std));
        let _ = writeln!(
            s,
            "{:>8} {:>7} {:>7} {:>5} {:>13} {:>13} {:>13} {:>13}",
            "mean±std",
            "",
            "",
            "",
            ms(Some(self.summary.valid_auroc)),
            ms(Some(self.summary.valid_ap)),
            ms(self.summary.test_auroc),
            ms(self.summary.test_ap)
        );
        s
    }
}

fn score(probe: &LinearProbe, x: &Array2<f64>, y: &[usize]) -> Result<Metrics> {
    let p = probe.predict_proba(x)?;
    if p.ncols() == 2 {
        let s = p.column(1).to_vec();
        let l: Vec<bool> = y.iter().map(|&c| c == 1).collect();
        Ok(Metrics {
            auroc: auroc(&s, &l)?,
            ap: average_precision(&s, &l)?,
        })
    } else {
        Ok(Metrics {
            auroc: macro_auroc(&p, y)?,
            ap: macro_ap(&p, y)?,
        })
    }
}

/// Column means and population standard deviations (0 replaced by 1).
fn standardizer(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    (mean, std)
}

struct Split {
    x: Array2<f64>,
    y: Vec<usize>,
}

fn gather(rows: &[(&str, usize)], features: &BTreeMap<&str, Array1<f64>>, dim: usize) -> Split {
    let mut x = Array2::zeros((rows.len(), dim));
    for (mut r, (id, _)) in x.rows_mut().into_iter().zip(rows) {
        r.assign(&features[id]);
    }
    Split {
        x,
        y: rows.iter().map(|&(_, c)| c).collect(),
    }
}

/// Runs the cross-validated probing protocol of `task` on the given representations.
pub fn run_experiment(
    manifest: &CohortManifest,
    representations: &BTreeMap<String, SlideRepresentation>,
    task: &TaskConfig,
) -> Result<ExperimentReport> {
    let classes: Vec<String> = if task.labels.is_empty() {
        manifest.label_set.clone()
    } else {
        task.labels.clone()
    };
    if classes.len() < 2 {
        return Err(H2tError::config("task needs at least 2 labels"));
    }
    if let Some(bad) = classes.iter().find(|c| !manifest.label_set.contains(c)) {
        return Err(H2tError::config(format!("task label {bad:?} is not in the manifest label set")));
    }
    let class_of = |label: &str| classes.iter().position(|c| c == label);
    let in_task = manifest.filtered(|s| class_of(&s.label).is_some());

    let is_eval = |cohort: &str| task.evaluation_cohort.as_deref() == Some(cohort);
    let discovery = in_task.filtered(|s| {
        !is_eval(&s.cohort) && task.discovery_cohort.as_deref().is_none_or(|d| d == s.cohort)
    });
    let evaluation = in_task.filtered(|s| is_eval(&s.cohort));
    if discovery.slides.is_empty() {
        return Err(H2tError::config("task selects no discovery slides"));
    }
    if task.evaluation_cohort.is_some() && evaluation.slides.is_empty() {
        return Err(H2tError::config("evaluation cohort has no slides in the task"));
    }

    let mut features: BTreeMap<&str, Array1<f64>> = BTreeMap::new();
    let mut variant = None;
    for s in discovery.slides.iter().chain(&evaluation.slides) {
        let rep = representations
            .get(&s.slide_id)
            .ok_or_else(|| H2tError::invalid(format!("missing representation for slide {}", s.slide_id)))?;
        features.insert(s.slide_id.as_str(), rep.flattened());
        variant.get_or_insert_with(|| rep.variant.to_string());
    }
    let dim = features.values().next().map(Array1::len).unwrap_or(0);
    if let Some((id, f)) = features.iter().find(|(_, f)| f.len() != dim) {
        return Err(H2tError::invalid(format!(
            "representation of {id} has length {}, expected {dim}",
            f.len()
        )));
    }

    let plan = make_folds(&discovery, task.n_folds, task.seed)?;
    fn rows_of<'a>(
        m: &'a CohortManifest,
        classes: &[String],
        keep: &dyn Fn(&str) -> bool,
    ) -> Vec<(&'a str, usize)> {
        m.slides
            .iter()
            .filter(|s| keep(&s.slide_id))
            .map(|s| {
                let c = classes.iter().position(|c| *c == s.label).expect("filtered to task labels");
                (s.slide_id.as_str(), c)
            })
            .collect()
    }
    let eval_rows = rows_of(&evaluation, &classes, &|_| true);
    let selection = match task.checkpoint {
        Checkpoint::BestValidation => format!(
            "best validation epoch by {} (earliest on ties), {} epochs, lr {}, batch {}",
            if classes.len() == 2 { "AUROC" } else { "macro AUROC" },
            task.probe.epochs,
            task.probe.lr,
            task.probe.batch_size
        ),
        Checkpoint::FinalEpoch => format!(
            "final epoch, {} epochs, lr {}, batch {}",
            task.probe.epochs, task.probe.lr, task.probe.batch_size
        ),
    };

    let outcomes: Vec<Result<FoldResult>> = (0..task.n_folds)
        .into_par_iter()
        .map(|fold| {
            let train_rows = rows_of(&discovery, &classes, &|id| plan.fold_of(id) != Some(fold));
            let valid_rows = rows_of(&discovery, &classes, &|id| plan.fold_of(id) == Some(fold));
            let mut train = gather(&train_rows, &features, dim);
            let mut valid = gather(&valid_rows, &features, dim);
            let mut test = (!eval_rows.is_empty()).then(|| gather(&eval_rows, &features, dim));
            if task.standardize {
                let (mean, std) = standardizer(&train.x);
                for s in std::iter::once(&mut train).chain(Some(&mut valid)).chain(test.as_mut()) {
                    s.x = (&s.x - &mean) / &std;
                }
            }
            let config = ProbeConfig {
                seed: task.seed.wrapping_add(fold as u64),
                ..task.probe
            };
            let probe = train_probe_with(&train.x, &train.y, &classes, &config, |_, p| match task.checkpoint {
                Checkpoint::BestValidation => score(p, &valid.x, &valid.y).ok().map(|m| m.auroc),
                Checkpoint::FinalEpoch => None,
            })?;
            Ok(FoldResult {
                fold,
                n_train: train.y.len(),
                n_valid: valid.y.len(),
                epoch: probe.epoch,
                valid: score(&probe, &valid.x, &valid.y)?,
                test: test.as_ref().map(|t| score(&probe, &t.x, &t.y)).transpose()?,
            })
        })
        .collect();

    let mut folds = Vec::new();
    for (fold, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok(f) => folds.push(f),
            Err(e) => warn!("fold {fold} skipped: {e}"),
        }
    }
    if folds.is_empty() {
        return Err(H2tError::invalid("every fold failed"));
    }
    let col = |f: &dyn Fn(&FoldResult) -> Option<f64>| -> Vec<f64> { folds.iter().filter_map(f).collect() };
    let summary = Summary {
        valid_auroc: MeanStd::of(&col(&|f| Some(f.valid.auroc))).expect("non-empty"),
        valid_ap: MeanStd::of(&col(&|f| Some(f.valid.ap))).expect("non-empty"),
        test_auroc: MeanStd::of(&col(&|f| f.test.map(|t| t.auroc))),
        test_ap: MeanStd::of(&col(&|f| f.test.map(|t| t.ap))),
    };
    let evaluation_ids: Vec<String> = evaluation.slides.iter().map(|s| s.slide_id.clone()).collect();
    let train_ids: BTreeSet<&String> = plan.assignments.keys().collect();
    if let Some(leak) = evaluation_ids.iter().find(|id| train_ids.contains(id)) {
        return Err(H2tError::Internal(format!("evaluation slide {leak} entered the fold plan")));
    }
    info!(
        "{}: valid AUROC {:.4}±{:.4}",
        task.name, summary.valid_auroc.mean, summary.valid_auroc.std
    );
    Ok(ExperimentReport {
        task: task.name.clone(),
        variant: variant.unwrap_or_default(),
        classes,
        selection,
        n_folds: task.n_folds,
        folds,
        summary,
        fold_plan: plan,
        evaluation_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::SlideEntry;
    use crate::projection::{Pooling, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture(n_per: usize, sep: f64) -> (CohortManifest, BTreeMap<String, SlideRepresentation>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut slides = Vec::new();
        let mut reps = BTreeMap::new();
        for (c, label) in ["neg", "pos"].iter().enumerate() {
            for cohort in ["disc", "eval"] {
                for i in 0..n_per {
                    let id = format!("{label}-{cohort}-{i}");
                    let shift = if c == 1 { sep } else { 0.0 };
                    let m = Array2::from_shape_fn((2, 3), |_| shift + rng.random_range(-1.0..1.0));
                    reps.insert(
                        id.clone(),
                        SlideRepresentation {
                            slide_id: id.clone(),
                            variant: Variant::Pooled(Pooling::Weighted),
                            matrix: m,
                        },
                    );
                    slides.push(SlideEntry {
                        slide_id: id.clone(),
                        path: format!("{id}.h2t"),
                        label: label.to_string(),
                        cohort: cohort.into(),
                        patient_id: id,
                    });
                }
            }
        }
        (CohortManifest::new(vec!["neg".into(), "pos".into()], slides).unwrap(), reps)
    }

    #[test]
    fn protocol_structure() {
        let (m, reps) = fixture(10, 1.5);
        let task = TaskConfig {
            evaluation_cohort: Some("eval".into()),
            probe: ProbeConfig { epochs: 30, lr: 0.05, ..Default::default() },
            ..Default::default()
        };
        let r = run_experiment(&m, &reps, &task).unwrap();
        assert_eq!(r.folds.len(), 5);
        assert_eq!(r.variant, "h-w");
        assert_eq!(r.evaluation_ids.len(), 20);
        for id in &r.evaluation_ids {
            assert!(r.fold_plan.fold_of(id).is_none());
        }
        for f in &r.folds {
            assert_eq!(f.n_train + f.n_valid, 20);
            assert!(f.test.is_some());
            assert!((1..=30).contains(&f.epoch));
        }
        assert!(r.summary.test_auroc.unwrap().mean > 0.8);

        // independent recomputation of the header from the fold rows
        let v: Vec<f64> = r.folds.iter().map(|f| f.valid.auroc).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((r.summary.valid_auroc.mean - mean).abs() < 1e-12);
        assert!((r.summary.valid_auroc.std - std).abs() < 1e-12);

        let text = r.to_text();
        assert_eq!(text.lines().count(), 2 + 1 + 5 + 1);
        assert!(text.contains("mean±std"));
        assert_eq!(ExperimentReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(run_experiment(&m, &reps, &task).unwrap(), r);
    }

    #[test]
    fn final_epoch_and_standardize() {
        let (m, reps) = fixture(10, 1.0);
        let task = TaskConfig {
            probe: ProbeConfig { epochs: 5, ..Default::default() },
            checkpoint: Checkpoint::FinalEpoch,
            standardize: true,
            ..Default::default()
        };
        let r = run_experiment(&m, &reps, &task).unwrap();
        assert!(r.folds.iter().all(|f| f.epoch == 5 && f.test.is_none()));
        assert!(r.summary.test_auroc.is_none());
        // both cohorts are discovery here
        assert_eq!(r.fold_plan.assignments.len(), 40);
    }

    #[test]
    fn missing_representation() {
        let (m, mut reps) = fixture(5, 1.0);
        reps.remove("pos-disc-3");
        let err = run_experiment(&m, &reps, &TaskConfig::default()).unwrap_err();
        assert!(err.to_string().contains("missing representation for slide pos-disc-3"));
        let bad = TaskConfig { labels: vec!["neg".into(), "other".into()], ..Default::default() };
        assert!(matches!(run_experiment(&m, &reps, &bad), Err(H2tError::Config(_))));
    }

    #[test]
    fn task_config_from_toml() {
        let t = TaskConfig::from_toml_str(
            "name = \"x\"\nlabels = [\"neg\", \"pos\"]\nevaluation_cohort = \"eval\"\ncheckpoint = \"final-epoch\"\n[probe]\nepochs = 7\n",
        )
        .unwrap();
        assert_eq!(t.probe.epochs, 7);
        assert_eq!(t.probe.lr, 1e-3);
        assert_eq!(t.checkpoint, Checkpoint::FinalEpoch);
        assert!(TaskConfig::from_toml_str("n_folds = \"five\"").is_err());
    }
}
