//! End-to-end driver: cluster → represent → probe → report.
//!
//! Every stage writes into a directory named by a SHA-256 key over its inputs
//! and parameters. A stage whose output is already complete is skipped, so a
//! rerun with unchanged inputs does no work and yields the same report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{H2tError, Result};
use crate::evaluation::{compare_methods, run_experiment, ExperimentReport, PValueMatrix, TaskConfig};
use crate::feature_store::bytes::{read_file, write_atomic};
use crate::feature_store::{decode_slide, CohortManifest, TensorFile, SLIDE_MAGIC, TENSOR_MAGIC};
use crate::pam::{represent_batch, PatternAssignmentMap, PAM_MAGIC};
use crate::projection::{load_representations, SlideRepresentation, Variant, REPR_MAGIC};
use crate::prototypes::{fit_prototypes, KMeansConfig, PrototypeSet, PROTOTYPE_MAGIC};

const KEY_LEN: usize = 16;
const DONE_MARKER: &str = "complete";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub discovery_manifest: PathBuf,
    /// Held-out cohort; its slides must all carry one cohort name.
    #[serde(default)]
    pub evaluation_manifest: Option<PathBuf>,
    #[serde(default)]
    pub prototypes: KMeansConfig,
    /// Variant names as accepted by [`Variant::from_str`](std::str::FromStr).
    pub variants: Vec<String>,
    #[serde(default)]
    pub task: TaskConfig,
    pub output: PathBuf,
}

impl PipelineConfig {
    /// Parses TOML; relative paths are taken from `base_dir`. Both seeds
    /// (`prototypes.seed`, `task.seed`) must be given explicitly.
    pub fn from_toml_str(text: &str, base_dir: impl AsRef<Path>) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| H2tError::config(format!("pipeline config: {e}")))?;
        for section in ["prototypes", "task"] {
            let has_seed = table.get(section).and_then(|t| t.get("seed")).is_some();
            if !has_seed {
                return Err(H2tError::config(format!("pipeline config must set {section}.seed")));
            }
        }
        let mut c: Self = table
            .try_into()
            .map_err(|e| H2tError::config(format!("pipeline config: {e}")))?;
        let base = base_dir.as_ref();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut c.discovery_manifest);
        if let Some(p) = c.evaluation_manifest.as_mut() {
            fix(p);
        }
        fix(&mut c.output);
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| H2tError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parsed_variants(&self) -> Result<Vec<Variant>> {
        self.variants
            .iter()
            .map(|v| v.parse::<Variant>().map_err(|e| H2tError::config(format!("variant {v:?}: {e}"))))
            .collect()
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let paths = std::iter::once(&self.discovery_manifest).chain(self.evaluation_manifest.as_ref());
        for p in paths {
            if !p.is_file() {
                return Err(H2tError::config(format!("manifest {} does not exist", p.display())));
            }
        }
        let k = &self.prototypes;
        if k.k < 2 || k.epochs == 0 || k.batch_size == 0 {
            return Err(H2tError::config("prototypes need k ≥ 2, epochs ≥ 1 and batch_size ≥ 1"));
        }
        if self.variants.is_empty() {
            return Err(H2tError::config("no variants requested"));
        }
        let parsed = self.parsed_variants()?;
        for (i, v) in parsed.iter().enumerate() {
            if parsed[..i].iter().any(|w| w.slug() == v.slug()) {
                return Err(H2tError::config(format!("variant {v} listed twice")));
            }
            if let Variant::Pooled(p) = v {
                p.validate().map_err(|e| H2tError::config(e.to_string()))?;
            }
        }
        let t = &self.task;
        if t.n_folds < 2 || t.probe.epochs == 0 || t.probe.batch_size == 0 || !(t.probe.lr > 0.0) {
            return Err(H2tError::config("task needs n_folds ≥ 2, probe epochs ≥ 1, batch_size ≥ 1, lr > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub cached: bool,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub stages: Vec<StageRecord>,
    pub reports: Vec<ExperimentReport>,
    pub comparison: Option<PValueMatrix>,
    /// `<output>/summary.txt`
    pub summary_path: PathBuf,
}

impl PipelineOutcome {
    pub fn all_cached(&self) -> bool {
        self.stages.iter().all(|s| s.cached)
    }
}

fn hex_key(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())[..KEY_LEN].to_string()
}

/// SHA-256 over the canonical manifest and the bytes of every slide file.
pub fn cohort_digest(manifest: &CohortManifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest.content_hash().as_bytes());
    for s in &manifest.slides {
        h.update(Sha256::digest(read_file(&manifest.resolve(s))?));
    }
    Ok(hex::encode(h.finalize()))
}

struct Progress {
    done: Vec<StageRecord>,
    output: PathBuf,
}

impl Progress {
    fn push(&mut self, stage: impl Into<String>, key: &str, cached: bool, path: PathBuf) {
        let stage = stage.into();
        info!("{stage}: {} ({})", if cached { "cached" } else { "done" }, path.display());
        self.done.push(StageRecord {
            stage,
            key: key.to_string(),
            cached,
            path,
        });
    }

    /// Tags `e` with `stage` and leaves a note of what finished before it.
    fn fail(&self, stage: &str, e: H2tError) -> H2tError {
        let mut note = format!("pipeline stopped at stage {stage}: {e}\ncompleted stages:\n");
        for s in &self.done {
            let _ = writeln!(note, "  {} {} {}", s.stage, s.key, s.path.display());
        }
        let path = self.output.join("partial.txt");
        if write_atomic(&path, note.as_bytes()).is_ok() {
            warn!("partial results noted in {}", path.display());
        }
        e.stage(stage)
    }
}

fn mark_done(dir: &Path) -> Result<()> {
    write_atomic(&dir.join(DONE_MARKER), b"")
}

/// Runs the full study described by `config`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let variants = config.parsed_variants()?;
    let discovery = CohortManifest::load(&config.discovery_manifest)?;
    let mut task = config.task.clone();
    let cohort = match &config.evaluation_manifest {
        Some(p) => {
            let eval = CohortManifest::load(p)?;
            let names: std::collections::BTreeSet<&str> = eval.slides.iter().map(|s| s.cohort.as_str()).collect();
            if names.len() != 1 {
                return Err(H2tError::config(format!(
                    "evaluation manifest must hold exactly one cohort, found {names:?}"
                )));
            }
            let name = names.into_iter().next().expect("one cohort").to_string();
            if discovery.slides.iter().any(|s| s.cohort == name) {
                return Err(H2tError::config(format!("cohort {name:?} appears in both manifests")));
            }
            match &task.evaluation_cohort {
                Some(c) if *c != name => {
                    return Err(H2tError::config(format!(
                        "task evaluation_cohort {c:?} differs from the evaluation manifest cohort {name:?}"
                    )))
                }
                _ => task.evaluation_cohort = Some(name),
            }
            discovery.merged(&eval)?
        }
        None => discovery.clone(),
    };

    let out = &config.output;
    std::fs::create_dir_all(out).map_err(|e| H2tError::io(out, e))?;
    let mut progress = Progress {
        done: Vec::new(),
        output: out.clone(),
    };

    // prototypes: mined on the discovery manifest, minus any held-out cohort slides
    let mining = match &task.evaluation_cohort {
        Some(c) => discovery.filtered(|s| s.cohort != *c),
        None => discovery.clone(),
    };
    let mining_digest = cohort_digest(&mining).map_err(|e| progress.fail("cluster", e))?;
    let kc = &config.prototypes;
    let proto_key = hex_key(&[
        b"cluster",
        mining_digest.as_bytes(),
        format!("k={} epochs={} batch={} seed={}", kc.k, kc.epochs, kc.batch_size, kc.seed).as_bytes(),
    ]);
    let proto_dir = out.join("prototypes").join(&proto_key);
    let proto_path = proto_dir.join("prototypes.h2tp");
    let cached = proto_dir.join(DONE_MARKER).exists();
    if !cached {
        let protos = fit_prototypes(&mining, kc).map_err(|e| progress.fail("cluster", e))?;
        std::fs::create_dir_all(&proto_dir).map_err(|e| H2tError::io(&proto_dir, e))?;
        protos
            .save(&proto_path)
            .and_then(|_| mark_done(&proto_dir))
            .map_err(|e| progress.fail("cluster", e))?;
    }
    progress.push("cluster", &proto_key, cached, proto_path.clone());
    let protos = PrototypeSet::load(&proto_path).map_err(|e| progress.fail("cluster", e))?;

    let cohort_hash = cohort_digest(&cohort).map_err(|e| progress.fail("represent", e))?;
    let task_json = serde_json::to_string(&task).expect("task serializes");
    let mut reports = Vec::new();
    for v in &variants {
        let slug = v.slug();
        let stage = format!("represent:{slug}");
        let repr_key = hex_key(&[b"represent", proto_key.as_bytes(), cohort_hash.as_bytes(), slug.as_bytes()]);
        let repr_dir = out.join("representations").join(format!("{slug}-{repr_key}"));
        let cached = repr_dir.join(DONE_MARKER).exists();
        if !cached {
            let batch =
                represent_batch(&cohort, &protos, v, &repr_dir, true).map_err(|e| progress.fail(&stage, e))?;
            if let Some(f) = batch.failures.first() {
                let e = H2tError::invalid(format!(
                    "{} slides failed, first {}: {}",
                    batch.failures.len(),
                    f.slide_id,
                    f.error
                ));
                return Err(progress.fail(&stage, e));
            }
            mark_done(&repr_dir).map_err(|e| progress.fail(&stage, e))?;
        }
        progress.push(stage, &repr_key, cached, repr_dir.clone());

        let stage = format!("probe:{slug}");
        let probe_key = hex_key(&[b"probe", repr_key.as_bytes(), task_json.as_bytes()]);
        let report_dir = out.join("reports").join(format!("{slug}-{probe_key}"));
        let report_path = report_dir.join("report.json");
        let cached = report_dir.join(DONE_MARKER).exists();
        let report = if cached {
            read_file(&report_path)
                .and_then(|b| ExperimentReport::from_json(&String::from_utf8_lossy(&b)))
                .map_err(|e| progress.fail(&stage, e))?
        } else {
            let reps = load_representations(&cohort, &repr_dir).map_err(|e| progress.fail(&stage, e))?;
            let report = run_experiment(&cohort, &reps, &task).map_err(|e| progress.fail(&stage, e))?;
            std::fs::create_dir_all(&report_dir).map_err(|e| H2tError::io(&report_dir, e))?;
            write_atomic(&report_path, report.to_json().as_bytes())
                .and_then(|_| write_atomic(&report_dir.join("report.txt"), report.to_text().as_bytes()))
                .and_then(|_| mark_done(&report_dir))
                .map_err(|e| progress.fail(&stage, e))?;
            report
        };
        progress.push(stage, &probe_key, cached, report_path);
        reports.push(report);
    }

    let comparison = if reports.len() >= 2 {
        let scores: BTreeMap<String, Vec<f64>> = reports.iter().map(|r| (r.variant.clone(), r.fold_scores())).collect();
        Some(compare_methods(&scores).map_err(|e| progress.fail("report", e))?)
    } else {
        None
    };
    let summary = summary_text(&reports, comparison.as_ref());
    let summary_path = out.join("summary.txt");
    write_atomic(&summary_path, summary.as_bytes()).map_err(|e| progress.fail("report", e))?;
    let partial = out.join("partial.txt");
    if partial.exists() {
        let _ = std::fs::remove_file(&partial);
    }
    Ok(PipelineOutcome {
        stages: progress.done,
        reports,
        comparison,
        summary_path,
    })
}

/// One line per variant, then the adjusted p-value matrix when there are several.
pub fn summary_text(reports: &[ExperimentReport], comparison: Option<&PValueMatrix>) -> String {
    let mut s = String::new();
    let w = reports.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let _ = writeln!(s, "{:w$}  {:>15}  {:>15}  {:>15}  {:>15}", "variant", "valid_auroc", "valid_ap", "test_auroc", "test_ap");
    let ms = |m: Option<crate::evaluation::MeanStd>| m.map_or("-".to_string(), |m| format!("{:.4}±{:.4}", m.mean, m.std));
    for r in reports {
        let _ = writeln!(
            s,
            "{:w$}  {:>15}  {:>15}  {:>15}  {:>15}",
            r.variant,
            ms(Some(r.summary.valid_auroc)),
            ms(Some(r.summary.valid_ap)),
            ms(r.summary.test_auroc),
            ms(r.summary.test_ap)
        );
    }
    if let Some(c) = comparison {
        let _ = writeln!(s, "\nadjusted p-values (row > column):");
        s.push_str(&c.to_text());
    }
    s
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..KEY_LEN].to_string()
}

/// One-line summary of any artifact: type, shape and a content hash.
pub fn describe(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let damaged = |why: String| H2tError::format(format!("unknown or damaged artifact: {} ({why})", path.display()));
    let bytes = read_file(path).map_err(|e| damaged(e.to_string()))?;
    let sha = short_hash(&bytes);
    let magic: [u8; 4] = bytes.get(..4).and_then(|m| m.try_into().ok()).ok_or_else(|| damaged("too short".into()))?;
    let line = match &magic {
        m if m == PROTOTYPE_MAGIC => {
            let p = PrototypeSet::decode(&bytes).map_err(|e| damaged(e.to_string()))?;
            format!(
                "H2TP k={} d={} seed={} epochs={} manifest={}",
                p.k(),
                p.feature_dim(),
                p.seed,
                p.epochs_run,
                &p.source_manifest_hash[..p.source_manifest_hash.len().min(KEY_LEN)]
            )
        }
        m if m == REPR_MAGIC => {
            let r = SlideRepresentation::decode(&bytes).map_err(|e| damaged(e.to_string()))?;
            let (rows, cols) = r.matrix.dim();
            match r.variant {
                Variant::Pooled(_) => format!("H2TR variant={} K={rows} d={cols} slide={}", r.variant, r.slide_id),
                _ => format!("H2TR variant={} shape={rows}x{cols} slide={}", r.variant, r.slide_id),
            }
        }
        m if m == PAM_MAGIC => {
            let p = PatternAssignmentMap::decode(&bytes).map_err(|e| damaged(e.to_string()))?;
            format!(
                "H2TM K={} grid={}x{} foreground={}",
                p.k(),
                p.width(),
                p.height(),
                p.foreground_count()
            )
        }
        m if m == SLIDE_MAGIC => {
            let records = decode_slide(&bytes).map_err(|e| damaged(e.to_string()))?;
            let d = records.first().map_or(0, |r| r.feature.len());
            format!("H2T1 patches={} d={d}", records.len())
        }
        m if m == TENSOR_MAGIC => {
            let t = TensorFile::decode(&bytes).map_err(|e| damaged(e.to_string()))?;
            let list: Vec<String> = t.tensors.iter().map(|t| format!("{}{:?}", t.name, t.shape)).collect();
            format!("H2TT tensors={} [{}]", list.len(), list.join(", "))
        }
        _ => return Err(damaged("unrecognized magic".into())),
    };
    Ok(format!("{line} sha256={sha}"))
}
