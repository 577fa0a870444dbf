use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{project, Pooling, REPR_EXTENSION};
use crate::error::{H2tError, Result};
use crate::feature_store::bytes::write_atomic;
use crate::feature_store::{read_slide_features, CohortManifest, PatchRecord, SlideEntry};
use crate::prototypes::PrototypeSet;

pub const FAILURE_REPORT: &str = "failures.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideFailure {
    pub slide_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchReport {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
    pub failures: Vec<SlideFailure>,
}

enum Outcome {
    Written,
    Skipped,
    Failed(String),
}

/// Runs `job` on every manifest slide in parallel and writes its bytes to
/// `<out_dir>/<slide_id>.<extension>`. Per-slide errors are collected into
/// `<out_dir>/failures.json` (manifest order) instead of aborting the batch.
/// With `resume`, slides whose output already exists are not recomputed.
pub fn batch_over_slides<F>(
    manifest: &CohortManifest,
    out_dir: impl AsRef<Path>,
    extension: &str,
    resume: bool,
    job: F,
) -> Result<BatchReport>
where
    F: Fn(&SlideEntry, &[PatchRecord]) -> Result<Vec<u8>> + Sync,
{
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| H2tError::io(out_dir, e))?;
    let outcomes: Vec<Outcome> = manifest
        .slides
        .par_iter()
        .map(|slide| {
            let out = out_dir.join(format!("{}.{extension}", slide.slide_id));
            if resume && out.exists() {
                return Outcome::Skipped;
            }
            let result = read_slide_features(manifest.resolve(slide))
                .and_then(|records| job(slide, &records))
                .and_then(|bytes| write_atomic(&out, &bytes));
            match result {
                Ok(()) => Outcome::Written,
                Err(e) => Outcome::Failed(e.to_string()),
            }
        })
        .collect();

    let mut report = BatchReport::default();
    for (slide, outcome) in manifest.slides.iter().zip(outcomes) {
        let id = slide.slide_id.clone();
        match outcome {
            Outcome::Written => report.written.push(id),
            Outcome::Skipped => report.skipped.push(id),
            Outcome::Failed(error) => {
                warn!("slide {id}: {error}");
                report.failures.push(SlideFailure { slide_id: id, error });
            }
        }
    }
    let json = serde_json::to_vec_pretty(&report.failures).expect("failures serialize");
    write_atomic(&out_dir.join(FAILURE_REPORT), &json)?;
    info!(
        "{} written, {} skipped, {} failed",
        report.written.len(),
        report.skipped.len(),
        report.failures.len()
    );
    Ok(report)
}

/// Projects every manifest slide into `<out_dir>/<slide_id>.h2tr`.
pub fn project_batch(
    manifest: &CohortManifest,
    prototypes: &PrototypeSet,
    pooling: Pooling,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<BatchReport> {
    pooling.validate()?;
    batch_over_slides(manifest, out_dir, REPR_EXTENSION, resume, |slide, records| {
        Ok(project(&slide.slide_id, records, prototypes, pooling)?.encode())
    })
}
