//! Pattern Assignment Maps: each patch's nearest pattern placed back at its
//! grid position, plus the features derived from them (pattern histogram,
//! co-localization matrices, one-hot tensors).

mod coloc;
mod render;

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Array3};

pub use coloc::{colocalization, colocalization_stack, hist_coloc_features, ColocalizationMatrix, PcmMode};
pub use render::{palette_color, render_pam};

use crate::error::{H2tError, Result};
use crate::feature_store::bytes::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::feature_store::{validate_records, CohortManifest, PatchRecord, Tensor, TensorFile};
use crate::projection::{
    batch_over_slides, project, BatchReport, SlideRepresentation, Variant, REPR_EXTENSION,
};
use crate::prototypes::{l2_normalize_in_place, PrototypeSet};

pub const PAM_MAGIC: &[u8; 4] = b"H2TM";
pub const PAM_EXTENSION: &str = "h2tm";
pub const BACKGROUND: i32 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternAssignmentMap {
    width: usize,
    height: usize,
    k: usize,
    /// Row-major `height × width`; `BACKGROUND` or a pattern index.
    cells: Vec<i32>,
}

impl PatternAssignmentMap {
    pub fn new(width: usize, height: usize, k: usize, cells: Vec<i32>) -> Result<Self> {
        if cells.len() != width * height {
            return Err(H2tError::DimensionMismatch {
                expected: width * height,
                found: cells.len(),
            });
        }
        if k == 0 || k > i16::MAX as usize {
            return Err(H2tError::invalid(format!("pattern count {k} out of range")));
        }
        if let Some(bad) = cells.iter().find(|&&c| c < BACKGROUND || c >= k as i32) {
            return Err(H2tError::invalid(format!("cell value {bad} outside -1..{k}")));
        }
        Ok(Self {
            width,
            height,
            k,
            cells,
        })
    }

    /// Places `patterns[i]` at `positions[i] = (grid_x, grid_y)`; the canvas spans
    /// `max coordinate + 1` in each direction.
    pub fn from_assignments(positions: &[(u32, u32)], patterns: &[usize], k: usize) -> Result<Self> {
        if positions.len() != patterns.len() {
            return Err(H2tError::DimensionMismatch {
                expected: positions.len(),
                found: patterns.len(),
            });
        }
        let width = positions.iter().map(|p| p.0 as usize + 1).max().unwrap_or(0);
        let height = positions.iter().map(|p| p.1 as usize + 1).max().unwrap_or(0);
        let mut cells = vec![BACKGROUND; width * height];
        let mut seen = HashSet::with_capacity(positions.len());
        for (&(x, y), &p) in positions.iter().zip(patterns) {
            if !seen.insert((x, y)) {
                return Err(H2tError::invalid(format!("duplicate position ({x}, {y})")));
            }
            if p >= k {
                return Err(H2tError::invalid(format!("pattern {p} ≥ k={k}")));
            }
            cells[y as usize * width + x as usize] = p as i32;
        }
        Self::new(width, height, k, cells)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cells(&self) -> &[i32] {
        &self.cells
    }

    /// Cell at column `x`, row `y`.
    pub fn get(&self, x: usize, y: usize) -> i32 {
        self.cells[y * self.width + x]
    }

    pub fn to_array(&self) -> Array2<i32> {
        Array2::from_shape_vec((self.height, self.width), self.cells.clone()).expect("h × w buffer")
    }

    pub fn foreground_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != BACKGROUND).count()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(16 + 2 * self.cells.len());
        w.bytes(PAM_MAGIC);
        w.u32(self.k as u32);
        w.u32(self.width as u32);
        w.u32(self.height as u32);
        for &c in &self.cells {
            w.i16(c as i16);
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(PAM_MAGIC)?;
        let k = r.u32()? as usize;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        r.section("cells");
        let n = width
            .checked_mul(height)
            .ok_or_else(|| H2tError::format("PAM size overflows"))?;
        r.require(2 * n)?;
        let mut cells = Vec::with_capacity(n);
        for _ in 0..n {
            cells.push(i32::from(r.i16()?));
        }
        r.finish()?;
        Self::new(width, height, k, cells).map_err(|e| H2tError::format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&read_file(path)?).map_err(|e| e.context(path.display()))
    }
}

/// Assigns every (normalized) patch to its nearest prototype and places it on the grid.
pub fn build_pam(records: &[PatchRecord], prototypes: &PrototypeSet) -> Result<PatternAssignmentMap> {
    let dim = validate_records(records)?;
    if dim != prototypes.feature_dim() {
        return Err(H2tError::DimensionMismatch {
            expected: prototypes.feature_dim(),
            found: dim,
        });
    }
    let mut patterns = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let mut f = r.feature_f64();
        l2_normalize_in_place(&mut f).map_err(|e| e.context(format!("patch {i}")))?;
        patterns.push(prototypes.assign_unchecked(&f).index);
    }
    let positions: Vec<(u32, u32)> = records.iter().map(|r| (r.grid_x, r.grid_y)).collect();
    PatternAssignmentMap::from_assignments(&positions, &patterns, prototypes.k())
}

fn counts(pam: &PatternAssignmentMap) -> Vec<usize> {
    let mut c = vec![0usize; pam.k];
    for &v in &pam.cells {
        if v != BACKGROUND {
            c[v as usize] += 1;
        }
    }
    c
}

/// Proportion of foreground cells assigned to each pattern.
pub fn histogram(pam: &PatternAssignmentMap) -> Result<Vec<f64>> {
    let c = counts(pam);
    let total: usize = c.iter().sum();
    if total == 0 {
        return Err(H2tError::invalid("histogram of an all-background map"));
    }
    Ok(c.into_iter().map(|n| n as f64 / total as f64).collect())
}

/// K × height × width binary tensor; channel `c` is 1 exactly where the map holds `c`.
pub fn one_hot_pam(pam: &PatternAssignmentMap) -> Array3<f32> {
    let mut t = Array3::<f32>::zeros((pam.k, pam.height, pam.width));
    for y in 0..pam.height {
        for x in 0..pam.width {
            let v = pam.get(x, y);
            if v != BACKGROUND {
                t[[v as usize, y, x]] = 1.0;
            }
        }
    }
    t
}

/// Inverse of [`one_hot_pam`]: argmax over channels, background where all are zero.
pub fn pam_from_one_hot(t: &Array3<f32>) -> Result<PatternAssignmentMap> {
    let (k, h, w) = t.dim();
    let mut cells = vec![BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = (BACKGROUND, 0.0f32);
            for c in 0..k {
                if t[[c, y, x]] > best.1 {
                    best = (c as i32, t[[c, y, x]]);
                }
            }
            cells[y * w + x] = best.0;
        }
    }
    PatternAssignmentMap::new(w, h, k, cells)
}

/// One-hot export in the named tensor container, shape `[K, H, W]`.
pub fn one_hot_tensor_file(pam: &PatternAssignmentMap) -> TensorFile {
    let t = one_hot_pam(pam);
    let mut f = TensorFile::default();
    f.push(Tensor {
        name: "pam_one_hot".into(),
        shape: vec![pam.k, pam.height, pam.width],
        data: t.iter().copied().collect(),
    });
    f
}

/// Builds the representation `variant` of one slide, dispatching pooled
/// variants to [`crate::projection`] and map-derived ones through the PAM.
pub fn represent(
    slide_id: &str,
    records: &[PatchRecord],
    prototypes: &PrototypeSet,
    variant: &Variant,
) -> Result<SlideRepresentation> {
    let matrix = match variant {
        Variant::Pooled(p) => return project(slide_id, records, prototypes, *p),
        Variant::Histogram => {
            let h = histogram(&build_pam(records, prototypes)?)?;
            Array2::from_shape_vec((1, h.len()), h).expect("1 × K buffer")
        }
        Variant::Colocalization { gammas, all_centers } => {
            colocalization_stack(&build_pam(records, prototypes)?, gammas, pcm_mode(*all_centers))?
        }
        Variant::HistogramColocalization { gammas, all_centers } => {
            hist_coloc_features(&build_pam(records, prototypes)?, gammas, pcm_mode(*all_centers))?
        }
    };
    Ok(SlideRepresentation {
        slide_id: slide_id.to_string(),
        variant: variant.clone(),
        matrix,
    })
}

fn pcm_mode(all_centers: bool) -> PcmMode {
    if all_centers {
        PcmMode::AllCenters
    } else {
        PcmMode::Surrounded
    }
}

/// [`represent`] over every manifest slide into `<out_dir>/<slide_id>.h2tr`.
pub fn represent_batch(
    manifest: &CohortManifest,
    prototypes: &PrototypeSet,
    variant: &Variant,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<BatchReport> {
    if let Variant::Pooled(p) = variant {
        p.validate()?;
    }
    batch_over_slides(manifest, out_dir, REPR_EXTENSION, resume, |slide, records| {
        Ok(represent(&slide.slide_id, records, prototypes, variant)?.encode())
    })
}

/// Writes `<out_dir>/<slide_id>.h2tm` for every manifest slide.
pub fn build_pam_batch(
    manifest: &CohortManifest,
    prototypes: &PrototypeSet,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<BatchReport> {
    batch_over_slides(manifest, out_dir, PAM_EXTENSION, resume, |_, records| {
        Ok(build_pam(records, prototypes)?.encode())
    })
}
