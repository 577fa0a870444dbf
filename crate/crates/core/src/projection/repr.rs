//! Slide representations and their `.h2tr` file format.
//!
//! Layout: magic `H2TR`, slide id (`u32` length + UTF-8), variant tag `u32`,
//! parameter `f64`, rows `u32`, cols `u32`, then rows × cols little-endian `f32`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};

use super::{Pooling, ThresholdMode};
use crate::error::{H2tError, Result};
use crate::feature_store::bytes::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::feature_store::CohortManifest;

pub const REPR_MAGIC: &[u8; 4] = b"H2TR";
pub const REPR_EXTENSION: &str = "h2tr";

/// What a representation matrix holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Pooled(Pooling),
    /// 1 × K pattern proportions.
    Histogram,
    /// (|γ|·K) × K stacked co-localization matrices.
    Colocalization { gammas: Vec<u32>, all_centers: bool },
    /// 1 × (K + |γ|·K²): histogram followed by the flattened co-localization matrices.
    HistogramColocalization { gammas: Vec<u32>, all_centers: bool },
}

fn gamma_mask(gammas: &[u32]) -> f64 {
    gammas.iter().map(|&g| (1u64 << (g - 1)) as f64).sum()
}

fn gammas_from_mask(mask: f64) -> Result<Vec<u32>> {
    if !(mask >= 1.0 && mask < 2f64.powi(52) && mask.fract() == 0.0) {
        return Err(H2tError::format(format!("invalid gamma set encoding {mask}")));
    }
    let m = mask as u64;
    Ok((0..52).filter(|b| m & (1 << b) != 0).map(|b| b + 1).collect())
}

impl Variant {
    fn tag_param(&self) -> (u32, f64) {
        match self {
            Variant::Pooled(Pooling::Mean) => (0, 0.0),
            Variant::Pooled(Pooling::Weighted) => (1, 0.0),
            Variant::Pooled(Pooling::Threshold { x, mode: ThresholdMode::Above }) => (2, *x),
            Variant::Pooled(Pooling::Closest(n)) => (3, *n as f64),
            Variant::Pooled(Pooling::Furthest(n)) => (4, *n as f64),
            Variant::Pooled(Pooling::Threshold { x, mode: ThresholdMode::Below }) => (5, *x),
            Variant::Histogram => (16, 0.0),
            Variant::Colocalization { gammas, all_centers } => (17 + 2 * *all_centers as u32, gamma_mask(gammas)),
            Variant::HistogramColocalization { gammas, all_centers } => {
                (18 + 2 * *all_centers as u32, gamma_mask(gammas))
            }
        }
    }

    fn from_tag_param(tag: u32, param: f64) -> Result<Self> {
        let count = || -> Result<usize> {
            if param >= 1.0 && param.fract() == 0.0 && param < 2f64.powi(52) {
                Ok(param as usize)
            } else {
                Err(H2tError::format(format!("invalid top-X parameter {param}")))
            }
        };
        Ok(match tag {
            0 => Variant::Pooled(Pooling::Mean),
            1 => Variant::Pooled(Pooling::Weighted),
            2 => Variant::Pooled(Pooling::Threshold { x: param, mode: ThresholdMode::Above }),
            3 => Variant::Pooled(Pooling::Closest(count()?)),
            4 => Variant::Pooled(Pooling::Furthest(count()?)),
            5 => Variant::Pooled(Pooling::Threshold { x: param, mode: ThresholdMode::Below }),
            16 => Variant::Histogram,
            17 | 19 => Variant::Colocalization { gammas: gammas_from_mask(param)?, all_centers: tag == 19 },
            18 | 20 => Variant::HistogramColocalization { gammas: gammas_from_mask(param)?, all_centers: tag == 20 },
            other => return Err(H2tError::format(format!("unknown variant tag {other}"))),
        })
    }

    /// File-system friendly name, e.g. `h-k128`, `hist+pcm-g1-2`.
    pub fn slug(&self) -> String {
        let gam = |g: &[u32]| g.iter().map(u32::to_string).collect::<Vec<_>>().join("-");
        match self {
            Variant::Pooled(Pooling::Mean) => "h".into(),
            Variant::Pooled(Pooling::Weighted) => "h-w".into(),
            Variant::Pooled(Pooling::Threshold { x, mode: ThresholdMode::Above }) => format!("h-t{x}"),
            Variant::Pooled(Pooling::Threshold { x, mode: ThresholdMode::Below }) => format!("h-t-below{x}"),
            Variant::Pooled(Pooling::Closest(n)) => format!("h-k{n}"),
            Variant::Pooled(Pooling::Furthest(n)) => format!("h-fk{n}"),
            Variant::Histogram => "hist".into(),
            Variant::Colocalization { gammas, all_centers } => {
                format!("pcm{}-g{}", if *all_centers { "-all" } else { "" }, gam(gammas))
            }
            Variant::HistogramColocalization { gammas, all_centers } => {
                format!("hist+pcm{}-g{}", if *all_centers { "-all" } else { "" }, gam(gammas))
            }
        }
    }

    /// Builds a variant from a CLI-style name and optional parameter.
    pub fn from_name(name: &str, param: Option<f64>, t_mode: ThresholdMode) -> Result<Self> {
        let need = || param.ok_or_else(|| H2tError::config(format!("variant {name} needs --param")));
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(H2tError::config(format!("variant {name} needs a positive integer X, got {v}")))
            }
        };
        let v = match name {
            "h" => Variant::Pooled(Pooling::Mean),
            "h-w" => Variant::Pooled(Pooling::Weighted),
            "h-t" => Variant::Pooled(Pooling::Threshold { x: need()?, mode: t_mode }),
            "h-t-below" => Variant::Pooled(Pooling::Threshold { x: need()?, mode: ThresholdMode::Below }),
            "h-k" => Variant::Pooled(Pooling::Closest(count(need()?)?)),
            "h-fk" => Variant::Pooled(Pooling::Furthest(count(need()?)?)),
            "hist" => Variant::Histogram,
            other => return Err(H2tError::config(format!("unknown variant {other:?}"))),
        };
        if let Variant::Pooled(p) = &v {
            p.validate().map_err(|e| H2tError::config(e.to_string()))?;
        }
        Ok(v)
    }

    pub fn pooling(&self) -> Option<Pooling> {
        match self {
            Variant::Pooled(p) => Some(*p),
            _ => None,
        }
    }
}

/// Parses `name[:param]`, e.g. `h-w`, `h-k:128`, `h-t:0.2`, `pcm:1,2`, `hist+pcm-all:1`.
impl FromStr for Variant {
    type Err = H2tError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (s.trim(), None),
        };
        let gammas = |p: Option<&str>| -> Result<Vec<u32>> {
            let list = parse_gamma_list(p.unwrap_or("1"))?;
            Ok(list)
        };
        match name {
            "pcm" | "pcm-all" => Ok(Variant::Colocalization {
                gammas: gammas(param)?,
                all_centers: name.ends_with("-all"),
            }),
            "hist+pcm" | "hist+pcm-all" => Ok(Variant::HistogramColocalization {
                gammas: gammas(param)?,
                all_centers: name.ends_with("-all"),
            }),
            _ => {
                let p = param
                    .map(|p| p.parse::<f64>().map_err(|_| H2tError::config(format!("bad variant parameter {p:?}"))))
                    .transpose()?;
                Variant::from_name(name, p, ThresholdMode::Above)
            }
        }
    }
}

/// Parses `1,2,3` into a sorted, de-duplicated list of radii ≥ 1.
pub fn parse_gamma_list(s: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let g: u32 = part
            .trim()
            .parse()
            .map_err(|_| H2tError::config(format!("bad gamma {part:?}")))?;
        if !(1..=52).contains(&g) {
            return Err(H2tError::config(format!("gamma must lie in 1..=52, got {g}")));
        }
        out.push(g);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Pooled(p) => write!(f, "{p}"),
            Variant::Histogram => write!(f, "hist"),
            Variant::Colocalization { gammas, all_centers } => {
                write!(f, "pcm{}(γ={:?})", if *all_centers { "-all" } else { "" }, gammas)
            }
            Variant::HistogramColocalization { gammas, all_centers } => {
                write!(f, "hist+pcm{}(γ={:?})", if *all_centers { "-all" } else { "" }, gammas)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideRepresentation {
    pub slide_id: String,
    pub variant: Variant,
    pub matrix: Array2<f64>,
}

impl SlideRepresentation {
    /// Row-major flattening used as the probe / forest input.
    pub fn flattened(&self) -> Array1<f64> {
        Array1::from_iter(self.matrix.iter().copied())
    }

    pub fn encode(&self) -> Vec<u8> {
        let (rows, cols) = self.matrix.dim();
        let (tag, param) = self.variant.tag_param();
        let mut w = ByteWriter::with_capacity(32 + self.slide_id.len() + rows * cols * 4);
        w.bytes(REPR_MAGIC);
        w.string(&self.slide_id);
        w.u32(tag);
        w.f64(param);
        w.u32(rows as u32);
        w.u32(cols as u32);
        for &v in self.matrix.iter() {
            w.f32(v as f32);
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(REPR_MAGIC)?;
        let slide_id = r.string()?;
        let tag = r.u32()?;
        let param = r.f64()?;
        let variant = Variant::from_tag_param(tag, param)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        r.section("matrix");
        let data = r.f32_vec(rows * cols)?;
        r.finish()?;
        Ok(Self {
            slide_id,
            variant,
            matrix: Array2::from_shape_vec((rows, cols), data.into_iter().map(f64::from).collect())
                .expect("rows × cols buffer"),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&read_file(path)?).map_err(|e| e.context(path.display()))
    }

    /// The matrix as it reads back from disk (`f32` precision).
    pub fn quantized(&self) -> Array2<f64> {
        self.matrix.mapv(|v| f64::from(v as f32))
    }
}

/// Loads `<dir>/<slide_id>.h2tr` for every manifest slide. Fails on the first
/// missing or unreadable file, or on inconsistent variants or shapes.
pub fn load_representations(
    manifest: &CohortManifest,
    dir: impl AsRef<Path>,
) -> Result<BTreeMap<String, SlideRepresentation>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    let mut first: Option<(Variant, (usize, usize))> = None;
    for s in &manifest.slides {
        let path = dir.join(format!("{}.{REPR_EXTENSION}", s.slide_id));
        if !path.exists() {
            return Err(H2tError::invalid(format!(
                "missing representation for slide {:?} ({})",
                s.slide_id,
                path.display()
            )));
        }
        let rep = SlideRepresentation::load(&path)?;
        if rep.slide_id != s.slide_id {
            return Err(H2tError::format(format!(
                "{} holds slide {:?}, expected {:?}",
                path.display(),
                rep.slide_id,
                s.slide_id
            )));
        }
        match &first {
            None => first = Some((rep.variant.clone(), rep.matrix.dim())),
            Some((v, dim)) => {
                if *v != rep.variant || *dim != rep.matrix.dim() {
                    return Err(H2tError::invalid(format!(
                        "slide {:?} representation {} {:?} differs from {} {:?}",
                        s.slide_id,
                        rep.variant,
                        rep.matrix.dim(),
                        v,
                        dim
                    )));
                }
            }
        }
        out.insert(s.slide_id.clone(), rep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn encode_decode() {
        for variant in [
            Variant::Pooled(Pooling::Closest(128)),
            Variant::Pooled(Pooling::Threshold { x: 0.3, mode: ThresholdMode::Below }),
            Variant::Histogram,
            Variant::HistogramColocalization { gammas: vec![1, 3], all_centers: true },
        ] {
            let rep = SlideRepresentation {
                slide_id: "slide-7".into(),
                variant: variant.clone(),
                matrix: array![[0.25, -1.0], [3.0, 0.0]],
            };
            let back = SlideRepresentation::decode(&rep.encode()).unwrap();
            assert_eq!(back, rep);
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("h-k:128".parse::<Variant>().unwrap(), Variant::Pooled(Pooling::Closest(128)));
        assert_eq!("h-w".parse::<Variant>().unwrap(), Variant::Pooled(Pooling::Weighted));
        assert_eq!(
            "pcm:2,1".parse::<Variant>().unwrap(),
            Variant::Colocalization { gammas: vec![1, 2], all_centers: false }
        );
        assert!("h-k".parse::<Variant>().is_err());
        assert!("h-k:0".parse::<Variant>().is_err());
        assert!("h-t:3".parse::<Variant>().is_err());
        assert!("nope".parse::<Variant>().is_err());
        assert_eq!(Variant::Pooled(Pooling::Closest(128)).to_string(), "h-k(128)");
        assert_eq!(Variant::Pooled(Pooling::Threshold { x: 0.2, mode: ThresholdMode::Above }).slug(), "h-t0.2");
    }
}
