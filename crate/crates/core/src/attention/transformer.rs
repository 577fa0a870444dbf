//! Inference-only single-layer transformer baselines.
//!
//! `t1`: `FCN(MHA(R, X))`. `t2`: `FCN(MHA(R, MHSA(X)))`, where MHSA uses `X`
//! as its own queries. Neither has residual connections or normalization.
//! The FCN acts on the row-major flattening of the M × d_out aggregate.
//!
//! Weight tensor names: `R`, `agg.w_q.{h}`, `agg.w_k.{h}`, `agg.w_v.{h}`,
//! `agg.w_l`, the same under `mhsa.` for `t2`, `fcn.weight` (C × M·d_out) and
//! `fcn.bias` (C).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};

use super::mha::{mha_forward, AttentionConfig, HeadWeights};
use crate::error::{H2tError, Result};
use crate::feature_store::{Tensor, TensorFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformerVariant {
    T1,
    T2,
}

impl FromStr for TransformerVariant {
    type Err = H2tError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t1" => Ok(TransformerVariant::T1),
            "t2" => Ok(TransformerVariant::T2),
            other => Err(H2tError::config(format!("unknown transformer variant {other:?} (t1|t2)"))),
        }
    }
}

impl fmt::Display for TransformerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformerVariant::T1 => "t1",
            TransformerVariant::T2 => "t2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub r: Array2<f64>,
    pub aggregation: AttentionConfig,
    pub self_attention: Option<AttentionConfig>,
    pub fcn_weight: Array2<f64>,
    pub fcn_bias: Array1<f64>,
}

fn load_layer(file: &TensorFile, prefix: &str, beta: Option<f64>) -> Result<AttentionConfig> {
    let mut heads = Vec::new();
    while file.get(&format!("{prefix}.w_q.{}", heads.len())).is_some() {
        let h = heads.len();
        let get = |w: &str| file.require(&format!("{prefix}.{w}.{h}"))?.to_array2();
        heads.push(HeadWeights {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
        });
    }
    if heads.is_empty() {
        return Err(H2tError::invalid(format!("missing weight tensor {prefix}.w_q.0")));
    }
    Ok(AttentionConfig {
        heads,
        w_l: file.require(&format!("{prefix}.w_l"))?.to_array2()?,
        beta,
    })
}

fn store_layer(file: &mut TensorFile, prefix: &str, layer: &AttentionConfig) {
    for (h, w) in layer.heads.iter().enumerate() {
        file.push(Tensor::from_array2(format!("{prefix}.w_q.{h}"), &w.w_q));
        file.push(Tensor::from_array2(format!("{prefix}.w_k.{h}"), &w.w_k));
        file.push(Tensor::from_array2(format!("{prefix}.w_v.{h}"), &w.w_v));
    }
    file.push(Tensor::from_array2(format!("{prefix}.w_l"), &layer.w_l));
}

impl TransformerWeights {
    /// Reads the tensors `variant` needs; `beta` applies to every attention layer.
    pub fn from_tensor_file(file: &TensorFile, variant: TransformerVariant, beta: Option<f64>) -> Result<Self> {
        let bias = file.require("fcn.bias")?;
        Ok(Self {
            r: file.require("R")?.to_array2()?,
            aggregation: load_layer(file, "agg", beta)?,
            self_attention: match variant {
                TransformerVariant::T1 => None,
                TransformerVariant::T2 => Some(load_layer(file, "mhsa", beta)?),
            },
            fcn_weight: file.require("fcn.weight")?.to_array2()?,
            fcn_bias: bias.data.iter().map(|&v| f64::from(v)).collect(),
        })
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::default();
        f.push(Tensor::from_array2("R", &self.r));
        store_layer(&mut f, "agg", &self.aggregation);
        if let Some(l) = &self.self_attention {
            store_layer(&mut f, "mhsa", l);
        }
        f.push(Tensor::from_array2("fcn.weight", &self.fcn_weight));
        f.push(Tensor {
            name: "fcn.bias".into(),
            shape: vec![self.fcn_bias.len()],
            data: self.fcn_bias.iter().map(|&v| v as f32).collect(),
        });
        f
    }

    pub fn variant(&self) -> TransformerVariant {
        if self.self_attention.is_some() {
            TransformerVariant::T2
        } else {
            TransformerVariant::T1
        }
    }
}

/// Applies the classification layer to the flattened aggregate.
fn fcn(weights: &TransformerWeights, aggregate: &Array2<f64>) -> Result<Array1<f64>> {
    let flat: Array1<f64> = aggregate.iter().copied().collect();
    if weights.fcn_weight.ncols() != flat.len() || weights.fcn_bias.len() != weights.fcn_weight.nrows() {
        return Err(H2tError::invalid(format!(
            "FCN is {:?} with bias {}, aggregate flattens to {}",
            weights.fcn_weight.dim(),
            weights.fcn_bias.len(),
            flat.len()
        )));
    }
    Ok(weights.fcn_weight.dot(&flat) + &weights.fcn_bias)
}

/// Class logits of `x` (positional encodings already applied) under `variant`.
pub fn transformer_forward(
    x: &Array2<f64>,
    variant: TransformerVariant,
    weights: &TransformerWeights,
) -> Result<Array1<f64>> {
    let mixed;
    let tokens = match variant {
        TransformerVariant::T1 => x,
        TransformerVariant::T2 => {
            let layer = weights
                .self_attention
                .as_ref()
                .ok_or_else(|| H2tError::invalid("missing weight tensors for the self-attention layer"))?;
            mixed = mha_forward(x, x, layer)?;
            &mixed
        }
    };
    let aggregate = mha_forward(&weights.r, tokens, &weights.aggregation)?;
    fcn(weights, &aggregate)
}
