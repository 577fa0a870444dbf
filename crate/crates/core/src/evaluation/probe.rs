//! Softmax-regression linear probe trained with Adam on mean cross-entropy.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, H2tError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// C × F
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub classes: Vec<String>,
    /// Full-training-set mean loss after each epoch.
    pub loss_log: Vec<f64>,
    /// 1-based epoch the parameters come from.
    pub epoch: usize,
}

/// Rows of `logits` turned into probabilities.
fn softmax(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    logits
}

/// Mean cross-entropy of `(x, y)` and its gradients with respect to the weight and bias.
pub fn loss_and_grad(
    weight: &Array2<f64>,
    bias: &Array1<f64>,
    x: &Array2<f64>,
    y: &[usize],
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut p = softmax(x.dot(&weight.t()) + bias);
    let mut loss = 0.0;
    for (i, &c) in y.iter().enumerate() {
        loss -= p[[i, c]].max(f64::MIN_POSITIVE).ln();
        p[[i, c]] -= 1.0;
    }
    p.mapv_inplace(|v| v / n);
    let gw = p.t().dot(x);
    let gb = p.sum_axis(Axis(0));
    (loss / n, gw, gb)
}

struct Adam {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
    t: i32,
}

impl Adam {
    fn new(c: usize, f: usize) -> Self {
        Self {
            m_w: Array2::zeros((c, f)),
            v_w: Array2::zeros((c, f)),
            m_b: Array1::zeros(c),
            v_b: Array1::zeros(c),
            t: 0,
        }
    }

    fn step(&mut self, lr: f64, w: &mut Array2<f64>, b: &mut Array1<f64>, gw: &Array2<f64>, gb: &Array1<f64>) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        ndarray::Zip::from(&mut *w)
            .and(&mut self.m_w)
            .and(&mut self.v_w)
            .and(gw)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        ndarray::Zip::from(&mut *b)
            .and(&mut self.m_b)
            .and(&mut self.v_b)
            .and(gb)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
    }
}

fn check_training(x: &Array2<f64>, y: &[usize], classes: &[String]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(H2tError::DimensionMismatch {
            expected: x.nrows(),
            found: y.len(),
        });
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(H2tError::invalid("probe training set is empty"));
    }
    if classes.len() < 2 {
        return Err(H2tError::invalid("probe needs at least 2 classes"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes.len()) {
        return Err(H2tError::invalid(format!("label index {bad} out of range")));
    }
    if y.iter().all(|&c| c == y[0]) {
        return Err(H2tError::invalid("probe training set has a single class"));
    }
    ensure_finite(x.iter().copied(), "probe features")
}

/// Trains for `config.epochs` epochs. After every epoch `on_epoch(epoch, probe)`
/// may return a score; the parameters of the first epoch with the highest score
/// are kept. Without scores the final epoch is kept.
pub fn train_probe_with<F>(
    x: &Array2<f64>,
    y: &[usize],
    classes: &[String],
    config: &ProbeConfig,
    mut on_epoch: F,
) -> Result<LinearProbe>
where
    F: FnMut(usize, &LinearProbe) -> Option<f64>,
{
    check_training(x, y, classes)?;
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(H2tError::invalid("probe needs epochs ≥ 1, batch size ≥ 1 and lr > 0"));
    }
    let (n, f) = x.dim();
    let c = classes.len();
    let mut probe = LinearProbe {
        weight: Array2::zeros((c, f)),
        bias: Array1::zeros(c),
        classes: classes.to_vec(),
        loss_log: Vec::with_capacity(config.epochs),
        epoch: 0,
    };
    let mut adam = Adam::new(c, f);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Array2<f64>, Array1<f64>, usize)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (_, gw, gb) = loss_and_grad(&probe.weight, &probe.bias, &xb, &yb);
            adam.step(config.lr, &mut probe.weight, &mut probe.bias, &gw, &gb);
        }
        let (loss, _, _) = loss_and_grad(&probe.weight, &probe.bias, x, y);
        if !loss.is_finite() {
            return Err(H2tError::Numeric(format!("probe loss diverged at epoch {epoch}")));
        }
        probe.loss_log.push(loss);
        probe.epoch = epoch;
        if let Some(score) = on_epoch(epoch, &probe) {
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, probe.weight.clone(), probe.bias.clone(), epoch));
            }
        }
    }
    if let Some((_, w, b, epoch)) = best {
        probe.weight = w;
        probe.bias = b;
        probe.epoch = epoch;
    }
    Ok(probe)
}

/// Trains and keeps the final epoch.
pub fn train_probe(x: &Array2<f64>, y: &[usize], classes: &[String], config: &ProbeConfig) -> Result<LinearProbe> {
    train_probe_with(x, y, classes, config, |_, _| None)
}

impl LinearProbe {
    pub fn num_features(&self) -> usize {
        self.weight.ncols()
    }

    /// n × C class probabilities.
    pub fn predict_proba(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.num_features() {
            return Err(H2tError::DimensionMismatch {
                expected: self.num_features(),
                found: x.ncols(),
            });
        }
        Ok(softmax(x.dot(&self.weight.t()) + &self.bias))
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect())
    }
}
