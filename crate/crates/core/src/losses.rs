//! Per-digit classification losses, class-balancing weights and the batch
//! aggregation used for training.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::round_half_away;
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Real, Tensor, Var};

/// Log clamp used by every probability loss.
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Focal,
    MseRegression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_range")]
    pub weight_range: [f64; 2],
    /// Apply inverse-frequency class weights; otherwise every weight is 1.
    #[serde(default = "default_true")]
    pub class_balancing: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_gamma() -> f64 {
    2.0
}

fn default_range() -> [f64; 2] {
    [0.25, 0.75]
}

fn default_true() -> bool {
    true
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Focal,
            gamma: default_gamma(),
            weight_range: default_range(),
            class_balancing: true,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let [low, high] = self.weight_range;
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(low > 0.0 && low <= high) {
            return Err(Error::config(format!("weight range [{low}, {high}] must satisfy 0 < low <= high")));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }
}

fn check_target(t: f64) -> Result<()> {
    if t == 0.0 || t == 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("target must be 0 or 1, got {t}")))
    }
}

/// Binary cross entropy with `p` clamped to `[eps, 1 - eps]`.
pub fn bce(p: f64, t: f64) -> Result<f64> {
    check_target(t)?;
    let p = p.clamp(DEFAULT_EPSILON, 1.0 - DEFAULT_EPSILON);
    Ok(-t * p.ln() - (1.0 - t) * (1.0 - p).ln())
}

/// Focal loss: cross entropy modulated by `(1-p)^gamma` / `p^gamma`.
pub fn focal(p: f64, t: f64, gamma: f64) -> Result<f64> {
    check_target(t)?;
    let p = p.clamp(DEFAULT_EPSILON, 1.0 - DEFAULT_EPSILON);
    Ok(-t * (1.0 - p).powf(gamma) * p.ln() - (1.0 - t) * p.powf(gamma) * (1.0 - p).ln())
}

/// Per-digit loss and its derivative w.r.t. `p`, evaluated at the clamped
/// probability so saturated outputs keep a finite, nonzero gradient.
fn digit_loss<T: Real>(p: T, t: T, gamma: Option<T>, eps: T) -> (T, T) {
    let one = T::one();
    let p = p.max(eps).min(one - eps);
    let q = one - p;
    match gamma {
        None => {
            let loss = -t * p.ln() - (one - t) * q.ln();
            let d = -t / p + (one - t) / q;
            (loss, d)
        }
        Some(gm) => {
            let (lp, lq) = (p.ln(), q.ln());
            let pos = q.powf(gm);
            let neg = p.powf(gm);
            let loss = -t * pos * lp - (one - t) * neg * lq;
            let dpos = if gm == T::zero() { T::zero() } else { gm * q.powf(gm - one) };
            let dneg = if gm == T::zero() { T::zero() } else { gm * p.powf(gm - one) };
            let d = t * (dpos * lp - pos / p) + (one - t) * (-dneg * lq + neg / q);
            (loss, d)
        }
    }
}

/// Whole-meter class of a ground-truth distance.
pub fn meter_class(distance: f64) -> usize {
    round_half_away(distance.max(0.0)) as usize
}

/// Class-balancing weights indexed by whole-meter class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    entries: BTreeMap<usize, (u64, f64)>,
    unobserved: f64,
}

impl ClassWeights {
    /// Weight 1 for every class (balancing disabled).
    pub fn uniform() -> Self {
        ClassWeights { entries: BTreeMap::new(), unobserved: 1.0 }
    }

    /// Inverse class frequencies min-max mapped onto `[low, high]`.
    ///
    /// Unobserved classes receive `high`; when every observed class has the
    /// same frequency all observed weights are the midpoint.
    pub fn from_histogram(histogram: &BTreeMap<usize, u64>, range: [f64; 2]) -> Result<Self> {
        let [low, high] = range;
        let total: u64 = histogram.values().sum();
        if total == 0 {
            return Err(Error::domain("class histogram has no observations"));
        }
        let raw: Vec<(usize, u64, f64)> = histogram
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(&c, &n)| (c, n, total as f64 / n as f64))
            .collect();
        let min = raw.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
        let max = raw.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
        let entries = raw
            .into_iter()
            .map(|(c, n, r)| {
                let w = if max > min { low + (r - min) / (max - min) * (high - low) } else { 0.5 * (low + high) };
                (c, (n, w))
            })
            .collect();
        Ok(ClassWeights { entries, unobserved: high })
    }

    pub fn weight(&self, class: usize) -> f64 {
        self.entries.get(&class).map_or(self.unobserved, |e| e.1)
    }

    pub fn unobserved_weight(&self) -> f64 {
        self.unobserved
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ClassWeights {
            entries: self.entries.iter().map(|(&c, &(n, w))| (c, (n, w * factor))).collect(),
            unobserved: self.unobserved * factor,
        }
    }

    /// `(class, count, weight)` rows in class order.
    pub fn rows(&self) -> impl Iterator<Item = (usize, u64, f64)> + '_ {
        self.entries.iter().map(|(&c, &(n, w))| (c, n, w))
    }

    /// Plain-text table: a header, one `class,count,weight` row per observed
    /// class, and a trailing `unobserved` row.
    pub fn to_text(&self) -> String {
        let mut s = String::from("class,count,weight\n");
        for (c, n, w) in self.rows() {
            let _ = writeln!(s, "{c},{n},{w:?}");
        }
        let _ = writeln!(s, "unobserved,0,{:?}", self.unobserved);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut unobserved = None;
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            if parts.len() != 3 {
                return Err(bad("expected class,count,weight"));
            }
            let w: f64 = parts[2].trim().parse().map_err(|_| bad("bad weight"))?;
            if parts[0] == "unobserved" {
                unobserved = Some(w);
                continue;
            }
            let c: usize = parts[0].trim().parse().map_err(|_| bad("bad class"))?;
            let n: u64 = parts[1].trim().parse().map_err(|_| bad("bad count"))?;
            entries.insert(c, (n, w));
        }
        let unobserved = unobserved.ok_or_else(|| Error::Parse { line: 0, msg: "missing unobserved row".into() })?;
        Ok(ClassWeights { entries, unobserved })
    }
}

struct OrdinalLoss<T> {
    targets: Vec<T>,
    sample_weights: Vec<T>,
    k: usize,
    gamma: Option<T>,
    eps: T,
}

impl<T: Real> CustomOp<T> for OrdinalLoss<T> {
    fn name(&self) -> &'static str {
        "ordinal_loss"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let preds = inputs[0];
        let scale = grad[0] / T::lit(preds.len() as f64);
        let d = preds
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(i, (&p, &t))| {
                let (_, dp) = digit_loss(p, t, self.gamma, self.eps);
                scale * self.sample_weights[i / self.k] * dp
            })
            .collect();
        vec![Some(d)]
    }
}

/// `1/(N K) * sum_n sum_k alpha_{c(n)} L(preds[n,k], targets[n,k])` where
/// `c(n)` is sample `n`'s whole-meter class.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    preds: Var,
    targets: &Tensor<T>,
    sample_classes: &[usize],
    cfg: &LossConfig,
    weights: &ClassWeights,
) -> Result<Var> {
    let shape = g.shape(preds).to_vec();
    if shape.len() != 2 || shape != targets.shape() {
        return Err(Error::dim("batch_loss", format!("predictions {shape:?} vs targets {:?}", targets.shape())));
    }
    if sample_classes.len() != shape[0] {
        return Err(Error::dim("batch_loss", format!("{} sample classes for batch of {}", sample_classes.len(), shape[0])));
    }
    if targets.data().iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(Error::domain("targets must be 0 or 1"));
    }
    let gamma = match cfg.kind {
        LossKind::Bce => None,
        LossKind::Focal => Some(T::lit(cfg.gamma)),
        LossKind::MseRegression => return Err(Error::config("batch_loss needs an ordinal loss kind")),
    };
    let k = shape[1];
    let sample_weights: Vec<T> = sample_classes.iter().map(|&c| T::lit(weights.weight(c))).collect();
    let eps = T::lit(cfg.epsilon);
    let mut total = T::zero();
    for (i, (&p, &t)) in g.value(preds).iter().zip(targets.data()).enumerate() {
        total += sample_weights[i / k] * digit_loss(p, t, gamma, eps).0;
    }
    let value = total / T::lit((shape[0] * k) as f64);
    let op = OrdinalLoss { targets: targets.data().to_vec(), sample_weights, k, gamma, eps };
    g.custom(&[preds], Vec::new(), vec![value], Box::new(op))
}

/// Mean squared error between predicted and true distances.
pub fn mse_regression_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    if g.value(pred).len() != g.value(gt).len() {
        return Err(Error::dim("mse_regression_loss", format!("{:?} vs {:?}", g.shape(pred), g.shape(gt))));
    }
    let n = g.value(pred).len();
    let p = g.reshape(pred, &[n])?;
    let t = g.reshape(gt, &[n])?;
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}
