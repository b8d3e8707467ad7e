//! Finite-difference gradient suite over every differentiable operation and
//! a full model forward + loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::train::record_loss;
use crate::error::Result;
use crate::losses::{batch_loss, mse_regression_loss, ClassWeights, LossConfig, LossKind};
use crate::model::{dropout_streams, BatchInput, Model, ModelConfig};
use crate::nn::{self, LstmParams, LstmVars};
use crate::tensor::{grad_check_at, value_and_grad, Graph, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub seed: u64,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Elements whose stencil crossed a leaky ReLU branch point.
    pub skipped: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values with magnitude in `[0.1, 1]` so kinks at zero are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * r)` for a fixed random `r`: a scalar whose gradient exercises
/// every output element with a different weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r: Vec<f64> = (0..g.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = g.constant(&shape, r)?;
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

struct Suite {
    seed: u64,
    out: Vec<CheckOutcome>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, x: &Tensor<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let seed = self.seed;
        let all: Vec<usize> = (0..x.numel()).collect();
        let r = grad_check_at(|g, v| f(g, v).and_then(|y| project(g, y, seed)), x, FD_EPS, &all)?;
        self.out.push(CheckOutcome {
            name: name.into(),
            seed,
            max_relative_error: r.max_relative_error,
            tolerance: OP_TOLERANCE,
            checked: r.checked,
            skipped: r.skipped,
        });
        Ok(())
    }
}

/// Checks every differentiable operation on shapes drawn from `seed`.
pub fn op_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite { seed, out: Vec::new() };
    let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));

    let a = uniform(&mut rng, &[m, n]);
    let b = uniform(&mut rng, &[n]);
    let col = uniform(&mut rng, &[m, 1]);
    let (bc, ac) = (b.clone(), a.clone());
    s.check("add", &a, |g, x| {
        let y = g.constant(&[n], bc.data().to_vec())?;
        g.add(x, y)
    })?;
    s.check("add (broadcast operand)", &b, |g, x| {
        let y = g.constant(&[m, n], ac.data().to_vec())?;
        g.add(y, x)
    })?;
    s.check("sub (broadcast operand)", &b, |g, x| {
        let y = g.constant(&[m, n], ac.data().to_vec())?;
        g.sub(y, x)
    })?;
    let cc = col.clone();
    s.check("mul", &a, |g, x| {
        let y = g.constant(&[m, 1], cc.data().to_vec())?;
        g.mul(x, y)
    })?;
    s.check("mul (broadcast operand)", &col, |g, x| {
        let y = g.constant(&[m, n], ac.data().to_vec())?;
        g.mul(y, x)
    })?;
    s.check("mul (fan-out x*x)", &a, |g, x| g.mul(x, x))?;

    let u = away_from_zero(&mut rng, &[m, n]);
    s.check("logistic", &u, |g, x| Ok(g.logistic(x)))?;
    s.check("tanh", &u, |g, x| Ok(g.tanh(x)))?;
    s.check("leaky_relu", &u, |g, x| Ok(g.leaky_relu(x, 0.1)))?;
    s.check("softplus", &u, |g, x| Ok(g.softplus(x)))?;
    s.check("scale", &u, |g, x| Ok(g.scale(x, -1.7)))?;

    let lhs = uniform(&mut rng, &[m, k]);
    let rhs = uniform(&mut rng, &[k, n]);
    let rhs_t = uniform(&mut rng, &[n, k]);
    let (r1, l1, rt) = (rhs.clone(), lhs.clone(), rhs_t.clone());
    s.check("matmul (left)", &lhs, |g, x| {
        let y = g.leaf(&r1);
        g.matmul(x, y)
    })?;
    s.check("matmul (right)", &rhs, |g, x| {
        let y = g.leaf(&l1);
        g.matmul(y, x)
    })?;
    s.check("matmul_bt (left)", &lhs, |g, x| {
        let y = g.leaf(&rt);
        g.matmul_bt(x, y)
    })?;
    s.check("matmul_bt (right)", &rhs_t, |g, x| {
        let y = g.leaf(&l1);
        g.matmul_bt(y, x)
    })?;

    let (bn, c, h, w, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(5..8), rng.gen_range(5..8), rng.gen_range(1..4));
    let (kh, stride, pad) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(0..2));
    let input = uniform(&mut rng, &[bn, c, h, w]);
    let kernel = uniform(&mut rng, &[o, c, kh, kh]);
    let bias = uniform(&mut rng, &[o]);
    let (ic, kc, bc2) = (input.clone(), kernel.clone(), bias.clone());
    s.check("conv2d (input)", &input, |g, x| {
        let (kv, bv) = (g.leaf(&kc), g.leaf(&bc2));
        g.conv2d(x, kv, Some(bv), stride, pad)
    })?;
    s.check("conv2d (kernel)", &kernel, |g, x| {
        let (iv, bv) = (g.leaf(&ic), g.leaf(&bc2));
        g.conv2d(iv, x, Some(bv), stride, pad)
    })?;
    s.check("conv2d (bias)", &bias, |g, x| {
        let (iv, kv) = (g.leaf(&ic), g.leaf(&kc));
        g.conv2d(iv, kv, Some(x), stride, pad)
    })?;

    let t3 = uniform(&mut rng, &[m, k, n]);
    let axes: Vec<usize> = (0..3).filter(|_| rng.gen::<bool>()).collect();
    let axes2 = axes.clone();
    s.check("sum", &t3, |g, x| g.sum(x, &axes))?;
    s.check("mean", &t3, |g, x| g.mean(x, &axes2))?;
    s.check("reshape", &t3, |g, x| g.reshape(x, &[m * k, n]))?;
    let start = rng.gen_range(0..k);
    let len = rng.gen_range(1..=k - start);
    s.check("narrow", &t3, |g, x| g.narrow(x, 1, start, len))?;
    let other = uniform(&mut rng, &[m, 2, n]);
    s.check("concat", &t3, |g, x| {
        let y = g.leaf(&other);
        g.concat(&[y, x, y], 1)
    })?;

    let (md, ds) = (rng.gen_range(0..3), rng.gen_range(1..3));
    let fa = uniform(&mut rng, &[bn, c, h, w]);
    let fb = uniform(&mut rng, &[bn, c, h, w]);
    let (fa2, fb2) = (fa.clone(), fb.clone());
    s.check("correlation (first)", &fa, |g, x| {
        let y = g.leaf(&fb2);
        nn::correlation(g, x, y, md, ds)
    })?;
    s.check("correlation (second)", &fb, |g, x| {
        let y = g.leaf(&fa2);
        nn::correlation(g, y, x, md, ds)
    })?;

    let lw = uniform(&mut rng, &[n, k]);
    let lb = uniform(&mut rng, &[n]);
    let (lw2, lb2, lx2) = (lw.clone(), lb.clone(), lhs.clone());
    s.check("linear (input)", &lhs, |g, x| {
        let (wv, bv) = (g.leaf(&lw2), g.leaf(&lb2));
        nn::linear(g, x, wv, bv)
    })?;
    s.check("linear (weights)", &lw, |g, x| {
        let (xv, bv) = (g.leaf(&lx2), g.leaf(&lb2));
        nn::linear(g, xv, x, bv)
    })?;
    s.check("linear (bias)", &lb, |g, x| {
        let (xv, wv) = (g.leaf(&lx2), g.leaf(&lw2));
        nn::linear(g, xv, wv, x)
    })?;
    s.check("dropout", &a, |g, x| nn::dropout(g, x, 0.3, true, &mut ChaCha8Rng::seed_from_u64(seed)))?;

    let (d, hd, steps) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
    let p = LstmParams::<f64>::init(d, hd, &mut rng);
    let q = LstmParams::<f64>::init(d, hd, &mut rng);
    let xs = uniform(&mut rng, &[m, d]);
    let h0 = uniform(&mut rng, &[m, hd]);
    let c0 = uniform(&mut rng, &[m, hd]);
    let vars = |g: &mut Graph<f64>, p: &LstmParams<f64>| p.record(g);
    let (h0c, c0c, xsc) = (h0.clone(), c0.clone(), xs.clone());
    let step_out = |g: &mut Graph<f64>, xv: Var, hv: Var, cv: Var, pv: &LstmVars| -> Result<Var> {
        let (h, c) = nn::lstm_step(g, xv, hv, cv, pv)?;
        g.concat(&[h, c], 1)
    };
    s.check("lstm_step (input)", &xs, |g, x| {
        let pv = vars(g, &p);
        let (hv, cv) = (g.leaf(&h0c), g.leaf(&c0c));
        step_out(g, x, hv, cv, &pv)
    })?;
    s.check("lstm_step (hidden)", &h0, |g, x| {
        let pv = vars(g, &p);
        let (xv, cv) = (g.leaf(&xsc), g.leaf(&c0c));
        step_out(g, xv, x, cv, &pv)
    })?;
    s.check("lstm_step (cell)", &c0, |g, x| {
        let pv = vars(g, &p);
        let (xv, hv) = (g.leaf(&xsc), g.leaf(&h0c));
        step_out(g, xv, hv, x, &pv)
    })?;
    for (name, t) in [("input weights", &p.input_weights), ("recurrent weights", &p.recurrent_weights), ("bias", &p.bias)] {
        let which = name;
        s.check(&format!("lstm_step ({name})"), &t.clone().with_grad(false), |g, x| {
            let mut pv = vars(g, &p);
            match which {
                "input weights" => pv.input_weights = x,
                "recurrent weights" => pv.recurrent_weights = x,
                _ => pv.bias = x,
            }
            let (xv, hv, cv) = (g.leaf(&xsc), g.leaf(&h0c), g.leaf(&c0c));
            step_out(g, xv, hv, cv, &pv)
        })?;
    }
    let seq = uniform(&mut rng, &[steps, m, d]);
    s.check("bilstm_forward", &seq, |g, x| {
        let (pv, qv) = (vars(g, &p), vars(g, &q));
        let xs: Vec<Var> = (0..steps)
            .map(|t| {
                let s = g.narrow(x, 0, t, 1)?;
                g.reshape(s, &[m, d])
            })
            .collect::<Result<_>>()?;
        let out = nn::bilstm_forward(g, &xs, &pv, &qv)?;
        let all = g.concat(&out, 1)?;
        Ok(all)
    })?;
    s.check("bilstm_forward (mean of last step)", &seq, |g, x| {
        let (pv, qv) = (vars(g, &p), vars(g, &q));
        let xs: Vec<Var> = (0..steps)
            .map(|t| {
                let s = g.narrow(x, 0, t, 1)?;
                g.reshape(s, &[m, d])
            })
            .collect::<Result<_>>()?;
        let out = nn::bilstm_forward(g, &xs, &pv, &qv)?;
        let last = out[steps - 1];
        Ok(g.mean_all(last))
    })?;

    let kd = rng.gen_range(1..6);
    let preds = Tensor::from_fn(&[m, kd], |_| rng.gen_range(0.05..0.95));
    let targets = Tensor::from_fn(&[m, kd], |_| if rng.gen::<bool>() { 1.0 } else { 0.0 });
    let classes: Vec<usize> = (0..m).map(|_| rng.gen_range(0..4)).collect();
    let mut hist = std::collections::BTreeMap::new();
    for &c in &classes {
        *hist.entry(c).or_insert(0u64) += 1;
    }
    let weights = ClassWeights::from_histogram(&hist, [0.25, 0.75])?;
    for kind in [LossKind::Bce, LossKind::Focal] {
        let cfg = LossConfig { kind, ..LossConfig::default() };
        let (t2, c2, w2) = (targets.clone(), classes.clone(), weights.clone());
        s.check(&format!("batch_loss ({kind:?})"), &preds, move |g, x| batch_loss(g, x, &t2, &c2, &cfg, &w2))?;
    }
    let pd = Tensor::from_fn(&[m], |_| rng.gen_range(0.0..3.0));
    let gd = Tensor::from_fn(&[m], |_| rng.gen_range(0.0..3.0));
    s.check("mse_regression_loss", &pd, |g, x| {
        let t = g.leaf(&gd);
        mse_regression_loss(g, x, t)
    })?;
    Ok(s.out)
}

/// Random normalized windows matching `cfg`.
pub fn random_windows(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Vec<Tensor<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..cfg.frames).map(|_| Tensor::from_fn(&[3, cfg.height, cfg.width], |_| rng.gen_range(-0.45..0.55))).collect())
        .collect()
}

/// Full forward + loss in training mode (fixed dropout streams), checked
/// against finite differences on the `per_tensor` elements with the largest
/// derivative in every trainable parameter tensor.
pub fn model_checks(cfg: &ModelConfig, seed: u64, windows: usize, per_tensor: usize) -> Result<Vec<CheckOutcome>> {
    let mut model = Model::<f64>::build(cfg.clone(), seed)?;
    model.set_training(true);
    let frames = random_windows(cfg, windows, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let gt: Vec<f64> = (0..windows).map(|_| rng.gen_range(0.0..cfg.codec.d_max)).collect();
    let loss_cfg = match cfg.head {
        crate::model::HeadKind::Ordinal => LossConfig::default(),
        crate::model::HeadKind::Regression => LossConfig { kind: LossKind::MseRegression, ..LossConfig::default() },
    };
    let mut hist = std::collections::BTreeMap::new();
    for &d in &gt {
        *hist.entry(crate::losses::meter_class(d)).or_insert(0u64) += 1;
    }
    let weights = ClassWeights::from_histogram(&hist, loss_cfg.weight_range)?;
    let prefixes: Option<Vec<Tensor<f64>>> = match model.prefix_depth() {
        Some(_) => Some(frames.iter().map(|f| model.prefix_features(f)).collect::<Result<_>>()?),
        None => None,
    };
    let ids: Vec<usize> = (0..windows).collect();
    let mut out = Vec::new();
    for (index, p) in model.params().iter().enumerate() {
        if p.frozen() {
            continue;
        }
        let f = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
            let input = match &prefixes {
                Some(pre) => BatchInput::Prefix(pre.iter().collect()),
                None => BatchInput::Frames(frames.iter().map(|f| f.as_slice()).collect()),
            };
            let mut rngs = dropout_streams(seed, 0, &ids);
            let fp = model.forward_substituted(g, &input, &mut rngs, index, x)?;
            record_loss(&model, g, fp.output, &gt, &loss_cfg, &weights)
        };
        let x = p.tensor.clone().with_grad(false);
        let (_, grad) = value_and_grad(&f, &x)?;
        let mut pool: Vec<usize> = (0..p.tensor.numel()).collect();
        pool.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
        let mut outcome = CheckOutcome {
            name: format!("model {}", p.name),
            seed,
            max_relative_error: 0.0,
            tolerance: MODEL_TOLERANCE,
            checked: 0,
            skipped: 0,
        };
        // replace skipped elements until `per_tensor` are checked
        let mut next = 0;
        while outcome.checked < per_tensor && next < pool.len() {
            let take = (per_tensor - outcome.checked).min(pool.len() - next);
            let r = grad_check_at(&f, &x, FD_EPS, &pool[next..next + take])?;
            next += take;
            outcome.max_relative_error = outcome.max_relative_error.max(r.max_relative_error);
            outcome.checked += r.checked;
            outcome.skipped += r.skipped;
        }
        out.push(outcome);
    }
    Ok(out)
}
