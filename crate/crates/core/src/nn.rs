//! Network building blocks: correlation, linear, dropout and (bidirectional)
//! LSTM layers on top of the differentiation tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Real, Tensor, Var};

/// Number of displacement channels produced by [`correlation`].
pub fn correlation_channels(max_disp: usize, disp_stride: usize) -> usize {
    let side = 2 * (max_disp / disp_stride.max(1)) + 1;
    side * side
}

struct Correlation {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    radius: isize,
    stride: isize,
}

impl Correlation {
    fn side(&self) -> isize {
        2 * self.radius + 1
    }

    /// Calls `f(d, dy, dx)` for each displacement channel.
    fn for_each_offset(&self, mut f: impl FnMut(usize, isize, isize)) {
        let side = self.side();
        for iy in 0..side {
            for ix in 0..side {
                let d = (iy * side + ix) as usize;
                f(d, (iy - self.radius) * self.stride, (ix - self.radius) * self.stride);
            }
        }
    }

    /// Valid `(x_a, x_b)` column range for a horizontal offset.
    fn cols(&self, dx: isize) -> (usize, usize) {
        let lo = (-dx).max(0) as usize;
        let hi = (self.w as isize - dx).min(self.w as isize).max(0) as usize;
        (lo, hi.max(lo))
    }

    fn forward<T: Real>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (c, h, w) = (self.c, self.h, self.w);
        let d_total = (self.side() * self.side()) as usize;
        let mut out = vec![T::zero(); self.n * d_total * h * w];
        let inv_c = T::one() / T::lit(c as f64);
        for n in 0..self.n {
            let fa = &a[n * c * h * w..][..c * h * w];
            let fb = &b[n * c * h * w..][..c * h * w];
            let dst = &mut out[n * d_total * h * w..][..d_total * h * w];
            self.for_each_offset(|d, dy, dx| {
                let (x0, x1) = self.cols(dx);
                for y in 0..h {
                    let yb = y as isize + dy;
                    if yb < 0 || yb >= h as isize {
                        continue;
                    }
                    let row = &mut dst[(d * h + y) * w..][..w];
                    for ch in 0..c {
                        let ra = &fa[(ch * h + y) * w..][..w];
                        let rb = &fb[(ch * h + yb as usize) * w..][..w];
                        for x in x0..x1 {
                            row[x] += ra[x] * rb[(x as isize + dx) as usize];
                        }
                    }
                    row[x0..x1].iter_mut().for_each(|v| *v *= inv_c);
                }
            });
        }
        out
    }
}

impl<T: Real> CustomOp<T> for Correlation {
    fn name(&self) -> &'static str {
        "correlation"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (c, h, w) = (self.c, self.h, self.w);
        let (a, b) = (inputs[0], inputs[1]);
        let mut ga = needs[0].then(|| vec![T::zero(); a.len()]);
        let mut gb = needs[1].then(|| vec![T::zero(); b.len()]);
        let d_total = (self.side() * self.side()) as usize;
        let inv_c = T::one() / T::lit(c as f64);
        for n in 0..self.n {
            let off = n * c * h * w;
            let gn = &grad[n * d_total * h * w..][..d_total * h * w];
            self.for_each_offset(|d, dy, dx| {
                let (x0, x1) = self.cols(dx);
                for y in 0..h {
                    let yb = y as isize + dy;
                    if yb < 0 || yb >= h as isize {
                        continue;
                    }
                    let grow = &gn[(d * h + y) * w..][..w];
                    for ch in 0..c {
                        let ia = off + (ch * h + y) * w;
                        let ib = off + (ch * h + yb as usize) * w;
                        for x in x0..x1 {
                            let gv = grow[x] * inv_c;
                            let xb = (x as isize + dx) as usize;
                            if let Some(ga) = ga.as_mut() {
                                ga[ia + x] += gv * b[ib + xb];
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ib + xb] += gv * a[ia + x];
                            }
                        }
                    }
                }
            });
        }
        vec![ga, gb]
    }
}

/// Correlation between two feature maps (`[C,H,W]` or batched `[N,C,H,W]`).
///
/// Output channel `d` holds the channel-averaged dot product between `a` at
/// `(y, x)` and `b` at `(y + dy, x + dx)`, with displacements on a square grid
/// of radius `max_disp / disp_stride` steps of `disp_stride`, ordered
/// row-major over `(dy, dx)`. Out-of-bounds positions contribute 0.
pub fn correlation<T: Real>(g: &mut Graph<T>, a: Var, b: Var, max_disp: usize, disp_stride: usize) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa != sb {
        return Err(Error::dim("correlation", format!("feature maps differ: {sa:?} vs {sb:?}")));
    }
    if disp_stride == 0 {
        return Err(Error::dim("correlation", "displacement stride must be positive"));
    }
    let (n, rest) = match sa.len() {
        3 => (1, &sa[..]),
        4 => (sa[0], &sa[1..]),
        _ => return Err(Error::dim("correlation", format!("expected [C,H,W] or [N,C,H,W], got {sa:?}"))),
    };
    let op = Correlation {
        n,
        c: rest[0],
        h: rest[1],
        w: rest[2],
        radius: (max_disp / disp_stride) as isize,
        stride: disp_stride as isize,
    };
    let value = op.forward(g.value(a), g.value(b));
    let d = correlation_channels(max_disp, disp_stride);
    let shape = if sa.len() == 3 { vec![d, op.h, op.w] } else { vec![n, d, op.h, op.w] };
    g.custom(&[a, b], shape, value, Box::new(op))
}

/// `x[N,D] * weights[K,D]^T + bias[K]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, weights: Var, bias: Var) -> Result<Var> {
    let y = g.matmul_bt(x, weights)?;
    g.add(y, bias)
}

fn dropout_mask<T: Real, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect()
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<T: Real, R: Rng>(g: &mut Graph<T>, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let mask = dropout_mask(g.value(x).len(), rate, rng);
    let m = g.constant(&shape, mask)?;
    g.mul(x, m)
}

/// Dropout on a `[B, F]` batch where row `b` draws its mask from `rngs[b]`,
/// so a sample's mask does not depend on which batch it lands in.
pub fn dropout_rows<T: Real, R: Rng>(g: &mut Graph<T>, x: Var, rate: f64, training: bool, rngs: &mut [R]) -> Result<Var> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != rngs.len() {
        return Err(Error::dim("dropout", format!("{} row generators for shape {shape:?}", rngs.len())));
    }
    let mut mask = Vec::with_capacity(shape[0] * shape[1]);
    for rng in rngs.iter_mut() {
        mask.extend(dropout_mask::<T, R>(shape[1], rate, rng));
    }
    let m = g.constant(&shape, mask)?;
    g.mul(x, m)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Weights of one LSTM direction. Gate blocks are stacked in the order
/// input, forget, cell, output; each block is `[H, D]` / `[H, H]` / `[H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub input_weights: Tensor<T>,
    pub recurrent_weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gate index into the stacked blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

impl<T: Real> LstmParams<T> {
    /// Uniform init in `±1/sqrt(H)`, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound))).with_grad(true);
        let input_weights = uniform(&[4 * hidden, input]);
        let recurrent_weights = uniform(&[4 * hidden, hidden]);
        let bias = Tensor::from_fn(&[4 * hidden], |i| if i / hidden == Gate::Forget as usize { T::one() } else { T::zero() })
            .with_grad(true);
        LstmParams { input_weights, recurrent_weights, bias }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weights.shape()[1]
    }

    pub fn input_width(&self) -> usize {
        self.input_weights.shape()[1]
    }

    /// Bias block of one gate.
    pub fn gate_bias(&self, gate: Gate) -> &[T] {
        let h = self.hidden();
        &self.bias.data()[gate as usize * h..][..h]
    }

    pub fn gate_bias_mut(&mut self, gate: Gate) -> &mut [T] {
        let h = self.hidden();
        &mut self.bias.data_mut()[gate as usize * h..][..h]
    }

    pub fn record(&self, g: &mut Graph<T>) -> LstmVars {
        LstmVars {
            input_weights: g.leaf(&self.input_weights),
            recurrent_weights: g.leaf(&self.recurrent_weights),
            bias: g.leaf(&self.bias),
            hidden: self.hidden(),
        }
    }
}

/// Tape handles of one direction's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub input_weights: Var,
    pub recurrent_weights: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// One LSTM step on a batch: `x[B,D]`, `h_prev[B,H]`, `c_prev[B,H]`.
pub fn lstm_step<T: Real>(g: &mut Graph<T>, x: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let hd = p.hidden;
    let (sh, sc) = (g.shape(h_prev).to_vec(), g.shape(c_prev).to_vec());
    if sh.len() != 2 || sh[1] != hd || sh != sc {
        return Err(Error::dim("lstm_step", format!("state shapes {sh:?}/{sc:?} do not match hidden width {hd}")));
    }
    if g.shape(x).len() != 2 || g.shape(x)[0] != sh[0] {
        return Err(Error::dim("lstm_step", format!("input {:?} vs state {sh:?}", g.shape(x))));
    }
    let zx = g.matmul_bt(x, p.input_weights)?;
    let zh = g.matmul_bt(h_prev, p.recurrent_weights)?;
    let z = g.add(zx, zh)?;
    let z = g.add(z, p.bias)?;
    let block = |g: &mut Graph<T>, gate: Gate| g.narrow(z, 1, gate as usize * hd, hd);
    let i = block(g, Gate::Input)?;
    let f = block(g, Gate::Forget)?;
    let cand = block(g, Gate::Cell)?;
    let o = block(g, Gate::Output)?;
    let i = g.logistic(i);
    let f = g.logistic(f);
    let cand = g.tanh(cand);
    let o = g.logistic(o);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Runs one direction over `seq` from zero state, returning every hidden output.
pub fn lstm_forward<T: Real>(g: &mut Graph<T>, seq: &[Var], p: &LstmVars) -> Result<Vec<Var>> {
    let first = seq.first().ok_or_else(|| Error::contract("LSTM over an empty sequence"))?;
    let batch = g.shape(*first)[0];
    let mut h = g.constant(&[batch, p.hidden], vec![T::zero(); batch * p.hidden])?;
    let mut c = g.constant(&[batch, p.hidden], vec![T::zero(); batch * p.hidden])?;
    let mut out = Vec::with_capacity(seq.len());
    for &x in seq {
        (h, c) = lstm_step(g, x, h, c, p)?;
        out.push(h);
    }
    Ok(out)
}

/// A bidirectional layer: two independent directions with equal width.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmLayer<T> {
    pub forward: LstmParams<T>,
    pub backward: LstmParams<T>,
}

impl<T: Real> BiLstmLayer<T> {
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let forward = LstmParams::init(input, hidden, rng);
        let backward = LstmParams::init(input, hidden, rng);
        BiLstmLayer { forward, backward }
    }

    pub fn output_width(&self) -> usize {
        2 * self.forward.hidden()
    }
}

/// Bidirectional pass: `out[t] = concat(forward_h[t], backward_h[t])` where
/// the backward direction consumes the reversed sequence.
pub fn bilstm_forward<T: Real>(g: &mut Graph<T>, seq: &[Var], fwd: &LstmVars, bwd: &LstmVars) -> Result<Vec<Var>> {
    if seq.is_empty() {
        return Err(Error::contract("bidirectional LSTM over an empty sequence"));
    }
    if fwd.hidden != bwd.hidden {
        return Err(Error::dim("bilstm_forward", "directions have different hidden widths"));
    }
    let hf = lstm_forward(g, seq, fwd)?;
    let reversed: Vec<Var> = seq.iter().rev().copied().collect();
    let mut hb = lstm_forward(g, &reversed, bwd)?;
    hb.reverse();
    hf.iter().zip(&hb).map(|(&f, &b)| g.concat(&[f, b], 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn brute_correlation(a: &[f64], b: &[f64], c: usize, h: usize, w: usize, radius: isize, stride: isize) -> Vec<f64> {
        let side = 2 * radius + 1;
        let mut out = vec![0.0; (side * side) as usize * h * w];
        for iy in 0..side {
            for ix in 0..side {
                let (dy, dx) = ((iy - radius) * stride, (ix - radius) * stride);
                let d = (iy * side + ix) as usize;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (yb, xb) = (y + dy, x + dx);
                        if yb < 0 || xb < 0 || yb >= h as isize || xb >= w as isize {
                            continue;
                        }
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += a[(ch * h + y as usize) * w + x as usize] * b[(ch * h + yb as usize) * w + xb as usize];
                        }
                        out[(d * h + y as usize) * w + x as usize] = acc / c as f64;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn correlation_matches_brute_force() {
        let (c, h, w) = (3, 5, 6);
        let a = random(&[c, h, w], 3);
        let b = random(&[c, h, w], 4);
        for (md, st) in [(0, 1), (1, 1), (2, 1), (4, 2)] {
            let mut g = Graph::<f64>::new();
            let (va, vb) = (g.leaf(&a), g.leaf(&b));
            let y = correlation(&mut g, va, vb, md, st).unwrap();
            let r = (md / st) as isize;
            let expect = brute_correlation(a.data(), b.data(), c, h, w, r, st as isize);
            assert_eq!(g.shape(y)[0], correlation_channels(md, st));
            for (x, e) in g.value(y).iter().zip(&expect) {
                assert!((x - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_correlation_is_squared_norm() {
        let a = random(&[4, 3, 3], 5);
        let mut g = Graph::<f64>::new();
        let va = g.leaf(&a);
        let y = correlation(&mut g, va, va, 0, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        for p in 0..9 {
            let norm: f64 = (0..4).map(|ch| a.data()[ch * 9 + p].powi(2)).sum();
            assert!((g.value(y)[p] - norm / 4.0).abs() < 1e-12);
            assert!(g.value(y)[p] >= 0.0);
        }
        assert_eq!(correlation_channels(1, 1), 9);
    }

    #[test]
    fn shifted_features_peak_at_shift() {
        let (c, h, w) = (8, 6, 10);
        let a = random(&[c, h, w], 6);
        // b(y, x) = a(y, x - 1): content moved right by one pixel
        let b = Tensor::from_fn(&[c, h, w], |i| {
            let x = i % w;
            if x == 0 {
                0.0
            } else {
                a.data()[i - 1]
            }
        });
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let y = correlation(&mut g, va, vb, 1, 1).unwrap();
        let expect = brute_correlation(a.data(), b.data(), c, h, w, 1, 1);
        let target = 1 * 3 + 2; // dy = 0, dx = +1
        for yy in 1..h - 1 {
            for xx in 1..w - 2 {
                let vals: Vec<f64> = (0..9).map(|d| expect[(d * h + yy) * w + xx]).collect();
                let best = (0..9).max_by(|&p, &q| vals[p].total_cmp(&vals[q])).unwrap();
                assert_eq!(best, target);
                let got = g.value(y)[(target * h + yy) * w + xx];
                assert!((got - vals[target]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correlation_gradients() {
        let a = random(&[2, 2, 4, 5], 7);
        let b = random(&[2, 2, 4, 5], 8);
        let proj = random(&[2, 9, 4, 5], 9);
        let err = grad_check(
            |g, v| {
                let vb = g.leaf(&b);
                let y = correlation(g, v, vb, 1, 1)?;
                let p = g.leaf(&proj);
                let y = g.mul(y, p)?;
                Ok(g.sum_all(y))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |g, v| {
                let va = g.leaf(&a);
                let y = correlation(g, va, v, 1, 1)?;
                let p = g.leaf(&proj);
                let y = g.mul(y, p)?;
                Ok(g.sum_all(y))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn correlation_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 3, 4]));
        assert!(matches!(correlation(&mut g, a, b, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&random(&[3, 2], 1));
        let eye = g.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = g.leaf(&Tensor::zeros(&[2]));
        let y = linear(&mut g, x, eye, zero).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let zx = g.leaf(&Tensor::zeros(&[3, 2]));
        let w = g.leaf(&random(&[4, 2], 2));
        let b = g.leaf(&Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = linear(&mut g, zx, w, b).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_gradient() {
        let w = random(&[4, 3], 3);
        let b = random(&[4], 4);
        let x = random(&[2, 3], 5);
        let err = grad_check(
            |g, v| {
                let (vw, vb) = (g.leaf(&w), g.leaf(&b));
                let y = linear(g, v, vw, vb)?;
                let y = g.tanh(y);
                Ok(g.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = grad_check(
            |g, v| {
                let (vx, vb) = (g.leaf(&x), g.leaf(&b));
                let y = linear(g, vx, v, vb)?;
                let y = g.tanh(y);
                Ok(g.sum_all(y))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dropout_modes() {
        let x = random(&[100], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let v = g.leaf(&x);
        let y = dropout(&mut g, v, 0.3, false, &mut rng).unwrap();
        assert_eq!(g.value(y), x.data());
        let y = dropout(&mut g, v, 0.0, true, &mut rng).unwrap();
        assert_eq!(g.value(y), x.data());
        assert!(dropout(&mut g, v, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_rate_is_respected() {
        let x = Tensor::<f32>::full(&[1_000_000], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::<f32>::new();
        let v = g.leaf(&x);
        let y = dropout(&mut g, v, 0.3, true, &mut rng).unwrap();
        let zeros = g.value(y).iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.3).abs() < 0.005, "{zeros}");
        let kept = g.value(y).iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.7).abs() < 1e-6);
    }

    fn zero_params(d: usize, h: usize) -> LstmParams<f64> {
        LstmParams {
            input_weights: Tensor::zeros(&[4 * h, d]),
            recurrent_weights: Tensor::zeros(&[4 * h, h]),
            bias: Tensor::zeros(&[4 * h]),
        }
    }

    #[test]
    fn lstm_init_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::<f64>::init(5, 3, &mut rng);
        assert_eq!(p.input_weights.shape(), &[12, 5]);
        assert_eq!(p.recurrent_weights.shape(), &[12, 3]);
        assert_eq!(p.gate_bias(Gate::Forget), &[1.0; 3]);
        assert_eq!(p.gate_bias(Gate::Input), &[0.0; 3]);
    }

    #[test]
    fn zero_lstm_emits_zero() {
        let p = zero_params(3, 2);
        let mut g = Graph::<f64>::new();
        let vars = p.record(&mut g);
        let x = g.leaf(&random(&[1, 3], 1));
        let h0 = g.leaf(&Tensor::zeros(&[1, 2]));
        let c0 = g.leaf(&Tensor::zeros(&[1, 2]));
        let (h, c) = lstm_step(&mut g, x, h0, c0, &vars).unwrap();
        assert_eq!(g.value(h), &[0.0, 0.0]);
        assert_eq!(g.value(c), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LstmParams::<f64>::init(3, 4, &mut rng);
        p.gate_bias_mut(Gate::Forget).iter_mut().for_each(|b| *b = 20.0);
        let x = random(&[1, 3], 4);
        let h_prev = random(&[1, 4], 5);
        let c_prev = random(&[1, 4], 6);
        let mut g = Graph::<f64>::new();
        let vars = p.record(&mut g);
        let (vx, vh, vc) = (g.leaf(&x), g.leaf(&h_prev), g.leaf(&c_prev));
        let (_, c) = lstm_step(&mut g, vx, vh, vc, &vars).unwrap();
        // independent evaluation of i * cand
        let hd = 4;
        for j in 0..hd {
            let pre = |gate: usize| {
                let row = gate * hd + j;
                let mut z = p.bias.data()[row];
                for k in 0..3 {
                    z += p.input_weights.data()[row * 3 + k] * x.data()[k];
                }
                for k in 0..hd {
                    z += p.recurrent_weights.data()[row * hd + k] * h_prev.data()[k];
                }
                z
            };
            let i = 1.0 / (1.0 + (-pre(0)).exp());
            let cand = pre(2).tanh();
            let diff = g.value(c)[j] - (c_prev.data()[j] + i * cand);
            assert!(diff.abs() < 1e-6, "{diff}");
        }
    }

    #[test]
    fn lstm_step_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = LstmParams::<f64>::init(3, 4, &mut rng);
        let x = random(&[2, 3], 12);
        let h0 = random(&[2, 4], 13);
        let c0 = random(&[2, 4], 14);
        let step_mean = |g: &mut Graph<f64>, vx: Var, vh: Var, vc: Var, vars: &LstmVars| -> Result<Var> {
            let (h, c) = lstm_step(g, vx, vh, vc, vars)?;
            let s = g.add(h, c)?;
            Ok(g.mean_all(s))
        };
        let err = grad_check(
            |g, v| {
                let vars = p.record(g);
                let (vh, vc) = (g.leaf(&h0), g.leaf(&c0));
                step_mean(g, v, vh, vc, &vars)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
        let err = grad_check(
            |g, v| {
                let mut vars = p.record(g);
                vars.recurrent_weights = v;
                let (vx, vh, vc) = (g.leaf(&x), g.leaf(&h0), g.leaf(&c0));
                step_mean(g, vx, vh, vc, &vars)
            },
            &p.recurrent_weights,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn bilstm_single_step_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = BiLstmLayer::<f64>::init(3, 5, &mut rng);
        let mut g = Graph::<f64>::new();
        let (f, b) = (layer.forward.record(&mut g), layer.backward.record(&mut g));
        let x = g.leaf(&random(&[1, 3], 2));
        let out = bilstm_forward(&mut g, &[x], &f, &b).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(g.shape(out[0]), &[1, 10]);
        assert!(bilstm_forward(&mut g, &[], &f, &b).is_err());
    }

    #[test]
    fn bilstm_reversal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = BiLstmLayer::<f64>::init(3, 4, &mut rng);
        let swapped = BiLstmLayer { forward: layer.backward.clone(), backward: layer.forward.clone() };
        let inputs: Vec<Tensor<f64>> = (0..6).map(|t| random(&[1, 3], 100 + t)).collect();

        let run = |layer: &BiLstmLayer<f64>, seq: &[Tensor<f64>]| -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let (f, b) = (layer.forward.record(&mut g), layer.backward.record(&mut g));
            let vars: Vec<Var> = seq.iter().map(|x| g.leaf(x)).collect();
            let out = bilstm_forward(&mut g, &vars, &f, &b).unwrap();
            out.iter().map(|&o| g.value(o).to_vec()).collect()
        };
        let original = run(&layer, &inputs);
        let reversed_inputs: Vec<Tensor<f64>> = inputs.iter().rev().cloned().collect();
        let mirrored = run(&swapped, &reversed_inputs);
        let t = inputs.len();
        for s in 0..t {
            // forward half on reversed input == backward half on original, reversed in time
            assert_eq!(&mirrored[s][..4], &original[t - 1 - s][4..]);
            assert_eq!(&mirrored[s][4..], &original[t - 1 - s][..4]);
        }
    }

    #[test]
    fn last_output_sees_first_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = BiLstmLayer::<f64>::init(6, 8, &mut rng);
        let inputs: Vec<Tensor<f64>> = (0..9).map(|t| random(&[1, 6], 200 + t).with_grad(true)).collect();
        let mut g = Graph::new();
        let (f, b) = (layer.forward.record(&mut g), layer.backward.record(&mut g));
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x)).collect();
        let out = bilstm_forward(&mut g, &vars, &f, &b).unwrap();
        let m = g.mean_all(out[8]);
        g.backward(m).unwrap();
        assert!(g.grad(vars[0]).unwrap().iter().any(|v| v.abs() > 0.0));
    }
}
