//! Randomised finite-difference audit of every differentiable operation.
//!
//! Each case builds a scalar `sum(w * op(inputs))` with a fixed random `w`
//! and compares autodiff against central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::density::{log_density_var, KdeModel};
use crate::divergence::{jsd_var, kde_log_probs, kl_var, mmd2_var, segmentation_loss};
use crate::seed::rng_for;
use crate::tensor::gradcheck::{max_relative_error, EPSILON};
use crate::tensor::{Graph, ReduceKind, Result, Tensor, TensorError, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = rng.gen_range(0.1..1.5);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .expect("shape")
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    Ok(g.sum_all(prod))
}

fn lift<E: std::fmt::Display>(op: &'static str) -> impl Fn(E) -> TensorError {
    move |e| TensorError::InvalidArgument {
        op,
        detail: e.to_string(),
    }
}

type Case = (Vec<Tensor>, Vec<bool>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Output-weighted case: `sum(w * build(inputs))` with `w` drawn after the
/// output shape is known.
fn case(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    wrt: Vec<bool>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let w = uniform(rng, &g.shape(out).to_vec(), -1.5, 1.5);
    let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let o = build(g, v)?;
        weighted(g, o, &w)
    };
    Ok((inputs, wrt, Box::new(f)))
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;

fn binary_case(rng: &mut ChaCha8Rng, kind: u8) -> Result<Case> {
    let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
    let a = normal(rng, &shape);
    let b = if kind == 3 {
        uniform(rng, &shape, 0.5, 2.0)
    } else {
        normal(rng, &shape)
    };
    let scalar_rhs = rng.gen_bool(0.3);
    let b = if scalar_rhs {
        Tensor::scalar(b.data()[0])
    } else {
        b
    };
    case(rng, vec![a, b], vec![true, true], move |g, v| match kind {
        0 => g.add(v[0], v[1]),
        1 => g.sub(v[0], v[1]),
        2 => g.mul(v[0], v[1]),
        3 => g.div(v[0], v[1]),
        _ => g.log_add_exp(v[0], v[1]),
    })
}

fn unary_case(rng: &mut ChaCha8Rng, kind: u8) -> Result<Case> {
    let shape = [dims(rng, 1, 4), dims(rng, 1, 5)];
    let x = match kind {
        1 => uniform(rng, &shape, 0.2, 3.0),
        2 => away_from_zero(rng, &shape),
        _ => normal(rng, &shape),
    };
    let c = rng.gen_range(-2.0..2.0);
    case(rng, vec![x], vec![true], move |g, v| {
        Ok(match kind {
            0 => g.exp(v[0]),
            1 => g.log(v[0])?,
            2 => g.relu(v[0]),
            3 => g.sigmoid(v[0]),
            4 => g.neg(v[0]),
            5 => g.square(v[0]),
            6 => g.add_scalar(v[0], c),
            _ => g.mul_scalar(v[0], c),
        })
    })
}

fn reduce_case(rng: &mut ChaCha8Rng, kind: ReduceKind) -> Result<Case> {
    let shape = [dims(rng, 1, 3), dims(rng, 2, 4), dims(rng, 1, 3)];
    let x = normal(rng, &shape);
    let axes: Vec<usize> = match rng.gen_range(0..4) {
        0 => vec![0],
        1 => vec![1],
        2 => vec![0, 2],
        _ => vec![0, 1, 2],
    };
    case(rng, vec![x], vec![true], move |g, v| g.reduce(kind, v[0], &axes))
}

fn matmul_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
    let a = normal(rng, &[m, k]);
    let b = normal(rng, &[k, n]);
    case(rng, vec![a, b], vec![true, true], |g, v| g.matmul(v[0], v[1]))
}

fn reshape_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b, c) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3));
    let x = normal(rng, &[a, b, c]);
    case(rng, vec![x], vec![true], move |g, v| {
        let r = g.reshape(v[0], &[a * b, c])?;
        let sq = g.square(r);
        g.reshape(sq, &[c * b * a])
    })
}

fn flatten_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3), 2];
    let x = normal(rng, &shape);
    case(rng, vec![x], vec![true], |g, v| {
        let f = g.flatten(v[0])?;
        Ok(g.sigmoid(f))
    })
}

fn concat_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let axis = rng.gen_range(0..3);
    let mut shape = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
    let a = normal(rng, &shape);
    shape[axis] = dims(rng, 1, 3);
    let b = normal(rng, &shape);
    case(rng, vec![a, b], vec![true, true], move |g, v| {
        let c = g.concat(&[v[0], v[1], v[0]], axis)?;
        Ok(g.square(c))
    })
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, cin, cout) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let (stride, padding) = match rng.gen_range(0..3) {
        0 => (1, k / 2),
        1 => (2, k / 2),
        _ => (1, 0),
    };
    let hw = dims(rng, 3, 6);
    let x = normal(rng, &[b, cin, hw, hw]);
    let w = normal(rng, &[cout, cin, k, k]);
    let bias = normal(rng, &[cout]);
    let with_bias = rng.gen_bool(0.7);
    case(rng, vec![x, w, bias], vec![true, true, with_bias], move |g, v| {
        g.conv2d(v[0], v[1], with_bias.then_some(v[2]), stride, padding)
    })
}

fn maxpool_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, c, h, w) = (dims(rng, 1, 2), dims(rng, 1, 2), 2 * dims(rng, 1, 3), 2 * dims(rng, 1, 3));
    let n = b * c * h * w;
    // distinct values with gaps far larger than the difference step
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new(vec![b, c, h, w], vals)?;
    case(rng, vec![x], vec![true], |g, v| {
        let p = g.max_pool2(v[0])?;
        Ok(g.square(p))
    })
}

fn upsample_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = [dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3)];
    let x = normal(rng, &shape);
    case(rng, vec![x], vec![true], |g, v| g.upsample2(v[0]))
}

fn log_softmax_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = [dims(rng, 1, 3), dims(rng, 2, 4), dims(rng, 1, 3)];
    let axis = rng.gen_range(0..3);
    let x = normal(rng, &shape);
    case(rng, vec![x], vec![true], move |g, v| g.log_softmax(v[0], axis))
}

fn pick_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (n, c, s) = (dims(rng, 1, 3), dims(rng, 2, 4), dims(rng, 1, 3));
    let x = normal(rng, &[n, c, s]);
    let labels: Vec<usize> = (0..n * s).map(|_| rng.gen_range(0..c)).collect();
    case(rng, vec![x], vec![true], move |g, v| g.pick(v[0], &labels))
}

fn pairwise_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let d = dims(rng, 1, 4);
    let a = { let n = dims(rng, 1, 4); normal(rng, &[n, d]) };
    let b = { let n = dims(rng, 1, 4); normal(rng, &[n, d]) };
    case(rng, vec![a, b], vec![true, true], |g, v| g.pairwise_sq_dist(v[0], v[1]))
}

fn log_density_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let d = dims(rng, 1, 6);
    let q = { let n = dims(rng, 1, 5); normal(rng, &[n, d]) };
    let s = { let n = dims(rng, 2, 6); normal(rng, &[n, d]) };
    let sigma = rng.gen_range(0.5..2.0);
    case(rng, vec![q, s], vec![true, true], move |g, v| {
        log_density_var(g, v[0], v[1], sigma).map_err(lift("log_density"))
    })
}

fn kde_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let d = dims(rng, 1, 4);
    let bank = { let n = dims(rng, 3, 8); normal(rng, &[n, d]) };
    let kde = KdeModel::fit(bank, Default::default()).map_err(lift("kde_to_discrete"))?;
    let e = { let n = dims(rng, 2, 6); normal(rng, &[n, d]) };
    case(rng, vec![e], vec![true], move |g, v| {
        kde_log_probs(g, &kde, v[0]).map_err(lift("kde_to_discrete"))
    })
}

fn logits_pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let n = dims(rng, 2, 6);
    (normal(rng, &[n]), normal(rng, &[n]))
}

fn kl_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b) = logits_pair(rng);
    case(rng, vec![a, b], vec![true, true], |g, v| {
        let lp = g.log_softmax(v[0], 0)?;
        let lq = g.log_softmax(v[1], 0)?;
        kl_var(g, lp, lq).map_err(lift("kl"))
    })
}

fn jsd_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (a, b) = logits_pair(rng);
    case(rng, vec![a, b], vec![true, true], |g, v| {
        let lp = g.log_softmax(v[0], 0)?;
        let lq = g.log_softmax(v[1], 0)?;
        jsd_var(g, lp, lq).map_err(lift("jsd"))
    })
}

fn mmd_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let d = dims(rng, 1, 4);
    let x = { let n = dims(rng, 1, 5); normal(rng, &[n, d]) };
    let y = { let n = dims(rng, 1, 5); normal(rng, &[n, d]) };
    let sigma = rng.gen_range(0.5..2.5);
    case(rng, vec![x, y], vec![true, true], move |g, v| {
        mmd2_var(g, v[0], v[1], sigma).map_err(lift("mmd2"))
    })
}

fn seg_loss_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, c, h, w) = (dims(rng, 1, 2), dims(rng, 2, 3), dims(rng, 1, 3), dims(rng, 1, 3));
    let x = normal(rng, &[b, c, h, w]);
    let labels: Vec<usize> = (0..b * h * w).map(|_| rng.gen_range(0..c)).collect();
    case(rng, vec![x], vec![true], move |g, v| {
        segmentation_loss(g, v[0], &labels).map_err(lift("segmentation_loss"))
    })
}

/// Target features through a frozen two-layer encoder, matched to a source
/// batch by KDE + JSD; differentiated w.r.t. the raw target inputs.
fn composed_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let hidden = dims(rng, 3, 6);
    let w1 = away_from_zero(rng, &[1, hidden]);
    let w2 = normal(rng, &[hidden, 1]);
    let src_x = { let n = dims(rng, 3, 5); uniform(rng, &[n, 1], -1.0, 1.0) };
    let tgt_x = { let n = dims(rng, 3, 5); uniform(rng, &[n, 1], 0.5, 2.0) };
    let encode_value = |x: &Tensor| -> Result<Tensor> {
        let mut g = Graph::new();
        let (xv, a, b) = (g.constant(x.clone()), g.constant(w1.clone()), g.constant(w2.clone()));
        let h = g.matmul(xv, a)?;
        let h = g.sigmoid(h);
        let z = g.matmul(h, b)?;
        Ok(g.value(z).clone())
    };
    let ks = KdeModel::fit(encode_value(&src_x)?, Default::default()).map_err(lift("jsd_kde"))?;
    let kt = KdeModel::fit(encode_value(&tgt_x)?, Default::default()).map_err(lift("jsd_kde"))?;
    let f = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let (a, b) = (g.constant(w1.clone()), g.constant(w2.clone()));
        let enc = |g: &mut Graph, x: Var| -> Result<Var> {
            let h = g.matmul(x, a)?;
            let h = g.sigmoid(h);
            g.matmul(h, b)
        };
        let fs = enc(g, v[0])?;
        let ft = enc(g, v[1])?;
        let support = g.concat(&[fs, ft], 0)?;
        let lp = kde_log_probs(g, &ks, support).map_err(lift("jsd_kde"))?;
        let lq = kde_log_probs(g, &kt, support).map_err(lift("jsd_kde"))?;
        jsd_var(g, lp, lq).map_err(lift("jsd_kde"))
    };
    Ok((vec![src_x, tgt_x], vec![false, true], Box::new(f)))
}

/// Every audited operation with its tolerance.
pub fn catalogue() -> Vec<(&'static str, f64, Builder)> {
    let op = OP_TOLERANCE;
    vec![
        ("add", op, |r| binary_case(r, 0)),
        ("sub", op, |r| binary_case(r, 1)),
        ("mul", op, |r| binary_case(r, 2)),
        ("div", op, |r| binary_case(r, 3)),
        ("log_add_exp", op, |r| binary_case(r, 4)),
        ("exp", op, |r| unary_case(r, 0)),
        ("log", op, |r| unary_case(r, 1)),
        ("relu", op, |r| unary_case(r, 2)),
        ("sigmoid", op, |r| unary_case(r, 3)),
        ("neg", op, |r| unary_case(r, 4)),
        ("square", op, |r| unary_case(r, 5)),
        ("add_scalar", op, |r| unary_case(r, 6)),
        ("mul_scalar", op, |r| unary_case(r, 7)),
        ("sum", op, |r| reduce_case(r, ReduceKind::Sum)),
        ("mean", op, |r| reduce_case(r, ReduceKind::Mean)),
        ("max", op, |r| reduce_case(r, ReduceKind::Max)),
        ("logsumexp", op, |r| reduce_case(r, ReduceKind::LogSumExp)),
        ("matmul", op, matmul_case),
        ("reshape", op, reshape_case),
        ("flatten", op, flatten_case),
        ("concat", op, concat_case),
        ("conv2d", op, conv_case),
        ("max_pool2", op, maxpool_case),
        ("upsample2", op, upsample_case),
        ("log_softmax", op, log_softmax_case),
        ("pick", op, pick_case),
        ("pairwise_sq_dist", op, pairwise_case),
        ("log_density", op, log_density_case),
        ("kde_to_discrete", op, kde_case),
        ("kl", op, kl_case),
        ("jsd", op, jsd_case),
        ("mmd2", op, mmd_case),
        ("segmentation_loss", op, seg_loss_case),
        ("jsd_kde_pipeline", COMPOSED_TOLERANCE, composed_case),
    ]
}

/// Runs `cases` randomised checks per operation.
pub fn run(seed: u64, cases: usize) -> Result<Vec<OpReport>> {
    catalogue()
        .into_iter()
        .enumerate()
        .map(|(i, (name, tol, build))| {
            let mut worst: f64 = 0.0;
            for c in 0..cases {
                let mut rng = rng_for(seed, &[i as u64, c as u64]);
                let (inputs, wrt, f) = build(&mut rng)?;
                let err = max_relative_error(&inputs, &wrt, &f, EPSILON)?;
                worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            }
            Ok(OpReport {
                op: name,
                cases,
                max_rel_err: worst,
                tolerance: tol,
            })
        })
        .collect()
}
