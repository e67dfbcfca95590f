//! Finite-difference gradient checks. Each case pairs a graph built on the
//! tape with an independent double-precision forward; the scalar objective
//! is `Σ out ⊙ W` for a fixed random `W`.

use aquamvs::autodiff::{concat, Tape, Tensor, Var};
use aquamvs::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape: shape.to_vec(), data }
    }
}

type Build = Box<dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>>;
/// `(frozen base inputs, perturbed inputs) -> output`; the base copy lets a
/// case model stop-gradient semantics.
type Reference = Box<dyn Fn(&[Arr], &[Arr]) -> Arr>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Arr>,
    build: Build,
    reference: Reference,
}

pub struct Report {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub forward_error: f64,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

// ---- f64 reference kernels -------------------------------------------------

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = flat % shape[ax];
        flat /= shape[ax];
    }
    idx
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (i, d)| acc * d + i)
}

fn zip(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let n = a.shape.len().max(b.shape.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; n - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (sa, sb) = (pad(&a.shape), pad(&b.shape));
    let out: Vec<usize> = sa.iter().zip(&sb).map(|(x, y)| *x.max(y)).collect();
    let total = out.iter().product();
    let data = (0..total)
        .map(|flat| {
            let idx = unravel(flat, &out);
            let ia: Vec<usize> = idx.iter().zip(&sa).map(|(i, d)| if *d == 1 { 0 } else { *i }).collect();
            let ib: Vec<usize> = idx.iter().zip(&sb).map(|(i, d)| if *d == 1 { 0 } else { *i }).collect();
            f(a.data[ravel(&ia, &sa)], b.data[ravel(&ib, &sb)])
        })
        .collect();
    Arr::new(&out, data)
}

fn map(a: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr::new(&a.shape, a.data.iter().map(|&v| f(v)).collect())
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul(a: &Arr, b: &Arr) -> Arr {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.data[i * k + p] * b.data[p * n + j]).sum();
        }
    }
    Arr::new(&[m, n], out)
}

fn conv2d(x: &Arr, k: &Arr, pad: usize) -> Arr {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw) = (k.shape[0], k.shape[1]);
    let (oh, ow) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let get = |ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x.data[(ch * h + y as usize) * w + xx as usize]
        }
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for a in 0..kh {
                    for b in 0..kw {
                        let y = (i + a) as isize - pad as isize;
                        let xx = (j + b) as isize - pad as isize;
                        s += k.data[a * kw + b] * get(ch, y, xx);
                    }
                }
                out.push(s);
            }
        }
    }
    Arr::new(&[c, oh, ow], out)
}

fn softmax(x: &Arr, axis: usize) -> Arr {
    let mut out = x.clone();
    for flat in 0..x.data.len() {
        let idx = unravel(flat, &x.shape);
        if idx[axis] != 0 {
            continue;
        }
        let members: Vec<usize> = (0..x.shape[axis])
            .map(|k| {
                let mut j = idx.clone();
                j[axis] = k;
                ravel(&j, &x.shape)
            })
            .collect();
        let denom: f64 = members.iter().map(|&m| x.data[m].exp()).sum();
        for &m in &members {
            out.data[m] = x.data[m].exp() / denom;
        }
    }
    out
}

fn sum_axis(x: &Arr, axis: usize) -> Arr {
    let mut shape = x.shape.clone();
    shape.remove(axis);
    let mut out = vec![0.0; shape.iter().product()];
    for flat in 0..x.data.len() {
        let mut idx = unravel(flat, &x.shape);
        idx.remove(axis);
        out[ravel(&idx, &shape)] += x.data[flat];
    }
    Arr::new(&shape, out)
}

fn slice(x: &Arr, axis: usize, start: usize, end: usize) -> Arr {
    let mut shape = x.shape.clone();
    shape[axis] = end - start;
    let total = shape.iter().product();
    let data = (0..total)
        .map(|flat| {
            let mut idx = unravel(flat, &shape);
            idx[axis] += start;
            x.data[ravel(&idx, &x.shape)]
        })
        .collect();
    Arr::new(&shape, data)
}

fn concat_ref(parts: &[&Arr], axis: usize) -> Arr {
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let total = shape.iter().product();
    let data = (0..total)
        .map(|flat| {
            let mut idx = unravel(flat, &shape);
            let mut p = 0;
            while idx[axis] >= parts[p].shape[axis] {
                idx[axis] -= parts[p].shape[axis];
                p += 1;
            }
            parts[p].data[ravel(&idx, &parts[p].shape)]
        })
        .collect();
    Arr::new(&shape, data)
}

fn transpose(x: &Arr) -> Arr {
    let (r, c) = (x.shape[0], x.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data[i * c + j];
        }
    }
    Arr::new(&[c, r], data)
}

// ---- case construction -----------------------------------------------------

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let n = shape.iter().product();
    // round through f32 so both sides see identical inputs
    Arr::new(shape, (0..n).map(|_| rng.random_range(lo..hi) as f32 as f64).collect())
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let mut a = uniform(rng, shape, lo, hi);
    for v in &mut a.data {
        if v.abs() < 0.5 {
            *v = (if *v < 0.0 { -0.5 } else { 0.5 }) as f32 as f64;
        }
    }
    a
}

fn away_from_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    let mut a = uniform(rng, shape, -2.0, 2.0);
    for v in &mut a.data {
        if v.abs() < 2.0 * KINK_MARGIN {
            *v = (v.signum() * 0.1) as f32 as f64;
        }
    }
    a
}

fn case(
    name: &'static str,
    inputs: Vec<Arr>,
    build: impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> + 'static,
    reference: impl Fn(&[Arr], &[Arr]) -> Arr + 'static,
) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
        reference: Box::new(reference),
    }
}

/// One case per primitive plus a composite five-op graph.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut v = Vec::new();
    v.push(case(
        "add",
        vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)],
        |x| x[0].add(x[1]),
        |_, x| zip(&x[0], &x[1], |a, b| a + b),
    ));
    v.push(case(
        "sub",
        vec![uniform(r, &[2, 3, 1], -2.0, 2.0), uniform(r, &[3, 5], -2.0, 2.0)],
        |x| x[0].sub(x[1]),
        |_, x| zip(&x[0], &x[1], |a, b| a - b),
    ));
    v.push(case(
        "mul",
        vec![uniform(r, &[4, 3], -2.0, 2.0), uniform(r, &[4, 3], -2.0, 2.0)],
        |x| x[0].mul(x[1]),
        |_, x| zip(&x[0], &x[1], |a, b| a * b),
    ));
    v.push(case(
        "div",
        vec![uniform(r, &[3, 3], -2.0, 2.0), away_from_zero(r, &[3, 3], -2.0, 2.0)],
        |x| x[0].div(x[1]),
        |_, x| zip(&x[0], &x[1], |a, b| a / b),
    ));
    v.push(case("neg", vec![uniform(r, &[5], -2.0, 2.0)], |x| x[0].neg(), |_, x| map(&x[0], |a| -a)));
    v.push(case("exp", vec![uniform(r, &[6], -2.0, 2.0)], |x| x[0].exp(), |_, x| map(&x[0], f64::exp)));
    v.push(case("log", vec![uniform(r, &[6], 0.1, 2.0)], |x| x[0].log(), |_, x| map(&x[0], f64::ln)));
    v.push(case(
        "relu",
        vec![away_from_kink(r, &[8])],
        |x| x[0].relu(),
        |_, x| map(&x[0], |a| a.max(0.0)),
    ));
    v.push(case(
        "softplus",
        vec![uniform(r, &[6], -2.0, 2.0)],
        |x| x[0].softplus(),
        |_, x| map(&x[0], softplus),
    ));
    v.push(case(
        "sigmoid",
        vec![uniform(r, &[6], -2.0, 2.0)],
        |x| x[0].sigmoid(),
        |_, x| map(&x[0], sigmoid),
    ));
    v.push(case(
        "matmul",
        vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[5, 4], -2.0, 2.0)],
        |x| x[0].matmul(x[1]),
        |_, x| matmul(&x[0], &x[1]),
    ));
    v.push(case(
        "conv2d",
        vec![uniform(r, &[2, 6, 7], -2.0, 2.0), uniform(r, &[3, 3], -2.0, 2.0)],
        |x| x[0].conv2d(x[1], 1),
        |_, x| conv2d(&x[0], &x[1], 1),
    ));
    v.push(case(
        "conv2d_valid",
        vec![uniform(r, &[1, 13, 12], -2.0, 2.0), uniform(r, &[11, 11], -2.0, 2.0)],
        |x| x[0].conv2d(x[1], 0),
        |_, x| conv2d(&x[0], &x[1], 0),
    ));
    v.push(case(
        "softmax",
        vec![uniform(r, &[3, 4, 2], -2.0, 2.0)],
        |x| x[0].softmax(1),
        |_, x| softmax(&x[0], 1),
    ));
    v.push(case(
        "sum",
        vec![uniform(r, &[3, 4, 2], -2.0, 2.0)],
        |x| x[0].sum(2),
        |_, x| sum_axis(&x[0], 2),
    ));
    v.push(case(
        "mean",
        vec![uniform(r, &[3, 4], -2.0, 2.0)],
        |x| x[0].mean(0),
        |_, x| map(&sum_axis(&x[0], 0), |a| a / 3.0),
    ));
    v.push(case(
        "concat",
        vec![uniform(r, &[2, 3], -2.0, 2.0), uniform(r, &[2, 2], -2.0, 2.0)],
        |x| concat(&[x[0], x[1]], 1),
        |_, x| concat_ref(&[&x[0], &x[1]], 1),
    ));
    v.push(case(
        "slice",
        vec![uniform(r, &[4, 5], -2.0, 2.0)],
        |x| x[0].slice(1, 1, 4),
        |_, x| slice(&x[0], 1, 1, 4),
    ));
    v.push(case(
        "transpose",
        vec![uniform(r, &[3, 5], -2.0, 2.0)],
        |x| x[0].transpose(),
        |_, x| transpose(&x[0]),
    ));
    v.push(case(
        "reshape",
        vec![uniform(r, &[3, 4], -2.0, 2.0)],
        |x| x[0].reshape(&[2, 6]),
        |_, x| Arr::new(&[2, 6], x[0].data.clone()),
    ));
    v.push(case(
        "stop_gradient",
        vec![uniform(r, &[5], -2.0, 2.0)],
        |x| x[0].stop_gradient().mul(x[0])?.exp(),
        |base, x| map(&zip(&base[0], &x[0], |a, b| a * b), f64::exp),
    ));
    v.push(case(
        "composite",
        vec![
            uniform(r, &[4, 3], -2.0, 2.0),
            uniform(r, &[3, 5], -2.0, 2.0),
            uniform(r, &[5], -2.0, 2.0),
        ],
        |x| {
            let h = x[0].matmul(x[1])?.softplus()?;
            let g = x[2].sigmoid()?;
            h.mul(g)?.softmax(1)?.sum(0)
        },
        |_, x| {
            let h = map(&matmul(&x[0], &x[1]), softplus);
            let g = map(&x[2], sigmoid);
            sum_axis(&softmax(&zip(&h, &g, |a, b| a * b), 1), 0)
        },
    ));
    v
}

fn to_tensor(a: &Arr) -> Tensor {
    Tensor::new(&a.shape, a.data.iter().map(|&v| v as f32).collect()).unwrap()
}

/// Compare tape gradients against central differences of the f64 reference.
pub fn check(case: &Case, weight_seed: u64) -> Report {
    let tape = Tape::new();
    let leaves: Vec<Var> = case.inputs.iter().map(|a| tape.leaf(to_tensor(a))).collect();
    let out = (case.build)(&leaves).expect("graph builds");
    let base_out = (case.reference)(&case.inputs, &case.inputs);
    assert_eq!(out.shape(), base_out.shape, "{}: shapes disagree", case.name);

    let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
    let w = uniform(&mut rng, &base_out.shape, -1.0, 1.0);
    let loss = out.mul(tape.constant(to_tensor(&w))).unwrap().sum_all().unwrap();
    tape.backward(loss).unwrap();

    let forward_error = out
        .value()
        .data()
        .iter()
        .zip(&base_out.data)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);

    let objective = |x: &[Arr]| -> f64 {
        let o = (case.reference)(&case.inputs, x);
        o.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    };

    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = tape
            .grad(*leaf)
            .unwrap_or_else(|| Tensor::zeros(&case.inputs[k].shape));
        for i in 0..case.inputs[k].data.len() {
            let mut plus = case.inputs.clone();
            let mut minus = case.inputs.clone();
            plus[k].data[i] += STEP;
            minus[k].data[i] -= STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic.data()[i] as f64, numeric));
        }
    }
    Report {
        name: case.name,
        max_rel_error: worst,
        forward_error,
    }
}

/// Every case over `trials` random draws; returns the worst report per case.
pub fn run_all(trials: u64, seed: u64) -> Vec<Report> {
    let mut worst: Vec<Report> = Vec::new();
    for t in 0..trials {
        for c in cases(seed + t) {
            let r = check(&c, seed ^ (0x9e37 + t));
            match worst.iter_mut().find(|w| w.name == r.name) {
                Some(w) => {
                    w.max_rel_error = w.max_rel_error.max(r.max_rel_error);
                    w.forward_error = w.forward_error.max(r.forward_error);
                }
                None => worst.push(r),
            }
        }
    }
    worst
}
