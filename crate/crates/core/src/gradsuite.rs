//! Finite-difference verification of every tape primitive and every loss.
//!
//! Each check draws random inputs at a number of seeded points, reduces the
//! output to a scalar through a fixed random weighting and compares the tape
//! gradient of every differentiable input with central differences.

use std::time::{Duration, Instant};

use mtct_tensor::gradcheck::{analytic_gradient, numeric_gradient};
use mtct_tensor::{OpKind, ScalarBits, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::losses::{multitask_softmax_loss, stage2_combined_loss, triplet_ranking_loss, tste_loss, LabelBatch, Stage2Weights, TsteConfig};
use crate::rng::substream;

/// Denominator floor of the relative error, so exact zeros compare on absolute error.
pub const ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteOptions {
    pub points: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    /// Doubles the analytic gradient of the named check, to show the suite can fail.
    pub inject_fault: Option<String>,
}

impl Default for GradSuiteOptions {
    fn default() -> Self {
        GradSuiteOptions { points: 20, tolerance: 1e-4, step: 1e-5, seed: 1, inject_fault: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradSuiteReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  points  max_rel_error  status\n", "check");
        for c in &self.checks {
            let status = if c.passed { "ok" } else { "FAIL" };
            out.push_str(&format!("{:<width$}  {:>6}  {:>13.3e}  {status}\n", c.name, c.points, c.max_rel_error));
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{verdict}: {} checks, tolerance {:e}, {:.2}s\n",
            self.checks.len(),
            self.tolerance,
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

/// Inputs at one point: every tensor is a leaf; `wrt` lists the ones to differentiate.
struct Point {
    inputs: Vec<Tensor>,
    wrt: Vec<usize>,
    kind: Option<OpKind>,
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

struct Check {
    name: String,
    draw: Box<dyn Fn(&mut ChaCha8Rng, usize) -> Point>,
    /// Scalar-valued function of the inputs.
    build: Box<dyn Fn(&Point) -> Box<Build>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Uniform values with magnitude at least `gap`, so kinks stay out of reach of the probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Distinct values spaced 0.1 apart in random order, so every pooling window has a clear maximum.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn all(inputs: Vec<Tensor>) -> Point {
    let wrt = (0..inputs.len()).collect();
    Point { inputs, wrt, kind: None }
}

/// Checks one op through `Tape::apply`, reducing its output by a random weighting.
fn op_check(name: &str, kind: OpKind, draw: impl Fn(&mut ChaCha8Rng, usize) -> Vec<Tensor> + 'static) -> Check {
    op_check_with(name, move |rng, i| (kind, draw(rng, i)))
}

fn op_check_with(name: &str, draw: impl Fn(&mut ChaCha8Rng, usize) -> (OpKind, Vec<Tensor>) + 'static) -> Check {
    Check {
        name: name.to_string(),
        draw: Box::new(move |rng, i| {
            let (kind, mut inputs) = draw(rng, i);
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone()).expect("finite input")).collect();
            let out = tape.apply(kind, &vars).expect("well-formed op inputs");
            let weights = uniform(rng, tape.shape(out), -1.0, 1.0);
            let n = inputs.len();
            inputs.push(weights);
            Point { inputs, wrt: (0..n).collect(), kind: Some(kind) }
        }),
        build: Box::new(move |p| {
            let kind = p.kind.expect("op points carry their kind");
            Box::new(move |tape, vars| {
                let n = vars.len() - 1;
                let out = tape.apply(kind, &vars[..n])?;
                let weighted = tape.mul(out, vars[n])?;
                Ok(tape.sum(weighted)?)
            })
        }),
    }
}

const CONV_CONFIGS: [(usize, usize); 2] = [(1, 1), (2, 0)];

/// One check per op kind, in declaration order.
fn op_checks() -> Vec<(OpKind, Check)> {
    use OpKind::*;
    let c = |v: f64| ScalarBits::new(v);
    vec![
        (MatMul, op_check("matmul", MatMul, |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)])),
        (
            Conv2d { stride: 1, pad: 1 },
            op_check_with("conv2d", |r, i| {
                let (stride, pad) = CONV_CONFIGS[i % CONV_CONFIGS.len()];
                let k = if stride == 1 { 3 } else { 2 };
                let kind = Conv2d { stride, pad };
                (kind, vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, k, k], -1.0, 1.0)])
            }),
        ),
        (
            AddBias,
            op_check("add_bias", AddBias, |r, i| {
                let x = if i % 2 == 0 { uniform(r, &[2, 3, 2, 2], -1.0, 1.0) } else { uniform(r, &[4, 3], -1.0, 1.0) };
                vec![x, uniform(r, &[3], -1.0, 1.0)]
            }),
        ),
        (Relu, op_check("relu", Relu, |r, _| vec![away_from_zero(r, &[3, 5], 0.05)])),
        (
            MaxPool2d { kernel: 2, stride: 2 },
            op_check("maxpool2d", MaxPool2d { kernel: 2, stride: 2 }, |r, _| vec![distinct(r, &[2, 2, 4, 4])]),
        ),
        (GlobalAvgPool, op_check("global_avg_pool", GlobalAvgPool, |r, _| vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)])),
        (Add, op_check("add", Add, |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)])),
        (Sub, op_check("sub", Sub, |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)])),
        (MulScalar(c(-1.7)), op_check("mul_scalar", MulScalar(c(-1.7)), |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0)])),
        (AddScalar(c(0.3)), op_check("add_scalar", AddScalar(c(0.3)), |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0)])),
        (
            ElementwiseMul,
            op_check("elementwise_mul", ElementwiseMul, |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)]),
        ),
        (Log, op_check("log", Log, |r, _| vec![uniform(r, &[3, 4], 0.5, 2.0)])),
        (Exp, op_check("exp", Exp, |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0)])),
        (Sum, op_check("sum", Sum, |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0)])),
        (SumRows, op_check("sum_rows", SumRows, |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0)])),
        (Mean, op_check("mean", Mean, |r, _| vec![uniform(r, &[3, 4], -1.0, 1.0)])),
        (SoftmaxRows, op_check("softmax_rows", SoftmaxRows, |r, _| vec![uniform(r, &[3, 4], -2.0, 2.0)])),
        (LogSoftmaxRows, op_check("log_softmax_rows", LogSoftmaxRows, |r, _| vec![uniform(r, &[3, 4], -2.0, 2.0)])),
        (Flatten, op_check("flatten", Flatten, |r, _| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)])),
    ]
}

const CARDS: [usize; 3] = [3, 2, 4];

fn features(r: &mut ChaCha8Rng) -> Point {
    all((0..3).map(|_| uniform(r, &[4, 3], -1.0, 1.0)).collect())
}

fn loss_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    checks.push(Check {
        name: "multitask_softmax_loss".into(),
        draw: Box::new(|r, _| {
            let batch = 4;
            let mut inputs: Vec<Tensor> = CARDS.iter().map(|&c| uniform(r, &[batch, c], -2.0, 2.0)).collect();
            // Labels ride along as a constant; -1 marks a masked entry, and row 0 is always labelled.
            let labels: Vec<f64> = (0..batch)
                .flat_map(|i| CARDS.iter().map(move |&c| (i, c)).collect::<Vec<_>>())
                .map(|(i, c)| if i > 0 && r.random_bool(0.25) { -1.0 } else { r.random_range(0..c) as f64 })
                .collect();
            inputs.push(Tensor::new(vec![batch, CARDS.len()], labels).expect("label grid"));
            Point { inputs, wrt: (0..CARDS.len()).collect(), kind: None }
        }),
        build: Box::new(|p| {
            let grid = p.inputs[CARDS.len()].clone();
            let batch = grid.shape()[0];
            let rows = grid
                .data()
                .chunks(CARDS.len())
                .map(|r| r.iter().map(|&v| if v < 0.0 { None } else { Some(v as usize) }).collect())
                .collect();
            let labels = LabelBatch::new(CARDS.len(), rows).expect("label rows");
            debug_assert_eq!(labels.batch(), batch);
            Box::new(move |tape, vars| multitask_softmax_loss(tape, &vars[..CARDS.len()], &labels))
        }),
    });
    for alpha in [1.0, 3.5] {
        checks.push(Check {
            name: format!("tste_loss(alpha={alpha})"),
            draw: Box::new(|r, _| features(r)),
            build: Box::new(move |_| {
                let cfg = TsteConfig::new(alpha).expect("positive alpha");
                Box::new(move |tape, v| tste_loss(tape, v[0], v[1], v[2], &cfg))
            }),
        });
    }
    checks.push(Check {
        name: "triplet_ranking_loss".into(),
        draw: Box::new(|r, _| loop {
            // Redraw until no hinge sits within reach of the probe.
            let p = features(r);
            let margin = 0.5;
            let sq = |a: &Tensor, b: &Tensor, i: usize| {
                let d = a.shape()[1];
                (0..d).map(|k| (a.data()[i * d + k] - b.data()[i * d + k]).powi(2)).sum::<f64>()
            };
            let ok = (0..4).all(|i| (sq(&p.inputs[0], &p.inputs[1], i) - sq(&p.inputs[0], &p.inputs[2], i) + margin).abs() > 0.05);
            if ok {
                break p;
            }
        }),
        build: Box::new(|_| Box::new(|tape, v| triplet_ranking_loss(tape, v[0], v[1], v[2], 0.5))),
    });
    checks.push(Check {
        name: "stage2_combined_loss".into(),
        draw: Box::new(|r, _| all((0..3).map(|_| uniform(r, &[1], 0.0, 3.0)).collect())),
        build: Box::new(|_| {
            let w = Stage2Weights { source: 0.7, triplet: 1.3 };
            Box::new(move |tape, v| stage2_combined_loss(tape, v[0], v[1], v[2], w))
        }),
    });
    checks
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ERROR_FLOOR)
}

fn run_check(check: &Check, opts: &GradSuiteOptions, index: u64) -> Result<CheckResult> {
    let mut rng = substream(opts.seed, "gradcheck", index);
    let fault = opts.inject_fault.as_deref() == Some(check.name.as_str());
    let mut worst: f64 = 0.0;
    for i in 0..opts.points {
        let point = (check.draw)(&mut rng, i);
        let build = (check.build)(&point);
        for &w in &point.wrt {
            // Differentiate one input at a time; the rest stay constants.
            let f = |tape: &mut Tape, x: Var| -> mtct_tensor::Result<Var> {
                let mut vars = Vec::with_capacity(point.inputs.len());
                for (k, t) in point.inputs.iter().enumerate() {
                    vars.push(if k == w { x } else { tape.constant(t.clone())? });
                }
                build(tape, &vars).map_err(|e| match e {
                    CoreError::Tensor(t) => t,
                    other => mtct_tensor::TensorError::Contract(other.to_string()),
                })
            };
            let at = &point.inputs[w];
            let (_, g) = analytic_gradient(&f, at)?;
            let coords: Vec<usize> = (0..at.len()).collect();
            let numeric = numeric_gradient(&f, at, opts.step, &coords)?;
            let scale = if fault { 2.0 } else { 1.0 };
            for (a, n) in g.data().iter().zip(&numeric) {
                worst = worst.max(rel_error(scale * a, *n));
            }
        }
    }
    Ok(CheckResult { name: check.name.clone(), points: opts.points, max_rel_error: worst, passed: worst < opts.tolerance })
}

/// Names of every check the suite runs.
pub fn check_names() -> Vec<String> {
    op_checks().into_iter().map(|(_, c)| c.name).chain(loss_checks().into_iter().map(|c| c.name)).collect()
}

pub fn run_gradsuite(opts: &GradSuiteOptions) -> Result<GradSuiteReport> {
    if opts.points == 0 || !(opts.tolerance > 0.0) || !(opts.step > 0.0) {
        return Err(CoreError::contract("gradient check needs points > 0, a positive tolerance and a positive step"));
    }
    if let Some(name) = &opts.inject_fault {
        if !check_names().contains(name) {
            return Err(CoreError::contract(format!("no gradient check named {name:?}")));
        }
    }
    let started = Instant::now();
    let ops = op_checks();
    let covered: Vec<&str> = ops.iter().map(|(k, _)| k.name()).collect();
    if covered != OpKind::ALL_NAMES {
        return Err(CoreError::contract(format!("gradient suite covers {covered:?}, tape defines {:?}", OpKind::ALL_NAMES)));
    }
    let mut checks = Vec::new();
    for (i, (_, check)) in ops.iter().enumerate() {
        checks.push(run_check(check, opts, i as u64)?);
    }
    for (i, check) in loss_checks().iter().enumerate() {
        checks.push(run_check(check, opts, (ops.len() + i) as u64)?);
    }
    Ok(GradSuiteReport { checks, tolerance: opts.tolerance, elapsed: started.elapsed() })
}
