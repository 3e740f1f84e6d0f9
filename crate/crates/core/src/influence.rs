//! Influence of training cases on test losses.
//!
//! The influence of train case z on test case z' is
//! -grad L(z')^T H^{-1} grad L(z), with H the Hessian of the full training
//! objective (mean loss plus L2) at the trained parameters. Positive
//! influence means upweighting z raises the test loss; helpful precedent
//! comes out negative.
//!
//! Differentiation is with respect to the head parameters only; the shared
//! encoder is held fixed. On fixed features the per-head Hessians have
//! closed forms, so Hessian-vector products never touch backprop. Three
//! inverse-HVP routes are provided: a dense factorization, conjugate
//! gradients, and the stochastic truncated-series estimator. They are kept
//! separate so they can be checked against each other.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Outcome;
use crate::model::{
    forward_pass, full_gradient, instance_loss, train_with, Head, Instance, ModelConfig,
    ModelError, ModelParams, TrainOptions,
};
use crate::vecmath::{axpy, dot, norm2};

/// Leave-one-out retraining refuses larger training splits.
pub const LOO_TRAIN_CAP: usize = 500;
/// Leave-one-out retraining refuses larger parameter counts.
pub const LOO_PARAM_CAP: usize = 5000;

const MATRIX_MAGIC: &[u8; 8] = b"INFLMTX1";
/// Flattening order id stored in the binary header: 1 = test-major.
const ORDER_TEST_MAJOR: u32 = 1;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("index {idx} out of range for {what} of length {len}")]
    IndexOutOfRange { what: &'static str, idx: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{what} count {size} exceeds cap {cap}")]
    CapExceeded { what: &'static str, size: usize, cap: usize },
    #[error("singular hessian: {detail}")]
    SingularHessian { detail: String },
    #[error("{method} solve stopped after {iterations} iterations at relative residual {residual:e}")]
    NotConverged {
        method: SolveMethod,
        iterations: usize,
        residual: f64,
        /// Best iterate reached; callers may inspect it when diagnosing.
        best: Vec<f64>,
    },
    #[error("training not stationary: gradient norm {grad_norm:e} above tolerance {tol:e}")]
    NotStationary { grad_norm: f64, tol: f64 },
    #[error("bad artifact: {0}")]
    BadArtifact(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Anything exposing gradients and Hessian-vector products of a training
/// objective. The Hessian is the full objective's (regularization included);
/// per-instance gradients are of the raw loss.
pub trait Curvature {
    fn param_count(&self) -> usize;
    fn num_train(&self) -> usize;
    fn num_test(&self) -> usize;
    fn train_grad(&self, i: usize) -> Result<Vec<f64>, InfluenceError>;
    fn test_grad(&self, j: usize) -> Result<Vec<f64>, InfluenceError>;
    /// Full-objective Hessian times `v`.
    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>, InfluenceError>;
    /// Unbiased Hessian estimate from the given train indices (sampled with
    /// replacement) times `v`. The regularization term enters exactly.
    fn hvp_batch(&self, v: &[f64], batch: &[usize]) -> Result<Vec<f64>, InfluenceError>;
}

/// One-parameter ridge regression with squared-error loss, solved in closed
/// form. Small enough to audit by hand, so it pins the sign convention: a
/// train point pulling the parameter away from what a test point wants must
/// come out with positive influence.
#[derive(Debug, Clone)]
pub struct ScalarRidgeProblem {
    train: Vec<(f64, f64)>,
    test: Vec<(f64, f64)>,
    lambda: f64,
    theta: f64,
}

impl ScalarRidgeProblem {
    /// Instances are (x, y) pairs under loss (theta*x - y)^2; the objective
    /// averages train losses and adds lambda*theta^2.
    pub fn new(
        train: Vec<(f64, f64)>,
        test: Vec<(f64, f64)>,
        lambda: f64,
    ) -> Result<Self, InfluenceError> {
        if train.is_empty() {
            return Err(InfluenceError::BadConfig("ridge needs at least one train point".into()));
        }
        let n = train.len() as f64;
        let mean_xx = train.iter().map(|&(x, _)| x * x).sum::<f64>() / n;
        let mean_xy = train.iter().map(|&(x, y)| x * y).sum::<f64>() / n;
        let denom = mean_xx + lambda;
        if denom == 0.0 {
            return Err(InfluenceError::SingularHessian {
                detail: "zero curvature: no signal and no ridge".into(),
            });
        }
        Ok(ScalarRidgeProblem { train, test, lambda, theta: mean_xy / denom })
    }

    pub fn theta_star(&self) -> f64 {
        self.theta
    }

    fn hessian(&self) -> f64 {
        let n = self.train.len() as f64;
        2.0 * self.train.iter().map(|&(x, _)| x * x).sum::<f64>() / n + 2.0 * self.lambda
    }
}

impl Curvature for ScalarRidgeProblem {
    fn param_count(&self) -> usize {
        1
    }

    fn num_train(&self) -> usize {
        self.train.len()
    }

    fn num_test(&self) -> usize {
        self.test.len()
    }

    fn train_grad(&self, i: usize) -> Result<Vec<f64>, InfluenceError> {
        let &(x, y) = self.train.get(i).ok_or(InfluenceError::IndexOutOfRange {
            what: "train",
            idx: i,
            len: self.train.len(),
        })?;
        Ok(vec![2.0 * (self.theta * x - y) * x])
    }

    fn test_grad(&self, j: usize) -> Result<Vec<f64>, InfluenceError> {
        let &(x, y) = self.test.get(j).ok_or(InfluenceError::IndexOutOfRange {
            what: "test",
            idx: j,
            len: self.test.len(),
        })?;
        Ok(vec![2.0 * (self.theta * x - y) * x])
    }

    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>, InfluenceError> {
        if v.len() != 1 {
            return Err(InfluenceError::DimMismatch { expected: 1, got: v.len() });
        }
        Ok(vec![self.hessian() * v[0]])
    }

    fn hvp_batch(&self, v: &[f64], batch: &[usize]) -> Result<Vec<f64>, InfluenceError> {
        if v.len() != 1 {
            return Err(InfluenceError::DimMismatch { expected: 1, got: v.len() });
        }
        if batch.is_empty() {
            return Err(InfluenceError::BadConfig("empty batch".into()));
        }
        let mut h = 0.0;
        for &i in batch {
            let &(x, _) = self.train.get(i).ok_or(InfluenceError::IndexOutOfRange {
                what: "train",
                idx: i,
                len: self.train.len(),
            })?;
            h += 2.0 * x * x;
        }
        h /= batch.len() as f64;
        Ok(vec![(h + 2.0 * self.lambda) * v[0]])
    }
}

struct InstanceState {
    /// Head input: the hidden activations, or the embedding in linear mode.
    feature: Vec<f64>,
    /// Per-article output distributions at the trained parameters.
    probs: Vec<Vec<f64>>,
    outcomes: Vec<Outcome>,
}

/// Gradients and exact Hessian-vector products of the outcome model's
/// objective, restricted to the head parameters. Features and output
/// probabilities are frozen at construction; on them the per-article
/// Hessians are the standard logistic and softmax curvatures.
pub struct HeadCurvature {
    head: Head,
    k: usize,
    rows: usize,
    width: usize,
    train: Vec<InstanceState>,
    test: Vec<InstanceState>,
    weights: Vec<f64>,
    l2: f64,
}

impl HeadCurvature {
    pub fn new(
        params: &ModelParams,
        train: &[Instance],
        test: &[Instance],
        weights: Option<&[f64]>,
        l2: f64,
    ) -> Result<Self, InfluenceError> {
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(InfluenceError::BadConfig("l2 must be nonnegative".into()));
        }
        let layout = params.layout;
        let weights = match weights {
            Some(w) => {
                if w.len() != train.len() {
                    return Err(InfluenceError::DimMismatch {
                        expected: train.len(),
                        got: w.len(),
                    });
                }
                w.to_vec()
            }
            None => vec![1.0 / train.len().max(1) as f64; train.len()],
        };
        let state_of = |inst: &Instance| -> Result<InstanceState, InfluenceError> {
            if inst.outcomes.len() != layout.k {
                return Err(InfluenceError::DimMismatch {
                    expected: layout.k,
                    got: inst.outcomes.len(),
                });
            }
            let trace = forward_pass(params, &inst.x, None)?;
            let feature = if layout.linear { inst.x.clone() } else { trace.hidden.clone() };
            Ok(InstanceState { feature, probs: trace.probs, outcomes: inst.outcomes.clone() })
        };
        Ok(HeadCurvature {
            head: layout.head,
            k: layout.k,
            rows: layout.rows(),
            width: layout.width(),
            train: train.iter().map(state_of).collect::<Result<_, _>>()?,
            test: test.iter().map(state_of).collect::<Result<_, _>>()?,
            weights,
            l2,
        })
    }

    fn grad_of(&self, state: &InstanceState) -> Vec<f64> {
        let mut g = vec![0.0; self.param_count()];
        let w = self.width;
        for k in 0..self.k {
            let block = &mut g[k * self.rows * w..(k + 1) * self.rows * w];
            match self.head {
                Head::Simple => {
                    let p = state.probs[k][0];
                    let t = if state.outcomes[k] == Outcome::Pos { 1.0 } else { 0.0 };
                    axpy(p - t, &state.feature, block);
                }
                Head::Joint => {
                    let target = match state.outcomes[k] {
                        Outcome::Pos => 0,
                        Outcome::Neg => 1,
                        Outcome::Null => 2,
                    };
                    for c in 0..3 {
                        let coef = state.probs[k][c] - if c == target { 1.0 } else { 0.0 };
                        axpy(coef, &state.feature, &mut block[c * w..(c + 1) * w]);
                    }
                }
            }
        }
        g
    }

    /// Adds `scale` times (per-instance Hessian at `state`) * v into `out`.
    fn add_instance_hvp(&self, state: &InstanceState, v: &[f64], scale: f64, out: &mut [f64]) {
        let w = self.width;
        for k in 0..self.k {
            let range = k * self.rows * w..(k + 1) * self.rows * w;
            let vk = &v[range.clone()];
            let ok = &mut out[range];
            match self.head {
                Head::Simple => {
                    let p = state.probs[k][0];
                    let s = dot(&state.feature, vk);
                    axpy(scale * p * (1.0 - p) * s, &state.feature, ok);
                }
                Head::Joint => {
                    let p = &state.probs[k];
                    let s = [
                        dot(&state.feature, &vk[0..w]),
                        dot(&state.feature, &vk[w..2 * w]),
                        dot(&state.feature, &vk[2 * w..3 * w]),
                    ];
                    let ps = p[0] * s[0] + p[1] * s[1] + p[2] * s[2];
                    for c in 0..3 {
                        axpy(scale * p[c] * (s[c] - ps), &state.feature, &mut ok[c * w..(c + 1) * w]);
                    }
                }
            }
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), InfluenceError> {
        if v.len() != self.param_count() {
            return Err(InfluenceError::DimMismatch { expected: self.param_count(), got: v.len() });
        }
        Ok(())
    }
}

impl Curvature for HeadCurvature {
    fn param_count(&self) -> usize {
        self.k * self.rows * self.width
    }

    fn num_train(&self) -> usize {
        self.train.len()
    }

    fn num_test(&self) -> usize {
        self.test.len()
    }

    fn train_grad(&self, i: usize) -> Result<Vec<f64>, InfluenceError> {
        let state = self.train.get(i).ok_or(InfluenceError::IndexOutOfRange {
            what: "train",
            idx: i,
            len: self.train.len(),
        })?;
        Ok(self.grad_of(state))
    }

    fn test_grad(&self, j: usize) -> Result<Vec<f64>, InfluenceError> {
        let state = self.test.get(j).ok_or(InfluenceError::IndexOutOfRange {
            what: "test",
            idx: j,
            len: self.test.len(),
        })?;
        Ok(self.grad_of(state))
    }

    fn hvp(&self, v: &[f64]) -> Result<Vec<f64>, InfluenceError> {
        self.check_dim(v)?;
        let mut out = vec![0.0; v.len()];
        axpy(2.0 * self.l2, v, &mut out);
        for (state, &w) in self.train.iter().zip(&self.weights) {
            self.add_instance_hvp(state, v, w, &mut out);
        }
        Ok(out)
    }

    fn hvp_batch(&self, v: &[f64], batch: &[usize]) -> Result<Vec<f64>, InfluenceError> {
        self.check_dim(v)?;
        let mut out = vec![0.0; v.len()];
        axpy(2.0 * self.l2, v, &mut out);
        if self.train.is_empty() {
            return Ok(out);
        }
        if batch.is_empty() {
            return Err(InfluenceError::BadConfig("empty batch".into()));
        }
        let scale = self.train.len() as f64 / batch.len() as f64;
        for &i in batch {
            let state = self.train.get(i).ok_or(InfluenceError::IndexOutOfRange {
                what: "train",
                idx: i,
                len: self.train.len(),
            })?;
            self.add_instance_hvp(state, v, scale * self.weights[i], &mut out);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Dense Hessian assembly and LU factorization.
    #[default]
    Exact,
    /// Conjugate gradients on the damped system.
    Cg,
    /// Stochastic truncated Neumann series, averaged over repeats.
    Lissa,
}

impl SolveMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveMethod::Exact => "exact",
            SolveMethod::Cg => "cg",
            SolveMethod::Lissa => "lissa",
        }
    }
}

impl std::fmt::Display for SolveMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseHvpConfig {
    pub method: SolveMethod,
    /// Added to the Hessian diagonal before solving.
    pub damping: f64,
    /// Relative residual target for conjugate gradients.
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Series truncation depth per repeat.
    pub lissa_depth: usize,
    /// Independent repeats averaged into the estimate.
    pub lissa_samples: usize,
    /// Series scaling; must exceed half the largest damped eigenvalue for
    /// the recursion to contract.
    pub lissa_scale: f64,
    /// Train instances drawn (with replacement) per series step.
    pub lissa_batch: usize,
    pub seed: u64,
    /// The dense route refuses parameter counts above this.
    pub exact_cap: usize,
}

impl Default for InverseHvpConfig {
    fn default() -> Self {
        InverseHvpConfig {
            method: SolveMethod::Exact,
            damping: 0.01,
            cg_tol: 1e-10,
            cg_max_iter: 1000,
            lissa_depth: 200,
            lissa_samples: 4,
            lissa_scale: 10.0,
            lissa_batch: 8,
            seed: 7,
            exact_cap: 5000,
        }
    }
}

impl InverseHvpConfig {
    pub fn validate(&self) -> Result<(), InfluenceError> {
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(InfluenceError::BadConfig("damping must be nonnegative".into()));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 {
            return Err(InfluenceError::BadConfig("cg_tol and cg_max_iter must be positive".into()));
        }
        if self.lissa_depth == 0 || self.lissa_samples == 0 || self.lissa_batch == 0 {
            return Err(InfluenceError::BadConfig("lissa sizes must be positive".into()));
        }
        if !(self.lissa_scale > 0.0 && self.lissa_scale.is_finite()) {
            return Err(InfluenceError::BadConfig("lissa_scale must be positive".into()));
        }
        if self.exact_cap == 0 {
            return Err(InfluenceError::BadConfig("exact_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveStat {
    pub iterations: usize,
    /// Relative residual of the damped system at the returned iterate.
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveDiagnostics {
    pub method: SolveMethod,
    pub damping: f64,
    pub param_count: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub per_test: Vec<SolveStat>,
}

fn relative_residual<C: Curvature + ?Sized>(
    curv: &C,
    damping: f64,
    x: &[f64],
    v: &[f64],
) -> Result<f64, InfluenceError> {
    let mut ax = curv.hvp(x)?;
    axpy(damping, x, &mut ax);
    let mut r = ax;
    for (ri, &vi) in r.iter_mut().zip(v) {
        *ri -= vi;
    }
    let vnorm = norm2(v);
    Ok(if vnorm == 0.0 { norm2(&r) } else { norm2(&r) / vnorm })
}

/// Dense factorization of the damped Hessian. One column per HVP call, then
/// a single LU shared by every right-hand side.
struct ExactSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ExactSolver {
    fn build<C: Curvature + ?Sized>(
        curv: &C,
        damping: f64,
        cap: usize,
    ) -> Result<Self, InfluenceError> {
        let p = curv.param_count();
        if p > cap {
            return Err(InfluenceError::CapExceeded { what: "parameter", size: p, cap });
        }
        let mut h = nalgebra::DMatrix::<f64>::zeros(p, p);
        let mut unit = vec![0.0; p];
        for j in 0..p {
            unit[j] = 1.0;
            let col = curv.hvp(&unit)?;
            unit[j] = 0.0;
            for i in 0..p {
                h[(i, j)] = col[i];
            }
            h[(j, j)] += damping;
        }
        Ok(ExactSolver { lu: h.lu() })
    }

    fn solve<C: Curvature + ?Sized>(
        &self,
        curv: &C,
        damping: f64,
        v: &[f64],
    ) -> Result<(Vec<f64>, SolveStat), InfluenceError> {
        let rhs = nalgebra::DVector::from_column_slice(v);
        let solution = self.lu.solve(&rhs).ok_or_else(|| InfluenceError::SingularHessian {
            detail: "factorization failed".into(),
        })?;
        let x: Vec<f64> = solution.iter().copied().collect();
        let residual = relative_residual(curv, damping, &x, v)?;
        if damping == 0.0 && (!residual.is_finite() || residual > 1e-6) {
            return Err(InfluenceError::SingularHessian {
                detail: format!("undamped solve left relative residual {residual:e}"),
            });
        }
        Ok((x, SolveStat { iterations: 1, residual }))
    }
}

fn cg_solve<C: Curvature + ?Sized>(
    curv: &C,
    cfg: &InverseHvpConfig,
    v: &[f64],
) -> Result<(Vec<f64>, SolveStat), InfluenceError> {
    let vnorm = norm2(v);
    if vnorm == 0.0 {
        return Ok((vec![0.0; v.len()], SolveStat { iterations: 0, residual: 0.0 }));
    }
    let apply = |x: &[f64]| -> Result<Vec<f64>, InfluenceError> {
        let mut ax = curv.hvp(x)?;
        axpy(cfg.damping, x, &mut ax);
        Ok(ax)
    };
    let mut x = vec![0.0; v.len()];
    let mut r = v.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    for iter in 1..=cfg.cg_max_iter {
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(InfluenceError::SingularHessian {
                detail: format!("non-positive curvature {pap:e} along search direction"),
            });
        }
        let alpha = rs / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rs_next = dot(&r, &r);
        if rs_next.sqrt() <= cfg.cg_tol * vnorm {
            let residual = relative_residual(curv, cfg.damping, &x, v)?;
            return Ok((x, SolveStat { iterations: iter, residual }));
        }
        let beta = rs_next / rs;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_next;
    }
    let residual = relative_residual(curv, cfg.damping, &x, v)?;
    Err(InfluenceError::NotConverged {
        method: SolveMethod::Cg,
        iterations: cfg.cg_max_iter,
        residual,
        best: x,
    })
}

fn lissa_solve<C: Curvature + ?Sized>(
    curv: &C,
    cfg: &InverseHvpConfig,
    v: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, SolveStat), InfluenceError> {
    let n = curv.num_train();
    let mut acc = vec![0.0; v.len()];
    for _ in 0..cfg.lissa_samples {
        let mut x = v.to_vec();
        for _ in 0..cfg.lissa_depth {
            let hx = if n == 0 {
                curv.hvp(&x)?
            } else {
                let batch: Vec<usize> =
                    (0..cfg.lissa_batch).map(|_| rng.random_range(0..n)).collect();
                curv.hvp_batch(&x, &batch)?
            };
            // x <- v + x - (H_B + damping I) x / scale
            let mut next = v.to_vec();
            axpy(1.0 - cfg.damping / cfg.lissa_scale, &x, &mut next);
            axpy(-1.0 / cfg.lissa_scale, &hx, &mut next);
            x = next;
        }
        axpy(1.0 / cfg.lissa_scale, &x, &mut acc);
    }
    for a in acc.iter_mut() {
        *a /= cfg.lissa_samples as f64;
    }
    let iterations = cfg.lissa_depth * cfg.lissa_samples;
    if acc.iter().any(|a| !a.is_finite()) {
        return Err(InfluenceError::NotConverged {
            method: SolveMethod::Lissa,
            iterations,
            residual: f64::INFINITY,
            best: acc,
        });
    }
    let residual = relative_residual(curv, cfg.damping, &acc, v)?;
    Ok((acc, SolveStat { iterations, residual }))
}

/// Influence scores over all (test, train) pairs, flattened test-major:
/// the entry for (test j, train i) sits at `j * n_train + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub n_test: usize,
    pub n_train: usize,
    pub values: Vec<f64>,
}

impl InfluenceMatrix {
    pub fn flat_index(&self, test_idx: usize, train_idx: usize) -> usize {
        test_idx * self.n_train + train_idx
    }

    pub fn get(&self, test_idx: usize, train_idx: usize) -> f64 {
        self.values[self.flat_index(test_idx, train_idx)]
    }
}

/// One damped solve (H + damping I) u = v with the configured method.
pub fn solve_inverse_hvp<C: Curvature + ?Sized>(
    curv: &C,
    cfg: &InverseHvpConfig,
    v: &[f64],
) -> Result<(Vec<f64>, SolveStat), InfluenceError> {
    cfg.validate()?;
    match cfg.method {
        SolveMethod::Exact => {
            ExactSolver::build(curv, cfg.damping, cfg.exact_cap)?.solve(curv, cfg.damping, v)
        }
        SolveMethod::Cg => cg_solve(curv, cfg, v),
        SolveMethod::Lissa => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            lissa_solve(curv, cfg, v, &mut rng)
        }
    }
}

/// Computes the full influence matrix: one damped inverse-HVP solve per test
/// case, then inner products with every train gradient.
pub fn compute_influence<C: Curvature + ?Sized>(
    curv: &C,
    cfg: &InverseHvpConfig,
) -> Result<(InfluenceMatrix, SolveDiagnostics), InfluenceError> {
    cfg.validate()?;
    let n_train = curv.num_train();
    let n_test = curv.num_test();
    let train_grads: Vec<Vec<f64>> =
        (0..n_train).map(|i| curv.train_grad(i)).collect::<Result<_, _>>()?;

    let exact = match cfg.method {
        SolveMethod::Exact => Some(ExactSolver::build(curv, cfg.damping, cfg.exact_cap)?),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut values = vec![0.0; n_test * n_train];
    let mut per_test = Vec::with_capacity(n_test);
    for j in 0..n_test {
        let g_test = curv.test_grad(j)?;
        let (u, stat) = match (cfg.method, &exact) {
            (SolveMethod::Exact, Some(solver)) => solver.solve(curv, cfg.damping, &g_test)?,
            (SolveMethod::Cg, _) => cg_solve(curv, cfg, &g_test)?,
            (SolveMethod::Lissa, _) => lissa_solve(curv, cfg, &g_test, &mut rng)?,
            (SolveMethod::Exact, None) => unreachable!(),
        };
        per_test.push(stat);
        for (i, g_train) in train_grads.iter().enumerate() {
            values[j * n_train + i] = -dot(&u, g_train);
        }
    }

    let diagnostics = SolveDiagnostics {
        method: cfg.method,
        damping: cfg.damping,
        param_count: curv.param_count(),
        n_train,
        n_test,
        per_test,
    };
    Ok((InfluenceMatrix { n_test, n_train, values }, diagnostics))
}

/// Influence of every train case on every test case of a trained outcome
/// model, differentiating the head parameters.
pub fn influence_for_model(
    params: &ModelParams,
    train: &[Instance],
    test: &[Instance],
    weights: Option<&[f64]>,
    l2: f64,
    cfg: &InverseHvpConfig,
) -> Result<(InfluenceMatrix, SolveDiagnostics), InfluenceError> {
    let curv = HeadCurvature::new(params, train, test, weights, l2)?;
    compute_influence(&curv, cfg)
}

pub fn write_matrix<P: AsRef<Path>>(m: &InfluenceMatrix, path: P) -> Result<(), InfluenceError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.n_test as u64).to_le_bytes())?;
    w.write_all(&(m.n_train as u64).to_le_bytes())?;
    w.write_all(&ORDER_TEST_MAJOR.to_le_bytes())?;
    for v in &m.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<P: AsRef<Path>>(path: P) -> Result<InfluenceMatrix, InfluenceError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(InfluenceError::BadArtifact("bad magic bytes".into()));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let n_test = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let n_train = u64::from_le_bytes(u64buf) as usize;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let order = u32::from_le_bytes(u32buf);
    if order != ORDER_TEST_MAJOR {
        return Err(InfluenceError::BadArtifact(format!("unknown flatten order {order}")));
    }
    let count = n_test
        .checked_mul(n_train)
        .ok_or_else(|| InfluenceError::BadArtifact("dimension overflow".into()))?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u64buf)?;
        values.push(f64::from_le_bytes(u64buf));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(InfluenceError::BadArtifact("trailing bytes after matrix".into()));
    }
    Ok(InfluenceMatrix { n_test, n_train, values })
}

/// CSV export: one row per test case, one column per train case.
pub fn write_matrix_csv<W: Write>(
    m: &InfluenceMatrix,
    test_ids: &[String],
    train_ids: &[String],
    writer: &mut W,
) -> Result<(), InfluenceError> {
    if test_ids.len() != m.n_test {
        return Err(InfluenceError::DimMismatch { expected: m.n_test, got: test_ids.len() });
    }
    if train_ids.len() != m.n_train {
        return Err(InfluenceError::DimMismatch { expected: m.n_train, got: train_ids.len() });
    }
    write!(writer, "test_id")?;
    for id in train_ids {
        write!(writer, ",{id}")?;
    }
    writeln!(writer)?;
    for (j, id) in test_ids.iter().enumerate() {
        write!(writer, "{id}")?;
        for i in 0..m.n_train {
            write!(writer, ",{}", m.get(j, i))?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

pub fn write_diagnostics<P: AsRef<Path>>(
    diag: &SolveDiagnostics,
    path: P,
) -> Result<(), InfluenceError> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), diag)
        .map_err(|e| InfluenceError::BadArtifact(e.to_string()))?;
    Ok(())
}

fn check_loo_caps(train_len: usize, config: &ModelConfig) -> Result<(), InfluenceError> {
    if train_len > LOO_TRAIN_CAP {
        return Err(InfluenceError::CapExceeded {
            what: "train instance",
            size: train_len,
            cap: LOO_TRAIN_CAP,
        });
    }
    let params = config.layout().param_count();
    if params > LOO_PARAM_CAP {
        return Err(InfluenceError::CapExceeded {
            what: "parameter",
            size: params,
            cap: LOO_PARAM_CAP,
        });
    }
    Ok(())
}

fn test_losses(
    params: &ModelParams,
    test: &[Instance],
) -> Result<Vec<f64>, InfluenceError> {
    test.iter()
        .map(|inst| Ok(instance_loss(params, &inst.x, &inst.outcomes, 0.0)?.0))
        .collect()
}

/// Per-test raw loss change from retraining without one train instance:
/// L(without) - L(baseline). Both runs start from the same seed; the reduced
/// run weights its instances uniformly at 1/(n-1). `removed` of None
/// retrains on the unchanged split, which reproduces the baseline exactly,
/// so every delta is 0.0 bit for bit.
pub fn loo_deltas(
    train: &[Instance],
    validation: &[Instance],
    test: &[Instance],
    config: &ModelConfig,
    removed: Option<usize>,
) -> Result<Vec<f64>, InfluenceError> {
    check_loo_caps(train.len(), config)?;
    if let Some(i) = removed {
        if i >= train.len() {
            return Err(InfluenceError::IndexOutOfRange {
                what: "train",
                idx: i,
                len: train.len(),
            });
        }
    }
    let baseline = train_with(train, validation, config, TrainOptions::default())?;
    let base_losses = test_losses(&baseline.params, test)?;

    let reduced: Vec<Instance> = match removed {
        Some(i) => {
            train.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t.clone()).collect()
        }
        None => train.to_vec(),
    };
    let retrained = train_with(&reduced, validation, config, TrainOptions::default())?;
    let new_losses = test_losses(&retrained.params, test)?;

    Ok(new_losses.iter().zip(&base_losses).map(|(n, b)| n - b).collect())
}

/// Leave-one-out deltas for every train instance: entry [i][j] is the change
/// in test case j's raw loss when train case i is removed. The baseline is
/// trained once.
pub fn loo_sweep(
    train: &[Instance],
    validation: &[Instance],
    test: &[Instance],
    config: &ModelConfig,
) -> Result<Vec<Vec<f64>>, InfluenceError> {
    check_loo_caps(train.len(), config)?;
    let baseline = train_with(train, validation, config, TrainOptions::default())?;
    let base_losses = test_losses(&baseline.params, test)?;

    let mut deltas = Vec::with_capacity(train.len());
    for i in 0..train.len() {
        let reduced: Vec<Instance> =
            train.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t.clone()).collect();
        let retrained = train_with(&reduced, validation, config, TrainOptions::default())?;
        let new_losses = test_losses(&retrained.params, test)?;
        deltas.push(new_losses.iter().zip(&base_losses).map(|(n, b)| n - b).collect());
    }
    Ok(deltas)
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationCheck {
    pub epsilons: Vec<f64>,
    /// Distance between the retrained parameters and the first-order
    /// prediction, per epsilon.
    pub errors: Vec<f64>,
    /// errors[i] / epsilons[i]; shrinks linearly when the prediction is
    /// first-order accurate.
    pub slopes: Vec<f64>,
    /// slopes[i] / slopes[i+1] for consecutive epsilon pairs.
    pub ratios: Vec<f64>,
}

fn require_stationary(
    params: &ModelParams,
    train: &[Instance],
    weights: Option<&[f64]>,
    config: &ModelConfig,
) -> Result<(), InfluenceError> {
    let tol = config
        .grad_tol
        .ok_or_else(|| InfluenceError::BadConfig("perturbation check needs grad_tol".into()))?;
    let (_, g) = full_gradient(params, train, weights, config.l2_strength)?;
    let grad_norm = norm2(&g);
    if grad_norm > tol {
        return Err(InfluenceError::NotStationary { grad_norm, tol });
    }
    Ok(())
}

/// Richardson check of the first-order response to upweighting one train
/// instance. Adding epsilon to that instance's weight and retraining should
/// move the parameters by about -epsilon * H^{-1} grad, so the prediction
/// error divided by epsilon must shrink linearly in epsilon. Requires the
/// hidden-layer bypass: only then do the head parameters span the whole
/// model, making the retrained vector directly comparable.
pub fn perturbation_check(
    train: &[Instance],
    config: &ModelConfig,
    target: usize,
    epsilons: &[f64],
    solve_cfg: &InverseHvpConfig,
) -> Result<PerturbationCheck, InfluenceError> {
    if !config.linear {
        return Err(InfluenceError::BadConfig(
            "perturbation check needs the hidden-layer bypass".into(),
        ));
    }
    if target >= train.len() {
        return Err(InfluenceError::IndexOutOfRange {
            what: "train",
            idx: target,
            len: train.len(),
        });
    }
    if epsilons.is_empty() || epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(InfluenceError::BadConfig("epsilons must be positive".into()));
    }
    if epsilons.windows(2).any(|w| w[0] <= w[1]) {
        return Err(InfluenceError::BadConfig("epsilons must strictly descend".into()));
    }
    solve_cfg.validate()?;

    let baseline = train_with(train, &[], config, TrainOptions::default())?;
    require_stationary(&baseline.params, train, None, config)?;

    let curv = HeadCurvature::new(&baseline.params, train, &[], None, config.l2_strength)?;
    let g_target = curv.train_grad(target)?;
    let exact = ExactSolver::build(&curv, solve_cfg.damping, solve_cfg.exact_cap)?;
    let (u, _) = exact.solve(&curv, solve_cfg.damping, &g_target)?;

    let n = train.len();
    let mut errors = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let mut weights = vec![1.0 / n as f64; n];
        weights[target] += eps;
        let options = TrainOptions { weights: Some(&weights), init: Some(&baseline.params) };
        let moved = train_with(train, &[], config, options)?;
        require_stationary(&moved.params, train, Some(&weights), config)?;

        // predicted = baseline - eps * u; error = ||moved - predicted||.
        let mut diff = moved.params.values.clone();
        axpy(-1.0, &baseline.params.values, &mut diff);
        axpy(eps, &u, &mut diff);
        errors.push(norm2(&diff));
    }
    let slopes: Vec<f64> = errors.iter().zip(epsilons).map(|(e, &eps)| e / eps).collect();
    let ratios: Vec<f64> = slopes.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(PerturbationCheck { epsilons: epsilons.to_vec(), errors, slopes, ratios })
}

/// Ranks train cases by influence on one test case, most helpful first
/// (most negative influence first).
pub fn rank_train_cases(m: &InfluenceMatrix, test_idx: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> =
        (0..m.n_train).map(|i| (i, m.get(test_idx, i))).collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    ranked
}

/// Per-test influence summaries keyed by test id.
pub fn summarize<'a>(
    m: &InfluenceMatrix,
    test_ids: &'a [String],
    train_ids: &'a [String],
    top: usize,
) -> Result<BTreeMap<&'a str, Vec<(&'a str, f64)>>, InfluenceError> {
    if test_ids.len() != m.n_test {
        return Err(InfluenceError::DimMismatch { expected: m.n_test, got: test_ids.len() });
    }
    if train_ids.len() != m.n_train {
        return Err(InfluenceError::DimMismatch { expected: m.n_train, got: train_ids.len() });
    }
    let mut out = BTreeMap::new();
    for (j, id) in test_ids.iter().enumerate() {
        let ranked = rank_train_cases(m, j);
        out.insert(
            id.as_str(),
            ranked.into_iter().take(top).map(|(i, v)| (train_ids[i].as_str(), v)).collect(),
        );
    }
    Ok(out)
}
