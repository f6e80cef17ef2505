//! Random walks driven by balancing kernels.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{exact_expectation, RootedEnsemble};
use crate::error::{Error, Result};
use crate::report::{MtpReport, DEFAULT_Z, EXACT_TOL};
use crate::seed::{derive, rng};
use crate::space::{Decoration, FiniteRmmSpace, MATRIX_TOL};
use crate::stats::Estimate;
use crate::transport::{KernelMatrix, SquareMatrix, TransportFunction};

/// Shortest trace accepted by [`speed_estimate`].
pub const MIN_SPEED_STEPS: usize = 1000;

/// Markov kernel `k(u, v) = h(u,v) mu(v) / b(u)` (default `b = 1`).
pub fn kernel_from_transport(
    space: &FiniteRmmSpace,
    h: &dyn TransportFunction,
    b: Option<&[f64]>,
) -> Result<KernelMatrix> {
    kernel_from_matrix(space, &h.matrix(space)?, b, &h.name())
}

pub fn kernel_from_matrix(space: &FiniteRmmSpace, h: &SquareMatrix, b: Option<&[f64]>, name: &str) -> Result<KernelMatrix> {
    let n = space.n();
    let mu = space.mu();
    let mut k = SquareMatrix::zeros(n);
    for u in 0..n {
        let bu = b.map_or(1.0, |b| b[u]);
        let plus = h.out_sum(u, mu);
        if !(bu > 0.0) || (plus - bu).abs() > MATRIX_TOL {
            return Err(Error::Normalization(format!("{name}: h+({u}) = {plus}, expected {bu}")));
        }
        for v in 0..n {
            k.set(u, v, h.get(u, v) * mu[v] / bu);
        }
    }
    KernelMatrix::new(k, format!("{name}*mu"))
}

/// `(I + K) / 2`.
pub fn lazy(k: &KernelMatrix) -> KernelMatrix {
    let n = k.n();
    let m = SquareMatrix::from_fn(n, |u, v| 0.5 * k.get(u, v) + if u == v { 0.5 } else { 0.0 });
    KernelMatrix { matrix: m, reference: format!("lazy({})", k.reference) }
}

/// Simple random walk on a graph metric (lazy when `laziness > 0`).
pub fn nearest_neighbor_kernel(space: &FiniteRmmSpace, laziness: f64) -> Result<KernelMatrix> {
    let n = space.n();
    let m = SquareMatrix::from_fn(n, |u, v| {
        let deg = space.degree(u) as f64;
        if u == v {
            if deg == 0.0 {
                1.0
            } else {
                laziness
            }
        } else if (space.d(u, v) - 1.0).abs() <= MATRIX_TOL {
            (1.0 - laziness) / deg
        } else {
            0.0
        }
    });
    KernelMatrix::new(m, "nearest_neighbor")
}

/// Exact comparison of `E[F(o, x1)]` and `E[F(x1, o)]` for one step of the
/// `h`-walk, where `F` is a function of the doubly rooted space.
pub fn reversibility_check<F>(e: &RootedEnsemble, h: &dyn TransportFunction, f: F) -> Result<MtpReport>
where
    F: Fn(&FiniteRmmSpace, usize, usize) -> f64,
{
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for a in e.atoms() {
        let s = &a.space;
        let hm = h.matrix(s)?;
        for u in 0..s.n() {
            for v in u + 1..s.n() {
                if hm.get(u, v) != hm.get(v, u) {
                    return Err(Error::InvalidParameter(format!("{} is not symmetric at ({u},{v})", h.name())));
                }
            }
        }
        let k = kernel_from_matrix(s, &hm, None, &h.name())?;
        let o = s.root();
        for v in 0..s.n() {
            let p = k.get(o, v);
            if p > 0.0 {
                lhs += a.weight * p * f(s, o, v);
                rhs += a.weight * p * f(s, v, o);
            }
        }
    }
    Ok(MtpReport::exact("reversibility", lhs, rhs, EXACT_TOL))
}

/// Exact comparison of `E[F(x_k, x_{k+1})]` with `E[F(o, x_1)]`.
pub fn shift_stationarity_check<F>(e: &RootedEnsemble, h: &dyn TransportFunction, f: F, k: usize) -> Result<MtpReport>
where
    F: Fn(&FiniteRmmSpace, usize, usize) -> f64,
{
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for a in e.atoms() {
        let s = &a.space;
        let km = kernel_from_transport(s, h, None)?;
        let mut pi = vec![0.0; s.n()];
        pi[s.root()] = 1.0;
        let step = |pi: &[f64]| -> f64 {
            let mut acc = 0.0;
            for u in 0..s.n() {
                if pi[u] > 0.0 {
                    for v in 0..s.n() {
                        acc += pi[u] * km.get(u, v) * f(s, u, v);
                    }
                }
            }
            acc
        };
        rhs += a.weight * step(&pi);
        for _ in 0..k {
            pi = km.left_apply(&pi);
        }
        lhs += a.weight * step(&pi);
    }
    Ok(MtpReport::exact(format!("shift_stationarity[k={k}]"), lhs, rhs, EXACT_TOL))
}

/// Trajectory of a walk; `forward[0]` is the root. Two-sided traces also
/// carry an independent backward chain started at the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkTrace {
    pub space: FiniteRmmSpace,
    pub forward: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub backward: Vec<usize>,
    pub kernel: String,
    pub seed: u64,
}

impl WalkTrace {
    /// `(x_{-n}, ..., x_0, ..., x_n)`.
    pub fn two_sided(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.backward.iter().skip(1).rev().copied().collect();
        out.extend_from_slice(&self.forward);
        out
    }

    pub fn steps(&self) -> usize {
        self.forward.len().saturating_sub(1)
    }

    /// The space with the trajectory attached as decorations `walk` (forward)
    /// and, for two-sided traces, `walk_back`.
    pub fn to_space(&self) -> Result<FiniteRmmSpace> {
        let mut s = self.space.with_decoration("walk", Decoration::Trajectory(self.forward.clone()))?;
        if !self.backward.is_empty() {
            s = s.with_decoration("walk_back", Decoration::Trajectory(self.backward.clone()))?;
        }
        Ok(s)
    }
}

fn run_chain(k: &KernelMatrix, start: usize, steps: usize, seed: u64) -> Vec<usize> {
    let n = k.n();
    let cumulative: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            k.matrix
                .row(u)
                .iter()
                .scan(0.0, |acc, &p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let mut r = rng(seed);
    let mut x = start;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x);
    for _ in 0..steps {
        let row = &cumulative[x];
        let u = r.random::<f64>() * row[n - 1];
        let next = row.partition_point(|&c| c <= u).min(n - 1);
        // never step onto a zero-probability point because of round-off
        x = if k.get(x, next) > 0.0 { next } else { (0..n).rev().find(|&v| k.get(x, v) > 0.0).unwrap_or(x) };
        out.push(x);
    }
    out
}

/// One-sided walk of `steps` steps from the root.
pub fn simulate_walk(space: &FiniteRmmSpace, kernel: &KernelMatrix, steps: usize, seed: u64) -> Result<WalkTrace> {
    if kernel.n() != space.n() {
        return Err(Error::InvalidParameter("kernel does not match the space".into()));
    }
    KernelMatrix::new(kernel.matrix.clone(), kernel.reference.clone())?;
    Ok(WalkTrace {
        space: space.clone(),
        forward: run_chain(kernel, space.root(), steps, derive(seed, 0)),
        backward: Vec::new(),
        kernel: kernel.reference.clone(),
        seed,
    })
}

/// Two independent chains of `steps` steps from the root.
pub fn simulate_two_sided(space: &FiniteRmmSpace, kernel: &KernelMatrix, steps: usize, seed: u64) -> Result<WalkTrace> {
    let mut t = simulate_walk(space, kernel, steps, seed)?;
    t.backward = run_chain(kernel, space.root(), steps, derive(seed, 1));
    Ok(t)
}

/// Visit frequency of every point along the forward chain (excluding the
/// start), with batch-means standard errors.
pub fn occupation(trace: &WalkTrace, batches: usize) -> Vec<Estimate> {
    let path = &trace.forward[1..];
    (0..trace.space.n())
        .map(|x| {
            let ind: Vec<f64> = path.iter().map(|&p| if p == x { 1.0 } else { 0.0 }).collect();
            Estimate::batch_means(&ind, batches)
        })
        .collect()
}

/// Compares visit frequencies with `mu(x) / mu(X)`, one report per point.
pub fn occupation_check(trace: &WalkTrace, batches: usize) -> Vec<MtpReport> {
    let total = trace.space.total_mass();
    occupation(trace, batches)
        .into_iter()
        .enumerate()
        .map(|(x, e)| {
            MtpReport::monte_carlo(
                format!("occupation[{x}]"),
                e.mean,
                trace.space.mu()[x] / total,
                e.se,
                0.0,
                e.se,
                DEFAULT_Z,
                e.n,
                trace.seed,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedEstimate {
    /// Mean of `d(o, x_n) / n` over traces.
    pub estimate: Estimate,
    /// Largest `diam / n` over the traces.
    pub bound: f64,
    pub interval: (f64, f64),
}

pub fn speed_estimate(traces: &[WalkTrace]) -> Result<SpeedEstimate> {
    if traces.is_empty() {
        return Err(Error::Empty("traces"));
    }
    let mut xs = Vec::with_capacity(traces.len());
    let mut bound: f64 = 0.0;
    for t in traces {
        let n = t.steps();
        if n < MIN_SPEED_STEPS {
            return Err(Error::InvalidParameter(format!("trace of {n} steps; at least {MIN_SPEED_STEPS} needed")));
        }
        xs.push(t.space.d(t.forward[0], t.forward[n]) / n as f64);
        bound = bound.max(t.space.diameter() / n as f64);
    }
    let estimate = Estimate::from_samples(&xs);
    let se = if estimate.se.is_finite() { estimate.se } else { 0.0 };
    Ok(SpeedEstimate { estimate, bound, interval: (estimate.mean - DEFAULT_Z * se, estimate.mean + DEFAULT_Z * se) })
}

/// `(1 / (2n + 1)) sum_{i=-n}^{n} f(X, x_i, mu)` with a batch-means SE.
pub fn ergodic_average<F>(trace: &WalkTrace, f: F) -> Result<Estimate>
where
    F: Fn(&FiniteRmmSpace) -> f64,
{
    let values: Vec<f64> = (0..trace.space.n()).map(|x| f(&trace.space.rooted_at(x))).collect();
    if let Some(x) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("functional at point {x}")));
    }
    let seq: Vec<f64> = trace.two_sided().iter().map(|&x| values[x]).collect();
    Ok(Estimate::batch_means(&seq, 50))
}

/// Averages of ergodic averages over independent two-sided walks from roots
/// drawn from `e`, against the exact `E[f(o)]`.
pub fn ergodic_average_check<F>(
    e: &RootedEnsemble,
    h: &dyn TransportFunction,
    f: F,
    steps: usize,
    trials: u64,
    seed: u64,
) -> Result<MtpReport>
where
    F: Fn(&FiniteRmmSpace) -> f64 + Sync,
{
    let kernels = e.atoms().iter().map(|a| kernel_from_transport(&a.space, h, None)).collect::<Result<Vec<_>>>()?;
    let averages = (0..trials)
        .into_par_iter()
        .map(|i| {
            let s = derive(seed, i);
            let idx = crate::process::pick_atom(e, rng(s).random::<f64>());
            let t = simulate_two_sided(&e.atoms()[idx].space, &kernels[idx], steps, derive(s, 1))?;
            Ok(ergodic_average(&t, &f)?.mean)
        })
        .collect::<Result<Vec<_>>>()?;
    let mc = Estimate::from_samples(&averages);
    let exact = exact_expectation(e, &f)?;
    Ok(MtpReport::monte_carlo("ergodic_average", mc.mean, exact, mc.se, 0.0, mc.se, DEFAULT_Z, trials, seed))
}
