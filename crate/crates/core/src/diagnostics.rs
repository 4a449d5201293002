//! Verification suite: loss gradients against finite differences of
//! independent plain-arithmetic formulas, the sign structure of the source
//! loss gradients, and the direction of small steps on the source loss.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_grad, grad_mismatch, Tape, Tensor, Var};
use crate::error::{DadaError, Result};
use crate::losses::{
    grad_signs_source, loss_dann_ca, loss_entropy, loss_source_dada,
    loss_source_dada_p, loss_symmetric_dc, loss_target_f_dada, loss_target_f_openset,
    loss_target_g_dada,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub seed: u64,
    /// Random draws per audited loss.
    pub fd_draws: usize,
    pub fd_step: f64,
    pub rel_tol: f64,
    /// Absolute floor for coordinates whose true gradient is ~0.
    pub abs_tol: f64,
    pub sign_points: usize,
    pub step_trials: usize,
    /// First step size tried before halving.
    pub step_start: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            seed: 0,
            fd_draws: 100,
            fd_step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            sign_points: 10_000,
            step_trials: 100,
            step_start: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    /// Check-specific worst case (mismatch ratio, violation count, ...).
    pub worst: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub checks: Vec<CheckResult>,
}

impl DiagnosticsReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<26} {:>7} {:>8} {:>12}  result\n", "check", "trials", "failures", "worst");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<26} {:>7} {:>8} {:>12.4e}  {}  {}",
                c.name,
                c.trials,
                c.failures,
                c.worst,
                if c.passed() { "PASS" } else { "FAIL" },
                c.detail
            );
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn run_all(cfg: &DiagnosticsConfig) -> Result<DiagnosticsReport> {
    let mut checks = audit_gradients(cfg)?;
    checks.push(audit_grad_signs(cfg)?);
    checks.extend(audit_step_dynamics(cfg)?);
    Ok(DiagnosticsReport { checks })
}

// Plain-arithmetic reference formulas on one probability row. Column
// `p.len() - 1` is the domain neuron.

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn rows_softmax(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.rows_cols();
    (0..n).map(|i| softmax(t.row(i))).collect()
}

fn conditional(p: &[f64]) -> Vec<f64> {
    let k = p.len() - 1;
    p[..k].iter().map(|v| v / (1.0 - p[k])).collect()
}

fn ref_source(p: &[f64], y: usize) -> f64 {
    let r = p[p.len() - 1];
    -((1.0 - r) * p[y].ln() + r * (1.0 - p[y]).ln())
}

fn ref_target_f(p: &[f64]) -> f64 {
    let k = p.len() - 1;
    let r = p[k];
    -conditional(p).iter().zip(p).map(|(b, pk)| b * (r / (pk + r)).ln()).sum::<f64>()
}

fn ref_target_g(p: &[f64]) -> f64 {
    let r = p[p.len() - 1];
    conditional(p).iter().zip(p).map(|(b, pk)| b * (pk / (pk + r)).ln()).sum()
}

fn ref_entropy(p: &[f64]) -> f64 {
    -conditional(p).iter().map(|b| b * b.ln()).sum::<f64>()
}

fn ref_openset(p: &[f64], q: f64) -> f64 {
    let k = p.len() - 1;
    -(q * p[k - 1].ln() + (1.0 - q) * p[k].ln())
}

fn ref_symmetric(p: &[f64]) -> f64 {
    let r = p[p.len() - 1];
    conditional(p).iter().map(|b| b * (0.5 * r.ln() + 0.5 * (1.0 - r).ln())).sum()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// One random problem: logits for a source and a target batch, labels,
/// category weights, a trade-off weight and a leakage probability.
struct Draw {
    source: Tensor,
    target: Tensor,
    labels: Vec<usize>,
    weights: Vec<f64>,
    lambda: f64,
    q: f64,
}

fn draw_logits(rng: &mut ChaCha8Rng, n: usize, cols: usize) -> Result<Tensor> {
    let data = (0..n * cols).map(|_| rng.random_range(-2.5..2.5)).collect();
    Tensor::new(vec![n, cols], data)
}

fn draw_problem(rng: &mut ChaCha8Rng) -> Result<Draw> {
    let k = rng.random_range(3..=6);
    let ns = rng.random_range(1..=4);
    let nt = rng.random_range(1..=4);
    Ok(Draw {
        source: draw_logits(rng, ns, k + 1)?,
        target: draw_logits(rng, nt, k + 1)?,
        labels: (0..ns).map(|_| rng.random_range(0..k)).collect(),
        weights: (0..k).map(|_| rng.random_range(0.0..1.0)).collect(),
        lambda: rng.random_range(0.0..1.0),
        q: rng.random_range(0.01..0.49),
    })
}

type TapeLoss = dyn Fn(&mut Tape, Var, Var, &Draw) -> Result<Var>;
type RefLoss = dyn Fn(&[Vec<f64>], &[Vec<f64>], &Draw) -> f64;

struct Audited {
    name: &'static str,
    on_tape: Box<TapeLoss>,
    reference: Box<RefLoss>,
}

fn audited_losses() -> Vec<Audited> {
    let weights = |d: &Draw| crate::losses::CategoryWeights { c_bar: d.weights.clone(), c: d.weights.clone() };
    vec![
        Audited {
            name: "grad_source",
            on_tape: Box::new(|t, s, _, d| loss_source_dada(t, s, &d.labels)),
            reference: Box::new(|s, _, d| mean(s.iter().zip(&d.labels).map(|(p, &y)| ref_source(p, y)))),
        },
        Audited {
            name: "grad_source_weighted",
            on_tape: Box::new(move |t, s, _, d| loss_source_dada_p(t, s, &d.labels, &weights(d))),
            reference: Box::new(|s, _, d| {
                mean(s.iter().zip(&d.labels).map(|(p, &y)| d.weights[y] * ref_source(p, y)))
            }),
        },
        Audited {
            name: "grad_target_f",
            on_tape: Box::new(|t, _, tg, _| loss_target_f_dada(t, tg)),
            reference: Box::new(|_, tg, _| mean(tg.iter().map(|p| ref_target_f(p)))),
        },
        Audited {
            name: "grad_target_g",
            on_tape: Box::new(|t, _, tg, _| loss_target_g_dada(t, tg)),
            reference: Box::new(|_, tg, _| mean(tg.iter().map(|p| ref_target_g(p)))),
        },
        Audited {
            name: "grad_entropy",
            on_tape: Box::new(|t, _, tg, _| loss_entropy(t, tg)),
            reference: Box::new(|_, tg, _| mean(tg.iter().map(|p| ref_entropy(p)))),
        },
        Audited {
            name: "grad_dann_ca_f",
            on_tape: Box::new(|t, s, tg, d| Ok(loss_dann_ca(t, s, &d.labels, tg, d.lambda)?.l_f)),
            reference: Box::new(|s, tg, d| {
                let k = s[0].len() - 1;
                -mean(s.iter().zip(&d.labels).map(|(p, &y)| p[y].ln())) - mean(tg.iter().map(|p| p[k].ln()))
            }),
        },
        Audited {
            name: "grad_dann_ca_g",
            on_tape: Box::new(|t, s, tg, d| {
                loss_dann_ca(t, s, &d.labels, tg, d.lambda)?
                    .l_g
                    .ok_or_else(|| DadaError::invalid("missing G objective"))
            }),
            reference: Box::new(|s, tg, d| {
                let k = s[0].len() - 1;
                mean(s.iter().zip(&d.labels).map(|(p, &y)| conditional(p)[y].ln()))
                    + d.lambda * mean(tg.iter().map(|p| (1.0 - p[k]).ln()))
            }),
        },
        Audited {
            name: "grad_openset_f",
            on_tape: Box::new(|t, _, tg, d| loss_target_f_openset(t, tg, d.q)),
            reference: Box::new(|_, tg, d| mean(tg.iter().map(|p| ref_openset(p, d.q)))),
        },
        Audited {
            name: "grad_symmetric_dc",
            on_tape: Box::new(|t, _, tg, _| loss_symmetric_dc(t, tg)),
            reference: Box::new(|_, tg, _| mean(tg.iter().map(|p| ref_symmetric(p)))),
        },
    ]
}

/// Tape value and gradients with respect to both logit matrices.
fn tape_gradients(loss: &TapeLoss, d: &Draw) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let zs = tape.param(d.source.clone());
    let zt = tape.param(d.target.clone());
    let ps = tape.softmax_rows(zs)?;
    let pt = tape.softmax_rows(zt)?;
    let l = loss(&mut tape, ps, pt, d)?;
    tape.backward(l)?;
    let grad = |v: Var| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);
    Ok((tape.value(l).item(), grad(zs), grad(zt)))
}

/// Analytic gradients of every loss with respect to the logits, compared
/// with central differences of an independent reference implementation.
pub fn audit_gradients(cfg: &DiagnosticsConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = (0..cfg.fd_draws).map(|_| draw_problem(&mut rng)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for a in audited_losses() {
        let (mut failures, mut worst, mut worst_value) = (0, 0.0f64, 0.0f64);
        for d in &draws {
            let (value, gs, gt) = tape_gradients(&*a.on_tape, d)?;
            let reference = (a.reference)(&rows_softmax(&d.source), &rows_softmax(&d.target), d);
            let ns = finite_diff_grad(
                |t| Ok((a.reference)(&rows_softmax(t), &rows_softmax(&d.target), d)),
                &d.source,
                cfg.fd_step,
            )?;
            let nt = finite_diff_grad(
                |t| Ok((a.reference)(&rows_softmax(&d.source), &rows_softmax(t), d)),
                &d.target,
                cfg.fd_step,
            )?;
            let ratio = grad_mismatch(&gs, ns.data(), cfg.rel_tol, cfg.abs_tol)
                .max(grad_mismatch(&gt, nt.data(), cfg.rel_tol, cfg.abs_tol));
            let value_err = (value - reference).abs() / (1.0 + reference.abs());
            worst = worst.max(ratio);
            worst_value = worst_value.max(value_err);
            if ratio > 1.0 || value_err > 1e-12 || !ratio.is_finite() {
                failures += 1;
            }
        }
        out.push(CheckResult {
            name: a.name.to_string(),
            trials: draws.len(),
            failures,
            worst,
            detail: format!(
                "K=3..6, h={:e}, rel {:e}, worst value error {worst_value:.1e}",
                cfg.fd_step, cfg.rel_tol
            ),
        });
    }
    Ok(out)
}

/// Uniform point of the simplex with `dim` coordinates.
fn simplex_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v: f64| v / s).collect()
}

/// Over random simplex points: the true-category gradient is never
/// positive, and the domain gradient has the sign of `p_y - 0.5`.
pub fn audit_grad_signs(cfg: &DiagnosticsConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (mut py_bad, mut dom_bad, mut skipped, mut max_py_grad) = (0, 0, 0, f64::NEG_INFINITY);
    for _ in 0..cfg.sign_points {
        let k = rng.random_range(2..=6);
        let p = simplex_point(&mut rng, k + 1);
        let y = rng.random_range(0..k);
        let g = grad_signs_source(p[y], p[k])?;
        max_py_grad = max_py_grad.max(g.wrt_py);
        if g.wrt_py > 0.0 {
            py_bad += 1;
        }
        if (p[y] - 0.5).abs() <= 1e-9 {
            skipped += 1;
        } else if (g.wrt_domain > 0.0) != (p[y] > 0.5) || g.wrt_domain == 0.0 {
            dom_bad += 1;
        }
    }
    Ok(CheckResult {
        name: "grad_signs_source".into(),
        trials: cfg.sign_points,
        failures: py_bad + dom_bad,
        worst: max_py_grad,
        detail: format!(
            "p_y-gradient positive {py_bad}, domain sign wrong {dom_bad}, skipped at p_y=0.5: {skipped}; worst = max p_y-gradient"
        ),
    })
}

/// Gradient of the single-instance source loss with respect to either the
/// probability row itself or the logits behind it.
fn source_grad(values: &[f64], y: usize, through_softmax: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![1, values.len()], values.to_vec())?);
    let p = if through_softmax { tape.softmax_rows(x)? } else { x };
    let l = loss_source_dada(&mut tape, p, &[y])?;
    tape.backward(l)?;
    Ok(tape.grad(x).map(<[f64]>::to_vec).unwrap_or_default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Descent,
    Ascent,
}

/// Whether a step moved `p_y` and (when `p_y > 0.5`) `p_{K+1}` the expected way.
fn moved_as_expected(before: &[f64], after: &[f64], y: usize, dir: Direction) -> bool {
    let k = before.len() - 1;
    let (dy, dr) = (after[y] - before[y], after[k] - before[k]);
    let (want_y, want_r) = match dir {
        Direction::Descent => (dy > 0.0, dr < 0.0),
        Direction::Ascent => (dy < 0.0, dr > 0.0),
    };
    want_y && (before[y] <= 0.5 || want_r)
}

/// Halves the step from `start` until the move matches; `None` if it never does.
fn bisect_step(start: f64, mut moves: impl FnMut(f64) -> bool) -> Option<f64> {
    let mut eta = start;
    for _ in 0..60 {
        if moves(eta) {
            return Some(eta);
        }
        eta *= 0.5;
    }
    None
}

/// Small descent and ascent steps on the source loss. In probability space
/// every random trial is used. In logit space the softmax Jacobian mixes
/// coordinates, so trials are drawn with `p_y > 0.5`, the regime where the
/// guarantee is stated.
pub fn audit_step_dynamics(cfg: &DiagnosticsConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut out = Vec::new();
    for (space, through_softmax) in [("step_dynamics_prob", false), ("step_dynamics_logit", true)] {
        let (mut failures, mut smallest, mut above_half) = (0, f64::INFINITY, 0);
        for _ in 0..cfg.step_trials {
            let k = rng.random_range(2..=6);
            let y = rng.random_range(0..k);
            let point = if through_softmax {
                let mut z: Vec<f64> = (0..=k).map(|_| rng.random_range(-2.0..2.0)).collect();
                // Lift the true logit until p_y > 0.5.
                while softmax(&z)[y] <= 0.5 {
                    z[y] += 0.5;
                }
                z
            } else {
                simplex_point(&mut rng, k + 1)
            };
            let p = if through_softmax { softmax(&point) } else { point.clone() };
            if p[y] > 0.5 {
                above_half += 1;
            }
            let g = source_grad(&point, y, through_softmax)?;
            let step = |eta: f64, dir: Direction| -> Vec<f64> {
                let s = if dir == Direction::Descent { -eta } else { eta };
                let moved: Vec<f64> = point.iter().zip(&g).map(|(v, gi)| v + s * gi).collect();
                if through_softmax { softmax(&moved) } else { moved }
            };
            for dir in [Direction::Descent, Direction::Ascent] {
                match bisect_step(cfg.step_start, |eta| moved_as_expected(&p, &step(eta, dir), y, dir)) {
                    Some(eta) => smallest = smallest.min(eta),
                    None => failures += 1,
                }
            }
        }
        out.push(CheckResult {
            name: space.into(),
            trials: cfg.step_trials,
            failures,
            worst: if smallest.is_finite() { smallest } else { 0.0 },
            detail: format!(
                "descent and ascent per trial, {above_half} trials with p_y > 0.5; worst = smallest step needed"
            ),
        });
    }
    Ok(out)
}
