//! Objectives of the integrated category/domain classifier.
//!
//! Every loss takes the `[n, K + 1]` softmax output recorded on a tape and
//! returns a scalar node, so gradients reach both the classifier and the
//! feature extractor. Column `K` of the probability matrix is the domain
//! neuron. All logs go through [`safe_log`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{DadaError, Result};
use crate::model::PROB_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Dada,
    DadaP,
    DadaO,
    DannCa,
    DadaDc,
    SourceOnly,
    NoEm,
    NoEmNoTd,
}

impl Objective {
    pub const ALL: [Objective; 8] = [
        Objective::Dada,
        Objective::DadaP,
        Objective::DadaO,
        Objective::DannCa,
        Objective::DadaDc,
        Objective::SourceOnly,
        Objective::NoEm,
        Objective::NoEmNoTd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Dada => "dada",
            Objective::DadaP => "dada_p",
            Objective::DadaO => "dada_o",
            Objective::DannCa => "dann_ca",
            Objective::DadaDc => "dada_dc",
            Objective::SourceOnly => "source_only",
            Objective::NoEm => "no_em",
            Objective::NoEmNoTd => "no_em_no_td",
        }
    }

    /// Whether the objective has a maximization problem over `G`.
    pub fn is_adversarial(self) -> bool {
        self != Objective::SourceOnly
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = DadaError;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| DadaError::invalid(format!("unknown objective {s:?}")))
    }
}

/// Where the trade-off weight enters the minimax objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPlacement {
    /// `lambda * (L_s + L_t)`.
    #[default]
    Joint,
    /// `L_s + lambda * L_t`.
    TargetOnly,
}

/// Scalars of one objective evaluation. `l_f` is minimized over the
/// classifier, `l_g` maximized over the feature extractor; `l_g` is `None`
/// when `G` simply minimizes `l_f` as well.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub l_f: Var,
    pub l_g: Option<Var>,
    pub components: BTreeMap<String, Var>,
}

impl LossBundle {
    pub fn values(&self, tape: &Tape) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = self
            .components
            .iter()
            .map(|(k, v)| (k.clone(), tape.value(*v).item()))
            .collect();
        out.insert("loss_f".into(), tape.value(self.l_f).item());
        if let Some(g) = self.l_g {
            out.insert("loss_g".into(), tape.value(g).item());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryWeights {
    /// Mean target conditional probability per category.
    pub c_bar: Vec<f64>,
    /// `lambda * c_bar / max(c_bar) + (1 - lambda)`.
    pub c: Vec<f64>,
}

pub fn safe_log(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = tape.clamp(x, PROB_EPS, 1.0 - PROB_EPS)?;
    tape.log(c)
}

fn num_classes(tape: &Tape, probs: Var) -> Result<usize> {
    let shape = tape.value(probs).shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(DadaError::ShapeMismatch {
            op: "loss input",
            left: shape.to_vec(),
            right: vec![0, 2],
        });
    }
    Ok(shape[1] - 1)
}

fn check_labels(tape: &Tape, probs: Var, labels: &[usize]) -> Result<usize> {
    let k = num_classes(tape, probs)?;
    let n = tape.value(probs).shape()[0];
    if labels.len() != n {
        return Err(DadaError::invalid(format!("{} labels for {n} instances", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(DadaError::invalid(format!("label {bad} outside 0..{k}")));
    }
    Ok(k)
}

fn batch_mean_of_sum(tape: &mut Tape, x: Var, sign: f64) -> Result<Var> {
    let n = tape.value(x).shape()[0] as f64;
    let s = tape.sum(x)?;
    tape.scale(s, sign / n)
}

/// Category columns `[n, K]` and the domain column `[n, 1]`.
fn split_columns(tape: &mut Tape, probs: Var) -> Result<(Var, Var)> {
    let k = num_classes(tape, probs)?;
    let cats: Vec<usize> = (0..k).collect();
    let pk = tape.select_cols(probs, &cats)?;
    let r = tape.select_cols(probs, &[k])?;
    Ok((pk, r))
}

/// Conditional category probabilities `p_k / (1 - p_{K+1})`, `[n, K]`.
pub fn conditional_on_tape(tape: &mut Tape, probs: Var) -> Result<Var> {
    let (pk, r) = split_columns(tape, probs)?;
    let rest = tape.one_minus(r)?;
    let denom = tape.clamp(rest, PROB_EPS, 1.0)?;
    tape.div(pk, denom)
}

fn source_terms(tape: &mut Tape, probs: Var, labels: &[usize], weights: Option<&[f64]>) -> Result<Var> {
    let k = check_labels(tape, probs, labels)?;
    let py = tape.gather(probs, labels)?;
    let r = tape.select_cols(probs, &[k])?;
    let log_py = safe_log(tape, py)?;
    let not_py = tape.one_minus(py)?;
    let log_not_py = safe_log(tape, not_py)?;
    let not_r = tape.one_minus(r)?;
    let a = tape.mul(not_r, log_py)?;
    let b = tape.mul(r, log_not_py)?;
    let mut term = tape.add(a, b)?;
    if let Some(w) = weights {
        let per_instance: Vec<f64> = labels.iter().map(|&y| w[y]).collect();
        let wv = tape.constant(Tensor::new(vec![labels.len(), 1], per_instance)?);
        term = tape.mul(term, wv)?;
    }
    let m = tape.mean(term)?;
    tape.scale(m, -1.0)
}

/// Source discriminative loss:
/// `-mean[(1 - p_{K+1}) log p_y + p_{K+1} log(1 - p_y)]`.
pub fn loss_source_dada(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    source_terms(tape, probs, labels, None)
}

/// Source discriminative loss with each instance scaled by `c_{y}`.
pub fn loss_source_dada_p(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    weights: &CategoryWeights,
) -> Result<Var> {
    let k = check_labels(tape, probs, labels)?;
    if weights.c.len() != k {
        return Err(DadaError::invalid(format!(
            "{} category weights for K = {k}",
            weights.c.len()
        )));
    }
    source_terms(tape, probs, labels, Some(&weights.c))
}

/// `p_{K+1} / (p_k + p_{K+1})` and `p_k / (p_k + p_{K+1})` for every `k`.
fn domain_pred_pair(tape: &mut Tape, probs: Var) -> Result<(Var, Var)> {
    let (pk, r) = split_columns(tape, probs)?;
    let total = tape.add(pk, r)?;
    let denom = tape.clamp(total, PROB_EPS, 2.0)?;
    let to_target = tape.div(r, denom)?;
    let to_category = tape.div(pk, denom)?;
    Ok((to_target, to_category))
}

/// Target discriminative loss minimized over the classifier:
/// `-mean sum_k pbar_k log phat^k_{K+1}`.
pub fn loss_target_f_dada(tape: &mut Tape, probs: Var) -> Result<Var> {
    let pbar = conditional_on_tape(tape, probs)?;
    let (to_target, _) = domain_pred_pair(tape, probs)?;
    let l = safe_log(tape, to_target)?;
    let w = tape.mul(pbar, l)?;
    batch_mean_of_sum(tape, w, -1.0)
}

/// Target discriminative loss maximized over the feature extractor:
/// `mean sum_k pbar_k log(1 - phat^k_{K+1})`.
pub fn loss_target_g_dada(tape: &mut Tape, probs: Var) -> Result<Var> {
    let pbar = conditional_on_tape(tape, probs)?;
    let (_, to_category) = domain_pred_pair(tape, probs)?;
    let l = safe_log(tape, to_category)?;
    let w = tape.mul(pbar, l)?;
    batch_mean_of_sum(tape, w, 1.0)
}

/// Mean entropy of the conditional category distribution (0 log 0 = 0).
pub fn loss_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    let pbar = conditional_on_tape(tape, probs)?;
    let l = safe_log(tape, pbar)?;
    let w = tape.mul(pbar, l)?;
    batch_mean_of_sum(tape, w, -1.0)
}

/// K-way cross-entropy on the conditional probabilities, `-mean log pbar_y`.
pub fn loss_cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, probs, labels)?;
    let pbar = conditional_on_tape(tape, probs)?;
    let py = tape.gather(pbar, labels)?;
    let l = safe_log(tape, py)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

/// Cross-entropy over the full `K + 1` softmax, `-mean log p_y`. Unlike
/// [`loss_cross_entropy`] it also pushes the domain output down.
pub fn loss_cross_entropy_full(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, probs, labels)?;
    let py = tape.gather(probs, labels)?;
    let l = safe_log(tape, py)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

/// Which probabilities the supervised source cross-entropy reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// `-log pbar_y`: the domain output gets no gradient.
    Conditional,
    /// `-log p_y` over all `K + 1` outputs.
    #[default]
    Full,
}

pub fn loss_supervised(tape: &mut Tape, probs: Var, labels: &[usize], kind: Supervision) -> Result<Var> {
    match kind {
        Supervision::Conditional => loss_cross_entropy(tape, probs, labels),
        Supervision::Full => loss_cross_entropy_full(tape, probs, labels),
    }
}

/// Symmetric domain-confusion alternative for the target term over `G`:
/// `mean sum_k pbar_k [log p_{K+1} / 2 + log(1 - p_{K+1}) / 2]`.
pub fn loss_symmetric_dc(tape: &mut Tape, probs: Var) -> Result<Var> {
    let pbar = conditional_on_tape(tape, probs)?;
    let (_, r) = split_columns(tape, probs)?;
    let lr = safe_log(tape, r)?;
    let not_r = tape.one_minus(r)?;
    let lnr = safe_log(tape, not_r)?;
    let both = tape.add(lr, lnr)?;
    let half = tape.scale(both, 0.5)?;
    let w = tape.mul(pbar, half)?;
    batch_mean_of_sum(tape, w, 1.0)
}

/// Open-set target loss over the classifier, with output `K - 1` as the
/// unknown category: `-mean[q log p_unk + (1 - q) log p_{K+1}]`.
///
/// `q = 0` is accepted and reduces to the plain domain term.
pub fn loss_target_f_openset(tape: &mut Tape, probs: Var, q: f64) -> Result<Var> {
    if !(0.0..0.5).contains(&q) {
        return Err(DadaError::invalid(format!("q must lie in [0, 0.5), got {q}")));
    }
    let k = num_classes(tape, probs)?;
    let unk = tape.select_cols(probs, &[k - 1])?;
    let r = tape.select_cols(probs, &[k])?;
    let lu = safe_log(tape, unk)?;
    let lr = safe_log(tape, r)?;
    let a = tape.scale(lu, q)?;
    let b = tape.scale(lr, 1.0 - q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

/// Classification-aware adversarial baseline.
pub fn loss_dann_ca(
    tape: &mut Tape,
    probs_s: Var,
    labels: &[usize],
    probs_t: Var,
    lambda: f64,
) -> Result<LossBundle> {
    let k = check_labels(tape, probs_s, labels)?;
    let py = tape.gather(probs_s, labels)?;
    let log_py = safe_log(tape, py)?;
    let src_f = {
        let m = tape.mean(log_py)?;
        tape.scale(m, -1.0)?
    };
    let rt = tape.select_cols(probs_t, &[k])?;
    let log_rt = safe_log(tape, rt)?;
    let tgt_f = {
        let m = tape.mean(log_rt)?;
        tape.scale(m, -1.0)?
    };
    let l_f = tape.add(src_f, tgt_f)?;

    let ce = loss_cross_entropy(tape, probs_s, labels)?;
    let src_g = tape.scale(ce, -1.0)?;
    let not_rt = tape.one_minus(rt)?;
    let log_not_rt = safe_log(tape, not_rt)?;
    let tgt_g = tape.mean(log_not_rt)?;
    let tgt_g_w = tape.scale(tgt_g, lambda)?;
    let l_g = tape.add(src_g, tgt_g_w)?;

    let components = BTreeMap::from([
        ("loss_s_f".to_string(), src_f),
        ("loss_t_f".to_string(), tgt_f),
        ("loss_s_g".to_string(), src_g),
        ("loss_t_g".to_string(), tgt_g),
    ]);
    Ok(LossBundle {
        l_f,
        l_g: Some(l_g),
        components,
    })
}

/// Category weights from the conditional probabilities of target data.
pub fn category_weights(p_bar: &[Vec<f64>], lambda: f64) -> Result<CategoryWeights> {
    if p_bar.is_empty() {
        return Err(DadaError::invalid("category weights need at least one target instance"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DadaError::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let k = p_bar[0].len();
    let mut c_bar = vec![0.0; k];
    for row in p_bar {
        if row.len() != k {
            return Err(DadaError::invalid("ragged conditional probability rows"));
        }
        for (acc, v) in c_bar.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = p_bar.len() as f64;
    c_bar.iter_mut().for_each(|v| *v /= n);
    let max = c_bar.iter().copied().fold(0.0, f64::max).max(PROB_EPS);
    let c = c_bar.iter().map(|v| lambda * v / max + (1.0 - lambda)).collect();
    Ok(CategoryWeights { c_bar, c })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Negative,
    Zero,
    Positive,
}

impl Sign {
    pub fn of(v: f64) -> Sign {
        if v > 0.0 {
            Sign::Positive
        } else if v < 0.0 {
            Sign::Negative
        } else {
            Sign::Zero
        }
    }
}

/// Partial derivatives of the per-instance source loss with respect to the
/// true-category and domain probabilities, treated as free variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceGradients {
    pub wrt_py: f64,
    pub wrt_domain: f64,
}

impl SourceGradients {
    pub fn signs(&self) -> (Sign, Sign) {
        (Sign::of(self.wrt_py), Sign::of(self.wrt_domain))
    }
}

/// Closed-form gradients of the source discriminative loss:
/// `d/dp_y = [p_y p_{K+1} - (1 - p_y)(1 - p_{K+1})] / [p_y (1 - p_y)]` and
/// `d/dp_{K+1} = log(p_y / (1 - p_y))`.
pub fn grad_signs_source(p_y: f64, p_domain: f64) -> Result<SourceGradients> {
    let open = |v: f64| v > 0.0 && v < 1.0;
    if !open(p_y) || !open(p_domain) || p_y + p_domain > 1.0 {
        return Err(DadaError::invalid(format!(
            "({p_y}, {p_domain}) is not inside the probability simplex"
        )));
    }
    let wrt_py = (p_y * p_domain - (1.0 - p_y) * (1.0 - p_domain)) / (p_y * (1.0 - p_y));
    let wrt_domain = (p_y / (1.0 - p_y)).ln();
    Ok(SourceGradients { wrt_py, wrt_domain })
}

/// Everything [`assemble`] may need; unused fields are ignored.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub probs_s: Var,
    pub labels_s: &'a [usize],
    pub probs_t: Option<Var>,
    pub lambda: f64,
    pub placement: LambdaPlacement,
    pub weights: Option<&'a CategoryWeights>,
    pub q: Option<f64>,
}

/// Builds `L_F` and `L_G` for one objective.
pub fn assemble(tape: &mut Tape, objective: Objective, inp: &LossInputs<'_>) -> Result<LossBundle> {
    let need_target = || {
        inp.probs_t
            .ok_or_else(|| DadaError::invalid(format!("{objective} needs a target batch")))
    };
    if objective == Objective::SourceOnly {
        let ce = loss_cross_entropy(tape, inp.probs_s, inp.labels_s)?;
        return Ok(LossBundle {
            l_f: ce,
            l_g: None,
            components: BTreeMap::from([("loss_ce".to_string(), ce)]),
        });
    }
    if objective == Objective::DannCa {
        let pt = need_target()?;
        return loss_dann_ca(tape, inp.probs_s, inp.labels_s, pt, inp.lambda);
    }

    let mut comps = BTreeMap::new();
    let l_s = if objective == Objective::DadaP {
        let w = inp
            .weights
            .ok_or_else(|| DadaError::invalid("dada_p needs category weights"))?;
        loss_source_dada_p(tape, inp.probs_s, inp.labels_s, w)?
    } else {
        loss_source_dada(tape, inp.probs_s, inp.labels_s)?
    };
    comps.insert("loss_s".to_string(), l_s);

    let lambda = inp.lambda;
    let placement = inp.placement;
    let adversarial = |tape: &mut Tape, src: Var, tgt: Option<Var>| -> Result<Var> {
        match (placement, tgt) {
            (LambdaPlacement::Joint, Some(t)) => {
                let s = tape.add(src, t)?;
                tape.scale(s, lambda)
            }
            (LambdaPlacement::Joint, None) => tape.scale(src, lambda),
            (LambdaPlacement::TargetOnly, Some(t)) => {
                let w = tape.scale(t, lambda)?;
                tape.add(src, w)
            }
            (LambdaPlacement::TargetOnly, None) => tape.scale(src, 1.0),
        }
    };

    if objective == Objective::NoEmNoTd {
        let l_f = adversarial(tape, l_s, None)?;
        let l_g = adversarial(tape, l_s, None)?;
        return Ok(LossBundle {
            l_f,
            l_g: Some(l_g),
            components: comps,
        });
    }

    let pt = need_target()?;
    let l_tf = match objective {
        Objective::DadaO => {
            let q = inp
                .q
                .ok_or_else(|| DadaError::invalid("dada_o needs the leakage probability q"))?;
            loss_target_f_openset(tape, pt, q)?
        }
        _ => loss_target_f_dada(tape, pt)?,
    };
    let l_tg = match objective {
        Objective::DadaDc => loss_symmetric_dc(tape, pt)?,
        _ => loss_target_g_dada(tape, pt)?,
    };
    comps.insert("loss_t_f".to_string(), l_tf);
    comps.insert("loss_t_g".to_string(), l_tg);
    let mut l_f = adversarial(tape, l_s, Some(l_tf))?;
    let mut l_g = adversarial(tape, l_s, Some(l_tg))?;

    if objective != Objective::NoEm {
        let em = loss_entropy(tape, pt)?;
        comps.insert("loss_em".to_string(), em);
        // Partial-set variant minimizes the entropy over F instead.
        l_f = if objective == Objective::DadaP {
            tape.add(l_f, em)?
        } else {
            tape.sub(l_f, em)?
        };
        l_g = tape.sub(l_g, em)?;
    }
    Ok(LossBundle {
        l_f,
        l_g: Some(l_g),
        components: comps,
    })
}
