//! Feature extractor `G`, integrated (K+1)-way classifier `F`, and the
//! probability constructions derived from the classifier output.
//!
//! Output neurons `0..K` are categories; neuron `K` (the last one) is the
//! domain neuron, whose probability is read as "this instance is target".

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{DadaError, Result};

/// Lower bound used wherever a probability ends up in a denominator or a log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..=a))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Which side of the minimax a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature extractor `G`.
    Features,
    /// Integrated classifier `F`.
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DadaNetwork {
    /// Affine layers of `G`, each followed by ReLU.
    pub features: Vec<Linear>,
    /// Final affine map of `F` to `K + 1` logits.
    pub head: Linear,
    num_classes: usize,
}

/// Tape handles for every parameter, in [`DadaNetwork::params`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

/// Glorot-uniform weights, zero biases. `dims` lists the input width followed
/// by the hidden widths of `G`.
pub fn init_network(dims: &[usize], num_classes: usize, seed: u64) -> Result<DadaNetwork> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(DadaError::invalid("layer sizes must be non-empty and positive"));
    }
    if num_classes < 1 {
        return Err(DadaError::invalid("need at least one category"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = dims
        .windows(2)
        .map(|w| Linear::glorot(w[0], w[1], &mut rng))
        .collect();
    let head = Linear::glorot(*dims.last().unwrap(), num_classes + 1, &mut rng);
    Ok(DadaNetwork {
        features,
        head,
        num_classes,
    })
}

impl DadaNetwork {
    pub fn from_layers(features: Vec<Linear>, head: Linear, num_classes: usize) -> Result<Self> {
        let mut width = features.first().map_or(head.fan_in(), Linear::fan_in);
        for layer in features.iter().chain(std::iter::once(&head)) {
            if layer.fan_in() != width || layer.bias.shape() != [layer.fan_out()] {
                return Err(DadaError::invalid("inconsistent layer shapes"));
            }
            width = layer.fan_out();
        }
        if head.fan_out() != num_classes + 1 {
            return Err(DadaError::invalid(format!(
                "classifier must have K + 1 = {} outputs, has {}",
                num_classes + 1,
                head.fan_out()
            )));
        }
        Ok(DadaNetwork {
            features,
            head,
            num_classes,
        })
    }

    /// Number of task categories `K` (the classifier has `K + 1` outputs).
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().unwrap_or(&self.head).fan_in()
    }

    /// Every parameter with its name and minimax group.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.features.iter().enumerate() {
            out.push((format!("g{i}.weight"), ParamGroup::Features, &l.weight));
            out.push((format!("g{i}.bias"), ParamGroup::Features, &l.bias));
        }
        out.push(("f.weight".into(), ParamGroup::Classifier, &self.head.weight));
        out.push(("f.bias".into(), ParamGroup::Classifier, &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = Vec::new();
        for l in &mut self.features {
            out.push((ParamGroup::Features, &mut l.weight));
            out.push((ParamGroup::Features, &mut l.bias));
        }
        out.push((ParamGroup::Classifier, &mut self.head.weight));
        out.push((ParamGroup::Classifier, &mut self.head.bias));
        out
    }

    /// Records all parameters on `tape` as gradient-tracking leaves.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .params()
                .into_iter()
                .map(|(_, _, t)| tape.param(t.clone()))
                .collect(),
        }
    }

    /// Logits `o(x)` for a `[n, d]` input.
    pub fn logits_on_tape(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        let d = tape.value(x).shape().get(1).copied().unwrap_or(0);
        if tape.value(x).shape().len() != 2 || d != self.input_dim() {
            return Err(DadaError::ShapeMismatch {
                op: "network input",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let mut h = x;
        let mut vars = params.vars.chunks(2);
        for _ in &self.features {
            let wb = vars.next().expect("registered parameters");
            h = tape.matmul(h, wb[0])?;
            h = tape.add(h, wb[1])?;
            h = tape.relu(h)?;
        }
        let wb = vars.next().expect("registered parameters");
        let o = tape.matmul(h, wb[0])?;
        tape.add(o, wb[1])
    }

    /// Softmax probabilities `p(x)` for a `[n, d]` input, `[n, K + 1]`.
    pub fn probs_on_tape(&self, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        let o = self.logits_on_tape(tape, params, x)?;
        tape.softmax_rows(o)
    }

    /// Inference pass; no gradients are tracked.
    pub fn forward(&self, batch: &[Vec<f64>]) -> Result<Vec<ProbOutput>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(256) {
            let mut tape = Tape::new();
            let params = ParamVars {
                vars: self
                    .params()
                    .into_iter()
                    .map(|(_, _, t)| tape.constant(t.clone()))
                    .collect(),
            };
            let x = tape.constant(Tensor::from_rows(chunk)?);
            let o = self.logits_on_tape(&mut tape, &params, x)?;
            let logits = tape.value(o);
            for r in 0..chunk.len() {
                out.push(ProbOutput::from_logits(logits.row(r).to_vec()));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|e| DadaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DadaError::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    /// Plain-text checkpoint; see the README for the layout.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::from("dada-checkpoint 1\n");
        let _ = writeln!(s, "num_classes {}", self.num_classes);
        for (name, _, t) in self.params() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "tensor {name} {}", dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| DadaError::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, "dada-checkpoint 1")) => {}
            _ => return Err(perr(1, "not a version-1 dada checkpoint".into())),
        }
        let (ln, kline) = lines.next().ok_or_else(|| perr(2, "missing num_classes".into()))?;
        let num_classes: usize = kline
            .strip_prefix("num_classes ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(ln, format!("bad num_classes line {kline:?}")))?;

        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        while let Some((ln, head)) = lines.next() {
            if head.is_empty() {
                continue;
            }
            let mut parts = head.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(perr(ln, format!("expected tensor header, got {head:?}")));
            }
            let name = parts
                .next()
                .ok_or_else(|| perr(ln, "tensor without name".into()))?
                .to_string();
            let shape: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| perr(ln, format!("bad dimension {p:?}"))))
                .collect::<Result<_>>()?;
            let (vln, body) = lines
                .next()
                .ok_or_else(|| perr(ln + 1, format!("missing values for {name}")))?;
            let data: Vec<f64> = body
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| perr(vln, format!("bad value {v:?}"))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| perr(vln, e.to_string()))?;
            tensors.push((name, t));
        }

        let mut take = |name: &str| -> Result<Tensor> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| DadaError::invalid(format!("checkpoint lacks {name}")))?;
            Ok(tensors.remove(pos).1)
        };
        let n_features = text.lines().filter(|l| l.starts_with("tensor g") && l.contains(".weight")).count();
        let mut features = Vec::with_capacity(n_features);
        for i in 0..n_features {
            features.push(Linear {
                weight: take(&format!("g{i}.weight"))?,
                bias: take(&format!("g{i}.bias"))?,
            });
        }
        let head = Linear {
            weight: take("f.weight")?,
            bias: take("f.bias")?,
        };
        if let Some((extra, _)) = tensors.first() {
            return Err(DadaError::invalid(format!("unexpected tensor {extra}")));
        }
        DadaNetwork::from_layers(features, head, num_classes)
    }
}

/// Probabilities of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbOutput {
    /// Softmax over all `K + 1` outputs.
    pub p: Vec<f64>,
    /// Category probabilities renormalized without the domain neuron; the
    /// last entry is always 0.
    pub p_bar: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ProbOutput {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|o| (o - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
        // Softmax over the category logits alone; equal to p_k / (1 - p_{K+1})
        // without the cancellation when the domain output dominates.
        let k = logits.len() - 1;
        let cat_max = logits[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cat_exps: Vec<f64> = logits[..k].iter().map(|o| (o - cat_max).exp()).collect();
        let cat_total: f64 = cat_exps.iter().sum();
        let mut p_bar: Vec<f64> = cat_exps.iter().map(|e| e / cat_total).collect();
        p_bar.push(0.0);
        ProbOutput { p, p_bar, logits }
    }

    /// Builds the output directly from a probability vector (no logits).
    pub fn from_probs(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DadaError::invalid("probabilities must lie in [0, 1]"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DadaError::invalid(format!("probabilities sum to {total}")));
        }
        let p_bar = conditional_probs(&p);
        let logits = p.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
        Ok(ProbOutput { p, p_bar, logits })
    }

    pub fn num_classes(&self) -> usize {
        self.p.len() - 1
    }

    /// Probability of the domain neuron.
    pub fn domain_prob(&self) -> f64 {
        self.p[self.p.len() - 1]
    }
}

fn conditional_probs(p: &[f64]) -> Vec<f64> {
    let k = p.len() - 1;
    let denom = (1.0 - p[k]).max(PROB_EPS);
    let mut p_bar: Vec<f64> = p[..k].iter().map(|v| v / denom).collect();
    p_bar.push(0.0);
    p_bar
}

/// Domain prediction vector for category `k`: the pair `(p_k, p_{K+1})`
/// renormalized to sum to one, zeros elsewhere.
///
/// The second value reports whether the denominator had to be clamped.
pub fn domain_pred_vector(p: &ProbOutput, k: usize) -> Result<(Vec<f64>, bool)> {
    let kk = p.num_classes();
    if k >= kk {
        return Err(DadaError::invalid(format!("category {k} out of range 0..{kk}")));
    }
    let raw = p.p[k] + p.p[kk];
    let clamped = raw < PROB_EPS;
    let denom = raw.max(PROB_EPS);
    let mut v = vec![0.0; kk + 1];
    v[k] = p.p[k] / denom;
    v[kk] = p.p[kk] / denom;
    Ok((v, clamped))
}

/// Argmax over the category part of `p_bar`; ties go to the lowest index.
pub fn predict_category(p: &ProbOutput) -> usize {
    let k = p.num_classes();
    let mut best = 0;
    for i in 1..k {
        if p.p_bar[i] > p.p_bar[best] {
            best = i;
        }
    }
    best
}
