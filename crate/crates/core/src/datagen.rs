//! Synthetic domain-shift datasets and their CSV representation.
//!
//! Class indices are 0-based in memory (`0..K`). The CSV format stores them
//! 1-based, so label `K_source + 1` in an open-set file is the unknown class.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DadaError, Result};

/// Spacing between neighbouring cluster centres of the Gaussian grid.
pub const GRID_STEP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Closed,
    Partial,
    Open,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Closed => "closed",
            Scenario::Partial => "partial",
            Scenario::Open => "open",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub x: Vec<f64>,
    /// 0-based category. Target labels exist only for evaluation.
    pub y: Option<usize>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub source: Vec<LabeledInstance>,
    pub target: Vec<LabeledInstance>,
    pub k_source: usize,
    pub k_target: usize,
    pub scenario: Scenario,
}

/// What the trainer is allowed to see: source features with labels and
/// unlabeled target features.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub source_x: Vec<Vec<f64>>,
    pub source_y: Vec<usize>,
    pub target_x: Vec<Vec<f64>>,
    pub num_classes: usize,
    pub scenario: Scenario,
}

/// Held-out target labels, kept apart from [`TrainingData`].
#[derive(Debug, Clone)]
pub struct TargetLabels {
    pub labels: Vec<Option<usize>>,
}

impl TargetLabels {
    pub fn all_present(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }
}

impl DatasetPair {
    pub fn feature_dim(&self) -> usize {
        self.source.first().map_or(0, |i| i.x.len())
    }

    /// Category outputs of a network trained on this pair. Open-set pairs add
    /// one output for the unknown class.
    pub fn num_classes(&self) -> usize {
        match self.scenario {
            Scenario::Open => self.k_source + 1,
            _ => self.k_source,
        }
    }

    /// Index of the unknown class for open-set pairs.
    pub fn unknown_class(&self) -> Option<usize> {
        (self.scenario == Scenario::Open).then_some(self.k_source)
    }

    pub fn source_labels(&self) -> BTreeSet<usize> {
        self.source.iter().filter_map(|i| i.y).collect()
    }

    pub fn target_labels(&self) -> BTreeSet<usize> {
        self.target.iter().filter_map(|i| i.y).collect()
    }

    pub fn split(&self) -> (TrainingData, TargetLabels) {
        let train = TrainingData {
            source_x: self.source.iter().map(|i| i.x.clone()).collect(),
            source_y: self
                .source
                .iter()
                .map(|i| i.y.expect("validated source instance carries a label"))
                .collect(),
            target_x: self.target.iter().map(|i| i.x.clone()).collect(),
            num_classes: self.num_classes(),
            scenario: self.scenario,
        };
        let labels = TargetLabels {
            labels: self.target.iter().map(|i| i.y).collect(),
        };
        (train, labels)
    }

    /// Checks labels, dimensions and the label-space relation of the scenario.
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(DadaError::invalid("both domains need at least one instance"));
        }
        let d = self.feature_dim();
        for inst in self.source.iter().chain(&self.target) {
            if inst.x.len() != d {
                return Err(DadaError::invalid(format!(
                    "feature dimension {} differs from {d}",
                    inst.x.len()
                )));
            }
        }
        for inst in &self.source {
            match inst.y {
                None => return Err(DadaError::invalid("source instance without label")),
                Some(y) if y >= self.k_source => {
                    return Err(DadaError::invalid(format!(
                        "source label {} exceeds K_source = {}",
                        y + 1,
                        self.k_source
                    )))
                }
                _ => {}
            }
        }
        let s = self.source_labels();
        let t = self.target_labels();
        if t.is_empty() {
            return Ok(());
        }
        let ok = match self.scenario {
            Scenario::Closed => s == t,
            Scenario::Partial => t.is_subset(&s) && t.len() < s.len(),
            Scenario::Open => {
                s.is_subset(&t)
                    && t.difference(&s).all(|&y| y == self.k_source)
                    && t.contains(&self.k_source)
            }
        };
        if !ok {
            return Err(DadaError::Scenario(format!(
                "{} pair has source labels {:?} and target labels {:?}",
                self.scenario,
                one_based(&s),
                one_based(&t)
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical CSV serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(to_csv_string(self).as_bytes()))
    }
}

fn one_based(s: &BTreeSet<usize>) -> Vec<usize> {
    s.iter().map(|y| y + 1).collect()
}

fn check_seedable(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() || value < 0.0 {
        return Err(DadaError::invalid(format!("{name} must be finite and non-negative")));
    }
    Ok(())
}

fn moon_point(rng: &mut ChaCha8Rng, class: usize, t: f64, noise: &Normal<f64>) -> Vec<f64> {
    let (x, y) = if class == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    vec![x + noise.sample(rng), y + noise.sample(rng)]
}

/// Two interleaving half circles with arc positions evenly spaced over
/// `[0, pi]` and Gaussian jitter. The target domain is an independent draw
/// rotated by `rotation_deg` about the centroid `(0.5, 0.25)`.
pub fn make_two_moons(
    n_per_domain: usize,
    rotation_deg: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<DatasetPair> {
    if n_per_domain < 2 {
        return Err(DadaError::invalid("n_per_domain must be at least 2"));
    }
    if !(0.0..360.0).contains(&rotation_deg) {
        return Err(DadaError::invalid("rotation_deg must lie in [0, 360)"));
    }
    check_seedable("noise_sd", noise_sd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| DadaError::invalid(e.to_string()))?;
    let (cx, cy) = (0.5, 0.25);
    let (sin, cos) = rotation_deg.to_radians().sin_cos();

    let draw = |domain: Domain, rng: &mut ChaCha8Rng| -> Vec<LabeledInstance> {
        let first = n_per_domain.div_ceil(2);
        (0..n_per_domain)
            .map(|i| {
                let (class, j, n) = if i < first {
                    (0, i, first)
                } else {
                    (1, i - first, n_per_domain - first)
                };
                let t = if n > 1 {
                    std::f64::consts::PI * j as f64 / (n - 1) as f64
                } else {
                    0.0
                };
                let mut x = moon_point(rng, class, t, &noise);
                if domain == Domain::Target {
                    let (dx, dy) = (x[0] - cx, x[1] - cy);
                    x = vec![cx + cos * dx - sin * dy, cy + sin * dx + cos * dy];
                }
                LabeledInstance {
                    x,
                    y: Some(class),
                    domain,
                }
            })
            .collect()
    };
    let source = draw(Domain::Source, &mut rng);
    let target = draw(Domain::Target, &mut rng);
    Ok(DatasetPair {
        source,
        target,
        k_source: 2,
        k_target: 2,
        scenario: Scenario::Closed,
    })
}

/// Centre of class `c` on a grid with `ceil(sqrt(K))` columns.
pub fn grid_center(k: usize, c: usize) -> [f64; 2] {
    let cols = (k as f64).sqrt().ceil() as usize;
    [(c % cols) as f64 * GRID_STEP, (c / cols) as f64 * GRID_STEP]
}

/// Grid of `k` isotropic Gaussian clusters with explicit per-class counts.
pub fn make_gaussian_grid_counts(
    k: usize,
    source_counts: &[usize],
    target_counts: &[usize],
    shift: [f64; 2],
    spread: f64,
    seed: u64,
) -> Result<DatasetPair> {
    if k < 2 {
        return Err(DadaError::invalid("the grid needs K >= 2 categories"));
    }
    if source_counts.len() != k || target_counts.len() != k {
        return Err(DadaError::invalid("one count per category is required"));
    }
    check_seedable("spread", spread)?;
    if !shift.iter().all(|v| v.is_finite()) {
        return Err(DadaError::invalid("shift must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).map_err(|e| DadaError::invalid(e.to_string()))?;
    let mut draw = |domain: Domain, counts: &[usize], offset: [f64; 2]| {
        let mut out = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            let [mx, my] = grid_center(k, c);
            for _ in 0..n {
                out.push(LabeledInstance {
                    x: vec![
                        mx + offset[0] + noise.sample(&mut rng),
                        my + offset[1] + noise.sample(&mut rng),
                    ],
                    y: Some(c),
                    domain,
                });
            }
        }
        out
    };
    let source = draw(Domain::Source, source_counts, [0.0, 0.0]);
    let target = draw(Domain::Target, target_counts, shift);
    if source.is_empty() || target.is_empty() {
        return Err(DadaError::invalid("counts must produce instances in both domains"));
    }
    Ok(DatasetPair {
        source,
        target,
        k_source: k,
        k_target: k,
        scenario: Scenario::Closed,
    })
}

/// `k` Gaussian clusters on a square grid (step [`GRID_STEP`]); the target
/// domain is the same grid translated by `shift`.
pub fn make_gaussian_grid(
    k: usize,
    n_per_class: usize,
    shift: [f64; 2],
    spread: f64,
    seed: u64,
) -> Result<DatasetPair> {
    if n_per_class == 0 {
        return Err(DadaError::invalid("n_per_class must be positive"));
    }
    let counts = vec![n_per_class; k];
    make_gaussian_grid_counts(k, &counts, &counts, shift, spread, seed)
}

/// Open-set grid: `known` shared clusters plus one unknown cluster that only
/// the target domain contains. `unknown_ratio` is the number of unknown
/// target instances per known target instance (1.0 gives 1:1).
pub fn make_open_set_grid(
    known: usize,
    n_per_class: usize,
    unknown_ratio: f64,
    shift: [f64; 2],
    spread: f64,
    seed: u64,
) -> Result<DatasetPair> {
    if known < 1 || n_per_class == 0 {
        return Err(DadaError::invalid("need at least one known class and one instance per class"));
    }
    if !(unknown_ratio > 0.0) || !unknown_ratio.is_finite() {
        return Err(DadaError::invalid("unknown_ratio must be positive"));
    }
    let k = known + 1;
    let mut source_counts = vec![n_per_class; k];
    source_counts[known] = 0;
    let mut target_counts = vec![n_per_class; k];
    target_counts[known] = ((known * n_per_class) as f64 * unknown_ratio).round().max(1.0) as usize;
    let pair = make_gaussian_grid_counts(k, &source_counts, &target_counts, shift, spread, seed)?;
    restrict_label_space(&pair, LabelRestriction::Source((0..known).collect()))
}

/// Which side of a closed pair keeps only a subset of categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelRestriction {
    /// Partial: target keeps these categories.
    Target(BTreeSet<usize>),
    /// Open: source keeps these categories; other target instances become
    /// the unknown class.
    Source(BTreeSet<usize>),
}

/// Derives a partial or open pair from a closed one.
///
/// For open pairs the kept categories are renumbered `0..m` in ascending
/// order and the unknown class is `m`.
pub fn restrict_label_space(pair: &DatasetPair, restriction: LabelRestriction) -> Result<DatasetPair> {
    if pair.scenario != Scenario::Closed {
        return Err(DadaError::invalid("label restriction applies to closed pairs"));
    }
    let source_set: BTreeSet<usize> = (0..pair.k_source).collect();
    let (subset, is_target) = match &restriction {
        LabelRestriction::Target(s) => (s, true),
        LabelRestriction::Source(s) => (s, false),
    };
    if subset.is_empty() {
        return Err(DadaError::invalid("label subset is empty"));
    }
    if !subset.is_subset(&source_set) {
        return Err(DadaError::invalid(format!(
            "labels {:?} are not a subset of 1..={}",
            one_based(subset),
            pair.k_source
        )));
    }
    if subset.len() == pair.k_source {
        return Ok(pair.clone());
    }
    if is_target {
        if pair.target.iter().any(|i| i.y.is_none()) {
            return Err(DadaError::invalid("partial restriction needs labeled target instances"));
        }
        let target = pair
            .target
            .iter()
            .filter(|i| subset.contains(&i.y.unwrap()))
            .cloned()
            .collect();
        Ok(DatasetPair {
            source: pair.source.clone(),
            target,
            k_source: pair.k_source,
            k_target: subset.len(),
            scenario: Scenario::Partial,
        })
    } else {
        let m = subset.len();
        let remap = |y: usize| subset.iter().position(|&s| s == y);
        let source = pair
            .source
            .iter()
            .filter_map(|i| {
                let y = remap(i.y?)?;
                Some(LabeledInstance {
                    y: Some(y),
                    ..i.clone()
                })
            })
            .collect();
        let target = pair
            .target
            .iter()
            .map(|i| LabeledInstance {
                y: i.y.map(|y| remap(y).unwrap_or(m)),
                ..i.clone()
            })
            .collect();
        Ok(DatasetPair {
            source,
            target,
            k_source: m,
            k_target: m + 1,
            scenario: Scenario::Open,
        })
    }
}

fn write_rows(out: &mut String, rows: &[LabeledInstance]) {
    for inst in rows {
        for v in &inst.x {
            let _ = write!(out, "{v},");
        }
        if let Some(y) = inst.y {
            let _ = write!(out, "{}", y + 1);
        }
        out.push_str(match inst.domain {
            Domain::Source => ",s\n",
            Domain::Target => ",t\n",
        });
    }
}

fn header(d: usize) -> String {
    let mut h: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    h.push("label".into());
    h.push("domain".into());
    h.join(",") + "\n"
}

/// Source rows followed by target rows, floats in shortest round-trip form.
pub fn to_csv_string(pair: &DatasetPair) -> String {
    let mut out = header(pair.feature_dim());
    write_rows(&mut out, &pair.source);
    write_rows(&mut out, &pair.target);
    out
}

/// Rows of one domain only, in the same format.
pub fn domain_csv_string(pair: &DatasetPair, domain: Domain) -> String {
    let mut out = header(pair.feature_dim());
    match domain {
        Domain::Source => write_rows(&mut out, &pair.source),
        Domain::Target => write_rows(&mut out, &pair.target),
    }
    out
}

pub fn save_csv(pair: &DatasetPair, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv_string(pair)).map_err(|e| DadaError::io(path, e))
}

fn parse_rows(text: &str, rows: &mut Vec<LabeledInstance>) -> Result<()> {
    let mut lines = text.lines().enumerate();
    let Some((_, head)) = lines.next() else {
        return Ok(());
    };
    let cols: Vec<&str> = head.split(',').map(str::trim).collect();
    let d = cols.len().saturating_sub(2);
    let expected: Vec<String> = header(d).trim_end().split(',').map(String::from).collect();
    if cols.len() < 3 || cols != expected {
        return Err(DadaError::Parse {
            line: 1,
            msg: format!("expected header x1,...,xd,label,domain, got {head:?}"),
        });
    }
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(DadaError::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", d + 2, fields.len()),
            });
        }
        let mut x = Vec::with_capacity(d);
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| DadaError::Parse {
                line: line_no,
                msg: format!("non-numeric feature {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(DadaError::Parse {
                    line: line_no,
                    msg: format!("non-finite feature {f:?}"),
                });
            }
            x.push(v);
        }
        let y = match fields[d] {
            "" => None,
            s => {
                let v: usize = s.parse().map_err(|_| DadaError::Parse {
                    line: line_no,
                    msg: format!("label {s:?} is not a positive integer"),
                })?;
                if v == 0 {
                    return Err(DadaError::Parse {
                        line: line_no,
                        msg: "labels start at 1".into(),
                    });
                }
                Some(v - 1)
            }
        };
        let domain = match fields[d + 1] {
            "s" => Domain::Source,
            "t" => Domain::Target,
            other => {
                return Err(DadaError::Parse {
                    line: line_no,
                    msg: format!("domain must be s or t, got {other:?}"),
                })
            }
        };
        if domain == Domain::Source && y.is_none() {
            return Err(DadaError::Parse {
                line: line_no,
                msg: "source rows need a label".into(),
            });
        }
        rows.push(LabeledInstance { x, y, domain });
    }
    Ok(())
}

/// Parses CSV text and infers the scenario from the two label sets.
pub fn from_csv_str(texts: &[&str]) -> Result<DatasetPair> {
    let mut rows = Vec::new();
    for text in texts {
        parse_rows(text, &mut rows)?;
    }
    if rows.is_empty() {
        return Err(DadaError::Parse {
            line: 1,
            msg: "no instances".into(),
        });
    }
    let (source, target): (Vec<_>, Vec<_>) = rows.into_iter().partition(|i| i.domain == Domain::Source);
    if source.is_empty() || target.is_empty() {
        return Err(DadaError::invalid("file must contain both source and target rows"));
    }
    let s: BTreeSet<usize> = source.iter().filter_map(|i| i.y).collect();
    let t: BTreeSet<usize> = target.iter().filter_map(|i| i.y).collect();
    let k_source = s.iter().max().unwrap() + 1;
    let (scenario, k_target) = if t.is_empty() || t == s {
        (Scenario::Closed, k_source)
    } else if t.is_subset(&s) {
        (Scenario::Partial, t.len())
    } else if s.is_subset(&t) && t.difference(&s).all(|&y| y == k_source) {
        (Scenario::Open, k_source + 1)
    } else {
        return Err(DadaError::Scenario(format!(
            "cannot relate source labels {:?} to target labels {:?}",
            one_based(&s),
            one_based(&t)
        )));
    };
    let pair = DatasetPair {
        source,
        target,
        k_source,
        k_target,
        scenario,
    };
    pair.validate()?;
    Ok(pair)
}

/// Loads a combined CSV file, or a directory holding `source.csv` and
/// `target.csv`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<DatasetPair> {
    let path = path.as_ref();
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| DadaError::io(p, e));
    if path.is_dir() {
        let s = read(&path.join("source.csv"))?;
        let t = read(&path.join("target.csv"))?;
        from_csv_str(&[&s, &t])
    } else {
        from_csv_str(&[&read(path)?])
    }
}

/// A serializable recipe for one of the synthetic benchmarks. Generation is
/// a pure function of the recipe and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    TwoMoons {
        n_per_domain: usize,
        rotation_deg: f64,
        noise_sd: f64,
    },
    Grid {
        k: usize,
        n_per_class: usize,
        shift: [f64; 2],
        spread: f64,
        /// 1-based categories kept in the target domain (partial pairs).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        restrict_target: Option<Vec<usize>>,
        /// 1-based categories kept in the source domain (open pairs).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        restrict_source: Option<Vec<usize>>,
    },
    OpenGrid {
        known: usize,
        n_per_class: usize,
        unknown_ratio: f64,
        shift: [f64; 2],
        spread: f64,
    },
}

impl DataSpec {
    pub fn generate(&self, seed: u64) -> Result<DatasetPair> {
        match self {
            DataSpec::TwoMoons {
                n_per_domain,
                rotation_deg,
                noise_sd,
            } => make_two_moons(*n_per_domain, *rotation_deg, *noise_sd, seed),
            DataSpec::Grid {
                k,
                n_per_class,
                shift,
                spread,
                restrict_target,
                restrict_source,
            } => {
                let pair = make_gaussian_grid(*k, *n_per_class, *shift, *spread, seed)?;
                let zero_based = |v: &[usize]| -> Result<BTreeSet<usize>> {
                    v.iter()
                        .map(|&c| {
                            c.checked_sub(1)
                                .ok_or_else(|| DadaError::invalid("categories are numbered from 1"))
                        })
                        .collect()
                };
                match (restrict_target, restrict_source) {
                    (Some(_), Some(_)) => Err(DadaError::invalid(
                        "restrict either the target or the source label space, not both",
                    )),
                    (Some(t), None) => restrict_label_space(&pair, LabelRestriction::Target(zero_based(t)?)),
                    (None, Some(s)) => restrict_label_space(&pair, LabelRestriction::Source(zero_based(s)?)),
                    (None, None) => Ok(pair),
                }
            }
            DataSpec::OpenGrid {
                known,
                n_per_class,
                unknown_ratio,
                shift,
                spread,
            } => make_open_set_grid(*known, *n_per_class, *unknown_ratio, *shift, *spread, seed),
        }
    }
}
