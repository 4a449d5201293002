//! Metrics, evaluation reports and seed sweeps.
//!
//! Target labels only enter through [`TargetMonitor`] and [`evaluate`]; the
//! trainer sees metric values, never labels.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{DataSpec, DatasetPair, Scenario};
use crate::error::{DadaError, Result};
use crate::model::{predict_category, DadaNetwork, ProbOutput};
use crate::trainer::{train, EpochMonitor, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Cls,
    Adv,
    Eval,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Cls => "cls",
            Phase::Adv => "adv",
            Phase::Eval => "eval",
        })
    }
}

/// Metric names outside the `loss_*` and `cat_weight_*` families.
pub const METRIC_NAMES: [&str; 10] = [
    "acc_source",
    "acc_target",
    "acc_target_class_mean",
    "os",
    "os_star",
    "unk_recall",
    "cond_fail_rate",
    "avg_true_prob",
    "lambda",
    "lr",
];

pub fn is_known_metric(name: &str) -> bool {
    METRIC_NAMES.contains(&name)
        || name.strip_prefix("loss_").is_some_and(|s| !s.is_empty())
        || name
            .strip_prefix("cat_weight_")
            .is_some_and(|s| s.parse::<usize>().is_ok())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
    pub name: String,
    pub value: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,phase,name,value";

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        format!("{},{},{},{},{:?}", self.step, self.epoch, self.phase, self.name, self.value)
    }
}

/// Metrics log text: a header line and one record per line. Values use the
/// shortest representation that round-trips exactly.
pub fn metrics_log(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

impl std::str::FromStr for Phase {
    type Err = DadaError;

    fn from_str(s: &str) -> Result<Self> {
        [Phase::Pretrain, Phase::Cls, Phase::Adv, Phase::Eval]
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| DadaError::invalid(format!("unknown phase {s:?}")))
    }
}

/// Inverse of [`metrics_log`].
pub fn parse_metrics_log(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => {
            return Err(DadaError::Parse {
                line: 1,
                msg: format!("expected header {METRICS_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let err = |msg: String| DadaError::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        out.push(MetricsRecord {
            step: f[0].parse().map_err(|e| err(format!("step: {e}")))?,
            epoch: f[1].parse().map_err(|e| err(format!("epoch: {e}")))?,
            phase: f[2].parse().map_err(|e: DadaError| err(e.to_string()))?,
            name: f[3].to_string(),
            value: f[4].parse().map_err(|e| err(format!("value: {e}")))?,
        });
    }
    Ok(out)
}

fn check_pairs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(DadaError::invalid("no predictions to score"));
    }
    if preds.len() != labels.len() {
        return Err(DadaError::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Class-conditional accuracies; `None` for classes without instances.
pub fn per_class_accuracy(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Option<f64>>> {
    check_pairs(preds, labels)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(DadaError::invalid(format!("label {bad} outside 0..{k}")));
    }
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect())
}

/// Mean over defined entries, `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenSetMetrics {
    /// Per-class mean including the unknown class.
    pub os: f64,
    /// Per-class mean over known classes.
    pub os_star: f64,
    pub unk_recall: Option<f64>,
    /// False when no unknown instances were present and `os` fell back to
    /// `os_star`.
    pub unknown_present: bool,
}

/// Open-set scores for `k` classes where class `k - 1` is unknown.
pub fn open_set_metrics(preds: &[usize], labels: &[usize], k: usize) -> Result<OpenSetMetrics> {
    if k < 2 {
        return Err(DadaError::invalid("open-set scoring needs a known and an unknown class"));
    }
    let per_class = per_class_accuracy(preds, labels, k)?;
    let os_star = mean_defined(&per_class[..k - 1])
        .ok_or_else(|| DadaError::invalid("no instances of known classes"))?;
    let unk_recall = per_class[k - 1];
    let os = match unk_recall {
        Some(_) => mean_defined(&per_class).expect("known classes are populated"),
        None => {
            log::warn!("no unknown instances present; OS falls back to OS*");
            os_star
        }
    };
    Ok(OpenSetMetrics {
        os,
        os_star,
        unk_recall,
        unknown_present: unk_recall.is_some(),
    })
}

/// Mean conditional probability of the true category.
pub fn avg_true_class_prob(net: &DadaNetwork, x: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if x.is_empty() || x.len() != labels.len() {
        return Err(DadaError::invalid("need one label per instance and at least one instance"));
    }
    let outs = net.forward(x)?;
    avg_true_prob_of(&outs, labels)
}

fn avg_true_prob_of(outs: &[ProbOutput], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (o, &y) in outs.iter().zip(labels) {
        total += *o
            .p_bar
            .get(y)
            .ok_or_else(|| DadaError::invalid(format!("label {y} outside the network's categories")))?;
    }
    Ok(total / labels.len() as f64)
}

/// Fraction of instances whose true-category probability (full `K + 1`
/// output) is at most `threshold`.
pub fn condition_failure_rate(net: &DadaNetwork, x: &[Vec<f64>], labels: &[usize], threshold: f64) -> Result<f64> {
    if x.is_empty() || x.len() != labels.len() {
        return Err(DadaError::invalid("need one label per instance and at least one instance"));
    }
    let outs = net.forward(x)?;
    let fails = outs.iter().zip(labels).filter(|(o, &y)| o.p[y] <= threshold).count();
    Ok(fails as f64 / labels.len() as f64)
}

pub fn predictions(outs: &[ProbOutput]) -> Vec<usize> {
    outs.iter().map(predict_category).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub num_instances: usize,
    pub overall: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub class_mean: f64,
    /// `confusion[true][predicted]` over the network's categories.
    pub confusion: Vec<Vec<usize>>,
    pub avg_true_prob: f64,
    pub open_set: Option<OpenSetMetrics>,
}

/// Scores `net` on labeled instances. Unlabeled instances are skipped.
pub fn evaluate(net: &DadaNetwork, x: &[Vec<f64>], labels: &[Option<usize>], scenario: Scenario) -> Result<EvalReport> {
    if x.len() != labels.len() {
        return Err(DadaError::invalid("need one label slot per instance"));
    }
    let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = x
        .iter()
        .zip(labels)
        .filter_map(|(xi, yi)| yi.map(|y| (xi.clone(), y)))
        .unzip();
    if xs.is_empty() {
        return Err(DadaError::invalid("no labeled instances to evaluate"));
    }
    let k = net.num_classes();
    let outs = net.forward(&xs)?;
    let preds = predictions(&outs);
    let per_class_acc = per_class_accuracy(&preds, &ys, k)?;
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in preds.iter().zip(&ys) {
        confusion[y][p] += 1;
    }
    let open_set = match scenario {
        Scenario::Open => Some(open_set_metrics(&preds, &ys, k)?),
        _ => None,
    };
    Ok(EvalReport {
        scenario,
        num_instances: ys.len(),
        overall: accuracy(&preds, &ys)?,
        class_mean: mean_defined(&per_class_acc).expect("at least one class is populated"),
        per_class_acc,
        confusion,
        avg_true_prob: avg_true_prob_of(&outs, &ys)?,
        open_set,
    })
}

impl EvalReport {
    /// Flat `(name, value)` pairs in metric-vocabulary terms.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("acc_target".to_string(), self.overall),
            ("acc_target_class_mean".to_string(), self.class_mean),
            ("avg_true_prob".to_string(), self.avg_true_prob),
        ];
        if let Some(o) = &self.open_set {
            out.push(("os".into(), o.os));
            out.push(("os_star".into(), o.os_star));
            if let Some(u) = o.unk_recall {
                out.push(("unk_recall".into(), u));
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario       {}", self.scenario);
        let _ = writeln!(s, "instances      {}", self.num_instances);
        let _ = writeln!(s, "accuracy       {:.4}", self.overall);
        let _ = writeln!(s, "class mean     {:.4}", self.class_mean);
        let _ = writeln!(s, "avg true prob  {:.4}", self.avg_true_prob);
        if let Some(o) = &self.open_set {
            let _ = writeln!(s, "OS             {:.4}", o.os);
            let _ = writeln!(s, "OS*            {:.4}", o.os_star);
            match o.unk_recall {
                Some(u) => {
                    let _ = writeln!(s, "unk recall     {u:.4}");
                }
                None => {
                    let _ = writeln!(s, "unk recall     n/a (no unknown instances; OS = OS*)");
                }
            }
        }
        let _ = writeln!(s, "\nclass  accuracy");
        for (c, a) in self.per_class_acc.iter().enumerate() {
            match a {
                Some(a) => {
                    let _ = writeln!(s, "{:>5}  {a:.4}", c + 1);
                }
                None => {
                    let _ = writeln!(s, "{:>5}  undefined", c + 1);
                }
            }
        }
        let _ = writeln!(s, "\nconfusion (rows true, columns predicted)");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            let _ = writeln!(s, "{}", cells.join(""));
        }
        s
    }

    /// One JSON object per metric.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for (name, value) in self.metrics() {
            s.push_str(&serde_json::to_string(&serde_json::json!({ "name": name, "value": value }))?);
            s.push('\n');
        }
        for (c, a) in self.per_class_acc.iter().enumerate() {
            let rec = serde_json::json!({ "name": "class_acc", "class": c + 1, "value": a });
            s.push_str(&serde_json::to_string(&rec)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Per-epoch target evaluation. Holds the labels the trainer must not see.
#[derive(Debug, Clone)]
pub struct TargetMonitor {
    x: Vec<Vec<f64>>,
    labels: Vec<Option<usize>>,
    scenario: Scenario,
}

impl TargetMonitor {
    pub fn new(pair: &DatasetPair) -> Self {
        TargetMonitor {
            x: pair.target.iter().map(|i| i.x.clone()).collect(),
            labels: pair.target.iter().map(|i| i.y).collect(),
            scenario: pair.scenario,
        }
    }

    pub fn report(&self, net: &DadaNetwork) -> Result<EvalReport> {
        evaluate(net, &self.x, &self.labels, self.scenario)
    }
}

impl EpochMonitor for TargetMonitor {
    fn evaluate(&self, net: &DadaNetwork) -> Result<Vec<(String, f64)>> {
        if self.labels.iter().all(Option::is_none) {
            return Ok(Vec::new());
        }
        Ok(self.report(net)?.metrics())
    }
}

/// Final scores of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub report: EvalReport,
    pub cond_fail_rate: f64,
    pub category_weights: Option<Vec<f64>>,
}

impl RunResult {
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut m = self.report.metrics();
        m.push(("cond_fail_rate".into(), self.cond_fail_rate));
        if let Some(w) = &self.category_weights {
            for (k, v) in w.iter().enumerate() {
                m.push((format!("cat_weight_{}", k + 1), *v));
            }
        }
        m
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics().into_iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

/// Generates data for `seed`, trains with `config.seed = seed` and scores
/// the final network on the target domain.
pub fn run_once(config: &TrainConfig, data: &DataSpec, seed: u64) -> Result<RunResult> {
    let pair = data.generate(seed)?;
    let mut cfg = config.clone();
    cfg.seed = seed;
    let (train_data, _) = pair.split();
    let monitor = TargetMonitor::new(&pair);
    let outcome = train(&cfg, &train_data, None)?;
    let report = monitor.report(&outcome.state.net)?;
    let cond_fail_rate = condition_failure_rate(
        &outcome.state.net,
        &train_data.source_x,
        &train_data.source_y,
        cfg.condition_threshold,
    )?;
    Ok(RunResult {
        seed,
        report,
        cond_fail_rate,
        category_weights: outcome.state.category_weights.map(|w| w.c),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    /// Row label, typically the swept knob's value.
    pub label: String,
    /// Numeric knob value for plot data; defaults to the row index.
    #[serde(default)]
    pub x: Option<f64>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub data: DataSpec,
    pub seeds: Vec<u64>,
    pub entries: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub x: f64,
    pub metrics: Vec<MetricSummary>,
    pub runs: Vec<RunResult>,
}

impl SweepRow {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.get(name).map(|m| m.mean)
    }
}

/// Population standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(label: String, x: f64, runs: Vec<RunResult>) -> SweepRow {
    let mut names: Vec<String> = Vec::new();
    for r in &runs {
        for (n, _) in r.metrics() {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    let metrics = names
        .into_iter()
        .filter_map(|name| {
            let values: Vec<f64> = runs.iter().filter_map(|r| r.metric(&name)).collect();
            // Metrics missing from some runs (e.g. no unknown instances) are
            // summarized over the runs that define them.
            (!values.is_empty()).then(|| {
                let (mean, std) = mean_std(&values);
                MetricSummary { name, mean, std, values }
            })
        })
        .collect();
    SweepRow { label, x, metrics, runs }
}

/// Runs every entry over every seed. Jobs run on worker threads; results are
/// merged in entry and seed order, so the output does not depend on the
/// number of workers.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if spec.seeds.is_empty() {
        return Err(DadaError::invalid("a sweep needs at least one seed"));
    }
    if spec.entries.is_empty() {
        return Err(DadaError::invalid("a sweep needs at least one entry"));
    }
    for e in &spec.entries {
        e.config.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..spec.entries.len())
        .flat_map(|i| spec.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = run_jobs(&jobs, |&(i, seed)| run_once(&spec.entries[i].config, &spec.data, seed))?;
    let mut rows = Vec::new();
    let mut it = results.into_iter();
    for (i, e) in spec.entries.iter().enumerate() {
        let runs: Vec<RunResult> = it.by_ref().take(spec.seeds.len()).collect();
        rows.push(summarize(e.label.clone(), e.x.unwrap_or(i as f64), runs));
    }
    Ok(rows)
}

/// Maps `f` over `jobs` on a bounded pool of scoped threads, preserving order.
pub fn run_jobs<J, T, F>(jobs: &[J], f: F) -> Result<Vec<T>>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> Result<T> + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..jobs.len()).map(|_| None).collect();
    let collected = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                collected.lock().expect("no worker panicked while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every job ran"))
        .collect()
}

/// Aligned plain-text table: one row per entry, `mean±std` per metric.
pub fn sweep_table(rows: &[SweepRow], metrics: &[&str]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}", "entry");
    for m in metrics {
        let _ = write!(s, "  {m:>22}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<width$}", r.label);
        for m in metrics {
            match r.get(m) {
                Some(v) => {
                    let cell = format!("{:.4}±{:.4}", v.mean, v.std);
                    let _ = write!(s, "  {cell:>22}");
                }
                None => {
                    let _ = write!(s, "  {:>22}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn sweep_jsonl(rows: &[SweepRow]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        for m in &r.metrics {
            let rec = serde_json::json!({
                "entry": r.label,
                "x": r.x,
                "name": m.name,
                "mean": m.mean,
                "std": m.std,
                "values": m.values,
            });
            s.push_str(&serde_json::to_string(&rec)?);
            s.push('\n');
        }
    }
    Ok(s)
}

/// Two-column `x y` curve of one metric's means.
pub fn sweep_plot_data(rows: &[SweepRow], metric: &str) -> String {
    let mut s = String::new();
    for r in rows {
        if let Some(m) = r.mean(metric) {
            let _ = writeln!(s, "{:?} {:?}", r.x, m);
        }
    }
    s
}

/// Two-column `epoch value` curve of one metric from a metrics log.
pub fn history_plot_data(records: &[MetricsRecord], metric: &str) -> String {
    let mut s = String::new();
    for r in records.iter().filter(|r| r.name == metric) {
        let _ = writeln!(s, "{} {:?}", r.epoch, r.value);
    }
    s
}
