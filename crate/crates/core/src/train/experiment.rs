use serde::{Deserialize, Serialize};

use super::{least_squares_effect, metrics_on, split_nodes, train, TrainConfig, TrainError};
use crate::exec::Execution;
use crate::hypergraph::Hypergraph;
use crate::model::Variant;
use crate::simulate::{ContactStyle, SimConfig, SimDataset};

/// An estimator compared in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Model(Variant),
    LeastSquares,
    /// Returns the true effects; pins down the zero point of the metrics.
    Oracle,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Model(v) => v.label(),
            Method::LeastSquares => "least_squares",
            Method::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "least_squares" | "ols" | "lr" => Ok(Method::LeastSquares),
            "oracle" => Ok(Method::Oracle),
            other => other.parse::<Variant>().map(Method::Model),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.label().to_string()
    }
}

/// Metrics of one (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub param: Option<f64>,
    pub seed: u64,
    pub pehe_sqrt: f64,
    pub ate_err: f64,
}

/// Mean and standard error over seeds for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub param: Option<f64>,
    pub runs: usize,
    pub pehe_mean: f64,
    pub pehe_stderr: f64,
    pub ate_mean: f64,
    pub ate_stderr: f64,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    pub summary: Vec<MethodSummary>,
}

impl Comparison {
    fn from_runs(runs: Vec<RunResult>, methods: &[Method], param: Option<f64>) -> Self {
        let summary = methods
            .iter()
            .map(|&m| {
                let pehe: Vec<f64> = runs.iter().filter(|r| r.method == m).map(|r| r.pehe_sqrt).collect();
                let ate: Vec<f64> = runs.iter().filter(|r| r.method == m).map(|r| r.ate_err).collect();
                let (pehe_mean, pehe_stderr) = mean_stderr(&pehe);
                let (ate_mean, ate_stderr) = mean_stderr(&ate);
                MethodSummary {
                    method: m,
                    param,
                    runs: pehe.len(),
                    pehe_mean,
                    pehe_stderr,
                    ate_mean,
                    ate_stderr,
                }
            })
            .collect();
        Self { runs, summary }
    }

    pub fn summary_for(&self, m: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == m)
    }

    /// Mean √ε_PEHE of `m`.
    pub fn pehe_mean(&self, m: Method) -> Option<f64> {
        self.summary_for(m).map(|s| s.pehe_mean)
    }
}

/// Trains or fits `method` on `data` and scores it on the test split.
pub fn run_method(data: &SimDataset, method: Method, cfg: &TrainConfig) -> Result<RunResult, TrainError> {
    let (pehe_sqrt, ate_err) = match method {
        Method::Model(variant) => {
            let cfg = TrainConfig { variant, ..*cfg };
            let (_, report) = train(data, &cfg)?;
            (report.pehe_sqrt, report.ate_err)
        }
        Method::LeastSquares => {
            cfg.validate()?;
            let split = split_nodes(data.num_nodes(), cfg.split_ratios, cfg.seed);
            let tau_hat = least_squares_effect(&data.x, &data.t, &data.y, &split.train)?;
            metrics_on(&tau_hat, &data.tau, &split.test)?
        }
        Method::Oracle => {
            let split = split_nodes(data.num_nodes(), cfg.split_ratios, cfg.seed);
            metrics_on(&data.tau, &data.tau, &split.test)?
        }
    };
    Ok(RunResult {
        method,
        param: None,
        seed: cfg.seed,
        pehe_sqrt,
        ate_err,
    })
}

/// Runs every method on the dataset of every seed. Training and splitting
/// use the same seed as the dataset. Independent runs go through `exec`;
/// results come back in (seed, method) order.
pub fn run_comparison<G>(
    generate: G,
    methods: &[Method],
    seeds: &[u64],
    base: &TrainConfig,
    exec: Execution,
) -> Result<Comparison, TrainError>
where
    G: Fn(u64) -> Result<SimDataset, TrainError> + Sync,
{
    if seeds.len() < 2 {
        return Err(TrainError::InvalidConfig(format!("need at least 2 seeds, got {}", seeds.len())));
    }
    if methods.is_empty() {
        return Err(TrainError::InvalidConfig("no methods".into()));
    }
    base.validate()?;
    let datasets = exec
        .map(seeds, |&s| generate(s))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, Method)> = (0..seeds.len())
        .flat_map(|k| methods.iter().map(move |&m| (k, m)))
        .collect();
    let runs = exec
        .map(&jobs, |&(k, m)| {
            let cfg = TrainConfig { seed: seeds[k], ..*base };
            run_method(&datasets[k], m, &cfg)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Comparison::from_runs(runs, methods, None))
}

/// Generator, simulation and training settings of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub generator: ContactStyle,
    pub sim: SimConfig,
    pub train: TrainConfig,
    /// Hide hyperedges larger than this from the estimators. Outcomes are
    /// always simulated on the complete hypergraph.
    pub max_edge_size: Option<usize>,
}

impl Experiment {
    pub fn new(generator: ContactStyle, sim: SimConfig, train: TrainConfig) -> Self {
        Self {
            generator,
            sim,
            train,
            max_edge_size: None,
        }
    }

    pub fn dataset(&self, seed: u64) -> Result<SimDataset, TrainError> {
        let ds = self.generator.generate(&SimConfig { seed, ..self.sim })?;
        match self.max_edge_size {
            Some(k) => {
                let h: Hypergraph = ds.h.filter_by_edge_size(k);
                Ok(ds.with_hypergraph(h)?)
            }
            None => Ok(ds),
        }
    }

    pub fn compare(&self, methods: &[Method], seeds: &[u64], exec: Execution) -> Result<Comparison, TrainError> {
        run_comparison(|s| self.dataset(s), methods, seeds, &self.train, exec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Beta,
    K,
    Alpha,
    Dim,
    Heads,
    Lambda,
}

impl std::str::FromStr for SweepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "beta" => Ok(SweepKind::Beta),
            "k" => Ok(SweepKind::K),
            "alpha" => Ok(SweepKind::Alpha),
            "dim" => Ok(SweepKind::Dim),
            "heads" => Ok(SweepKind::Heads),
            "lambda" => Ok(SweepKind::Lambda),
            other => Err(format!("unknown sweep kind `{other}`")),
        }
    }
}

fn as_count(kind: SweepKind, v: f64) -> Result<usize, TrainError> {
    if v >= 1.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(TrainError::InvalidConfig(format!("{kind:?} sweep value {v} is not a positive integer")))
    }
}

impl SweepKind {
    /// `base` with this kind's parameter set to `v`.
    pub fn apply(self, base: &Experiment, v: f64) -> Result<Experiment, TrainError> {
        let mut e = *base;
        match self {
            SweepKind::Beta => e.sim.beta = v,
            SweepKind::K => e.max_edge_size = Some(as_count(self, v)?),
            SweepKind::Alpha => e.train.alpha = v,
            SweepKind::Dim => {
                let d = as_count(self, v)?;
                e.train.d_z = d;
                e.train.d_p = d;
            }
            SweepKind::Heads => e.train.attention_heads = as_count(self, v)?,
            SweepKind::Lambda => e.train.lambda = v,
        }
        e.sim.validate()?;
        e.train.validate()?;
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: f64,
    pub comparison: Comparison,
}

/// One comparison per grid value.
pub fn sweep(
    kind: SweepKind,
    grid: &[f64],
    base: &Experiment,
    methods: &[Method],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<SweepPoint>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::InvalidConfig("empty sweep grid".into()));
    }
    grid.iter()
        .map(|&v| {
            let exp = kind.apply(base, v)?;
            let mut comparison = exp.compare(methods, seeds, exec)?;
            for r in &mut comparison.runs {
                r.param = Some(v);
            }
            for s in &mut comparison.summary {
                s.param = Some(v);
            }
            Ok(SweepPoint { param: v, comparison })
        })
        .collect()
}

/// Mean absolute difference of two effect estimates, bucketed by
/// neighbourhood size (quantile bins) and treatment homophily (equal-width
/// bins on `[0, 1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyGrid {
    pub bins: usize,
    /// Lower neighbourhood-size bound of size bins `1..bins`.
    pub size_thresholds: Vec<usize>,
    /// `cells[size_bin][homophily_bin]`; `None` marks an empty cell.
    pub cells: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
    /// Cell of every node; `None` for isolated nodes.
    pub assignment: Vec<Option<(usize, usize)>>,
}

pub fn case_study_grid(
    h: &Hypergraph,
    t: &[f64],
    tau_a: &[f64],
    tau_b: &[f64],
    bins: usize,
) -> Result<CaseStudyGrid, TrainError> {
    let n = h.num_nodes();
    if t.len() != n || tau_a.len() != n || tau_b.len() != n {
        return Err(TrainError::SizeMismatch(tau_a.len(), n));
    }
    if bins == 0 {
        return Err(TrainError::InvalidConfig("bins must be >= 1".into()));
    }
    let sizes: Vec<usize> = (0..n).map(|i| h.neighborhood(i).map(|s| s.len()).unwrap_or(0)).collect();
    let mut sorted: Vec<usize> = sizes.iter().copied().filter(|&s| s > 0).collect();
    sorted.sort_unstable();
    let size_thresholds: Vec<usize> = if sorted.is_empty() {
        Vec::new()
    } else {
        (1..bins).map(|k| sorted[(k * sorted.len() / bins).min(sorted.len() - 1)]).collect()
    };

    let mut sums = vec![vec![0.0; bins]; bins];
    let mut counts = vec![vec![0usize; bins]; bins];
    let mut assignment = vec![None; n];
    for i in 0..n {
        if sizes[i] == 0 {
            continue;
        }
        let sb = size_thresholds.iter().filter(|&&q| sizes[i] >= q).count();
        let r = h.homophily_ratio(t, i).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let hb = ((r * bins as f64) as usize).min(bins - 1);
        sums[sb][hb] += (tau_a[i] - tau_b[i]).abs();
        counts[sb][hb] += 1;
        assignment[i] = Some((sb, hb));
    }
    let cells = sums
        .iter()
        .zip(&counts)
        .map(|(row, c)| {
            row.iter()
                .zip(c)
                .map(|(&s, &k)| (k > 0).then(|| s / k as f64))
                .collect()
        })
        .collect();
    Ok(CaseStudyGrid {
        bins,
        size_thresholds,
        cells,
        counts,
        assignment,
    })
}
