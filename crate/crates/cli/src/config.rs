use std::path::{Path, PathBuf};

use hypersci::exec::Execution;
use hypersci::simulate::ContactStyle;
use hypersci::train::{Experiment, Method, SweepKind};
use hypersci::{SimConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaseStudySpec {
    pub bins: usize,
    /// The two estimators whose effects are compared, `a - b`.
    pub methods: [Variant; 2],
}

impl Default for CaseStudySpec {
    fn default() -> Self {
        Self {
            bins: 6,
            methods: [Variant::Full, Variant::GraphConv],
        }
    }
}

/// Everything one invocation needs. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides `sim.seed` and `train.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Dataset directory written by `simulate`; generated from
    /// `generator` + `sim` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub methods: Vec<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub num_seeds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_edge_size: Option<usize>,
    pub execution: Execution,
    pub generator: ContactStyle,
    pub sim: SimConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    pub case_study: CaseStudySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: None,
            dataset: None,
            checkpoint: None,
            methods: vec![
                Method::Model(Variant::Full),
                Method::Model(Variant::GraphConv),
                Method::LeastSquares,
            ],
            seeds: None,
            num_seeds: 5,
            max_edge_size: None,
            execution: Execution::Parallel,
            generator: ContactStyle::default(),
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            sweep: None,
            case_study: CaseStudySpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies the command-line seed and pins every seed field to one value.
    /// An explicit seed list is shifted so that it starts at the override.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Self {
        let seed = seed_override.or(self.seed).unwrap_or(self.sim.seed);
        if let (Some(s), Some(list)) = (seed_override, self.seeds.as_mut()) {
            let len = list.len() as u64;
            *list = (s..s + len).collect();
        }
        self.seed = Some(seed);
        self.sim.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn resolved_seed(&self) -> u64 {
        self.seed.unwrap_or(self.sim.seed)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(list) => list.clone(),
            None => {
                let s = self.resolved_seed();
                (s..s + self.num_seeds as u64).collect()
            }
        }
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            max_edge_size: self.max_edge_size,
            ..Experiment::new(self.generator, self.sim, self.train)
        }
    }

    /// Checks the parts every command uses.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.sim.validate().map_err(|e| cfg(&e))?;
        self.generator.validate().map_err(|e| cfg(&e))?;
        self.train.validate().map_err(|e| cfg(&e))?;
        self.train.model_config(self.sim.d).validate().map_err(|e| cfg(&e))?;
        if self.max_edge_size == Some(0) || self.max_edge_size == Some(1) {
            return Err(CliError::Config("max_edge_size must be >= 2".into()));
        }
        if self.case_study.bins == 0 {
            return Err(CliError::Config("case_study.bins must be >= 1".into()));
        }
        Ok(())
    }

    /// Extra checks for commands that repeat runs over seeds.
    pub fn validate_multi(&self) -> Result<(), CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Config("methods is empty".into()));
        }
        let seeds = self.seed_list();
        if seeds.len() < 2 {
            return Err(CliError::Config(format!("need at least 2 seeds, got {}", seeds.len())));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(CliError::Config("seeds contain duplicates".into()));
        }
        Ok(())
    }

    pub fn validate_sweep(&self) -> Result<&SweepSpec, CliError> {
        let spec = self
            .sweep
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [sweep] table".into()))?;
        if spec.values.is_empty() {
            return Err(CliError::Config("sweep.values is empty".into()));
        }
        let base = self.experiment();
        for &v in &spec.values {
            spec.kind
                .apply(&base, v)
                .map_err(|e| CliError::Config(format!("sweep value {v}: {e}")))?;
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_key_names_parse() {
        let text = r#"
            [sim]
            setting = "quadratic"
            d = 10
            beta = 3.0
            gamma = 0.5
            noise_scale = 0.1
            seed = 4

            [train]
            alpha = 0.01
            lambda = 0.001
            lr = 0.005
            epochs = 20
            variant = "nobalance"
            attention_heads = 2
            conv_layers = 1
            d_z = 8
            d_p = 8
            split_ratios = [0.5, 0.25, 0.25]
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap().resolve(None);
        assert_eq!(c.sim.d, 10);
        assert_eq!(c.train.variant, Variant::NoBalance);
        assert_eq!(c.train.seed, 4);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = ExperimentConfig::from_toml("[train]\nalpha = 1.0\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CliError::Config(_)));
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        assert!(ExperimentConfig::from_toml("betta = 1\n").is_err());
    }

    #[test]
    fn seed_override_wins_and_shifts_list() {
        let c = ExperimentConfig::from_toml("seed = 3\nseeds = [10, 11, 12]\n[sim]\nseed = 9\n").unwrap();
        let r = c.clone().resolve(None);
        assert_eq!((r.sim.seed, r.train.seed), (3, 3));
        assert_eq!(r.seed_list(), vec![10, 11, 12]);
        let r = c.resolve(Some(7));
        assert_eq!((r.sim.seed, r.train.seed), (7, 7));
        assert_eq!(r.seed_list(), vec![7, 8, 9]);
    }

    #[test]
    fn default_seed_list_counts_from_seed() {
        let c = ExperimentConfig::from_toml("seed = 2\nnum_seeds = 3\n").unwrap().resolve(None);
        assert_eq!(c.seed_list(), vec![2, 3, 4]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = ExperimentConfig::default().resolve(Some(5));
        c.sweep = Some(SweepSpec {
            kind: SweepKind::Beta,
            values: vec![1.0, 3.0, 5.0],
        });
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let bad = [
            "[train]\nsplit_ratios = [0.5, 0.5, 0.5]\n",
            "[train]\nlr = -1.0\n",
            "[sim]\nd = 0\n",
            "[generator]\nmin_size = 1\n",
            "max_edge_size = 1\n",
        ];
        for text in bad {
            let c = ExperimentConfig::from_toml(text).unwrap().resolve(None);
            assert!(matches!(c.validate(), Err(CliError::Config(_))), "{text}");
        }
        let c = ExperimentConfig::from_toml("seeds = [1]\n").unwrap().resolve(None);
        assert!(c.validate_multi().is_err());
        let c = ExperimentConfig::from_toml("[sweep]\nkind = \"k\"\nvalues = [2.5]\n").unwrap();
        assert!(c.validate_sweep().is_err());
        let c = ExperimentConfig::default();
        assert!(c.validate_sweep().is_err());
    }
}
