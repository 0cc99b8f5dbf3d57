//! Experiment configuration files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use ssd_core::cache::{geometric_fanout, FanOutPlan};
use ssd_core::dist::SamplingScheme;
use ssd_core::lm::{calibrate_pair, derive_draft, make_lm, LmPair};
use ssd_core::perf::TimingParams;
use ssd_core::sim::{derive_seed, BackupKind, Mode, SimConfig};
use ssd_core::specdec::{Origin, VerifyRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Replication `i` runs with `derive_seed(seed, i)`.
    pub seed: u64,
    pub lm: LmSpec,
    pub sim: SimSpec,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    #[serde(default = "one")]
    pub replications: u64,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Synthetic target plus a draft derived from it, either calibrated to an
/// acceptance rate or mixed with noise at a fixed weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSpec {
    pub vocab: usize,
    #[serde(default = "one_usize")]
    pub order: usize,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Defaults to the root seed, so replications share one model pair.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanSpec {
    Constant {
        fanout: usize,
    },
    Explicit {
        f: Vec<usize>,
    },
    Uniform {
        budget: usize,
    },
    /// Geometric allocation using the pair's measured acceptance rate.
    Geometric {
        budget: usize,
        #[serde(default = "default_r")]
        r: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub k: usize,
    #[serde(default)]
    pub scheme: SamplingScheme,
    pub primary_plan: PlanSpec,
    /// Defaults to the primary plan.
    #[serde(default)]
    pub backup_plan: Option<PlanSpec>,
    pub timing: TimingParams,
    #[serde(default = "default_backup")]
    pub backup_kind: BackupKind,
    #[serde(default = "one_usize")]
    pub batch_size: usize,
    pub rounds: u64,
    #[serde(default = "default_context")]
    pub initial_context: Vec<usize>,
    #[serde(default)]
    pub verify_rule: VerifyRule,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Constant fan-outs for the miss-rate curve.
    #[serde(default)]
    pub fanouts: Vec<usize>,
    /// Total budgets compared under uniform and geometric allocation.
    #[serde(default)]
    pub budgets: Vec<usize>,
    #[serde(default)]
    pub c_grid: Vec<f64>,
    /// Fan-out used by the down-weighting scheme in the C sweep. Defaults to
    /// the first entry of the primary plan.
    #[serde(default)]
    pub saguaro_fanout: Option<usize>,
    #[serde(default)]
    pub batch_grid: Vec<usize>,
    #[serde(default)]
    pub temperatures: Vec<f64>,
    /// Power-law exponent assumed by geometric plans in the budget sweep.
    #[serde(default = "default_r")]
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default = "default_verify_mode")]
    pub mode: VerifyMode,
    #[serde(default = "default_tokens")]
    pub tokens: u64,
    #[serde(default = "default_significance")]
    pub significance: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            mode: default_verify_mode(),
            tokens: default_tokens(),
            significance: default_significance(),
        }
    }
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Ssd]
}
fn one() -> u64 {
    1
}
fn one_usize() -> usize {
    1
}
fn default_concentration() -> f64 {
    0.5
}
fn default_r() -> f64 {
    1.0
}
fn default_backup() -> BackupKind {
    BackupKind::SamePrimaryJit
}
fn default_context() -> Vec<usize> {
    vec![0]
}
fn default_verify_mode() -> VerifyMode {
    VerifyMode::Exact
}
fn default_tokens() -> u64 {
    200_000
}
fn default_significance() -> f64 {
    0.001
}

/// A validated config with its model pair built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub pair: Arc<LmPair>,
    /// Base simulation config; `seed` is the root seed.
    pub sim: SimConfig,
}

impl Prepared {
    /// Simulation config for replication `index`.
    pub fn replica(&self, index: u64) -> SimConfig {
        let mut cfg = self.sim.clone();
        cfg.seed = derive_seed(self.config.seed, index);
        cfg
    }

    pub fn plan(&self, spec: &PlanSpec, role: Origin) -> Result<FanOutPlan> {
        build_plan(spec, self.sim.k, self.pair.measured_alpha(), role)
    }
}

pub fn build_plan(spec: &PlanSpec, k: usize, alpha: f64, role: Origin) -> Result<FanOutPlan> {
    Ok(match spec {
        PlanSpec::Constant { fanout } => FanOutPlan::constant(k, *fanout, role),
        PlanSpec::Explicit { f } => {
            ensure!(
                f.len() == k + 1,
                "explicit plan has {} entries, expected k + 1 = {}",
                f.len(),
                k + 1
            );
            FanOutPlan::new(f.clone(), role, f.iter().sum())?
        }
        PlanSpec::Uniform { budget } => FanOutPlan::uniform(k, *budget, role),
        PlanSpec::Geometric { budget, r } => geometric_fanout(alpha, *r, k, *budget, role)?,
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Check every field and build the model pair. Nothing runs before this
    /// succeeds.
    pub fn prepare(self) -> Result<Prepared> {
        ensure!(self.replications >= 1, "replications must be at least 1");
        ensure!(!self.modes.is_empty(), "modes must not be empty");
        let v = &self.verify;
        ensure!(v.tokens >= 1, "verify.tokens must be at least 1");
        ensure!(
            v.significance > 0.0 && v.significance < 1.0,
            "verify.significance must lie in (0, 1)"
        );
        if self.sweep.c_grid.iter().any(|c| !(0.0..=1.0).contains(c)) {
            bail!("sweep.c_grid entries must lie in [0, 1]");
        }
        if self
            .sweep
            .temperatures
            .iter()
            .any(|t| !(*t > 0.0 && t.is_finite()))
        {
            bail!("sweep.temperatures must be positive");
        }
        if self.sweep.batch_grid.contains(&0) {
            bail!("sweep.batch_grid entries must be at least 1");
        }

        let lm = &self.lm;
        let lm_seed = lm.seed.unwrap_or(self.seed);
        let target = make_lm(lm.vocab, lm.order, lm.concentration, lm_seed)?;
        let pair = match (lm.alpha, lm.epsilon) {
            (Some(a), None) => calibrate_pair(&target, a, lm_seed.wrapping_add(1))?,
            (None, Some(e)) => {
                let draft = derive_draft(&target, e, lm_seed.wrapping_add(1))?;
                LmPair::new(target, draft)?
            }
            _ => bail!("lm needs exactly one of alpha or epsilon"),
        };
        let pair = Arc::new(pair);

        let s = &self.sim;
        let alpha = pair.measured_alpha();
        let primary_plan = build_plan(&s.primary_plan, s.k, alpha, Origin::Primary)?;
        let backup_spec = s.backup_plan.as_ref().unwrap_or(&s.primary_plan);
        let backup_plan = build_plan(backup_spec, s.k, alpha, Origin::Backup)?;
        let sim = SimConfig {
            pair: pair.clone(),
            k: s.k,
            scheme: s.scheme,
            primary_plan,
            backup_plan,
            timing: s.timing,
            backup_kind: s.backup_kind,
            batch_size: s.batch_size,
            rounds: s.rounds,
            seed: self.seed,
            initial_context: s.initial_context.clone(),
            verify_rule: s.verify_rule,
            record: false,
        };
        sim.validate()?;
        Ok(Prepared {
            config: self,
            pair,
            sim,
        })
    }
}
