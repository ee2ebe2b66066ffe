//! Experiment configuration files.
//!
//! Configs are TOML. Every section except `torus` has defaults, unknown keys
//! are rejected, and [`ExperimentConfig::validate`] checks every parameter
//! the chosen experiment uses before anything is computed.

use std::path::{Path, PathBuf};

use gradphi::estimators::{HsConfig, VarianceObservable, MIN_TRAJECTORIES};
use gradphi::inequalities::ModerationExperiment;
use gradphi::{Correction, DtPolicy, Error, LangevinConfig, PotentialConfig, PotentialSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    VarianceSweep,
    HsCheck,
    HeatkernelDecay,
    Tails,
    ExitTime,
    Inequalities,
    Oracle,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::VarianceSweep => "variance_sweep",
            ExperimentKind::HsCheck => "hs_check",
            ExperimentKind::HeatkernelDecay => "heatkernel_decay",
            ExperimentKind::Tails => "tails",
            ExperimentKind::ExitTime => "exit_time",
            ExperimentKind::Inequalities => "inequalities",
            ExperimentKind::Oracle => "oracle",
        }
    }
}

/// One side length or a list of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SideLengths {
    One(usize),
    Many(Vec<usize>),
}

impl SideLengths {
    pub fn values(&self) -> Vec<usize> {
        match self {
            SideLengths::One(l) => vec![*l],
            SideLengths::Many(ls) => ls.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusSection {
    pub d: usize,
    #[serde(rename = "L")]
    pub l: SideLengths,
}

/// Overrides of [`LangevinConfig::for_torus`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub dt: Option<f64>,
    pub burn_in: Option<f64>,
    pub thinning: Option<f64>,
    pub chain_count: Option<usize>,
    pub correction: Option<Correction>,
    pub dt_policy: Option<DtPolicy>,
    pub trajectory_time: Option<f64>,
}

impl SamplerSection {
    pub fn langevin(&self, l: usize, seed: u64) -> LangevinConfig {
        let mut c = LangevinConfig::for_torus(l, seed);
        if let Some(x) = self.dt {
            c.dt = x;
        }
        if let Some(x) = self.burn_in {
            c.burn_in = x;
        }
        if let Some(x) = self.thinning {
            c.thinning = x;
        }
        if let Some(x) = self.chain_count {
            c.chain_count = x;
        }
        if let Some(x) = self.correction {
            c.correction = x;
        }
        if let Some(x) = self.dt_policy {
            c.dt_policy = x;
        }
        if let Some(x) = self.trajectory_time {
            c.trajectory_time = x;
        } else if self.dt.is_some_and(|dt| dt > c.trajectory_time) {
            c.trajectory_time = c.dt;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceSection {
    pub samples_per_chain: usize,
    pub observable: VarianceObservable,
    /// Retained samples between chain checkpoints.
    pub checkpoint_every: usize,
}

impl Default for VarianceSection {
    fn default() -> Self {
        VarianceSection {
            samples_per_chain: 2000,
            observable: VarianceObservable::default(),
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailsSection {
    pub samples_per_chain: usize,
}

impl Default for TailsSection {
    fn default() -> Self {
        TailsSection {
            samples_per_chain: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExitSection {
    /// Defaults to R_V of the potential.
    pub radius: Option<f64>,
    pub t_grid: Vec<f64>,
    pub trajectories: usize,
    pub node_spacing: f64,
    pub dt: f64,
}

impl Default for ExitSection {
    fn default() -> Self {
        ExitSection {
            radius: None,
            t_grid: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            trajectories: 128,
            node_spacing: 0.01,
            dt: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecaySection {
    pub t_min: f64,
    /// Defaults to `L²/4`.
    pub t_max: Option<f64>,
    pub per_decade: usize,
    /// Fit window; defaults to `[1, L²/4]`.
    pub window: Option<[f64; 2]>,
}

impl Default for DecaySection {
    fn default() -> Self {
        DecaySection {
            t_min: 0.1,
            t_max: None,
            per_decade: 10,
            window: None,
        }
    }
}

impl DecaySection {
    pub fn horizon(&self, l: usize) -> f64 {
        self.t_max.unwrap_or((l * l) as f64 / 4.0)
    }

    pub fn fit_window(&self, l: usize) -> (f64, f64) {
        let w = self.window.unwrap_or([1.0, self.horizon(l)]);
        (w[0], w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModerationSection {
    /// Defaults to `d + 1`.
    pub p: Option<f64>,
    /// Defaults to `d + 1`.
    pub p_prime: Option<f64>,
    pub horizon: f64,
    pub span: f64,
    pub samples: usize,
    pub node_spacing: f64,
    pub dt: f64,
    /// Independent repetitions, seeded `seed, seed + 1, ...`.
    pub repeats: usize,
}

impl Default for ModerationSection {
    fn default() -> Self {
        let e = ModerationExperiment::default();
        ModerationSection {
            p: None,
            p_prime: None,
            horizon: e.horizon,
            span: e.span,
            samples: e.samples,
            node_spacing: e.node_spacing,
            dt: e.dt,
            repeats: 3,
        }
    }
}

impl ModerationSection {
    pub fn exponents(&self, d: usize) -> (f64, f64) {
        let dflt = d as f64 + 1.0;
        (self.p.unwrap_or(dflt), self.p_prime.unwrap_or(dflt))
    }

    pub fn experiment(&self) -> ModerationExperiment {
        ModerationExperiment {
            node_spacing: self.node_spacing,
            dt: self.dt,
            horizon: self.horizon,
            span: self.span,
            samples: self.samples,
        }
    }
}

fn default_potential() -> PotentialConfig {
    PotentialConfig::Gaussian
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// Relative paths are resolved against the config file's directory.
    pub output_dir: PathBuf,
    pub torus: TorusSection,
    #[serde(default = "default_potential")]
    pub potential: PotentialConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub pde: HsConfig,
    #[serde(default)]
    pub variance: VarianceSection,
    #[serde(default)]
    pub tails: TailsSection,
    #[serde(default)]
    pub exit_time: ExitSection,
    #[serde(default)]
    pub decay: DecaySection,
    #[serde(default)]
    pub moderation: ModerationSection,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::invalid(field, message)
}

fn positive(field: &str, x: f64) -> Result<(), Error> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, "must be positive and finite"))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Canonical form used for hashing: compact JSON in declaration order.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    /// Hash of everything that determines the sampled chains. The sample
    /// budget and the output location are excluded so a run can be
    /// extended or moved and still resume.
    pub fn chain_hash(&self) -> String {
        let mut c = self.clone();
        c.variance.samples_per_chain = 0;
        c.output_dir = PathBuf::new();
        c.hash()
    }

    pub fn side_lengths(&self) -> Vec<usize> {
        self.torus.l.values()
    }

    /// Check every parameter the experiment uses. Returns the potential.
    pub fn validate(&self, base_dir: &Path) -> Result<PotentialSpec, Error> {
        let d = self.torus.d;
        if !(1..=4).contains(&d) {
            return Err(invalid("torus.d", "must be between 1 and 4"));
        }
        let ls = self.side_lengths();
        if ls.is_empty() {
            return Err(invalid("torus.L", "must list at least one side length"));
        }
        if ls.contains(&0) {
            return Err(invalid("torus.L", "side lengths must be at least 1"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        let v = PotentialSpec::from_config(&self.potential, base_dir)?;
        if self.experiment == ExperimentKind::Oracle {
            return Ok(v);
        }
        for &l in &ls {
            self.sampler.langevin(l, self.seed).validate("sampler")?;
        }
        use ExperimentKind::*;
        match self.experiment {
            VarianceSweep => {
                if self.variance.samples_per_chain == 0 {
                    return Err(invalid("variance.samples_per_chain", "must be at least 1"));
                }
                if self.variance.checkpoint_every == 0 {
                    return Err(invalid("variance.checkpoint_every", "must be at least 1"));
                }
            }
            HsCheck | HeatkernelDecay => {
                self.validate_pde()?;
                let random = v.constant_curvature().is_none() || self.experiment == HeatkernelDecay;
                if random && self.pde.trajectories < MIN_TRAJECTORIES {
                    return Err(invalid(
                        "pde.trajectories",
                        format!("must be at least {MIN_TRAJECTORIES}"),
                    ));
                }
                if self.experiment == HsCheck
                    && v.constant_curvature().is_none()
                    && self.variance.samples_per_chain == 0
                {
                    return Err(invalid("variance.samples_per_chain", "must be at least 1"));
                }
                if self.experiment == HeatkernelDecay {
                    positive("decay.t_min", self.decay.t_min)?;
                    if self.decay.per_decade == 0 {
                        return Err(invalid("decay.per_decade", "must be at least 1"));
                    }
                    for &l in &ls {
                        if !(self.decay.horizon(l) > self.decay.t_min) {
                            return Err(invalid("decay.t_max", "must exceed decay.t_min"));
                        }
                        let (a, b) = self.decay.fit_window(l);
                        if !(0.0 < a && a < b && b <= self.decay.horizon(l)) {
                            return Err(invalid(
                                "decay.window",
                                "must satisfy 0 < start < end <= t_max",
                            ));
                        }
                    }
                }
            }
            Tails => {
                if self.tails.samples_per_chain == 0 {
                    return Err(invalid("tails.samples_per_chain", "must be at least 1"));
                }
            }
            ExitTime => {
                let e = &self.exit_time;
                match e.radius {
                    Some(r) => positive("exit_time.radius", r)?,
                    None if v.r_v().is_none() => {
                        return Err(invalid(
                            "exit_time.radius",
                            "required because R_V of the potential is not certified",
                        ))
                    }
                    None => {}
                }
                if e.t_grid.is_empty()
                    || e.t_grid[0] < 0.0
                    || e.t_grid.windows(2).any(|w| w[1] <= w[0])
                {
                    return Err(invalid(
                        "exit_time.t_grid",
                        "must be nonempty, nonnegative and increasing",
                    ));
                }
                if e.trajectories == 0 {
                    return Err(invalid("exit_time.trajectories", "must be at least 1"));
                }
                positive("exit_time.node_spacing", e.node_spacing)?;
                positive("exit_time.dt", e.dt)?;
            }
            Inequalities => {
                let m = &self.moderation;
                let (p, pp) = m.exponents(d);
                if !(p > d as f64) || !p.is_finite() {
                    return Err(invalid("moderation.p", "must exceed d"));
                }
                if !(pp > d as f64) || !pp.is_finite() {
                    return Err(invalid("moderation.p_prime", "must exceed d"));
                }
                positive("moderation.node_spacing", m.node_spacing)?;
                positive("moderation.dt", m.dt)?;
                if !(m.horizon >= m.node_spacing) {
                    return Err(invalid(
                        "moderation.horizon",
                        "must be at least node_spacing",
                    ));
                }
                if !(m.span >= 0.0) {
                    return Err(invalid("moderation.span", "must be nonnegative"));
                }
                if m.samples == 0 || m.repeats == 0 {
                    return Err(invalid(
                        "moderation.samples",
                        "samples and repeats must be at least 1",
                    ));
                }
            }
            Oracle => {}
        }
        Ok(v)
    }

    fn validate_pde(&self) -> Result<(), Error> {
        let p = &self.pde;
        positive("pde.node_spacing", p.node_spacing)?;
        positive("pde.dt", p.dt)?;
        if p.substeps_per_node == 0 {
            return Err(invalid("pde.substeps_per_node", "must be at least 1"));
        }
        if let Some(t) = p.t_max {
            positive("pde.t_max", t)?;
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
