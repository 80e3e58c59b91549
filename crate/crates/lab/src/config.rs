//! Experiment configuration files and their translation into core types.

use std::collections::BTreeMap;
use std::path::Path;

use orthoflow_core::bias::{Condition, ConditionalFamily, Token, TokenId, TokenRecipe, TokenRole, VelocityModel};
use orthoflow_core::grid::TimeGrid;
use orthoflow_core::injection::InjectionConfig;
use orthoflow_core::sampler::{DriftCorrection, Mode, NoiseSchedule, SamplerConfig, ScoreSource};
use orthoflow_core::{GaussianComponent, GaussianMixture};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub family: FamilySection,
    pub conditions: Vec<ConditionSpec>,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub student: StudentSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub injection: InjectionSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub marginal: MarginalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Particles per condition and seed.
    #[serde(default = "default_particles")]
    pub particles: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![2024]
}

fn default_particles() -> usize {
    8
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            particles: default_particles(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    pub dim: usize,
    pub modes: Vec<ModeSpec>,
    pub tokens: Vec<TokenSpec>,
    /// Prior (majority) weights by mode name; normalized on load.
    pub prior: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub name: String,
    /// Dense mean. Exactly one of `mean` and `mean_at` is required.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    /// Sparse mean as `[axis, value]` pairs; other coordinates are zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_at: Option<Vec<(usize, f64)>>,
    pub var: Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Variance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleSpec {
    Object,
    Attribute,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSpec {
    pub name: String,
    pub role: RoleSpec,
    #[serde(default)]
    pub adds: BTreeMap<String, f64>,
    #[serde(default)]
    pub scales: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    #[serde(default = "default_bias")]
    pub bias: f64,
}

fn default_bias() -> f64 {
    0.95
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self { bias: default_bias() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    /// Standard deviation of the student's additive output noise.
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Ode,
    Sde,
    Injectflow,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Ode => Mode::Ode,
            ModeName::Sde => Mode::Sde,
            ModeName::Injectflow => Mode::InjectFlow,
        }
    }
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Ode => "ode",
            ModeName::Sde => "sde",
            ModeName::Injectflow => "injectflow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSourceName {
    Velocity,
    Analytic,
}

impl From<ScoreSourceName> for ScoreSource {
    fn from(s: ScoreSourceName) -> Self {
        match s {
            ScoreSourceName::Velocity => ScoreSource::VelocityApprox,
            ScoreSourceName::Analytic => ScoreSource::Analytic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DriftName {
    Score,
    Dropped,
    Flipped,
}

impl From<DriftName> for DriftCorrection {
    fn from(d: DriftName) -> Self {
        match d {
            DriftName::Score => DriftCorrection::Score,
            DriftName::Dropped => DriftCorrection::Dropped,
            DriftName::Flipped => DriftCorrection::Flipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_clamp")]
    pub delta_lo: f64,
    #[serde(default = "default_clamp")]
    pub delta_hi: f64,
    #[serde(default = "default_noise_level")]
    pub noise_level: f64,
    #[serde(default = "default_score_source")]
    pub score_source: ScoreSourceName,
    #[serde(default = "default_drift")]
    pub drift: DriftName,
}

fn default_mode() -> ModeName {
    ModeName::Ode
}

fn default_steps() -> usize {
    orthoflow_core::grid::DEFAULT_STEPS
}

fn default_clamp() -> f64 {
    orthoflow_core::grid::DEFAULT_CLAMP
}

fn default_noise_level() -> f64 {
    orthoflow_core::sampler::DEFAULT_NOISE_LEVEL
}

fn default_score_source() -> ScoreSourceName {
    ScoreSourceName::Velocity
}

fn default_drift() -> DriftName {
    DriftName::Score
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            steps: default_steps(),
            delta_lo: default_clamp(),
            delta_hi: default_clamp(),
            noise_level: default_noise_level(),
            score_source: default_score_source(),
            drift: default_drift(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_proj_eps")]
    pub proj_eps: f64,
    /// 1-based steps at which the injected velocity is used.
    #[serde(default = "default_inject_steps")]
    pub steps: Vec<usize>,
    /// Names of the tokens hidden from the student.
    #[serde(default)]
    pub mask_tokens: Vec<String>,
}

fn default_alpha() -> f64 {
    orthoflow_core::injection::DEFAULT_ALPHA
}

fn default_proj_eps() -> f64 {
    orthoflow_core::injection::DEFAULT_PROJ_EPS
}

fn default_inject_steps() -> Vec<usize> {
    vec![1]
}

impl Default for InjectionSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            proj_eps: default_proj_eps(),
            steps: default_inject_steps(),
            mask_tokens: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Injection scale of the control arm, which keeps the SDE fission.
    #[serde(default)]
    pub control_alpha: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { control_alpha: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSection {
    #[serde(default = "default_marginal_particles")]
    pub particles: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Integration steps of the check; fine grids keep the early SDE steps stable.
    #[serde(default = "default_marginal_steps")]
    pub steps: usize,
    /// Times at which the ensembles are compared; snapped to the nearest knot.
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    /// Projection directions of the sliced energy statistic.
    #[serde(default = "default_directions")]
    pub directions: usize,
    /// Significance level of the permutation test.
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_marginal_particles() -> usize {
    20_000
}

fn default_trials() -> usize {
    5
}

fn default_marginal_steps() -> usize {
    998
}

fn default_checkpoints() -> Vec<f64> {
    vec![0.8, 0.5, 0.2, orthoflow_core::grid::DEFAULT_CLAMP]
}

fn default_permutations() -> usize {
    orthoflow_core::diagnostics::MIN_PERMUTATIONS
}

fn default_directions() -> usize {
    orthoflow_core::diagnostics::AUTO_DIRECTIONS
}

fn default_level() -> f64 {
    0.01
}

impl Default for MarginalSection {
    fn default() -> Self {
        Self {
            particles: default_marginal_particles(),
            trials: default_trials(),
            steps: default_marginal_steps(),
            checkpoints: default_checkpoints(),
            permutations: default_permutations(),
            directions: default_directions(),
            level: default_level(),
        }
    }
}

/// Core objects built from a validated configuration.
#[derive(Debug, Clone)]
pub struct Built {
    pub family: ConditionalFamily,
    pub conditions: Vec<Condition>,
    pub teacher: VelocityModel,
    pub student: VelocityModel,
    pub mode_names: Vec<String>,
    pub token_ids: BTreeMap<String, TokenId>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Ok(cfg.normalized())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    /// Equivalent spellings collapsed to one: sparse means become dense and
    /// injection steps are sorted and deduplicated.
    pub fn normalized(mut self) -> Self {
        let d = self.family.dim;
        for m in &mut self.family.modes {
            if let (None, Some(sparse)) = (&m.mean, &m.mean_at) {
                let mut dense = vec![0.0; d];
                let mut ok = true;
                for &(axis, value) in sparse {
                    match dense.get_mut(axis) {
                        Some(slot) => *slot += value,
                        None => ok = false,
                    }
                }
                if ok {
                    m.mean = Some(dense);
                    m.mean_at = None;
                }
            }
            if let Variance::Diagonal(v) = &m.var {
                if !v.is_empty() && v.iter().all(|x| *x == v[0]) {
                    m.var = Variance::Isotropic(v[0]);
                }
            }
        }
        self.injection.steps.sort_unstable();
        self.injection.steps.dedup();
        self
    }

    /// Canonical JSON form: keys sorted, defaults filled in.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self.clone().normalized()).expect("config serializes to JSON")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical_json()).expect("canonical JSON serializes");
        hex_digest(Sha256::digest(text.as_bytes()).as_slice())
    }

    fn mode_index(&self, name: &str, context: &str) -> Result<usize> {
        self.family
            .modes
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| LabError::Config(format!("{context}: unknown mode `{name}`")))
    }

    fn token_id(&self, name: &str, context: &str) -> Result<TokenId> {
        self.family
            .tokens
            .iter()
            .position(|t| t.name == name)
            .map(|i| i as TokenId)
            .ok_or_else(|| LabError::Config(format!("{context}: unknown token `{name}`")))
    }

    /// Checks every section and builds the family, conditions and models.
    pub fn build(&self) -> Result<Built> {
        let d = self.family.dim;
        if d == 0 {
            return Err(LabError::Config("family.dim must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut modes = Vec::with_capacity(self.family.modes.len());
        for m in &self.family.modes {
            if !seen.insert(m.name.as_str()) {
                return Err(LabError::Config(format!("duplicate mode name `{}`", m.name)));
            }
            let mean = match (&m.mean, &m.mean_at) {
                (Some(mean), None) => mean.clone(),
                (None, Some(sparse)) => {
                    let axis = sparse.iter().map(|p| p.0).max().unwrap_or(0);
                    return Err(LabError::Config(format!(
                        "mode `{}`: axis {axis} is outside dimension {d}",
                        m.name
                    )));
                }
                _ => {
                    return Err(LabError::Config(format!(
                        "mode `{}`: give exactly one of `mean` and `mean_at`",
                        m.name
                    )))
                }
            };
            if mean.len() != d {
                return Err(LabError::Config(format!(
                    "mode `{}`: mean has {} entries, family.dim is {d}",
                    m.name,
                    mean.len()
                )));
            }
            let var = match &m.var {
                Variance::Isotropic(v) => vec![*v; d],
                Variance::Diagonal(v) => v.clone(),
            };
            let comp =
                GaussianComponent::new(mean, var).map_err(|e| LabError::Config(format!("mode `{}`: {e}", m.name)))?;
            modes.push(comp);
        }

        let mut recipes = Vec::with_capacity(self.family.tokens.len());
        let mut token_ids = BTreeMap::new();
        for (i, t) in self.family.tokens.iter().enumerate() {
            let context = format!("token `{}`", t.name);
            if token_ids.insert(t.name.clone(), i as TokenId).is_some() {
                return Err(LabError::Config(format!("duplicate token name `{}`", t.name)));
            }
            let role = match t.role {
                RoleSpec::Object => TokenRole::Object,
                RoleSpec::Attribute => TokenRole::Attribute,
                RoleSpec::Relation => TokenRole::Relation,
            };
            let adds = t
                .adds
                .iter()
                .map(|(name, w)| Ok((self.mode_index(name, &context)?, *w)))
                .collect::<Result<Vec<_>>>()?;
            let scales = t
                .scales
                .iter()
                .map(|(name, w)| Ok((self.mode_index(name, &context)?, *w)))
                .collect::<Result<Vec<_>>>()?;
            recipes.push(TokenRecipe {
                token: Token::new(i as TokenId, role),
                adds,
                scales,
                shift: t.shift.clone(),
            });
        }

        let mut prior_modes = Vec::new();
        let mut prior_weights = Vec::new();
        for (name, w) in &self.family.prior {
            prior_modes.push(modes[self.mode_index(name, "family.prior")?].clone());
            prior_weights.push(*w);
        }
        let prior = GaussianMixture::normalized(prior_modes, prior_weights)
            .map_err(|e| LabError::Config(format!("family.prior: {e}")))?;
        let family = ConditionalFamily::new(modes, recipes.clone(), prior)
            .map_err(|e| LabError::Config(format!("family: {e}")))?;

        if self.conditions.is_empty() {
            return Err(LabError::Config("at least one [[conditions]] entry is required".into()));
        }
        let mut conditions = Vec::with_capacity(self.conditions.len());
        for c in &self.conditions {
            let context = format!("condition `{}`", c.name);
            let tokens = c
                .tokens
                .iter()
                .map(|name| Ok(recipes[self.token_id(name, &context)? as usize].token))
                .collect::<Result<Vec<_>>>()?;
            let cond = Condition::new(tokens).map_err(|e| LabError::Config(format!("{context}: {e}")))?;
            family
                .conditional(&cond)
                .map_err(|e| LabError::Config(format!("{context}: {e}")))?;
            conditions.push(cond);
        }
        for name in &self.injection.mask_tokens {
            self.token_id(name, "injection.mask_tokens")?;
        }

        let teacher = VelocityModel::teacher(family.clone(), self.teacher.bias)
            .map_err(|e| LabError::Config(format!("teacher: {e}")))?;
        let student = VelocityModel::student(family.clone(), self.student.noise)
            .map_err(|e| LabError::Config(format!("student: {e}")))?;

        if self.experiment.seeds.is_empty() {
            return Err(LabError::Config("experiment.seeds must not be empty".into()));
        }
        if self.experiment.particles == 0 {
            return Err(LabError::Config("experiment.particles must be positive".into()));
        }
        self.sampler_config(self.sampler.mode)?;

        Ok(Built {
            family,
            conditions,
            teacher,
            student,
            mode_names: self.family.modes.iter().map(|m| m.name.clone()).collect(),
            token_ids,
        })
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.sampler.steps, self.sampler.delta_lo, self.sampler.delta_hi)
            .map_err(|e| LabError::Config(format!("sampler: {e}")))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.sampler.noise_level, self.sampler.delta_lo, self.sampler.delta_hi)
            .map_err(|e| LabError::Config(format!("sampler: {e}")))
    }

    pub fn injection_config(&self) -> Result<InjectionConfig> {
        if self.injection.steps.contains(&0) {
            return Err(LabError::Config("injection.steps are 1-based".into()));
        }
        let masked_token_ids = self
            .injection
            .mask_tokens
            .iter()
            .map(|n| self.token_id(n, "injection.mask_tokens"))
            .collect::<Result<Vec<_>>>()?;
        Ok(InjectionConfig {
            alpha: self.injection.alpha,
            proj_eps: self.injection.proj_eps,
            inject_steps: self.injection.steps.iter().map(|s| s - 1).collect(),
            masked_token_ids,
        })
    }

    /// Sampler configuration for `mode` with this file's grid, noise and injection.
    pub fn sampler_config(&self, mode: ModeName) -> Result<SamplerConfig> {
        let grid = self.grid()?;
        let mut cfg = match mode {
            ModeName::Ode => SamplerConfig::ode(grid),
            ModeName::Sde => SamplerConfig::sde(grid, self.schedule()?, self.sampler.score_source.into()),
            ModeName::Injectflow => SamplerConfig::injectflow(grid, self.schedule()?, self.injection_config()?),
        };
        cfg.score_source = self.sampler.score_source.into();
        cfg.drift = self.sampler.drift.into();
        cfg.validate(true)
            .map_err(|e| LabError::Config(format!("sampler: {e}")))?;
        Ok(cfg)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[family]
dim = 2
prior = { big = 0.9, small = 0.1 }

[[family.modes]]
name = "big"
mean = [0.0, 0.0]
var = 0.5

[[family.modes]]
name = "small"
mean_at = [[0, 4.0]]
var = [0.5, 0.5]

[[family.tokens]]
name = "thing"
role = "object"
adds = { big = 1.0 }

[[family.tokens]]
name = "rare"
role = "attribute"
adds = { small = 1.0 }
scales = { big = 0.0 }

[[conditions]]
name = "rare thing"
tokens = ["thing", "rare"]
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
        assert_eq!(cfg.family.modes[1].mean, Some(vec![4.0, 0.0]));
        assert_eq!(cfg.family.modes[1].var, Variance::Isotropic(0.5));
        let built = cfg.build().unwrap();
        assert_eq!(built.conditions.len(), 1);
        assert_eq!(built.token_ids["rare"], 1);
        let truth = built.family.conditional(&built.conditions[0]).unwrap();
        assert_eq!(truth.modes, vec![1]);
    }

    #[test]
    fn hash_ignores_spelling_and_order() {
        let a = ExperimentConfig::from_toml_str(SMALL).unwrap();
        let reordered = SMALL
            .replace(
                "prior = { big = 0.9, small = 0.1 }",
                "prior = { small = 0.1, big = 0.9 }",
            )
            .replace("mean_at = [[0, 4.0]]", "mean = [4.0, 0.0]");
        let b = ExperimentConfig::from_toml_str(&reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
        let explicit = format!("{SMALL}\n[injection]\nalpha = 1.0\n");
        assert_eq!(a.hash(), ExperimentConfig::from_toml_str(&explicit).unwrap().hash());
        let changed = format!("{SMALL}\n[injection]\nalpha = 0.5\n");
        assert_ne!(a.hash(), ExperimentConfig::from_toml_str(&changed).unwrap().hash());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let a = ExperimentConfig::from_toml_str(SMALL).unwrap();
        let b = ExperimentConfig::from_toml_str(&a.to_toml_string().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn actionable_errors() {
        let bad_mode = SMALL.replace("adds = { small = 1.0 }", "adds = { tiny = 1.0 }");
        let err = ExperimentConfig::from_toml_str(&bad_mode).unwrap().build().unwrap_err();
        assert!(err.to_string().contains("unknown mode `tiny`"), "{err}");

        let bad_axis = SMALL.replace("mean_at = [[0, 4.0]]", "mean_at = [[5, 4.0]]");
        let err = ExperimentConfig::from_toml_str(&bad_axis).unwrap().build().unwrap_err();
        assert!(err.to_string().contains("axis 5"), "{err}");

        let unknown_field = format!("{SMALL}\n[sampler]\nstep = 3\n");
        assert!(ExperimentConfig::from_toml_str(&unknown_field).is_err());

        let bad_bias = format!("{SMALL}\n[teacher]\nbias = 1.5\n");
        let err = ExperimentConfig::from_toml_str(&bad_bias).unwrap().build().unwrap_err();
        assert!(err.to_string().starts_with("configuration error: teacher"), "{err}");

        let bad_step = format!("{SMALL}\n[sampler]\nmode = \"injectflow\"\n[injection]\nsteps = [40]\n");
        assert!(ExperimentConfig::from_toml_str(&bad_step).unwrap().build().is_err());
    }
}
