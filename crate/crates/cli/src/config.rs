use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use switchdetect::baselines::Criterion;
use switchdetect::dmd::DEFAULT_CORR_THRESHOLD;
use switchdetect::doe::Ordering;
use switchdetect::embedding::TrainOptions;
use switchdetect::mixed_dmd::{PenaltyWeights, Prior, ResidualNorm, DEFAULT_REFERENCE_WEIGHT};
use switchdetect::nodyn::{DatasetOptions, DetectOptions, LagMode};
use switchdetect::sim::{default_perturbations, DrivingCycle, GlobalConstants, Perturbation, WorkflowConfig};
use switchdetect::DataTable;

use crate::error::CliError;

/// Bumped whenever a default below changes meaning.
pub const DEFAULTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub workflow: WorkflowSection,
    /// Parameter changes that define the updated module variants.
    pub perturbations: Vec<Perturbation>,
    pub cycle: CycleSection,
    pub doe: DoeSection,
    pub dmdc: DmdcSection,
    pub mixed: MixedSection,
    pub nodyn: NodynSection,
    pub baseline: BaselineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: None,
            workflow: WorkflowSection::default(),
            perturbations: default_perturbations(),
            cycle: CycleSection::default(),
            doe: DoeSection::default(),
            dmdc: DmdcSection::default(),
            mixed: MixedSection::default(),
            nodyn: NodynSection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkflowSection {
    pub dt: f64,
    /// Reference parameter overrides: module → parameter → value.
    pub parameters: BTreeMap<String, BTreeMap<String, f64>>,
    pub constants: GlobalConstants,
}

impl Default for WorkflowSection {
    fn default() -> Self {
        WorkflowSection {
            dt: WorkflowConfig::default().dt,
            parameters: BTreeMap::new(),
            constants: GlobalConstants::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleKind {
    #[default]
    Default,
    Random,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleSection {
    pub kind: CycleKind,
    /// CSV with a `speed_setpoint` column, for `kind = "csv"`.
    pub path: Option<PathBuf>,
    /// Length of a random cycle.
    pub steps: usize,
}

impl Default for CycleSection {
    fn default() -> Self {
        CycleSection {
            kind: CycleKind::Default,
            path: None,
            steps: 5960,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoeSection {
    pub segment_length: usize,
    pub ordering: Ordering,
}

impl Default for DoeSection {
    fn default() -> Self {
        DoeSection {
            segment_length: 20,
            ordering: Ordering::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmdcSection {
    pub standardize: bool,
    /// Drop state columns correlated at or above this level before fitting;
    /// 1 keeps every non-constant state that is not an exact copy.
    pub prune_threshold: f64,
}

impl Default for DmdcSection {
    fn default() -> Self {
        DmdcSection {
            standardize: false,
            prune_threshold: DEFAULT_CORR_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedSection {
    pub weights: PenaltyWeights,
    pub norm: ResidualNorm,
    pub prior: Prior,
    pub embedding: bool,
    /// Fixed latent dimension; chosen by reconstruction R² when absent.
    pub latent_dim: Option<usize>,
    pub max_latent_dim: usize,
    pub r2_threshold: f64,
    pub epochs: usize,
    pub subset_size: usize,
    pub reference_weight: f64,
}

impl Default for MixedSection {
    fn default() -> Self {
        MixedSection {
            weights: PenaltyWeights::default(),
            norm: ResidualNorm::default(),
            prior: Prior::default(),
            embedding: true,
            latent_dim: None,
            max_latent_dim: 6,
            r2_threshold: 0.99,
            epochs: TrainOptions::default().epochs,
            subset_size: 2,
            reference_weight: DEFAULT_REFERENCE_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodynSection {
    pub alpha: f64,
    pub floor_fraction: f64,
    pub bonferroni: bool,
    pub interaction_order: usize,
    pub include_imposed_deltas: bool,
    pub include_cross_terms: bool,
    pub lag_mode: LagMode,
}

impl Default for NodynSection {
    fn default() -> Self {
        let d = DatasetOptions::default();
        let t = DetectOptions::default();
        NodynSection {
            alpha: t.alpha,
            floor_fraction: t.floor_fraction,
            bonferroni: t.bonferroni,
            interaction_order: d.interaction_order,
            include_imposed_deltas: d.include_imposed_deltas,
            include_cross_terms: d.include_cross_terms,
            lag_mode: d.lag_mode,
        }
    }
}

impl NodynSection {
    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            interaction_order: self.interaction_order,
            include_imposed_deltas: self.include_imposed_deltas,
            include_cross_terms: self.include_cross_terms,
            lag_mode: self.lag_mode,
        }
    }

    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions {
            alpha: self.alpha,
            floor_fraction: self.floor_fraction,
            bonferroni: self.bonferroni,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub criterion: Criterion,
    pub max_order: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            criterion: Criterion::default(),
            max_order: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Relative input paths are resolved against the config file.
        if let (Some(p), Some(dir)) = (&config.cycle.path, path.parent()) {
            if p.is_relative() {
                config.cycle.path = Some(dir.join(p));
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.workflow()?;
        if self.cycle.kind == CycleKind::Csv {
            match &self.cycle.path {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(CliError::Config(format!("cycle file {} does not exist", p.display()))),
                None => return Err(CliError::Config("cycle kind \"csv\" needs a path".into())),
            }
        }
        if self.cycle.steps < 2 {
            return Err(CliError::Config("cycle.steps must be >= 2".into()));
        }
        if self.doe.segment_length == 0 {
            return Err(CliError::Config("doe.segment_length must be >= 1".into()));
        }
        if !(self.dmdc.prune_threshold > 0.0 && self.dmdc.prune_threshold <= 1.0) {
            return Err(CliError::Config("dmdc.prune_threshold must lie in (0, 1]".into()));
        }
        self.mixed.weights.validate()?;
        if !(self.mixed.r2_threshold > 0.0 && self.mixed.r2_threshold <= 1.0) {
            return Err(CliError::Config("mixed.r2_threshold must lie in (0, 1]".into()));
        }
        if self.mixed.latent_dim == Some(0) || self.mixed.max_latent_dim == 0 {
            return Err(CliError::Config("latent dimensions must be >= 1".into()));
        }
        if self.mixed.subset_size == 0 {
            return Err(CliError::Config("mixed.subset_size must be >= 1".into()));
        }
        if !(self.mixed.reference_weight > 0.0 && self.mixed.reference_weight.is_finite()) {
            return Err(CliError::Config("mixed.reference_weight must be positive".into()));
        }
        if !(self.nodyn.alpha > 0.0 && self.nodyn.alpha <= 1.0) {
            return Err(CliError::Config("nodyn.alpha must lie in (0, 1]".into()));
        }
        if !(self.nodyn.floor_fraction >= 0.0) || self.nodyn.interaction_order == 0 {
            return Err(CliError::Config("nodyn.floor_fraction must be >= 0 and interaction_order >= 1".into()));
        }
        if self.baseline.max_order == 0 {
            return Err(CliError::Config("baseline.max_order must be >= 1".into()));
        }
        Ok(())
    }

    /// Workflow with reference overrides applied, then the perturbations.
    pub fn workflow(&self) -> Result<WorkflowConfig, CliError> {
        let mut base = WorkflowConfig {
            dt: self.workflow.dt,
            constants: self.workflow.constants.clone(),
            ..WorkflowConfig::default()
        };
        for (module, params) in &self.workflow.parameters {
            let idx = base.module_index(module)?;
            let def = &mut base.modules[idx];
            for (name, value) in params {
                let slot = def.params_ref.get_mut(name).ok_or_else(|| {
                    CliError::Config(format!("unknown parameter {name} of module {module}"))
                })?;
                *slot = *value;
            }
            def.params_updated = def.params_ref.clone();
        }
        let w = base.build_w1(&self.perturbations)?;
        w.validate()?;
        Ok(w)
    }

    pub fn cycle(&self) -> Result<DrivingCycle, CliError> {
        let dt = self.workflow.dt;
        match self.cycle.kind {
            CycleKind::Default => {
                let c = DrivingCycle::default_cycle();
                Ok(DrivingCycle::new(dt, c.speed_setpoint)?)
            }
            CycleKind::Random => Ok(DrivingCycle::random(self.cycle.steps, dt, substream(self.seed, "cycle"))),
            CycleKind::Csv => {
                let path = self.cycle.path.as_ref().expect("validated");
                let table = DataTable::load(path)
                    .map_err(|e| CliError::from_core_io(e, path))?;
                Ok(DrivingCycle::from_table(&table, dt)?)
            }
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Independent seed for a named consumer of randomness.
pub fn substream(seed: u64, name: &str) -> u64 {
    let stream = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[mixed]\nbogus = 1\n").is_err());
    }

    #[test]
    fn substreams_differ_and_repeat() {
        assert_eq!(substream(3, "schedule"), substream(3, "schedule"));
        assert_ne!(substream(3, "schedule"), substream(3, "embedding-init"));
        assert_ne!(substream(3, "schedule"), substream(4, "schedule"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.nodyn.alpha = 0.05;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn parameter_overrides_touch_reference_only() {
        let mut c = RunConfig::default();
        c.workflow.parameters.insert("Glider".into(), [("drag_area".to_string(), 0.7)].into());
        let w = c.workflow().unwrap();
        let g = w.modules.iter().find(|m| m.name == "Glider").unwrap();
        assert_eq!(g.params_ref["drag_area"], 0.7);
        assert!(!g.is_perturbed());
        c.workflow.parameters.insert("Glider".into(), [("nope".to_string(), 1.0)].into());
        assert!(matches!(c.workflow(), Err(CliError::Config(_))));
    }

    #[test]
    fn example_config_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("config.example.toml");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
    }

    #[test]
    fn csv_cycle_resolves_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.toml"), "[cycle]\nkind = \"csv\"\npath = \"cyc.csv\"\n").unwrap();
        let c = RunConfig::load(&dir.path().join("c.toml")).unwrap();
        assert_eq!(c.cycle.path.as_deref(), Some(dir.path().join("cyc.csv").as_path()));
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        std::fs::write(dir.path().join("cyc.csv"), "t,speed_setpoint\n0,0\n1,1\n2,2\n").unwrap();
        c.validate().unwrap();
        assert_eq!(c.cycle().unwrap().len(), 3);
    }
}
