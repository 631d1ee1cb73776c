//! The run configuration: one JSON document, every section optional.

use std::fs;
use std::path::{Path, PathBuf};

use perflow::data::DatasetSpec;
use perflow::nn::MlpSpec;
use perflow::perflow::{CfgMode, DistillConfig};
use perflow::schedule::{NoiseSchedule, WindowPartition};
use perflow::solver::SolverConfig;
use perflow::teacher::TeacherTrainConfig;
use perflow::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    /// Total inference steps; `None` means one per window.
    pub steps: Option<usize>,
    /// Per-window guidance scales, noisiest window first.
    pub cfg_schedule: Option<Vec<f64>>,
    /// Condition every sample on this class instead of cycling through classes.
    pub label: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 4096,
            steps: None,
            cfg_schedule: None,
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Translation applied to the mixture for the customized dataset.
    pub offset: Vec<f64>,
    pub steps: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            offset: vec![1.5, 0.0],
            steps: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Size of the fresh reference draw when no reference file is given.
    pub n_reference: usize,
    pub projections: usize,
    pub probes: usize,
    pub coverage_threshold: f64,
    /// Trajectories used for the straightness diagnostic.
    pub n_trajectories: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_reference: 4096,
            projections: perflow::eval::DEFAULT_PROJECTIONS,
            probes: perflow::eval::DEFAULT_PROBES,
            coverage_threshold: perflow::eval::DEFAULT_COVERAGE_THRESHOLD,
            n_trajectories: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: NoiseSchedule<f64>,
    pub model: MlpSpec,
    pub data: DatasetSpec<f64>,
    /// JSONL dataset used instead of generating `data`.
    pub data_path: Option<PathBuf>,
    /// Teacher checkpoint; without one, mixture datasets fall back to the
    /// closed-form teacher.
    pub teacher_path: Option<PathBuf>,
    pub teacher: TeacherTrainConfig,
    pub distill: DistillConfig,
    pub solver: SolverConfig,
    pub sample: SampleConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            schedule: NoiseSchedule::default(),
            model: MlpSpec {
                hidden: vec![128; 3],
                ..MlpSpec::default()
            },
            data: DatasetSpec::circle_gmm(50_000, 0),
            data_path: None,
            teacher_path: None,
            teacher: TeacherTrainConfig::default(),
            distill: DistillConfig::default(),
            solver: SolverConfig::default(),
            sample: SampleConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn partition(&self) -> Result<WindowPartition<f64>> {
        WindowPartition::uniform(self.distill.k)
    }

    /// Rejects every inconsistency a later stage would trip over.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.schedule.validate()?;
        self.model.validate()?;
        self.data.validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        self.solver.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.model.in_dim != self.data.dim() {
            return bad(format!(
                "model input {} does not match data dimension {}",
                self.model.in_dim,
                self.data.dim()
            ));
        }
        if self.data.labeled {
            let classes = self.data.gmm().map(|g| g.num_classes()).unwrap_or(2);
            if self.model.num_classes != classes {
                return bad(format!(
                    "labeled data has {classes} classes but the model expects {}",
                    self.model.num_classes
                ));
            }
        } else if self.model.num_classes > 0 {
            return bad("a conditional model needs labeled data".into());
        }
        if self.distill.cfg_mode == CfgMode::Fixed && self.model.num_classes == 0 {
            return bad("cfg-fixed distillation needs a conditional model".into());
        }
        if self.sample.n == 0 || self.eval.n_reference == 0 || self.eval.n_trajectories == 0 {
            return bad("sample and reference sizes must be positive".into());
        }
        if let Some(steps) = self.sample.steps {
            if steps < self.distill.k {
                return bad(format!("{steps} sampling steps cannot cover {} windows", self.distill.k));
            }
        }
        if let Some(s) = &self.sample.cfg_schedule {
            if s.len() != self.distill.k {
                return bad(format!("cfg_schedule has {} scales for {} windows", s.len(), self.distill.k));
            }
            if s.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return bad("guidance scales must be finite and >= 0".into());
            }
        }
        if let Some(c) = self.sample.label {
            if c >= self.model.num_classes {
                return bad(format!("label {c} out of range for {} classes", self.model.num_classes));
            }
        }
        if !self.finetune.offset.is_empty() && self.finetune.offset.len() != self.data.dim() {
            return bad(format!(
                "finetune offset has {} entries for dimension {}",
                self.finetune.offset.len(),
                self.data.dim()
            ));
        }
        if self.eval.projections == 0 || self.eval.probes == 0 {
            return bad("projections and probes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eval.coverage_threshold) {
            return bad("coverage_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }
}
