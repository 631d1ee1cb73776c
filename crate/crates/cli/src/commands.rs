use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use perflow::checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, PartitionHeader};
use perflow::data::{generate, Dataset};
use perflow::eval::{
    class_purity, energy_distance, export_trajectories, mode_coverage, sliced_w2, straightness, MetricReport,
    TrajectoryRecord,
};
use perflow::nn::MlpParams;
use perflow::perflow::{apply_delta_w, distill, extract_delta_w, CfgMode, FlowModel, TrainState};
use perflow::rng::{self, derive_seed, normal_matrix};
use perflow::sampler::{default_cfg_scales, make_plan, parse_cfg_schedule, sample, PiecewiseFlow};
use perflow::schedule::{NoiseSchedule, WindowPartition};
use perflow::solver::sample_full;
use perflow::teacher::{PredictionMode, TeacherModel, TeacherTrainer};
use perflow::{Error, Label, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Command, Common, ModelSource};

// Sub-streams of the run seed.
const TEACHER_STREAM: u64 = 1;
const FINETUNE_STREAM: u64 = 2;
const DISTILL_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;
const REFERENCE_STREAM: u64 = 5;
const PROJECTION_STREAM: u64 = 6;
const TRAJECTORY_STREAM: u64 = 7;

/// Teacher loss is logged as the mean over blocks of this many steps.
const TEACHER_LOG_EVERY: usize = 500;

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::MakeData { common, n, shifted } => make_data(&common, n, shifted),
        Command::TrainTeacher { common, data } => train_teacher(&common, data),
        Command::FinetuneTeacher { common, base, data } => finetune_teacher(&common, &base, data),
        Command::Distill { common, teacher, data } => run_distill(&common, teacher, data),
        Command::Sample {
            common,
            source,
            n,
            cfg_schedule,
            label,
        } => run_sample(&common, &source, n, cfg_schedule.as_deref(), label, false),
        Command::Eval {
            common,
            samples,
            reference,
            student,
        } => run_eval(&common, &samples, reference, student),
        Command::DeltaW { theta, phi, out } => delta_w(&theta, &phi, &out),
        Command::ExportTraj {
            common,
            source,
            n,
            cfg_schedule,
            label,
        } => run_sample(&common, &source, n, cfg_schedule.as_deref(), label, true),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(cfg: &RunConfig, common: &Common, name: &str) -> Result<PathBuf> {
    let path = common.out.clone().unwrap_or_else(|| cfg.out_dir.join(name));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(path)
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_data(cfg: &RunConfig, path: Option<PathBuf>) -> Result<Dataset<f64>> {
    let data = match path.or_else(|| cfg.data_path.clone()) {
        Some(p) => Dataset::read_jsonl(p)?,
        None => generate(&cfg.data)?,
    };
    if data.dim() != cfg.model.in_dim {
        return Err(Error::Config(format!(
            "data dimension {} does not match the model input {}",
            data.dim(),
            cfg.model.in_dim
        )));
    }
    Ok(data)
}

fn shifted_spec(cfg: &RunConfig) -> Result<perflow::DataSpec> {
    if cfg.finetune.offset.is_empty() {
        return Ok(cfg.data.clone());
    }
    cfg.data.shift(&cfg.finetune.offset)
}

fn make_data(common: &Common, n: Option<usize>, shifted: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let mut spec = if shifted { shifted_spec(&cfg)? } else { cfg.data.clone() };
    if let Some(seed) = common.seed {
        spec = spec.with_seed(seed);
    }
    if let Some(n) = n {
        spec = spec.with_n(n);
    }
    let out = output(&cfg, common, if shifted { "data_shifted.jsonl" } else { "data.jsonl" })?;
    generate(&spec)?.write_jsonl(&out)?;
    println!("wrote {} samples to {}", spec.n, out.display());
    Ok(())
}

#[derive(Serialize)]
struct LossRecord {
    step: usize,
    loss: f64,
}

fn fit_and_log(
    trainer: &mut TeacherTrainer<f64>,
    cfg: &RunConfig,
    data: &Dataset<f64>,
    steps: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<LossRecord>> {
    let losses = trainer.fit(&cfg.schedule, data, steps, cfg.teacher.batch_size, rng)?;
    Ok(losses
        .into_iter()
        .enumerate()
        .map(|(i, loss)| LossRecord {
            step: ((i + 1) * TEACHER_LOG_EVERY).min(steps),
            loss,
        })
        .collect())
}

fn save_teacher(cfg: &RunConfig, trainer: &TeacherTrainer<f64>, steps: usize, out: &Path) -> Result<()> {
    let mut h = CheckpointHeader::new(CheckpointKind::Teacher, &trainer.spec, &cfg.schedule);
    h.prediction_mode = Some(trainer.mode);
    h.step = steps as u64;
    h.seed = cfg.seed;
    Checkpoint::new(h, trainer.params.clone())?.save(out)
}

fn train_teacher(common: &Common, data: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let data = load_data(&cfg, data)?;
    let steps = common.steps.unwrap_or(cfg.teacher.steps);
    let out = output(&cfg, common, "teacher.ckpt")?;
    let mut rng = rng::stream(cfg.seed, TEACHER_STREAM);
    let mut trainer = TeacherTrainer::new(cfg.model.clone(), &cfg.teacher, &mut rng)?;
    let log = fit_and_log(&mut trainer, &cfg, &data, steps, &mut rng)?;
    save_teacher(&cfg, &trainer, steps, &out)?;
    write_jsonl(&log_path(&out), &log)?;
    println!("teacher trained for {steps} steps, saved to {}", out.display());
    Ok(())
}

fn load_kind(path: &Path, kinds: &[CheckpointKind]) -> Result<Checkpoint<f64>> {
    let ck = Checkpoint::<f64>::load(path)?;
    if !kinds.contains(&ck.header.kind) {
        return Err(Error::Argument(format!(
            "{} holds a {:?} checkpoint, expected one of {kinds:?}",
            path.display(),
            ck.header.kind
        )));
    }
    Ok(ck)
}

fn teacher_from(ck: &Checkpoint<f64>) -> Result<TeacherModel<f64>> {
    TeacherModel::neural(
        ck.header.mlp_spec.clone(),
        ck.params.clone(),
        ck.header.prediction_mode.unwrap_or(PredictionMode::Eps),
    )
}

fn finetune_teacher(common: &Common, base: &Path, data: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let ck = load_kind(base, &[CheckpointKind::Teacher])?;
    let data = match data {
        Some(p) => Dataset::read_jsonl(p)?,
        None => generate(&shifted_spec(&cfg)?)?,
    };
    let steps = common.steps.unwrap_or(cfg.finetune.steps);
    let out = output(&cfg, common, "teacher_finetuned.ckpt")?;
    let mut tc = cfg.teacher.clone();
    tc.mode = ck.header.prediction_mode.unwrap_or(PredictionMode::Eps);
    let mut trainer = TeacherTrainer::from_params(ck.header.mlp_spec.clone(), ck.params, &tc)?;
    if data.dim() != trainer.spec.in_dim {
        return Err(Error::Config("fine-tuning data does not match the teacher input".into()));
    }
    let mut rng = rng::stream(cfg.seed, FINETUNE_STREAM);
    let log = fit_and_log(&mut trainer, &cfg, &data, steps, &mut rng)?;
    save_teacher(&cfg, &trainer, steps, &out)?;
    write_jsonl(&log_path(&out), &log)?;
    println!("teacher fine-tuned for {steps} steps, saved to {}", out.display());
    Ok(())
}

fn resolve_teacher(cfg: &RunConfig, path: Option<PathBuf>) -> Result<TeacherModel<f64>> {
    match path.or_else(|| cfg.teacher_path.clone()) {
        Some(p) => teacher_from(&load_kind(&p, &[CheckpointKind::Teacher])?),
        None => match cfg.data.gmm() {
            Some(g) => Ok(TeacherModel::Analytic(g.clone())),
            None => Err(Error::Config(
                "no teacher checkpoint given and the dataset has no closed-form teacher".into(),
            )),
        },
    }
}

fn run_distill(common: &Common, teacher: Option<PathBuf>, data: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.steps {
        cfg.distill.total_steps = s;
    }
    let teacher = resolve_teacher(&cfg, teacher)?;
    // A network teacher fixes the student architecture so that θ starts at φ.
    let spec = match &teacher {
        TeacherModel::Neural { spec, .. } => spec.clone(),
        TeacherModel::Analytic(_) => cfg.model.clone(),
    };
    let data = load_data(&cfg, data)?;
    let partition = cfg.partition()?;
    let out = output(&cfg, common, "student.ckpt")?;
    let mut log = BufWriter::new(File::create(log_path(&out))?);
    let mut state = TrainState::new(teacher, spec, &cfg.distill, derive_seed(cfg.seed, DISTILL_STREAM))?;
    distill(&mut state, &cfg.distill, &cfg.schedule, &partition, &data, |rec, _| {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
        Ok(())
    })?;
    log.flush()?;
    student_checkpoint(&cfg, &state.spec, state.sampling_params().clone(), &partition, state.step)?.save(&out)?;
    println!("distilled {} steps, saved to {}", state.step, out.display());
    Ok(())
}

fn student_checkpoint(
    cfg: &RunConfig,
    spec: &perflow::nn::MlpSpec,
    params: MlpParams<f64>,
    partition: &WindowPartition<f64>,
    step: usize,
) -> Result<Checkpoint<f64>> {
    let mut h = CheckpointHeader::new(CheckpointKind::Student, spec, &cfg.schedule);
    h.partition = Some(PartitionHeader::of(partition));
    h.target_mode = Some(cfg.distill.target_mode);
    h.cfg_mode = Some(cfg.distill.cfg_mode);
    h.step = step as u64;
    h.seed = cfg.seed;
    Checkpoint::new(h, params)
}

/// A model ready to generate: a piecewise student or a teacher run with DDIM.
enum Generator {
    Student {
        model: FlowModel<f64>,
        schedule: NoiseSchedule<f64>,
        partition: WindowPartition<f64>,
        cfg_mode: Option<CfgMode>,
    },
    Teacher {
        model: TeacherModel<f64>,
        schedule: NoiseSchedule<f64>,
    },
}

impl Generator {
    fn num_classes(&self) -> usize {
        match self {
            Generator::Student { model, .. } => model.spec.num_classes,
            Generator::Teacher { model, .. } => model.num_classes(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Generator::Student { model, .. } => model.spec.in_dim,
            Generator::Teacher { model, .. } => model.dim(),
        }
    }
}

fn student_from(ck: Checkpoint<f64>) -> Result<Generator> {
    let h = &ck.header;
    let partition = h
        .partition
        .as_ref()
        .ok_or_else(|| Error::Format("student checkpoint lacks a partition".into()))?
        .partition()?;
    let mode = h
        .target_mode
        .ok_or_else(|| Error::Format("student checkpoint lacks a target mode".into()))?;
    Ok(Generator::Student {
        schedule: h.schedule()?,
        cfg_mode: h.cfg_mode,
        model: FlowModel::new(h.mlp_spec.clone(), ck.params, mode)?,
        partition,
    })
}

fn resolve_generator(source: &ModelSource) -> Result<Generator> {
    match (&source.student, &source.base, &source.delta, &source.teacher) {
        (Some(s), None, None, None) => student_from(load_kind(s, &[CheckpointKind::Student])?),
        (None, Some(b), Some(d), None) => {
            let base = load_kind(b, &[CheckpointKind::Teacher, CheckpointKind::Student])?;
            let delta = load_kind(d, &[CheckpointKind::Delta])?;
            if base.header.mlp_spec != delta.header.mlp_spec {
                return Err(Error::Argument("base and delta have different architectures".into()));
            }
            let params = apply_delta_w(&base.params, &delta.params)?;
            let mut header = delta.header;
            header.kind = CheckpointKind::Student;
            student_from(Checkpoint::new(header, params)?)
        }
        (None, None, None, Some(t)) => {
            let ck = load_kind(t, &[CheckpointKind::Teacher])?;
            Ok(Generator::Teacher {
                schedule: ck.header.schedule()?,
                model: teacher_from(&ck)?,
            })
        }
        _ => Err(Error::Argument(
            "choose exactly one of --student, --base with --delta, or --teacher".into(),
        )),
    }
}

fn sample_labels(classes: usize, fixed: Option<usize>, n: usize) -> Result<Vec<Label>> {
    if classes == 0 {
        return match fixed {
            Some(_) => Err(Error::Argument("the model is unconditional; drop --label".into())),
            None => Ok(vec![None; n]),
        };
    }
    match fixed {
        Some(c) if c >= classes => Err(Error::Argument(format!("label {c} out of range for {classes} classes"))),
        Some(c) => Ok(vec![Some(c); n]),
        None => Ok((0..n).map(|i| Some(i % classes)).collect()),
    }
}

fn generate_with(
    generator: &Generator,
    cfg: &RunConfig,
    steps: Option<usize>,
    cfg_schedule: Option<Vec<f64>>,
    z1: &Array2<f64>,
    labels: &[Label],
    record: bool,
) -> Result<(Array2<f64>, Option<Vec<TrajectoryRecord>>)> {
    match generator {
        Generator::Student {
            model,
            schedule,
            partition,
            cfg_mode,
        } => {
            let k = partition.k();
            let conditional = model.spec.num_classes > 0;
            let mode = cfg_mode.filter(|_| conditional);
            let mut plan = make_plan(k, steps.unwrap_or(k), mode, model.mode)?;
            if let Some(s) = cfg_schedule {
                if !conditional && s.iter().any(|&w| w != 1.0) {
                    return Err(Error::Argument("guidance needs a conditional model".into()));
                }
                plan = plan.with_cfg_scales(s)?;
            } else {
                plan.cfg_scales = default_cfg_scales(k, mode);
            }
            sample(model, schedule, partition, &plan, z1.view(), labels, record)
        }
        Generator::Teacher { model, schedule } => {
            if cfg_schedule.is_some() {
                return Err(Error::Argument("--cfg-schedule applies to students only".into()));
            }
            let w = if cfg.solver.guidance_enabled && model.num_classes() > 0 {
                cfg.solver.guidance_scale
            } else {
                1.0
            };
            sample_full(model, schedule, steps.unwrap_or(64), z1.view(), labels, w, record)
        }
    }
}

fn run_sample(
    common: &Common,
    source: &ModelSource,
    n: Option<usize>,
    cfg_schedule: Option<&str>,
    label: Option<usize>,
    trajectories: bool,
) -> Result<()> {
    let cfg = load_config(common)?;
    let generator = resolve_generator(source)?;
    let n = n.unwrap_or(if trajectories { cfg.eval.n_trajectories } else { cfg.sample.n });
    if n == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    let scales = match cfg_schedule {
        Some(s) => Some(parse_cfg_schedule(s)?),
        None => cfg.sample.cfg_schedule.clone(),
    };
    let labels = sample_labels(generator.num_classes(), label.or(cfg.sample.label), n)?;
    let z1 = normal_matrix::<f64>(n, generator.dim(), &mut rng::stream(cfg.seed, NOISE_STREAM));
    let steps = common.steps.or(cfg.sample.steps);
    let (x, records) = generate_with(&generator, &cfg, steps, scales, &z1, &labels, trajectories)?;
    if trajectories {
        let out = output(&cfg, common, "trajectories.jsonl")?;
        export_trajectories(&records.unwrap_or_default(), &out)?;
        println!("wrote {n} trajectories to {}", out.display());
    } else {
        let out = output(&cfg, common, "samples.jsonl")?;
        Dataset::new(x, labels)?.write_jsonl(&out)?;
        println!("wrote {n} samples to {}", out.display());
    }
    Ok(())
}

fn run_eval(common: &Common, samples: &Path, reference: Option<PathBuf>, student: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let samples = Dataset::<f64>::read_jsonl(samples)?;
    let spec = &cfg.data;
    let reference = match reference {
        Some(p) => Dataset::read_jsonl(p)?,
        None => generate(
            &spec
                .with_seed(derive_seed(cfg.seed, REFERENCE_STREAM))
                .with_n(cfg.eval.n_reference),
        )?,
    };
    let ed = energy_distance(samples.x.view(), reference.x.view())?;
    let sw = sliced_w2(
        samples.x.view(),
        reference.x.view(),
        cfg.eval.projections,
        &mut rng::stream(cfg.seed, PROJECTION_STREAM),
    )?;
    let gmm = spec.gmm();
    let coverage = gmm
        .map(|g| mode_coverage(samples.x.view(), g, cfg.eval.coverage_threshold))
        .transpose()?;
    let purity = match (gmm, samples.labels.iter().copied().collect::<Option<Vec<usize>>>()) {
        (Some(g), Some(l)) if g.labels.is_some() && !l.is_empty() => Some(class_purity(samples.x.view(), &l, g)?),
        _ => None,
    };
    let straight = match student {
        Some(p) => student_straightness(&cfg, &p)?,
        None => Vec::new(),
    };
    let report = MetricReport {
        energy_distance: ed,
        sliced_w2: sw,
        straightness_per_window: straight,
        mode_coverage: coverage,
        class_purity: purity,
        n_samples: samples.len(),
        seed: cfg.seed,
    };
    report.validate()?;
    let json = report.to_json()?;
    let out = output(&cfg, common, "report.json")?;
    fs::write(&out, format!("{json}\n"))?;
    println!("{json}");
    Ok(())
}

fn student_straightness(cfg: &RunConfig, path: &Path) -> Result<Vec<f64>> {
    let Generator::Student {
        model,
        schedule,
        partition,
        ..
    } = student_from(load_kind(path, &[CheckpointKind::Student])?)?
    else {
        unreachable!("student_from only builds students")
    };
    let n = cfg.eval.n_trajectories;
    let labels = sample_labels(model.spec.num_classes, None, n)?;
    let z1 = normal_matrix::<f64>(n, model.spec.in_dim, &mut rng::stream(cfg.seed, TRAJECTORY_STREAM));
    let plan = make_plan(partition.k(), partition.k(), None, model.mode)?;
    let (_, records) = sample(&model, &schedule, &partition, &plan, z1.view(), &labels, true)?;
    let field = PiecewiseFlow::new(&model, &schedule, &partition)?;
    straightness(&field, &partition, &records.unwrap_or_default(), &labels, cfg.eval.probes)
}

fn delta_w(theta: &Path, phi: &Path, out: &Path) -> Result<()> {
    let theta = load_kind(theta, &[CheckpointKind::Student])?;
    let phi = load_kind(phi, &[CheckpointKind::Teacher])?;
    if theta.header.mlp_spec != phi.header.mlp_spec {
        return Err(Error::Argument("theta and phi have different architectures".into()));
    }
    let delta = extract_delta_w(&theta.params, &phi.params)?;
    let mut header = theta.header.clone();
    header.kind = CheckpointKind::Delta;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Checkpoint::new(header, delta)?.save(out)?;
    println!("wrote weight difference to {}", out.display());
    Ok(())
}
