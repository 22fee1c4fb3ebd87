//! The experiment loop: pre-train, inject and fine-tune, generate,
//! evaluate and sweep, each producing a self-describing run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{PretrainData, RunConfig};
use crate::adapters::{inject_adapters, ConditionEncoder, ParameterPartition};
use crate::duration::{duration_train_step, expand_to_alignment, heldout_mae, DurationExample, DurationModel};
use crate::error::{Error, Result};
use crate::flow::{finetune_step, pretrain_step, MaskSpec, TelemetryLog, TelemetryRecord, TrainingExample};
use crate::numerics::{derive_seed, SeededRng, Tensor};
use crate::ode::{generate, GenerationRequest};
use crate::optim::{Adam, OptimizerConfig};
use crate::tasks::{
    generate_corpus, parse_z_f, read_features, word_vocab, write_features, Corpus, Detector, Label, TaskKind, TaskSpec,
    Utterance,
};
use crate::transformer::VectorFieldModel;

pub const ACOUSTIC_CHECKPOINT: &str = "acoustic.ckpt";
pub const DURATION_CHECKPOINT: &str = "duration.ckpt";
const FINETUNE_DATA_SALT: u64 = 0xf17e;

/// Layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the directory and stores the config copy and fingerprint.
    pub fn create(root: impl Into<PathBuf>, config: &RunConfig) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::write(root.join("config.toml"), config.to_toml()?)?;
        fs::write(root.join("fingerprint.txt"), format!("{}\n", config.fingerprint()))?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(self.root.join("config.toml"))
    }

    pub fn acoustic(&self) -> PathBuf {
        self.root.join(ACOUSTIC_CHECKPOINT)
    }

    pub fn duration(&self) -> PathBuf {
        self.root.join(DURATION_CHECKPOINT)
    }

    pub fn periodic(&self, prefix: &str, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("{prefix}-{step:06}.ckpt"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Unannotated version of the task corpus used for pre-training.
pub fn pretrain_corpus(config: &RunConfig) -> Result<Corpus> {
    let mut spec = config.task.clone();
    spec.annotation_rate = 0.0;
    generate_corpus(&spec, config.schedule.corpus_size, config.seeds.data)
}

/// Annotated corpus used for fine-tuning and held-out evaluation.
pub fn finetune_corpus(config: &RunConfig) -> Result<Corpus> {
    generate_corpus(
        &config.task,
        config.schedule.corpus_size,
        derive_seed(config.seeds.data, FINETUNE_DATA_SALT),
    )
}

/// Number of training utterances a data fraction selects.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1))
}

fn acoustic_example(u: &Utterance, condition: Vec<usize>, mask: MaskSpec) -> TrainingExample {
    TrainingExample {
        x1: u.features.clone(),
        symbols: u.frame_symbols(),
        condition,
        mask,
    }
}

fn duration_example(u: &Utterance, condition: Vec<usize>) -> DurationExample {
    DurationExample {
        symbols: u.symbols.clone(),
        durations: u.aligned_durations(),
        condition,
    }
}

fn mean_duration(utts: &[Utterance]) -> f64 {
    let all: Vec<usize> = utts.iter().flat_map(|u| u.aligned_durations()).collect();
    all.iter().sum::<usize>() as f64 / all.len().max(1) as f64
}

fn batch_indices(n: usize, batch: usize, rng: &mut SeededRng) -> Vec<usize> {
    (0..batch).map(|_| rng.below(n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub duration_final_loss: Option<f64>,
    pub params: usize,
    pub wall_time_s: f64,
}

/// Pre-trains the acoustic model (and, on task data, the duration model)
/// without any condition pathway.
pub fn run_pretrain(config: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    config.validate()?;
    if config.adapter.is_some() {
        return Err(Error::Config(
            "pre-training config must not contain an adapter spec".into(),
        ));
    }
    let dir = RunDir::create(out, config)?;
    let fp = config.fingerprint();
    let started = Instant::now();
    let sched = &config.schedule;
    let mut model = VectorFieldModel::new(config.backbone.clone(), config.seeds.model)?;
    let mut rng = SeededRng::new(config.seeds.train);
    let mut opt = Adam::new(config.optimizer.clone());
    let mut log = TelemetryLog::open(dir.file("loss.jsonl"))?;
    let everything = |m: &VectorFieldModel| ParameterPartition::all_trainable(&m.store);
    Checkpoint::acoustic(&model, everything(&model), &fp, 0).save(dir.periodic("acoustic", 0))?;

    let corpus = match sched.pretrain_data {
        PretrainData::Task => Some(pretrain_corpus(config)?),
        PretrainData::TwoMode => None,
    };
    let mut final_loss = None;
    for step in 1..=sched.pretrain_steps {
        let batch: Vec<TrainingExample> = match &corpus {
            Some(c) => batch_indices(c.train.len(), sched.batch_size, &mut rng)
                .into_iter()
                .map(|i| acoustic_example(&c.train[i], vec![], MaskSpec::sample(&mut rng)))
                .collect(),
            None => (0..sched.batch_size)
                .map(|_| TrainingExample {
                    x1: config.toy.sample(&mut rng).0,
                    symbols: config.toy.symbols(),
                    condition: vec![],
                    mask: MaskSpec::sample(&mut rng),
                })
                .collect(),
        };
        let loss = pretrain_step(&mut model, &batch, &mut opt, &mut rng, config.path, sched.loss_mask)?;
        final_loss = Some(loss);
        log.append(&TelemetryRecord {
            step: step as u64,
            loss,
            wall_time_s: started.elapsed().as_secs_f64(),
            trainable_params: model.param_count(),
        })?;
        if sched.checkpoint_every > 0 && step % sched.checkpoint_every == 0 {
            Checkpoint::acoustic(&model, everything(&model), &fp, step as u64).save(dir.periodic("acoustic", step))?;
        }
    }
    Checkpoint::acoustic(&model, everything(&model), &fp, sched.pretrain_steps as u64).save(dir.acoustic())?;

    let mut dur = DurationModel::new(config.duration.clone(), derive_seed(config.seeds.model, 0xd0))?;
    let mut duration_final_loss = None;
    if let Some(c) = &corpus {
        dur.set_output_offset(mean_duration(&c.train))?;
        let mut dlog = TelemetryLog::open(dir.file("duration_loss.jsonl"))?;
        let mut dopt = Adam::new(config.optimizer.clone());
        for step in 1..=sched.duration_pretrain_steps {
            let batch: Vec<DurationExample> = batch_indices(c.train.len(), sched.batch_size, &mut rng)
                .into_iter()
                .map(|i| duration_example(&c.train[i], vec![]))
                .collect();
            let loss = duration_train_step(&mut dur, &batch, &mut dopt, &mut rng, None)?;
            duration_final_loss = Some(loss);
            dlog.append(&TelemetryRecord {
                step: step as u64,
                loss,
                wall_time_s: started.elapsed().as_secs_f64(),
                trainable_params: dur.param_count(),
            })?;
        }
    }
    let dpart = ParameterPartition::all_trainable(&dur.store);
    Checkpoint::duration(&dur, dpart, &fp, sched.duration_pretrain_steps as u64).save(dir.duration())?;

    let summary = PretrainSummary {
        steps: sched.pretrain_steps,
        final_loss,
        duration_final_loss,
        params: model.param_count(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    fs::write(dir.file("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub task: TaskKind,
    pub adapter_kind: String,
    pub adaptive_params: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub backbone_params: usize,
    pub train_utterances: usize,
    pub acoustic_steps: usize,
    pub duration_steps: usize,
    pub final_loss: Option<f64>,
    pub duration_heldout_mae: f64,
    pub encoder_fit_loss: f64,
    pub wall_time_s: f64,
}

/// Loads a base run's checkpoint, refusing a fingerprint mismatch unless
/// `allow_mismatch` is set.
pub fn load_base(base: &Path, config: &RunConfig, allow_mismatch: bool) -> Result<(Checkpoint, Checkpoint)> {
    let fp = config.fingerprint();
    let base = RunDir::open(base);
    let a = Checkpoint::load_checked(base.acoustic(), &fp, allow_mismatch)?;
    let d = Checkpoint::load_checked(base.duration(), &fp, allow_mismatch)?;
    Ok((a, d))
}

/// Injects the configured adapters into the base models and fine-tunes the
/// trainable partition on the annotated corpus.
pub fn run_finetune(config: &RunConfig, base: &Path, out: &Path, allow_mismatch: bool) -> Result<FinetuneSummary> {
    config.validate()?;
    let spec = config
        .adapter
        .clone()
        .ok_or_else(|| Error::Config("fine-tuning needs an [adapter] section".into()))?;
    let (base_a, base_d) = load_base(base, config, allow_mismatch)?;
    if base_a.has_adapters() || base_d.has_adapters() {
        return Err(Error::AlreadyInjected);
    }
    let dir = RunDir::create(out, config)?;
    let fp = config.fingerprint();
    let started = Instant::now();
    let sched = &config.schedule;
    let mut model = base_a.into_acoustic()?;
    let mut dur = base_d.into_duration()?;
    let backbone_params = model.param_count();

    let corpus = finetune_corpus(config)?;
    let n_train = fraction_count(corpus.train.len(), sched.data_fraction);
    let train = &corpus.train[..n_train];
    eprintln!(
        "fine-tuning on {n_train} of {} training utterances (data_fraction {})",
        corpus.train.len(),
        sched.data_fraction
    );

    let vocab = word_vocab(config.task.n_symbols);
    let enc_seed = derive_seed(config.seeds.model, 0xe4c);
    let (encoder, mut enc_store) = ConditionEncoder::build(spec.encoder, vocab, enc_seed)?;
    let texts = train
        .iter()
        .map(|u| encoder.tokenize(&u.z_f()))
        .collect::<Result<Vec<_>>>()?;
    let encoder_fit_loss = encoder.fit(&mut enc_store, &texts, sched.encoder_fit_steps, enc_seed)?;

    let inject_seed = derive_seed(config.seeds.train, 0x1a);
    let partition = inject_adapters(&mut model, &spec, encoder.clone(), enc_store.clone(), inject_seed)?;
    let dpartition = inject_adapters(&mut dur, &spec, encoder, enc_store, derive_seed(inject_seed, 1))?;

    let opt_config = OptimizerConfig {
        lr: sched.finetune_lr,
        ..config.optimizer.clone()
    };
    let mut rng = SeededRng::new(derive_seed(config.seeds.train, 0xf7));
    let mut opt = Adam::new(opt_config.clone());
    let mut log = TelemetryLog::open(dir.file("loss.jsonl"))?;
    let trainable_params = partition.trainable_count(&model.store);
    let a_steps = sched.acoustic_finetune_steps(config.task.task);
    let mut final_loss = None;
    let tokens: Vec<Vec<usize>> = texts;
    for step in 1..=a_steps {
        let batch: Vec<TrainingExample> = batch_indices(train.len(), sched.batch_size, &mut rng)
            .into_iter()
            .map(|i| acoustic_example(&train[i], tokens[i].clone(), MaskSpec::sample(&mut rng)))
            .collect();
        let loss = finetune_step(
            &mut model,
            &partition,
            &batch,
            &mut opt,
            &mut rng,
            config.path,
            sched.loss_mask,
        )?;
        final_loss = Some(loss);
        log.append(&TelemetryRecord {
            step: step as u64,
            loss,
            wall_time_s: started.elapsed().as_secs_f64(),
            trainable_params,
        })?;
        if sched.checkpoint_every > 0 && step % sched.checkpoint_every == 0 {
            Checkpoint::acoustic(&model, partition.clone(), &fp, step as u64).save(dir.periodic("acoustic", step))?;
        }
    }
    Checkpoint::acoustic(&model, partition.clone(), &fp, a_steps as u64).save(dir.acoustic())?;

    let d_steps = sched.duration_finetune_steps(config.task.task);
    let mut dopt = Adam::new(opt_config);
    let mut dlog = TelemetryLog::open(dir.file("duration_loss.jsonl"))?;
    for step in 1..=d_steps {
        let batch: Vec<DurationExample> = batch_indices(train.len(), sched.batch_size, &mut rng)
            .into_iter()
            .map(|i| duration_example(&train[i], tokens[i].clone()))
            .collect();
        let loss = duration_train_step(&mut dur, &batch, &mut dopt, &mut rng, Some(&dpartition))?;
        dlog.append(&TelemetryRecord {
            step: step as u64,
            loss,
            wall_time_s: started.elapsed().as_secs_f64(),
            trainable_params: dpartition.trainable_count(&dur.store),
        })?;
    }
    Checkpoint::duration(&dur, dpartition, &fp, d_steps as u64).save(dir.duration())?;

    let conditioning = dur.conditioning.as_ref().expect("injected");
    let heldout: Vec<DurationExample> = corpus
        .heldout
        .iter()
        .map(|u| Ok(duration_example(u, conditioning.tokenize(&u.z_f())?)))
        .collect::<Result<_>>()?;
    let summary = FinetuneSummary {
        task: config.task.task,
        adapter_kind: format!("{:?}/{:?}", spec.kind, spec.lora_placement),
        adaptive_params: partition.adaptive_count(&model.store),
        trainable_params,
        frozen_params: partition.frozen_count(&model.store),
        backbone_params,
        train_utterances: n_train,
        acoustic_steps: a_steps,
        duration_steps: d_steps,
        final_loss,
        duration_heldout_mae: heldout_mae(&dur, &heldout)?,
        encoder_fit_loss,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    fs::write(dir.file("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// A leading slice of a stored feature file used as the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRef {
    pub features: String,
    pub frames: usize,
}

/// One line of a request file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestRecord {
    pub id: String,
    pub symbols: Vec<usize>,
    /// Annotated transcript; omitted or empty for none.
    #[serde(default)]
    pub z_f: String,
    /// Frames per symbol; predicted by the duration model when omitted.
    #[serde(default)]
    pub durations: Option<Vec<usize>>,
    #[serde(default)]
    pub prompt: Option<PromptRef>,
    pub seed: u64,
}

/// One line of a generation manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedRecord {
    pub id: String,
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub features: Option<String>,
    #[serde(default)]
    pub durations: Vec<usize>,
    pub z_f: String,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Requests that regenerate each held-out utterance with its gold
/// durations and annotations.
pub fn heldout_requests(corpus: &Corpus, seed: u64) -> Vec<RequestRecord> {
    corpus
        .heldout
        .iter()
        .enumerate()
        .map(|(i, u)| RequestRecord {
            id: u.id.clone(),
            symbols: u.symbols.clone(),
            z_f: u.z_f(),
            durations: Some(u.aligned_durations()),
            prompt: None,
            seed: derive_seed(seed, i as u64),
        })
        .collect()
}

/// Models loaded from a run directory for generation.
pub struct Generator {
    pub acoustic: VectorFieldModel,
    pub duration: Option<DurationModel>,
    pub solver: crate::ode::SolverConfig,
}

impl Generator {
    pub fn load(config: &RunConfig, run: &Path, allow_mismatch: bool) -> Result<Self> {
        let fp = config.fingerprint();
        let dir = RunDir::open(run);
        let acoustic = Checkpoint::load_checked(dir.acoustic(), &fp, allow_mismatch)?.into_acoustic()?;
        let duration = if dir.duration().exists() {
            Some(Checkpoint::load_checked(dir.duration(), &fp, allow_mismatch)?.into_duration()?)
        } else {
            None
        };
        Ok(Self {
            acoustic,
            duration,
            solver: config.solver,
        })
    }

    /// Features and per-symbol durations for one request.
    pub fn generate(&self, req: &RequestRecord, base: &Path) -> Result<(Tensor, Vec<usize>)> {
        let has_zf = !req.z_f.trim().is_empty();
        if has_zf && !self.acoustic.is_conditioned() {
            return Err(Error::NoAdapters(
                "request carries z_f but the checkpoint has no adapters".into(),
            ));
        }
        let durations = match &req.durations {
            Some(d) => d.clone(),
            None => {
                let dm = self
                    .duration
                    .as_ref()
                    .ok_or_else(|| Error::invalid("no durations given and no duration model in the run"))?;
                let z = (has_zf && dm.conditioning.is_some()).then_some(req.z_f.as_str());
                dm.predict_durations(&req.symbols, z)?
            }
        };
        let frame_symbols = expand_to_alignment(&req.symbols, &durations)?;
        let prompt = match &req.prompt {
            None => None,
            Some(p) => {
                let path = base.join(&p.features);
                let full = read_features(&path)?;
                if p.frames == 0 || p.frames > full.rows() {
                    return Err(Error::invalid(format!(
                        "prompt of {} frames from {}",
                        p.frames,
                        path.display()
                    )));
                }
                Some(full.slice_rows(0, p.frames))
            }
        };
        let out = generate(
            &self.acoustic,
            &GenerationRequest {
                symbols: frame_symbols,
                z_f: req.z_f.clone(),
                prompt,
                solver: self.solver,
                seed: req.seed,
            },
        )?;
        Ok((out, durations))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub generated: usize,
    pub rejected: usize,
    pub wall_time_s: f64,
}

/// Generates every request of `requests` into `out`, writing
/// `manifest.jsonl` and `features/<id>.bin`. Rejected requests are
/// recorded with their reason.
pub fn run_generate(
    config: &RunConfig,
    run: &Path,
    requests: &Path,
    out: &Path,
    allow_mismatch: bool,
) -> Result<GenerateSummary> {
    config.validate()?;
    let started = Instant::now();
    let generator = Generator::load(config, run, allow_mismatch)?;
    let reqs: Vec<RequestRecord> = read_jsonl(requests)?;
    let base = requests.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(out.join("features"))?;
    let mut manifest = Vec::with_capacity(reqs.len());
    for req in &reqs {
        let rec = match generator.generate(req, base) {
            Ok((features, durations)) => {
                let rel = format!("features/{}.bin", req.id);
                write_features(out.join(&rel), &features)?;
                GeneratedRecord {
                    id: req.id.clone(),
                    ok: true,
                    error: None,
                    features: Some(rel),
                    durations,
                    z_f: req.z_f.clone(),
                }
            }
            Err(e) => GeneratedRecord {
                id: req.id.clone(),
                ok: false,
                error: Some(e.to_string()),
                features: None,
                durations: vec![],
                z_f: req.z_f.clone(),
            },
        };
        manifest.push(rec);
    }
    write_jsonl(&out.join("manifest.jsonl"), &manifest)?;
    let rejected = manifest.iter().filter(|r| !r.ok).count();
    Ok(GenerateSummary {
        generated: manifest.len() - rejected,
        rejected,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricRecord {
    Utterance {
        id: String,
        gold: Vec<usize>,
        predicted: Vec<usize>,
    },
    Missing {
        id: String,
        reason: String,
    },
    Summary {
        task: TaskKind,
        evaluated: usize,
        missing: usize,
        f1: f64,
        precision: f64,
        recall: f64,
        per_category: Vec<(TaskKind, f64)>,
        /// Mean detector statistic at requested positions and elsewhere:
        /// voiced energy for emphasis, aligned frames for pause, burst
        /// strength for burst.
        annotated_mean: f64,
        unannotated_mean: f64,
    },
}

/// Scores generations against the annotations their requests asked for.
pub fn run_evaluate(generated: &Path, requests: &Path, task: &TaskSpec, out: &Path) -> Result<Vec<MetricRecord>> {
    let reqs: Vec<RequestRecord> = read_jsonl(requests)?;
    let manifest: Vec<GeneratedRecord> = read_jsonl(&generated.join("manifest.jsonl"))?;
    let detector = Detector::for_spec(task)?;
    let mut records = Vec::new();
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let (mut on, mut off) = (Vec::new(), Vec::new());
    let mut evaluated = 0;
    for (i, req) in reqs.iter().enumerate() {
        let found = manifest.iter().find(|m| m.id == req.id);
        let rec = match found {
            Some(r) if r.ok && r.features.is_some() => r,
            Some(r) => {
                records.push(MetricRecord::Missing {
                    id: req.id.clone(),
                    reason: r.error.clone().unwrap_or_else(|| "generation failed".into()),
                });
                continue;
            }
            None => {
                records.push(MetricRecord::Missing {
                    id: req.id.clone(),
                    reason: "no output in manifest".into(),
                });
                continue;
            }
        };
        let features = match read_features(generated.join(rec.features.as_deref().unwrap_or_default())) {
            Ok(f) => f,
            Err(e) => {
                records.push(MetricRecord::Missing {
                    id: req.id.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let (_, requested) = parse_z_f(&req.z_f)?;
        let g: Vec<usize> = requested
            .iter()
            .filter(|a| a.kind == task.task)
            .map(|a| a.position)
            .collect();
        let p: Vec<usize> = detector
            .detect(&features, &rec.durations)?
            .iter()
            .map(|a| a.position)
            .collect();
        let stats = position_statistic(&detector, &features, &rec.durations)?;
        for (pos, s) in stats.into_iter().enumerate() {
            if g.contains(&pos) {
                on.push(s);
            } else {
                off.push(s);
            }
        }
        let label = |position| Label {
            utterance: i,
            position,
            kind: task.task,
        };
        pred.extend(p.iter().copied().map(label));
        gold.extend(g.iter().copied().map(label));
        evaluated += 1;
        records.push(MetricRecord::Utterance {
            id: req.id.clone(),
            gold: g,
            predicted: p,
        });
    }
    let report = crate::tasks::f1_micro(&pred, &gold, &[task.task]);
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    records.push(MetricRecord::Summary {
        task: task.task,
        evaluated,
        missing: reqs.len() - evaluated,
        f1: report.micro.f1,
        precision: report.micro.precision,
        recall: report.micro.recall,
        per_category: report.per_category.iter().map(|(k, v)| (*k, v.f1)).collect(),
        annotated_mean: mean(&on),
        unannotated_mean: mean(&off),
    });
    fs::create_dir_all(out)?;
    write_jsonl(&out.join("metrics.jsonl"), &records)?;
    Ok(records)
}

/// The per-symbol quantity the detector thresholds for the task.
pub fn position_statistic(detector: &Detector, features: &Tensor, durations: &[usize]) -> Result<Vec<f64>> {
    match detector.spec.task {
        TaskKind::Emphasis => detector.symbol_energies(features, durations),
        TaskKind::Pause => Ok(durations.iter().map(|&d| d as f64).collect()),
        TaskKind::Burst => {
            let mut out = Vec::with_capacity(durations.len());
            let mut f = 0;
            for &d in durations {
                out.push(detector.burst_strength(features, f, f + d));
                f += d;
            }
            Ok(out)
        }
    }
}

/// The summary line of a report.
pub fn summary_f1(records: &[MetricRecord]) -> Option<f64> {
    records.iter().find_map(|r| match r {
        MetricRecord::Summary { f1, .. } => Some(*f1),
        _ => None,
    })
}

/// Sweepable settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LoraRank,
    CrossAttnDim,
    DataFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub task: TaskKind,
    pub f1: Option<f64>,
    pub trainable_params: Option<usize>,
    pub adaptive_params: Option<usize>,
    pub train_utterances: Option<usize>,
    pub error: Option<String>,
}

/// Applies one sweep value to a config.
pub fn apply_axis(config: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut c = config.clone();
    let spec = c
        .adapter
        .as_mut()
        .ok_or_else(|| Error::Config("sweeps need an [adapter] section".into()))?;
    match axis {
        SweepAxis::LoraRank => {
            let r = value as usize;
            if r == 0 || r as f64 != value {
                return Err(Error::Config(format!("LoRA rank {value} is not a positive integer")));
            }
            spec.lora.rank = r;
            spec.lora.alpha = r as f64;
        }
        SweepAxis::CrossAttnDim => {
            let d = value as usize;
            if d == 0 || d as f64 != value || d % spec.cross_attn_heads != 0 {
                return Err(Error::Config(format!(
                    "cross-attention width {value} must be a positive multiple of {} heads",
                    spec.cross_attn_heads
                )));
            }
            spec.cross_attn_head_dim = d / spec.cross_attn_heads;
        }
        SweepAxis::DataFraction => c.schedule.data_fraction = value,
    }
    c.validate()?;
    Ok(c)
}

/// Fine-tune, generate and evaluate once for one config into `dir`.
pub fn finetune_and_score(
    config: &RunConfig,
    base: &Path,
    dir: &Path,
    allow_mismatch: bool,
) -> Result<(FinetuneSummary, f64)> {
    let summary = run_finetune(config, base, dir, allow_mismatch)?;
    let corpus = finetune_corpus(config)?;
    let req_path = dir.join("requests.jsonl");
    write_jsonl(
        &req_path,
        &heldout_requests(&corpus, derive_seed(config.seeds.train, 0x9e)),
    )?;
    run_generate(config, dir, &req_path, &dir.join("generated"), false)?;
    let records = run_evaluate(&dir.join("generated"), &req_path, &config.task, &dir.join("eval"))?;
    let f1 = summary_f1(&records).ok_or_else(|| Error::invalid("evaluation produced no summary"))?;
    Ok((summary, f1))
}

/// Runs one fine-tune/generate/evaluate per value. Failures are recorded
/// in the table and the sweep continues.
pub fn run_sweep(
    config: &RunConfig,
    base: &Path,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
    allow_mismatch: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let dir = out.join(format!("{}-{value}", axis_name(axis)));
        let result = apply_axis(config, axis, value).and_then(|c| finetune_and_score(&c, base, &dir, allow_mismatch));
        rows.push(match result {
            Ok((s, f1)) => SweepRow {
                axis,
                value,
                task: config.task.task,
                f1: Some(f1),
                trainable_params: Some(s.trainable_params),
                adaptive_params: Some(s.adaptive_params),
                train_utterances: Some(s.train_utterances),
                error: None,
            },
            Err(e) => SweepRow {
                axis,
                value,
                task: config.task.task,
                f1: None,
                trainable_params: None,
                adaptive_params: None,
                train_utterances: None,
                error: Some(e.to_string()),
            },
        });
        write_sweep_tables(out, &rows)?;
    }
    Ok(rows)
}

pub fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::LoraRank => "lora_rank",
        SweepAxis::CrossAttnDim => "cross_attn_dim",
        SweepAxis::DataFraction => "data_fraction",
    }
}

fn write_sweep_tables(out: &Path, rows: &[SweepRow]) -> Result<()> {
    write_jsonl(&out.join("sweep.jsonl"), rows)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut csv = String::from("axis,value,task,f1,trainable_params,adaptive_params,train_utterances,error\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            axis_name(r.axis),
            r.value,
            r.task.name(),
            opt(r.f1.map(|v| format!("{v:.6}"))),
            opt(r.trainable_params.map(|v| v.to_string())),
            opt(r.adaptive_params.map(|v| v.to_string())),
            opt(r.train_utterances.map(|v| v.to_string())),
            opt(r.error.as_ref().map(|e| format!("\"{}\"", e.replace('"', "'")))),
        ));
    }
    fs::write(out.join("sweep.csv"), csv)?;
    Ok(())
}
