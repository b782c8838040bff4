use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use hvector::data::{generate_dataset, load_manifest, load_split, DatasetManifest, Scenario, Split, UtteranceExample, SUMMARY_FILE};
use hvector::eval::{evaluate, Condition, EvalReport};
use hvector::models::{Model, ModelKind, WindowSpec};
use hvector::par::Execution;
use hvector::training::{split_holdout, train, TrainReport};
use serde::Serialize;

use crate::config::{model_label, RunConfig};

const LOCK_FILE: &str = ".hvector.lock";
pub const META_FILE: &str = "run_meta.json";
pub const CONFIG_FILE: &str = "config.json";

/// Exclusive use of an output directory for the lifetime of one command.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow::anyhow!(
                    "{} is in use by another command (remove {} if that command is gone)",
                    dir.display(),
                    path.display()
                )
            } else {
                anyhow::Error::new(e).context(format!("creating {}", path.display()))
            }
        })?;
        writeln!(file, "{}", std::process::id())?;
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Host and timing details, kept apart from the reproducible outputs.
#[derive(Serialize)]
pub struct RunMeta {
    pub command: String,
    pub version: &'static str,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub threads: usize,
    pub host: String,
    pub args: Vec<String>,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn host_name() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| fs::read_to_string("/etc/hostname").ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_default()
}

pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    1
}

/// Settings shared by every command.
pub struct Session {
    pub cfg: RunConfig,
    pub exec: Execution,
    pub command: &'static str,
    pub started: u128,
}

impl Session {
    pub fn new(cfg: RunConfig, command: &'static str) -> Self {
        Session {
            cfg,
            exec: Execution::Parallel,
            command,
            started: now_ms(),
        }
    }

    pub fn write_meta(&self, dir: &Path) -> Result<()> {
        let meta = RunMeta {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION"),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            threads: threads(),
            host: host_name(),
            args: std::env::args().collect(),
        };
        write_json(&dir.join(META_FILE), &meta)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// The parts of a run configuration that determine its results.
#[derive(Serialize)]
struct ResolvedConfig<'a> {
    seed: u64,
    dataset: &'a hvector::data::DatasetSpec,
    model: &'a hvector::models::ModelConfig,
    train: &'a hvector::training::TrainConfig,
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let resolved = ResolvedConfig {
        seed: cfg.seed,
        dataset: &cfg.dataset,
        model: &cfg.model,
        train: &cfg.train,
    };
    write_json(&dir.join(CONFIG_FILE), &resolved)
}

pub struct DataOutcome {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub reused: bool,
}

impl DataOutcome {
    pub fn summary(&self) -> String {
        let m = &self.manifest;
        format!(
            "dataset {} ({}): {} speakers, {} train / {} test utterances of {} frames x {} features, seed {}{} -> {}",
            m.name,
            m.scenario,
            m.num_speakers,
            m.train_count,
            m.test_count,
            m.frames_per_utterance,
            m.feature_dim,
            m.seed,
            if self.reused { ", up to date" } else { "" },
            self.dir.display()
        )
    }
}

/// Reuse the dataset under the output directory when it was generated from
/// the same spec and seed, otherwise (re)generate it.
pub fn ensure_dataset(session: &Session) -> Result<DataOutcome> {
    let cfg = &session.cfg;
    let dir = cfg.data_dir();
    if dir.join(SUMMARY_FILE).exists() {
        if let Ok(manifest) = load_manifest(&dir) {
            if manifest.spec == cfg.dataset && manifest.seed == cfg.seed {
                return Ok(DataOutcome {
                    dir,
                    manifest,
                    reused: true,
                });
            }
        }
        fs::remove_dir_all(&dir).with_context(|| format!("clearing stale dataset {}", dir.display()))?;
    }
    let manifest = generate_dataset(&cfg.dataset, cfg.seed, &dir, session.exec)
        .with_context(|| format!("generating dataset in {}", dir.display()))?;
    session.write_meta(&dir)?;
    Ok(DataOutcome {
        dir,
        manifest,
        reused: false,
    })
}

pub fn gen_data(session: &Session) -> Result<DataOutcome> {
    ensure_dataset(session)
}

fn load(session: &Session, data: &DataOutcome, split: Split) -> Result<Vec<UtteranceExample>> {
    load_split(&data.dir, &data.manifest, split, session.exec)
        .with_context(|| format!("loading {} split of {}", split.file_name(), data.dir.display()))
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn summary(&self) -> String {
        format!(
            "trained {} for {} epochs; kept epoch {} (loss {:.6}) -> {}",
            model_label(self.report.model.config()),
            self.report.curve.iter().map(|r| r.epoch).max().unwrap_or(0),
            self.report.best_epoch,
            self.report.best_loss,
            self.dir.display()
        )
    }
}

/// Train on the training split, holding out part of it for model selection.
/// Writes `loss.csv`, `checkpoint/` and `config.json` under the model
/// directory.
pub fn train_cmd(session: &Session) -> Result<TrainOutcome> {
    let cfg = &session.cfg;
    let data = ensure_dataset(session)?;
    let examples = load(session, &data, Split::Train)?;
    let (train_set, holdout) = split_holdout(examples, cfg.train.holdout_fraction, cfg.train.seed);
    let dir = cfg.model_dir();
    let report = fit(session, &train_set, &holdout, &dir, cfg)?;
    write_config(&dir, cfg)?;
    session.write_meta(&dir)?;
    Ok(TrainOutcome { dir, report })
}

fn fit(
    session: &Session,
    train_set: &[UtteranceExample],
    holdout: &[UtteranceExample],
    dir: &Path,
    cfg: &RunConfig,
) -> Result<TrainReport> {
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    Ok(train(model, &cfg.train, train_set, holdout, Some(dir), session.exec)?)
}

pub struct EvalOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
}

impl EvalOutcome {
    pub fn summary(&self) -> String {
        let mut out = format!("{}\n", EvalReport::CSV_HEADER);
        out.push_str(&self.report.csv_rows());
        out.push_str(&format!("-> {}", self.dir.display()));
        out
    }
}

/// Score the test split with a saved model and write `report.json` plus
/// `summary.csv`.
pub fn eval_cmd(session: &Session, checkpoint: Option<&Path>, condition: Option<Condition>) -> Result<EvalOutcome> {
    let cfg = &session.cfg;
    let ckpt = checkpoint.map_or_else(|| cfg.model_dir().join("checkpoint"), Path::to_path_buf);
    if !ckpt.exists() {
        bail!("checkpoint {} not found; run `hvector train` first or pass --checkpoint", ckpt.display());
    }
    let model = Model::load(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let mc = model.config();
    ensure!(
        mc.num_speakers == cfg.dataset.num_speakers && mc.feature_dim == cfg.dataset.feature_dim,
        "checkpoint expects {} speakers and {} features, dataset has {} and {}",
        mc.num_speakers,
        mc.feature_dim,
        cfg.dataset.num_speakers,
        cfg.dataset.feature_dim
    );
    let data = ensure_dataset(session)?;
    let test = load(session, &data, Split::Test)?;
    let label = model_label(mc);
    let report = evaluate(&model, &test, mc.num_speakers, condition, (&label, &cfg.dataset.name), session.exec)?;
    let dir = cfg.out.join(&label).join(match condition {
        Some(c) => format!("eval-{}", c.as_str()),
        None => "eval".into(),
    });
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("report.json"), &report)?;
    let csv = format!("{}\n{}", EvalReport::CSV_HEADER, report.csv_rows());
    fs::write(dir.join("summary.csv"), csv).with_context(|| format!("writing {}", dir.display()))?;
    session.write_meta(&dir)?;
    Ok(EvalOutcome { dir, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    /// Window length M ∈ {10, 15, 20, 25, 30} with step 10.
    Window,
    /// Step H ∈ {5, 10, 15, 20, 25} with window 20.
    Step,
    Both,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Window => "window",
            SweepAxis::Step => "step",
            SweepAxis::Both => "both",
        }
    }

    /// `(axis name, window, step)` for every setting on this axis.
    pub fn settings(self) -> Vec<(&'static str, usize, usize)> {
        let window = [10, 15, 20, 25, 30].map(|m| ("window", m, 10));
        let step = [5, 10, 15, 20, 25].map(|h| ("step", 20, h));
        match self {
            SweepAxis::Window => window.to_vec(),
            SweepAxis::Step => step.to_vec(),
            SweepAxis::Both => window.into_iter().chain(step).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub scenario: Scenario,
    pub window: usize,
    pub step: usize,
    pub epochs: usize,
    /// Mean EER for one, two, three and any number of speakers.
    pub eer: [Option<f64>; 4],
}

pub const SWEEP_HEADER: &str = "axis,scenario,window,step,epochs,one,two,three,multiple";

impl SweepRow {
    pub fn csv(&self) -> String {
        let eer: Vec<String> = self.eer.iter().map(|e| e.map(|v| v.to_string()).unwrap_or_default()).collect();
        format!(
            "{},{},{},{},{},{}",
            self.axis,
            self.scenario,
            self.window,
            self.step,
            self.epochs,
            eer.join(",")
        )
    }
}

pub struct SweepOutcome {
    pub path: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// Train and evaluate a sliding-window H-vector for every setting on `axis`
/// in both scenarios. Each run lives in its own directory under
/// `sweep/`; the table goes to `sweep/<axis>.csv`.
pub fn sweep_cmd(session: &Session, axis: SweepAxis, mut progress: impl FnMut(&SweepRow)) -> Result<SweepOutcome> {
    ensure!(
        session.cfg.model.kind == ModelKind::HVector,
        "sweep varies the H-vector window; got model {}",
        session.cfg.model.kind
    );
    let root = session.cfg.out.join("sweep");
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let mut rows = Vec::new();
    for scenario in [Scenario::Concat, Scenario::Overlap] {
        let mut cfg = session.cfg.clone();
        cfg.dataset.scenario = scenario;
        let scoped = Session {
            cfg,
            exec: session.exec,
            command: session.command,
            started: session.started,
        };
        let data = ensure_dataset(&scoped)?;
        let (train_set, holdout) =
            split_holdout(load(&scoped, &data, Split::Train)?, scoped.cfg.train.holdout_fraction, scoped.cfg.train.seed);
        let test = load(&scoped, &data, Split::Test)?;
        let mut done: Vec<(usize, usize, [Option<f64>; 4])> = Vec::new();
        for (axis_name, m, h) in axis.settings() {
            let eer = match done.iter().find(|d| (d.0, d.1) == (m, h)) {
                Some(d) => d.2,
                None => {
                    let mut cfg = scoped.cfg.clone();
                    cfg.model.window = WindowSpec::sliding(m, h);
                    cfg.validate()?;
                    let dir = root.join(format!("{scenario}-m{m}-h{h}"));
                    let report = fit(&scoped, &train_set, &holdout, &dir, &cfg)?;
                    write_config(&dir, &cfg)?;
                    let eval = evaluate(
                        &report.model,
                        &test,
                        cfg.model.num_speakers,
                        None,
                        (&model_label(&cfg.model), &cfg.dataset.name),
                        scoped.exec,
                    )?;
                    let eer = Condition::ALL.map(|c| eval.condition(c).mean_eer);
                    done.push((m, h, eer));
                    eer
                }
            };
            let row = SweepRow {
                axis: axis_name,
                scenario,
                window: m,
                step: h,
                epochs: scoped.cfg.train.epochs,
                eer,
            };
            progress(&row);
            rows.push(row);
        }
    }
    let path = root.join(format!("{}.csv", axis.as_str()));
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    session.write_meta(&root)?;
    Ok(SweepOutcome { path, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_grids() {
        let w: Vec<(usize, usize)> = SweepAxis::Window.settings().iter().map(|s| (s.1, s.2)).collect();
        assert_eq!(w, [(10, 10), (15, 10), (20, 10), (25, 10), (30, 10)]);
        let h: Vec<(usize, usize)> = SweepAxis::Step.settings().iter().map(|s| (s.1, s.2)).collect();
        assert_eq!(h, [(20, 5), (20, 10), (20, 15), (20, 20), (20, 25)]);
        assert_eq!(SweepAxis::Both.settings().len(), 10);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        let err = OutputLock::acquire(dir.path()).err().unwrap();
        assert!(err.to_string().contains("in use"));
        drop(lock);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn sweep_row_csv_leaves_missing_conditions_empty() {
        let row = SweepRow {
            axis: "step",
            scenario: Scenario::Overlap,
            window: 20,
            step: 5,
            epochs: 3,
            eer: [Some(0.25), None, Some(0.5), Some(0.375)],
        };
        assert_eq!(row.csv(), "step,overlap,20,5,3,0.25,,0.5,0.375");
        assert_eq!(row.csv().split(',').count(), SWEEP_HEADER.split(',').count());
    }
}
