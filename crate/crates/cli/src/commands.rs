use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use mgbrnn::filters::{run_baseline, InitialBelief};
use mgbrnn::gated::{filter_trajectory, GateMask, GateParams, StateScaling};
use mgbrnn::numerics::Mat;
use mgbrnn::ssm::{
    generate, load_csv, save_csv, NominalModel, Scenario, Split, SplitDataset, TrajectoryItem,
};
use mgbrnn::training::{score, train_with, EpochRecord, TrainOutcome};

use crate::config::{ExperimentConfig, Method, ScalingSpec};
use crate::error::{CliError, Result};
use crate::manifest::{write_json, Manifest, MANIFEST_FILE};
use crate::metrics::{MethodEntry, MetricsFile};

pub const DATA_DIR: &str = "data";
pub const TRAIN_DIR: &str = "train";
pub const EVAL_DIR: &str = "eval";
pub const ABLATE_DIR: &str = "ablate";
pub const BASELINE_DIR: &str = "baseline";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const PER_TRAJECTORY_FILE: &str = "per_trajectory.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const TRAJECTORY_DIR: &str = "trajectories";
pub const TRUTH_FILE: &str = "truth.csv";

/// Name under which the gated filter is reported.
pub const MODEL_NAME: &str = "mgbrnn";

/// Progress sink; one line per call.
pub type Log<'a> = &'a mut dyn FnMut(&str);

fn create_dir(path: PathBuf) -> Result<PathBuf> {
    fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn split_file(split: Split) -> String {
    format!("{}.csv", split.name())
}

/// Simulates or loads the trajectories, splits them and writes one CSV per
/// split.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<SplitDataset> {
    let (scenario, _) = config.benchmark();
    let items = match &config.dataset.csv {
        Some(path) => load_csv(path)?,
        None => generate(&scenario, config.dataset.count, config.seed)?,
    };
    check_shapes(&items, &scenario)?;
    let data = SplitDataset::from_items(items, config.dataset.fractions)?;
    let dir = create_dir(config.out.join(DATA_DIR))?;
    for split in Split::ALL {
        save_csv(dir.join(split_file(split)), data.get(split))?;
    }
    let files: Vec<String> = Split::ALL.into_iter().map(split_file).collect();
    let files: Vec<&str> = files.iter().map(String::as_str).collect();
    Manifest::new("generate", config, &files).write(&dir)?;
    Ok(data)
}

fn check_shapes(items: &[TrajectoryItem], scenario: &Scenario) -> Result<()> {
    if let Some(item) = items
        .iter()
        .find(|i| i.d_x() != scenario.d_x() || i.d_z() != scenario.d_z())
    {
        return Err(CliError::Config(format!(
            "trajectory {} has d_x = {}, d_z = {} but the scenario expects {} and {}",
            item.id,
            item.d_x(),
            item.d_z(),
            scenario.d_x(),
            scenario.d_z()
        )));
    }
    Ok(())
}

/// Reads the dataset written by [`cmd_generate`] and checks it was made
/// from the same scenario, dataset settings and seed.
pub fn load_dataset(config: &ExperimentConfig) -> Result<SplitDataset> {
    let dir = config.out.join(DATA_DIR);
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(CliError::io(
            &manifest_path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "no dataset here, run `generate` first",
            ),
        ));
    }
    let made_with = Manifest::read(&manifest_path)?.config;
    if made_with.scenario != config.scenario
        || made_with.dataset != config.dataset
        || made_with.seed != config.seed
    {
        return Err(CliError::Config(format!(
            "dataset in {} was generated with a different scenario, dataset or seed; rerun `generate`",
            dir.display()
        )));
    }
    let read = |split| load_csv(dir.join(split_file(split)));
    Ok(SplitDataset {
        train: read(Split::Train)?,
        val: read(Split::Val)?,
        test: read(Split::Test)?,
    })
}

fn initial_params(config: &ExperimentConfig, data: &SplitDataset) -> Result<GateParams> {
    let scaling = match &config.model.state_scaling {
        ScalingSpec::Fitted => StateScaling::fit(data.train.iter().map(|i| &i.states))?,
        ScalingSpec::PerVector => StateScaling::PerVector,
        ScalingSpec::Fixed { scale } => StateScaling::Fixed {
            scale: scale.clone(),
        },
    };
    Ok(GateParams::init(config.gate_dims(), config.weights_seed())?.with_scaling(scaling)?)
}

fn fit(
    config: &ExperimentConfig,
    data: &SplitDataset,
    mask: GateMask,
    log: Log,
) -> Result<TrainOutcome> {
    let (_, model) = config.benchmark();
    let params = initial_params(config, data)?;
    let outcome = train_with(
        &config.train,
        &model,
        data,
        mask,
        &config.initial_belief(),
        params,
        |r| log(&epoch_line(r)),
    )?;
    Ok(outcome)
}

fn epoch_line(r: &EpochRecord) -> String {
    let train = r
        .train_loss
        .map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
    format!(
        "epoch {:>4}  train {train}  val {:.6}  val rmse {:.6}",
        r.epoch, r.val_loss, r.val_rmse
    )
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    val_rmse: f64,
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::io(path, source),
        other => CliError::Config(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Checkpoint, report and per-epoch loss curve (one row per trained epoch).
fn write_training(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    outcome.params.save(dir.join(CHECKPOINT_FILE))?;
    let report = outcome.report.to_json()?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, report).map_err(|e| CliError::io(&path, e))?;
    let rows: Vec<LossRow> = outcome
        .report
        .epochs
        .iter()
        .filter_map(|r| {
            r.train_loss.map(|train_loss| LossRow {
                epoch: r.epoch,
                train_loss,
                val_loss: r.val_loss,
                val_rmse: r.val_rmse,
            })
        })
        .collect();
    write_csv_rows(
        &dir.join(LOSS_FILE),
        &rows,
        &["epoch", "train_loss", "val_loss", "val_rmse"],
    )
}

/// Trains the gated filter with the configured mask.
pub fn cmd_train(config: &ExperimentConfig, log: Log) -> Result<TrainOutcome> {
    let data = load_dataset(config)?;
    let outcome = fit(config, &data, config.mask, log)?;
    let dir = create_dir(config.out.join(TRAIN_DIR))?;
    write_training(&dir, &outcome)?;
    Manifest::new(
        "train",
        config,
        &[CHECKPOINT_FILE, REPORT_FILE, LOSS_FILE],
    )
    .write(&dir)?;
    Ok(outcome)
}

fn gated_estimates(
    params: &GateParams,
    model: &NominalModel,
    items: &[TrajectoryItem],
    init: &InitialBelief,
    mask: GateMask,
) -> mgbrnn::Result<Vec<Mat>> {
    items
        .iter()
        .map(|item| {
            let zs: Vec<Mat> = (1..=item.horizon()).map(|k| item.measurement(k)).collect();
            Ok(filter_trajectory(params, model, &zs, &init.for_item(item)?, mask)?.means)
        })
        .collect()
}

fn baseline_estimates(
    config: &ExperimentConfig,
    method: Method,
    items: &[TrajectoryItem],
) -> mgbrnn::Result<Vec<Mat>> {
    let (scenario, nominal) = config.benchmark();
    let model = if method.uses_true_model() {
        scenario.accurate_model().ok_or_else(|| {
            mgbrnn::Error::Inapplicable(format!("{} has no exact model form", scenario.name))
        })?
    } else {
        nominal
    };
    let baseline = config.baseline(method);
    let init = config.initial_belief();
    items
        .iter()
        .map(|item| run_baseline(item, &model, &baseline, &init))
        .collect()
}

#[derive(Serialize)]
struct PerTrajectoryRow<'a> {
    method: &'a str,
    traj_id: u64,
    mse: f64,
    mse_position: f64,
}

/// Collects scores and plot dumps for the methods of one command.
struct Scoreboard<'a> {
    config: &'a ExperimentConfig,
    items: &'a [TrajectoryItem],
    position: Vec<usize>,
    entries: Vec<MethodEntry>,
    per_trajectory: Vec<(String, u64, f64, f64)>,
    dumps: Vec<(String, Vec<TrajectoryItem>)>,
}

impl<'a> Scoreboard<'a> {
    fn new(config: &'a ExperimentConfig, items: &'a [TrajectoryItem]) -> Self {
        Self {
            config,
            items,
            position: config.position(),
            entries: Vec::new(),
            per_trajectory: Vec::new(),
            dumps: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, estimates: Vec<Mat>) -> Result<()> {
        let eval = score(name, self.items, &estimates, Some(&self.position))?;
        for t in &eval.per_trajectory {
            self.per_trajectory
                .push((name.to_string(), t.id, t.mse, t.mse_position));
        }
        self.dumps
            .push((name.to_string(), self.dump(&estimates)?));
        self.entries.push(MethodEntry::Scored(eval.summary));
        Ok(())
    }

    fn add_baselines(&mut self, log: Log) -> Result<()> {
        for &method in self.config.methods() {
            match baseline_estimates(self.config, method, self.items) {
                Ok(est) => self.add(method.name(), est)?,
                Err(e) => {
                    log(&format!("{}: {e}", method.name()));
                    self.entries.push(MethodEntry::Failed {
                        name: method.name().to_string(),
                        error: e.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Estimates in the trajectory CSV layout: row 0 is the initial mean,
    /// measurement columns are copied from the input.
    fn dump(&self, estimates: &[Mat]) -> Result<Vec<TrajectoryItem>> {
        let init = self.config.initial_belief();
        let mut out = Vec::with_capacity(self.items.len());
        for (item, est) in self.items.iter().zip(estimates) {
            let mut states = vec![init.for_item(item)?.mean];
            states.extend((0..est.rows()).map(|k| Mat::col(est.row(k))));
            let meas: Vec<Mat> = (0..=item.horizon()).map(|k| item.measurement(k)).collect();
            out.push(TrajectoryItem::from_columns(item.id, &states, &meas)?);
        }
        Ok(out)
    }

    fn metrics(&self) -> MetricsFile {
        MetricsFile {
            scenario: self.config.benchmark().0.name,
            seed: self.config.seed,
            methods: self.entries.clone(),
        }
    }

    fn write(&self, dir: &Path) -> Result<MetricsFile> {
        let metrics = self.metrics();
        write_json(&dir.join(METRICS_FILE), &metrics)?;
        let rows: Vec<PerTrajectoryRow> = self
            .per_trajectory
            .iter()
            .map(|(m, id, mse, pos)| PerTrajectoryRow {
                method: m,
                traj_id: *id,
                mse: *mse,
                mse_position: *pos,
            })
            .collect();
        write_csv_rows(
            &dir.join(PER_TRAJECTORY_FILE),
            &rows,
            &["method", "traj_id", "mse", "mse_position"],
        )?;
        let traj = create_dir(dir.join(TRAJECTORY_DIR))?;
        save_csv(traj.join(TRUTH_FILE), self.items)?;
        for (name, items) in &self.dumps {
            save_csv(traj.join(format!("{name}.csv")), items)?;
        }
        Ok(metrics)
    }
}

/// Default checkpoint location for `eval`.
pub fn trained_checkpoint(config: &ExperimentConfig) -> PathBuf {
    config.out.join(TRAIN_DIR).join(CHECKPOINT_FILE)
}

/// Scores a checkpoint and the configured baselines on the test split.
pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    log: Log,
) -> Result<MetricsFile> {
    let data = load_dataset(config)?;
    let path = checkpoint.map_or_else(|| trained_checkpoint(config), Path::to_path_buf);
    let params = GateParams::load(&path)?;
    let expected = config.gate_dims();
    if params.dims() != expected {
        return Err(CliError::Config(format!(
            "checkpoint {} has shape {:?} but the config expects {:?}",
            path.display(),
            params.dims(),
            expected
        )));
    }
    let (_, model) = config.benchmark();
    let estimates = gated_estimates(
        &params,
        &model,
        &data.test,
        &config.initial_belief(),
        config.mask,
    )?;
    let mut board = Scoreboard::new(config, &data.test);
    board.add(MODEL_NAME, estimates)?;
    board.add_baselines(log)?;
    let dir = create_dir(config.out.join(EVAL_DIR))?;
    let metrics = board.write(&dir)?;
    Manifest::new(
        "eval",
        config,
        &[METRICS_FILE, PER_TRAJECTORY_FILE, TRAJECTORY_DIR],
    )
    .write(&dir)?;
    Ok(metrics)
}

/// Runs the configured baselines on the test split.
pub fn cmd_baseline(config: &ExperimentConfig, log: Log) -> Result<MetricsFile> {
    let data = load_dataset(config)?;
    let mut board = Scoreboard::new(config, &data.test);
    board.add_baselines(log)?;
    let dir = create_dir(config.out.join(BASELINE_DIR))?;
    let metrics = board.write(&dir)?;
    Manifest::new(
        "baseline",
        config,
        &[METRICS_FILE, PER_TRAJECTORY_FILE, TRAJECTORY_DIR],
    )
    .write(&dir)?;
    Ok(metrics)
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub scheme: String,
    pub rmse_full: f64,
    pub rmse_position: f64,
    pub mse_db: f64,
    pub best_epoch: usize,
}

/// Trains the full filter and each single-gate ablation with identical
/// seeds and splits, and tabulates their test errors.
pub fn cmd_ablate(config: &ExperimentConfig, log: Log) -> Result<Vec<AblationRow>> {
    let data = load_dataset(config)?;
    let (_, model) = config.benchmark();
    let root = create_dir(config.out.join(ABLATE_DIR))?;
    let mut board = Scoreboard::new(config, &data.test);
    let mut rows = Vec::new();
    for (scheme, mask) in GateMask::ablations() {
        log(&format!("training {scheme}"));
        let outcome = fit(config, &data, mask, log)?;
        write_training(&create_dir(root.join(scheme))?, &outcome)?;
        let estimates = gated_estimates(
            &outcome.params,
            &model,
            &data.test,
            &config.initial_belief(),
            mask,
        )?;
        board.add(scheme, estimates)?;
        let m = board.entries.last().and_then(MethodEntry::scored).expect("just scored");
        rows.push(AblationRow {
            scheme: scheme.to_string(),
            rmse_full: m.rmse_full,
            rmse_position: m.rmse_position,
            mse_db: m.mse_db,
            best_epoch: outcome.report.best_epoch,
        });
    }
    board.write(&root)?;
    write_csv_rows(
        &root.join(ABLATION_FILE),
        &rows,
        &["scheme", "rmse_full", "rmse_position", "mse_db", "best_epoch"],
    )?;
    Manifest::new(
        "ablate",
        config,
        &[ABLATION_FILE, METRICS_FILE, PER_TRAJECTORY_FILE, TRAJECTORY_DIR],
    )
    .write(&root)?;
    Ok(rows)
}
