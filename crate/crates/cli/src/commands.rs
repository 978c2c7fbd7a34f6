use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use amfir::amd::{train_meta, write_trace, DistillMode, TraceRow, TrainConfig};
use amfir::ami::{aggregate_metrics, evaluate_run, FusionMode, RunMetrics};
use amfir::asi::AsiForce;
use amfir::dataset::{generate_synthetic, load_dataset, save_dataset, split_by_class, FORMAT_VERSION};
use amfir::encoder::{init_heads, load_model, save_model};
use amfir::rng::{self, DOMAIN_INIT};
use amfir::{Dataset, EpisodeResult, Model};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

fn at(path: &Path) -> impl Fn(CliError) -> CliError + '_ {
    move |e| match e {
        CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_data(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(|e| at(path)(e.into()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| at(path)(e.into()))?))
}

fn write_json_line<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<String, CliError> {
    let out = cfg.require(&cfg.out, "out")?;
    let ds: Dataset = generate_synthetic(&cfg.synthetic())?;
    save_dataset(&ds, out).map_err(|e| at(out)(e.into()))?;
    let m = ds.meta();
    Ok(format!(
        "wrote {} records ({} classes, dim_rgb {}, dim_flow {}) to {}\n",
        m.num_records,
        m.num_classes,
        m.dim_rgb,
        m.dim_flow,
        out.display()
    ))
}

pub fn cmd_split(cfg: &RunConfig) -> Result<String, CliError> {
    let data = cfg.require(&cfg.data, "data")?;
    let train_out = cfg.require(&cfg.train_out, "train-out")?;
    let test_out = cfg.require(&cfg.test_out, "test-out")?;
    let ds: Dataset = read_data(data)?;
    let (train, test) = split_by_class(&ds, cfg.train_fraction, cfg.seed)?;
    save_dataset(&train, train_out).map_err(|e| at(train_out)(e.into()))?;
    save_dataset(&test, test_out).map_err(|e| at(test_out)(e.into()))?;
    Ok(format!(
        "train: {} classes / {} records, test: {} classes / {} records\n",
        train.meta().num_classes,
        train.meta().num_records,
        test.meta().num_classes,
        test.meta().num_records
    ))
}

fn init_model(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<Model, CliError> {
    let m = ds.meta();
    Ok(init_heads(
        m.dim_rgb,
        m.dim_flow,
        cfg.hyper(),
        &mut rng::substream(seed, DOMAIN_INIT, 0),
    )?)
}

fn window_mean(rows: &[TraceRow], f: fn(&TraceRow) -> f64, from_end: bool) -> f64 {
    let n = rows.len().min(100);
    if n == 0 {
        return 0.0;
    }
    let slice = if from_end { &rows[rows.len() - n..] } else { &rows[..n] };
    slice.iter().map(f).sum::<f64>() / n as f64
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    kind: &'static str,
    format_version: u32,
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    episodes: usize,
    loss_first100: f64,
    loss_last100: f64,
    free_energy_rgb_first100: f64,
    free_energy_rgb_last100: f64,
    free_energy_flow_first100: f64,
    free_energy_flow_last100: f64,
    rgb_dominant_total: usize,
    flow_dominant_total: usize,
    held_in: RunMetrics,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let data = cfg.require(&cfg.data, "data")?;
    let model_path = cfg.require(&cfg.model, "model")?;
    let ds: Dataset = read_data(data)?;
    let model = init_model(cfg, &ds, cfg.seed)?;
    let tc = TrainConfig {
        episode: cfg.episode(),
        episodes: cfg.train_episodes(),
        seed: cfg.seed,
    };
    let out = train_meta(&ds, &tc, model)?;
    save_model(&out.model, model_path).map_err(|e| at(model_path)(e.into()))?;
    if let Some(path) = &cfg.trace {
        let mut w = create(path)?;
        write_trace(&out.trace, &mut w)?;
        w.flush()?;
    }
    let held_in_results = evaluate_run(&ds, &out.model, cfg.episode(), cfg.eval_episodes, cfg.seed, cfg.fusion)?;
    let held_in = aggregate_metrics(&held_in_results, cfg.fusion)?;
    let t = &out.trace;
    let summary = TrainSummary {
        kind: "train_summary",
        format_version: FORMAT_VERSION,
        command: "train",
        seed: cfg.seed,
        config: cfg,
        episodes: t.len(),
        loss_first100: window_mean(t, |r| r.total, false),
        loss_last100: window_mean(t, |r| r.total, true),
        free_energy_rgb_first100: window_mean(t, |r| r.f_r, false),
        free_energy_rgb_last100: window_mean(t, |r| r.f_r, true),
        free_energy_flow_first100: window_mean(t, |r| r.f_f, false),
        free_energy_flow_last100: window_mean(t, |r| r.f_f, true),
        rgb_dominant_total: t.iter().map(|r| r.rgb_dominant).sum(),
        flow_dominant_total: t.iter().map(|r| r.flow_dominant).sum(),
        held_in,
    };
    if let Some(path) = &cfg.metrics {
        write_json_line(path, &summary)?;
    }
    Ok(format!(
        "trained {} episodes: loss {:.4} -> {:.4}, F_r {:.4} -> {:.4}, F_f {:.4} -> {:.4}; held-in accuracy {:.4}\n",
        summary.episodes,
        summary.loss_first100,
        summary.loss_last100,
        summary.free_energy_rgb_first100,
        summary.free_energy_rgb_last100,
        summary.free_energy_flow_first100,
        summary.free_energy_flow_last100,
        summary.held_in.mean_accuracy
    ))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    kind: &'static str,
    format_version: u32,
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    #[serde(flatten)]
    metrics: RunMetrics,
    episode_accuracies: Vec<f64>,
    /// `[rgb_dominant, flow_dominant]` per episode.
    group_counts: Vec<[usize; 2]>,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let data = cfg.require(&cfg.data, "data")?;
    let model_path = cfg.require(&cfg.model, "model")?;
    let ds: Dataset = read_data(data)?;
    let mut model: Model = load_model(model_path).map_err(|e| at(model_path)(e.into()))?;
    let m = ds.meta();
    model
        .check_dims(m.dim_rgb, m.dim_flow)
        .map_err(|e| CliError::Runtime(format!("model does not match dataset: {e}")))?;
    if cfg.asi_force != AsiForce::Off {
        model.hyper.asi_force = cfg.asi_force;
    }
    let results = evaluate_run(&ds, &model, cfg.episode(), cfg.eval_run_episodes(), cfg.seed, cfg.fusion)?;
    let metrics = aggregate_metrics(&results, cfg.fusion)?;
    let report = EvalReport {
        kind: "metrics",
        format_version: FORMAT_VERSION,
        command: "eval",
        seed: cfg.seed,
        config: cfg,
        episode_accuracies: results.iter().map(|r| r.accuracy).collect(),
        group_counts: results.iter().map(|r| [r.rgb_dominant, r.flow_dominant]).collect(),
        metrics: metrics.clone(),
    };
    if let Some(path) = &cfg.metrics {
        write_json_line(path, &report)?;
    }
    let mut s = format!(
        "{} episodes, fusion {}: accuracy {:.4} ± {:.4} (rgb {:.4}, flow {:.4})",
        metrics.episodes,
        metrics.fusion,
        metrics.mean_accuracy,
        metrics.ci95_half_width,
        metrics.mean_accuracy_rgb,
        metrics.mean_accuracy_flow
    );
    if let Some(a) = metrics.asi_agreement {
        let _ = write!(s, ", ASI agreement {a:.4}");
    }
    s.push('\n');
    Ok(s)
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub name: &'static str,
    pub distill: DistillMode,
    pub asi_force: AsiForce,
    pub fusion: FusionMode,
}

/// Full model, forced-RGB and forced-flow grouping, distillation off, mean
/// fusion, and the two one-directional distillation strategies.
pub fn ablation_cells(base: &RunConfig) -> Vec<AblationCell> {
    let cell = |name, distill, asi_force, fusion| AblationCell {
        name,
        distill,
        asi_force,
        fusion,
    };
    vec![
        cell("full", base.distill, base.asi_force, base.fusion),
        cell("force_rgb", base.distill, AsiForce::ForceRgb, base.fusion),
        cell("force_flow", base.distill, AsiForce::ForceFlow, base.fusion),
        cell("amd_off", DistillMode::None, base.asi_force, base.fusion),
        cell("ami_off", base.distill, base.asi_force, FusionMode::Mean),
        cell("t_rgb", DistillMode::TRgb, base.asi_force, base.fusion),
        cell("t_flow", DistillMode::TFlow, base.asi_force, base.fusion),
    ]
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: RunMetrics,
    pub rgb_dominant_total: usize,
    pub flow_dominant_total: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CellResult {
    #[serde(flatten)]
    pub cell: AblationCell,
    pub mean_accuracy: f64,
    pub mean_accuracy_rgb: f64,
    pub mean_accuracy_flow: f64,
    pub per_seed: Vec<SeedResult>,
}

fn run_cell(
    base: &RunConfig,
    cell: &AblationCell,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<SeedResult, CliError> {
    let mut cfg = base.clone();
    cfg.distill = cell.distill;
    cfg.asi_force = cell.asi_force;
    cfg.fusion = cell.fusion;
    let model = init_model(&cfg, train, seed)?;
    let tc = TrainConfig {
        episode: cfg.episode(),
        episodes: cfg.train_episodes(),
        seed,
    };
    let trained = train_meta(train, &tc, model)?.model;
    let results: Vec<EpisodeResult> = evaluate_run(test, &trained, cfg.episode(), cfg.eval_episodes, seed, cfg.fusion)?;
    Ok(SeedResult {
        seed,
        metrics: aggregate_metrics(&results, cfg.fusion)?,
        rgb_dominant_total: results.iter().map(|r| r.rgb_dominant).sum(),
        flow_dominant_total: results.iter().map(|r| r.flow_dominant).sum(),
    })
}

/// Trains and evaluates every grid cell for every seed in `cfg.seeds`.
pub fn run_ablation(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Vec<CellResult>, CliError> {
    let cells = ablation_cells(cfg);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.0.iter().map(move |&s| (c, s)))
        .collect();
    let done = jobs
        .par_iter()
        .map(|&(c, s)| run_cell(cfg, &cells[c], train, test, s))
        .collect::<Result<Vec<_>, _>>()?;
    let n_seeds = cfg.seeds.0.len();
    Ok(cells
        .into_iter()
        .zip(done.chunks(n_seeds))
        .map(|(cell, per_seed)| {
            let mean = |f: fn(&SeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / n_seeds as f64;
            CellResult {
                mean_accuracy: mean(|r| r.metrics.mean_accuracy),
                mean_accuracy_rgb: mean(|r| r.metrics.mean_accuracy_rgb),
                mean_accuracy_flow: mean(|r| r.metrics.mean_accuracy_flow),
                per_seed: per_seed.to_vec(),
                cell,
            }
        })
        .collect())
}

#[derive(Serialize)]
struct AblationMeta<'a> {
    kind: &'static str,
    format_version: u32,
    command: &'static str,
    config: &'a RunConfig,
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String, CliError> {
    let data = cfg.require(&cfg.data, "data")?;
    let out = cfg.require(&cfg.out, "out")?;
    let ds: Dataset = read_data(data)?;
    let (train, test) = match &cfg.eval_data {
        Some(p) => (ds, read_data(p)?),
        None => split_by_class(&ds, cfg.train_fraction, cfg.seed)?,
    };
    let table = run_ablation(cfg, &train, &test)?;

    let mut w = create(out)?;
    let meta = AblationMeta {
        kind: "ablation",
        format_version: FORMAT_VERSION,
        command: "ablate",
        config: cfg,
    };
    let json = |e: serde_json::Error| CliError::Runtime(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&meta).map_err(json)?)?;
    for row in &table {
        writeln!(w, "{}", serde_json::to_string(row).map_err(json)?)?;
    }
    w.flush()?;

    let mut s = format!("{:<11} {:>9} {:>9} {:>9}\n", "cell", "fused", "rgb", "flow");
    for row in &table {
        let _ = writeln!(
            s,
            "{:<11} {:>9.4} {:>9.4} {:>9.4}",
            row.cell.name, row.mean_accuracy, row.mean_accuracy_rgb, row.mean_accuracy_flow
        );
    }
    Ok(s)
}
