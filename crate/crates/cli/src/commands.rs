use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use switchdetect::baselines::{one_at_a_time, sensitivity_doe, OneAtATime, SensitivityModel};
use switchdetect::dmd::{fit_dmdc, prune_variables, quality, quality_csv, DmdcOptions, LinearModel};
use switchdetect::doe::{make_schedule, DoeDesign, Schedule};
use switchdetect::embedding::{encode_table, latent_names, select_dim, train, TrainOptions};
use switchdetect::mixed_dmd::{
    enumerate_subsets, rank_combinations, ranking_csv, FitOptions, RankEntry, StackedData, Status, SubsetModel,
};
use switchdetect::nodyn::{self, DetectionGrid};
use switchdetect::report::{render_grid, render_matrix, render_ranking, render_subset_model, render_table, DISPLAY_FLOOR};
use switchdetect::sim::{simulate, DrivingCycle, VersionVector, Versions, WorkflowConfig};
use switchdetect::table::SETPOINT;
use switchdetect::{ColumnKind, DataTable};

use crate::config::{substream, RunConfig, DEFAULTS_VERSION};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub status: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub defaults_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub substreams: BTreeMap<String, u64>,
    pub config: RunConfig,
    pub steps: Vec<StepRecord>,
    pub outputs: Vec<String>,
}

/// One command invocation: resolved config, output directory and the
/// manifest being recorded.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    manifest: Manifest,
}

impl Run {
    pub fn new(command: &str, config: RunConfig, out: PathBuf) -> Result<Self, CliError> {
        config.validate()?;
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let substreams = ["schedule", "embedding-init", "cycle"]
            .iter()
            .map(|n| (n.to_string(), substream(config.seed, n)))
            .collect();
        let manifest = Manifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            defaults_version: DEFAULTS_VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            substreams,
            config: config.clone(),
            steps: Vec::new(),
            outputs: Vec::new(),
        };
        Ok(Run { config, out, manifest })
    }

    pub fn seed_for(&self, name: &str) -> u64 {
        self.manifest.substreams[name]
    }

    /// Time `f` and record its outcome.
    pub fn step<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        let result = f(self);
        self.manifest.steps.push(StepRecord {
            name: name.into(),
            status: match &result {
                Ok(_) => "ok".into(),
                Err(e) => format!("failed: {e}"),
            },
            seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("{name}: {:.2}s", start.elapsed().as_secs_f64());
        result
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    pub fn write_table(&mut self, name: &str, table: &DataTable) -> Result<(), CliError> {
        let path = self.out.join(name);
        table.save(&path).map_err(|e| CliError::from_core_io(e, &path))?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        self.write(name, &text)
    }

    /// Write the manifest; called on success and on failure alike.
    pub fn finish(self, result: Result<(), CliError>) -> Result<(), CliError> {
        let name = format!("manifest_{}.json", self.manifest.command);
        let path = self.out.join(&name);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        result
    }
}

struct Scenario {
    workflow: WorkflowConfig,
    cycle: DrivingCycle,
    design: DoeDesign,
    schedule: Schedule,
}

fn scenario(run: &mut Run) -> Result<Scenario, CliError> {
    run.step("setup", |run| {
        let workflow = run.config.workflow()?;
        let cycle = run.config.cycle()?;
        let design = DoeDesign::full_factorial(&workflow.module_names())?;
        let schedule = make_schedule(
            &design,
            cycle.len(),
            run.config.doe.segment_length,
            run.config.doe.ordering,
            run.seed_for("schedule"),
        )?;
        Ok(Scenario { workflow, cycle, design, schedule })
    })
}

fn run_constant(run: &mut Run, name: &str, s: &Scenario, v: &VersionVector) -> Result<DataTable, CliError> {
    run.step(name, |_| Ok(simulate(&s.workflow, &s.cycle, Versions::Constant(v))?))
}

fn run_scheduled(run: &mut Run, name: &str, s: &Scenario, schedule: &Schedule) -> Result<DataTable, CliError> {
    run.step(name, |_| Ok(simulate(&s.workflow, &s.cycle, Versions::PerStep(schedule.steps()))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TableKind {
    /// Every module on its reference variant.
    T0,
    /// Every module on its updated variant.
    T1,
    /// Versions switched per segment following the design.
    T0Doe,
    /// Versions switched following the complemented design.
    T1Codoe,
}

pub fn cmd_simulate(run: &mut Run, tables: &[TableKind]) -> Result<(), CliError> {
    let s = scenario(run)?;
    let m = s.workflow.module_count();
    for kind in tables {
        match kind {
            TableKind::T0 => {
                let t = run_constant(run, "simulate_t0", &s, &VersionVector::reference(m))?;
                run.write_table("t0.csv", &t)?;
            }
            TableKind::T1 => {
                let t = run_constant(run, "simulate_t1", &s, &VersionVector::updated(m))?;
                run.write_table("t1.csv", &t)?;
            }
            TableKind::T0Doe => {
                let t = run_scheduled(run, "simulate_t0_doe", &s, &s.schedule)?;
                run.write_table("t0_doe.csv", &t)?;
            }
            TableKind::T1Codoe => {
                let co = make_schedule(
                    &s.design.complement(),
                    s.cycle.len(),
                    run.config.doe.segment_length,
                    run.config.doe.ordering,
                    run.seed_for("schedule"),
                )?;
                let t = run_scheduled(run, "simulate_t1_codoe", &s, &co)?;
                run.write_table("t1_codoe.csv", &t)?;
            }
        }
    }
    run.write_table("schedule.csv", &s.schedule.to_table()?)?;
    Ok(())
}

pub fn cmd_doe(run: &mut Run) -> Result<(), CliError> {
    let s = scenario(run)?;
    run.write_table("design.csv", &s.design.to_table()?)?;
    run.write_table("schedule.csv", &s.schedule.to_table()?)?;
    println!(
        "{} design rows, {} segments of {} steps",
        s.design.nrows(),
        s.schedule.segment_count(),
        s.schedule.segment_length
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmdcArtifact {
    pub state_cols: Vec<String>,
    pub control_cols: Vec<String>,
    pub spectral_radius: f64,
    pub r2: Vec<f64>,
}

pub fn cmd_dmdc(run: &mut Run) -> Result<(), CliError> {
    let s = scenario(run)?;
    let t0 = run_constant(run, "simulate_t0", &s, &VersionVector::reference(s.workflow.module_count()))?;
    let fit = run.step("fit_dmdc", |run| {
        let states = prune_variables(&t0, run.config.dmdc.prune_threshold)?;
        let options = DmdcOptions { standardize: run.config.dmdc.standardize };
        Ok(fit_dmdc(&[&t0], &states, &[SETPOINT.to_string()], options)?)
    })?;
    let radius = fit.model.spectral_radius()?;
    run.write("dmdc_model.json", &fit.model.to_json()?)?;
    run.write("dmdc_quality.csv", &quality_csv(&quality(&t0, &fit.model)?))?;
    run.write_json(
        "dmdc.json",
        &DmdcArtifact {
            state_cols: fit.model.state_cols.clone(),
            control_cols: fit.model.control_cols.clone(),
            spectral_radius: radius,
            r2: fit.r2.clone(),
        },
    )?;
    print!("{}", render_dmdc(&fit.model, radius));
    Ok(())
}

fn render_dmdc(model: &LinearModel, radius: f64) -> String {
    format!(
        "Matrix A\n{}\nMatrix B\n{}\nSpectral radius: {radius:.4}\n",
        render_matrix(&model.a, &model.state_cols, &model.state_cols, DISPLAY_FLOOR),
        render_matrix(&model.b, &model.state_cols, &model.control_cols, DISPLAY_FLOOR),
    )
}

/// Ranking row with non-finite values stored as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub subset: Vec<String>,
    pub status: Status,
    pub rss: Option<f64>,
    pub l1_reference: Option<f64>,
    pub l1_terms: Option<f64>,
    pub score: Option<f64>,
    pub seconds: f64,
}

impl RankSummary {
    fn from_entry(e: &RankEntry) -> Self {
        let fin = |v: f64| v.is_finite().then_some(v);
        RankSummary {
            subset: e.subset.clone(),
            status: e.status.clone(),
            rss: fin(e.rss),
            l1_reference: fin(e.l1_reference),
            l1_terms: fin(e.l1_terms),
            score: fin(e.score),
            seconds: e.seconds,
        }
    }

    fn to_entry(&self) -> RankEntry {
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        RankEntry {
            subset: self.subset.clone(),
            status: self.status.clone(),
            rss: v(self.rss),
            l1_reference: v(self.l1_reference),
            l1_terms: v(self.l1_terms),
            score: v(self.score),
            seconds: self.seconds,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedArtifact {
    pub embedding: bool,
    pub latent_dim: Option<usize>,
    pub worst_r2: Option<f64>,
    pub threshold_missed: bool,
    pub state_cols: Vec<String>,
    pub ranking: Vec<RankSummary>,
    pub top: Option<SubsetModel>,
}

pub fn cmd_mixed(run: &mut Run) -> Result<(), CliError> {
    let s = scenario(run)?;
    let m = s.workflow.module_count();
    let modules = s.workflow.module_names();
    let t0 = run_constant(run, "simulate_t0", &s, &VersionVector::reference(m))?;
    let t0doe = run_scheduled(run, "simulate_t0_doe", &s, &s.schedule)?;
    let cfg = run.config.mixed.clone();

    let (e0, e1, states, latent_dim, worst_r2, missed) = if cfg.embedding {
        let opts = TrainOptions {
            epochs: cfg.epochs,
            seed: run.seed_for("embedding-init"),
            ..Default::default()
        };
        let (emb, worst, missed) = run.step("embedding", |_| {
            Ok(match cfg.latent_dim {
                Some(d) => {
                    let emb = train(&t0, d, &opts)?;
                    let worst = emb.reconstruction_r2(&t0)?.into_iter().fold(f64::INFINITY, f64::min);
                    (emb, worst, worst < cfg.r2_threshold)
                }
                None => {
                    let width = t0.names_of(ColumnKind::State).len();
                    let sel = select_dim(&t0, cfg.max_latent_dim.min(width), cfg.r2_threshold, &opts)?;
                    (sel.embedding, sel.worst_r2, sel.threshold_missed)
                }
            })
        })?;
        run.write("embedding.json", &emb.to_json()?)?;
        let e0 = encode_table(&emb, &t0)?;
        let e1 = encode_table(&emb, &t0doe)?;
        (e0, e1, latent_names(emb.latent_dim), Some(emb.latent_dim), Some(worst), missed)
    } else {
        let states = t0.names_of(ColumnKind::State);
        (t0, t0doe, states, None, None, false)
    };

    let ranking = run.step("rank_combinations", |_| {
        let data = StackedData::build(&e0, &[&e1], &states, &[SETPOINT.to_string()], &modules, cfg.reference_weight)?;
        let subsets = enumerate_subsets(&modules, cfg.subset_size.min(m), false)?;
        let options = FitOptions { norm: cfg.norm, prior: cfg.prior, ..Default::default() };
        Ok(rank_combinations(&data, &subsets, &cfg.weights, &options)?)
    })?;
    run.write("mixed_ranking.csv", &ranking_csv(&ranking)?)?;
    let artifact = MixedArtifact {
        embedding: cfg.embedding,
        latent_dim,
        worst_r2,
        threshold_missed: missed,
        state_cols: states,
        ranking: ranking.iter().map(RankSummary::from_entry).collect(),
        top: ranking.iter().find_map(|e| e.model.clone()),
    };
    run.write_json("mixed.json", &artifact)?;
    print!("{}", render_ranking(&ranking));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodynArtifact {
    pub retained: Vec<String>,
    pub rows: usize,
    pub grid: DetectionGrid,
}

pub fn cmd_nodyn(run: &mut Run) -> Result<(), CliError> {
    let s = scenario(run)?;
    let t0doe = run_scheduled(run, "simulate_t0_doe", &s, &s.schedule)?;
    let section = run.config.nodyn.clone();
    let star = run.step("oracle", |_| Ok(nodyn::build_oracle(&t0doe, &s.workflow, &s.cycle)?))?;
    let grid_and_rows = run.step("regression", |_| {
        let ds = nodyn::build_dataset(&t0doe, &star, &s.schedule, &section.dataset_options())?;
        let fits = nodyn::fit_dataset(&ds)?;
        Ok((nodyn::detect(&fits, &ds.module_names, &section.detect_options()), ds.nrows()))
    })?;
    let (grid, rows) = grid_and_rows;
    run.write("nodyn_coefficients.csv", &grid.coefficients_csv()?)?;
    run.write("nodyn_pvalues.csv", &grid.p_values_csv()?)?;
    run.write("nodyn_retained.csv", &grid.retained_csv()?)?;
    print!("{}", render_grid(&grid));
    run.write_json("nodyn.json", &NodynArtifact { retained: grid.retained.clone(), rows, grid })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineArtifact {
    pub one_at_a_time: OneAtATime,
    pub sensitivity: SensitivityModel,
}

pub fn cmd_baseline(run: &mut Run) -> Result<(), CliError> {
    let s = scenario(run)?;
    let section = run.config.baseline.clone();
    let oat = run.step("one_at_a_time", |_| Ok(one_at_a_time(&s.workflow, &s.cycle)?))?;
    let model = run.step("sensitivity_doe", |_| {
        Ok(sensitivity_doe(&s.workflow, &s.cycle, &s.design, section.criterion, section.max_order)?)
    })?;
    run.write("baseline_coefficients.csv", &model.coefficients_csv()?)?;
    let artifact = BaselineArtifact { one_at_a_time: oat, sensitivity: model };
    print!("{}", render_baseline(&artifact));
    run.write_json("baseline.json", &artifact)?;
    Ok(())
}

fn render_baseline(a: &BaselineArtifact) -> String {
    let rows: Vec<Vec<String>> = a
        .one_at_a_time
        .modules
        .iter()
        .map(|d| vec![d.module.clone(), format!("{:.6e}", d.total_sum_sq())])
        .collect();
    let mut out = format!(
        "One module at a time\n{}",
        render_table(&["Module".into(), "SumSq(T0 - Tj)".into()], &rows)
    );
    let s = &a.sensitivity;
    let rows: Vec<Vec<String>> = s
        .selected
        .iter()
        .map(|t| vec![t.name(), format!("{:.6e}", t.coefficient), format!("{:.3e}", t.p_value)])
        .collect();
    let chosen: Vec<&str> = s
        .module_names
        .iter()
        .zip(&s.x_opt)
        .filter(|(_, on)| **on)
        .map(|(n, _)| n.as_str())
        .collect();
    out.push_str(&format!(
        "\nSensitivity model\n{}X_opt: {{{}}}\nValidation residual: {:.3e} ({})\n",
        render_table(&["Term".into(), "Coefficient".into(), "p".into()], &rows),
        chosen.join(", "),
        s.validation_residual,
        if s.complete { "complete" } else { "model incomplete" }
    ));
    out
}

fn read_artifact<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Option<T>, CliError> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::io(&path, e))
}

/// Render every known artifact in `dir`; missing artifacts are listed.
pub fn render_report(dir: &Path) -> Result<String, CliError> {
    if !dir.is_dir() {
        return Err(CliError::io(dir, "not a directory"));
    }
    let mut out = String::new();
    let mut missing = Vec::new();

    match (read_artifact::<DmdcArtifact>(dir, "dmdc.json")?, dir.join("dmdc_model.json")) {
        (Some(_), model_path) if model_path.exists() => {
            let text = std::fs::read_to_string(&model_path).map_err(|e| CliError::io(&model_path, e))?;
            let model = LinearModel::from_json(&text).map_err(|e| CliError::from_core_io(e, &model_path))?;
            let radius = model.spectral_radius()?;
            out.push_str(&format!("== DMDc ==\n{}\n", render_dmdc(&model, radius)));
        }
        _ => missing.push("dmdc.json"),
    }
    match read_artifact::<MixedArtifact>(dir, "mixed.json")? {
        Some(a) => {
            let entries: Vec<RankEntry> = a.ranking.iter().map(RankSummary::to_entry).collect();
            out.push_str("== MixED-DMD ==\n");
            if let (Some(d), Some(r2)) = (a.latent_dim, a.worst_r2) {
                out.push_str(&format!("Latent dimension {d}, worst reconstruction R2 {r2:.4}\n"));
            }
            out.push_str(&render_ranking(&entries));
            if let Some(top) = &a.top {
                out.push_str(&format!("\nTop combination: {}\n", top.subset.join(" . ")));
                out.push_str(&render_subset_model(top, DISPLAY_FLOOR));
            }
            out.push('\n');
        }
        None => missing.push("mixed.json"),
    }
    match read_artifact::<NodynArtifact>(dir, "nodyn.json")? {
        Some(a) => out.push_str(&format!("== NoDyn ({} rows) ==\n{}\n", a.rows, render_grid(&a.grid))),
        None => missing.push("nodyn.json"),
    }
    match read_artifact::<BaselineArtifact>(dir, "baseline.json")? {
        Some(a) => out.push_str(&format!("== Baselines ==\n{}\n", render_baseline(&a))),
        None => missing.push("baseline.json"),
    }
    if !missing.is_empty() {
        out.push_str(&format!("Missing artifacts: {}\n", missing.join(", ")));
    }
    Ok(out)
}

pub fn cmd_report(dir: &Path) -> Result<(), CliError> {
    let text = render_report(dir)?;
    let path = dir.join("report.txt");
    std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    print!("{text}");
    Ok(())
}
