//! Grid runner: configure, train, generate, evaluate and write results.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml          effective merged configuration
//! metrics.csv          one row per (alpha, d, model, seed)
//! per_dim_metrics.csv  the same metrics before averaging over dimensions
//! timings.csv          wall-clock and status per cell
//! record.json          full run record (losses, telemetry, paths)
//! cells/<cell>/        checkpoint.bin, ccdf_{test,gen}_dim<j>.csv
//! ```

use crate::datagen::{cell_key, pareto_sample, DatasetConfig};
use crate::error::{Error, Result};
use crate::eval::{ccdf_curve, compute_metrics, MetricsReport};
use crate::fmt::fmt_f64;
use crate::neural::{empirical_lipschitz, HIDDEN};
use crate::phdist::PhTelemetry;
use crate::rng::{substream, tag};
use crate::vae::{generate, save_checkpoint, train, DecoderKind, GenMode, TrainConfig, VaeModel, LATENT_DIM, PHASES};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub const WORKERS_ENV: &str = "PHVAE_WORKERS";
pub const METRICS_HEADER: &str = "alpha,d,model,seed,ks,ks_tail,q99_err,q995_err,u,n_tail_gen,n_tail_test,lipschitz_est,min_rate,runtime_s";
const PER_DIM_HEADER: &str = "alpha,d,model,seed,dim,ks,ks_tail,q99_err,q995_err,u,n_tail_gen,n_tail_test";

/// Floor applied to shifted data so it stays in the PH support.
const SHIFT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale settings: 20k samples, 100 epochs.
    #[default]
    Paper,
    /// Laptop-scale settings: 5k training samples, 30 epochs.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" | "full" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub alphas: Vec<f64>,
    pub dims: Vec<usize>,
    pub models: Vec<DecoderKind>,
    pub seeds: Vec<u64>,
    pub scale: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_gen: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    pub latent_dim: usize,
    pub hidden: usize,
    pub phases: usize,
    pub gen_mode: GenMode,
    /// Model `x - scale` instead of `x`, adding `scale` back on generation.
    pub shift: bool,
    pub lipschitz_pairs: usize,
    pub lipschitz_radius: f64,
    /// Fill the `runtime_s` column of metrics.csv. Off by default so that
    /// the file is byte-reproducible.
    pub timing: bool,
    pub checkpoints: bool,
    pub curves: bool,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = Self {
            preset,
            alphas: vec![2.0, 3.0, 5.0, 30.0],
            dims: vec![1, 5, 10],
            models: vec![DecoderKind::Gaussian, DecoderKind::Ph],
            seeds: vec![0],
            scale: 1.0,
            n_train: 20_000,
            n_test: 20_000,
            n_gen: 20_000,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            clip_norm: None,
            latent_dim: LATENT_DIM,
            hidden: HIDDEN,
            phases: PHASES,
            gen_mode: GenMode::Sample,
            shift: false,
            lipschitz_pairs: 2000,
            lipschitz_radius: 3.0,
            timing: false,
            checkpoints: true,
            curves: true,
            out_dir: PathBuf::from("results"),
        };
        if preset == Preset::Desk {
            cfg.n_train = 5_000;
            cfg.epochs = 30;
        }
        cfg
    }

    /// Reads a TOML config. A `preset` key selects the base values that the
    /// remaining keys override; `preset_override` wins over the file.
    pub fn from_toml(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let mut file: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let file_preset = match file.remove("preset") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("preset must be a string".into()))?
                    .parse::<Preset>()?,
            ),
            None => None,
        };
        let preset = preset_override.or(file_preset).unwrap_or_default();
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in file {
            merged.insert(k, v);
        }
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.alphas.is_empty() || self.dims.is_empty() || self.models.is_empty() || self.seeds.is_empty() {
            return bad("alphas, dims, models and seeds must be non-empty");
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad("tail indices must be positive");
        }
        if self.dims.contains(&0) {
            return bad("dimensions must be positive");
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad("scale must be positive");
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_gen == 0 || self.batch_size == 0 {
            return bad("sample counts and batch size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.latent_dim == 0 || self.hidden == 0 || self.phases == 0 {
            return bad("network sizes must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    /// Fields whose values differ from the full-scale defaults, as
    /// `key=value` strings.
    pub fn overrides(&self) -> Vec<String> {
        let base = toml::Table::try_from(Self::preset(Preset::Paper)).unwrap_or_default();
        let mine = toml::Table::try_from(self).unwrap_or_default();
        let mut out = Vec::new();
        for (k, v) in &mine {
            if k == "out_dir" || k == "preset" {
                continue;
            }
            if base.get(k) != Some(v) {
                out.push(format!("{k}={v}"));
            }
        }
        for k in base.keys() {
            if !mine.contains_key(k) {
                out.push(format!("{k}=<unset>"));
            }
        }
        out
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &alpha in &self.alphas {
            for &d in &self.dims {
                for &model in &self.models {
                    for &seed in &self.seeds {
                        cells.push(Cell { alpha, d, model, seed });
                    }
                }
            }
        }
        cells
    }
}

/// Flag-level overrides applied on top of the file and preset.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub alphas: Option<Vec<f64>>,
    pub dims: Option<Vec<usize>>,
    pub models: Option<Vec<DecoderKind>>,
    pub seeds: Option<Vec<u64>>,
    pub gen_mode: Option<GenMode>,
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub n_train: Option<usize>,
    pub clip_norm: Option<f64>,
    pub shift: bool,
    pub timing: bool,
}

impl Overrides {
    pub fn apply(self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(v) = self.alphas {
            cfg.alphas = v;
        }
        if let Some(v) = self.dims {
            cfg.dims = v;
        }
        if let Some(v) = self.models {
            cfg.models = v;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(v) = self.gen_mode {
            cfg.gen_mode = v;
        }
        if let Some(v) = self.out_dir {
            cfg.out_dir = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.n_train {
            cfg.n_train = v;
        }
        if self.clip_norm.is_some() {
            cfg.clip_norm = self.clip_norm;
        }
        cfg.shift |= self.shift;
        cfg.timing |= self.timing;
        cfg.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub alpha: f64,
    pub d: usize,
    pub model: DecoderKind,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("a{}_d{}_{}_s{}", fmt_f64(self.alpha), self.d, self.model, self.seed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok {
        metrics: MetricsReport,
        epoch_losses: Vec<f64>,
        telemetry: TelemetrySummary,
        checkpoint: Option<PathBuf>,
    },
    Failed {
        error: String,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TelemetrySummary {
    pub evaluations: u64,
    pub clamped: u64,
    pub max_terms: u64,
    pub mean_terms: f64,
}

impl From<&PhTelemetry> for TelemetrySummary {
    fn from(t: &PhTelemetry) -> Self {
        Self {
            evaluations: t.evaluations,
            clamped: t.clamped,
            max_terms: t.max_terms,
            mean_terms: if t.evaluations == 0 {
                0.0
            } else {
                t.total_terms as f64 / t.evaluations as f64
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: Cell,
    pub runtime_s: f64,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

impl CellRecord {
    pub fn metrics(&self) -> Option<&MetricsReport> {
        match &self.outcome {
            CellOutcome::Ok { metrics, .. } => Some(metrics),
            CellOutcome::Failed { .. } => None,
        }
    }

    pub fn failed(&self) -> bool {
        matches!(self.outcome, CellOutcome::Failed { .. })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config_hash: String,
    pub overrides: Vec<String>,
    pub config: ExperimentConfig,
    pub wall_clock_s: f64,
    pub cells: Vec<CellRecord>,
}

impl RunRecord {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.failed()).count()
    }
}

/// 64-bit FNV-1a, printed as hex.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn cell_streams(cell: &Cell, t: u64) -> crate::rng::StreamRng {
    let key = cell_key(cell.alpha, cell.d);
    substream(cell.seed, &[t, key[0], key[1]])
}

/// Trains and evaluates one cell. Data, initialization and training noise
/// depend only on `(seed, alpha, d)`, so both models see the same data and
/// the same encoder initialization.
pub fn run_cell(cell: &Cell, cfg: &ExperimentConfig, cell_dir: Option<&Path>) -> Result<CellOutcome> {
    let data = pareto_sample(&DatasetConfig {
        tail_index: cell.alpha,
        scale: cfg.scale,
        dim: cell.d,
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        n_gen: cfg.n_gen,
        seed: cell.seed,
    })?;
    let offset = if cfg.shift { cfg.scale } else { 0.0 };
    let train_x = if cfg.shift {
        data.train.map(|x| (x - offset).max(SHIFT_FLOOR))
    } else {
        data.train.clone()
    };

    let mut model = VaeModel::new(cell.model, cell.d, cfg.latent_dim, cfg.hidden, cfg.phases)?;
    model.init_params(&mut cell_streams(cell, tag::INIT));
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        clip_norm: cfg.clip_norm,
    };
    let report = train(&mut model, &train_x, &tc, &mut cell_streams(cell, tag::TRAIN_LOOP))?;

    let gen = generate(&model, cfg.n_gen, &mut cell_streams(cell, tag::GENERATE), cfg.gen_mode)?;
    let samples = gen.samples.map(|x| x + offset);
    if !samples.all_finite() {
        return Err(Error::NonFinite { op: "generate" });
    }
    let lipschitz = empirical_lipschitz(&model.decoder, cfg.lipschitz_pairs, cfg.lipschitz_radius, &mut cell_streams(cell, tag::DIAGNOSTIC))?;
    let rates = (cell.model == DecoderKind::Ph).then_some(gen.smallest_rates.as_slice());
    let metrics = compute_metrics(&samples, &data.test, rates, lipschitz)?;

    let mut checkpoint = None;
    if let Some(dir) = cell_dir {
        std::fs::create_dir_all(dir)?;
        if cfg.checkpoints {
            let p = dir.join("checkpoint.bin");
            save_checkpoint(&model, &p)?;
            checkpoint = Some(p);
        }
        if cfg.curves {
            for j in 0..cell.d {
                let mut buf = Vec::new();
                ccdf_curve(&data.test.column_values(j), &format!("test {} dim {j}", cell.name()))?.write_csv(&mut buf)?;
                std::fs::write(dir.join(format!("ccdf_test_dim{j}.csv")), buf)?;
                let mut buf = Vec::new();
                ccdf_curve(&samples.column_values(j), &format!("{} dim {j}", cell.name()))?.write_csv(&mut buf)?;
                std::fs::write(dir.join(format!("ccdf_gen_dim{j}.csv")), buf)?;
            }
        }
    }
    Ok(CellOutcome::Ok {
        metrics,
        epoch_losses: report.epoch_losses,
        telemetry: (&report.telemetry).into(),
        checkpoint,
    })
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

/// Runs every cell, in parallel, and writes all outputs under `cfg.out_dir`.
/// Failed cells are recorded and do not stop the grid.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;
    let config_text = cfg.to_toml()?;
    std::fs::write(out.join("config.toml"), &config_text)?;

    let cells = cfg.cells();
    let cells: Vec<CellRecord> = pool()?.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let t0 = Instant::now();
                let dir = out.join("cells").join(cell.name());
                let outcome = run_cell(cell, cfg, Some(&dir)).unwrap_or_else(|e| CellOutcome::Failed { error: e.to_string() });
                CellRecord {
                    cell: *cell,
                    runtime_s: t0.elapsed().as_secs_f64(),
                    outcome,
                }
            })
            .collect()
    });

    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(&config_text),
        overrides: cfg.overrides(),
        config: cfg.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
        cells,
    };
    std::fs::write(out.join("metrics.csv"), metrics_csv(&record.cells, cfg.timing))?;
    std::fs::write(out.join("per_dim_metrics.csv"), per_dim_csv(&record.cells))?;
    std::fs::write(out.join("timings.csv"), timings_csv(&record.cells))?;
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(out.join("record.json"), json)?;
    Ok(record)
}

fn cell_prefix(c: &Cell) -> String {
    format!("{},{},{},{}", fmt_f64(c.alpha), c.d, c.model, c.seed)
}

/// Failed cells keep their row with empty metric fields.
pub fn metrics_csv(cells: &[CellRecord], timing: bool) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in cells {
        s.push_str(&cell_prefix(&r.cell));
        match r.metrics() {
            Some(m) => {
                let min_rate = m.smallest_rate.map(|r| fmt_f64(r.min)).unwrap_or_default();
                for v in [m.ks, m.ks_tail, m.q99_err, m.q995_err, m.u, m.n_tail_gen, m.n_tail_test, m.lipschitz_estimate] {
                    s.push(',');
                    s.push_str(&fmt_f64(v));
                }
                s.push(',');
                s.push_str(&min_rate);
            }
            None => s.push_str(",,,,,,,,,"),
        }
        s.push(',');
        if timing {
            s.push_str(&fmt_f64(r.runtime_s));
        }
        s.push('\n');
    }
    s
}

fn per_dim_csv(cells: &[CellRecord]) -> String {
    let mut s = String::from(PER_DIM_HEADER);
    s.push('\n');
    for r in cells {
        let Some(m) = r.metrics() else { continue };
        for (j, p) in m.per_dim.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{j},{},{},{},{},{},{},{}",
                cell_prefix(&r.cell),
                fmt_f64(p.ks),
                fmt_f64(p.ks_tail),
                fmt_f64(p.q99_err),
                fmt_f64(p.q995_err),
                fmt_f64(p.u),
                p.n_tail_gen,
                p.n_tail_test
            );
        }
    }
    s
}

fn timings_csv(cells: &[CellRecord]) -> String {
    let mut s = String::from("alpha,d,model,seed,status,runtime_s\n");
    for r in cells {
        let status = if r.failed() { "failed" } else { "ok" };
        let _ = writeln!(s, "{},{status},{}", cell_prefix(&r.cell), fmt_f64(r.runtime_s));
    }
    s
}

/// One parsed metrics.csv row; `None` fields were empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub alpha: f64,
    pub d: usize,
    pub model: DecoderKind,
    pub seed: u64,
    pub values: BTreeMap<String, Option<f64>>,
}

impl MetricsRow {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied().flatten()
    }
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Io("metrics file is empty".into()))?
        .split(',')
        .collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Io("unexpected metrics header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(Error::Io(format!("metrics row {}: expected {} fields", i + 1, header.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Io(format!("metrics row {}: bad number '{s}'", i + 1))) };
        let mut values = BTreeMap::new();
        for (k, v) in header.iter().zip(&f).skip(4) {
            values.insert(k.to_string(), if v.is_empty() { None } else { Some(num(v)?) });
        }
        rows.push(MetricsRow {
            alpha: num(f[0])?,
            d: f[1].parse().map_err(|_| Error::Io(format!("metrics row {}: bad d", i + 1)))?,
            model: f[2].parse()?,
            seed: f[3].parse().map_err(|_| Error::Io(format!("metrics row {}: bad seed", i + 1)))?,
            values,
        });
    }
    Ok(rows)
}

/// Seed-averaged summary of a results directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: String,
    /// `d,model,alpha,ks_tail,n_seeds` series, one per (d, model).
    pub tail_series_csv: String,
    pub rows: usize,
}

pub fn report(dir: &Path) -> Result<Report> {
    let path = dir.join("metrics.csv");
    if !path.exists() {
        return Err(Error::Io(format!("{} has no metrics.csv", dir.display())));
    }
    let rows = parse_metrics_csv(&std::fs::read_to_string(&path)?)?;
    if rows.is_empty() {
        return Err(Error::Io(format!("{} contains no results", path.display())));
    }
    // (d, model, alpha bits) -> seed rows; alphas are positive so bit order is numeric order
    let mut groups: BTreeMap<(usize, DecoderKind, u64), Vec<&MetricsRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.d, r.model, r.alpha.to_bits())).or_default().push(r);
    }
    let cols = ["ks", "ks_tail", "q99_err", "q995_err", "min_rate"];
    let mut table = format!("{:>6} {:>4} {:>9} {:>6}", "alpha", "d", "model", "seeds");
    for c in cols {
        let _ = write!(table, " {c:>10}");
    }
    table.push('\n');
    let mut series = String::from("d,model,alpha,ks_tail,n_seeds\n");
    for ((d, model, bits), group) in &groups {
        let alpha = f64::from_bits(*bits);
        let ok: Vec<&&MetricsRow> = group.iter().filter(|r| r.get("ks").is_some()).collect();
        let _ = write!(table, "{:>6} {d:>4} {:>9} {:>6}", fmt_f64(alpha), model.to_string(), format!("{}/{}", ok.len(), group.len()));
        for c in cols {
            let vals: Vec<f64> = ok.iter().filter_map(|r| r.get(c)).collect();
            if vals.is_empty() {
                let _ = write!(table, " {:>10}", "-");
            } else {
                let _ = write!(table, " {:>10.4}", vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        table.push('\n');
        let tails: Vec<f64> = ok.iter().filter_map(|r| r.get("ks_tail")).collect();
        if !tails.is_empty() {
            let _ = writeln!(series, "{d},{model},{},{},{}", fmt_f64(alpha), fmt_f64(tails.iter().sum::<f64>() / tails.len() as f64), tails.len());
        }
    }
    Ok(Report {
        table,
        tail_series_csv: series,
        rows: rows.len(),
    })
}
