use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::svg::{bar_chart, Series};
use super::{train_with, FeatureCache, RunRecord, SplitData, TrainConfig, TrainOptions};
use crate::baselines::BaselineConfig;
use crate::error::{IoContext, Result};
use crate::foundation::StubModel;
use crate::hingenet::HingeConfig;
use crate::model::{AnyModel, BeatModel, MethodKind, ParameterCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub r_values: Vec<usize>,
    pub ham: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            r_values: vec![2, 4, 6, 8],
            ham: vec![true, false],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSpec {
    pub methods: Vec<MethodKind>,
    pub seeds: Vec<u64>,
}

impl Default for CompareSpec {
    fn default() -> Self {
        CompareSpec {
            methods: MethodKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn scores(records: &[RunRecord]) -> (Vec<f64>, Vec<f64>) {
    (
        records.iter().map(|r| r.test.map_or(f64::NAN, |m| m.f_measure)).collect(),
        records.iter().map(|r| r.test_downbeat_f.unwrap_or(f64::NAN)).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub r: usize,
    pub ham: bool,
    /// Why the cell was not run.
    pub skipped: Option<String>,
    pub beat_f: Vec<f64>,
    pub downbeat_f: Vec<f64>,
    pub beat_f_mean: f64,
    pub beat_f_std: f64,
    pub downbeat_f_mean: f64,
    pub downbeat_f_std: f64,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, r: usize, ham: bool) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.r == r && c.ham == ham)
    }
}

fn shared_cache(stub: &StubModel, data: &SplitData<'_>, opts: &TrainOptions<'_>) -> Result<Option<FeatureCache>> {
    if opts.cache.is_some() {
        return Ok(None);
    }
    FeatureCache::build(stub, &data.all(), opts.exec).map(Some)
}

/// Full factorial over projection factor and HAM on/off. Cells whose
/// configuration is invalid for the stub are recorded as skipped.
/// Runs are spread over at most `jobs` threads; results come back in cell
/// order.
pub fn ablate_projection(
    data: &SplitData<'_>,
    stub: Arc<StubModel>,
    base: &HingeConfig,
    train_cfg: &TrainConfig,
    spec: &AblationSpec,
    opts: &TrainOptions<'_>,
    jobs: usize,
) -> Result<AblationTable> {
    let local = shared_cache(&stub, data, opts)?;
    let mut opts = *opts;
    if let Some(c) = &local {
        opts.cache = Some(c);
    }
    let mut cells = Vec::new();
    let mut runs = Vec::new();
    for &r in &spec.r_values {
        for &ham in &spec.ham {
            let cfg = HingeConfig {
                projection_factor: r,
                ham_enabled: ham,
                ..base.clone()
            };
            let skipped = cfg.validate(stub.hidden()).err().map(|e| e.to_string());
            if skipped.is_none() {
                for &seed in &spec.seeds {
                    runs.push((cells.len(), cfg.clone(), seed));
                }
            }
            cells.push(AblationCell {
                r,
                ham,
                skipped,
                beat_f: Vec::new(),
                downbeat_f: Vec::new(),
                beat_f_mean: f64::NAN,
                beat_f_std: f64::NAN,
                downbeat_f_mean: f64::NAN,
                downbeat_f_std: f64::NAN,
                records: Vec::new(),
            });
        }
    }
    let exec = opts.exec;
    let results = exec.with_jobs(jobs, || {
        exec.map(&runs, |(_, cfg, seed)| -> Result<RunRecord> {
            let mut model = AnyModel::build(MethodKind::Hinge, stub.clone(), cfg, &BaselineConfig::default(), *seed)?;
            let tc = TrainConfig {
                seed: *seed,
                ..train_cfg.clone()
            };
            train_with(&mut model, data, &tc, &opts)
        })
    })?;
    for ((cell, _, _), rec) in runs.iter().zip(results) {
        cells[*cell].records.push(rec?);
    }
    for cell in &mut cells {
        let (b, d) = scores(&cell.records);
        (cell.beat_f_mean, cell.beat_f_std) = mean_std(&b);
        (cell.downbeat_f_mean, cell.downbeat_f_std) = mean_std(&d);
        cell.beat_f = b;
        cell.downbeat_f = d;
    }
    Ok(AblationTable {
        seeds: spec.seeds.clone(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: MethodKind,
    pub beat_f: Vec<f64>,
    pub downbeat_f: Vec<f64>,
    pub beat_f_mean: f64,
    pub beat_f_std: f64,
    pub downbeat_f_mean: f64,
    pub downbeat_f_std: f64,
    pub counts: ParameterCounts,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn row(&self, method: MethodKind) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Train every method on the same data and stub for every seed.
#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    data: &SplitData<'_>,
    stub: Arc<StubModel>,
    hinge: &HingeConfig,
    baseline: &BaselineConfig,
    train_cfg: &TrainConfig,
    spec: &CompareSpec,
    opts: &TrainOptions<'_>,
    jobs: usize,
) -> Result<CompareTable> {
    let local = shared_cache(&stub, data, opts)?;
    let mut opts = *opts;
    if let Some(c) = &local {
        opts.cache = Some(c);
    }
    // counts come from a fresh build so skipped seeds cannot hide them
    let counts = spec
        .methods
        .iter()
        .map(|&m| Ok(AnyModel::build(m, stub.clone(), hinge, baseline, 0)?.parameter_counts()))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<(usize, MethodKind, u64)> = spec
        .methods
        .iter()
        .enumerate()
        .flat_map(|(i, &m)| spec.seeds.iter().map(move |&s| (i, m, s)))
        .collect();
    let exec = opts.exec;
    let results = exec.with_jobs(jobs, || {
        exec.map(&runs, |&(_, method, seed)| -> Result<RunRecord> {
            let mut model = AnyModel::build(method, stub.clone(), hinge, baseline, seed)?;
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            train_with(&mut model, data, &tc, &opts)
        })
    })?;
    let mut per_method: Vec<Vec<RunRecord>> = vec![Vec::new(); spec.methods.len()];
    for ((i, _, _), rec) in runs.iter().zip(results) {
        per_method[*i].push(rec?);
    }
    let rows = spec
        .methods
        .iter()
        .zip(per_method)
        .zip(counts)
        .map(|((&method, records), counts)| {
            let (b, d) = scores(&records);
            let (bm, bs) = mean_std(&b);
            let (dm, ds) = mean_std(&d);
            CompareRow {
                method,
                beat_f: b,
                downbeat_f: d,
                beat_f_mean: bm,
                beat_f_std: bs,
                downbeat_f_mean: dm,
                downbeat_f_std: ds,
                counts,
                records,
            }
        })
        .collect();
    Ok(CompareTable {
        seeds: spec.seeds.clone(),
        rows,
    })
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn code_version() -> (String, String) {
    let version = format!("hingenet {}", env!("CARGO_PKG_VERSION"));
    let hash = hex::encode(Sha256::digest(version.as_bytes()));
    (version, hash)
}

fn write_manifest(path: &Path, kind: &str, config: &serde_json::Value, table: serde_json::Value) -> Result<()> {
    let (version, hash) = code_version();
    let manifest = serde_json::json!({
        "kind": kind,
        "code_version": version,
        "code_hash": hash,
        "config": config,
        "table": table,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(path, text).at(path)
}

/// `ablation.csv`, `ablation.svg` and `ablation_manifest.json` in `dir`.
pub fn write_ablation(dir: &Path, table: &AblationTable, config: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let path = dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "r",
        "ham",
        "n_seeds",
        "beat_f_mean",
        "beat_f_std",
        "downbeat_f_mean",
        "downbeat_f_std",
        "status",
    ])?;
    for c in &table.cells {
        w.write_record([
            c.r.to_string(),
            if c.ham { "on" } else { "off" }.to_string(),
            c.records.len().to_string(),
            fmt(c.beat_f_mean),
            fmt(c.beat_f_std),
            fmt(c.downbeat_f_mean),
            fmt(c.downbeat_f_std),
            c.skipped.as_ref().map_or("ok".to_string(), |s| format!("skipped: {s}")),
        ])?;
    }
    w.flush().at(&path)?;

    let mut rs: Vec<usize> = table.cells.iter().map(|c| c.r).collect();
    rs.dedup();
    let series = [true, false]
        .iter()
        .filter(|&&h| table.cells.iter().any(|c| c.ham == h))
        .map(|&h| Series {
            label: if h { "with HAM" } else { "without HAM" }.to_string(),
            values: rs
                .iter()
                .map(|&r| table.cell(r, h).map_or((f64::NAN, 0.0), |c| (c.beat_f_mean, c.beat_f_std)))
                .collect(),
        })
        .collect::<Vec<_>>();
    let cats: Vec<String> = rs.iter().map(|r| format!("r = {r}")).collect();
    let svg = bar_chart("Beat F-measure by projection factor", "beat F", &cats, &series);
    let svg_path = dir.join("ablation.svg");
    std::fs::write(&svg_path, svg).at(&svg_path)?;
    write_manifest(&dir.join("ablation_manifest.json"), "ablation", config, serde_json::to_value(table)?)
}

/// `compare.csv`, `compare.svg` and `compare_manifest.json` in `dir`.
pub fn write_comparison(dir: &Path, table: &CompareTable, config: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let path = dir.join("compare.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "method",
        "n_seeds",
        "beat_f_mean",
        "beat_f_std",
        "downbeat_f_mean",
        "downbeat_f_std",
        "trainable",
        "frozen",
        "trainable_fraction",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.method.name().to_string(),
            r.records.len().to_string(),
            fmt(r.beat_f_mean),
            fmt(r.beat_f_std),
            fmt(r.downbeat_f_mean),
            fmt(r.downbeat_f_std),
            r.counts.trainable.to_string(),
            r.counts.frozen.to_string(),
            format!("{:.6}", r.counts.fraction),
        ])?;
    }
    w.flush().at(&path)?;
    let cats: Vec<String> = table.rows.iter().map(|r| r.method.name().to_string()).collect();
    let series = vec![
        Series {
            label: "beat F".into(),
            values: table.rows.iter().map(|r| (r.beat_f_mean, r.beat_f_std)).collect(),
        },
        Series {
            label: "downbeat F".into(),
            values: table.rows.iter().map(|r| (r.downbeat_f_mean, r.downbeat_f_std)).collect(),
        },
    ];
    let svg_path = dir.join("compare.svg");
    std::fs::write(&svg_path, bar_chart("Fine-tuning methods", "F-measure", &cats, &series)).at(&svg_path)?;
    write_manifest(&dir.join("compare_manifest.json"), "compare", config, serde_json::to_value(table)?)
}
