use std::path::{Path, PathBuf};
use std::sync::Arc;

use hingenet::config::ExperimentConfig;
use hingenet::data::{load_dataset, save_dataset, Dataset, Example};
use hingenet::eval::{downbeat_f_measure, evaluate as score_pair, score_corpus, write_corpus_csv, CorpusItem};
use hingenet::foundation::{build_stub, StubModel};
use hingenet::hingenet::{harmonic_intervals, HarmonicIntervalSpec};
use hingenet::model::{load_checkpoint, save_checkpoint, AnyModel, BeatModel, ModelInput};
use hingenet::postprocess::{decode_activations, format_beats, load_activations, load_beats, save_activations, save_beats};
use hingenet::train::{
    ablate_projection, compare_methods, train_with, write_ablation, write_comparison, SplitData, TrainOptions,
};
use hingenet::{Error, Exec, Result};
use serde_json::json;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn require_out<'a>(out: Option<&'a Path>, command: &str) -> Result<&'a Path> {
    out.ok_or_else(|| Error::InvalidArgument(format!("{command} needs --out")))
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn options(cfg: &ExperimentConfig) -> TrainOptions<'static> {
    TrainOptions {
        exec: Exec::default(),
        dbn: cfg.dbn,
        ..TrainOptions::default()
    }
}

fn stub_for(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Arc<StubModel>> {
    let dim = ds.items.first().map_or(ds.config.feature_dim, |e| e.features.shape().c);
    if cfg.stub.input_channels != dim {
        return Err(Error::Config(format!(
            "stub.input_channels is {} but the dataset has {dim} feature channels",
            cfg.stub.input_channels
        )));
    }
    Ok(Arc::new(build_stub(cfg.stub)?))
}

fn config_json(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

pub fn gen_data(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "gen-data")?;
    let ds = Dataset::generate(&cfg.data, Exec::default())?;
    save_dataset(&ds, out)?;
    println!(
        "{} items ({} train, {} val, {} test) in {}",
        ds.items.len(),
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, data: &Path, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "train")?;
    let ds = load_dataset(data)?;
    let split = SplitData::from_dataset(&ds)?;
    let stub = stub_for(cfg, &ds)?;
    let mut model = AnyModel::build(cfg.method, stub, &cfg.hinge, &cfg.baseline, cfg.seed)?;
    let record = train_with(&mut model, &split, &cfg.train, &options(cfg))?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    save_checkpoint(&model, &out.join("model.hgnm"))?;
    let run = json!({ "config": config_json(cfg)?, "record": record });
    let path = out.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run)? + "\n").map_err(|e| io_err(&path, e))?;
    let test_f = record.test.map_or(f64::NAN, |m| m.f_measure);
    println!(
        "{}: {} epochs, best epoch {} (val loss {:.6}), test beat F {:.4}, downbeat F {:.4}",
        cfg.method.name(),
        record.epochs_run,
        record.best_epoch,
        record.best_val_loss,
        test_f,
        record.test_downbeat_f.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn beat_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "beats") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn evaluate(est: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    if est.is_file() {
        let e = load_beats(est)?;
        let r = load_beats(reference)?;
        let report = score_pair(&e, &r)?;
        return print_json(&json!({ "report": report, "downbeat_f": downbeat_f_measure(&e, &r)? }));
    }
    let items: Vec<CorpusItem> = beat_files(est)?
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            CorpusItem {
                reference: reference.join(format!("{id}.beats")),
                id,
                estimate: p,
            }
        })
        .collect();
    let report = score_corpus(&items, Exec::default())?;
    if let Some(out) = out {
        write_corpus_csv(&report, out)?;
    }
    print_json(&json!({ "mean": report.mean, "items": report.items.len(), "excluded": report.excluded }))
}

pub fn decode_file(cfg: &ExperimentConfig, activations: &Path, out: Option<&Path>) -> Result<()> {
    let pair = load_activations(activations)?;
    let beats = decode_activations(&pair, &cfg.dbn)?;
    match out {
        Some(path) => save_beats(&beats, path),
        None => {
            print!("{}", format_beats(&beats));
            Ok(())
        }
    }
}

/// Run a checkpoint over a dataset split, writing `<id>.act` and
/// `<id>.beats` for every item.
pub fn decode_dataset(cfg: &ExperimentConfig, model: &Path, data: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "decode")?;
    let model = load_checkpoint(model)?;
    let ds = load_dataset(data)?;
    let items: Vec<&Example> = match split {
        "train" => ds.subset(&ds.splits.train),
        "val" => ds.subset(&ds.splits.val),
        "test" => ds.subset(&ds.splits.test),
        _ => ds.items.iter().collect(),
    };
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let results = Exec::default().map(&items, |ex| -> Result<usize> {
        let pair = model.predict(&ModelInput::Raw {
            features: &ex.features,
            frame_rate: ex.frame_rate,
        })?;
        save_activations(&pair, &out.join(format!("{}.act", ex.id)))?;
        let beats = decode_activations(&pair, &cfg.dbn)?;
        save_beats(&beats, &out.join(format!("{}.beats", ex.id)))?;
        Ok(beats.len())
    });
    let total: usize = results.into_iter().sum::<Result<usize>>()?;
    println!("{} items, {total} beats in {}", items.len(), out.display());
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig, data: &Path, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "ablate")?;
    let ds = load_dataset(data)?;
    let split = SplitData::from_dataset(&ds)?;
    let stub = stub_for(cfg, &ds)?;
    let table = ablate_projection(&split, stub, &cfg.hinge, &cfg.train, &cfg.ablation, &options(cfg), cfg.jobs)?;
    write_ablation(out, &table, &config_json(cfg)?)?;
    for c in &table.cells {
        match &c.skipped {
            Some(why) => println!("r={} ham={}: skipped ({why})", c.r, c.ham),
            None => println!(
                "r={} ham={}: beat F {:.4} ± {:.4}, downbeat F {:.4} ± {:.4}",
                c.r, c.ham, c.beat_f_mean, c.beat_f_std, c.downbeat_f_mean, c.downbeat_f_std
            ),
        }
    }
    Ok(())
}

pub fn compare(cfg: &ExperimentConfig, data: &Path, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "compare")?;
    let ds = load_dataset(data)?;
    let split = SplitData::from_dataset(&ds)?;
    let stub = stub_for(cfg, &ds)?;
    let table = compare_methods(
        &split,
        stub,
        &cfg.hinge,
        &cfg.baseline,
        &cfg.train,
        &cfg.compare,
        &options(cfg),
        cfg.jobs,
    )?;
    write_comparison(out, &table, &config_json(cfg)?)?;
    for r in &table.rows {
        println!(
            "{}: beat F {:.4} ± {:.4}, downbeat F {:.4} ± {:.4}, trainable {} ({:.3}%)",
            r.method.name(),
            r.beat_f_mean,
            r.beat_f_std,
            r.downbeat_f_mean,
            r.downbeat_f_std,
            r.counts.trainable,
            100.0 * r.counts.fraction
        );
    }
    Ok(())
}

pub fn intervals(q: u32, n: u32) -> Result<()> {
    let d = harmonic_intervals(HarmonicIntervalSpec {
        bins_per_octave: q,
        n_harmonics: n,
    })?;
    println!("{}", d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "));
    Ok(())
}

pub fn inspect(checkpoint: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let params: Vec<_> = model
        .params()
        .iter()
        .map(|p| json!({ "name": p.name, "shape": [p.tensor.shape().b, p.tensor.shape().c, p.tensor.shape().t], "trainable": p.trainable }))
        .collect();
    print_json(&json!({
        "kind": model.kind(),
        "spec": model.spec(),
        "counts": model.parameter_counts(),
        "param_digest": hex(&model.params().digest()),
        "stub_digest": model.stub().map(|s| hex(&s.digest())),
        "parameters": params,
    }))
}
