//! Command implementations behind the `milsi` binary.

use crate::bagging::LabeledImage;
use crate::error::{Error, Result};
use crate::image::write_pgm;
use crate::model::{attention_rollout, load_checkpoint, ModelConfig};
use crate::rng::RNG_ALGORITHM;
use crate::synthdata::{self, augment, generate_dataset, load_split, write_dataset, AugConfig, Dataset, GenConfig, Manifest};
use crate::trainer::{self, epochs_to_csv, MetricsReport, TrainConfig, Variant};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::PatchSize { .. } => 2,
        _ => 1,
    }
}

/// One training run: variant, model, optimisation, augmentation and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aug: AugConfig,
    pub data_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            variant: Variant::MilSi,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            aug: AugConfig::default(),
            data_dir: PathBuf::from("data"),
        }
    }
}

/// Sets `root.a.b.c = value` for the key `"a.b.c"`, creating objects as needed.
pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!("{key:?}: {part:?} is not inside an object")));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

/// Parses `k=v`; `v` is read as JSON and falls back to a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Loads a JSON config (or the defaults), applies overrides and deserialises.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<T> {
    let mut v = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(T::default())?,
    };
    for o in overrides {
        let (k, val) = parse_override(o)?;
        set_path(&mut v, &k, val)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

/// Generates a dataset into `out` and returns its manifest.
pub fn cmd_generate(cfg: &GenConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let ds = generate_dataset(cfg)?;
    log::info!(
        "generated {}/{}/{} samples into {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    write_dataset(&ds, cfg, out)
}

fn images(split: Vec<synthdata::Sample>) -> Vec<LabeledImage> {
    split.into_iter().map(|s| s.image).collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let load = |s| {
        load_split(dir, s).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("dataset {} split {s}: {io}", dir.display())),
            e => e,
        })
    };
    Ok(Dataset {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
    })
}

/// Contents of `metrics.json`: the test report plus run identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub config_hash: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    #[serde(flatten)]
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub rng: String,
    pub files: BTreeMap<String, String>,
}

/// Trains `spec.variant`, writing `best.ckpt`, `epochs.csv`, `metrics.json`,
/// `spec.json` and `manifest.json` into `out`.
pub fn cmd_train(spec: &ExperimentSpec, out: &Path) -> Result<RunReport> {
    spec.model.validate()?;
    spec.train.validate()?;
    spec.aug.validate()?;
    let ds = load_dataset(&spec.data_dir)?;
    let (train, val, test) = (images(ds.train), images(ds.val), images(ds.test));
    let outcome = trainer::train(&train, &val, &spec.model, &spec.train, &spec.aug, spec.variant)?;
    let test_report = trainer::evaluate(&outcome.best, &test, &spec.aug, spec.train.eval_batch)?;

    std::fs::create_dir_all(out)?;
    let hash = config_hash(spec)?;
    let report = RunReport {
        variant: spec.variant,
        config_hash: hash.clone(),
        seed: spec.train.seed,
        best_epoch: outcome.best_epoch,
        best_val_accuracy: outcome.best_val_accuracy,
        test: test_report,
    };
    let mut files = BTreeMap::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        files.insert(name.to_string(), sha256_hex(&bytes));
        std::fs::write(out.join(name), bytes)?;
        Ok(())
    };
    put("spec.json", serde_json::to_vec_pretty(spec)?)?;
    put("best.ckpt", outcome.best.to_bytes()?)?;
    put("epochs.csv", epochs_to_csv(&outcome.log).into_bytes())?;
    put("metrics.json", serde_json::to_vec_pretty(&report)?)?;
    let manifest = RunManifest {
        config_hash: hash,
        seed: spec.train.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        rng: RNG_ALGORITHM.to_string(),
        files,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(report)
}

pub const METRIC_COLUMNS: [&str; 5] = ["accuracy", "precision", "recall", "specificity", "f1"];

/// One row of a comparison table; `report` is `None` for absent runs.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub report: Option<RunReport>,
}

fn metric_values(r: &MetricsReport) -> [f64; 5] {
    [r.accuracy, r.precision, r.recall, r.specificity, r.f1]
}

/// Reads `metrics.json` from each run directory; missing or unreadable
/// reports become absent rows.
pub fn collect_runs(runs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if runs.is_empty() {
        return Err(Error::Config("compare needs at least one run directory".into()));
    }
    Ok(runs
        .iter()
        .map(|dir| {
            let run = dir
                .file_name()
                .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
            let report = std::fs::read(dir.join("metrics.json"))
                .map_err(Error::from)
                .and_then(|b| Ok(serde_json::from_slice::<RunReport>(&b)?));
            match report {
                Ok(r) => CompareRow { run, report: Some(r) },
                Err(e) => {
                    log::warn!("{}: no usable metrics.json ({e}); listed as absent", dir.display());
                    CompareRow { run, report: None }
                }
            }
        })
        .collect())
}

pub fn comparison_csv(rows: &[CompareRow]) -> String {
    let mut s = format!("run,variant,{}\n", METRIC_COLUMNS.join(","));
    for row in rows {
        match &row.report {
            Some(r) => {
                let vals: Vec<String> = metric_values(&r.test).iter().map(|v| format!("{v:.4}")).collect();
                let _ = writeln!(s, "{},{},{}", row.run, r.variant.name(), vals.join(","));
            }
            None => {
                let _ = writeln!(s, "{},absent{}", row.run, ",".repeat(METRIC_COLUMNS.len()));
            }
        }
    }
    s
}

/// Aligned text table; metrics are shown as percentages.
pub fn comparison_text(rows: &[CompareRow]) -> String {
    let mut header = vec!["run".to_string(), "variant".to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    let mut table = vec![header];
    for row in rows {
        let mut cells = vec![row.run.clone()];
        match &row.report {
            Some(r) => {
                cells.push(r.variant.name().to_string());
                cells.extend(metric_values(&r.test).iter().map(|v| format!("{:.2}", 100.0 * v)));
            }
            None => {
                cells.push("absent".to_string());
                cells.extend(METRIC_COLUMNS.iter().map(|_| "-".to_string()));
            }
        }
        table.push(cells);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for r in &table {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| if i < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
    }
    s
}

/// Writes `comparison.csv` and `comparison.txt` into `out` and returns the text table.
pub fn cmd_compare(runs: &[PathBuf], out: &Path) -> Result<String> {
    let rows = collect_runs(runs)?;
    let text = comparison_text(&rows);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("comparison.csv"), comparison_csv(&rows))?;
    std::fs::write(out.join("comparison.txt"), &text)?;
    Ok(text)
}

/// Heat statistics for one exported image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStat {
    pub id: u64,
    pub class: u8,
    pub heat_on_mask: f64,
    pub heat_off_mask: f64,
    pub ratio: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub images: Vec<AttentionStat>,
    pub skipped: Vec<u64>,
    pub mean_ratio: f64,
}

/// Mean heat over masked (any category) and unmasked pixels after
/// nearest-neighbour upsampling of the patch heatmap.
pub fn heat_on_off(heat: &crate::model::Heatmap, img: &LabeledImage) -> (f64, f64) {
    let side = img.mask.width;
    let (mut on, mut n_on, mut off, mut n_off) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..img.mask.height {
        for x in 0..side {
            let v = heat.at(y * heat.grid / img.mask.height, x * heat.grid / side);
            if img.mask.get(y, x) != 0 {
                on += v;
                n_on += 1;
            } else {
                off += v;
                n_off += 1;
            }
        }
    }
    (on / n_on.max(1) as f64, off / n_off.max(1) as f64)
}

/// Writes `NNNN_heat.pgm` per found id plus `attention.json`.
pub fn cmd_export_attention(
    checkpoint: &Path,
    data_dir: &Path,
    ids: &[u64],
    aug: Option<&AugConfig>,
    out: &Path,
) -> Result<AttentionReport> {
    let model = load_checkpoint(checkpoint)?;
    let side = model.config().image_side;
    let eval = aug.map_or_else(|| AugConfig::identity(side), |a| a.eval());
    let ds = load_dataset(data_dir)?;
    let all: BTreeMap<u64, LabeledImage> = ds
        .train
        .into_iter()
        .chain(ds.val)
        .chain(ds.test)
        .map(|s| (s.meta.id, s.image))
        .collect();
    std::fs::create_dir_all(out)?;
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for &id in ids {
        let Some(src) = all.get(&id) else {
            log::warn!("image id {id} not found in {}; skipped", data_dir.display());
            skipped.push(id);
            continue;
        };
        let img = augment(src, &eval, 0)?;
        let heat = attention_rollout(&model, &img.pixels)?;
        write_pgm(&out.join(format!("{id:04}_heat.pgm")), side, side, &heat.to_gray(side))?;
        let (on, off) = heat_on_off(&heat, &img);
        images.push(AttentionStat {
            id,
            class: img.class_label,
            heat_on_mask: on,
            heat_off_mask: off,
            ratio: if off > 0.0 { on / off } else { f64::INFINITY },
            degenerate: heat.degenerate,
        });
    }
    let finite: Vec<f64> = images.iter().map(|s| s.ratio).filter(|r| r.is_finite()).collect();
    let report = AttentionReport {
        mean_ratio: if finite.is_empty() { 0.0 } else { finite.iter().sum::<f64>() / finite.len() as f64 },
        images,
        skipped,
    };
    std::fs::write(out.join("attention.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}
