//! Stage runners behind the CLI: each one consumes paths plus the merged
//! config, writes its artifacts under an output directory together with a
//! `provenance.json`, and returns the primary artifact path.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{sha256_file, RunConfig};
use crate::contrastive::{pretrain, EpochStats};
use crate::dataset::{load_manifest, split_subjectwise, write_manifest, StudyManifest};
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneEpochStats, FinetuneMode};
use crate::inference::{evaluate_patch_probs, table_from_probs, ScoreTable};
use crate::metrics::{compute_report, roc_curve, RocPoint};
use crate::models::{
    load_checkpoint, save_checkpoint, CheckpointManifest, Classifier, LoadedCheckpoint,
};
use crate::synth::SynthConfig;
use crate::volume::save_volume;
use crate::{derived_rng, preprocess};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Writes `provenance.json`: command, config hash, seed, tool version, and a
/// SHA-256 per named input file.
pub fn write_provenance(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let mut input_hashes = serde_json::Map::new();
    for (name, path) in inputs {
        input_hashes.insert(
            name.to_string(),
            serde_json::json!({
                "path": path.display().to_string(),
                "sha256": sha256_file(path)?,
            }),
        );
    }
    let value = serde_json::json!({
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "inputs": input_hashes,
    });
    write_file(
        &dir.join("provenance.json"),
        &serde_json::to_string_pretty(&value).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Generates the synthetic dataset; the global seed overrides the generator
/// seed so one `--seed` flag controls the whole run.
pub fn run_generate(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let synth_cfg = SynthConfig {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    crate::synth::generate_dataset(&synth_cfg, out_dir)?;
    let manifest_path = out_dir.join("manifest.csv");
    write_provenance(out_dir, "generate", cfg, &[("manifest", &manifest_path)])?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

pub fn run_preprocess(cfg: &RunConfig, manifest_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    ensure_dir(out_dir)?;
    let manifest = load_manifest(manifest_path)?;
    let results: Vec<Result<(crate::dataset::VolumeRecord, serde_json::Value)>> = manifest
        .entries
        .par_iter()
        .map(|rec| {
            let volume = crate::volume::load_volume(&manifest.root_path, rec)?;
            let bbox = rec.annotation.as_ref().map(|a| a.bbox);
            let out = preprocess::preprocess_volume(
                &volume,
                bbox.as_ref(),
                cfg.preprocess.short_side,
                cfg.preprocess.pad,
            )?;
            let dir_name = rec
                .path
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| rec.volume_id());
            save_volume(out_dir.join(&dir_name), &out.volume)?;
            let mut new_rec = rec.clone();
            new_rec.path = PathBuf::from(&dir_name);
            if let (Some(annot), Some(bbox)) = (&mut new_rec.annotation, out.bbox) {
                annot.bbox = bbox;
            }
            let log = serde_json::json!({
                "volume_id": rec.volume_id(),
                "rect": out.rect,
                "degenerate": out.degenerate,
            });
            Ok((new_rec, log))
        })
        .collect();

    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut logs = Vec::with_capacity(manifest.entries.len());
    for r in results {
        let (rec, log) = r?;
        entries.push(rec);
        logs.push(log);
    }
    let out_manifest = StudyManifest {
        entries,
        root_path: out_dir.to_path_buf(),
    };
    let manifest_out = out_dir.join("manifest.csv");
    write_manifest(&out_manifest, &manifest_out)?;
    write_file(
        &out_dir.join("crop_rects.json"),
        &serde_json::to_string_pretty(&serde_json::Value::Array(logs)).unwrap(),
    )?;
    write_provenance(out_dir, "preprocess", cfg, &[("manifest", manifest_path)])?;
    Ok(manifest_out)
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

pub struct SplitPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

pub fn run_split(cfg: &RunConfig, manifest_path: &Path, out_dir: &Path) -> Result<SplitPaths> {
    ensure_dir(out_dir)?;
    let manifest = load_manifest(manifest_path)?;
    let spec = cfg.split_spec();
    let (train, val, test) = split_subjectwise(&manifest, &spec)?;
    let paths = SplitPaths {
        train: out_dir.join("train.csv"),
        val: out_dir.join("val.csv"),
        test: out_dir.join("test.csv"),
    };
    write_manifest(&train, &paths.train)?;
    write_manifest(&val, &paths.val)?;
    write_manifest(&test, &paths.test)?;
    let summary = serde_json::json!({
        "train": crate::dataset::summarize(&train),
        "val": crate::dataset::summarize(&val),
        "test": crate::dataset::summarize(&test),
    });
    write_file(
        &out_dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    write_provenance(out_dir, "split", cfg, &[("manifest", manifest_path)])?;
    Ok(paths)
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn write_pretrain_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out =
        String::from("epoch,mean_loss,lr,m,same_slice,inter_slice,inter_view,cross_volume\n");
    for h in history {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{},{},{},{}\n",
            h.epoch,
            h.mean_loss,
            h.lr,
            h.momentum,
            h.pairs.same_slice,
            h.pairs.inter_slice,
            h.pairs.inter_view,
            h.pairs.cross_volume
        ));
    }
    write_file(path, &out)
}

pub fn run_pretrain(cfg: &RunConfig, manifest_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let manifest = load_manifest(manifest_path)?;
    let output = pretrain(
        &manifest,
        &cfg.policy,
        &cfg.augment,
        &cfg.contrastive,
        &cfg.encoder,
        cfg.seed,
    )?;
    let manifest_json = CheckpointManifest {
        spec: cfg.encoder,
        phase: "pretrain".into(),
        epochs: cfg.contrastive.epochs,
        config_hash: cfg.config_hash(),
        metrics: serde_json::json!({
            "final_mean_loss": output.history.last().map(|h| h.mean_loss),
        }),
    };
    save_checkpoint(out_dir, &output.model.param_slots(), &manifest_json)?;
    write_pretrain_history(&out_dir.join("history.csv"), &output.history)?;
    write_provenance(out_dir, "pretrain", cfg, &[("manifest", manifest_path)])?;
    Ok(out_dir.to_path_buf())
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

fn write_finetune_history(path: &Path, history: &[FinetuneEpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_auc\n");
    for h in history {
        let val = match h.val_auc {
            Some(v) => format!("{v:.17e}"),
            None => "NaN".to_string(),
        };
        out.push_str(&format!("{},{:.17e},{}\n", h.epoch, h.train_loss, val));
    }
    write_file(path, &out)
}

pub fn run_finetune(
    cfg: &RunConfig,
    checkpoint_dir: Option<&Path>,
    train_path: &Path,
    val_path: &Path,
    mode_override: Option<FinetuneMode>,
    out_dir: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let train = load_manifest(train_path)?;
    let val = load_manifest(val_path)?;
    let loaded: Option<LoadedCheckpoint> = match checkpoint_dir {
        Some(dir) => Some(load_checkpoint(dir)?),
        None => None,
    };
    let mut ft_cfg = cfg.finetune;
    if let Some(mode) = mode_override {
        ft_cfg.mode = mode;
    }
    let spec = match &loaded {
        Some(ckpt) => ckpt.manifest.spec,
        None => cfg.encoder,
    };
    let output = finetune(
        loaded.as_ref(),
        &spec,
        &train,
        &val,
        &ft_cfg,
        cfg.label_window,
        cfg.seed,
    )?;
    let manifest_json = CheckpointManifest {
        spec,
        phase: "finetune".into(),
        epochs: ft_cfg.epochs,
        config_hash: cfg.config_hash(),
        metrics: serde_json::json!({
            "best_epoch": output.best_epoch,
            "best_val_auc": output.best_val_auc,
        }),
    };
    save_checkpoint(out_dir, &output.model.param_slots(), &manifest_json)?;
    write_finetune_history(&out_dir.join("history.csv"), &output.history)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("train", train_path), ("val", val_path)];
    let ckpt_weights;
    if let Some(dir) = checkpoint_dir {
        ckpt_weights = dir.join("weights.bin");
        inputs.push(("checkpoint", &ckpt_weights));
    }
    write_provenance(out_dir, "finetune", cfg, &inputs)?;
    Ok(out_dir.to_path_buf())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Rebuilds a classifier from a fine-tune checkpoint; every model parameter
/// must be present.
pub fn load_classifier(checkpoint_dir: &Path) -> Result<(Classifier<f32>, CheckpointManifest)> {
    let loaded = load_checkpoint(checkpoint_dir)?;
    let mut model = Classifier::<f32>::build(&loaded.manifest.spec, &mut derived_rng(0, &[99]))?;
    let report = crate::models::apply_weights(model.param_slots_mut(), &loaded.weights)?;
    if !report.missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint at {} is not a classifier checkpoint; missing: {:?}",
            checkpoint_dir.display(),
            report.missing
        )));
    }
    Ok((model, loaded.manifest))
}

pub fn run_evaluate(
    cfg: &RunConfig,
    checkpoint_dir: &Path,
    manifest_path: &Path,
    n_patches: usize,
    scores_out: &Path,
) -> Result<ScoreTable> {
    let manifest = load_manifest(manifest_path)?;
    let (model, _) = load_classifier(checkpoint_dir)?;
    let probs = evaluate_patch_probs(
        &model,
        &manifest,
        n_patches,
        cfg.finetune.patch_size,
        cfg.label_window,
        cfg.seed,
    )?;
    let table = table_from_probs(&manifest, &probs, n_patches)?;
    let parent = scores_out
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&parent)?;
    let volumes_out = parent.join("volumes.csv");
    table.write_csv(scores_out, &volumes_out)?;
    write_provenance(
        &parent,
        "evaluate",
        cfg,
        &[
            ("manifest", manifest_path),
            ("checkpoint", &checkpoint_dir.join("weights.bin")),
        ],
    )?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn write_roc_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        out.push_str(&format!(
            "{:.17e},{:.17e},{:.17e}\n",
            p.fpr, p.tpr, p.threshold
        ));
    }
    write_file(path, &out)
}

pub fn read_roc_csv(path: &Path) -> Result<Vec<RocPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidInput(format!("bad roc row: {line:?}")));
        }
        let parse = |s: &str| -> Result<f64> {
            if s == "inf" {
                Ok(f64::INFINITY)
            } else {
                s.parse()
                    .map_err(|e| Error::InvalidInput(format!("bad roc value {s:?}: {e}")))
            }
        };
        out.push(RocPoint {
            fpr: parse(parts[0])?,
            tpr: parse(parts[1])?,
            threshold: parse(parts[2])?,
        });
    }
    Ok(out)
}

/// Builds `report.json` plus slice/volume ROC exports. Thresholds are fitted
/// on the validation tables when given, otherwise on the reported tables
/// themselves (with a warning, since that leaks the test labels).
pub fn run_report(
    cfg: &RunConfig,
    scores_csv: &Path,
    volumes_csv: &Path,
    val_scores_csv: Option<&Path>,
    val_volumes_csv: Option<&Path>,
    out_dir: &Path,
) -> Result<serde_json::Value> {
    ensure_dir(out_dir)?;
    let table = ScoreTable::read_csv(scores_csv, volumes_csv)?;
    let (slice_scores, slice_labels) = table.slice_scores_labels();
    let (vol_scores, vol_labels) = table.volume_scores_labels();

    let slice_threshold = match (val_scores_csv, val_volumes_csv) {
        (Some(s), Some(v)) => {
            let val = ScoreTable::read_csv(s, v)?;
            let (vs, vl) = val.slice_scores_labels();
            crate::inference::select_threshold(&vs, &vl)?
        }
        _ => {
            log::warn!("no validation tables given; fitting thresholds on the reported scores");
            crate::inference::select_threshold(&slice_scores, &slice_labels)?
        }
    };
    let volume_threshold = match (val_scores_csv, val_volumes_csv) {
        (Some(s), Some(v)) => {
            let val = ScoreTable::read_csv(s, v)?;
            let (vs, vl) = val.volume_scores_labels();
            crate::inference::select_threshold(&vs, &vl)?
        }
        _ => crate::inference::select_threshold(&vol_scores, &vol_labels)?,
    };

    let slice_report = compute_report(&slice_scores, &slice_labels, slice_threshold)?;
    let volume_report = compute_report(&vol_scores, &vol_labels, volume_threshold)?;

    let slice_roc = roc_curve(&slice_scores, &slice_labels)?;
    let volume_roc = roc_curve(&vol_scores, &vol_labels)?;
    write_roc_csv(&out_dir.join("roc_slice.csv"), &slice_roc)?;
    write_roc_csv(&out_dir.join("roc_volume.csv"), &volume_roc)?;

    let report = serde_json::json!({
        "slice": slice_report.to_json(),
        "volume": volume_report.to_json(),
    });
    write_file(
        &out_dir.join("report.json"),
        &serde_json::to_string_pretty(&report).unwrap(),
    )?;
    let mut inputs: Vec<(&str, &Path)> = vec![("scores", scores_csv), ("volumes", volumes_csv)];
    if let (Some(s), Some(v)) = (val_scores_csv, val_volumes_csv) {
        inputs.push(("val_scores", s));
        inputs.push(("val_volumes", v));
    }
    write_provenance(out_dir, "report", cfg, &inputs)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep-patches
// ---------------------------------------------------------------------------

/// Evaluates once with the largest patch count and re-aggregates the shared
/// per-patch probabilities for every requested N.
pub fn run_sweep(
    cfg: &RunConfig,
    checkpoint_dir: &Path,
    manifest_path: &Path,
    patch_counts: &[usize],
    out_dir: &Path,
) -> Result<Vec<(usize, f64, f64)>> {
    if patch_counts.is_empty() {
        return Err(Error::InvalidInput("no patch counts given".into()));
    }
    ensure_dir(out_dir)?;
    let manifest = load_manifest(manifest_path)?;
    let (model, _) = load_classifier(checkpoint_dir)?;
    let n_max = *patch_counts.iter().max().unwrap();
    let probs = evaluate_patch_probs(
        &model,
        &manifest,
        n_max,
        cfg.finetune.patch_size,
        cfg.label_window,
        cfg.seed,
    )?;
    let mut rows = Vec::new();
    let mut csv_text = String::from("n_patches,slice_auc,volume_auc\n");
    for &n in patch_counts {
        let table = table_from_probs(&manifest, &probs, n)?;
        let (ss, sl) = table.slice_scores_labels();
        let (vs, vl) = table.volume_scores_labels();
        let slice_auc = crate::metrics::auc(&ss, &sl)?;
        let volume_auc = crate::metrics::auc(&vs, &vl)?;
        csv_text.push_str(&format!("{n},{slice_auc:.17e},{volume_auc:.17e}\n"));
        rows.push((n, slice_auc, volume_auc));
    }
    write_file(&out_dir.join("sweep.csv"), &csv_text)?;
    write_provenance(
        out_dir,
        "sweep-patches",
        cfg,
        &[
            ("manifest", manifest_path),
            ("checkpoint", &checkpoint_dir.join("weights.bin")),
        ],
    )?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// plot-roc
// ---------------------------------------------------------------------------

pub fn run_plot_roc(in_csv: &Path, out_svg: &Path, title: &str) -> Result<()> {
    let points = read_roc_csv(in_csv)?;
    if points.is_empty() {
        return Err(Error::InvalidInput("empty roc csv".into()));
    }
    let auc = crate::metrics::roc_auc_trapezoid(&points);
    let svg = crate::metrics::render_roc_svg(&points, auc, title);
    let mut file = std::fs::File::create(out_svg).map_err(|e| Error::io(out_svg, e))?;
    file.write_all(svg.as_bytes())
        .map_err(|e| Error::io(out_svg, e))?;
    Ok(())
}
