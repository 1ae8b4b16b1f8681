//! End-to-end pipeline commands behind the CLI: dense-label generation,
//! sample export, training, prediction and evaluation. Each command is a
//! plain function of the [`PipelineConfig`] so tests drive them directly.
//!
//! All stochastic stages draw per-scan seeds from the root seed, every
//! artifact records the seeds that produced it, and nothing written to disk
//! contains timestamps, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_centroids, PredictionResult};
use crate::centroids::{load_centroids, load_centroids_in, CentroidSet};
use crate::config::{derive_seed, ModelConfig, PipelineConfig};
use crate::dense::{binarize, build_segment_chain, rasterize_dense_labels, DenseLabelMap};
use crate::deform::elastic_deform;
use crate::error::{Error, Result};
use crate::evaluate::{build_report, score_scan, RegionReport, ScanScore};
use crate::inference::{
    detect_volume, fuse, identify_volume, AffineStubIdentifier, ThresholdStubDetector,
};
use crate::nets::{
    train_detection, train_identification, Checkpoint, DetectionNet, IdentificationNet,
    TrainEpoch,
};
use crate::nifti;
use crate::sampler::{
    sample_detection_patches, sample_identification_patches, DetectionPatch,
    IdentificationPatch,
};
use crate::volume::{resample_isotropic, Interpolation, Volume};

/// Aggregated outcome of a per-scan command, for exit-code mapping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandSummary {
    pub processed: usize,
    pub failed: usize,
    pub messages: Vec<String>,
}

impl CommandSummary {
    pub fn note_failure(&mut self, msg: String) {
        log::error!("{msg}");
        self.messages.push(msg);
        self.failed += 1;
    }
}

/// Compute-device selection: CPU is the only backend; reject anything else
/// loudly rather than silently ignoring the request.
pub fn check_device() -> Result<()> {
    match std::env::var("SPINEMAP_DEVICE") {
        Ok(v) if v.eq_ignore_ascii_case("cpu") || v.is_empty() => Ok(()),
        Ok(v) => Err(Error::InvalidConfig(format!(
            "SPINEMAP_DEVICE={v} is not available; this build is CPU-only"
        ))),
        Err(_) => Ok(()),
    }
}

/// One scan of a dataset directory: the volume plus its sibling annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanEntry {
    pub stem: String,
    pub volume_path: PathBuf,
    pub annotation_path: Option<PathBuf>,
}

/// Discover scans (`*.nii` / `*.nii.gz`) in a directory, sorted by stem.
pub fn list_scans(dir: &Path) -> Result<Vec<ScanEntry>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        let stem = if let Some(s) = name.strip_suffix(".nii.gz") {
            s.to_string()
        } else if let Some(s) = name.strip_suffix(".nii") {
            s.to_string()
        } else {
            continue;
        };
        let annotation = dir.join(format!("{stem}.csv"));
        out.push(ScanEntry {
            stem,
            volume_path: path,
            annotation_path: annotation.exists().then_some(annotation),
        });
    }
    out.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(out)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Other(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Other(format!(
        "bad JSON in {}: {e}",
        path.display()
    )))
}

fn labels_dir(cfg: &PipelineConfig, split: &str) -> PathBuf {
    cfg.data.output_dir.join("labels").join(split)
}

fn checkpoint_path(cfg: &PipelineConfig, which: ModelKind) -> PathBuf {
    cfg.data
        .output_dir
        .join("checkpoints")
        .join(format!("{}.json", which.name()))
}

fn predictions_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.data.output_dir.join("predictions")
}

/// Load a scan and bring it onto the 1mm grid.
pub fn load_resampled(path: &Path) -> Result<Volume> {
    let raw = nifti::load_volume(path)?;
    Ok(resample_isotropic(&raw, Interpolation::Trilinear))
}

/// Sidecar metadata written next to each dense label volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSidecar {
    pub scan: String,
    pub centroids: usize,
    pub warnings: Vec<String>,
    pub original_spacing: [f64; 3],
    pub resampled_extent: [usize; 3],
}

/// Manifest for one make-labels run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelManifest {
    pub version: String,
    pub radii_mm: BTreeMap<String, f64>,
    pub annotation_units: crate::centroids::AnnotationUnits,
    pub scans: Vec<LabelManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelManifestEntry {
    pub split: String,
    pub stem: String,
    pub status: String,
}

/// Generate dense label volumes for every annotated scan in both splits.
pub fn cmd_make_labels(cfg: &PipelineConfig) -> Result<CommandSummary> {
    cfg.validate()?;
    let radii = cfg.radii_table()?;
    let mut summary = CommandSummary::default();
    let mut manifest = LabelManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        radii_mm: crate::vertebra::VertebraLabel::all()
            .map(|l| (l.name().to_string(), radii.radius_mm(l)))
            .collect(),
        annotation_units: cfg.data.annotation_units,
        scans: Vec::new(),
    };

    for (split, dir) in [("train", &cfg.data.train_dir), ("test", &cfg.data.test_dir)] {
        let scans = match list_scans(dir) {
            Ok(s) => s,
            Err(e) => {
                summary.note_failure(format!("cannot list {split} dir: {e}"));
                continue;
            }
        };
        let out_dir = labels_dir(cfg, split);
        ensure_dir(&out_dir)?;
        for scan in scans {
            match make_labels_for_scan(cfg, &radii, &scan, &out_dir) {
                Ok(sidecar) => {
                    summary.processed += 1;
                    for w in &sidecar.warnings {
                        log::warn!("{}/{}: {w}", split, scan.stem);
                    }
                    manifest.scans.push(LabelManifestEntry {
                        split: split.to_string(),
                        stem: scan.stem.clone(),
                        status: "ok".to_string(),
                    });
                }
                Err(e) => {
                    summary.note_failure(format!("{split}/{}: {e}", scan.stem));
                    manifest.scans.push(LabelManifestEntry {
                        split: split.to_string(),
                        stem: scan.stem.clone(),
                        status: format!("skipped: {e}"),
                    });
                }
            }
        }
    }

    ensure_dir(&cfg.data.output_dir.join("labels"))?;
    write_json(&cfg.data.output_dir.join("labels/manifest.json"), &manifest)?;
    Ok(summary)
}

fn make_labels_for_scan(
    cfg: &PipelineConfig,
    radii: &crate::vertebra::RadiiTable,
    scan: &ScanEntry,
    out_dir: &Path,
) -> Result<LabelSidecar> {
    let annotation = scan
        .annotation_path
        .as_ref()
        .ok_or_else(|| Error::BadAnnotation {
            path: scan.volume_path.clone(),
            reason: "missing annotation file".into(),
        })?;
    let raw = nifti::load_volume(&scan.volume_path)?;
    let volume = resample_isotropic(&raw, Interpolation::Trilinear);
    let (centroids, report) =
        load_centroids(annotation, &volume, cfg.data.annotation_units, raw.spacing)?;
    if centroids.is_empty() {
        return Err(Error::EmptyCentroidSet);
    }
    let chain = build_segment_chain(&centroids, radii)?;
    let dense = rasterize_dense_labels(&chain, radii, &volume)?;
    nifti::save_labels(
        &out_dir.join(format!("{}.nii.gz", scan.stem)),
        &dense.labels,
        dense.spacing,
        dense.origin,
    )?;
    let sidecar = LabelSidecar {
        scan: scan.stem.clone(),
        centroids: centroids.len(),
        warnings: report.warnings(),
        original_spacing: raw.spacing,
        resampled_extent: volume.extent(),
    };
    write_json(&out_dir.join(format!("{}.json", scan.stem)), &sidecar)?;
    Ok(sidecar)
}

fn dense_labels_for(cfg: &PipelineConfig, split: &str, stem: &str) -> Result<DenseLabelMap> {
    let path = labels_dir(cfg, split).join(format!("{stem}.nii.gz"));
    if !path.exists() {
        return Err(Error::Other(format!(
            "dense labels not found at {} (run make-labels first)",
            path.display()
        )));
    }
    let (labels, spacing, origin) = nifti::load_labels(&path)?;
    Ok(DenseLabelMap {
        labels,
        spacing,
        origin,
    })
}

/// Per-scan patch generation shared by `cmd_sample` and `cmd_train`.
fn detection_patches_for_scan(
    cfg: &PipelineConfig,
    scan: &ScanEntry,
) -> Result<Vec<DetectionPatch>> {
    let volume = load_resampled(&scan.volume_path)?;
    let dense = dense_labels_for(cfg, "train", &scan.stem)?;
    let binary = binarize(&dense);
    let seed = derive_seed(cfg.seed, &["sample-detection", &scan.stem]);
    sample_detection_patches(
        &volume,
        &binary,
        cfg.sampling.detection_patches_per_scan,
        seed,
        &cfg.sampling.params,
    )
}

fn identification_patches_for_scan(
    cfg: &PipelineConfig,
    scan: &ScanEntry,
) -> Result<Vec<IdentificationPatch>> {
    let volume = load_resampled(&scan.volume_path)?;
    let dense = dense_labels_for(cfg, "train", &scan.stem)?;
    let seed = derive_seed(cfg.seed, &["sample-identification", &scan.stem]);
    let raw = sample_identification_patches(
        &volume,
        &dense,
        cfg.sampling.identification_patches_per_scan,
        seed,
        &cfg.sampling.params,
    )?;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let dseed = derive_seed(cfg.seed, &["deform", &scan.stem, &i.to_string()]);
            elastic_deform(&p, cfg.sampling.deform_sigma, dseed, cfg.sampling.deform_grid)
        })
        .collect())
}

/// Manifest describing one exported sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifest {
    pub version: String,
    pub root_seed: u64,
    pub scans: Vec<SampleManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifestEntry {
    pub stem: String,
    pub detection_seed: u64,
    pub identification_seed: u64,
    pub detection_offsets: Vec<[usize; 3]>,
    pub identification_offsets: Vec<[usize; 3]>,
    pub deform_sigma: f64,
}

/// Export training samples as paired NIfTI volumes plus a manifest.
pub fn cmd_sample(cfg: &PipelineConfig) -> Result<CommandSummary> {
    cfg.validate()?;
    let mut summary = CommandSummary::default();
    let scans = list_scans(&cfg.data.train_dir)?;
    let out_root = cfg.data.output_dir.join("samples");
    let mut manifest = SampleManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        root_seed: cfg.seed,
        scans: Vec::new(),
    };

    for scan in &scans {
        let result = (|| -> Result<SampleManifestEntry> {
            let det = detection_patches_for_scan(cfg, scan)?;
            let ident = identification_patches_for_scan(cfg, scan)?;
            let dir = out_root.join(&scan.stem);
            ensure_dir(&dir)?;
            for (i, p) in det.iter().enumerate() {
                nifti::save_volume(
                    &dir.join(format!("detection_{i:03}_image.nii.gz")),
                    &Volume::new(p.image.clone(), [1.0; 3], [0.0; 3])?,
                    nifti::VoxelType::F32,
                )?;
                nifti::save_labels(
                    &dir.join(format!("detection_{i:03}_label.nii.gz")),
                    &p.label,
                    [1.0; 3],
                    [0.0; 3],
                )?;
            }
            for (i, p) in ident.iter().enumerate() {
                nifti::save_volume(
                    &dir.join(format!("identification_{i:03}_image.nii.gz")),
                    &Volume::new(p.image.clone(), [1.0; 3], [0.0; 3])?,
                    nifti::VoxelType::F32,
                )?;
                let label3 = p
                    .label
                    .clone()
                    .insert_axis(ndarray::Axis(0));
                nifti::save_labels(
                    &dir.join(format!("identification_{i:03}_label.nii.gz")),
                    &label3,
                    [1.0; 3],
                    [0.0; 3],
                )?;
            }
            Ok(SampleManifestEntry {
                stem: scan.stem.clone(),
                detection_seed: derive_seed(cfg.seed, &["sample-detection", &scan.stem]),
                identification_seed: derive_seed(cfg.seed, &["sample-identification", &scan.stem]),
                detection_offsets: det.iter().map(|p| p.offset).collect(),
                identification_offsets: ident.iter().map(|p| p.offset).collect(),
                deform_sigma: cfg.sampling.deform_sigma,
            })
        })();
        match result {
            Ok(entry) => {
                summary.processed += 1;
                manifest.scans.push(entry);
            }
            Err(e) => summary.note_failure(format!("{}: {e}", scan.stem)),
        }
    }

    ensure_dir(&out_root)?;
    write_json(&out_root.join("manifest.json"), &manifest)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Detection,
    Identification,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Detection => "detection",
            ModelKind::Identification => "identification",
        }
    }
}

/// Split scans into train/validation by the model's `val_fraction`, seeded.
fn split_scans<'a>(
    scans: &'a [ScanEntry],
    model: &ModelConfig,
    root_seed: u64,
    which: ModelKind,
) -> (Vec<&'a ScanEntry>, Vec<&'a ScanEntry>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..scans.len()).collect();
    let mut rng = crate::nn::fresh_seeded(derive_seed(root_seed, &["split", which.name()]), 0);
    order.shuffle(&mut rng);
    let val_count = ((scans.len() as f64) * model.val_fraction).floor() as usize;
    let val_count = if scans.len() > 1 {
        val_count.min(scans.len() - 1)
    } else {
        0
    };
    let val: Vec<&ScanEntry> = order[..val_count].iter().map(|&i| &scans[i]).collect();
    let train: Vec<&ScanEntry> = order[val_count..].iter().map(|&i| &scans[i]).collect();
    (train, val)
}

/// Train one model; writes a checkpoint and a training log, returns the
/// checkpoint path. With `resume`, continues from the stored epoch count.
pub fn cmd_train(cfg: &PipelineConfig, which: ModelKind, resume: bool) -> Result<PathBuf> {
    cfg.validate()?;
    check_device()?;
    let scans = list_scans(&cfg.data.train_dir)?;
    if scans.is_empty() {
        return Err(Error::Other(format!(
            "no scans found in {}",
            cfg.data.train_dir.display()
        )));
    }
    let ck_path = checkpoint_path(cfg, which);
    ensure_dir(ck_path.parent().unwrap())?;
    let log_dir = cfg.data.output_dir.join("training");
    ensure_dir(&log_dir)?;
    let log_path = log_dir.join(format!("{}_log.json", which.name()));

    let mut previous_log: Vec<TrainEpoch> = Vec::new();
    let mut start_epoch = 0usize;
    let resume_from = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        start_epoch = ck.epochs_completed;
        if log_path.exists() {
            previous_log = read_json(&log_path)?;
        }
        Some(ck)
    } else {
        None
    };

    match which {
        ModelKind::Detection => {
            let model_cfg = &cfg.detection;
            let (train_scans, val_scans) = split_scans(&scans, model_cfg, cfg.seed, which);
            let mut patches = Vec::new();
            for scan in &train_scans {
                patches.extend(detection_patches_for_scan(cfg, scan)?);
            }
            let mut val_patches = Vec::new();
            for scan in &val_scans {
                val_patches.extend(detection_patches_for_scan(cfg, scan)?);
            }
            let mut train_cfg = model_cfg.train.clone();
            train_cfg.seed = derive_seed(cfg.seed, &["train", which.name()]);
            let mut net = match &resume_from {
                Some(ck) => ck.detection_net()?,
                None => DetectionNet::new(
                    &model_cfg.topology,
                    train_cfg.bn_momentum,
                    train_cfg.seed,
                )?,
            };
            let log = train_detection(
                &mut net,
                &patches,
                (!val_patches.is_empty()).then_some(&val_patches[..]),
                &train_cfg,
                start_epoch,
            )?;
            previous_log.extend(log);
            write_json(&log_path, &previous_log)?;
            let ck = Checkpoint::for_detection(&mut net, &train_cfg, &model_cfg.topology, train_cfg.epochs);
            ck.save(&ck_path)?;
        }
        ModelKind::Identification => {
            let model_cfg = &cfg.identification;
            let (train_scans, val_scans) = split_scans(&scans, model_cfg, cfg.seed, which);
            let mut patches = Vec::new();
            for scan in &train_scans {
                patches.extend(identification_patches_for_scan(cfg, scan)?);
            }
            let mut val_patches = Vec::new();
            for scan in &val_scans {
                val_patches.extend(identification_patches_for_scan(cfg, scan)?);
            }
            let mut train_cfg = model_cfg.train.clone();
            train_cfg.seed = derive_seed(cfg.seed, &["train", which.name()]);
            let mut net = match &resume_from {
                Some(ck) => ck.identification_net()?,
                None => IdentificationNet::new(
                    &model_cfg.topology,
                    train_cfg.bn_momentum,
                    train_cfg.seed,
                )?,
            };
            let log = train_identification(
                &mut net,
                &patches,
                (!val_patches.is_empty()).then_some(&val_patches[..]),
                &train_cfg,
                start_epoch,
            )?;
            previous_log.extend(log);
            write_json(&log_path, &previous_log)?;
            let ck = Checkpoint::for_identification(
                &mut net,
                &train_cfg,
                &model_cfg.topology,
                train_cfg.epochs,
            );
            ck.save(&ck_path)?;
        }
    }
    Ok(ck_path)
}

/// Serialized prediction for one scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scan: String,
    pub resampled_extent: [usize; 3],
    pub original_spacing: [f64; 3],
    pub stub_mode: bool,
    pub vertebrae: Vec<VertebraRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VertebraRecord {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub votes: usize,
    pub threshold: f64,
    pub accepted: bool,
}

impl PredictionRecord {
    pub fn from_result(
        scan: &str,
        result: &PredictionResult,
        resampled_extent: [usize; 3],
        original_spacing: [f64; 3],
        stub_mode: bool,
    ) -> Self {
        PredictionRecord {
            scan: scan.to_string(),
            resampled_extent,
            original_spacing,
            stub_mode,
            vertebrae: result
                .summary
                .votes
                .iter()
                .map(|(label, vote)| VertebraRecord {
                    name: label.name().to_string(),
                    x: vote.median_mm[0],
                    y: vote.median_mm[1],
                    z: vote.median_mm[2],
                    votes: vote.count,
                    threshold: vote.threshold,
                    accepted: vote.accepted,
                })
                .collect(),
        }
    }

    /// Accepted centroids as a set, for scoring.
    pub fn accepted_centroids(&self) -> Result<CentroidSet> {
        let mut set = CentroidSet::default();
        for v in &self.vertebrae {
            if v.accepted {
                set.entries.insert(
                    crate::vertebra::VertebraLabel::from_name(&v.name)?,
                    [v.x, v.y, v.z],
                );
            }
        }
        Ok(set)
    }
}

enum Models {
    Real(Box<DetectionNet>, Box<IdentificationNet>),
    Stub(ThresholdStubDetector, AffineStubIdentifier),
}

fn load_models(cfg: &PipelineConfig, stub: bool) -> Result<Models> {
    if stub {
        return Ok(Models::Stub(
            ThresholdStubDetector {
                threshold: cfg.stub.detection_threshold,
            },
            AffineStubIdentifier {
                scale: cfg.stub.identification_scale,
                offset: cfg.stub.identification_offset,
            },
        ));
    }
    let det = Checkpoint::load(&checkpoint_path(cfg, ModelKind::Detection))?.detection_net()?;
    let ident =
        Checkpoint::load(&checkpoint_path(cfg, ModelKind::Identification))?.identification_net()?;

    // The tiling window must fit the detection net's pooling depth, and the
    // identification net must accept extents padded to multiples of 16.
    let det_div = det.unet.config.extent_divisor();
    for (extent, divisor, axis) in [
        (cfg.tiling.patch[0], det_div.0, "x"),
        (cfg.tiling.patch[1], det_div.1, "y"),
        (cfg.tiling.patch[2], det_div.2, "z"),
    ] {
        if extent % divisor != 0 {
            return Err(Error::InvalidConfig(format!(
                "tiling patch {axis} extent {extent} is not a multiple of the \
                 detection network's pooling factor {divisor}"
            )));
        }
    }
    let id_div = ident.unet.config.extent_divisor();
    for divisor in [id_div.1, id_div.2] {
        if divisor > 16 || 16 % divisor != 0 {
            return Err(Error::InvalidConfig(format!(
                "identification network pooling factor {divisor} does not divide \
                 the slice padding granule of 16"
            )));
        }
    }
    Ok(Models::Real(Box::new(det), Box::new(ident)))
}

/// Run the full two-stage inference on one scan and write the result record
/// (optionally plus the intermediate maps) under the output directory.
pub fn cmd_predict_scan(
    cfg: &PipelineConfig,
    scan_path: &Path,
    stub: bool,
    save_maps: bool,
) -> Result<(PredictionRecord, PathBuf)> {
    cfg.validate()?;
    check_device()?;
    let models = load_models(cfg, stub)?;
    let started = std::time::Instant::now();

    let raw = nifti::load_volume(scan_path)?;
    let volume = resample_isotropic(&raw, Interpolation::Trilinear);
    let radii = cfg.radii_table()?;

    let (detection, identification) = match &models {
        Models::Real(det, ident) => (
            detect_volume(det.as_ref(), &volume, &cfg.tiling)?,
            identify_volume(ident.as_ref(), &volume)?,
        ),
        Models::Stub(det, ident) => (
            detect_volume(det, &volume, &cfg.tiling)?,
            identify_volume(ident, &volume)?,
        ),
    };
    let fused = fuse(&detection, &identification)?;
    let result = aggregate_centroids(fused, &radii);

    let stem = scan_stem(scan_path);
    let out_dir = predictions_dir(cfg);
    ensure_dir(&out_dir)?;
    let record = PredictionRecord::from_result(
        &stem,
        &result,
        volume.extent(),
        raw.spacing,
        stub,
    );
    let record_path = out_dir.join(format!("{stem}.json"));
    write_json(&record_path, &record)?;

    if save_maps {
        nifti::save_labels(
            &out_dir.join(format!("{stem}_detection.nii.gz")),
            &detection.labels,
            detection.spacing,
            detection.origin,
        )?;
        nifti::save_volume(
            &out_dir.join(format!("{stem}_identification.nii.gz")),
            &identification,
            nifti::VoxelType::F32,
        )?;
        nifti::save_labels(
            &out_dir.join(format!("{stem}_fused.nii.gz")),
            &result.fused.labels,
            result.fused.spacing,
            result.fused.origin,
        )?;
    }

    log::info!(
        "predicted {stem} in {:.1}s ({} accepted vertebrae)",
        started.elapsed().as_secs_f64(),
        record.vertebrae.iter().filter(|v| v.accepted).count()
    );
    Ok((record, record_path))
}

fn scan_stem(path: &Path) -> String {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scan");
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(name)
        .to_string()
}

/// Predict every scan in the test directory.
pub fn cmd_predict_all(cfg: &PipelineConfig, stub: bool, save_maps: bool) -> Result<CommandSummary> {
    let scans = list_scans(&cfg.data.test_dir)?;
    let mut summary = CommandSummary::default();
    for scan in scans {
        match cmd_predict_scan(cfg, &scan.volume_path, stub, save_maps) {
            Ok(_) => summary.processed += 1,
            Err(e) => summary.note_failure(format!("{}: {e}", scan.stem)),
        }
    }
    Ok(summary)
}

/// Score every test scan with both a prediction record and an annotation,
/// write the report (JSON + table) and the per-vertebra plot.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<(RegionReport, PathBuf)> {
    cfg.validate()?;
    let scans = list_scans(&cfg.data.test_dir)?;
    let mut scores: Vec<ScanScore> = Vec::new();
    for scan in &scans {
        let record_path = predictions_dir(cfg).join(format!("{}.json", scan.stem));
        let annotation = match &scan.annotation_path {
            Some(a) => a,
            None => {
                log::warn!("{}: no annotation, skipped in evaluation", scan.stem);
                continue;
            }
        };
        if !record_path.exists() {
            log::warn!("{}: no prediction record, skipped in evaluation", scan.stem);
            continue;
        }
        let record: PredictionRecord = read_json(&record_path)?;
        let pred = record.accepted_centroids()?;
        let (truth, _) = load_centroids_in(
            annotation,
            record.resampled_extent,
            [1.0; 3],
            cfg.data.annotation_units,
            record.original_spacing,
        )?;
        scores.push(score_scan(&pred, &truth));
    }
    if scores.is_empty() {
        return Err(Error::Other(
            "no scans with both predictions and ground truth".into(),
        ));
    }
    let report = build_report(&scores)?;
    let report_dir = cfg.data.output_dir.join("report");
    ensure_dir(&report_dir)?;
    write_json(&report_dir.join("report.json"), &report)?;
    std::fs::write(report_dir.join("report.txt"), report.to_table())
        .map_err(|e| Error::io(&report_dir, e))?;
    let plot_path = report_dir.join("per_vertebra.png");
    match crate::plot::plot_per_vertebra(&report, &plot_path) {
        Ok(()) => {}
        Err(e) => log::warn!("plot skipped: {e}"),
    }
    Ok((report, report_dir))
}

/// Re-render the plot from a stored report.
pub fn cmd_plot(cfg: &PipelineConfig) -> Result<PathBuf> {
    let report_dir = cfg.data.output_dir.join("report");
    let report: RegionReport = read_json(&report_dir.join("report.json"))?;
    let plot_path = report_dir.join("per_vertebra.png");
    crate::plot::plot_per_vertebra(&report, &plot_path)?;
    Ok(plot_path)
}
