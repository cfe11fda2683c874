//! End-to-end orchestration: run configuration, expression and head-pose
//! transfer, AU-error evaluation, animation export and the stepping
//! benchmark.
//!
//! A transferred frame is independent of every other frame as far as the
//! face goes: the network maps its normalized AUs to activations and the
//! face settles from rest. The neck is the exception. It is driven toward
//! the frame's head pose for a fixed budget starting from wherever the
//! previous frame left it, as a video would.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aubridge::{head_pose_targets, stream_table, AuFrame, AuVector, NormalizationTable, AU_NAMES, NUM_AUS};
use crate::datagen::{
    csv_header, expression_sets, jaw_of, oracle_document, ActivationVector, AuOracle, ExpressionDocument,
    ExpressionWeightSet, GenerateOptions,
};
use crate::error::{Error, Result};
use crate::multibody::{GeneralizedState, SpineModel};
use crate::muscle::{bundled_neck_muscles, muscles_from_toml, total_forces, HillMuscle, KinematicPose};
use crate::neurocontrol::{ControllerConfig, HeadPoseTarget, NeckSimulation, ReflexGains, PHYSICS_DT};
use crate::nn::{Mlp, TrainConfig, NUM_OUTPUTS};
use crate::skin::{write_obj, FaceModel, FaceSimulation, JawState, SettleOptions, NUM_FACE_MUSCLES};

/// Simulated time the neck gets to reach each frame's head pose, s.
pub const NECK_BUDGET: f64 = 2.0;

// ------------------------------------------------------------------- config

/// Everything a run depends on besides its input files. Every field has a
/// default, so an empty document is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the activation sampler.
    pub seed: u64,
    pub model: ModelFiles,
    pub datagen: DatagenSection,
    pub train: TrainSection,
    pub settle: SettleSection,
    pub controller: ControllerSection,
    pub transfer: TransferSection,
    pub simulate: SimulateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            model: ModelFiles::default(),
            datagen: DatagenSection::default(),
            train: TrainSection::default(),
            settle: SettleSection::default(),
            controller: ControllerSection::default(),
            transfer: TransferSection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

/// Optional replacements for the bundled model files. Relative paths are
/// taken from the configuration file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFiles {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spine: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neck_muscles: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_obj: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face_map: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expressions: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub au_oracle: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub n_per_expression: usize,
}

impl Default for DatagenSection {
    fn default() -> Self {
        DatagenSection { n_per_expression: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds both the weight initialization and the batch shuffling.
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            epochs: c.epochs,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
            seed: c.seed,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SettleSection {
    pub dt: f64,
    pub max_time: f64,
    pub tolerance: f64,
    pub min_time: f64,
}

impl Default for SettleSection {
    fn default() -> Self {
        let o = SettleOptions::default();
        SettleSection {
            dt: o.dt,
            max_time: o.max_time,
            tolerance: o.tolerance,
            min_time: o.min_time,
        }
    }
}

impl SettleSection {
    pub fn to_options(&self) -> SettleOptions {
        SettleOptions {
            dt: self.dt,
            max_time: self.max_time,
            tolerance: self.tolerance,
            min_time: self.min_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub k_p: f64,
    pub k_v: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let g = ReflexGains::default();
        ControllerSection { k_p: g.k_p, k_v: g.k_v }
    }
}

impl ControllerSection {
    pub fn to_config(&self) -> ControllerConfig {
        ControllerConfig {
            gains: ReflexGains {
                k_p: self.k_p,
                k_v: self.k_v,
            },
            ..ControllerConfig::default()
        }
    }
}

/// Which normalization constants a transfer applies to its input AUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Min-max over the input sequence itself.
    Sequence,
    /// The table stored with the model at training time.
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub normalization: Normalization,
    /// Simulated neck time per frame, s.
    pub neck_time: f64,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            normalization: Normalization::Sequence,
            neck_time: NECK_BUDGET,
        }
    }
}

/// A scripted instant. In closed loop the head pose becomes the controller
/// target; in open loop the activations (by muscle name or by stem for
/// both sides) drive the neck muscles directly. Both hold until the next
/// keyframe.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Keyframe {
    pub time: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub activations: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub duration: f64,
    pub closed_loop: bool,
    /// Coupled neck and face steps timed by the benchmark.
    pub benchmark_steps: usize,
    pub keyframe: Vec<Keyframe>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            duration: 5.0,
            closed_loop: true,
            benchmark_steps: 8000,
            keyframe: vec![
                Keyframe::default(),
                Keyframe {
                    time: 0.5,
                    pitch: 15f64.to_radians(),
                    ..Keyframe::default()
                },
                Keyframe {
                    time: 2.5,
                    yaw: 20f64.to_radians(),
                    ..Keyframe::default()
                },
            ],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `path`, resolving relative model paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let m = &mut c.model;
        for p in [
            &mut m.spine,
            &mut m.neck_muscles,
            &mut m.face_obj,
            &mut m.face_map,
            &mut m.expressions,
            &mut m.au_oracle,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("run config: {what}")));
        if self.datagen.n_per_expression == 0 {
            return bad("datagen.n_per_expression must be positive");
        }
        self.train.to_train_config().validate()?;
        let s = &self.settle;
        if !(s.dt > 0.0 && s.max_time > 0.0 && s.tolerance >= 0.0 && s.min_time >= 0.0 && s.min_time <= s.max_time) {
            return bad("settle needs dt > 0, max_time > 0, tolerance ≥ 0 and 0 ≤ min_time ≤ max_time");
        }
        if !(self.controller.k_p >= 0.0 && self.controller.k_v >= 0.0) {
            return bad("controller gains must be non-negative");
        }
        if !(self.transfer.neck_time >= 0.0 && self.transfer.neck_time.is_finite()) {
            return bad("transfer.neck_time must be a non-negative time");
        }
        let sim = &self.simulate;
        if !(sim.duration > 0.0 && sim.duration.is_finite()) {
            return bad("simulate.duration must be positive");
        }
        if sim.benchmark_steps == 0 {
            return bad("simulate.benchmark_steps must be positive");
        }
        if sim.keyframe.windows(2).any(|w| !(w[1].time >= w[0].time)) {
            return bad("simulate keyframes must be in time order");
        }
        for k in &sim.keyframe {
            if k.activations.values().any(|a| !(0.0..=1.0).contains(a)) {
                return bad("keyframe activations must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            n_per_expression: self.datagen.n_per_expression,
            seed: self.seed,
            settle: self.settle.to_options(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ------------------------------------------------------------------- models

/// The physical models and documents a run uses.
#[derive(Debug, Clone)]
pub struct Models {
    pub spine: SpineModel,
    pub neck_muscles: Vec<HillMuscle>,
    pub face: FaceModel,
    pub oracle: AuOracle,
    pub expressions: Vec<ExpressionWeightSet>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Models {
    /// Bundled models with any files named in `files` swapped in.
    pub fn load(files: &ModelFiles) -> Result<Self> {
        let spine = match &files.spine {
            Some(p) => SpineModel::from_toml(&read_text(p)?)?,
            None => SpineModel::bundled(),
        };
        let neck_muscles = match &files.neck_muscles {
            Some(p) => muscles_from_toml(&read_text(p)?, &spine)?,
            None => bundled_neck_muscles(&spine),
        };
        let face = match (&files.face_obj, &files.face_map) {
            (None, None) => FaceModel::bundled(),
            (obj, map) => {
                let obj = match obj {
                    Some(p) => read_text(p)?,
                    None => crate::bundled::FACE_OBJ.to_string(),
                };
                let map = match map {
                    Some(p) => read_text(p)?,
                    None => crate::bundled::FACE_MAP_TOML.to_string(),
                };
                FaceModel::from_files(&obj, &map)?
            }
        };
        let custom_face = files.face_obj.is_some() || files.face_map.is_some();
        let oracle = match &files.au_oracle {
            Some(p) => AuOracle::from_toml(&read_text(p)?, &face)?,
            // The bundled oracle's rest distances belong to the bundled face.
            None if custom_face => AuOracle::from_document(&oracle_document(&face), &face)?,
            None => AuOracle::bundled(&face)?,
        };
        let expression_text = match &files.expressions {
            Some(p) => read_text(p)?,
            None => crate::bundled::EXPRESSIONS_TOML.to_string(),
        };
        let doc: ExpressionDocument =
            toml::from_str(&expression_text).map_err(|e| Error::Config(format!("expression document: {e}")))?;
        let expressions = expression_sets(&doc, &face)?;
        Ok(Models {
            spine,
            neck_muscles,
            face,
            oracle,
            expressions,
        })
    }

    pub fn bundled() -> Self {
        Self::load(&ModelFiles::default()).expect("bundled models are valid")
    }
}

/// A trained network together with the models and options it runs with.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub mlp: Mlp,
    pub models: Models,
    pub settle: SettleOptions,
    pub controller: ControllerConfig,
    pub neck_time: f64,
}

impl ModelBundle {
    pub fn new(mlp: Mlp, models: Models, config: &RunConfig) -> Self {
        ModelBundle {
            mlp,
            models,
            settle: config.settle.to_options(),
            controller: config.controller.to_config(),
            neck_time: config.transfer.neck_time,
        }
    }

    /// SHA-256 of the serialized network.
    pub fn model_digest(&self) -> String {
        sha256_hex(&self.mlp.to_bytes())
    }

    pub fn rest_neck(&self) -> GeneralizedState {
        self.models.spine.rest_state()
    }

    /// Network output clamped to [0, 1].
    pub fn predict_activations(&self, aus: &AuVector) -> Result<ActivationVector> {
        let y = self.mlp.predict(aus)?;
        y.try_into().map_err(|y: Vec<f64>| Error::Dimension {
            expected: NUM_OUTPUTS,
            got: y.len(),
        })
    }
}

// ----------------------------------------------------------------- transfer

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    /// Frame number from the input stream.
    pub frame: u64,
    /// Normalized AUs fed to the network.
    pub input: AuVector,
    pub activations: ActivationVector,
    /// Equilibrium node positions, face frame.
    pub positions: Vec<Vector3<f64>>,
    /// Achieved skull (pitch, yaw, roll), rad.
    pub head_pose: [f64; 3],
    /// Oracle AUs of the equilibrium, raw scale.
    pub raw_aus: AuVector,
    /// The same, normalized with the input's table.
    pub aus: AuVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub table: NormalizationTable,
    /// Successful frames, in input order.
    pub frames: Vec<FrameResult>,
    /// (input position, message) for every frame that failed.
    pub failures: Vec<(usize, String)>,
}

/// Transfers one frame of normalized AUs. The face settles from rest; the
/// neck starts from `neck` and is returned in its final state.
pub fn transfer_frame(
    bundle: &ModelBundle,
    table: &NormalizationTable,
    frame: u64,
    aus: &AuVector,
    target: HeadPoseTarget,
    neck: GeneralizedState,
) -> Result<(FrameResult, GeneralizedState)> {
    let activations = bundle.predict_activations(aus)?;
    let m = &bundle.models;
    let eq = m
        .face
        .settle(&activations[..NUM_FACE_MUSCLES], &jaw_of(&activations)?, &bundle.settle)
        .map_err(|e| with_frame(e, frame))?;
    let raw_aus = m.oracle.estimate_aus(&eq.positions)?;
    let mut sim = NeckSimulation::new(&m.spine, &m.neck_muscles, bundle.controller.clone(), neck)?;
    sim.set_target(target)?;
    sim.run((bundle.neck_time / PHYSICS_DT).round() as usize)
        .map_err(|e| with_frame(e, frame))?;
    let pose = sim.head_orientation();
    let result = FrameResult {
        frame,
        input: *aus,
        activations,
        positions: eq.positions,
        head_pose: [pose.x, pose.y, pose.z],
        raw_aus,
        aus: table.apply(&raw_aus),
    };
    Ok((result, sim.state))
}

fn with_frame(e: Error, frame: u64) -> Error {
    match e {
        Error::Convergence { what, residual } => Error::Convergence {
            what: format!("frame {frame}: {what}"),
            residual,
        },
        other => other,
    }
}

/// Transfers every frame under one normalization table: `table` if given,
/// otherwise the sequence's own range. A failed frame is recorded and
/// skipped; the neck carries on from the last good state.
pub fn transfer_sequence(
    bundle: &ModelBundle,
    frames: &[AuFrame],
    table: Option<&NormalizationTable>,
) -> Result<TransferResult> {
    let table = stream_table(frames, table)?;
    let targets = head_pose_targets(frames);
    let mut neck = bundle.rest_neck();
    let mut out = TransferResult {
        table: table.clone(),
        frames: Vec::with_capacity(frames.len()),
        failures: Vec::new(),
    };
    for (i, (f, target)) in frames.iter().zip(targets).enumerate() {
        if f.low_confidence() {
            log::warn!("frame {} has low tracking confidence {}", f.frame, f.confidence);
        }
        let aus = table.apply_clamped(&f.aus);
        match transfer_frame(bundle, &table, f.frame, &aus, target, neck.clone()) {
            Ok((r, state)) => {
                out.frames.push(r);
                neck = state;
            }
            Err(e) => {
                log::error!("frame {} failed: {e}", f.frame);
                out.failures.push((i, e.to_string()));
            }
        }
    }
    Ok(out)
}

/// Table chosen by the configured normalization mode.
pub fn input_table<'a>(mode: Normalization, mlp: &'a Mlp) -> Result<Option<&'a NormalizationTable>> {
    match mode {
        Normalization::Sequence => Ok(None),
        Normalization::Training => mlp
            .normalization
            .as_ref()
            .map(Some)
            .ok_or_else(|| Error::Data("model carries no training normalization table".into())),
    }
}

// --------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_au: AuVector,
    /// Mean of the per-AU errors.
    pub average: f64,
    pub frames: usize,
}

/// Per-AU mean squared error between two equally long AU sequences.
pub fn au_mse(estimated: &[AuVector], reference: &[AuVector]) -> Result<Evaluation> {
    if estimated.len() != reference.len() {
        return Err(Error::Dimension {
            expected: reference.len(),
            got: estimated.len(),
        });
    }
    if reference.is_empty() {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    let mut per_au = [0.0; NUM_AUS];
    for (e, r) in estimated.iter().zip(reference) {
        for k in 0..NUM_AUS {
            per_au[k] += (e[k] - r[k]).powi(2);
        }
    }
    let n = reference.len() as f64;
    per_au.iter_mut().for_each(|v| *v /= n);
    Ok(Evaluation {
        per_au,
        average: per_au.iter().sum::<f64>() / NUM_AUS as f64,
        frames: reference.len(),
    })
}

/// Error of the re-estimated AUs of `results` against `reference`, both on
/// the normalized scale. Every frame must have transferred.
pub fn evaluate_transfer(results: &TransferResult, reference: &[AuVector]) -> Result<Evaluation> {
    if let Some((i, msg)) = results.failures.first() {
        return Err(Error::Data(format!("frame at position {i} did not transfer: {msg}")));
    }
    let est: Vec<AuVector> = results.frames.iter().map(|f| f.aus).collect();
    au_mse(&est, reference)
}

pub fn evaluation_csv(e: &Evaluation) -> String {
    let mut out = String::from("au,mse\n");
    for (name, v) in AU_NAMES.iter().zip(&e.per_au) {
        let _ = writeln!(out, "{name},{v}");
    }
    let _ = writeln!(out, "average,{}", e.average);
    out
}

// ------------------------------------------------------------------- export

/// Provenance recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub config_sha256: String,
    pub model_sha256: String,
    pub input_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub run: RunInfo,
    pub normalization: NormalizationTable,
    pub frames: usize,
    pub failed_frames: Vec<usize>,
    pub file: Vec<ManifestFile>,
}

pub const ACTIVATIONS_FILE: &str = "activations.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MESH_DIR: &str = "mesh";

/// Header of the activations file: frame, the 56 outputs, achieved pose.
pub fn activations_header() -> String {
    let outputs = &csv_header()[1 + 2 * NUM_AUS..];
    format!("frame,{},pitch,yaw,roll", outputs.join(","))
}

pub fn activations_csv(results: &TransferResult) -> String {
    let mut out = activations_header();
    out.push('\n');
    for f in &results.frames {
        let _ = write!(out, "{}", f.frame);
        for v in f.activations.iter().chain(&f.head_pose) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes one OBJ per frame, the activations CSV and a manifest with the
/// SHA-256 of each. Returns the paths written, manifest last.
pub fn export_animation(
    results: &TransferResult,
    face: &FaceModel,
    info: &RunInfo,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mesh_dir = dir.join(MESH_DIR);
    std::fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;
    let mut written = Vec::new();
    let mut files = Vec::new();
    let mut put = |rel: String, text: String| -> Result<()> {
        let path = dir.join(&rel);
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        files.push(ManifestFile {
            path: rel,
            sha256: sha256_hex(text.as_bytes()),
        });
        written.push(path);
        Ok(())
    };
    for f in &results.frames {
        let mut obj = String::new();
        write_obj(&mut obj, &format!("frame_{:05}", f.frame), &f.positions, face.surface());
        put(format!("{MESH_DIR}/frame_{:05}.obj", f.frame), obj)?;
    }
    put(ACTIVATIONS_FILE.into(), activations_csv(results))?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        run: info.clone(),
        normalization: results.table.clone(),
        frames: results.frames.len(),
        failed_frames: results.failures.iter().map(|(i, _)| *i).collect(),
        file: files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

// ----------------------------------------------------------------- simulate

/// One trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub target: [f64; 3],
    pub pose: [f64; 3],
}

/// Keyframe in force at time `t`.
fn keyframe_at(keys: &[Keyframe], t: f64) -> Option<&Keyframe> {
    keys.iter().take_while(|k| k.time <= t).last()
}

/// Neck activations of `key`, matching names exactly or by stem.
fn keyframe_activations(key: &Keyframe, muscles: &[HillMuscle]) -> Result<DVector<f64>> {
    let mut a = DVector::zeros(muscles.len());
    for (name, &v) in &key.activations {
        let mut hit = false;
        for (k, m) in muscles.iter().enumerate() {
            let stem = m.name.strip_suffix("_L").or_else(|| m.name.strip_suffix("_R"));
            if m.name == *name || stem == Some(name.as_str()) {
                a[k] = v;
                hit = true;
            }
        }
        if !hit {
            return Err(Error::Config(format!("keyframe names unknown neck muscle {name:?}")));
        }
    }
    Ok(a)
}

/// Free-runs the neck through the configured keyframes, sampling the head
/// pose at every voluntary tick (25 Hz).
pub fn simulate(models: &Models, config: &RunConfig) -> Result<Vec<TrajectoryPoint>> {
    let sim_cfg = &config.simulate;
    let steps = (sim_cfg.duration / PHYSICS_DT).round() as usize;
    let every = crate::neurocontrol::STEPS_PER_VOLUNTARY;
    let (spine, muscles) = (&models.spine, &models.neck_muscles);
    let mut out = Vec::new();
    let sample = |t: f64, key: Option<&Keyframe>, q: &DVector<f64>| TrajectoryPoint {
        time: t,
        target: key.map_or([0.0; 3], |k| [k.pitch, k.yaw, k.roll]),
        pose: spine.end_orientation(q).into(),
    };
    if sim_cfg.closed_loop {
        let mut sim = NeckSimulation::new(spine, muscles, config.controller.to_config(), spine.rest_state())?;
        for step in 0..steps {
            let t = step as f64 * PHYSICS_DT;
            let key = keyframe_at(&sim_cfg.keyframe, t);
            if step % every == 0 {
                if let Some(k) = key {
                    sim.set_target(HeadPoseTarget {
                        pitch: k.pitch,
                        yaw: k.yaw,
                        roll: k.roll,
                    })?;
                }
                out.push(sample(t, key, &sim.state.q));
            }
            sim.step()?;
        }
        out.push(sample(
            sim.time(),
            keyframe_at(&sim_cfg.keyframe, sim.time()),
            &sim.state.q,
        ));
    } else {
        let mut state = spine.rest_state();
        let mut a = DVector::zeros(muscles.len());
        let mut current: Option<usize> = None;
        for step in 0..=steps {
            let t = step as f64 * PHYSICS_DT;
            let idx = sim_cfg
                .keyframe
                .iter()
                .take_while(|k| k.time <= t)
                .count()
                .checked_sub(1);
            if idx != current {
                current = idx;
                a = match idx {
                    Some(i) => keyframe_activations(&sim_cfg.keyframe[i], muscles)?,
                    None => DVector::zeros(muscles.len()),
                };
            }
            if step % every == 0 || step == steps {
                out.push(sample(t, None, &state.q));
            }
            if step == steps {
                break;
            }
            let frames = spine.forward_kinematics(&state.q, Some(&state.qdot));
            let pose = KinematicPose::links_only(&frames);
            let states = muscles
                .iter()
                .zip(a.iter())
                .map(|(m, &ai)| m.state(&pose, ai))
                .collect::<Result<Vec<_>>>()?;
            let forces = total_forces(muscles, &states)?;
            let p = spine.moment_arm_matrix(muscles, &state.q)?;
            state = spine.step_dynamics(&state, &p, &forces, &[], PHYSICS_DT)?;
        }
    }
    Ok(out)
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut out = String::from("time,target_pitch,target_yaw,target_roll,pitch,yaw,roll\n");
    for p in points {
        let _ = write!(out, "{}", p.time);
        for v in p.target.iter().chain(&p.pose) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub const BENCHMARK_REPEATS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkReport {
    pub steps: usize,
    /// Closed-loop neck steps alone.
    pub neck_steps_per_s: f64,
    /// Face tissue steps alone.
    pub face_steps_per_s: f64,
    /// One neck step plus one face step, the full model.
    pub coupled_steps_per_s: f64,
}

/// Times `steps` physics steps of the neck under the controller (holding a
/// 15° pitch target) and of the face under a half-strength joy expression
/// with the jaw half open, separately and interleaved. The face starts from
/// the same warm start as a settle. Setup is excluded; each rate is the
/// median of [`BENCHMARK_REPEATS`] runs.
pub fn benchmark(models: &Models, config: &RunConfig, steps: usize) -> Result<BenchmarkReport> {
    let face = &models.face;
    let set = &models.expressions[0];
    let a: Vec<f64> = set.weights.iter().map(|w| 0.5 * w).collect();
    let jaw = JawState::new(0.5, 0.5, 0.5)?;
    let start = face.warm_start(&jaw);
    let target = HeadPoseTarget {
        pitch: 15f64.to_radians(),
        yaw: 0.0,
        roll: 0.0,
    };
    let neck = || -> Result<NeckSimulation<'_>> {
        let mut s = NeckSimulation::new(
            &models.spine,
            &models.neck_muscles,
            config.controller.to_config(),
            models.spine.rest_state(),
        )?;
        s.set_target(target)?;
        Ok(s)
    };
    let rate = |t: Instant| steps as f64 / t.elapsed().as_secs_f64().max(1e-12);
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (mut neck_rate, mut face_rate, mut coupled) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..BENCHMARK_REPEATS {
        let mut n = neck()?;
        let t = Instant::now();
        n.run(steps)?;
        neck_rate.push(rate(t));

        let mut f = FaceSimulation::new(face, &start, &a, &jaw, PHYSICS_DT)?;
        let t = Instant::now();
        for _ in 0..steps {
            f.step()?;
        }
        face_rate.push(rate(t));

        let mut n = neck()?;
        let mut f = FaceSimulation::new(face, &start, &a, &jaw, PHYSICS_DT)?;
        let t = Instant::now();
        for _ in 0..steps {
            n.step()?;
            f.step()?;
        }
        coupled.push(rate(t));
    }
    let (neck_rate, face_rate, coupled) = (median(neck_rate), median(face_rate), median(coupled));
    Ok(BenchmarkReport {
        steps,
        neck_steps_per_s: neck_rate,
        face_steps_per_s: face_rate,
        coupled_steps_per_s: coupled,
    })
}
