//! Synthetic training pairs.
//!
//! Each basic expression has fixed per-muscle weights `w`. A sample draws
//! a scale `s ~ U[0, 1]` and sets every muscle activation to `w·s`; jaw
//! rotation is uniform in [0, 1] for expressions that open the mouth and
//! 0 otherwise, slide and twist stay neutral at 0.5. The face is settled
//! from rest and a geometric oracle reads action-unit intensities off the
//! landmarks, standing in for an external AU estimator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aubridge::{AuVector, NormalizationTable, AU_NAMES, NUM_AUS};
use crate::error::{Error, Result};
use crate::nn::{DatasetPair, NUM_OUTPUTS};
use crate::skin::{FaceModel, JawState, SettleOptions, NUM_FACE_MUSCLES};

pub const JAW_ROTATION: usize = NUM_FACE_MUSCLES;
pub const JAW_SLIDE: usize = NUM_FACE_MUSCLES + 1;
pub const JAW_TWIST: usize = NUM_FACE_MUSCLES + 2;
pub const AUXILIARY: usize = NUM_FACE_MUSCLES + 3;

/// Value of the jaw slide, jaw twist and auxiliary outputs in every sample.
pub const NEUTRAL_CONTROL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Expression {
    Joy,
    Sadness,
    Anger,
    Fear,
    Disgust,
    Surprise,
}

impl Expression {
    pub const ALL: [Expression; 6] = [
        Expression::Joy,
        Expression::Sadness,
        Expression::Anger,
        Expression::Fear,
        Expression::Disgust,
        Expression::Surprise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Expression::Joy => "joy",
            Expression::Sadness => "sadness",
            Expression::Anger => "anger",
            Expression::Fear => "fear",
            Expression::Disgust => "disgust",
            Expression::Surprise => "surprise",
        }
    }
}

impl std::fmt::Display for Expression {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Expression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Expression::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Data(format!("unknown expression {s:?}")))
    }
}

/// 52 muscle activations followed by jaw rotation, slide, twist and the
/// auxiliary value.
pub type ActivationVector = [f64; NUM_OUTPUTS];

/// The face's jaw controls encoded in an activation vector.
pub fn jaw_of(a: &ActivationVector) -> Result<JawState> {
    JawState::new(a[JAW_ROTATION], a[JAW_SLIDE], a[JAW_TWIST])
}

// ---------------------------------------------------------------- documents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionDocument {
    pub expression: Vec<ExpressionDoc>,
}

/// Weights are keyed by muscle name; a name without `_L`/`_R` sets both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionDoc {
    pub name: String,
    pub jaw: bool,
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionWeightSet {
    pub expression: Expression,
    /// Per face muscle, in the face model's muscle order.
    pub weights: Vec<f64>,
    pub jaw_participation: bool,
}

/// The six weight sets in [`Expression::ALL`] order.
pub fn expression_sets(doc: &ExpressionDocument, face: &FaceModel) -> Result<Vec<ExpressionWeightSet>> {
    let mut out = Vec::new();
    for e in Expression::ALL {
        let mut found = doc.expression.iter().filter(|d| d.name.eq_ignore_ascii_case(e.name()));
        let d = found
            .next()
            .ok_or_else(|| Error::Config(format!("expression document lacks {e}")))?;
        if found.next().is_some() {
            return Err(Error::Config(format!("expression {e} is defined twice")));
        }
        let mut weights = vec![0.0; face.muscles().len()];
        for (name, &w) in &d.weights {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("{e}: weight {w} for {name} outside [0, 1]")));
            }
            let targets: Vec<usize> = match face.muscle_index(name) {
                Some(k) => vec![k],
                None => ["_L", "_R"]
                    .iter()
                    .filter_map(|side| face.muscle_index(&format!("{name}{side}")))
                    .collect(),
            };
            if targets.is_empty() {
                return Err(Error::Config(format!("{e}: unknown muscle {name:?}")));
            }
            for k in targets {
                weights[k] = w;
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!("expression {e} has no nonzero weight")));
        }
        out.push(ExpressionWeightSet {
            expression: e,
            weights,
            jaw_participation: d.jaw,
        });
    }
    if let Some(extra) = doc.expression.iter().find(|d| d.name.parse::<Expression>().is_err()) {
        return Err(Error::Config(format!("unknown expression {:?}", extra.name)));
    }
    Ok(out)
}

pub fn load_expression_sets(text: &str, face: &FaceModel) -> Result<Vec<ExpressionWeightSet>> {
    let doc: ExpressionDocument =
        toml::from_str(text).map_err(|e| Error::Config(format!("expression document: {e}")))?;
    expression_sets(&doc, face)
}

/// Shipped weight sets, by muscle stem (both sides).
pub fn default_expression_document() -> ExpressionDocument {
    let set = |name: &str, jaw: bool, w: &[(&str, f64)]| ExpressionDoc {
        name: name.into(),
        jaw,
        weights: w.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    };
    ExpressionDocument {
        expression: vec![
            set(
                "joy",
                true,
                &[
                    ("zygomatic_major", 1.0),
                    ("zygomatic_minor", 0.4),
                    ("levator_anguli_oris", 0.5),
                    ("orbicularis_oculi_orbital", 0.7),
                    ("risorius", 0.3),
                ],
            ),
            set(
                "sadness",
                false,
                &[
                    ("frontalis_inner", 0.8),
                    ("corrugator_supercilii", 0.5),
                    ("depressor_anguli_oris", 1.0),
                    ("mentalis", 0.6),
                    ("orbicularis_oculi_upper", 0.3),
                ],
            ),
            set(
                "anger",
                false,
                &[
                    ("corrugator_supercilii", 1.0),
                    ("depressor_supercilii", 0.8),
                    ("procerus", 0.7),
                    ("orbicularis_oculi_lower", 0.8),
                    ("orbicularis_oris_upper", 0.7),
                    ("orbicularis_oris_lower", 0.7),
                    ("levator_palpebrae", 0.5),
                ],
            ),
            set(
                "fear",
                true,
                &[
                    ("frontalis_inner", 1.0),
                    ("frontalis_major", 0.6),
                    ("corrugator_supercilii", 0.5),
                    ("levator_palpebrae", 1.0),
                    ("risorius", 0.9),
                    ("platysma", 0.6),
                ],
            ),
            set(
                "disgust",
                false,
                &[
                    ("levator_labii_alaeque_nasi", 1.0),
                    ("levator_labii_superioris", 0.8),
                    ("nasalis", 0.6),
                    ("procerus", 0.5),
                    ("depressor_anguli_oris", 0.4),
                    ("orbicularis_oculi_lower", 0.4),
                ],
            ),
            set(
                "surprise",
                true,
                &[
                    ("frontalis_inner", 1.0),
                    ("frontalis_major", 1.0),
                    ("frontalis_outer", 1.0),
                    ("levator_palpebrae", 0.9),
                    ("depressor_labii_inferioris", 0.4),
                ],
            ),
        ],
    }
}

/// One landmark-distance term: `sign · gain · (|x_a − x_b| − rest)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuTermDoc {
    pub a: String,
    pub b: String,
    /// Distance in the rest pose, m.
    pub rest: f64,
    /// Intensity per metre.
    pub gain: f64,
    /// +1 when the AU grows as the landmarks separate, −1 when they close.
    pub sign: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuDoc {
    pub name: String,
    pub term: Vec<AuTermDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuOracleDocument {
    pub au: Vec<AuDoc>,
}

#[derive(Debug, Clone, PartialEq)]
struct Term {
    a: usize,
    b: usize,
    rest: f64,
    weight: f64,
}

/// Resolved AU oracle: a fixed linear read-out of landmark distances.
#[derive(Debug, Clone, PartialEq)]
pub struct AuOracle {
    terms: Vec<Vec<Term>>,
}

impl AuOracle {
    pub fn from_document(doc: &AuOracleDocument, face: &FaceModel) -> Result<Self> {
        if doc.au.len() != NUM_AUS {
            return Err(Error::Config(format!(
                "AU oracle has {} entries, expected {NUM_AUS}",
                doc.au.len()
            )));
        }
        let rest = face.rest_positions();
        let mut terms = Vec::new();
        for (k, (au, name)) in doc.au.iter().zip(AU_NAMES).enumerate() {
            if !au.name.eq_ignore_ascii_case(name) {
                return Err(Error::Config(format!(
                    "AU oracle entry {k} is {}, expected {name}",
                    au.name
                )));
            }
            if au.term.is_empty() {
                return Err(Error::Config(format!("{name} has no oracle terms")));
            }
            let mut list = Vec::new();
            for t in &au.term {
                let (a, b) = (face.landmark(&t.a)?, face.landmark(&t.b)?);
                let d = (rest[a] - rest[b]).norm();
                if (d - t.rest).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "{name}: rest distance {} for {}–{} does not match the face ({d})",
                        t.rest, t.a, t.b
                    )));
                }
                if !(t.sign == 1.0 || t.sign == -1.0) || !(t.gain >= 0.0) {
                    return Err(Error::Config(format!("{name}: term needs sign ±1 and gain ≥ 0")));
                }
                list.push(Term {
                    a,
                    b,
                    rest: t.rest,
                    weight: t.sign * t.gain,
                });
            }
            terms.push(list);
        }
        Ok(AuOracle { terms })
    }

    pub fn from_toml(text: &str, face: &FaceModel) -> Result<Self> {
        let doc: AuOracleDocument = toml::from_str(text).map_err(|e| Error::Config(format!("AU oracle: {e}")))?;
        Self::from_document(&doc, face)
    }

    pub fn bundled(face: &FaceModel) -> Result<Self> {
        Self::from_toml(crate::bundled::AU_ORACLE_TOML, face)
    }

    /// Raw intensities of a deformed face.
    pub fn estimate_aus(&self, positions: &[Vector3<f64>]) -> Result<AuVector> {
        let mut out = [0.0; NUM_AUS];
        for (k, terms) in self.terms.iter().enumerate() {
            let mut s = 0.0;
            for t in terms {
                let (pa, pb) = (
                    positions
                        .get(t.a)
                        .ok_or_else(|| Error::Data(format!("mesh lacks landmark node {}", t.a)))?,
                    positions
                        .get(t.b)
                        .ok_or_else(|| Error::Data(format!("mesh lacks landmark node {}", t.b)))?,
                );
                s += t.weight * ((pa - pb).norm() - t.rest);
            }
            out[k] = s.max(0.0);
        }
        Ok(out)
    }
}

/// (AU, [(landmark a, landmark b, sign, gain per mm)]) for the left side;
/// `_L` terms are mirrored to `_R` and each side gets half the gain. Gains
/// put the strongest synthetic response near the top of the 0–5 scale.
type OracleRow = (&'static str, &'static [(&'static str, &'static str, f64, f64)]);

const ORACLE: [OracleRow; NUM_AUS] = [
    ("AU01", &[("brow_inner_L", "inner_canthus_L", 1.0, 2.5)]),
    ("AU02", &[("brow_outer_L", "outer_canthus_L", 1.0, 2.5)]),
    (
        "AU04",
        &[
            ("brow_inner_L", "brow_inner_R", -1.0, 2.0),
            ("brow_inner_L", "inner_canthus_L", -1.0, 2.0),
        ],
    ),
    ("AU05", &[("upper_lid_L", "lower_lid_L", 1.0, 2.0)]),
    ("AU06", &[("cheek_L", "lower_lid_L", -1.0, 25.0)]),
    ("AU07", &[("lower_lid_L", "outer_canthus_L", -1.0, 30.0)]),
    ("AU09", &[("nose_wing_L", "inner_canthus_L", -1.0, 5.0)]),
    ("AU10", &[("upper_lip_center", "nose_tip", -1.0, 5.0)]),
    ("AU12", &[("lip_corner_L", "outer_canthus_L", -1.0, 2.0)]),
    ("AU14", &[("lip_corner_L", "cheek_L", -1.0, 2.0)]),
    ("AU15", &[("lip_corner_L", "outer_canthus_L", 1.0, 0.3)]),
    ("AU17", &[("chin", "lower_lip_center", -1.0, 10.0)]),
    ("AU20", &[("lip_corner_L", "lip_corner_R", 1.0, 8.0)]),
    ("AU23", &[("lip_corner_L", "lip_corner_R", -1.0, 0.5)]),
    ("AU25", &[("upper_lip_center", "lower_lip_center", 1.0, 0.15)]),
    ("AU26", &[("nose_tip", "chin", 1.0, 0.15)]),
    ("AU45", &[("upper_lid_L", "lower_lid_L", -1.0, 20.0)]),
];

fn mirror_name(n: &str) -> Option<String> {
    n.strip_suffix("_L").map(|b| format!("{b}_R"))
}

/// Shipped oracle, with rest distances measured on `face`.
pub fn oracle_document(face: &FaceModel) -> AuOracleDocument {
    let rest = face.rest_positions();
    let term = |a: &str, b: &str, sign: f64, gain_mm: f64| {
        let d = (rest[face.landmark(a).expect("landmark")] - rest[face.landmark(b).expect("landmark")]).norm();
        AuTermDoc {
            a: a.into(),
            b: b.into(),
            rest: d,
            gain: gain_mm * 1000.0,
            sign,
        }
    };
    let au = ORACLE
        .iter()
        .map(|(name, terms)| {
            let mut list = Vec::new();
            for &(a, b, sign, gain) in terms.iter() {
                let (ma, mb) = (mirror_name(a), mirror_name(b));
                let paired = ma.is_some() || mb.is_some();
                // A pair like lip_corner_L–lip_corner_R is its own mirror.
                let self_mirror = ma.as_deref() == Some(b) || mb.as_deref() == Some(a);
                if paired && !self_mirror {
                    list.push(term(a, b, sign, gain / 2.0));
                    let a2 = ma.unwrap_or_else(|| a.to_string());
                    let b2 = mb.unwrap_or_else(|| b.to_string());
                    list.push(term(&a2, &b2, sign, gain / 2.0));
                } else {
                    list.push(term(a, b, sign, gain));
                }
            }
            AuDoc {
                name: name.to_string(),
                term: list,
            }
        })
        .collect();
    AuOracleDocument { au }
}

pub fn default_oracle_document() -> AuOracleDocument {
    oracle_document(&FaceModel::bundled())
}

// ----------------------------------------------------------------- sampling

/// Draws `s ~ U[0, 1]` and returns `w·s` activations with the jaw controls.
pub fn sample_activation(set: &ExpressionWeightSet, rng: &mut impl Rng) -> ActivationVector {
    let s: f64 = rng.gen_range(0.0..=1.0);
    let jaw = if set.jaw_participation {
        rng.gen_range(0.0..=1.0)
    } else {
        0.0
    };
    activation_for(set, s, jaw)
}

/// Activations of `set` at scale `s` with jaw rotation `jaw`.
pub fn activation_for(set: &ExpressionWeightSet, s: f64, jaw: f64) -> ActivationVector {
    let mut a = [0.0; NUM_OUTPUTS];
    for (ai, w) in a.iter_mut().zip(&set.weights) {
        *ai = w * s;
    }
    a[JAW_ROTATION] = jaw;
    a[JAW_SLIDE] = NEUTRAL_CONTROL;
    a[JAW_TWIST] = NEUTRAL_CONTROL;
    a[AUXILIARY] = NEUTRAL_CONTROL;
    a
}

/// Independent stream for sample `index`, so that samples can be produced
/// in any order.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Settles the face under `a` and reads the raw AUs.
pub fn synthesize(face: &FaceModel, oracle: &AuOracle, a: &ActivationVector, opts: &SettleOptions) -> Result<AuVector> {
    let eq = face.settle(&a[..NUM_FACE_MUSCLES], &jaw_of(a)?, opts)?;
    oracle.estimate_aus(&eq.positions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub expression: Expression,
    pub raw_aus: AuVector,
    pub activations: ActivationVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Normalized AUs, row for row with `samples`.
    pub normalized: Vec<AuVector>,
    pub table: NormalizationTable,
}

impl Dataset {
    pub fn pairs(&self) -> Vec<DatasetPair> {
        self.samples
            .iter()
            .zip(&self.normalized)
            .map(|(s, n)| DatasetPair {
                aus: n.to_vec(),
                activations: s.activations.to_vec(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub n_per_expression: usize,
    pub seed: u64,
    pub settle: SettleOptions,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            n_per_expression: 1000,
            seed: 2024,
            settle: SettleOptions::default(),
        }
    }
}

/// Raw samples for every expression. A sample whose settle fails is logged
/// and replaced by the next draw, up to twice the quota in attempts.
pub fn generate_samples(
    face: &FaceModel,
    oracle: &AuOracle,
    sets: &[ExpressionWeightSet],
    opts: &GenerateOptions,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(sets.len() * opts.n_per_expression);
    let budget = 2 * opts.n_per_expression;
    for (e, set) in sets.iter().enumerate() {
        let mut kept = 0;
        let mut attempt = 0;
        while kept < opts.n_per_expression {
            if attempt >= budget {
                return Err(Error::Convergence {
                    what: format!(
                        "{}: only {kept} of {} samples settled in {budget} attempts",
                        set.expression, opts.n_per_expression
                    ),
                    residual: (opts.n_per_expression - kept) as f64,
                });
            }
            let index = (e * budget + attempt) as u64;
            attempt += 1;
            let a = sample_activation(set, &mut sample_rng(opts.seed, index));
            match synthesize(face, oracle, &a, &opts.settle) {
                Ok(aus) => {
                    out.push(Sample {
                        expression: set.expression,
                        raw_aus: aus,
                        activations: a,
                    });
                    kept += 1;
                }
                Err(err) => log::warn!("{} sample {index} dropped: {err}", set.expression),
            }
            if attempt % 100 == 0 {
                log::info!("{}: {kept}/{} samples", set.expression, opts.n_per_expression);
            }
        }
    }
    Ok(out)
}

/// Per-AU min-max normalization of the raw intensities.
pub fn normalize_dataset(samples: Vec<Sample>) -> Result<Dataset> {
    let raw: Vec<AuVector> = samples.iter().map(|s| s.raw_aus).collect();
    let table = NormalizationTable::fit(&raw)?;
    let normalized = raw.iter().map(|r| table.apply(r)).collect();
    Ok(Dataset {
        samples,
        normalized,
        table,
    })
}

pub fn generate_dataset(
    face: &FaceModel,
    oracle: &AuOracle,
    sets: &[ExpressionWeightSet],
    opts: &GenerateOptions,
) -> Result<Dataset> {
    normalize_dataset(generate_samples(face, oracle, sets, opts)?)
}

// ---------------------------------------------------------------------- CSV

/// Header: tag, raw AUs, normalized AUs, then the activations.
pub fn csv_header() -> Vec<String> {
    let mut h = vec!["expression".to_string()];
    h.extend(AU_NAMES.iter().map(|n| format!("{n}_raw")));
    h.extend(AU_NAMES.iter().map(|n| format!("{n}_norm")));
    h.extend((0..NUM_FACE_MUSCLES).map(|k| format!("muscle_{k:02}")));
    h.extend(["jaw_rotation", "jaw_slide", "jaw_twist", "auxiliary"].map(String::from));
    h
}

pub fn write_dataset_csv(d: &Dataset) -> String {
    let mut out = csv_header().join(",");
    out.push('\n');
    for (s, n) in d.samples.iter().zip(&d.normalized) {
        out.push_str(s.expression.name());
        for v in s.raw_aus.iter().chain(n).chain(&s.activations) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Reads a dataset file. The normalization table is refit from the raw
/// columns; the stored normalized columns must agree with it.
pub fn parse_dataset_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("dataset header: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    if header != csv_header() {
        return Err(Error::Data("dataset header does not match the expected layout".into()));
    }
    let mut samples = Vec::new();
    let mut stored = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("dataset row {}: {e}", row + 1)))?;
        let expression: Expression = rec[0].parse()?;
        let nums = rec
            .iter()
            .skip(1)
            .map(|c| c.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Data(format!("dataset row {}: bad number", row + 1)))?;
        if nums.len() != 2 * NUM_AUS + NUM_OUTPUTS {
            return Err(Error::Data(format!("dataset row {}: {} values", row + 1, nums.len())));
        }
        let raw: AuVector = nums[..NUM_AUS].try_into().expect("length checked");
        let norm: AuVector = nums[NUM_AUS..2 * NUM_AUS].try_into().expect("length checked");
        let activations: ActivationVector = nums[2 * NUM_AUS..].try_into().expect("length checked");
        if raw.iter().any(|x| *x < 0.0) || activations.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Data(format!("dataset row {}: value out of range", row + 1)));
        }
        samples.push(Sample {
            expression,
            raw_aus: raw,
            activations,
        });
        stored.push(norm);
    }
    let d = normalize_dataset(samples)?;
    if d.normalized != stored {
        return Err(Error::Data("normalized columns disagree with the raw columns".into()));
    }
    Ok(d)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_csv(&text)
}
