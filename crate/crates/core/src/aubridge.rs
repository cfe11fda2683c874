//! Action-unit streams from external estimation tools.
//!
//! Input is the usual per-frame CSV layout: a header row, one `AUxx_r`
//! intensity column per action unit on a 0–5 scale, optional head pose
//! (`pose_Rx`, `pose_Ry`, `pose_Rz`, radians) and an optional `confidence`.
//! Header names match case-insensitively and may carry surrounding spaces.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multibody::DEFAULT_JOINT_LIMIT;
use crate::neurocontrol::HeadPoseTarget;

pub const NUM_AUS: usize = 17;

/// Action units in the fixed vector order shared by every module.
pub const AU_NAMES: [&str; NUM_AUS] = [
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12", "AU14", "AU15", "AU17", "AU20", "AU23",
    "AU25", "AU26", "AU45",
];

/// Top of the raw intensity scale.
pub const RAW_SCALE: f64 = 5.0;

/// Frames below this tracking confidence are kept but flagged.
pub const LOW_CONFIDENCE: f64 = 0.5;

pub type AuVector = [f64; NUM_AUS];

pub fn au_index(name: &str) -> Option<usize> {
    AU_NAMES.iter().position(|n| n.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuFrame {
    pub frame: u64,
    /// Seconds; 0 when the file has no timestamp column.
    pub timestamp: f64,
    /// Raw intensities in [`AU_NAMES`] order.
    pub aus: AuVector,
    /// Head rotation about x, y, z, rad.
    pub pose: [f64; 3],
    pub confidence: f64,
}

impl AuFrame {
    pub fn neutral(frame: u64) -> Self {
        AuFrame {
            frame,
            timestamp: 0.0,
            aus: [0.0; NUM_AUS],
            pose: [0.0; 3],
            confidence: 1.0,
        }
    }

    pub fn low_confidence(&self) -> bool {
        self.confidence < LOW_CONFIDENCE
    }
}

/// Per-AU min-max ranges. Values map to `(x − min)/(max − min)`; a class
/// whose range collapsed maps to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationTable {
    pub min: AuVector,
    pub max: AuVector,
}

impl NormalizationTable {
    /// The fixed raw scale, for a single image with no training table.
    pub fn raw_scale() -> Self {
        NormalizationTable {
            min: [0.0; NUM_AUS],
            max: [RAW_SCALE; NUM_AUS],
        }
    }

    /// Column ranges of `rows`. Degenerate columns are reported with a warning.
    pub fn fit(rows: &[AuVector]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot normalize an empty AU set".into()));
        }
        let mut t = NormalizationTable {
            min: [f64::INFINITY; NUM_AUS],
            max: [f64::NEG_INFINITY; NUM_AUS],
        };
        for r in rows {
            for k in 0..NUM_AUS {
                if !r[k].is_finite() {
                    return Err(Error::Data(format!("non-finite {} intensity", AU_NAMES[k])));
                }
                t.min[k] = t.min[k].min(r[k]);
                t.max[k] = t.max[k].max(r[k]);
            }
        }
        for k in t.degenerate() {
            log::warn!(
                "{} is constant ({}) across the set; it normalizes to 0",
                AU_NAMES[k],
                t.min[k]
            );
        }
        Ok(t)
    }

    /// Indices of AU classes with no spread.
    pub fn degenerate(&self) -> Vec<usize> {
        (0..NUM_AUS).filter(|&k| !(self.max[k] > self.min[k])).collect()
    }

    pub fn apply(&self, row: &AuVector) -> AuVector {
        std::array::from_fn(|k| {
            let span = self.max[k] - self.min[k];
            if span > 0.0 {
                (row[k] - self.min[k]) / span
            } else {
                0.0
            }
        })
    }

    /// As [`Self::apply`], clamped to [0, 1] for values outside the table.
    pub fn apply_clamped(&self, row: &AuVector) -> AuVector {
        self.apply(row).map(|x| x.clamp(0.0, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.iter().chain(&self.max).any(|x| !x.is_finite()) {
            return Err(Error::Data("normalization table has non-finite bounds".into()));
        }
        if (0..NUM_AUS).any(|k| self.max[k] < self.min[k]) {
            return Err(Error::Data("normalization table has max < min".into()));
        }
        Ok(())
    }
}

fn column_map(headers: &csv::StringRecord) -> HashMap<String, usize> {
    headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_ascii_lowercase(), i))
        .collect()
}

/// Parses an AU stream. Rows with unparseable or negative cells are skipped
/// with a warning.
pub fn parse_au_csv(text: &str) -> Result<Vec<AuFrame>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("AU stream header: {e}")))?
        .clone();
    let cols = column_map(&headers);
    let mut au_cols = [0usize; NUM_AUS];
    for (k, name) in AU_NAMES.iter().enumerate() {
        au_cols[k] = *cols
            .get(&format!("{}_r", name.to_ascii_lowercase()))
            .ok_or_else(|| Error::Data(format!("AU stream lacks column {name}_r")))?;
    }
    let frame_col = cols.get("frame").copied();
    let time_col = cols.get("timestamp").copied();
    let conf_col = cols.get("confidence").copied();
    let pose_cols = ["pose_rx", "pose_ry", "pose_rz"].map(|n| cols.get(n).copied());

    let mut frames: Vec<AuFrame> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("AU stream row {}: {e}", row + 1)))?;
        let cell = |c: usize| -> Option<f64> {
            record
                .get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|x| x.is_finite())
        };
        let opt = |c: Option<usize>, default: f64| -> Option<f64> {
            match c {
                Some(c) => cell(c),
                None => Some(default),
            }
        };
        let parsed = (|| {
            let mut aus = [0.0; NUM_AUS];
            for k in 0..NUM_AUS {
                aus[k] = cell(au_cols[k]).filter(|x| *x >= 0.0)?;
            }
            let pose = [
                opt(pose_cols[0], 0.0)?,
                opt(pose_cols[1], 0.0)?,
                opt(pose_cols[2], 0.0)?,
            ];
            let frame = opt(frame_col, row as f64)?;
            Some(AuFrame {
                frame: frame.max(0.0) as u64,
                timestamp: opt(time_col, 0.0)?,
                aus,
                pose,
                confidence: opt(conf_col, 1.0)?.clamp(0.0, 1.0),
            })
        })();
        match parsed {
            Some(f) => {
                if let Some(prev) = frames.last() {
                    if f.timestamp < prev.timestamp {
                        return Err(Error::Data(format!(
                            "AU stream timestamps decrease at row {} ({} after {})",
                            row + 1,
                            f.timestamp,
                            prev.timestamp
                        )));
                    }
                }
                if f.low_confidence() {
                    log::warn!("frame {} has low tracking confidence {}", f.frame, f.confidence);
                }
                frames.push(f);
            }
            None => log::warn!("skipping AU stream row {}: unparseable or negative cell", row + 1),
        }
    }
    Ok(frames)
}

pub fn read_au_csv(path: &std::path::Path) -> Result<Vec<AuFrame>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_au_csv(&text)
}

/// Writes frames in the layout [`parse_au_csv`] reads.
pub fn write_au_csv(frames: &[AuFrame]) -> String {
    let mut out = String::from("frame,timestamp,confidence,pose_Rx,pose_Ry,pose_Rz");
    for name in AU_NAMES {
        let _ = write!(out, ",{name}_r");
    }
    out.push('\n');
    for f in frames {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            f.frame, f.timestamp, f.confidence, f.pose[0], f.pose[1], f.pose[2]
        );
        for a in f.aus {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

/// Normalized intensities for each frame. A supplied (training) table is
/// applied with clamping; otherwise the sequence's own ranges are used, or
/// the raw 0–5 scale for a single frame.
pub fn normalize_stream(frames: &[AuFrame], table: Option<&NormalizationTable>) -> Result<Vec<AuVector>> {
    let table = stream_table(frames, table)?;
    Ok(frames.iter().map(|f| table.apply_clamped(&f.aus)).collect())
}

/// The table [`normalize_stream`] applies: `table` if given, else the
/// sequence's own range, else the fixed raw scale for a single frame.
pub fn stream_table(frames: &[AuFrame], table: Option<&NormalizationTable>) -> Result<NormalizationTable> {
    if frames.is_empty() {
        return Err(Error::Data("AU stream has no frames".into()));
    }
    Ok(match table {
        Some(t) => t.clone(),
        None if frames.len() == 1 => NormalizationTable::raw_scale(),
        None => NormalizationTable::fit(&frames.iter().map(|f| f.aus).collect::<Vec<_>>())?,
    })
}

/// Head pose of every frame as a controller target, clamped to ±60°.
pub fn head_pose_targets(frames: &[AuFrame]) -> Vec<HeadPoseTarget> {
    let lim = DEFAULT_JOINT_LIMIT;
    frames
        .iter()
        .map(|f| {
            if f.pose.iter().any(|x| x.abs() > lim) {
                log::warn!("frame {} head pose {:?} rad clamped to ±{lim:.4}", f.frame, f.pose);
            }
            let [pitch, yaw, roll] = f.pose.map(|x| x.clamp(-lim, lim));
            HeadPoseTarget { pitch, yaw, roll }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> String {
        let mut h = String::from("frame, timestamp, confidence, pose_Rx, pose_Ry, pose_Rz");
        for n in AU_NAMES {
            h.push_str(&format!(", {n}_r"));
        }
        h
    }

    #[test]
    fn zero_row_is_neutral() {
        let text = format!("{}\n1,0,1,0,0,0{}\n", header(), ",0".repeat(NUM_AUS));
        let f = parse_au_csv(&text).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].aus, [0.0; NUM_AUS]);
        assert_eq!(f[0].pose, [0.0; 3]);
    }

    #[test]
    fn missing_au_column_is_named() {
        let text = header().replace(", AU12_r", "") + "\n";
        let err = parse_au_csv(&text).unwrap_err().to_string();
        assert!(err.contains("AU12_r"), "{err}");
    }

    #[test]
    fn fixture_values_land_in_order() {
        // Columns deliberately shuffled and oddly cased.
        let mut names: Vec<String> = AU_NAMES.iter().map(|n| format!("  {}_R ", n.to_lowercase())).collect();
        names.reverse();
        let mut text = format!("Pose_Rx,{}\n", names.join(","));
        let rows = [
            [0.5; NUM_AUS],
            std::array::from_fn(|k| k as f64 * 0.25),
            std::array::from_fn(|k| 4.0 - 0.2 * k as f64),
        ];
        for (r, row) in rows.iter().enumerate() {
            let mut cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            cells.reverse();
            text.push_str(&format!("{},{}\n", 0.1 * r as f64, cells.join(",")));
        }
        let f = parse_au_csv(&text).unwrap();
        assert_eq!(f.len(), 3);
        for (frame, row) in f.iter().zip(&rows) {
            assert_eq!(&frame.aus, row);
            assert_eq!(frame.confidence, 1.0);
        }
        assert_eq!(f[2].pose, [0.2, 0.0, 0.0]);
        assert_eq!(f[1].frame, 1);
    }

    #[test]
    fn bad_row_is_skipped() {
        let text = format!(
            "{}\n0,0,1,0,0,0{}\n1,0,1,0,0,0,x{}\n",
            header(),
            ",1".repeat(NUM_AUS),
            ",1".repeat(NUM_AUS - 1)
        );
        assert_eq!(parse_au_csv(&text).unwrap().len(), 1);
    }

    #[test]
    fn decreasing_timestamps_are_rejected() {
        let text = format!(
            "{}\n0,1,1,0,0,0{}\n1,0.5,1,0,0,0{}\n",
            header(),
            ",1".repeat(NUM_AUS),
            ",1".repeat(NUM_AUS)
        );
        assert!(parse_au_csv(&text).is_err());
    }

    #[test]
    fn round_trip_preserves_values() {
        let frames: Vec<AuFrame> = (0..4)
            .map(|i| AuFrame {
                frame: i,
                timestamp: i as f64 / 30.0,
                aus: std::array::from_fn(|k| ((i as usize * 7 + k * 3) % 11) as f64 / 2.3),
                pose: [0.01 * i as f64, -0.2, 1.0 / 3.0],
                confidence: 0.98,
            })
            .collect();
        let again = parse_au_csv(&write_au_csv(&frames)).unwrap();
        for (a, b) in frames.iter().zip(&again) {
            for (x, y) in a.aus.iter().chain(&a.pose).zip(b.aus.iter().chain(&b.pose)) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn low_confidence_is_flagged_not_dropped() {
        let text = format!("{}\n0,0,0.2,0,0,0{}\n", header(), ",1".repeat(NUM_AUS));
        let f = parse_au_csv(&text).unwrap();
        assert!(f[0].low_confidence());
    }

    #[test]
    fn min_max_examples() {
        let mut rows = vec![[0.0; NUM_AUS]; 3];
        for (r, v) in rows.iter_mut().zip([1.0, 4.0, 2.5]) {
            r[0] = v;
        }
        let frames: Vec<AuFrame> = rows
            .iter()
            .map(|r| AuFrame {
                aus: *r,
                ..AuFrame::neutral(0)
            })
            .collect();
        let n = normalize_stream(&frames, None).unwrap();
        assert_eq!([n[0][0], n[1][0], n[2][0]], [0.0, 1.0, 0.5]);
        assert_eq!(n[0][1], 0.0);
        let t = NormalizationTable::raw_scale();
        let mut row = [0.0; NUM_AUS];
        row[3] = 2.5;
        assert_eq!(t.apply(&row)[3], 0.5);
        row[3] = 7.0;
        assert_eq!(
            normalize_stream(
                &[AuFrame {
                    aus: row,
                    ..AuFrame::neutral(0)
                }],
                Some(&t)
            )
            .unwrap()[0][3],
            1.0
        );
    }

    #[test]
    fn single_frame_uses_raw_scale() {
        let mut f = AuFrame::neutral(0);
        f.aus[5] = 4.0;
        assert_eq!(normalize_stream(&[f], None).unwrap()[0][5], 0.8);
    }

    #[test]
    fn pose_targets() {
        let mut f = AuFrame::neutral(0);
        assert_eq!(head_pose_targets(&[f.clone()])[0], HeadPoseTarget::default());
        f.pose = [0.2, 0.0, 0.0];
        assert_eq!(head_pose_targets(&[f.clone()])[0].pitch, 0.2);
        f.pose = [0.0, -2.0, 1.5];
        let t = head_pose_targets(&[f])[0];
        assert_eq!((t.yaw, t.roll), (-DEFAULT_JOINT_LIMIT, DEFAULT_JOINT_LIMIT));
    }

    #[test]
    fn au_names_are_unique_and_indexed() {
        for (k, n) in AU_NAMES.iter().enumerate() {
            assert_eq!(au_index(n), Some(k));
            assert_eq!(au_index(&n.to_lowercase()), Some(k));
        }
    }

    proptest! {
        #[test]
        fn normalization_is_permutation_equivariant(
            rows in prop::collection::vec(prop::array::uniform17(0.0f64..5.0), 2..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let frames: Vec<AuFrame> = rows.iter().map(|r| AuFrame { aus: *r, ..AuFrame::neutral(0) }).collect();
            let mut order: Vec<usize> = (0..frames.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<AuFrame> = order.iter().map(|&i| frames[i].clone()).collect();
            let a = normalize_stream(&frames, None).unwrap();
            let b = normalize_stream(&permuted, None).unwrap();
            for (k, &i) in order.iter().enumerate() {
                prop_assert_eq!(a[i], b[k]);
            }
        }

        #[test]
        fn normalized_values_are_in_unit_range(rows in prop::collection::vec(prop::array::uniform17(0.0f64..5.0), 1..8)) {
            let frames: Vec<AuFrame> = rows.iter().map(|r| AuFrame { aus: *r, ..AuFrame::neutral(0) }).collect();
            for r in normalize_stream(&frames, None).unwrap() {
                prop_assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }
}
