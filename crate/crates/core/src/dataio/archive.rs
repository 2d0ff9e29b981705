//! Directory archive: `manifest.json` plus one little-endian f32 blob per trial.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Montage, Trial};
use crate::error::{Error, ParseError, Result};
use crate::linalg::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_MAGIC: &[u8; 8] = b"SSVEPTRL";
const FORMAT: &str = "ssvep-archive-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    montage: Montage,
    sample_rate_hz: f64,
    trials: Vec<TrialRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialRecord {
    subject_id: String,
    label: usize,
    file: String,
    /// Rows stored in the blob, counting the reference row when present.
    n_channels: usize,
    n_samples: usize,
    #[serde(default)]
    reference_row: bool,
}

pub fn write_archive(ds: &Dataset, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::with_capacity(ds.trials.len());
    for (i, trial) in ds.trials.iter().enumerate() {
        let file = format!("trial_{i:05}.bin");
        let stacked = trial.stacked();
        let mut bytes = Vec::with_capacity(8 + 4 * stacked.as_slice().len());
        bytes.extend_from_slice(BLOB_MAGIC);
        for &v in stacked.as_slice() {
            let narrow = v as f32;
            if !narrow.is_finite() {
                return Err(Error::Serialize(format!(
                    "trial {i} holds a value ({v}) not representable as a finite f32"
                )));
            }
            bytes.extend_from_slice(&narrow.to_le_bytes());
        }
        let blob = path.join(&file);
        fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
        records.push(TrialRecord {
            subject_id: trial.subject_id.clone(),
            label: trial.label,
            file,
            n_channels: stacked.rows(),
            n_samples: stacked.cols(),
            reference_row: trial.reference.is_some(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        montage: ds.montage.clone(),
        sample_rate_hz: ds.montage.sample_rate_hz,
        trials: records,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Serialize(e.to_string()))?;
    let mpath = path.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

pub fn read_archive(path: &Path) -> Result<Dataset> {
    let mpath = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bad_manifest = |reason: String| ParseError::Manifest {
        path: mpath.clone(),
        reason,
    };
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| bad_manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(bad_manifest(format!("unknown format {}", manifest.format)).into());
    }
    if manifest.sample_rate_hz != manifest.montage.sample_rate_hz {
        return Err(bad_manifest("sample rate disagrees with montage".into()).into());
    }

    let mut trials = Vec::with_capacity(manifest.trials.len());
    for (i, rec) in manifest.trials.iter().enumerate() {
        let expected_rows = manifest.montage.n_channels() + usize::from(rec.reference_row);
        if rec.n_channels != expected_rows {
            return Err(bad_manifest(format!(
                "trial {i} declares {} rows, montage implies {expected_rows}",
                rec.n_channels
            ))
            .into());
        }
        let blob = path.join(&rec.file);
        let bytes = fs::read(&blob).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Parse(ParseError::MissingBlob {
                trial: i,
                path: blob.clone(),
            }),
            _ => Error::io(&blob, e),
        })?;
        let values = decode_blob(i, &blob, &bytes, rec)?;
        let mut stacked = Matrix::from_vec(rec.n_channels, rec.n_samples, values)?;
        let reference = rec.reference_row.then(|| {
            let data = stacked.as_slice();
            let last = data[(rec.n_channels - 1) * rec.n_samples..].to_vec();
            let body = data[..(rec.n_channels - 1) * rec.n_samples].to_vec();
            stacked = Matrix::from_vec(rec.n_channels - 1, rec.n_samples, body)
                .expect("row count checked");
            last
        });
        trials.push(Trial {
            subject_id: rec.subject_id.clone(),
            label: rec.label,
            samples: stacked,
            sample_rate_hz: manifest.sample_rate_hz,
            reference,
        });
    }
    Dataset::new(manifest.montage, trials)
}

fn decode_blob(
    trial: usize,
    path: &Path,
    bytes: &[u8],
    rec: &TrialRecord,
) -> Result<Vec<f64>> {
    if bytes.len() < BLOB_MAGIC.len() || &bytes[..8] != BLOB_MAGIC {
        return Err(ParseError::BadMagic {
            trial,
            path: path.to_path_buf(),
        }
        .into());
    }
    let body = &bytes[8..];
    let expected = rec.n_channels * rec.n_samples;
    let found = body.len() / 4;
    // Whole rows of the declared length but the wrong count is a shape
    // problem; anything ending mid-row is a cut-off file.
    let whole_rows = body.len() % 4 == 0 && rec.n_samples > 0 && found % rec.n_samples == 0;
    if !whole_rows && found < expected.max(1) || body.len() % 4 != 0 {
        return Err(ParseError::Truncated {
            trial,
            path: path.to_path_buf(),
            expected: 8 + 4 * expected,
            found: bytes.len(),
        }
        .into());
    }
    if found != expected {
        return Err(ParseError::ShapeMismatch {
            trial,
            path: path.to_path_buf(),
            channels: rec.n_channels,
            samples: rec.n_samples,
            found,
        }
        .into());
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
