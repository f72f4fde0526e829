//! Test-set evaluation with prompt averaging, plus metric record IO.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{iterate_batches, DataError, DatasetManifest, PromptPolicy, Split};
use crate::ensemble::{stack_batch, EnsembleError, EnsembleModel};
use crate::losses::{aggregate_prompt_averaged, dice_score, LossError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] EnsembleError),
    #[error(transparent)]
    Metric(#[from] LossError),
    #[error("metrics file {path} row {row}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("incomplete prompt grid: image {image_id} covers prompts {got:?}, expected {want:?}")]
    IncompletePromptGrid {
        image_id: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("duplicate model name {0}")]
    DuplicateModel(String),
    #[error("report needs at least one metrics record or a fixture")]
    NothingToReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairDice {
    pub image_id: String,
    pub prompt_id: usize,
    pub dice: f32,
}

/// Per-(image, prompt) Dice plus the prompt-averaged aggregate.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub dataset_id: String,
    pub model_name: String,
    pub per_pair: Vec<PairDice>,
    pub aggregate: f32,
}

impl MetricsRecord {
    pub fn new(
        dataset_id: &str,
        model_name: &str,
        per_pair: Vec<PairDice>,
    ) -> Result<Self, LossError> {
        let tuples: Vec<(String, usize, f32)> = per_pair
            .iter()
            .map(|p| (p.image_id.clone(), p.prompt_id, p.dice))
            .collect();
        let aggregate = aggregate_prompt_averaged(&tuples)?;
        Ok(MetricsRecord {
            dataset_id: dataset_id.to_string(),
            model_name: model_name.to_string(),
            per_pair,
            aggregate,
        })
    }

    /// Every image must cover the same prompt set.
    pub fn check_prompt_grid(&self) -> Result<(), EvalError> {
        let mut by_image: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for p in &self.per_pair {
            by_image.entry(&p.image_id).or_default().insert(p.prompt_id);
        }
        let mut iter = by_image.iter();
        let Some((_, want)) = iter.next() else {
            return Ok(());
        };
        for (image, got) in iter {
            if got != want {
                return Err(EvalError::IncompletePromptGrid {
                    image_id: image.to_string(),
                    got: got.iter().copied().collect(),
                    want: want.iter().copied().collect(),
                });
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io(source),
            other => EvalError::Csv {
                path: path.to_path_buf(),
                row: 0,
                message: format!("{other:?}"),
            },
        })?;
        w.write_record(["image_id", "prompt_id", "dice"]).ok();
        for p in &self.per_pair {
            w.write_record([
                p.image_id.as_str(),
                &p.prompt_id.to_string(),
                &format!("{:.6}", p.dice),
            ])
            .ok();
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    /// Parse a metrics CSV; row numbers in errors are 1-based including the
    /// header. Validates the prompt grid and duplicate pairs.
    pub fn read_csv(path: &Path, model_name: &str, dataset_id: &str) -> Result<Self, EvalError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| EvalError::Csv {
                path: path.to_path_buf(),
                row: 0,
                message: e.to_string(),
            })?;
        let mut per_pair = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let rownum = i + 2;
            let row = row.map_err(|e| EvalError::Csv {
                path: path.to_path_buf(),
                row: rownum,
                message: e.to_string(),
            })?;
            let bad = |message: String| EvalError::Csv {
                path: path.to_path_buf(),
                row: rownum,
                message,
            };
            if row.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", row.len())));
            }
            let image_id = row[0].to_string();
            let prompt_id: usize = row[1]
                .parse()
                .map_err(|e| bad(format!("bad prompt_id {:?}: {e}", &row[1])))?;
            let dice: f32 = row[2]
                .parse()
                .map_err(|e| bad(format!("bad dice {:?}: {e}", &row[2])))?;
            if !(0.0..=1.0).contains(&dice) {
                return Err(bad(format!("dice {dice} outside [0,1]")));
            }
            per_pair.push(PairDice {
                image_id,
                prompt_id,
                dice,
            });
        }
        let record = MetricsRecord::new(dataset_id, model_name, per_pair).map_err(|e| match e {
            LossError::DuplicatePair(id, p) => EvalError::Csv {
                path: path.to_path_buf(),
                row: 0,
                message: format!("duplicate (image, prompt) pair ({id}, {p})"),
            },
            other => EvalError::Metric(other),
        })?;
        record.check_prompt_grid()?;
        Ok(record)
    }
}

/// Optionally captured predictions: binary masks per (image, prompt).
pub struct EvalArtifacts {
    pub record: MetricsRecord,
    pub predictions: Vec<(String, usize, ndarray::Array2<f32>)>,
}

/// Run every image of the split under every prompt template and record hard
/// Dice per pair. Deterministic: eval-mode forward, manifest order.
pub fn evaluate(
    model: &mut EnsembleModel,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    model_name: &str,
    keep_predictions: bool,
) -> Result<EvalArtifacts, EvalError> {
    let resolution = model.config.resolution;
    let iter = iterate_batches(manifest, split, batch_size, 0, PromptPolicy::All, resolution)?;
    let mut per_pair = Vec::new();
    let mut predictions = Vec::new();
    for batch in iter {
        let batch = batch?;
        let (images, _, prompts) = stack_batch(&batch);
        let logits = model.predict(&images, &prompts)?;
        for (i, sample) in batch.iter().enumerate() {
            let one = logits
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .into_shape_with_order(ndarray::IxDyn(&[resolution, resolution]))
                .unwrap();
            let d = dice_score(&one, &sample.mask.clone().into_dyn(), 0.5)?;
            per_pair.push(PairDice {
                image_id: sample.image_id.clone(),
                prompt_id: sample.prompt_id,
                dice: d.value,
            });
            if keep_predictions {
                let bin = one.map(|&z| if vlsme_tensor::sigmoid_scalar(z) > 0.5 { 1.0 } else { 0.0 });
                predictions.push((
                    sample.image_id.clone(),
                    sample.prompt_id,
                    bin.into_dimensionality::<ndarray::Ix2>().unwrap(),
                ));
            }
        }
    }
    let record = MetricsRecord::new(&manifest.dataset_id, model_name, per_pair)?;
    Ok(EvalArtifacts {
        record,
        predictions,
    })
}

/// Performance gain in percentage points.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub model_a: String,
    pub model_b: String,
    pub delta: f64,
}

pub fn delta(dice_a: f64, dice_b: f64) -> f64 {
    100.0 * (dice_a - dice_b)
}

pub fn delta_row(model_a: &str, dice_a: f64, model_b: &str, dice_b: f64) -> DeltaRow {
    DeltaRow {
        model_a: model_a.to_string(),
        model_b: model_b.to_string(),
        delta: delta(dice_a, dice_b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_matches_published_gains() {
        assert!((delta(0.83976, 0.81457) - 2.519).abs() < 1e-9);
        assert!((delta(0.81423, 0.75120) - 6.303).abs() < 1e-9);
        assert_eq!(delta(0.5, 0.5), 0.0);
    }

    #[test]
    fn delta_is_antisymmetric() {
        for (a, b) in [(0.9, 0.3), (0.1, 0.7), (0.55425, 0.56881)] {
            assert!((delta(a, b) + delta(b, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_of_four_known_pairs() {
        let pairs = vec![
            PairDice { image_id: "a".into(), prompt_id: 0, dice: 1.0 },
            PairDice { image_id: "a".into(), prompt_id: 1, dice: 1.0 },
            PairDice { image_id: "b".into(), prompt_id: 0, dice: 0.0 },
            PairDice { image_id: "b".into(), prompt_id: 1, dice: 0.0 },
        ];
        let rec = MetricsRecord::new("d", "m", pairs).unwrap();
        assert!((rec.aggregate - 0.5).abs() < 1e-6);
        rec.check_prompt_grid().unwrap();
    }

    #[test]
    fn incomplete_grid_is_detected() {
        let pairs = vec![
            PairDice { image_id: "a".into(), prompt_id: 0, dice: 1.0 },
            PairDice { image_id: "a".into(), prompt_id: 1, dice: 1.0 },
            PairDice { image_id: "b".into(), prompt_id: 0, dice: 0.0 },
        ];
        let rec = MetricsRecord::new("d", "m", pairs).unwrap();
        assert!(matches!(
            rec.check_prompt_grid(),
            Err(EvalError::IncompletePromptGrid { ref image_id, .. }) if image_id == "b"
        ));
    }

    #[test]
    fn csv_roundtrip_and_row_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let pairs = vec![
            PairDice { image_id: "x".into(), prompt_id: 0, dice: 0.25 },
            PairDice { image_id: "y".into(), prompt_id: 0, dice: 0.75 },
        ];
        let rec = MetricsRecord::new("d", "m", pairs).unwrap();
        rec.write_csv(&path).unwrap();
        let back = MetricsRecord::read_csv(&path, "m", "d").unwrap();
        assert_eq!(back.per_pair.len(), 2);
        assert!((back.aggregate - 0.5).abs() < 1e-6);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "image_id,prompt_id,dice\na,0,0.5\nb,zero,0.4\n").unwrap();
        let err = MetricsRecord::read_csv(&bad, "m", "d").unwrap_err();
        assert!(matches!(err, EvalError::Csv { row: 3, .. }), "got {err}");
    }
}
