//! Training loss (weighted BCE-with-logits + soft Dice) and the hard Dice
//! evaluation metric with prompt-averaged aggregation.

use std::collections::BTreeSet;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use vlsme_tensor::{sigmoid_scalar, Graph, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("mask contains non-binary value {0}")]
    NonBinaryMask(f32),
    #[error("shape mismatch: logits {0:?} vs mask {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("duplicate (image, prompt) pair: ({0}, {1})")]
    DuplicatePair(String, usize),
    #[error("no records to aggregate")]
    Empty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "one")]
    pub bce_weight: f32,
    #[serde(default = "one")]
    pub dice_weight: f32,
    #[serde(default = "default_smooth")]
    pub smooth: f32,
}

fn one() -> f32 {
    1.0
}

fn default_smooth() -> f32 {
    1e-6
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            bce_weight: 1.0,
            dice_weight: 1.0,
            smooth: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.bce_weight < 0.0 || self.dice_weight < 0.0 {
            return Err(LossError::Config("loss weights must be >= 0".into()));
        }
        if self.bce_weight == 0.0 && self.dice_weight == 0.0 {
            return Err(LossError::Config("at least one loss weight must be positive".into()));
        }
        if self.smooth <= 0.0 {
            return Err(LossError::Config("smooth must be > 0".into()));
        }
        Ok(())
    }
}

fn check_mask(mask: &ArrayD<f32>) -> Result<(), LossError> {
    for &v in mask.iter() {
        if v != 0.0 && v != 1.0 {
            return Err(LossError::NonBinaryMask(v));
        }
    }
    Ok(())
}

/// Attach the combined loss node to a graph. Logits shape (N, ...) with the
/// mask matching; BCE averages over all pixels, soft Dice per sample.
pub fn combined_loss(
    g: &mut Graph,
    config: &LossConfig,
    logits: Tensor,
    mask: &ArrayD<f32>,
) -> Result<Tensor, LossError> {
    config.validate()?;
    if g.shape(logits) != mask.shape() {
        return Err(LossError::ShapeMismatch(
            g.shape(logits).to_vec(),
            mask.shape().to_vec(),
        ));
    }
    check_mask(mask)?;
    Ok(g.bce_dice_loss(logits, mask, config.bce_weight, config.dice_weight, config.smooth))
}

/// Loss value without keeping a graph around.
pub fn combined_loss_value(
    config: &LossConfig,
    logits: &ArrayD<f32>,
    mask: &ArrayD<f32>,
) -> Result<f32, LossError> {
    let mut g = Graph::new();
    let lt = g.constant(logits.clone());
    let loss = combined_loss(&mut g, config, lt, mask)?;
    Ok(g.scalar(loss))
}

/// Hard overlap score in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiceScore {
    pub value: f32,
}

pub const DICE_SMOOTH: f32 = 1e-6;

/// Threshold sigmoid probabilities and compute (2|P∩M|+ε)/(|P|+|M|+ε).
/// Both-empty pairs score ~1 via the smoothing term.
pub fn dice_score(
    pred_logits: &ArrayD<f32>,
    mask: &ArrayD<f32>,
    threshold: f32,
) -> Result<DiceScore, LossError> {
    if pred_logits.shape() != mask.shape() {
        return Err(LossError::ShapeMismatch(
            pred_logits.shape().to_vec(),
            mask.shape().to_vec(),
        ));
    }
    check_mask(mask)?;
    let mut p = 0u64;
    let mut m = 0u64;
    let mut pm = 0u64;
    for (&z, &mv) in pred_logits.iter().zip(mask.iter()) {
        let pv = sigmoid_scalar(z) > threshold;
        if pv {
            p += 1;
        }
        if mv == 1.0 {
            m += 1;
            if pv {
                pm += 1;
            }
        }
    }
    let value =
        ((2.0 * pm as f64 + DICE_SMOOTH as f64) / ((p + m) as f64 + DICE_SMOOTH as f64)) as f32;
    Ok(DiceScore {
        value: value.clamp(0.0, 1.0),
    })
}

/// Arithmetic mean over per-(image, prompt) Dice records; rejects duplicate
/// pairs so partial grids cannot be silently double-counted.
pub fn aggregate_prompt_averaged(
    records: &[(String, usize, f32)],
) -> Result<f32, LossError> {
    if records.is_empty() {
        return Err(LossError::Empty);
    }
    let mut seen: BTreeSet<(&str, usize)> = BTreeSet::new();
    let mut sum = 0.0f64;
    for (image_id, prompt_id, dice) in records {
        if !seen.insert((image_id.as_str(), *prompt_id)) {
            return Err(LossError::DuplicatePair(image_id.clone(), *prompt_id));
        }
        sum += *dice as f64;
    }
    Ok((sum / records.len() as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], data: Vec<f32>) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn near_perfect_prediction_has_tiny_loss() {
        let mask = arr(&[1, 4, 4], (0..16).map(|i| (i % 2) as f32).collect());
        let logits = mask.map(|&m| if m == 1.0 { 20.0 } else { -20.0 });
        let loss = combined_loss_value(&LossConfig::default(), &logits, &mask).unwrap();
        assert!(loss < 0.01, "loss = {loss}");
    }

    #[test]
    fn zero_logits_half_mask_closed_form() {
        // 2x2, two ones: BCE = ln 2 exactly, soft dice on p=0.5 everywhere
        let mask = arr(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let logits = arr(&[1, 2, 2], vec![0.0; 4]);
        let eps = 1e-6f64;
        let bce = (2.0f64).ln();
        let dice = (2.0 * 1.0 + eps) / (2.0 + 2.0 + eps);
        let want = bce + (1.0 - dice);
        let got = combined_loss_value(&LossConfig::default(), &logits, &mask).unwrap();
        assert!((got as f64 - want).abs() < 1e-6, "got {got}, want {want}");
    }

    #[test]
    fn weight_vectors_decompose_the_loss() {
        let mask = arr(&[1, 3, 3], (0..9).map(|i| ((i * 2) % 3 == 0) as u8 as f32).collect());
        let logits = arr(&[1, 3, 3], (0..9).map(|i| (i as f32 - 4.0) / 3.0).collect());
        let bce_only = combined_loss_value(
            &LossConfig { bce_weight: 1.0, dice_weight: 0.0, smooth: 1e-6 },
            &logits,
            &mask,
        )
        .unwrap();
        let dice_only = combined_loss_value(
            &LossConfig { bce_weight: 0.0, dice_weight: 1.0, smooth: 1e-6 },
            &logits,
            &mask,
        )
        .unwrap();
        let both = combined_loss_value(&LossConfig::default(), &logits, &mask).unwrap();
        assert!((bce_only + dice_only - both).abs() < 1e-6);
        assert!(bce_only > 0.0 && dice_only > 0.0);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let mask = arr(&[1, 2], vec![0.0, 0.5]);
        let logits = arr(&[1, 2], vec![0.0, 0.0]);
        assert!(matches!(
            combined_loss_value(&LossConfig::default(), &logits, &mask),
            Err(LossError::NonBinaryMask(v)) if v == 0.5
        ));
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let mask = arr(&[4, 4], (0..16).map(|i| (i < 8) as u8 as f32).collect());
        let same = mask.map(|&m| if m == 1.0 { 10.0 } else { -10.0 });
        assert!((dice_score(&same, &mask, 0.5).unwrap().value - 1.0).abs() < 1e-5);
        let flipped = mask.map(|&m| if m == 1.0 { -10.0 } else { 10.0 });
        assert!(dice_score(&flipped, &mask, 0.5).unwrap().value < 1e-5);
    }

    #[test]
    fn dice_half_overlap_case() {
        // |P| = 4, |M| = 4, |P∩M| = 2 on an 8x8 grid -> 0.5
        let mut mask = vec![0.0f32; 64];
        let mut logits = vec![-10.0f32; 64];
        for i in 0..4 {
            mask[i] = 1.0;
        }
        for i in 2..6 {
            logits[i] = 10.0;
        }
        let d = dice_score(&arr(&[8, 8], logits), &arr(&[8, 8], mask), 0.5).unwrap();
        assert!((d.value - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dice_both_empty_is_one() {
        let mask = arr(&[4, 4], vec![0.0; 16]);
        let logits = arr(&[4, 4], vec![-5.0; 16]);
        let d = dice_score(&logits, &mask, 0.5).unwrap();
        assert!((d.value - 1.0).abs() < 1e-5);
    }

    #[test]
    fn aggregate_examples() {
        let recs = vec![("a".to_string(), 0, 0.8), ("b".to_string(), 0, 0.6)];
        assert!((aggregate_prompt_averaged(&recs).unwrap() - 0.7).abs() < 1e-6);
        let single = vec![("a".to_string(), 1, 0.42)];
        assert!((aggregate_prompt_averaged(&single).unwrap() - 0.42).abs() < 1e-6);
    }

    #[test]
    fn aggregate_rejects_duplicates() {
        let recs = vec![("a".to_string(), 0, 0.8), ("a".to_string(), 0, 0.9)];
        assert!(matches!(
            aggregate_prompt_averaged(&recs),
            Err(LossError::DuplicatePair(id, 0)) if id == "a"
        ));
    }

    #[test]
    fn complete_grid_mean_equals_mean_of_prompt_means() {
        // 2 images x 3 prompts
        let vals = [[0.1f32, 0.5, 0.9], [0.3, 0.7, 0.2]];
        let mut recs = Vec::new();
        for (i, row) in vals.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                recs.push((format!("img{i}"), p, v));
            }
        }
        let flat = aggregate_prompt_averaged(&recs).unwrap();
        let mut per_prompt = Vec::new();
        for p in 0..3 {
            per_prompt.push((vals[0][p] + vals[1][p]) / 2.0);
        }
        let nested: f32 = per_prompt.iter().sum::<f32>() / 3.0;
        assert!((flat - nested).abs() < 1e-6);
    }
}
