//! Benchmark-style comparison tables with interleaved gain rows, and
//! qualitative FP/FN overlay rendering.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::eval::{delta, EvalError, MetricsRecord};

/// Published baseline Dice scores shipped as a read-only fixture so reports
/// can juxtapose local runs against them without claiming reproduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineFixture {
    pub datasets: Vec<String>,
    pub row_order: Vec<String>,
    pub scores: BTreeMap<String, BTreeMap<String, f64>>,
    pub delta_rows: Vec<DeltaRowSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaRowSpec {
    /// Row after which the gain row is printed.
    pub after: String,
    pub minuend: String,
    pub subtrahend: String,
}

/// The fixture bundled with the crate.
pub fn builtin_fixture() -> BaselineFixture {
    serde_json::from_str(include_str!("../fixtures/table1.json"))
        .expect("bundled fixture parses")
}

pub fn load_fixture(path: &Path) -> Result<BaselineFixture, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Csv {
        path: path.to_path_buf(),
        row: 0,
        message: format!("fixture parse error: {e}"),
    })
}

#[derive(Debug, Clone)]
pub struct DeltaEntry {
    pub label: String,
    pub dataset: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct RenderedTable {
    pub text: String,
    pub csv: String,
    pub deltas: Vec<DeltaEntry>,
    pub warnings: Vec<String>,
}

/// Gains print with up to three decimals, trailing zeros trimmed.
pub fn format_delta(value: f64) -> String {
    let s = format!("{value:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

/// Assemble the comparison table. User records override fixture cells of the
/// same model name; gain rows are recomputed from whatever values end up in
/// the table. Without records the fixture is rendered verbatim.
pub fn render_table(
    records: &[MetricsRecord],
    fixture: Option<&BaselineFixture>,
) -> Result<RenderedTable, EvalError> {
    if records.is_empty() && fixture.is_none() {
        return Err(EvalError::NothingToReport);
    }
    let mut warnings = Vec::new();

    // merged scores: fixture first, user records override
    let mut scores: BTreeMap<String, BTreeMap<String, f64>> = fixture
        .map(|f| f.scores.clone())
        .unwrap_or_default();
    let mut seen_models = std::collections::BTreeSet::new();
    for r in records {
        if !seen_models.insert(r.model_name.clone()) {
            return Err(EvalError::DuplicateModel(r.model_name.clone()));
        }
        r.check_prompt_grid()?;
        scores
            .entry(r.model_name.clone())
            .or_default()
            .insert(r.dataset_id.clone(), r.aggregate as f64);
    }

    // column set
    let datasets: Vec<String> = if records.is_empty() {
        fixture.map(|f| f.datasets.clone()).unwrap_or_default()
    } else {
        let mut cols: Vec<String> = Vec::new();
        for r in records {
            if !cols.contains(&r.dataset_id) {
                cols.push(r.dataset_id.clone());
            }
        }
        if let Some(f) = fixture {
            for d in &f.datasets {
                if !cols.contains(d) {
                    warnings.push(format!(
                        "dataset {d} present in baselines but absent from records; column omitted"
                    ));
                }
            }
        }
        cols
    };

    // row order: fixture order first, then user models not already present
    let mut rows: Vec<String> = fixture.map(|f| f.row_order.clone()).unwrap_or_default();
    for r in records {
        if !rows.contains(&r.model_name) {
            rows.push(r.model_name.clone());
        }
    }

    let delta_specs: &[DeltaRowSpec] = fixture.map(|f| f.delta_rows.as_slice()).unwrap_or(&[]);

    let mut lines: Vec<Vec<String>> = Vec::new();
    let mut deltas = Vec::new();
    let mut header = vec!["Model".to_string()];
    header.extend(datasets.iter().cloned());
    lines.push(header);
    for model in &rows {
        let Some(model_scores) = scores.get(model) else {
            continue;
        };
        let mut line = vec![model.clone()];
        for d in &datasets {
            line.push(
                model_scores
                    .get(d)
                    .map(|v| format!("{v:.5}"))
                    .unwrap_or_default(),
            );
        }
        lines.push(line);
        for spec in delta_specs.iter().filter(|s| &s.after == model) {
            let label = format!("Delta_{}", spec.subtrahend);
            let mut line = vec![label.clone()];
            for d in &datasets {
                let (a, b) = (
                    scores.get(&spec.minuend).and_then(|m| m.get(d)),
                    scores.get(&spec.subtrahend).and_then(|m| m.get(d)),
                );
                match (a, b) {
                    (Some(&a), Some(&b)) => {
                        let v = delta(a, b);
                        deltas.push(DeltaEntry {
                            label: label.clone(),
                            dataset: d.clone(),
                            value: v,
                        });
                        line.push(format_delta(v));
                    }
                    _ => line.push(String::new()),
                }
            }
            lines.push(line);
        }
    }

    // aligned text rendering
    let cols = lines[0].len();
    let mut widths = vec![0usize; cols];
    for line in &lines {
        for (i, cell) in line.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut text = String::new();
    for (li, line) in lines.iter().enumerate() {
        let rendered: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{:<width$}", cell, width = widths[i]))
            .collect();
        text.push_str(rendered.join("  ").trim_end());
        text.push('\n');
        if li == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            text.push_str(&"-".repeat(total));
            text.push('\n');
        }
    }

    let mut csv = String::new();
    for line in &lines {
        csv.push_str(&line.join(","));
        csv.push('\n');
    }

    Ok(RenderedTable {
        text,
        csv,
        deltas,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// overlays

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn overlay_counts(mask: &Array2<f32>, pred: &Array2<f32>) -> OverlayCounts {
    let mut c = OverlayCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&m, &p) in mask.iter().zip(pred.iter()) {
        match (p == 1.0, m == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub const OVERLAY_TP: [u8; 3] = [0, 255, 0];
pub const OVERLAY_FP: [u8; 3] = [255, 0, 0];
pub const OVERLAY_FN: [u8; 3] = [0, 0, 255];

/// RGB overlay: true positives green, false positives red, false negatives
/// blue, true negatives keep the original pixel.
pub fn render_overlay(
    image: &Array3<f32>,
    mask: &Array2<f32>,
    pred: &Array2<f32>,
) -> image::RgbImage {
    let (_, h, w) = image.dim();
    assert_eq!(mask.dim(), (h, w), "overlay: mask shape");
    assert_eq!(pred.dim(), (h, w), "overlay: pred shape");
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let rgb = match (pred[[i, j]] == 1.0, mask[[i, j]] == 1.0) {
            (true, true) => OVERLAY_TP,
            (true, false) => OVERLAY_FP,
            (false, true) => OVERLAY_FN,
            (false, false) => [
                (image[[0, i, j]] * 255.0) as u8,
                (image[[1, i, j]] * 255.0) as u8,
                (image[[2, i, j]] * 255.0) as u8,
            ],
        };
        image::Rgb(rgb)
    })
}

pub fn save_overlay(
    image: &Array3<f32>,
    mask: &Array2<f32>,
    pred: &Array2<f32>,
    path: &Path,
) -> Result<(), EvalError> {
    render_overlay(image, mask, pred)
        .save(path)
        .map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::PairDice;

    #[test]
    fn fixture_reproduces_all_published_gain_rows() {
        let fixture = builtin_fixture();
        let table = render_table(&[], Some(&fixture)).unwrap();
        let want: [(&str, &str, f64); 15] = [
            ("Delta_BiomedCLIPSeg", "Kvasir", 2.519),
            ("Delta_BiomedCLIPSeg", "ClinicDB", 4.668),
            ("Delta_BiomedCLIPSeg", "BKAI", 6.303),
            ("Delta_BiomedCLIPSeg", "BUSI", 2.36),
            ("Delta_BiomedCLIPSeg", "CheXlocalize", -0.247),
            ("Delta_CLIPSeg", "Kvasir", 0.779),
            ("Delta_CLIPSeg", "ClinicDB", 1.623),
            ("Delta_CLIPSeg", "BKAI", 2.586),
            ("Delta_CLIPSeg", "BUSI", 1.258),
            ("Delta_CLIPSeg", "CheXlocalize", 0.026),
            ("Delta_CLIPSeg-B", "Kvasir", 0.272),
            ("Delta_CLIPSeg-B", "ClinicDB", 2.2),
            ("Delta_CLIPSeg-B", "BKAI", -1.171),
            ("Delta_CLIPSeg-B", "BUSI", 2.479),
            ("Delta_CLIPSeg-B", "CheXlocalize", -2.115),
        ];
        assert_eq!(table.deltas.len(), 15);
        for (label, dataset, value) in want {
            let found = table
                .deltas
                .iter()
                .find(|d| d.label == label && d.dataset == dataset)
                .unwrap_or_else(|| panic!("missing {label}/{dataset}"));
            assert!(
                (found.value - value).abs() < 1e-3,
                "{label}/{dataset}: got {}, want {value}",
                found.value
            );
        }
    }

    #[test]
    fn single_record_renders_one_by_one_table() {
        let rec = MetricsRecord::new(
            "MyData",
            "my-model",
            vec![PairDice {
                image_id: "a".into(),
                prompt_id: 0,
                dice: 0.5,
            }],
        )
        .unwrap();
        let table = render_table(&[rec], None).unwrap();
        assert!(table.text.contains("my-model"));
        assert!(table.text.contains("MyData"));
        assert!(table.text.contains("0.50000"));
        assert!(table.deltas.is_empty());
    }

    #[test]
    fn duplicate_model_names_rejected() {
        let mk = || {
            MetricsRecord::new(
                "D",
                "m",
                vec![PairDice {
                    image_id: "a".into(),
                    prompt_id: 0,
                    dice: 0.5,
                }],
            )
            .unwrap()
        };
        assert!(matches!(
            render_table(&[mk(), mk()], None),
            Err(EvalError::DuplicateModel(name)) if name == "m"
        ));
    }

    #[test]
    fn fixture_dataset_absent_from_records_is_omitted_with_warning() {
        let rec = MetricsRecord::new(
            "Kvasir",
            "my-run",
            vec![PairDice {
                image_id: "a".into(),
                prompt_id: 0,
                dice: 0.9,
            }],
        )
        .unwrap();
        let fixture = builtin_fixture();
        let table = render_table(&[rec], Some(&fixture)).unwrap();
        assert!(!table.warnings.is_empty());
        assert!(table.warnings.iter().any(|w| w.contains("ClinicDB")));
        assert!(!table.text.contains("ClinicDB"));
        assert!(table.text.contains("Kvasir"));
    }

    #[test]
    fn delta_display_rounding_matches_published_style() {
        assert_eq!(format_delta(2.3600000000000003), "2.36%");
        assert_eq!(format_delta(2.1999999999999993), "2.2%");
        assert_eq!(format_delta(-1.1710000000000003), "-1.171%");
        assert_eq!(format_delta(0.0), "0%");
    }

    #[test]
    fn overlay_pixel_classes() {
        let image = Array3::<f32>::from_elem((3, 4, 4), 0.3);
        let mut mask = Array2::<f32>::zeros((4, 4));
        mask.slice_mut(ndarray::s![0..2, ..]).fill(1.0);
        // pred == mask -> only green / untinted
        let img = render_overlay(&image, &mask, &mask);
        for p in img.pixels() {
            assert!(p.0 == OVERLAY_TP || p.0 == [76, 76, 76], "unexpected {:?}", p.0);
        }
        // pred == !mask -> only red / blue
        let inv = mask.map(|&m| 1.0 - m);
        let img = render_overlay(&image, &mask, &inv);
        for p in img.pixels() {
            assert!(p.0 == OVERLAY_FP || p.0 == OVERLAY_FN);
        }
        // pred all ones, half mask: red count = mask-0 pixel count
        let ones = Array2::<f32>::ones((4, 4));
        let img = render_overlay(&image, &mask, &ones);
        let red = img.pixels().filter(|p| p.0 == OVERLAY_FP).count();
        assert_eq!(red, mask.iter().filter(|&&m| m == 0.0).count());
        let counts = overlay_counts(&mask, &ones);
        assert_eq!(counts.tp + counts.fp + counts.fn_ + counts.tn, 16);
    }
}
