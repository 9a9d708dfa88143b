//! Dice scoring and the method-comparison report.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, CoreResult};

/// A binary mask with row-major `{0, 1}` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> CoreResult<Self> {
        ensure!(
            data.len() == h * w,
            ShapeMismatch,
            "mask data length {} does not match {h}x{w}",
            data.len()
        );
        ensure!(
            data.iter().all(|&v| v <= 1),
            InvalidData,
            "mask values must be 0 or 1"
        );
        Ok(Mask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: alloc::vec![0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Dice overlap `2|A∩B| / (|A| + |B|)`. Two empty masks agree perfectly
/// (1.0); one empty mask scores 0 against any nonempty one.
pub fn dice(a: &Mask, b: &Mask) -> CoreResult<f64> {
    ensure!(
        a.h == b.h && a.w == b.w,
        ShapeMismatch,
        "dice on masks of different sizes: {}x{} vs {}x{}",
        a.h,
        a.w,
        b.h,
        b.w
    );
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
    Synthetic,
}

impl Split {
    pub fn from_name(name: &str) -> CoreResult<Self> {
        match name {
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "synthetic" => Ok(Split::Synthetic),
            other => Err(crate::error::CoreError::InvalidConfig(alloc::format!(
                "unknown split '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    InitMaps,
    Unet,
}

/// Per-image and mean Dice for one (method, split, stage) cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiceReport {
    pub method: String,
    pub split: Split,
    pub stage: Stage,
    pub mean: f64,
    pub per_image: BTreeMap<String, f64>,
}

/// Score `predictions` against ground truth; every prediction id must have a
/// ground-truth mask.
pub fn evaluate(
    predictions: &BTreeMap<String, Mask>,
    ground_truth: &BTreeMap<String, Mask>,
    method: &str,
    split: Split,
    stage: Stage,
) -> CoreResult<DiceReport> {
    ensure!(
        !predictions.is_empty(),
        InvalidData,
        "evaluate called with no predictions"
    );
    let mut per_image = BTreeMap::new();
    let mut sum = 0.0;
    for (id, pred) in predictions {
        let gt = ground_truth.get(id).ok_or_else(|| {
            crate::error::CoreError::InvalidData(alloc::format!(
                "prediction '{id}' has no ground-truth mask"
            ))
        })?;
        let d = dice(pred, gt)?;
        sum += d;
        per_image.insert(id.clone(), d);
    }
    Ok(DiceReport {
        method: String::from(method),
        split,
        stage,
        mean: sum / per_image.len() as f64,
        per_image,
    })
}

fn percent(v: f64) -> String {
    alloc::format!("{:.2}", v * 100.0)
}

/// Comparison table: one row per method, columns for the thresholded
/// saliency masks ("init maps") and the trained U-Net, mean Dice in percent.
/// Returns (aligned text, CSV). All reports must come from the same split.
pub fn compare_table(reports: &[DiceReport]) -> CoreResult<(String, String)> {
    ensure!(!reports.is_empty(), InvalidData, "no reports to tabulate");
    let split = reports[0].split;
    let mut cells: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in reports {
        ensure!(
            r.split == split,
            InvalidData,
            "reports mix splits: {:?} and {:?}",
            split,
            r.split
        );
        let entry = cells.entry(r.method.clone()).or_insert((None, None));
        let slot = match r.stage {
            Stage::InitMaps => &mut entry.0,
            Stage::Unet => &mut entry.1,
        };
        ensure!(
            slot.is_none(),
            InvalidData,
            "duplicate report for method '{}' at the same stage",
            r.method
        );
        *slot = Some(r.mean);
    }

    let headers = ["method", "init_maps", "unet"];
    let mut rows: Vec<[String; 3]> = Vec::new();
    for (method, (init, unet)) in &cells {
        rows.push([
            method.clone(),
            init.map(percent).unwrap_or_else(|| String::from("-")),
            unet.map(percent).unwrap_or_else(|| String::from("-")),
        ]);
    }

    let mut widths = [headers[0].len(), headers[1].len(), headers[2].len()];
    for row in &rows {
        for (wd, cell) in widths.iter_mut().zip(row) {
            *wd = (*wd).max(cell.len());
        }
    }
    let mut text = String::new();
    for (i, h) in headers.iter().enumerate() {
        if i > 0 {
            text.push_str("  ");
        }
        text.push_str(h);
        for _ in h.len()..widths[i] {
            text.push(' ');
        }
    }
    text.push('\n');
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                text.push_str("  ");
            }
            text.push_str(cell);
            for _ in cell.len()..widths[i] {
                text.push(' ');
            }
        }
        text.push('\n');
    }

    let mut csv = String::from("method,init_maps,unet\n");
    for row in &rows {
        let init = if row[1] == "-" { "" } else { &row[1] };
        let unet = if row[2] == "-" { "" } else { &row[2] };
        csv.push_str(&alloc::format!("{},{},{}\n", row[0], init, unet));
    }

    Ok((text, csv))
}
