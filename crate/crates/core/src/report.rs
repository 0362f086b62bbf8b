//! Report files: JSON documents, CSV curves and PGM heatmaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::interp::{HeadScore, OverwriteCurve};
use crate::{Error, Result};

/// Envelope shared by every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub kind: String,
    /// Resolved configuration of the run that produced the records.
    pub config: serde_json::Value,
    pub records: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(kind: impl Into<String>, config: impl Serialize, records: T) -> Result<Self> {
        Ok(Self { kind: kind.into(), config: serde_json::to_value(config)?, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn read_report(path: &Path) -> Result<Report<serde_json::Value>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// `layer,group,value` rows, one per layer and token group.
pub fn curves_csv(curves: &[OverwriteCurve]) -> String {
    let mut s = String::from("layer,group,value\n");
    for c in curves {
        for (l, r) in c.layers.iter().zip(&c.rates) {
            let _ = writeln!(s, "{l},{},{r}", c.group.name());
        }
    }
    s
}

/// Square similarity matrix as CSV with a header row of labels.
pub fn matrix_csv(labels: &[String], m: &[Vec<f64>]) -> String {
    let mut s = format!(",{}\n", labels.join(","));
    for (l, row) in labels.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{l},{}", cells.join(","));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub row_label: String,
    pub col_label: String,
    /// Row-major values.
    pub values: Vec<f64>,
}

/// How PGM gray levels map back to values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScale {
    pub colormap: String,
    pub scale: String,
    pub min: f64,
    pub max: f64,
    pub maxval: u16,
    pub rows: usize,
    pub cols: usize,
    pub row_label: String,
    pub col_label: String,
    /// Pixels per cell along each axis.
    pub cell_px: usize,
}

impl Heatmap {
    /// Layer-by-head grid of head scores.
    pub fn from_heads(scores: &[HeadScore], n_layers: usize, n_heads: usize) -> Self {
        let mut values = vec![0.0; n_layers * n_heads];
        for s in scores {
            values[s.layer * n_heads + s.head] = s.score;
        }
        Self { rows: n_layers, cols: n_heads, row_label: "layer".into(), col_label: "head".into(), values }
    }

    /// Binary 8-bit PGM with `cell_px` square cells, bright for high values,
    /// plus its scale descriptor.
    pub fn to_pgm(&self, cell_px: usize) -> (Vec<u8>, HeatmapScale) {
        let finite = self.values.iter().copied().filter(|v| v.is_finite());
        let min = finite.clone().fold(f64::INFINITY, f64::min);
        let max = finite.fold(f64::NEG_INFINITY, f64::max);
        let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
        let span = if max > min { max - min } else { 1.0 };
        let (w, h) = (self.cols * cell_px, self.rows * cell_px);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                let v = self.values[(y / cell_px) * self.cols + x / cell_px];
                let g = if v.is_finite() { ((v - min) / span * 255.0).round() } else { 0.0 };
                out.push(g as u8);
            }
        }
        let scale = HeatmapScale {
            colormap: "gray".into(),
            scale: "linear".into(),
            min,
            max,
            maxval: 255,
            rows: self.rows,
            cols: self.cols,
            row_label: self.row_label.clone(),
            col_label: self.col_label.clone(),
            cell_px,
        };
        (out, scale)
    }

    /// Write `<stem>.pgm` and `<stem>.json`; returns both paths.
    pub fn write(&self, dir: &Path, stem: &str, cell_px: usize) -> Result<(PathBuf, PathBuf)> {
        if cell_px == 0 || self.values.len() != self.rows * self.cols {
            return Err(Error::Contract("heatmap shape or cell size invalid".into()));
        }
        std::fs::create_dir_all(dir)?;
        let (pgm, scale) = self.to_pgm(cell_px);
        let img = dir.join(format!("{stem}.pgm"));
        let side = dir.join(format!("{stem}.json"));
        std::fs::write(&img, pgm)?;
        std::fs::write(&side, serde_json::to_vec_pretty(&scale)?)?;
        Ok((img, side))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::TokenGroup;

    #[test]
    fn csv_layout() {
        let c = OverwriteCurve {
            group: TokenGroup::ImageTokens,
            layers: vec![1, 2],
            rates: vec![1.0, 0.5],
            n_pairs: 4,
            n_effective: 2,
        };
        assert_eq!(curves_csv(&[c]), "layer,group,value\n1,image-tokens,1\n2,image-tokens,0.5\n");
    }

    #[test]
    fn pgm_levels_follow_values() {
        let hm = Heatmap { rows: 1, cols: 3, row_label: "r".into(), col_label: "c".into(), values: vec![0.0, 0.5, 1.0] };
        let (bytes, scale) = hm.to_pgm(2);
        let header = b"P5\n6 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 6], &[0, 0, 128, 128, 255, 255]);
        assert_eq!((scale.min, scale.max), (0.0, 1.0));
    }
}
