//! Attribute-level explanations: the weighted compatibility matrix of a pair,
//! min-max rescaled, ranked, and exported as CSV (normative) and PNG.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::compat::CompatibilityBundle;
use crate::data::Image;
use crate::error::{AfrecError, Result};

pub const DEFAULT_TOP_PAIRS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePair {
    pub row: String,
    pub col: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub top_id: String,
    pub bottom_id: String,
    /// Top attributes, in schema order.
    pub row_names: Vec<String>,
    /// Bottom attributes, in schema order.
    pub col_names: Vec<String>,
    pub raw_matrix: Vec<Vec<f64>>,
    pub scaled_matrix: Vec<Vec<f64>>,
    pub score: f64,
    pub alpha_top: Vec<f64>,
    pub alpha_bottom: Vec<f64>,
    pub top_pairs: Vec<AttributePair>,
}

/// `(m − min) / (max − min)`; a constant matrix maps to 0.5 everywhere.
pub fn min_max_scale(m: &Array2<f64>) -> Array2<f64> {
    let lo = m.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = m.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !(hi > lo) {
        return Array2::from_elem(m.raw_dim(), 0.5);
    }
    m.mapv(|v| (v - lo) / (hi - lo))
}

/// Entries sorted by value, descending; ties by (row, col).
pub fn rank_entries(m: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let mut all: Vec<_> = m.indexed_iter().map(|((r, c), &v)| (r, c, v)).collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    all
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Explanation of an already scored pair. `names` are the schema's attribute
/// names; a collapsed (1×1) bundle is labelled `mean`.
pub fn explain_bundle(
    bundle: &CompatibilityBundle,
    names: &[String],
    ids: (&str, &str),
    n_pairs: usize,
) -> Explanation {
    let k = bundle.m_weighted.nrows();
    let labels: Vec<String> = if k == names.len() { names.to_vec() } else { vec!["mean".to_string(); k] };
    let scaled = min_max_scale(&bundle.m_weighted);
    let top_pairs = rank_entries(&scaled)
        .into_iter()
        .take(n_pairs)
        .map(|(r, c, value)| AttributePair { row: labels[r].clone(), col: labels[c].clone(), value })
        .collect();
    Explanation {
        top_id: ids.0.to_string(),
        bottom_id: ids.1.to_string(),
        row_names: labels.clone(),
        col_names: labels,
        raw_matrix: rows(&bundle.m_weighted),
        scaled_matrix: rows(&scaled),
        score: bundle.score,
        alpha_top: bundle.alpha_top.0.to_vec(),
        alpha_bottom: bundle.alpha_bottom.0.to_vec(),
        top_pairs,
    }
}

/// Scores two image files with a checkpoint and explains the result.
pub fn explain_pair(
    checkpoint: &Checkpoint,
    top_image: &Path,
    bottom_image: &Path,
    top_category: &str,
    bottom_category: &str,
    n_pairs: usize,
) -> Result<Explanation> {
    let model = &checkpoint.model;
    let cat = |name: &str| {
        model
            .categories
            .index_of(name)
            .ok_or_else(|| AfrecError::SchemaMismatch(format!("category `{name}` is not known to the checkpoint")))
    };
    let cats = (cat(top_category)?, cat(bottom_category)?);
    let t = model.embed(&Image::load_png(top_image)?)?;
    let b = model.embed(&Image::load_png(bottom_image)?)?;
    let (bundle, _) = model.pair_forward(&t, &b, cats, checkpoint.variant())?;
    let names: Vec<String> = model.schema.attributes.iter().map(|a| a.name.clone()).collect();
    let id = |p: &Path| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok(explain_bundle(&bundle, &names, (&id(top_image), &id(bottom_image)), n_pairs))
}

/// CSV of the scaled matrix: header row and column of attribute names,
/// values at 12 significant digits.
pub fn write_csv(explanation: &Explanation, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec![String::new()];
    header.extend(explanation.col_names.iter().cloned());
    w.write_record(&header).map_err(csv_error)?;
    for (name, row) in explanation.row_names.iter().zip(&explanation.scaled_matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| format!("{v:.11e}")));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`] back into a matrix.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_error)?;
    let cols: Vec<String> = r.headers().map_err(csv_error)?.iter().skip(1).map(str::to_string).collect();
    let mut names = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        names.push(rec.get(0).unwrap_or_default().to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| AfrecError::SchemaViolation(format!("bad CSV value `{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    Ok((names, cols, values))
}

fn csv_error(e: csv::Error) -> AfrecError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AfrecError::Io(io),
        other => AfrecError::SchemaViolation(format!("{other:?}")),
    }
}

const CELL: u32 = 28;
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;
const SCALE: u32 = 2;
const ADVANCE: u32 = (GLYPH_W + 1) * SCALE;

/// 3×5 glyphs: five rows of three bits, leftmost pixel in the high bit.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'j' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'k' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'r' => [0b110, 0b101, 0b110, 0b101, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        ' ' => [0; 5],
        _ => [0b111, 0b101, 0b101, 0b101, 0b111],
    }
}

/// Draws `text` starting at `(x, y)`; vertical text runs downwards.
fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, vertical: bool) {
    for (i, c) in text.chars().enumerate() {
        let g = glyph(c);
        let offset = i as u32 * ADVANCE;
        for (gy, bits) in g.iter().enumerate() {
            for gx in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - gx) & 1 == 0 {
                    continue;
                }
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let (px, py) = if vertical {
                            (x + (GLYPH_H - 1 - gy as u32) * SCALE + dx, y + offset + gx * SCALE + dy)
                        } else {
                            (x + offset + gx * SCALE + dx, y + gy as u32 * SCALE + dy)
                        };
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, Rgb([0, 0, 0]));
                        }
                    }
                }
            }
        }
    }
}

fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let fade = (255.0 * (1.0 - v)).round() as u8;
    let red = (255.0 - 90.0 * v).round() as u8;
    Rgb([red, fade, fade])
}

/// Writes a labelled heatmap PNG to `png_path` and the CSV next to it
/// (same stem, `.csv`). Returns the CSV path.
pub fn render_heatmap(explanation: &Explanation, png_path: &Path) -> Result<PathBuf> {
    let csv_path = png_path.with_extension("csv");
    write_csv(explanation, &csv_path)?;

    let longest = |names: &[String]| names.iter().map(|n| n.chars().count()).max().unwrap_or(0) as u32;
    let margin_left = longest(&explanation.row_names) * ADVANCE + 8;
    let margin_top = longest(&explanation.col_names) * ADVANCE + 8;
    let (n_rows, n_cols) = (explanation.row_names.len() as u32, explanation.col_names.len() as u32);
    let mut img = RgbImage::from_pixel(margin_left + n_cols * CELL + 4, margin_top + n_rows * CELL + 4, Rgb([255; 3]));
    for (r, row) in explanation.scaled_matrix.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let (x0, y0) = (margin_left + c as u32 * CELL, margin_top + r as u32 * CELL);
            for y in y0..y0 + CELL - 1 {
                for x in x0..x0 + CELL - 1 {
                    img.put_pixel(x, y, heat(v));
                }
            }
        }
    }
    let text_h = GLYPH_H * SCALE;
    for (r, name) in explanation.row_names.iter().enumerate() {
        let y = margin_top + r as u32 * CELL + (CELL - text_h) / 2;
        draw_text(&mut img, name, 4, y, false);
    }
    for (c, name) in explanation.col_names.iter().enumerate() {
        let x = margin_left + c as u32 * CELL + (CELL - text_h) / 2;
        draw_text(&mut img, name, x, 4, true);
    }
    if let Some(dir) = png_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(png_path, image::ImageFormat::Png)
        .map_err(|e| AfrecError::Io(std::io::Error::other(e.to_string())))?;
    Ok(csv_path)
}
