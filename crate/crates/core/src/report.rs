//! Run manifests, curve CSV, AUC JSON and SVG plots.
//!
//! Everything here is byte-deterministic: floats use the shortest decimal
//! that parses back to the same value, JSON keys are sorted, and SVG
//! coordinates are printed with fixed precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::AucMatrix;
use crate::curves::{Curve, CurvePoint, PruningMode, Task};
use crate::dataset::SubgroupSpec;
use crate::error::{Error, Result};
use crate::perturb::PerturbationKind;

pub const CURVES_HEADER: [&str; 11] = [
    "task",
    "perturbation",
    "attribute",
    "value",
    "pruning",
    "level_index",
    "stimulus",
    "value",
    "defined",
    "n_protected",
    "n_unprotected",
];

/// Provenance of one run. The digest covers every field except the timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_digest: String,
    pub dataset_digest: String,
    pub seed: u64,
    pub provider: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub tool_version: String,
    pub config: Value,
}

impl RunManifest {
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        v.as_object_mut().expect("object").remove("timestamp");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("manifest serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Curves CSV
// ---------------------------------------------------------------------------

fn sort_key(c: &Curve) -> (&'static str, String, &'static str) {
    match &c.subgroup {
        Some(s) => (c.kind.name(), s.attribute.clone(), s.value_token()),
        None => (c.kind.name(), String::new(), ""),
    }
}

/// Write curves as CSV, rows sorted by perturbation, attribute, value and level.
pub fn write_curves_csv(curves: &[Curve], out: impl Write) -> Result<()> {
    let mut order: Vec<&Curve> = curves.iter().collect();
    order.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let csv_err = |e: csv::Error| Error::format("curves csv", e.to_string());
    w.write_record(CURVES_HEADER).map_err(csv_err)?;
    for c in order {
        let (attribute, value) = match &c.subgroup {
            Some(s) => (s.attribute.as_str(), s.value_token()),
            None => ("", ""),
        };
        let mut points: Vec<&CurvePoint> = c.points.iter().collect();
        points.sort_by_key(|p| p.level_index);
        for p in points {
            w.write_record([
                c.task.name(),
                c.kind.name(),
                attribute,
                value,
                c.pruning.name(),
                &p.level_index.to_string(),
                &p.stimulus.to_string(),
                &p.value.map(|v| v.to_string()).unwrap_or_default(),
                if p.defined() { "true" } else { "false" },
                &p.n_protected.to_string(),
                &p.n_unprotected.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::format("curves csv", e.to_string()))?;
    Ok(())
}

pub fn curves_csv_string(curves: &[Curve]) -> Result<String> {
    let mut buf = Vec::new();
    write_curves_csv(curves, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn emit_curves_csv(curves: &[Curve], path: &Path) -> Result<()> {
    write_file(path, curves_csv_string(curves)?.as_bytes())
}

/// Parse curves back; curves come out in file order.
pub fn read_curves_csv(input: impl Read) -> Result<Vec<Curve>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = r.records();
    let bad = |line: usize, msg: String| Error::format("curves csv", format!("line {line}: {msg}"));
    match records.next() {
        Some(Ok(h)) if h.iter().eq(CURVES_HEADER) => {}
        _ => return Err(bad(1, "unexpected header".into())),
    }
    let mut curves: Vec<Curve> = Vec::new();
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        if rec.len() != CURVES_HEADER.len() {
            return Err(bad(line, format!("{} fields", rec.len())));
        }
        let field = |i: usize| rec.get(i).expect("length checked");
        let task: Task = field(0).parse().map_err(|e: Error| bad(line, e.to_string()))?;
        let kind: PerturbationKind = field(1).parse().map_err(|e: Error| bad(line, e.to_string()))?;
        let subgroup = match (field(2), field(3)) {
            ("", "") => None,
            (a, "1") => Some(SubgroupSpec::new(a, true)),
            (a, "-1") => Some(SubgroupSpec::new(a, false)),
            (_, v) => return Err(bad(line, format!("bad subgroup value `{v}`"))),
        };
        let pruning: PruningMode = field(4).parse().map_err(|e: Error| bad(line, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            field(i).parse::<f64>().map_err(|e| bad(line, format!("{}: {e}", CURVES_HEADER[i])))
        };
        let int = |i: usize| -> Result<usize> {
            field(i).parse::<usize>().map_err(|e| bad(line, format!("{}: {e}", CURVES_HEADER[i])))
        };
        let value = if field(7).is_empty() { None } else { Some(num(7)?) };
        let defined = match field(8) {
            "true" => true,
            "false" => false,
            d => return Err(bad(line, format!("bad defined flag `{d}`"))),
        };
        if defined != value.is_some() {
            return Err(bad(line, "defined flag disagrees with value".into()));
        }
        let point = CurvePoint {
            level_index: int(5)?,
            stimulus: num(6)?,
            value,
            n_protected: int(9)?,
            n_unprotected: int(10)?,
        };
        match curves.last_mut() {
            Some(c) if c.task == task && c.kind == kind && c.subgroup == subgroup && c.pruning == pruning => {
                c.points.push(point)
            }
            _ => curves.push(Curve {
                task,
                kind,
                subgroup,
                pruning,
                points: vec![point],
            }),
        }
    }
    Ok(curves)
}

pub fn load_curves_csv(path: &Path) -> Result<Vec<Curve>> {
    read_curves_csv(read_file(path)?.as_bytes())
}

// ---------------------------------------------------------------------------
// AUC JSON
// ---------------------------------------------------------------------------

pub fn auc_json_string(matrix: &AucMatrix<f64>, manifest_digest: &str) -> String {
    // serde_json maps are ordered by key, so the output has sorted keys.
    let v = json!({
        "task": matrix.task.name(),
        "pruning": matrix.pruning.name(),
        "row_labels": matrix.row_labels,
        "col_labels": matrix.col_labels,
        "values": matrix.values,
        "row_l1": matrix.row_l1,
        "col_l1": matrix.col_l1,
        "matrix_l1": matrix.matrix_l1,
        "undefined_cells": matrix.undefined_cells,
        "manifest_digest": manifest_digest,
    });
    let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
    s.push('\n');
    s
}

pub fn emit_auc_json(matrix: &AucMatrix<f64>, manifest_digest: &str, path: &Path) -> Result<()> {
    write_file(path, auc_json_string(matrix, manifest_digest).as_bytes())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AucFile {
    task: Task,
    pruning: PruningMode,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: Vec<Vec<Option<f64>>>,
    row_l1: Vec<f64>,
    col_l1: Vec<f64>,
    matrix_l1: f64,
    undefined_cells: usize,
    manifest_digest: String,
}

/// Parse an AUC file, returning the matrix exactly as written and its manifest digest.
pub fn read_auc_json(text: &str) -> Result<(AucMatrix<f64>, String)> {
    let f: AucFile = serde_json::from_str(text).map_err(|e| Error::format("auc json", e.to_string()))?;
    let (r, c) = (f.row_labels.len(), f.col_labels.len());
    if f.values.len() != r || f.values.iter().any(|row| row.len() != c) || f.row_l1.len() != r || f.col_l1.len() != c {
        return Err(Error::format("auc json", "inconsistent matrix shape"));
    }
    let m = AucMatrix {
        task: f.task,
        pruning: f.pruning,
        row_labels: f.row_labels,
        col_labels: f.col_labels,
        values: f.values,
        row_l1: f.row_l1,
        col_l1: f.col_l1,
        matrix_l1: f.matrix_l1,
        undefined_cells: f.undefined_cells,
    };
    Ok((m, f.manifest_digest))
}

pub fn load_auc_json(path: &Path) -> Result<(AucMatrix<f64>, String)> {
    read_auc_json(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Short tick label: up to 3 decimals, trailing zeros removed.
fn tick(v: f64) -> String {
    let s = format!("{:.3}", if v == 0.0 { 0.0 } else { v });
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn header(out: &mut String, w: u32, h: u32, digest: &str) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(out, "<!-- fairsa manifest {} -->", esc(digest));
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
}

/// Line plot of curves that share one perturbation. Bias curves use a fixed
/// `[-1, 1]` value axis with a zero gridline; match-rate curves use `[0, 1]`.
pub fn render_curves_svg(curves: &[Curve], digest: &str) -> Result<String> {
    let first = curves
        .first()
        .ok_or_else(|| Error::NothingToRender("no curves".into()))?;
    if !curves.iter().any(|c| c.points.iter().any(CurvePoint::defined)) {
        return Err(Error::NothingToRender(format!("no defined points for {}", first.kind)));
    }
    let (w, h) = (720u32, 420u32);
    let (left, right, top, bottom) = (70.0, 200.0, 40.0, 50.0);
    let pw = w as f64 - left - right;
    let ph = h as f64 - top - bottom;
    let (xlo, xhi) = curves
        .iter()
        .filter_map(Curve::bounds)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (lo, hi)| (a.min(lo), b.max(hi)));
    let xspan = if xhi > xlo { xhi - xlo } else { 1.0 };
    let irc = curves.iter().all(Curve::is_irc);
    let (ylo, yhi) = if irc { (0.0, 1.0) } else { (-1.0, 1.0) };
    let px = |x: f64| left + (x - xlo) / xspan * pw;
    let py = |y: f64| top + (yhi - y.clamp(ylo, yhi)) / (yhi - ylo) * ph;

    let mut s = String::new();
    header(&mut s, w, h, digest);
    let title = format!(
        "{} / {} / pruning {}",
        first.kind,
        if irc { "match rate".to_string() } else { format!("{} bias", first.task) },
        first.pruning
    );
    let _ = writeln!(s, r#"<text x="{:.2}" y="22" font-size="14" text-anchor="middle">{}</text>"#, left + pw / 2.0, esc(&title));
    let _ = writeln!(
        s,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let y = ylo + (yhi - ylo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line class="ytick" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            left,
            py(y),
            left + pw,
            py(y),
            left - 6.0,
            py(y) + 4.0,
            tick(y)
        );
        let x = xlo + xspan * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(x),
            top + ph + 18.0,
            tick(x)
        );
    }
    if !irc {
        let _ = writeln!(
            s,
            r##"<line class="zero" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000" stroke-width="1"/>"##,
            left,
            py(0.0),
            left + pw,
            py(0.0)
        );
    }
    if xlo <= 0.0 && 0.0 <= xhi {
        let _ = writeln!(
            s,
            r##"<line class="unperturbed" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
            px(0.0),
            top,
            px(0.0),
            top + ph
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">stimulus ({})</text>"#,
        left + pw / 2.0,
        h as f64 - 10.0,
        esc(first.kind.name())
    );
    let ylabel = if irc { "match rate" } else { "bias (protected - unprotected)" };
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        ylabel
    );

    for (ci, c) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let label = crate::analysis::row_label(c);
        // Undefined points break the line.
        let mut segment: Vec<String> = Vec::new();
        let mut segments: Vec<Vec<String>> = Vec::new();
        for p in &c.points {
            match p.value {
                Some(v) => segment.push(format!("{:.2},{:.2}", px(p.stimulus), py(v))),
                None => segments.push(std::mem::take(&mut segment)),
            }
        }
        segments.push(segment);
        for seg in segments.iter().filter(|g| !g.is_empty()) {
            let _ = writeln!(
                s,
                r#"<polyline class="curve" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                esc(&label),
                seg.join(" ")
            );
        }
        for p in &c.points {
            if let Some(v) = p.value {
                let r = if p.stimulus == 0.0 { 4.5 } else { 2.5 };
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}"/>"#, px(p.stimulus), py(v));
            }
        }
        let ly = top + 14.0 + 18.0 * ci as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx,
            ly,
            lx + 20.0,
            ly,
            lx + 26.0,
            ly + 4.0,
            esc(&label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatScale {
    /// Blue (negative) through white (0) to red (positive), symmetric about 0.
    Diverging,
    /// White (0) to green (1), for match rates.
    Sequential,
}

impl HeatScale {
    /// Match-rate matrices (only `irc` rows) are sequential; bias matrices diverge.
    pub fn for_matrix(m: &AucMatrix<f64>) -> Self {
        if !m.row_labels.is_empty() && m.row_labels.iter().all(|r| r == crate::analysis::IRC_ROW) {
            HeatScale::Sequential
        } else {
            HeatScale::Diverging
        }
    }
}

fn lerp_rgb(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let m = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", m(a.0, b.0), m(a.1, b.1), m(a.2, b.2))
}

fn heat_color(v: f64, scale: HeatScale, max_abs: f64) -> String {
    const WHITE: (u8, u8, u8) = (255, 255, 255);
    match scale {
        HeatScale::Diverging => {
            let t = if max_abs > 0.0 { v / max_abs } else { 0.0 };
            if t >= 0.0 {
                lerp_rgb(WHITE, (178, 24, 43), t)
            } else {
                lerp_rgb(WHITE, (33, 102, 172), -t)
            }
        }
        HeatScale::Sequential => lerp_rgb(WHITE, (27, 120, 55), v),
    }
}

/// Heatmap of an AUC matrix with L1 norms in the axis labels and title.
pub fn render_heatmap_svg(m: &AucMatrix<f64>, scale: HeatScale, digest: &str) -> Result<String> {
    let defined: Vec<f64> = m.values.iter().flatten().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return Err(Error::NothingToRender("AUC matrix has no defined cells".into()));
    }
    let max_abs = defined.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (cw, ch) = (90.0, 36.0);
    let (left, top) = (190.0, 150.0);
    let w = (left + cw * m.col_labels.len() as f64 + 40.0).ceil() as u32;
    let h = (top + ch * m.row_labels.len() as f64 + 60.0).ceil() as u32;

    let mut s = String::new();
    header(&mut s, w, h, digest);
    let title = format!(
        "{} AUC, pruning {} (matrix L1 {}{})",
        m.task,
        m.pruning,
        tick(m.matrix_l1),
        if m.undefined_cells > 0 { format!(", {} undefined", m.undefined_cells) } else { String::new() }
    );
    let _ = writeln!(s, r#"<text x="10" y="22" font-size="14">{}</text>"#, esc(&title));
    for (j, (c, l1)) in m.col_labels.iter().zip(&m.col_l1).enumerate() {
        let x = left + cw * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" transform="rotate(-45 {x:.2} {:.2})">{} ({})</text>"#,
            top - 8.0,
            top - 8.0,
            esc(c),
            tick(*l1)
        );
    }
    for (i, (r, l1)) in m.row_labels.iter().zip(&m.row_l1).enumerate() {
        let y = top + ch * (i as f64 + 0.5) + 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}" text-anchor="end">{} ({})</text>"#, left - 8.0, esc(r), tick(*l1));
        for (j, cell) in m.values[i].iter().enumerate() {
            let x = left + cw * j as f64;
            let yy = top + ch * i as f64;
            let (fill, text) = match cell {
                Some(v) => (heat_color(*v, scale, max_abs), tick(*v)),
                None => ("#cccccc".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{x:.2}" y="{yy:.2}" width="{cw:.2}" height="{ch:.2}" fill="{fill}" stroke="#888"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{text}</text>"##,
                x + cw / 2.0,
                yy + ch / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Group curves by perturbation kind, preserving first-appearance order.
pub fn curves_by_kind(curves: &[Curve]) -> BTreeMap<PerturbationKind, Vec<Curve>> {
    let mut out: BTreeMap<PerturbationKind, Vec<Curve>> = BTreeMap::new();
    for c in curves {
        out.entry(c.kind).or_default().push(c.clone());
    }
    out
}

pub fn emit_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}
