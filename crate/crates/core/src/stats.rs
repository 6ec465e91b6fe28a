//! Correlation of SEE against an external outcome metric, with
//! permutation p-values and CSV/SVG report emission.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::see::{format_float, SeeScore};
use crate::synth::stream_rng;

pub const MIN_POINTS: usize = 3;
pub const MIN_ITERATIONS: usize = 1000;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} x values vs {} y values", x.len(), y.len())));
    }
    if x.len() < MIN_POINTS {
        return Err(Error::Degenerate(format!(
            "correlation needs at least {MIN_POINTS} points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in correlation input".into()));
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().all(|a| *a == v[0]) {
            return Err(Error::Degenerate(format!("{name} has zero variance")));
        }
    }
    Ok(())
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let r = pearson_unchecked(x, y);
    if !r.is_finite() {
        return Err(Error::Degenerate("variance underflow".into()));
    }
    Ok(r)
}

/// Two-sided permutation p-value for `pearson(x, y)`:
/// `(1 + #{|r_perm| ≥ |r_obs|}) / (1 + iterations)`.
///
/// Permutation `i` shuffles `y` with its own generator stream derived from
/// `(seed, i)`, so the result does not depend on scheduling.
pub fn permutation_pvalue(x: &[f64], y: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if iterations < MIN_ITERATIONS {
        return Err(Error::Validation(format!(
            "need at least {MIN_ITERATIONS} permutations, got {iterations}"
        )));
    }
    let observed = pearson(x, y)?.abs();
    // Permutations that reproduce the observed pairing must count even if
    // summation order perturbs the last bits.
    let threshold = observed - 1e-12;
    let hits: usize = (0..iterations as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let mut shuffled = y.to_vec();
            shuffled.shuffle(&mut rng);
            usize::from(pearson_unchecked(x, &shuffled).abs() >= threshold)
        })
        .sum();
    Ok((1 + hits) as f64 / (1 + iterations) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRow {
    pub condition_id: String,
    pub outcome: f64,
}

/// External outcome per condition (e.g. a generation success rate).
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeTable {
    rows: Vec<OutcomeRow>,
}

impl OutcomeTable {
    pub fn new(rows: Vec<OutcomeRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if r.condition_id.is_empty() {
                return Err(Error::Validation("empty condition id".into()));
            }
            if !seen.insert(r.condition_id.as_str()) {
                return Err(Error::Validation(format!("duplicate condition '{}'", r.condition_id)));
            }
            if !(0.0..=1.0).contains(&r.outcome) {
                return Err(Error::Validation(format!(
                    "outcome {} for '{}' outside [0, 1]",
                    r.outcome, r.condition_id
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[OutcomeRow] {
        &self.rows
    }
}

/// Reads a `condition_id,outcome` CSV.
pub fn read_outcomes_csv(path: impl AsRef<Path>) -> Result<OutcomeTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["condition_id", "outcome"] {
        return Err(bad(format!("expected header condition_id,outcome, got {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let outcome = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad outcome '{}'", &rec[1])))?;
        rows.push(OutcomeRow {
            condition_id: rec[0].to_string(),
            outcome,
        });
    }
    OutcomeTable::new(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition_id: String,
    pub see_mean: f64,
    pub outcome: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub rows: Vec<ReportRow>,
    pub r: f64,
    pub p: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// True if `sample_id` is `condition` or continues it after a
/// non-alphanumeric separator (`snr-10` owns `snr-10_0003`, not `snr-100_0`).
fn belongs_to(sample_id: &str, condition: &str) -> bool {
    match sample_id.strip_prefix(condition) {
        Some("") => true,
        Some(rest) => !rest.chars().next().unwrap().is_alphanumeric(),
        None => false,
    }
}

/// Groups scores by condition (each score joins the longest matching
/// condition id), averages their scaled aggregates and correlates the means
/// with the outcomes.
pub fn correlation_report(
    scores: &[SeeScore],
    outcomes: &OutcomeTable,
    iterations: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let conds = outcomes.rows();
    let mut sums = vec![(0.0f64, 0usize); conds.len()];
    let mut unmatched = 0usize;
    for s in scores {
        let best = conds
            .iter()
            .enumerate()
            .filter(|(_, c)| belongs_to(&s.sample_id, &c.condition_id))
            .max_by_key(|(_, c)| c.condition_id.len());
        match best {
            Some((i, _)) => {
                sums[i].0 += s.scaled_aggregate();
                sums[i].1 += 1;
            }
            None => unmatched += 1,
        }
    }
    if unmatched > 0 {
        log::warn!("{unmatched} scored samples match no outcome condition");
    }
    let rows = conds
        .iter()
        .zip(&sums)
        .map(|(c, &(sum, n))| {
            if n == 0 {
                return Err(Error::Join {
                    condition: c.condition_id.clone(),
                });
            }
            Ok(ReportRow {
                condition_id: c.condition_id.clone(),
                see_mean: sum / n as f64,
                outcome: c.outcome,
                samples: n,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let x: Vec<f64> = rows.iter().map(|r| r.see_mean).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.outcome).collect();
    let r = pearson(&x, &y)?;
    let p = permutation_pvalue(&x, &y, iterations, seed)?;
    Ok(CorrelationReport {
        rows,
        r,
        p,
        iterations,
        seed,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

impl CorrelationReport {
    /// Least-squares line `outcome ≈ intercept + slope · see_mean`.
    pub fn fitted_line(&self) -> (f64, f64) {
        let n = self.rows.len() as f64;
        let mx = self.rows.iter().map(|r| r.see_mean).sum::<f64>() / n;
        let my = self.rows.iter().map(|r| r.outcome).sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for r in &self.rows {
            sxy += (r.see_mean - mx) * (r.outcome - my);
            sxx += (r.see_mean - mx) * (r.see_mean - mx);
        }
        let slope = sxy / sxx;
        (my - slope * mx, slope)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition_id,see_mean,outcome\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{}",
                csv_field(&r.condition_id),
                format_float(r.see_mean),
                format_float(r.outcome)
            );
        }
        let _ = writeln!(out, "r={},p={}", format_float(self.r), format_float(self.p));
        out
    }

    /// Static 640×480 scatter of (mean SEE, outcome) with the fitted line.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 480.0;
        const L: f64 = 70.0;
        const R: f64 = 20.0;
        const T: f64 = 40.0;
        const B: f64 = 60.0;
        let span = |vals: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            let pad = if hi > lo { (hi - lo) * 0.05 } else { 0.5 };
            (lo - pad, hi + pad)
        };
        let (x0, x1) = span(&mut self.rows.iter().map(|r| r.see_mean));
        let (y0, y1) = span(&mut self.rows.iter().map(|r| r.outcome));
        let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
        let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="480" viewBox="0 0 640 480">"#
        );
        let _ = writeln!(svg, r#"<rect width="640" height="480" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<line x1="{L}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
            H - B,
            W - R
        );
        let _ = writeln!(svg, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
        for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
            let _ = writeln!(
                svg,
                r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{v:.4}</text>"#,
                H - B + 16.0
            );
        }
        for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{y:.2}" font-size="11" text-anchor="end">{v:.4}</text>"#,
                L - 6.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">mean SEE</text>"#,
            (L + W - R) / 2.0,
            H - 15.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="18" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 18 {:.2})">outcome</text>"#,
            (T + H - B) / 2.0,
            (T + H - B) / 2.0
        );
        let (a, b) = self.fitted_line();
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="firebrick" stroke-dasharray="6 4"/>"#,
            px(x0),
            py(a + b * x0),
            px(x1),
            py(a + b * x1)
        );
        for r in &self.rows {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>{}</title></circle>"#,
                px(r.see_mean),
                py(r.outcome),
                xml_escape(&r.condition_id)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="24" font-size="14">R = {:.4}, P = {:.3e}</text>"#,
            L,
            self.r,
            self.p
        );
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_svg(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_svg()).map_err(|e| Error::io(path, e))
    }
}
