//! AP tables: rows of (group, fraction) by IoU threshold, plus signed deltas.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How AP values in an input are expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApScale {
    /// AP in [0, 1].
    Fraction,
    /// AP in [0, 100].
    Percent,
}

impl ApScale {
    fn to_percent(self, v: f64) -> f64 {
        match self {
            ApScale::Fraction => v * 100.0,
            ApScale::Percent => v,
        }
    }

    fn max(self) -> f64 {
        match self {
            ApScale::Fraction => 1.0,
            ApScale::Percent => 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApRow {
    pub group: String,
    /// Strong-label fraction in (0, 1].
    pub fraction: f64,
    /// AP per threshold in percent; `None` when undefined.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApTable {
    pub thresholds: Vec<f64>,
    pub rows: Vec<ApRow>,
}

/// Round half away from zero to one decimal, absorbing binary noise first.
pub fn round1(v: f64) -> f64 {
    let cleaned = (v * 1e9).round() / 1e9;
    (cleaned * 10.0).round() / 10.0
}

pub fn format_ap(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}", round1(v)),
        None => "-".into(),
    }
}

/// Signed one-decimal difference `to - from`; zero renders as "+0.0".
pub fn format_delta(from: f64, to: f64) -> String {
    let d = round1(to - from);
    if d == 0.0 {
        "+0.0".into()
    } else if d > 0.0 {
        format!("+{d:.1}")
    } else {
        format!("-{:.1}", -d)
    }
}

/// Fraction as a percentage label: 0.01 -> "1%", 0.125 -> "12.5%".
pub fn fraction_label(f: f64) -> String {
    let pct = (f * 100.0 * 1e6).round() / 1e6;
    format!("{pct}%")
}

fn threshold_label(t: f64) -> String {
    format!("IoU={t}")
}

impl ApTable {
    /// Parse `group,fraction,<one column per threshold>` with thresholds taken
    /// from the header (`iou_0.25`, ...). Empty cells and `-` mean undefined.
    pub fn from_csv(text: &str, scale: ApScale) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "group" || &header[1] != "fraction" {
            return Err(Error::Format(
                "AP table header must be group,fraction,iou_<t>...".into(),
            ));
        }
        let thresholds = header
            .iter()
            .skip(2)
            .map(|h| {
                h.strip_prefix("iou_")
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| Error::Format(format!("bad threshold column `{h}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let fraction: f64 = rec[1]
                .parse()
                .map_err(|_| Error::record(i, format!("bad fraction `{}`", &rec[1])))?;
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::record(
                    i,
                    format!("fraction {fraction} outside (0, 1]"),
                ));
            }
            let mut values = Vec::with_capacity(thresholds.len());
            for cell in rec.iter().skip(2) {
                if cell.is_empty() || cell == "-" {
                    values.push(None);
                    continue;
                }
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::record(i, format!("bad AP `{cell}`")))?;
                if !(0.0..=scale.max()).contains(&v) {
                    return Err(Error::record(
                        i,
                        format!("AP {v} outside the declared scale"),
                    ));
                }
                values.push(Some(scale.to_percent(v)));
            }
            rows.push(ApRow {
                group: rec[0].to_string(),
                fraction,
                values,
            });
        }
        Ok(Self { thresholds, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,fraction");
        for t in &self.thresholds {
            let _ = write!(out, ",iou_{t}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.group, r.fraction);
            for v in &r.values {
                let _ = write!(out, ",{}", format_ap(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Deltas between consecutive fractions within each group, in row order.
    pub fn fraction_deltas(&self) -> Vec<(String, f64, f64, Vec<Option<String>>)> {
        let mut out = Vec::new();
        for pair in self.rows.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.group != b.group {
                continue;
            }
            let deltas = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| match (x, y) {
                    (Some(x), Some(y)) => Some(format_delta(*x, *y)),
                    _ => None,
                })
                .collect();
            out.push((a.group.clone(), a.fraction, b.fraction, deltas));
        }
        out
    }

    /// Markdown table with one-decimal values and a list of fraction deltas.
    pub fn render_markdown(&self, title: &str) -> String {
        let mut out = format!("## {title}\n\n| Group | Fraction |");
        for t in &self.thresholds {
            let _ = write!(out, " {} |", threshold_label(*t));
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(self.thresholds.len()));
        out.push('\n');
        let mut last_group: Option<&str> = None;
        for r in &self.rows {
            let group = if last_group == Some(r.group.as_str()) {
                ""
            } else {
                &r.group
            };
            last_group = Some(&r.group);
            let _ = write!(out, "| {group} | {} |", fraction_label(r.fraction));
            for v in &r.values {
                let _ = write!(out, " {} |", format_ap(*v));
            }
            out.push('\n');
        }
        let deltas = self.fraction_deltas();
        if !deltas.is_empty() {
            out.push_str("\nFraction deltas:\n\n");
            for (group, from, to, ds) in deltas {
                let cells: Vec<String> = self
                    .thresholds
                    .iter()
                    .zip(ds)
                    .map(|(t, d)| {
                        format!(
                            "{} {}",
                            threshold_label(*t),
                            d.unwrap_or_else(|| "-".into())
                        )
                    })
                    .collect();
                let _ = writeln!(
                    out,
                    "- {group}, {} -> {}: {}",
                    fraction_label(from),
                    fraction_label(to),
                    cells.join(", ")
                );
            }
        }
        out
    }
}

/// `(group, fraction, formatted delta per threshold)`.
pub type DeltaRow = (String, f64, Vec<Option<String>>);

/// Per-cell deltas `to - from` between two arms with identical row sets.
pub fn arm_deltas(from: &ApTable, to: &ApTable) -> Result<Vec<DeltaRow>> {
    if from.thresholds != to.thresholds {
        return Err(Error::Consistency(
            "arms use different IoU thresholds".into(),
        ));
    }
    let keys = |t: &ApTable| -> Vec<(String, f64)> {
        t.rows
            .iter()
            .map(|r| (r.group.clone(), r.fraction))
            .collect()
    };
    if keys(from) != keys(to) {
        return Err(Error::Consistency("arms have mismatched rows".into()));
    }
    Ok(from
        .rows
        .iter()
        .zip(&to.rows)
        .map(|(a, b)| {
            let ds = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| match (x, y) {
                    (Some(x), Some(y)) => Some(format_delta(*x, *y)),
                    _ => None,
                })
                .collect();
            (a.group.clone(), a.fraction, ds)
        })
        .collect())
}

/// Markdown comparison of two arms, one delta row per (group, fraction).
pub fn render_arm_comparison(
    from_name: &str,
    from: &ApTable,
    to_name: &str,
    to: &ApTable,
) -> Result<String> {
    let rows = arm_deltas(from, to)?;
    let mut out = format!("## {to_name} vs {from_name}\n\n| Group | Fraction |");
    for t in &from.thresholds {
        let _ = write!(out, " {} |", threshold_label(*t));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(from.thresholds.len()));
    out.push('\n');
    for (group, fraction, ds) in rows {
        let _ = write!(out, "| {group} | {} |", fraction_label(fraction));
        for d in ds {
            let _ = write!(out, " {} |", d.unwrap_or_else(|| "-".into()));
        }
        out.push('\n');
    }
    Ok(out)
}
