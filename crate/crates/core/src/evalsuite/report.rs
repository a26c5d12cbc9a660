use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{ClaspError, Result};

pub const CSV_HEADER: &str = "variant,metric,value,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.variant, r.metric, r.value, r.seed);
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(ClaspError::Corrupt(format!(
            "expected header {CSV_HEADER:?}"
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || ClaspError::Corrupt(format!("bad result line {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ResultRow {
                variant: f[0].to_string(),
                metric: f[1].to_string(),
                value: f[2].parse().map_err(|_| bad())?,
                seed: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Variant-by-metric table of seed means, metrics as columns.
pub fn format_table(rows: &[ResultRow]) -> String {
    let mut metrics: Vec<&str> = Vec::new();
    let mut variants: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
        let c = cells.entry((&r.variant, &r.metric)).or_insert((0.0, 0));
        c.0 += r.value;
        c.1 += 1;
    }
    let vw = variants.iter().map(|v| v.len()).max().unwrap_or(0).max(7);
    let mut s = format!("{:vw$}", "variant");
    for m in &metrics {
        let _ = write!(s, "  {m:>w$}", w = m.len().max(8));
    }
    s.push('\n');
    for v in &variants {
        let _ = write!(s, "{v:vw$}");
        for m in &metrics {
            let w = m.len().max(8);
            match cells.get(&(*v, *m)) {
                Some((sum, n)) => {
                    let _ = write!(s, "  {:>w$.3}", sum / *n as f64);
                }
                None => {
                    let _ = write!(s, "  {:>w$}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}
