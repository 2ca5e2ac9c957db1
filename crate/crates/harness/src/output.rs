//! CSV and SVG emission.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which round-trips
//! every `f64` exactly.

use std::fmt::Write as _;
use std::io;

use sha2::{Digest, Sha256};

use crate::error::HarnessError;

pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// SHA-256 of the configuration text, hex encoded.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub u_s: f64,
    pub mean_u_n: f64,
    pub detail: Vec<f64>,
}

/// Rows of `(swept value, U_s, mean U_n, detail…)`.
///
/// CSV columns: `<variable>,u_s,mean_u_n,<detail columns>,seed,config_hash`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub variable: String,
    pub detail_columns: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub seed: u64,
    pub config_hash: String,
}

impl SweepResult {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec![self.variable.clone(), "u_s".into(), "mean_u_n".into()];
        h.extend(self.detail_columns.iter().cloned());
        h.push("seed".into());
        h.push("config_hash".into());
        h
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![float(r.value), float(r.u_s), float(r.mean_u_n)];
            rec.extend(r.detail.iter().map(|v| float(*v)));
            rec.push(self.seed.to_string());
            rec.push(self.config_hash.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: io::Read>(input: R) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let bad = |m: &str| HarnessError::Format(format!("sweep csv: {m}"));
        if header.len() < 5 || header[1] != "u_s" || header[2] != "mean_u_n" {
            return Err(bad("unexpected header"));
        }
        let k = header.len();
        if header[k - 2] != "seed" || header[k - 1] != "config_hash" {
            return Err(bad("missing seed/config_hash columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
        let mut rows = Vec::new();
        let mut seed = 0;
        let mut config_hash = String::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != k {
                return Err(bad("ragged row"));
            }
            rows.push(SweepRow {
                value: num(&rec[0])?,
                u_s: num(&rec[1])?,
                mean_u_n: num(&rec[2])?,
                detail: (3..k - 2).map(|i| num(&rec[i])).collect::<Result<_, _>>()?,
            });
            seed = rec[k - 2].parse().map_err(|_| bad("bad seed"))?;
            config_hash = rec[k - 1].to_string();
        }
        Ok(Self {
            variable: header[0].clone(),
            detail_columns: header[3..k - 2].to_vec(),
            rows,
            seed,
            config_hash,
        })
    }

    /// True when `values` rise strictly to a single maximum and then fall
    /// strictly, with the maximum strictly inside the sweep.
    pub fn single_interior_max(values: &[f64]) -> bool {
        if values.len() < 3 {
            return false;
        }
        let peak = values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        peak > 0
            && peak < values.len() - 1
            && values[..=peak].windows(2).all(|w| w[1] > w[0])
            && values[peak..].windows(2).all(|w| w[1] < w[0])
    }
}

/// Plain CSV table with a header row.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal line chart. Each series is `(label, points)`.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" text-anchor="middle">{x0:.3}</text>"#, h - pad + 15.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, w - pad, h - pad + 15.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, pad - 4.0, h - pad);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, pad - 4.0, pad + 4.0);
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad - 120.0,
            pad + 15.0 * i as f64,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SweepResult {
        SweepResult {
            variable: "eta".into(),
            detail_columns: vec!["total_quality".into()],
            rows: vec![
                SweepRow { value: 0.1, u_s: 1.0 / 3.0, mean_u_n: -0.0, detail: vec![std::f64::consts::PI] },
                SweepRow { value: 1e-300, u_s: 2.5e17, mean_u_n: 0.7, detail: vec![f64::MIN_POSITIVE] },
            ],
            seed: 42,
            config_hash: config_hash("seed = 42\n"),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = sample();
        let text = s.to_csv().unwrap();
        assert!(text.starts_with("eta,u_s,mean_u_n,total_quality,seed,config_hash\n"));
        let back = SweepResult::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, s);
        for (a, b) in back.rows.iter().zip(&s.rows) {
            assert_eq!(a.u_s.to_bits(), b.u_s.to_bits());
        }
    }

    #[test]
    fn peak_detection() {
        assert!(SweepResult::single_interior_max(&[0.0, 1.0, 2.0, 1.5]));
        assert!(!SweepResult::single_interior_max(&[0.0, 1.0, 2.0]));
        assert!(!SweepResult::single_interior_max(&[0.0, 1.0, 1.0, 0.5]));
        assert!(!SweepResult::single_interior_max(&[0.0, 2.0, 1.0, 1.5, 0.0]));
    }

    #[test]
    fn hash_is_hex_sha256() {
        let h = config_hash("");
        assert_eq!(h, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn chart_has_one_polyline_per_series() {
        let svg = line_chart(
            "U_s <eta>",
            "eta",
            &[("a".into(), vec![(0.0, 0.0), (1.0, 1.0)]), ("b".into(), vec![(0.0, 1.0)])],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("U_s &lt;eta&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
