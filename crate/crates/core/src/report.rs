//! CSV and plain-text renderings of ranked estimates.

use std::io::Write;

use crate::estimation::ArrivalEstimate;

pub const CSV_HEADER: [&str; 8] = [
    "rank",
    "domain",
    "lambda_per_s",
    "ci_half_width",
    "mean_refresh_period_s",
    "events",
    "observed_seconds",
    "cycles",
];

pub fn write_csv<W: Write>(out: W, rows: &[ArrivalEstimate]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for e in rows {
        w.write_record([
            e.rank.to_string(),
            e.domain.to_string(),
            e.lambda_hat.to_string(),
            e.ci_half_width.to_string(),
            e.mean_refresh_period.map(|p| p.to_string()).unwrap_or_default(),
            e.events.to_string(),
            e.observed_seconds.to_string(),
            e.cycles.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[ArrivalEstimate]) -> String {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Right-aligned table; the domain column is left-aligned.
pub fn text_table(rows: &[ArrivalEstimate]) -> String {
    let header = [
        "rank", "domain", "lambda/s", "+/-", "period_s", "events", "observed_s", "cycles",
    ];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|e| {
            [
                e.rank.to_string(),
                e.domain.to_string(),
                format!("{:.4e}", e.lambda_hat),
                format!("{:.4e}", e.ci_half_width),
                e.mean_refresh_period
                    .map(|p| format!("{p:.1}"))
                    .unwrap_or_else(|| "-".into()),
                e.events.to_string(),
                format!("{:.0}", e.observed_seconds),
                e.cycles.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 1 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = line(&header);
    for row in &body {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        s += &line(&cells);
    }
    s
}
