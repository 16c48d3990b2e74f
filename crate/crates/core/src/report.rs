//! Report rendering for the command-line driver.

use std::fmt::Write as _;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: impl Into<String>, columns: &[&str]) -> Self {
        Table {
            title: title.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:>w$}"))
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        let _ = writeln!(out, "{}", line(&self.columns));
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        let _ = writeln!(out, "{}", rule.join("  "));
        for row in &self.rows {
            let _ = writeln!(out, "{}", line(row));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }
}

/// Which embedded check failed; doubles as the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckFailure {
    LatticeTable = 10,
    Straddle = 11,
    Bilateral = 12,
    AdamwSkew = 13,
    Deploy = 14,
}

impl CheckFailure {
    pub fn exit_code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub command: &'static str,
    pub seed: u64,
    pub lines: Vec<String>,
    pub tables: Vec<Table>,
    /// Command-specific body; `command` and `seed` are added on render.
    pub json: serde_json::Value,
    pub failed: Option<CheckFailure>,
}

impl Report {
    pub fn new(command: &'static str, seed: u64) -> Self {
        Report {
            command,
            seed,
            lines: Vec::new(),
            tables: Vec::new(),
            json: serde_json::Value::Object(Default::default()),
            failed: None,
        }
    }

    pub fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Text => {
                let mut out = format!("epochal {} (seed {})\n", self.command, self.seed);
                for l in &self.lines {
                    out.push_str(l);
                    out.push('\n');
                }
                for t in &self.tables {
                    out.push('\n');
                    out.push_str(&t.to_text());
                }
                out
            }
            Format::Csv => {
                let mut out = format!("# epochal {} seed={}\n", self.command, self.seed);
                for (i, t) in self.tables.iter().enumerate() {
                    if self.tables.len() > 1 {
                        if i > 0 {
                            out.push('\n');
                        }
                        let _ = writeln!(out, "# {}", t.title);
                    }
                    out.push_str(&t.to_csv());
                }
                out
            }
            Format::Json => {
                let mut body = serde_json::Map::new();
                body.insert("command".into(), self.command.into());
                body.insert("seed".into(), self.seed.into());
                if let serde_json::Value::Object(m) = &self.json {
                    body.extend(m.clone());
                }
                body.insert(
                    "check".into(),
                    match self.failed {
                        None => "pass".into(),
                        Some(f) => serde_json::to_value(f).expect("enum serializes"),
                    },
                );
                let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(body)).expect("json");
                s.push('\n');
                s
            }
        }
    }
}
