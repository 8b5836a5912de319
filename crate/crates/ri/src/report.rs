//! Plain-text reports: a config echo, `[metrics]` records and tab-delimited
//! tables, each under a bracketed section header.
//!
//! ```text
//! # ri evaluate
//! [config]
//! seed = 0
//! ...
//! [metrics]
//! name  value  n
//! bs  0.0731  540
//! [table reliability]
//! lower  upper  count  mean_forecast  observed_frequency
//! ...
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

use crate::{Error, RunConfig};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    lines: Vec<String>,
    metrics_open: bool,
}

/// `undefined` for scores that do not exist (e.g. a degenerate table).
pub fn value<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

impl Report {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut r = Report::default();
        r.lines.push(format!("# ri {command}"));
        r.lines.push("[config]".into());
        for (k, v) in cfg.echo() {
            r.lines.push(format!("{k} = {v}"));
        }
        r
    }

    pub fn section(&mut self, name: &str) {
        self.metrics_open = false;
        self.lines.push(format!("[{name}]"));
    }

    pub fn line(&mut self, text: impl Into<String>) {
        self.lines.push(text.into());
    }

    pub fn metric(&mut self, name: &str, v: impl Display, n: usize) {
        if !self.metrics_open {
            self.lines.push("[metrics]".into());
            self.lines.push("name\tvalue\tn".into());
            self.metrics_open = true;
        }
        self.lines.push(format!("{name}\t{v}\t{n}"));
    }

    pub fn table(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) {
        self.metrics_open = false;
        self.lines.push(format!("[table {name}]"));
        self.lines.push(header.join("\t"));
        for row in rows {
            self.lines.push(row.join("\t"));
        }
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// `name → value` from every `[metrics]` section of a rendered report.
pub fn read_metrics(text: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut inside = false;
    for line in text.lines() {
        if line.starts_with('[') {
            inside = line == "[metrics]";
            continue;
        }
        if inside && line != "name\tvalue\tn" {
            let mut parts = line.split('\t');
            if let (Some(k), Some(v)) = (parts.next(), parts.next()) {
                out.insert(k.to_string(), v.to_string());
            }
        }
    }
    out
}

/// Rows of the named table, header first.
pub fn read_table(text: &str, name: &str) -> Option<Vec<Vec<String>>> {
    let header = format!("[table {name}]");
    let mut lines = text.lines().skip_while(|l| *l != header);
    lines.next()?;
    Some(
        lines
            .take_while(|l| !l.starts_with('['))
            .map(|l| l.split('\t').map(str::to_string).collect())
            .collect(),
    )
}
