use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

pub const TOOL: &str = "switchode";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to rerun a command: the inputs echo plus the outputs.
#[derive(Debug, Serialize)]
pub struct ResultRecord<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub inputs: Value,
    pub outputs: Value,
}

impl<'a> ResultRecord<'a> {
    pub fn new(command: &'a str, seed: u64, inputs: Value, outputs: Value) -> Self {
        ResultRecord {
            tool: TOOL,
            version: VERSION,
            command,
            seed,
            inputs,
            outputs,
        }
    }
}

pub fn emit(out: Option<&Path>, text: &str) -> io::Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)
        }
        None => io::stdout().lock().write_all(text.as_bytes()),
    }
}

pub fn json(record: &ResultRecord) -> String {
    let mut s = serde_json::to_string_pretty(record).expect("records serialize");
    s.push('\n');
    s
}

/// CSV with a `#` preamble carrying tool, version, command and seed.
pub struct Csv {
    preamble: Vec<String>,
    header: String,
    rows: Vec<String>,
}

impl Csv {
    pub fn new(command: &str, seed: u64, header: &[&str]) -> Self {
        Csv {
            preamble: vec![
                format!("{TOOL} {VERSION}"),
                format!("command: {command}"),
                format!("seed: {seed}"),
            ],
            header: header.join(","),
            rows: Vec::new(),
        }
    }

    pub fn comment(&mut self, line: &str) {
        self.preamble.push(line.to_string());
    }

    pub fn row(&mut self, cells: &[String]) {
        self.rows.push(cells.join(","));
    }

    pub fn finish(self) -> String {
        let mut text = String::new();
        for line in &self.preamble {
            text.push_str(&format!("# {line}\n"));
        }
        text.push_str(&self.header);
        text.push('\n');
        for row in &self.rows {
            text.push_str(row);
            text.push('\n');
        }
        text
    }
}

pub fn cell(v: f64) -> String {
    format!("{v}")
}
