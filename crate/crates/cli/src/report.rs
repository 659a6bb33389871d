//! Line-oriented reports: `key=value` lines followed by `[section]` CSV tables.

use std::fmt::{Display, Write as _};
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

#[derive(Debug, Default)]
pub struct Report {
    text: String,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut r = Report::default();
        r.kv("command", command);
        r
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        writeln!(self.text, "{key}={value}").unwrap();
        self
    }

    /// Appends pre-formatted `key=value` lines.
    pub fn raw(&mut self, lines: &str) -> &mut Self {
        self.text.push_str(lines);
        if !lines.is_empty() && !lines.ends_with('\n') {
            self.text.push('\n');
        }
        self
    }

    pub fn table<I, R>(&mut self, name: &str, header: &str, rows: I) -> &mut Self
    where
        I: IntoIterator<Item = R>,
        R: Display,
    {
        writeln!(self.text, "[{name}]\n{header}").unwrap();
        for row in rows {
            writeln!(self.text, "{row}").unwrap();
        }
        self
    }

    /// Prints the report and, when given, also writes it to `path`.
    pub fn emit(&self, path: Option<&Path>) -> Result<()> {
        print!("{}", self.text);
        if let Some(p) = path {
            write_file(p, &self.text)?;
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
