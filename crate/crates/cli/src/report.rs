//! The JSON report envelope shared by every subcommand, serialized with
//! 17 significant digits on all floating-point values so that reports
//! round-trip bit-faithfully.

use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

/// Version of the report schema below.
pub const SCHEMA_VERSION: u32 = 1;

/// Envelope written by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config_echo: serde_json::Value,
    pub results: serde_json::Value,
    pub warnings: Vec<String>,
    pub wall_clock_seconds: f64,
}

/// Serializes any float through `{:.16e}`: one leading digit plus
/// sixteen fractional digits, enough to reproduce every f64 exactly.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Renders a report as a single-line JSON document with the fixed
/// float format, ending in a newline.
pub fn to_json(report: &Report) -> Result<String, ConfigError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    report
        .serialize(&mut ser)
        .map_err(|e| ConfigError(format!("serializing report: {e}")))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| ConfigError(format!("report is not UTF-8: {e}")))
}

/// Writes the report to `path` in the documented format.
pub fn write_report(report: &Report, path: &std::path::Path) -> Result<(), ConfigError> {
    let text = to_json(report)?;
    std::fs::write(path, text)
        .map_err(|e| ConfigError(format!("writing {}: {e}", path.display())))
}
