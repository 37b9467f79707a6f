//! Line-oriented configuration files: `key = value` entries under
//! bracketed section headers, UTF-8, with `#` starting a comment.
//! Unknown sections or keys are errors so typos cannot silently fall
//! back to defaults; duplicate keys keep the last value and produce a
//! warning that ends up in the emitted report.

use serde::{Deserialize, Serialize};

/// One parsing or validation failure, with the line that caused it
/// where one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Density families the configuration format can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyChoice {
    Binomial2,
    Normal,
}

/// How the null mixture is treated by the test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationChoice {
    Fixed,
    Weights,
    Full,
}

/// `[null]`: the mixture under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSection {
    pub family: FamilyChoice,
    /// Scalar support points of the null mixture.
    pub points: Vec<f64>,
    /// Mixing weights; defaults to equal weights.
    pub weights: Vec<f64>,
    pub estimation: EstimationChoice,
}

/// `[perturbation]`: the component searched for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSection {
    pub family: FamilyChoice,
    /// Search interval for the perturbation location.
    pub lo: f64,
    pub hi: f64,
}

/// `[test]`: level and evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSection {
    pub alpha: f64,
    /// Number of lattice points on the search interval.
    pub grid: usize,
    /// Optional extra exclusion: lattice points closer than this to a
    /// kernel singularity are not placed on the grid.
    pub eps_excl: Option<f64>,
    /// Component cap for sequential model building.
    pub max_components: usize,
}

/// `[mc]`: Monte Carlo controls for the oracle command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSection {
    pub replicates: usize,
    pub seed: u64,
    /// When present, the oracle simulates the finite-sample null at
    /// this sample size instead of the limiting field.
    pub n: Option<usize>,
    pub thresholds: Vec<f64>,
}

/// `[experiment]`: cells of the rejection-rate study; lists multiply
/// into their full product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub models: Vec<u8>,
    pub etas: Vec<f64>,
    pub ns: Vec<usize>,
}

/// `[output]`: where and how reports are written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub path: String,
    pub format: String,
}

/// A fully parsed and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub null: NullSection,
    pub perturbation: PerturbationSection,
    pub test: TestSection,
    pub mc: McSection,
    pub experiment: Option<ExperimentSection>,
    pub output: OutputSection,
    /// Non-fatal parse notes (duplicate keys), echoed into reports.
    #[serde(default)]
    pub warnings: Vec<String>,
}

const SECTIONS: [&str; 6] = ["null", "perturbation", "test", "mc", "experiment", "output"];

fn known_keys(section: &str) -> &'static [&'static str] {
    match section {
        "null" => &["family", "points", "weights", "estimation"],
        "perturbation" => &["family", "lo", "hi"],
        "test" => &["alpha", "grid", "eps_excl", "max_components"],
        "mc" => &["replicates", "seed", "n", "thresholds"],
        "experiment" => &["models", "etas", "ns"],
        "output" => &["path", "format"],
        _ => &[],
    }
}

fn parse_f64(raw: &str, key: &str, line: usize) -> Result<f64, ConfigError> {
    let v: f64 = raw.trim().parse().map_err(|_| {
        ConfigError(format!("line {line}: invalid number for `{key}`: '{}'", raw.trim()))
    })?;
    if !v.is_finite() {
        return Err(ConfigError(format!("line {line}: `{key}` must be finite")));
    }
    Ok(v)
}

fn parse_usize(raw: &str, key: &str, line: usize) -> Result<usize, ConfigError> {
    raw.trim().parse().map_err(|_| {
        ConfigError(format!("line {line}: invalid integer for `{key}`: '{}'", raw.trim()))
    })
}

fn parse_u64(raw: &str, key: &str, line: usize) -> Result<u64, ConfigError> {
    raw.trim().parse().map_err(|_| {
        ConfigError(format!("line {line}: invalid integer for `{key}`: '{}'", raw.trim()))
    })
}

fn parse_f64_list(raw: &str, key: &str, line: usize) -> Result<Vec<f64>, ConfigError> {
    raw.split(',').map(|p| parse_f64(p, key, line)).collect()
}

fn parse_usize_list(raw: &str, key: &str, line: usize) -> Result<Vec<usize>, ConfigError> {
    raw.split(',').map(|p| parse_usize(p, key, line)).collect()
}

fn parse_family(raw: &str, line: usize) -> Result<FamilyChoice, ConfigError> {
    match raw.trim() {
        "binomial2" => Ok(FamilyChoice::Binomial2),
        "normal" => Ok(FamilyChoice::Normal),
        other => Err(ConfigError(format!(
            "line {line}: unknown family '{other}' (expected binomial2 or normal)"
        ))),
    }
}

fn parse_estimation(raw: &str, line: usize) -> Result<EstimationChoice, ConfigError> {
    match raw.trim() {
        "fixed" => Ok(EstimationChoice::Fixed),
        "weights" => Ok(EstimationChoice::Weights),
        "full" => Ok(EstimationChoice::Full),
        other => Err(ConfigError(format!(
            "line {line}: unknown estimation '{other}' (expected fixed, weights, or full)"
        ))),
    }
}

/// Raw `(section, key) -> (value, line)` map plus duplicate warnings.
struct RawConfig {
    entries: std::collections::HashMap<(String, String), (String, usize)>,
    warnings: Vec<String>,
}

impl RawConfig {
    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }
}

fn scan(text: &str) -> Result<RawConfig, ConfigError> {
    let mut entries = std::collections::HashMap::new();
    let mut warnings = Vec::new();
    let mut section: Option<String> = None;
    for (idx, full_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match full_line.find('#') {
            Some(pos) => &full_line[..pos],
            None => full_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(ConfigError(format!(
                    "line {line_no}: unknown section `[{name}]`"
                )));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError(format!(
                "line {line_no}: expected `key = value` or `[section]`, got '{line}'"
            )));
        };
        let Some(section) = &section else {
            return Err(ConfigError(format!(
                "line {line_no}: entry before any `[section]` header"
            )));
        };
        let key = key.trim().to_string();
        if !known_keys(section).contains(&key.as_str()) {
            return Err(ConfigError(format!(
                "line {line_no}: unknown key `{key}` in [{section}]"
            )));
        }
        let slot = (section.clone(), key.clone());
        if let Some((_, first)) = entries.get(&slot) {
            warnings.push(format!(
                "line {line_no}: duplicate key `{key}` in [{section}] (first set on line {first}); last value wins"
            ));
        }
        entries.insert(slot, (value.trim().to_string(), line_no));
    }
    Ok(RawConfig { entries, warnings })
}

fn required(
    raw: &mut RawConfig,
    section: &str,
    key: &str,
) -> Result<(String, usize), ConfigError> {
    raw.take(section, key)
        .ok_or_else(|| ConfigError(format!("missing required key `{key}` in [{section}]")))
}

/// Parses and validates a configuration file, filling documented
/// defaults (grid 401, alpha 0.05, 100000 replicates).
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut raw = scan(text)?;

    let (fam, line) = required(&mut raw, "null", "family")?;
    let null_family = parse_family(&fam, line)?;
    let (pts, line) = required(&mut raw, "null", "points")?;
    let points = parse_f64_list(&pts, "points", line)?;
    if points.is_empty() {
        return Err(ConfigError(format!("line {line}: `points` must be nonempty")));
    }
    let weights = match raw.take("null", "weights") {
        Some((v, line)) => {
            let w = parse_f64_list(&v, "weights", line)?;
            if w.len() != points.len() {
                return Err(ConfigError(format!(
                    "line {line}: {} weights for {} points",
                    w.len(),
                    points.len()
                )));
            }
            w
        }
        None => vec![1.0 / points.len() as f64; points.len()],
    };
    let estimation = match raw.take("null", "estimation") {
        Some((v, line)) => parse_estimation(&v, line)?,
        None => EstimationChoice::Fixed,
    };

    let (fam, line) = required(&mut raw, "perturbation", "family")?;
    let pert_family = parse_family(&fam, line)?;
    let (lo, line) = required(&mut raw, "perturbation", "lo")?;
    let lo = parse_f64(&lo, "lo", line)?;
    let (hi, line) = required(&mut raw, "perturbation", "hi")?;
    let hi = parse_f64(&hi, "hi", line)?;
    if lo >= hi {
        return Err(ConfigError(format!(
            "perturbation interval is empty: lo={lo}, hi={hi}"
        )));
    }

    let alpha = match raw.take("test", "alpha") {
        Some((v, line)) => parse_f64(&v, "alpha", line)?,
        None => 0.05,
    };
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(ConfigError(format!("alpha must lie in (0, 0.5], got {alpha}")));
    }
    let grid = match raw.take("test", "grid") {
        Some((v, line)) => parse_usize(&v, "grid", line)?,
        None => 401,
    };
    if grid < 2 {
        return Err(ConfigError(format!("grid must have at least 2 points, got {grid}")));
    }
    let eps_excl = match raw.take("test", "eps_excl") {
        Some((v, line)) => {
            let e = parse_f64(&v, "eps_excl", line)?;
            if e < 0.0 {
                return Err(ConfigError(format!(
                    "line {line}: eps_excl must be nonnegative"
                )));
            }
            Some(e)
        }
        None => None,
    };
    let max_components = match raw.take("test", "max_components") {
        Some((v, line)) => parse_usize(&v, "max_components", line)?,
        None => 10,
    };
    if max_components == 0 {
        return Err(ConfigError("max_components must be positive".into()));
    }

    let replicates = match raw.take("mc", "replicates") {
        Some((v, line)) => parse_usize(&v, "replicates", line)?,
        None => 100_000,
    };
    if replicates == 0 {
        return Err(ConfigError("replicates must be positive".into()));
    }
    let seed = match raw.take("mc", "seed") {
        Some((v, line)) => parse_u64(&v, "seed", line)?,
        None => 0,
    };
    let n = match raw.take("mc", "n") {
        Some((v, line)) => Some(parse_usize(&v, "n", line)?),
        None => None,
    };
    if n == Some(0) {
        return Err(ConfigError("mc sample size must be positive".into()));
    }
    let thresholds = match raw.take("mc", "thresholds") {
        Some((v, line)) => parse_f64_list(&v, "thresholds", line)?,
        None => vec![1.0, 1.5, 2.0, 2.5, 3.0],
    };
    if thresholds.is_empty() {
        return Err(ConfigError("thresholds must be nonempty".into()));
    }

    let models = raw.take("experiment", "models");
    let etas = raw.take("experiment", "etas");
    let ns = raw.take("experiment", "ns");
    let experiment = match (models, etas, ns) {
        (None, None, None) => None,
        (models, etas, ns) => {
            let (v, line) = models.ok_or_else(|| {
                ConfigError("missing required key `models` in [experiment]".into())
            })?;
            let models = v
                .split(',')
                .map(|p| {
                    p.trim().parse::<u8>().map_err(|_| {
                        ConfigError(format!(
                            "line {line}: invalid integer for `models`: '{}'",
                            p.trim()
                        ))
                    })
                })
                .collect::<Result<Vec<u8>, _>>()?;
            let etas = match etas {
                Some((v, line)) => parse_f64_list(&v, "etas", line)?,
                None => vec![0.0],
            };
            let ns = match ns {
                Some((v, line)) => parse_usize_list(&v, "ns", line)?,
                None => vec![200],
            };
            Some(ExperimentSection { models, etas, ns })
        }
    };

    let path = match raw.take("output", "path") {
        Some((v, _)) => v,
        None => "report.json".to_string(),
    };
    let format = match raw.take("output", "format") {
        Some((v, line)) => {
            if v != "json" {
                return Err(ConfigError(format!(
                    "line {line}: unsupported output format '{v}' (only json)"
                )));
            }
            v
        }
        None => "json".to_string(),
    };

    Ok(RunConfig {
        null: NullSection { family: null_family, points, weights, estimation },
        perturbation: PerturbationSection { family: pert_family, lo, hi },
        test: TestSection { alpha, grid, eps_excl, max_components },
        mc: McSection { replicates, seed, n, thresholds },
        experiment,
        output: OutputSection { path, format },
        warnings: raw.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[null]
family = binomial2
points = 0.5

[perturbation]
family = binomial2
lo = 0.1
hi = 0.9
";

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.null.family, FamilyChoice::Binomial2);
        assert_eq!(c.null.points, vec![0.5]);
        assert_eq!(c.null.weights, vec![1.0]);
        assert_eq!(c.null.estimation, EstimationChoice::Fixed);
        assert_eq!(c.test.alpha, 0.05);
        assert_eq!(c.test.grid, 401);
        assert_eq!(c.test.eps_excl, None);
        assert_eq!(c.mc.replicates, 100_000);
        assert_eq!(c.mc.seed, 0);
        assert_eq!(c.mc.thresholds, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        assert_eq!(c.output.path, "report.json");
        assert_eq!(c.output.format, "json");
        assert!(c.experiment.is_none());
        assert!(c.warnings.is_empty());
    }

    #[test]
    fn alpha_outside_range_is_rejected() {
        let text = format!("{MINIMAL}\n[test]\nalpha = 0.7\n");
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.contains("alpha"), "{err}");
    }

    #[test]
    fn duplicate_key_warns_and_last_wins() {
        let text = format!("{MINIMAL}\n[test]\nalpha = 0.05\nalpha = 0.01\n");
        let c = parse_config(&text).unwrap();
        assert_eq!(c.test.alpha, 0.01);
        assert_eq!(c.warnings.len(), 1);
        assert!(c.warnings[0].contains("duplicate key `alpha`"));
    }

    #[test]
    fn unknown_key_and_section_name_the_culprit() {
        let text = format!("{MINIMAL}\n[test]\nalhpa = 0.05\n");
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.contains("unknown key `alhpa`"), "{err}");
        let text = format!("{MINIMAL}\n[tset]\n");
        let err = parse_config(&text).unwrap_err();
        assert!(err.0.contains("unknown section `[tset]`"), "{err}");
    }

    #[test]
    fn malformed_number_reports_its_line() {
        let text = "[null]\nfamily = binomial2\npoints = 0.5x\n";
        let err = parse_config(text).unwrap_err();
        assert!(err.0.contains("line 3"), "{err}");
        assert!(err.0.contains("points"), "{err}");
    }

    #[test]
    fn missing_required_key_is_an_error() {
        let err = parse_config("[null]\nfamily = binomial2\n").unwrap_err();
        assert!(err.0.contains("missing required key `points`"), "{err}");
    }

    #[test]
    fn comments_and_lists_parse() {
        let text = "\
# full example
[null]
family = normal
points = -2, 2   # two supports
weights = 0.5, 0.5
estimation = full

[perturbation]
family = normal
lo = -4
hi = 4

[experiment]
models = 1, 3
etas = 0, 0.2
ns = 200
";
        let c = parse_config(text).unwrap();
        assert_eq!(c.null.points, vec![-2.0, 2.0]);
        assert_eq!(c.null.estimation, EstimationChoice::Full);
        let e = c.experiment.unwrap();
        assert_eq!(e.models, vec![1, 3]);
        assert_eq!(e.etas, vec![0.0, 0.2]);
        assert_eq!(e.ns, vec![200]);
    }

    #[test]
    fn weight_count_must_match() {
        let text = "[null]\nfamily = binomial2\npoints = 0.3, 0.7\nweights = 1\n\n[perturbation]\nfamily = binomial2\nlo = 0.1\nhi = 0.9\n";
        assert!(parse_config(text).is_err());
    }
}
