use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use omsim::coeffs::{resonance_detunings, ResonanceKind};
use omsim::model::{validate, SystemParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Parse a JSON config, reporting `file:line:column` on failure.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Validation(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })
}

/// Put both pumps on a resonance at the given central detuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonanceSpec {
    pub kind: ResonanceKind,
    #[serde(rename = "DeltaBar")]
    pub delta_bar: f64,
}

/// Parameters as they appear in every config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub params: SystemParams,
    #[serde(default)]
    pub resonance: Option<ResonanceSpec>,
}

/// Spring-corrected detunings, or the bare splitting when `bare` is set.
pub fn place_on_resonance(
    p: &SystemParams,
    kind: ResonanceKind,
    delta_bar: f64,
    bare: bool,
) -> omsim::Result<SystemParams> {
    if bare {
        Ok(match kind {
            ResonanceKind::BS => p.at_bs_resonance(delta_bar),
            ResonanceKind::PA => p.at_pa_resonance(delta_bar),
        })
    } else {
        Ok(resonance_detunings(kind, delta_bar, p)?.apply(p))
    }
}

impl ParamsSpec {
    /// Validated parameters with any requested resonance applied; weak-coupling
    /// warnings go to stderr.
    pub fn resolve(&self, bare: bool) -> CliResult<SystemParams> {
        let p = match self.resonance {
            Some(r) => place_on_resonance(&self.params, r.kind, r.delta_bar, bare)?,
            None => self.params,
        };
        let report = validate(&p)?;
        for w in report.warnings() {
            eprintln!("warning: {} (margin {:.3e})", w.name, w.margin);
        }
        Ok(p)
    }
}

/// Where a command's main output goes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sink {
    File(PathBuf),
    Stdout,
}

impl Sink {
    /// `--out` wins, then `<out_dir>/<config stem>.<ext>`, then stdout.
    pub fn choose(out: Option<&Path>, out_dir: Option<&Path>, config: &Path, ext: &str) -> Sink {
        match (out, out_dir) {
            (Some(o), _) => Sink::File(o.to_path_buf()),
            (None, Some(dir)) => {
                let stem = config.file_stem().unwrap_or_default();
                Sink::File(dir.join(stem).with_extension(ext))
            }
            (None, None) => Sink::Stdout,
        }
    }

    /// Directory for side files such as snapshots.
    pub fn side_dir(&self, out_dir: Option<&Path>) -> PathBuf {
        match self {
            Sink::File(p) => p
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
            Sink::Stdout => out_dir.map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        }
    }

    /// Stem for side files.
    pub fn stem(&self, config: &Path) -> String {
        let from = match self {
            Sink::File(p) => p.as_path(),
            Sink::Stdout => config,
        };
        from.file_stem()
            .map_or_else(|| "omsim".to_string(), |s| s.to_string_lossy().into_owned())
    }

    /// Write everything at once; files go through a temporary sibling and a
    /// rename so a failure never leaves partial output behind.
    pub fn write(&self, bytes: &[u8]) -> CliResult<()> {
        match self {
            Sink::Stdout => std::io::stdout()
                .write_all(bytes)
                .map_err(|e| CliError::Io(format!("stdout: {e}"))),
            Sink::File(path) => write_atomic(path, bytes),
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

/// 17 significant digits, so values survive a text round trip.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV body preceded by `#` comment lines carrying the version, the command
/// and the fully resolved inputs.
pub struct CsvOut {
    buf: Vec<u8>,
}

impl CsvOut {
    pub fn new<T: Serialize>(command: &str, resolved: &T) -> CliResult<CsvOut> {
        let mut buf = Vec::new();
        let json = serde_json::to_string(resolved)
            .map_err(|e| CliError::Validation(format!("cannot serialize inputs: {e}")))?;
        writeln!(buf, "# omsim {VERSION}").expect("vec write");
        writeln!(buf, "# command: {command}").expect("vec write");
        writeln!(buf, "# resolved: {json}").expect("vec write");
        Ok(CsvOut { buf })
    }

    pub fn comment(&mut self, line: &str) {
        writeln!(self.buf, "# {line}").expect("vec write");
    }

    pub fn table<H, R, S>(mut self, header: H, rows: R) -> CliResult<Vec<u8>>
    where
        H: IntoIterator<Item = S>,
        R: IntoIterator<Item = Vec<String>>,
        S: AsRef<[u8]>,
    {
        {
            let mut w = csv::Writer::from_writer(&mut self.buf);
            w.write_record(header)?;
            for row in rows {
                w.write_record(&row)?;
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        }
        Ok(self.buf)
    }
}
