use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use omsim::fock::{mode_rotate, partial_trace, read_snapshot};
use omsim::observables::{wigner, GridSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::CsvOut;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Pgm,
}

/// Beam-splitter rotation applied to a mode pair before tracing out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rotation {
    pub modes: [usize; 2],
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WignerConfig {
    /// Snapshot file, relative to the config file.
    pub snapshot: PathBuf,
    pub mode: usize,
    #[serde(default)]
    pub rotation: Option<Rotation>,
    pub grid: GridSpec,
    #[serde(default)]
    pub format: Format,
}

pub fn run(cfg: &WignerConfig, config_path: &Path) -> CliResult<Vec<u8>> {
    let path = config_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&cfg.snapshot);
    let file = File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let (header, mut rho) = read_snapshot(BufReader::new(file))?;
    let modes = rho.space().modes();
    if cfg.mode >= modes {
        return Err(CliError::Validation(format!(
            "mode {} out of range for a {modes}-mode snapshot",
            cfg.mode
        )));
    }
    if let Some(r) = cfg.rotation {
        rho = mode_rotate(&rho, (r.modes[0], r.modes[1]), r.angle)?;
    }
    let single = if modes == 1 {
        rho
    } else {
        partial_trace(&rho, &[cfg.mode])?
    };
    let grid = wigner(&single, &cfg.grid)?;
    let mut buf = Vec::new();
    match cfg.format {
        Format::Pgm => grid.write_pgm(&mut buf)?,
        Format::Csv => {
            let mut out = CsvOut::new("wigner", cfg)?;
            out.comment(&format!(
                "snapshot time {:.16e}, frame {}, cutoffs {:?}",
                header.time, header.frame, header.cutoffs
            ));
            out.comment(&format!("integral {:.16e}", grid.integral()));
            let rows = grid.ps.iter().enumerate().flat_map(|(j, &p)| {
                let grid = &grid;
                grid.xs.iter().enumerate().map(move |(i, &x)| {
                    vec![
                        crate::io::num(x),
                        crate::io::num(p),
                        crate::io::num(grid.values[j][i]),
                    ]
                })
            });
            buf = out.table(["x", "p", "W"], rows.collect::<Vec<_>>())?;
        }
    }
    Ok(buf)
}
