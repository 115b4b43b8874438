//! TOML application config and its validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::ArmParams;
use crate::dataset::GenConfig;
use crate::ilqg::IlqgConfig;
use crate::muscle::check_rank;
use crate::nn::TrainConfig;

/// Sampling-region size (m) the default experiment is built around.
pub const EXPECTED_REGION: (f64, f64) = (0.50, 0.20);

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Root of all run outputs.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub arm: ArmParams,
    pub gen: GenConfig,
    pub ilqg: IlqgConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}: {}", self.field, self.message)
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl AppConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
            ConfigError::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok((Self::parse(&text, path)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every invariant violation; errors first, in field order.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut error = |field: &str, message: String| {
            out.push(Diagnostic {
                severity: Severity::Error,
                field: field.into(),
                message,
            })
        };
        let a = &self.arm;
        for (name, v) in [
            ("l1", a.l1),
            ("l2", a.l2),
            ("m1", a.m1),
            ("m2", a.m2),
            ("i1", a.i1),
            ("i2", a.i2),
            ("s1", a.s1),
            ("s2", a.s2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                error(&format!("arm.{name}"), format!("must be positive, got {v}"));
            }
        }
        if a.s1 > a.l1 {
            error("arm.s1", "center of mass lies beyond the link".into());
        }
        if a.s2 > a.l2 {
            error("arm.s2", "center of mass lies beyond the link".into());
        }
        let b = a.viscosity_matrix();
        if b.m12 != b.m21 {
            error("arm.viscosity", "must be symmetric".into());
        } else if b.m11 < 0.0 || b.m22 < 0.0 || b.determinant() < 0.0 {
            error("arm.viscosity", "must be positive semidefinite".into());
        }
        if check_rank(&a.gain_matrix()).is_err() {
            error("arm.gains", "must have full row rank 2".into());
        }
        for v in self.gen.violations() {
            error("gen", v);
        }
        for v in self.ilqg.violations() {
            error("ilqg", v);
        }
        for v in self.train.violations() {
            error("train", v);
        }
        let r = &self.gen.region;
        let (w, h) = EXPECTED_REGION;
        if (r.width() - w).abs() > 1e-9 || (r.height() - h).abs() > 1e-9 {
            out.push(Diagnostic {
                severity: Severity::Warning,
                field: "gen.region".into(),
                message: format!(
                    "region is {:.2} m x {:.2} m; the reference experiment uses {w:.2} m x {h:.2} m",
                    r.width(),
                    r.height()
                ),
            });
        }
        out
    }

    pub fn errors(&self) -> Vec<Diagnostic> {
        self.diagnostics()
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .collect()
    }
}

/// Parses and checks the file at `path` without side effects.
pub fn validate_config(path: &Path) -> Result<Vec<Diagnostic>, ConfigError> {
    Ok(AppConfig::load(path)?.0.diagnostics())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHIPPED: &str = include_str!("../../../configs/default.toml");

    #[test]
    fn shipped_config_is_default_and_clean() {
        let cfg = AppConfig::parse(SHIPPED, Path::new("default.toml")).unwrap();
        assert_eq!(cfg, AppConfig::default());
        assert!(cfg.diagnostics().is_empty());
    }

    #[test]
    fn taller_region_warns_about_expected_size() {
        let cfg = AppConfig::parse("[gen.region]\ny_max = 0.50\n", Path::new("c.toml")).unwrap();
        let d = cfg.diagnostics();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Warning);
        assert!(d[0].message.contains("0.20 m"));
        assert!(cfg.errors().is_empty());
    }

    #[test]
    fn negative_link_is_an_error() {
        let cfg = AppConfig::parse("[arm]\nl1 = -0.3\n", Path::new("c.toml")).unwrap();
        let errs = cfg.errors();
        assert!(errs.iter().any(|d| d.field == "arm.l1"));
    }

    #[test]
    fn parse_errors_carry_location() {
        let text = "[gen]\nn_train = 10\nbogus = 3\n";
        match AppConfig::parse(text, Path::new("c.toml")).unwrap_err() {
            ConfigError::Parse { line, column, .. } => assert_eq!((line, column), (3, 1)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = AppConfig::default();
        let back = AppConfig::parse(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rank_deficient_gains_are_rejected() {
        let text = "[arm]\ngains = [[1.0, 0, 0, 0, 0, 0], [2.0, 0, 0, 0, 0, 0]]\n";
        let cfg = AppConfig::parse(text, Path::new("c.toml")).unwrap();
        assert!(cfg.errors().iter().any(|d| d.field == "arm.gains"));
    }
}
