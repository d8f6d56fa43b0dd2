//! The shipped experiment presets. The TOML files in `presets/` are the source of truth.

use super::config::{parse_config, ConfigError, ExperimentConfig};

pub const PRESET_NAMES: [&str; 3] = ["dynamic-svi", "stochastic-svi", "coupled-svi"];

const DYNAMIC: &str = include_str!("../../../../presets/dynamic-svi.toml");
const STOCHASTIC: &str = include_str!("../../../../presets/stochastic-svi.toml");
const COUPLED: &str = include_str!("../../../../presets/coupled-svi.toml");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PresetError {
    #[error("unknown preset \"{0}\" (known: dynamic-svi, stochastic-svi, coupled-svi)")]
    Unknown(String),
    #[error("preset {name} is invalid: {source}")]
    Invalid { name: String, source: ConfigError },
}

/// The preset's TOML text, comments included.
pub fn preset_source(name: &str) -> Result<&'static str, PresetError> {
    match name {
        "dynamic-svi" => Ok(DYNAMIC),
        "stochastic-svi" => Ok(STOCHASTIC),
        "coupled-svi" => Ok(COUPLED),
        other => Err(PresetError::Unknown(other.to_string())),
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig, PresetError> {
    let text = preset_source(name)?;
    parse_config(text).map_err(|source| PresetError::Invalid { name: name.to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::ProblemConfig;
    use crate::linalg::Matrix;

    #[test]
    fn all_presets_parse_and_round_trip() {
        for name in PRESET_NAMES {
            let c = preset(name).unwrap();
            assert_eq!(c.name.as_deref(), Some(name));
            assert_eq!(parse_config(&c.to_toml()).unwrap(), c, "{name}");
            c.build().unwrap();
        }
        assert!(matches!(preset("nope"), Err(PresetError::Unknown(_))));
    }

    #[test]
    fn preset_values() {
        let d = preset("dynamic-svi").unwrap();
        assert_eq!(d.time_grid.unwrap().delta, 0.1);
        assert_eq!(d.schedule.step_at(0), 1.0);
        assert_eq!(d.stop.epsilon, 1e-6);

        let s = preset("stochastic-svi").unwrap();
        assert_eq!(s.schedule.step_at(0), 0.5);
        assert_eq!(s.seed, Some(1));

        let c = preset("coupled-svi").unwrap();
        match &c.problem {
            ProblemConfig::Coupled(cc) => {
                assert_eq!(cc.own1, Matrix::diag(&[2.0, 1.0]).unwrap());
                assert_eq!(cc.own2, Matrix::diag(&[1.0, 2.0]).unwrap());
            }
            other => panic!("{other:?}"),
        }
        // 0.9 · min(2·1/5, 2·1/5)
        assert!((c.schedule.step_at(0) - 0.9 * 0.4).abs() < 1e-15);
    }
}
