//! Built-in experiment configs, one per table shape.

use std::path::Path;

use crate::commands::{execute, summary_lines, write_run};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::report::{comparison_table, write_csv};

pub const PRESETS: &[(&str, &str)] = &[
    ("ablations", include_str!("../presets/ablations.toml")),
    ("allocation", include_str!("../presets/allocation.toml")),
    ("cds-sweep", include_str!("../presets/cds-sweep.toml")),
    ("budget-sweep", include_str!("../presets/budget-sweep.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_text(name: &str) -> Result<&'static str, CliError> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            CliError::Config(format!(
                "unknown preset `{name}` (known: {}, all)",
                preset_names().join(", ")
            ))
        })
}

pub fn preset_config(name: &str) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::from_toml(preset_text(name)?)
}

/// Runs a preset (or `all`) under `out`: full run output in `out/<name>/`
/// and the comparison table as `out/<name>.csv`.
pub fn run_preset(name: &str, out: &Path) -> Result<String, CliError> {
    let names: Vec<&str> = if name == "all" {
        preset_names()
    } else {
        vec![name]
    };
    let mut s = String::new();
    for n in names {
        let mut cfg = preset_config(n)?;
        cfg.output_dir = out.join(n);
        let run = execute(&cfg)?;
        write_run(&cfg.output_dir, &cfg.formats, &run)?;
        let table = out.join(format!("{n}.csv"));
        write_csv(&table, &comparison_table(&run.reports))?;
        s.push_str(&format!("[{n}]\n{}", summary_lines(&run.reports)));
        s.push_str(&format!("table: {}\n", table.display()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for n in preset_names() {
            let c = preset_config(n).unwrap();
            assert_eq!(c.model.n_layers, 2, "{n}");
        }
        assert!(preset_config("nope").is_err());
    }
}
