use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::Value;

use lifelong_core::deltaiot::DriftProfile;
use lifelong_core::scenario::{self, Case, ScenarioConfig, Summary, Variant};

#[derive(Parser)]
#[command(name = "lifelong", version, about = "Lifelong self-adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics.csv, summary.json and events.jsonl.
    Run(RunArgs),
    /// Compare summaries of earlier runs against a reference variant.
    Compare {
        /// Run directories (holding summary.json) or summary files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON scenario file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `deltaiot` or `gas`.
    #[arg(long, value_parser = parse_name::<Case>)]
    case: Option<Case>,
    /// e.g. `incremental-with-lll`, `retrain-all`.
    #[arg(long, value_parser = parse_name::<Variant>)]
    variant: Option<Variant>,
    #[arg(long)]
    cycles: Option<u64>,
    /// `none`, `sudden` (the default windows) or `incremental:<slope>[@<start>]`.
    #[arg(long, value_parser = parse_drift)]
    drift: Option<DriftProfile>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cycles between lifelong-loop activations.
    #[arg(long)]
    lll_period: Option<u64>,
    #[arg(long)]
    p_threshold: Option<f64>,
    /// Directory with the gas sensor batch files; synthetic data otherwise.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_name<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_drift(s: &str) -> std::result::Result<DriftProfile, String> {
    match s {
        "none" => Ok(DriftProfile::None),
        "sudden" => Ok(DriftProfile::default_sudden()),
        _ => {
            let spec = s
                .strip_prefix("incremental:")
                .ok_or_else(|| format!("unknown drift {s:?}"))?;
            let (slope, start) = spec.split_once('@').unwrap_or((spec, "0"));
            Ok(DriftProfile::Incremental {
                slope: slope.parse().map_err(|_| format!("bad slope {slope:?}"))?,
                start: start.parse().map_err(|_| format!("bad start {start:?}"))?,
            })
        }
    }
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn field<T: serde::de::DeserializeOwned>(file: &Value, key: &str) -> Result<Option<T>> {
    file.get(key)
        .map(|v| serde_json::from_value(v.clone()).with_context(|| format!("config field {key}")))
        .transpose()
}

/// Case defaults, then the config file, then flags.
fn build_config(args: RunArgs) -> Result<ScenarioConfig> {
    let file: Value = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => Value::Object(Default::default()),
    };
    let case = match args.case {
        Some(c) => c,
        None => field(&file, "case")?.context("--case is required (or `case` in the config file)")?,
    };
    let variant = match args.variant {
        Some(v) => v,
        None => field(&file, "variant")?.context("--variant is required (or `variant` in the config file)")?,
    };
    let mut value = serde_json::to_value(ScenarioConfig::new(case, variant))?;
    merge(&mut value, file);
    let mut config: ScenarioConfig = serde_json::from_value(value).context("invalid scenario config")?;
    config.case = case;
    config.variant = variant;
    if let Some(c) = args.cycles {
        config.cycles = Some(c);
    }
    if let Some(d) = args.drift {
        config.drift = d;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(p) = args.lll_period {
        config.lll.trigger_period = p;
    }
    if let Some(p) = args.p_threshold {
        config.lll.p_threshold = p;
    }
    if let Some(d) = args.dataset_dir {
        config.gas.dataset_dir = Some(d);
    }
    if let Some(o) = args.out {
        config.output = Some(o);
    }
    config.validate()?;
    Ok(config)
}

fn load_summary(path: &Path) -> Result<Summary> {
    let file = if path.is_dir() {
        path.join("summary.json")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(args) => {
            let config = build_config(args)?;
            if config.output.is_none() {
                log::warn!("no --out given; results are only printed");
            }
            let result = scenario::run(&config)?;
            println!("{}", serde_json::to_string_pretty(&result.summary)?);
        }
        Command::Compare { runs, out } => {
            let summaries = runs.iter().map(|p| load_summary(p)).collect::<Result<Vec<_>>>()?;
            let report = serde_json::to_string_pretty(&scenario::compare(&summaries)?)?;
            match out {
                Some(path) => fs::write(&path, report + "\n").with_context(|| format!("writing {}", path.display()))?,
                None => println!("{report}"),
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(case: Option<Case>, variant: Option<Variant>) -> RunArgs {
        RunArgs {
            config: None,
            case,
            variant,
            cycles: None,
            drift: None,
            seed: None,
            lll_period: None,
            p_threshold: None,
            dataset_dir: None,
            out: None,
        }
    }

    #[test]
    fn names_parse_like_the_config_file() {
        assert_eq!(parse_name::<Case>("gas").unwrap(), Case::Gas);
        assert_eq!(parse_name::<Variant>("retrain-all").unwrap(), Variant::RetrainAll);
        assert!(parse_name::<Variant>("retrain_all").is_err());
    }

    #[test]
    fn drift_flag_forms() {
        assert_eq!(parse_drift("none").unwrap(), DriftProfile::None);
        assert_eq!(parse_drift("sudden").unwrap(), DriftProfile::default_sudden());
        assert_eq!(
            parse_drift("incremental:0.5@100").unwrap(),
            DriftProfile::Incremental { slope: 0.5, start: 100 }
        );
        assert_eq!(
            parse_drift("incremental:2").unwrap(),
            DriftProfile::Incremental { slope: 2.0, start: 0 }
        );
        assert!(parse_drift("gradual").is_err());
        assert!(parse_drift("incremental:x").is_err());
    }

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        fs::write(
            &path,
            r#"{"case": "deltaiot", "variant": "incremental-with-lll", "seed": 4, "cycles": 300,
                "lll": {"p_threshold": 0.01}}"#,
        )
        .unwrap();
        let mut a = args(None, None);
        a.config = Some(path);
        a.cycles = Some(1000);
        let c = build_config(a).unwrap();
        assert_eq!(
            (c.case, c.variant, c.seed, c.cycles),
            (Case::Deltaiot, Variant::IncrementalWithLll, 4, Some(1000))
        );
        assert_eq!(c.lll.p_threshold, 0.01);
        assert_eq!(c.lll.trigger_period, 20);
        assert_eq!(c.drift, DriftProfile::default_sudden());
    }

    #[test]
    fn missing_case_and_bad_variant_are_errors() {
        assert!(build_config(args(None, Some(Variant::RetrainAll))).is_err());
        assert!(build_config(args(Some(Case::Gas), Some(Variant::BaselineTrueBest))).is_err());
        assert!(build_config(args(Some(Case::Gas), Some(Variant::ReferenceOffline))).is_ok());
    }
}
