//! Command-line front end. Every command prints one `key=value` summary line
//! on stdout; diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::dataset::{generate_synthetic, load_csv, SynthSpec};
use crate::error::{Error, Result};
use crate::harness::{
    read_summary, run_nested_cv, scaling_experiment, write_report, write_scaling, ExperimentConfig,
    FittedModel, ModelKind, ModelParams,
};
use crate::metrics::{harrell_c, lower_quantile, top_fraction_metrics, uno_c};
use crate::preprocess::{apply_preprocessor, fit_preprocessor};

#[derive(Debug, Parser)]
#[command(name = "survbench", version, about = "Survival models and nested cross-validation benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic dataset from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the true risk score of every row.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Fit a preprocessing plan on one file and apply it to another.
    Preprocess {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        apply: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Where to write the preprocessed `--apply` data.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        biochemical: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit one model with fixed hyperparameters.
    Fit {
        #[arg(long)]
        model: String,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a fitted model on a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training data for the censoring weights of Uno's C; defaults to `--data`.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2")]
        fractions: Vec<f64>,
    },
    /// Nested cross-validation from a config file.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Nested cross-validation on subsamples of several sizes.
    Scale {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Print the summary table of a finished run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn summary(stdout: &mut dyn Write, pairs: &[(&str, String)]) -> Result<()> {
    let line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(stdout, "{}", line.join(" "))?;
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn output_dir(out: Option<PathBuf>, config: &ExperimentConfig) -> Result<PathBuf> {
    out.or_else(|| config.output_dir.clone())
        .ok_or_else(|| Error::invalid("no output directory: pass --out or set output_dir"))
}

/// Builds grid parameters from a model kind and a loose JSON object.
pub fn model_params(kind: &str, params: Value) -> Result<ModelParams> {
    let kind = ModelKind::parse(kind)?;
    let Value::Object(mut obj) = params else {
        return Err(Error::invalid("params must be a JSON object"));
    };
    let tag = match kind {
        ModelKind::GbtLeafWise | ModelKind::GbtDepthWise => {
            let (policy, key) = if kind == ModelKind::GbtLeafWise {
                ("leaf_wise", "num_leaves")
            } else {
                ("depth_wise", "max_depth")
            };
            if !obj.contains_key("policy") {
                let v = obj.remove(key).ok_or_else(|| Error::invalid(format!("params need '{key}'")))?;
                obj.insert("policy".into(), serde_json::json!({ policy: { key: v } }));
            }
            "gbt"
        }
        other => other.name(),
    };
    obj.insert("model".into(), Value::String(tag.into()));
    serde_json::from_value(Value::Object(obj)).map_err(|e| Error::invalid(format!("bad params: {e}")))
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth { spec, out, oracle } => {
            let spec: SynthSpec = serde_json::from_value(read_json(&spec)?)?;
            let draw = generate_synthetic(&spec)?;
            draw.dataset.write_csv(&out)?;
            if let Some(path) = oracle {
                let mut text = String::from("oracle_risk\n");
                for r in &draw.oracle_risk {
                    text.push_str(&format!("{r}\n"));
                }
                fs::write(path, text)?;
            }
            summary(stdout, &[
                ("command", "synth".into()),
                ("rows", draw.dataset.n_rows().to_string()),
                ("events", draw.dataset.n_events().to_string()),
                ("out", out.display().to_string()),
            ])
        }
        Command::Preprocess { train, apply, plan, out, biochemical, seed } => {
            let train_ds = load_csv(&train)?;
            let (fitted, report) = fit_preprocessor(&train_ds, &biochemical, seed)?;
            fs::write(&plan, fitted.to_json()?)?;
            let target = load_csv(&apply)?;
            let (applied, applied_report) = apply_preprocessor(&fitted, &target)?;
            for e in &applied_report.dropped_rows_outlier {
                eprintln!("excluded row {}: {}", e.row, e.reason);
            }
            if let Some(path) = &out {
                applied.write_csv(path)?;
            }
            summary(stdout, &[
                ("command", "preprocess".into()),
                ("kept_columns", fitted.kept_columns.len().to_string()),
                ("dropped_missing_columns", report.dropped_columns_missingness.len().to_string()),
                ("dropped_variance_columns", report.dropped_columns_variance.len().to_string()),
                ("dropped_correlation_columns", report.dropped_columns_correlation.len().to_string()),
                ("rows_out", applied.n_rows().to_string()),
                ("rows_excluded", applied_report.dropped_rows_outlier.len().to_string()),
            ])
        }
        Command::Fit { model, params, data, out, seed } => {
            let params = match params {
                Some(p) => read_json(&p)?,
                None => Value::Object(Default::default()),
            };
            let point = model_params(&model, params)?;
            let ds = load_csv(&data)?;
            let fitted = point.fit(&ds, seed)?;
            fs::write(&out, fitted.to_json()?)?;
            let c = harrell_c(&ds.time, &ds.event, &fitted.predict(&ds.features)?)?;
            summary(stdout, &[
                ("command", "fit".into()),
                ("model", model),
                ("rows", ds.n_rows().to_string()),
                ("train_harrell_c", c.to_string()),
                ("out", out.display().to_string()),
            ])
        }
        Command::Evaluate { model, data, train, tau, fractions } => {
            let fitted = FittedModel::from_json(&fs::read_to_string(&model)?)?;
            let ds = load_csv(&data)?;
            let train_ds = match &train {
                Some(p) => load_csv(p)?,
                None => ds.clone(),
            };
            let risk = fitted.predict(&ds.features)?;
            let tau = tau.unwrap_or_else(|| lower_quantile(&ds.time, 0.95));
            let mut pairs = vec![
                ("command", "evaluate".to_string()),
                ("rows", ds.n_rows().to_string()),
                ("harrell_c", harrell_c(&ds.time, &ds.event, &risk)?.to_string()),
            ];
            match uno_c(&train_ds.time, &train_ds.event, &ds.time, &ds.event, &risk, tau) {
                Ok(u) => pairs.push(("uno_c", u.to_string())),
                Err(e) => eprintln!("uno_c skipped: {e}"),
            }
            pairs.push(("tau", tau.to_string()));
            let mut group_pairs = Vec::new();
            for f in fractions {
                match top_fraction_metrics(&ds.time, &ds.event, &risk, f, tau) {
                    Ok(g) => {
                        group_pairs.push((format!("sensitivity@{f}"), g.sensitivity));
                        group_pairs.push((format!("specificity@{f}"), g.specificity));
                        group_pairs.push((format!("hazard_ratio@{f}"), g.hazard_ratio));
                        group_pairs.push((format!("delta_rmst@{f}"), g.delta_rmst));
                        group_pairs.push((format!("logrank_p@{f}"), g.logrank_p));
                    }
                    Err(e) => eprintln!("group metrics at fraction {f} skipped: {e}"),
                }
            }
            let mut line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            line.extend(group_pairs.iter().map(|(k, v)| format!("{k}={v}")));
            writeln!(stdout, "{}", line.join(" "))?;
            Ok(())
        }
        Command::Cv { config, out, threads } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output_dir(out, &cfg)?;
            eprintln!("running nested cv with {threads} thread(s)");
            let report = run_nested_cv(&cfg, threads)?;
            write_report(&report, &dir, cfg.record_timing)?;
            let valid = report.folds.iter().filter(|r| r.valid).count();
            summary(stdout, &[
                ("command", "cv".into()),
                ("rows", report.size.to_string()),
                ("results", report.folds.len().to_string()),
                ("valid", valid.to_string()),
                ("fits", report.n_fits.to_string()),
                ("out", dir.display().to_string()),
            ])
        }
        Command::Scale { config, sizes, out, threads } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output_dir(out, &cfg)?;
            let ds = cfg.load_dataset()?;
            let reports = scaling_experiment(&cfg, &ds, &sizes, threads)?;
            write_scaling(&reports, &cfg, &dir)?;
            let sizes: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
            summary(stdout, &[
                ("command", "scale".into()),
                ("sizes", sizes.join(",")),
                ("fits", reports.iter().map(|r| r.n_fits).sum::<usize>().to_string()),
                ("out", dir.display().to_string()),
            ])
        }
        Command::Report { input, format } => {
            let report = read_summary(&input)?;
            match format {
                Format::Json => writeln!(stdout, "{}", serde_json::to_string_pretty(&report.summary)?)?,
                Format::Csv => {
                    writeln!(stdout, "model,feature_set,metric,n_folds,mean,sd,ci_low,ci_high")?;
                    for r in &report.summary {
                        writeln!(
                            stdout,
                            "{},{},{},{},{},{},{},{}",
                            r.model, r.feature_set, r.metric, r.n_folds, r.mean, r.sd, r.ci_low, r.ci_high
                        )?;
                    }
                }
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_from_loose_json() {
        let p = model_params("gbt_leaf_wise", serde_json::json!({"n_estimators": 5, "num_leaves": 7})).unwrap();
        assert_eq!(p.complexity(), 35.0);
        let p = model_params("cox_ridge", serde_json::json!({"alpha": 0.5})).unwrap();
        assert_eq!(p, ModelParams::CoxRidge { alpha: 0.5 });
        assert_eq!(model_params("cox_plain", serde_json::json!({})).unwrap(), ModelParams::CoxPlain);
        assert!(model_params("nope", serde_json::json!({})).is_err());
        assert!(model_params("gbt_depth_wise", serde_json::json!({"n_estimators": 5})).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let mut out = Vec::new();
        assert_eq!(run(["survbench", "cv", "--bogus"], &mut out), 1);
        assert_eq!(run(["survbench"], &mut out), 1);
        assert_eq!(run(["survbench", "--help"], &mut out), 0);
    }
}
