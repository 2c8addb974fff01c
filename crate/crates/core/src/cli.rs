//! Command-line front end. Every subcommand reads a JSON config named by
//! `--config`; results go to the paths named in the config, or to stdout.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compiler::{compile_dfcn, CompileOptions};
use crate::conv::Filter;
use crate::error::{Error, Result};
use crate::factor::factorize_filter;
use crate::harness::{approx_rate_run, gradcheck_run, learn_rate_run, slope_fit, ApproxRateConfig, GradcheckConfig, LearnRateConfig, RateTable, RunManifest};
use crate::matrix::Matrix;
use crate::network::format::{load_model, save_model};
use crate::network::{truncate, AffineLayer, Dfcn};

#[derive(Debug, Parser)]
#[command(name = "edcnn", version, about = "Pooled expansive deep convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for sweeps; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run sequentially so results are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a filter into short factors.
    Factorize,
    /// Compile a fully connected network into a pooled convolutional one.
    Compile,
    /// Evaluate a saved model on given points.
    Eval,
    /// Compare backpropagated gradients with finite differences.
    Gradcheck,
    /// Sup-norm error against depth.
    ApproxRate,
    /// Excess risk against sample size.
    LearnRate,
    /// Log-log slope of a rate table.
    Report,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 for usage or validation errors,
/// 2 for numerical failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::invalid("--config <PATH> is required"))?;
    let jobs = if cli.deterministic { 1 } else { cli.jobs };
    match cli.command {
        Command::Factorize => factorize(read_config(path)?),
        Command::Compile => compile(read_config(path)?),
        Command::Eval => eval(read_config(path)?),
        Command::Gradcheck => gradcheck(read_config(path)?),
        Command::ApproxRate => {
            let cfg: SweepConfig<ApproxRateConfig> = read_config(path)?;
            let (table, manifest) = approx_rate_run(&cfg.experiment, jobs)?;
            write_sweep(&cfg, &table, &manifest)
        }
        Command::LearnRate => {
            let cfg: SweepConfig<LearnRateConfig> = read_config(path)?;
            let (table, manifest) = learn_rate_run(&cfg.experiment, jobs)?;
            write_sweep(&cfg, &table, &manifest)
        }
        Command::Report => report(read_config(path)?),
    }
}

fn read_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, path)
}

fn parse_json<C: DeserializeOwned>(text: &str, path: &Path) -> Result<C> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        position: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })
}

fn emit<V: Serialize>(value: &V, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorizeConfig {
    filter: Vec<f64>,
    s: usize,
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct FactorizeOutput {
    s: usize,
    support_bound: usize,
    depth: usize,
    within_depth_bound: bool,
    reconstruction_error: f64,
    factors: Vec<Vec<f64>>,
}

fn factorize(cfg: FactorizeConfig) -> Result<()> {
    let result = factorize_filter(&Filter::new(cfg.filter)?, cfg.s)?;
    let out = FactorizeOutput {
        s: cfg.s,
        support_bound: result.support_bound(),
        depth: result.depth(),
        within_depth_bound: result.within_depth_bound(),
        reconstruction_error: result.reconstruction_error(),
        factors: result.factors().iter().map(|f| f.coeffs().to_vec()).collect(),
    };
    emit(&out, cfg.output.as_deref())
}

/// Fully connected network as plain JSON numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfcnFile {
    pub layers: Vec<DfcnLayerFile>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfcnLayerFile {
    /// Row-major weights, one row per output neuron.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl DfcnFile {
    pub fn to_dfcn(&self) -> Result<Dfcn<f64>> {
        let layers = self
            .layers
            .iter()
            .map(|l| AffineLayer::new(Matrix::from_rows(&l.weights)?, l.bias.clone()))
            .collect::<Result<Vec<_>>>()?;
        Dfcn::new(layers, self.output.clone())
    }

    pub fn from_dfcn(net: &Dfcn<f64>) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| DfcnLayerFile {
                    weights: (0..l.output_dim())
                        .map(|r| (0..l.input_dim()).map(|c| l.weights().get(r, c)).collect())
                        .collect(),
                    bias: l.bias().to_vec(),
                })
                .collect(),
            output: net.output_weights().to_vec(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DfcnSource {
    Path(PathBuf),
    Inline(DfcnFile),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompileConfig {
    /// Inline network or path to a JSON file holding one.
    dfcn: DfcnSource,
    #[serde(default)]
    options: CompileOptions,
    /// Output `.edcnn.json` path.
    model: PathBuf,
    /// Report path; defaults to the model path with `.report.json`.
    report: Option<PathBuf>,
}

fn report_path(model: &Path) -> PathBuf {
    let name = model.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".edcnn.json").or_else(|| name.strip_suffix(".json")).unwrap_or(&name);
    model.with_file_name(format!("{stem}.report.json"))
}

fn compile(cfg: CompileConfig) -> Result<()> {
    let file = match cfg.dfcn {
        DfcnSource::Inline(f) => f,
        DfcnSource::Path(p) => read_config(&p)?,
    };
    let report_out = cfg.report.unwrap_or_else(|| report_path(&cfg.model));
    match compile_dfcn(&file.to_dfcn()?, &cfg.options) {
        Ok((net, report)) => {
            save_model(&net, &cfg.model)?;
            emit(&report, Some(&report_out))
        }
        Err(Error::Compile(report)) => {
            emit(&*report, Some(&report_out))?;
            Err(Error::Compile(report))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    model: PathBuf,
    points: Vec<Vec<f64>>,
    /// Clamp outputs to `[-clamp, clamp]`.
    clamp: Option<f64>,
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    values: Vec<f64>,
}

fn eval(cfg: EvalConfig) -> Result<()> {
    let net = load_model::<f64>(&cfg.model)?;
    if let Some(m) = cfg.clamp {
        if !(m > 0.0) {
            return Err(Error::invalid("clamp must be positive"));
        }
    }
    let values = cfg
        .points
        .iter()
        .map(|x| {
            let y = net.eval(x)?;
            Ok(cfg.clamp.map_or(y, |m| truncate(y, m)))
        })
        .collect::<Result<Vec<f64>>>()?;
    emit(&EvalOutput { values }, cfg.output.as_deref())
}

#[derive(Debug, Deserialize)]
struct GradcheckFile {
    #[serde(flatten)]
    check: GradcheckConfig,
    output: Option<PathBuf>,
}

fn gradcheck(cfg: GradcheckFile) -> Result<()> {
    let summary = gradcheck_run(&cfg.check)?;
    emit(&summary, cfg.output.as_deref())?;
    if summary.passed {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient relative error {:e} exceeds {:e}",
            summary.max_rel_error, summary.tolerance
        )))
    }
}

#[derive(Debug, Deserialize)]
struct SweepConfig<C> {
    #[serde(flatten)]
    experiment: C,
    /// CSV output; printed to stdout when absent.
    table: Option<PathBuf>,
    /// Manifest output; defaults to the table path with `.manifest.json`.
    manifest: Option<PathBuf>,
}

fn write_sweep<C>(cfg: &SweepConfig<C>, table: &RateTable, manifest: &RunManifest) -> Result<()> {
    match &cfg.table {
        Some(p) => {
            table.save(p)?;
            let m = cfg.manifest.clone().unwrap_or_else(|| p.with_extension("manifest.json"));
            manifest.save(m)
        }
        None => {
            table.write_csv(std::io::stdout().lock())?;
            if let Some(m) = &cfg.manifest {
                manifest.save(m)?;
            }
            Ok(())
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportConfig {
    table: PathBuf,
    output: Option<PathBuf>,
}

fn report(cfg: ReportConfig) -> Result<()> {
    let fit = slope_fit(&RateTable::load(&cfg.table)?)?;
    emit(&fit, cfg.output.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["edcnn"]), 1);
        assert_eq!(run(["edcnn", "frobnicate"]), 1);
        assert_eq!(run(["edcnn", "compile", "--bogus"]), 1);
        assert_eq!(run(["edcnn", "compile"]), 1);
        assert_eq!(run(["edcnn", "--help"]), 0);
    }

    #[test]
    fn report_paths() {
        assert_eq!(report_path(Path::new("out/net.edcnn.json")), PathBuf::from("out/net.report.json"));
        assert_eq!(report_path(Path::new("net.json")), PathBuf::from("net.report.json"));
        assert_eq!(report_path(Path::new("net")), PathBuf::from("net.report.json"));
    }

    #[test]
    fn dfcn_file_round_trip() {
        let text = r#"{"layers":[{"weights":[[1.0,-2.0],[0.5,0.0],[0.0,3.0]],"bias":[0.1,0.2,-0.3]}],"output":[1.0,2.0,-1.0]}"#;
        let file: DfcnFile = serde_json::from_str(text).unwrap();
        let net = file.to_dfcn().unwrap();
        assert_eq!(net.input_dim(), 2);
        let back = DfcnFile::from_dfcn(&net).to_dfcn().unwrap();
        assert_eq!(back.eval(&[0.3, 0.7]).unwrap(), net.eval(&[0.3, 0.7]).unwrap());
        let bad = r#"{"layers":[{"weights":[[1.0],[1.0,2.0]],"bias":[0,0]}],"output":[1,1]}"#;
        let file: DfcnFile = serde_json::from_str(bad).unwrap();
        assert!(file.to_dfcn().is_err());
    }
}
