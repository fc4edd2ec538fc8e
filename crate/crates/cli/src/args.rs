use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sparsegam::path::Criterion;
use sparsegam::splines::KnotPlacement;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sparsegam", version, about = "Sparse additive models with pairwise interactions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the regularization path, select a model and write all artifacts.
    Fit(Box<FitArgs>),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Evaluation tables for a saved model on a labelled data set.
    Report(ReportArgs),
}

#[derive(Debug, Default, Args)]
pub struct FitArgs {
    /// TOML file supplying any of the settings below; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    /// Comma-separated columns to ignore.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Option<Vec<String>>,
    #[arg(long)]
    pub id_column: Option<String>,
    /// Train,validation,test fractions.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[arg(long)]
    pub knots_main: Option<usize>,
    /// Knots per axis of an interaction surface.
    #[arg(long)]
    pub knots_interaction: Option<usize>,
    /// `quantile` or `uniform-on-range`.
    #[arg(long)]
    pub knot_placement: Option<String>,
    /// Number of λ1 values.
    #[arg(long)]
    pub grid_l1: Option<usize>,
    /// Number of λ2 values.
    #[arg(long)]
    pub grid_l2: Option<usize>,
    #[arg(long)]
    pub lambda1_min: Option<f64>,
    #[arg(long)]
    pub lambda1_max: Option<f64>,
    /// Smallest λ2 as a fraction of λ2_max.
    #[arg(long)]
    pub lambda2_ratio: Option<f64>,
    #[arg(long)]
    pub grid_budget: Option<usize>,
    /// Relative cost of an interaction block.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_cycles: Option<usize>,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Also fit the strong-hierarchy model.
    #[arg(long)]
    pub hierarchy: bool,
    /// Comma-separated rounding thresholds.
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    /// `rmse` or `mae`.
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long)]
    pub max_support: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Memory for cached interaction blocks.
    #[arg(long)]
    pub cache_budget_mb: Option<usize>,
    /// Output directory; defaults to $SPARSEGAM_OUT, then `sparsegam_out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub id_column: Option<String>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the response recorded in the model archive.
    #[arg(long)]
    pub response: Option<String>,
    #[arg(long)]
    pub id_column: Option<String>,
    /// Points per axis of the partial-dependence grids.
    #[arg(long, default_value_t = 50)]
    pub grid_size: usize,
    /// Output directory; defaults to $SPARSEGAM_OUT, then `sparsegam_out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_placement(s: &str) -> CliResult<KnotPlacement> {
    match s {
        "quantile" => Ok(KnotPlacement::Quantile),
        "uniform-on-range" | "uniform" => Ok(KnotPlacement::UniformOnRange),
        other => Err(CliError::Usage(format!("unknown knot placement `{other}`"))),
    }
}

impl FitArgs {
    /// Config file (if any) overlaid with the flags that were given.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        if self.data.is_some() {
            c.data = self.data.clone();
        }
        if self.response.is_some() {
            c.response = self.response.clone();
        }
        set!(self.exclude, c.exclude);
        if self.id_column.is_some() {
            c.id_column = self.id_column.clone();
        }
        if let Some(s) = &self.split {
            c.split = <[f64; 3]>::try_from(s.as_slice())
                .map_err(|_| CliError::Usage(format!("--split needs three fractions, got {}", s.len())))?;
        }
        set!(self.seed, c.seed);
        set!(self.degree, c.spline.degree);
        set!(self.knots_main, c.spline.n_knots_main);
        set!(self.knots_interaction, c.spline.n_knots_interaction_per_axis);
        if let Some(p) = &self.knot_placement {
            c.spline.knot_placement = parse_placement(p)?;
        }
        set!(self.grid_l1, c.grid.n_lambda1);
        if self.grid_l2.is_some() {
            c.grid.n_lambda2 = self.grid_l2;
        }
        set!(self.lambda1_min, c.grid.lambda1_range.0);
        set!(self.lambda1_max, c.grid.lambda1_range.1);
        set!(self.lambda2_ratio, c.grid.lambda2_ratio);
        set!(self.grid_budget, c.grid.budget);
        set!(self.alpha, c.grid.alpha);
        set!(self.tol, c.fit.tol);
        set!(self.max_cycles, c.fit.max_cycles);
        set!(self.max_rounds, c.fit.max_active_set_rounds);
        if self.hierarchy {
            c.hierarchy.enabled = true;
        }
        set!(self.tau_grid, c.hierarchy.tau_grid);
        if let Some(s) = &self.criterion {
            c.criterion = s.parse::<Criterion>()?;
        }
        if self.max_support.is_some() {
            c.max_support = self.max_support;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        set!(self.cache_budget_mb, c.cache_budget_mb);
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn parse(args: &[&str]) -> FitArgs {
        let cli = Cli::try_parse_from(std::iter::once("sparsegam").chain(std::iter::once("fit")).chain(args.iter().copied())).unwrap();
        match cli.command {
            Command::Fit(f) => *f,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_config_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "data = \"a.csv\"\nresponse = \"y\"\nseed = 4\n[grid]\nn_lambda1 = 3\n").unwrap();
        let path = f.path().to_str().unwrap().to_string();
        let c = parse(&["--config", &path, "--seed", "9", "--split", "0.6,0.2,0.2", "--hierarchy", "--tau-grid", "0.3,0.6"])
            .resolve()
            .unwrap();
        assert_eq!(c.data.as_deref(), Some(std::path::Path::new("a.csv")));
        assert_eq!(c.seed, 9);
        assert_eq!(c.grid.n_lambda1, 3);
        assert_eq!(c.split, [0.6, 0.2, 0.2]);
        assert!(c.hierarchy.enabled);
        assert_eq!(c.hierarchy.tau_grid, vec![0.3, 0.6]);
    }

    #[test]
    fn bad_split_is_a_usage_error() {
        let e = parse(&["--split", "0.5,0.5"]).resolve().unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = parse(&["--knot-placement", "random"]).resolve().unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = parse(&["--criterion", "r2"]).resolve().unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
