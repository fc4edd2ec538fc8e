use std::path::{Path, PathBuf};

use ndarray::Array1;
use sparsegam::design::{load_features, BlockIndex};
use sparsegam::evaluation::{
    effective_covariates, mae, partial_dependence, quintile_confusion, rmse, sparsity_pattern, PartialDependence,
};
use sparsegam::model::AdditiveModel;
use sparsegam::model_io::load_archive;

use crate::args::ReportArgs;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{create_dir, write_csv};

pub const PD_DIR: &str = "partial_dependence";

/// Response column of a CSV, `None` where the cell is missing.
fn read_response(path: &Path, response: &str) -> CliResult<Vec<Option<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let col = r
        .headers()
        .map_err(|e| CliError::csv(path, e))?
        .iter()
        .position(|h| h.trim() == response)
        .ok_or_else(|| sparsegam::Error::MissingResponse(response.to_string()))?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let cell = rec.get(col).unwrap_or("").trim();
        out.push(if cell.is_empty() || cell == "NA" {
            None
        } else {
            Some(cell.parse::<f64>().map_err(|_| {
                CliError::Data(format!("line {}: response value `{cell}` is not a number", line + 2))
            })?)
        });
    }
    Ok(out)
}

pub fn write_metrics(dir: &Path, model: &AdditiveModel, y: &Array1<f64>, pred: &Array1<f64>) -> CliResult<()> {
    let support = model.support();
    write_csv(
        &dir.join("metrics.csv"),
        &["n", "rmse", "mae", "n_main", "n_interaction", "n_effective_covariates"],
        [vec![
            y.len().to_string(),
            rmse(y.view(), pred.view())?.to_string(),
            mae(y.view(), pred.view())?.to_string(),
            model.n_main().to_string(),
            model.n_interaction().to_string(),
            effective_covariates(&support).to_string(),
        ]],
    )
}

/// Long-format 5×5 table, quintiles numbered 1 to 5.
pub fn write_quintiles(dir: &Path, y: &Array1<f64>, pred: &Array1<f64>) -> CliResult<()> {
    let q = quintile_confusion(y.view(), pred.view())?;
    let rows = (0..5).flat_map(|a| {
        let q = &q;
        (0..5).map(move |b| {
            vec![
                (a + 1).to_string(),
                (b + 1).to_string(),
                q.counts[[a, b]].to_string(),
                q.row_fractions[[a, b]].to_string(),
            ]
        })
    });
    write_csv(
        &dir.join("quintiles.csv"),
        &["actual_quintile", "predicted_quintile", "count", "row_fraction"],
        rows,
    )
}

/// Coordinate list plus the full indicator matrix.
pub fn write_sparsity(dir: &Path, model: &AdditiveModel) -> CliResult<()> {
    let names = &model.feature_names;
    let support = model.support();
    let coords = support.iter().map(|b| {
        let (r, c, kind) = match *b {
            BlockIndex::Main(j) => (j, j, "main"),
            BlockIndex::Interaction(j, k) => (j, k, "interaction"),
        };
        vec![r.to_string(), c.to_string(), names[r].clone(), names[c].clone(), kind.to_string()]
    });
    write_csv(&dir.join("sparsity.csv"), &["row", "col", "row_name", "col_name", "kind"], coords)?;

    let pattern = sparsity_pattern(&support, model.p());
    let mut header = vec!["covariate"];
    header.extend(names.iter().map(String::as_str));
    let rows = pattern.rows().into_iter().zip(names).map(|(row, name)| {
        std::iter::once(name.clone())
            .chain(row.iter().map(|v| v.to_string()))
            .collect()
    });
    write_csv(&dir.join("sparsity_matrix.csv"), &header, rows)
}

pub fn write_support_ordering(dir: &Path, model: &AdditiveModel, order: &[BlockIndex]) -> CliResult<()> {
    let rows = order.iter().enumerate().filter_map(|(rank, b)| match *b {
        BlockIndex::Main(j) => Some(vec![(rank + 1).to_string(), j.to_string(), model.feature_names[j].clone()]),
        BlockIndex::Interaction(..) => None,
    });
    write_csv(&dir.join("support_ordering.csv"), &["rank", "covariate", "name"], rows)
}

pub fn pd_file_name(block: BlockIndex) -> String {
    match block {
        BlockIndex::Main(j) => format!("main_{j}.csv"),
        BlockIndex::Interaction(j, k) => format!("interaction_{j}_{k}.csv"),
    }
}

fn write_pd(path: &Path, pd: &PartialDependence, model: &AdditiveModel) -> CliResult<()> {
    match pd.block {
        BlockIndex::Main(j) => write_csv(
            path,
            &[model.feature_names[j].as_str(), "value"],
            pd.x.iter().zip(&pd.values).map(|(x, v)| vec![x.to_string(), v.to_string()]),
        ),
        BlockIndex::Interaction(j, k) => {
            let g = pd.x2.len();
            write_csv(
                path,
                &[model.feature_names[j].as_str(), model.feature_names[k].as_str(), "value"],
                pd.values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| vec![pd.x[i / g].to_string(), pd.x2[i % g].to_string(), v.to_string()]),
            )
        }
    }
}

/// One table per selected block in `dir/partial_dependence`.
pub fn write_partial_dependence(dir: &Path, model: &AdditiveModel, grid_size: usize) -> CliResult<usize> {
    let pd_dir = dir.join(PD_DIR);
    create_dir(&pd_dir)?;
    let support = model.support();
    for &b in &support {
        let pd = partial_dependence(model, b, grid_size)?;
        write_pd(&pd_dir.join(pd_file_name(b)), &pd, model)?;
    }
    Ok(support.len())
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<PathBuf> {
    if args.grid_size == 0 {
        return Err(CliError::Usage("--grid-size must be >= 1".into()));
    }
    let archive = load_archive(&args.model)?;
    let model = &archive.model;
    let response = args
        .response
        .clone()
        .or_else(|| archive.response.clone())
        .ok_or_else(|| CliError::Usage("the archive records no response column; pass --response".into()))?;
    let out = RunConfig {
        out: args.out.clone(),
        ..RunConfig::default()
    }
    .out_dir();
    create_dir(&out)?;

    let fill = model.standardizer.means.to_vec();
    let (x, _ids) = load_features(&args.data, &model.feature_names, args.id_column.as_deref(), &fill)?;
    let y = read_response(&args.data, &response)?;
    let keep: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_some()).collect();
    if keep.is_empty() {
        return Err(CliError::Data(format!("no rows with a value for `{response}`")));
    }
    let x = x.select(ndarray::Axis(0), &keep);
    let y: Array1<f64> = keep.iter().map(|&i| y[i].unwrap_or(f64::NAN)).collect();
    let pred = model.predict(x.view())?;

    write_metrics(&out, model, &y, &pred)?;
    write_quintiles(&out, &y, &pred)?;
    write_sparsity(&out, model)?;
    write_support_ordering(&out, model, &archive.support_order)?;
    write_partial_dependence(&out, model, args.grid_size)?;
    Ok(out)
}
