use std::path::PathBuf;

use ndarray::Array1;
use sparsegam::block_cd::{BlockFit, FactorCache};
use sparsegam::design::{build_blocks, load_csv, split, standardize, BlockIndex, Dataset, LoadOptions};
use sparsegam::evaluation::{check_strong_hierarchy, effective_covariates, mae, rmse, support_ordering};
use sparsegam::hierarchy::{fit_hierarchy_path, HierarchyPath};
use sparsegam::model::AdditiveModel;
use sparsegam::model_io::{file_hash, save_archive, save_grid_summary, ModelArchive, Provenance};
use sparsegam::path::{build_grid, fit_path, select_model};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{create_dir, opt, write_csv, write_text};

pub const SELECTION_HEADER: [&str; 14] = [
    "model",
    "lambda1",
    "lambda2",
    "tau",
    "n_main",
    "n_interaction",
    "n_effective_covariates",
    "train_rmse",
    "val_rmse",
    "val_mae",
    "test_rmse",
    "test_mae",
    "test_n",
    "converged",
];

pub const HIERARCHY_HEADER: [&str; 7] = [
    "tau",
    "n_main",
    "n_interaction",
    "n_effective_covariates",
    "val_rmse",
    "val_mae",
    "lambda2",
];

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub out_dir: PathBuf,
    /// Whether every emitted model reached its convergence criterion.
    pub converged: bool,
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn scores(model: &AdditiveModel, data: &Dataset) -> CliResult<(f64, f64)> {
    let pred = model.predict_standardized(data.x.view())?;
    Ok((rmse(data.y.view(), pred.view())?, mae(data.y.view(), pred.view())?))
}

fn selection_row(label: &str, tau: Option<f64>, model: &AdditiveModel, s: &Splits) -> CliResult<Vec<String>> {
    let support = model.support();
    let (train_rmse, _) = scores(model, &s.train)?;
    let (val_rmse, val_mae) = scores(model, &s.val)?;
    let (test_rmse, test_mae) = scores(model, &s.test)?;
    Ok(vec![
        label.to_string(),
        model.params.lambda1.to_string(),
        model.params.lambda2.to_string(),
        opt(tau),
        model.n_main().to_string(),
        model.n_interaction().to_string(),
        effective_covariates(&support).to_string(),
        train_rmse.to_string(),
        val_rmse.to_string(),
        val_mae.to_string(),
        test_rmse.to_string(),
        test_mae.to_string(),
        s.test.n().to_string(),
        model.converged.to_string(),
    ])
}

fn hierarchy_rows(path: &HierarchyPath) -> Vec<Vec<String>> {
    path.rows
        .iter()
        .map(|r| {
            vec![
                r.tau.to_string(),
                r.n_main.to_string(),
                r.n_interaction.to_string(),
                r.n_effective_covariates.to_string(),
                r.val_rmse.to_string(),
                r.val_mae.to_string(),
                r.lambda2.to_string(),
            ]
        })
        .collect()
}

/// Full pipeline: load, split, standardize, fit the path, select, optionally
/// fit the hierarchical model, and write every artifact into the output
/// directory.
pub fn cmd_fit(cfg: &RunConfig) -> CliResult<FitOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    write_text(&out.join("run_config.toml"), &cfg.to_toml()?)?;

    let data_path = cfg.data_path()?;
    let response = cfg.response_name()?;
    let (data, load_report) = load_csv(
        data_path,
        &LoadOptions {
            response: response.to_string(),
            exclude: cfg.exclude.clone(),
            id_column: cfg.id_column.clone(),
        },
    )?;
    write_text(&out.join("load_report.txt"), &load_report.to_string())?;

    let [a, b, c] = cfg.split;
    let (train, val, test) = split(&data, (a, b, c), cfg.seed)?;
    let (standardizer, train) = standardize(&train)?;
    let s = Splits {
        val: standardizer.transform_dataset(&val)?,
        test: standardizer.transform_dataset(&test)?,
        train,
    };
    let blocks = build_blocks(
        s.train.x.view(),
        &s.train.feature_names,
        &cfg.spline,
        None,
        cfg.cache_budget_bytes(),
    )?;
    let y_mean = s.train.y.mean().unwrap_or(0.0);
    let yc: Array1<f64> = s.train.y.mapv(|v| v - y_mean);
    let cache = FactorCache::default();

    let mut grid = build_grid(&blocks, yc.view(), &cfg.grid, &cfg.fit, &cache)?;
    eprintln!(
        "fitting {} x {} grid over {} mains and {} interactions ({} training rows)",
        grid.lambda1_values.len(),
        grid.lambda2_values.len(),
        blocks.p(),
        blocks.n_interactions(),
        s.train.n()
    );
    let to_model = |fit: &BlockFit| AdditiveModel::from_fit(fit, &blocks, &standardizer, y_mean);
    let scorer = |fit: &BlockFit| -> sparsegam::Result<(f64, f64)> {
        let model = to_model(fit)?;
        let pred = model.predict_standardized(s.val.x.view())?;
        Ok((rmse(s.val.y.view(), pred.view())?, mae(s.val.y.view(), pred.view())?))
    };
    fit_path(&mut grid, &blocks, yc.view(), &cfg.fit, &cache, &scorer)?;
    save_grid_summary(&grid, out.join("path_summary.csv"))?;
    if grid.n_failed() > 0 {
        eprintln!("warning: {} grid node(s) failed; see NA rows in path_summary.csv", grid.n_failed());
    }

    let (l, m) = select_model(&grid, cfg.criterion, cfg.max_support)?;
    let selected = grid.nodes[&(l, m)].fit().ok_or(sparsegam::Error::EmptyGrid)?;
    let model = to_model(selected)?;
    let supports = grid.row_supports(l);
    let order: Vec<BlockIndex> = support_ordering(supports.iter()).into_iter().map(BlockIndex::Main).collect();
    let provenance = Provenance::new(Some(cfg.seed), Some(file_hash(data_path)?));
    let archive = |model: AdditiveModel| ModelArchive {
        support_order: order.clone(),
        response: Some(response.to_string()),
        ..ModelArchive::new(model, provenance.clone())
    };
    save_archive(&archive(model.clone()), out.join("model.sgm"))?;

    let preds = model.predict(data.x.view())?;
    write_csv(
        &out.join("predictions.csv"),
        &["row_id", "prediction"],
        data.row_ids.iter().zip(preds.iter()).map(|(id, p)| vec![id.clone(), p.to_string()]),
    )?;

    let mut selection = vec![selection_row("l0", None, &model, &s)?];
    let mut converged = model.converged;
    eprintln!(
        "selected lambda1 = {}, lambda2 = {}: {} mains, {} interactions",
        model.params.lambda1,
        model.params.lambda2,
        model.n_main(),
        model.n_interaction()
    );

    if cfg.hierarchy.enabled {
        let path = fit_hierarchy_path(
            &grid,
            l,
            &blocks,
            yc.view(),
            &cfg.hierarchy.options(),
            cfg.criterion,
            &scorer,
            &cache,
        )?;
        write_csv(&out.join("hierarchy_report.csv"), &HIERARCHY_HEADER, hierarchy_rows(&path))?;
        let best = path.best_row();
        let h_model = to_model(&best.fit)?;
        if !check_strong_hierarchy(&h_model.support()) {
            return Err(CliError::Data("hierarchical model violates strong hierarchy".into()));
        }
        save_archive(&archive(h_model.clone()), out.join("model_hierarchy.sgm"))?;
        selection.push(selection_row("hierarchy", Some(best.tau), &h_model, &s)?);
        converged &= h_model.converged;
        eprintln!(
            "hierarchical model at tau = {}: {} mains, {} interactions",
            best.tau,
            h_model.n_main(),
            h_model.n_interaction()
        );
    }
    write_csv(&out.join("selection.csv"), &SELECTION_HEADER, selection)?;
    Ok(FitOutcome { out_dir: out, converged })
}
