//! Model archives and path-summary export.
//!
//! An archive is plain text:
//!
//! ```text
//! SPARSEGAM-MODEL 1
//! sha256 <hex digest of the payload>
//! <JSON payload>
//! ```
//!
//! Floats in the payload use shortest round-trip decimal form, so a loaded
//! model predicts bit-identically to the saved one.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::BlockIndex;
use crate::error::{Error, Result};
use crate::model::AdditiveModel;
use crate::path::{NodeOutcome, PathGrid};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "SPARSEGAM-MODEL";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    /// Hex SHA-256 of the training data file.
    pub data_hash: Option<String>,
    /// Seconds since the epoch, taken from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: Option<u64>,
}

impl Provenance {
    pub fn new(seed: Option<u64>, data_hash: Option<String>) -> Self {
        let timestamp = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.trim().parse().ok());
        Self {
            seed,
            data_hash,
            timestamp,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file's bytes, for provenance records.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format_version: u32,
    pub model: AdditiveModel,
    pub provenance: Provenance,
    /// Main effects in order of entry along the regularization path.
    #[serde(default)]
    pub support_order: Vec<BlockIndex>,
    /// Name of the response column in the training data.
    #[serde(default)]
    pub response: Option<String>,
}

impl ModelArchive {
    pub fn new(model: AdditiveModel, provenance: Provenance) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model,
            provenance,
            support_order: Vec::new(),
            response: None,
        }
    }

    pub fn to_text(&self) -> Result<String> {
        let payload = serde_json::to_string(self).map_err(|e| Error::Archive(e.to_string()))?;
        Ok(format!(
            "{MAGIC} {}\nsha256 {}\n{payload}",
            self.format_version,
            sha256_hex(payload.as_bytes())
        ))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header, rest) = text.split_once('\n').unwrap_or((text, ""));
        let version = match header.strip_prefix(MAGIC) {
            Some(v) => v.trim(),
            None if MAGIC.starts_with(header) && !header.is_empty() => return Err(Error::Checksum),
            None => return Err(Error::Archive("missing archive header".into())),
        };
        if version.is_empty() {
            return Err(Error::Checksum);
        }
        let found: u32 = version
            .parse()
            .map_err(|_| Error::Archive(format!("bad version field `{version}`")))?;
        if found != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                supported: FORMAT_VERSION,
            });
        }
        let (sum_line, payload) = rest.split_once('\n').ok_or(Error::Checksum)?;
        let digest = sum_line.strip_prefix("sha256 ").ok_or(Error::Checksum)?;
        if digest.trim() != sha256_hex(payload.as_bytes()) {
            return Err(Error::Checksum);
        }
        let archive: ModelArchive = serde_json::from_str(payload).map_err(|e| Error::Archive(e.to_string()))?;
        if archive.format_version != found {
            return Err(Error::Archive(format!(
                "header version {found} disagrees with payload version {}",
                archive.format_version
            )));
        }
        Ok(archive)
    }
}

pub fn save_archive(archive: &ModelArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, archive.to_text()?).map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<ModelArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // a cut inside a multi-byte character is still a truncation
    let text = String::from_utf8(bytes).map_err(|_| Error::Checksum)?;
    ModelArchive::from_text(&text)
}

/// Saves with empty provenance.
pub fn save_model(model: &AdditiveModel, path: impl AsRef<Path>) -> Result<()> {
    save_archive(&ModelArchive::new(model.clone(), Provenance::default()), path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AdditiveModel> {
    Ok(load_archive(path)?.model)
}

pub const GRID_SUMMARY_HEADER: [&str; 7] = [
    "lambda1",
    "lambda2",
    "n_main",
    "n_interaction",
    "train_rmse",
    "val_rmse",
    "val_mae",
];

/// One row per grid node in (λ1, λ2) index order; failed nodes get `NA`
/// metrics.
pub fn write_grid_summary<W: Write>(grid: &PathGrid, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GRID_SUMMARY_HEADER)?;
    for (&(l, m), node) in &grid.nodes {
        let mut rec = vec![grid.lambda1_values[l].to_string(), grid.lambda2_values[m].to_string()];
        match node {
            NodeOutcome::Fitted { metrics, .. } => rec.extend([
                metrics.n_main.to_string(),
                metrics.n_interaction.to_string(),
                metrics.train_rmse.to_string(),
                metrics.val_rmse.to_string(),
                metrics.val_mae.to_string(),
            ]),
            NodeOutcome::Failed(_) => rec.extend(std::iter::repeat_n("NA".to_string(), 5)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_grid_summary(grid: &PathGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_grid_summary(grid, std::io::BufWriter::new(file)).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_cd::{fit, BlockFit, FactorCache, FitOptions, PenaltyParams};
    use crate::design::{build_blocks, standardize, Dataset};
    use crate::path::NodeMetrics;
    use crate::splines::SplineConfig;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn fitted_model() -> (AdditiveModel, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 120;
        let x: Array2<f64> = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..3.0));
        let y = Array1::from_shape_fn(n, |i| x[[i, 0]].powi(2) + x[[i, 1]] * x[[i, 2]] + 0.1 * rng.random_range(-1.0..1.0));
        let data = Dataset::from_arrays(x, y).unwrap();
        let (s, z) = standardize(&data).unwrap();
        let cfg = SplineConfig {
            n_knots_main: 5,
            n_knots_interaction_per_axis: 4,
            ..SplineConfig::default()
        };
        let blocks = build_blocks(z.x.view(), &z.feature_names, &cfg, None, 1 << 24).unwrap();
        let y_mean = z.y.mean().unwrap();
        let yc = z.y.mapv(|v| v - y_mean);
        let params = PenaltyParams::new(1e-4, 1e-4, 1.0).unwrap();
        let f = fit(&blocks, yc.view(), &params, &FitOptions::default(), None, &FactorCache::default()).unwrap();
        let model = AdditiveModel::from_fit(&f, &blocks, &s, y_mean).unwrap();
        let probe = Array2::from_shape_fn((100, 3), |_| rng.random_range(-4.0..5.0));
        (model, probe)
    }

    #[test]
    fn round_trip_predicts_identically() {
        let (model, probe) = fitted_model();
        assert!(!model.coefficients.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sgm");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        let a = model.predict(probe.view()).unwrap();
        let b = back.predict(probe.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn provenance_survives() {
        let (model, _) = fitted_model();
        let mut a = ModelArchive::new(model, Provenance { seed: Some(7), data_hash: Some(sha256_hex(b"abc")), timestamp: Some(1) });
        a.support_order = vec![BlockIndex::Main(2), BlockIndex::Main(0)];
        a.response = Some("y".into());
        let back = ModelArchive::from_text(&a.to_text().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(
            back.provenance.data_hash.as_deref(),
            Some("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
        );
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let (model, _) = fitted_model();
        let text = ModelArchive::new(model, Provenance::default()).to_text().unwrap();
        for cut in [text.len() - 1, text.len() / 2, 30, 20, 5] {
            let err = ModelArchive::from_text(&text[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checksum), "cut {cut}: {err}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sgm");
        fs::write(&path, &text.as_bytes()[..text.len() - 10]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Checksum)));
    }

    #[test]
    fn future_version_is_rejected() {
        let (model, _) = fitted_model();
        let text = ModelArchive::new(model, Provenance::default()).to_text().unwrap();
        let bumped = text.replacen("SPARSEGAM-MODEL 1", "SPARSEGAM-MODEL 2", 1);
        match ModelArchive::from_text(&bumped) {
            Err(Error::VersionMismatch { found: 2, supported: 1 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn foreign_file_is_malformed() {
        assert!(matches!(ModelArchive::from_text("a,b,c\n1,2,3\n"), Err(Error::Archive(_))));
        assert!(matches!(load_model("/nonexistent/m.sgm"), Err(Error::Io { .. })));
    }

    fn grid(nodes: BTreeMap<(usize, usize), NodeOutcome>) -> PathGrid {
        PathGrid {
            lambda1_values: vec![1.0, 0.1],
            lambda2_values: vec![0.5, 0.05],
            lambda2_max: 0.5,
            alpha: 1.0,
            nodes,
        }
    }

    fn summary(g: &PathGrid) -> String {
        let mut buf = Vec::new();
        write_grid_summary(g, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_grid_writes_header_only() {
        assert_eq!(summary(&grid(BTreeMap::new())), "lambda1,lambda2,n_main,n_interaction,train_rmse,val_rmse,val_mae\n");
    }

    #[test]
    fn grid_summary_reparses() {
        let mut nodes = BTreeMap::new();
        for l in 0..2 {
            for m in 0..2 {
                let metrics = NodeMetrics {
                    n_main: l + m,
                    n_interaction: l * m,
                    train_rmse: 0.1 + l as f64 / 3.0,
                    val_rmse: 0.2 + m as f64 / 7.0,
                    val_mae: 0.15 + (l + m) as f64 / 11.0,
                };
                let fit = BlockFit::empty(PenaltyParams::default(), Array1::zeros(2).view());
                nodes.insert((l, m), NodeOutcome::Fitted { fit, metrics });
            }
        }
        let g = grid(nodes);
        let text = summary(&g);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        for (rec, (&(l, m), node)) in rows.iter().zip(&g.nodes) {
            let met = node.metrics().unwrap();
            let f = |i: usize| rec[i].parse::<f64>().unwrap();
            assert_eq!(f(0), g.lambda1_values[l]);
            assert_eq!(f(1), g.lambda2_values[m]);
            assert_eq!(rec[2].parse::<usize>().unwrap(), met.n_main);
            assert_eq!(rec[3].parse::<usize>().unwrap(), met.n_interaction);
            assert_eq!(f(4), met.train_rmse);
            assert_eq!(f(5), met.val_rmse);
            assert_eq!(f(6), met.val_mae);
        }
    }

    #[test]
    fn failed_nodes_are_na() {
        let nodes = [((0, 0), NodeOutcome::Failed("singular".into()))].into();
        let text = summary(&grid(nodes));
        assert_eq!(text.lines().nth(1).unwrap(), "1,0.5,NA,NA,NA,NA,NA");
    }
}
