use std::io::Write;

use sparsegam::design::load_features;
use sparsegam::model_io::load_archive;

use crate::args::PredictArgs;
use crate::error::{CliError, CliResult};

pub fn cmd_predict(args: &PredictArgs) -> CliResult<()> {
    let model = load_archive(&args.model)?.model;
    let fill = model.standardizer.means.to_vec();
    let (x, ids) = load_features(&args.data, &model.feature_names, args.id_column.as_deref(), &fill)?;
    let preds = model.predict(x.view())?;
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| CliError::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let label = args
        .out
        .clone()
        .unwrap_or_else(|| "<stdout>".into());
    let mut w = csv::Writer::from_writer(sink);
    let err = |e| CliError::csv(&label, e);
    w.write_record(["row_id", "prediction"]).map_err(err)?;
    for (id, p) in ids.iter().zip(preds.iter()) {
        w.write_record([id.as_str(), &p.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(&label, e))
}
