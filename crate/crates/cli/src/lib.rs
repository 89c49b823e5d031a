//! Command-line harness: synthetic data, training, encode/decode and the
//! distortion/perception sweep.

pub mod args;
pub mod commands;
pub mod error;
pub mod image_io;
pub mod sweep;

use std::fs;

use args::{Cli, Command, SweepArgs};
use error::{CliError, CliResult};

pub fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Encode(a) => commands::encode_cmd(a),
        Command::Decode(a) => commands::decode_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn sweep_cmd(a: &SweepArgs) -> CliResult<()> {
    let images = commands::load_images(&a.data)?;
    if let Some(dir) = &a.recon_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let explicit = a
        .samplers
        .iter()
        .map(|s| sweep::parse_sampler(s))
        .collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &qp in &a.qp {
        let path = a.models.join(format!("qp{qp}.dpm"));
        if !path.exists() {
            return Err(CliError::Data(format!("no model for qp {qp}: {} not found", path.display())));
        }
        let model = dpcodec::models::CodecModel::load(&path)
            .map_err(|e| CliError::Data(format!("qp {qp}: {}: {e}", path.display())))?;
        if model.qp() != qp {
            return Err(CliError::Data(format!(
                "{} holds a qp {} model, expected qp {qp}",
                path.display(),
                model.qp()
            )));
        }
        let samplers = if explicit.is_empty() {
            sweep::default_samplers(model.schedule().len())
        } else {
            explicit.clone()
        };
        eprintln!("qp {qp}: {} images, {} decoder configs", images.len(), samplers.len() + 1);
        rows.extend(sweep::sweep_model(&model, &images, &samplers, a.seed, a.recon_dir.as_deref())?);
    }
    fs::write(&a.out, sweep::to_csv(&rows)).map_err(|e| CliError::io(&a.out, e))?;
    Ok(())
}
