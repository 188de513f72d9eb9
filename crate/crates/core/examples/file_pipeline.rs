//! The command-line pipeline driven through files: calibrate, apply, eval, report.
//!
//! Run with `cargo run --example file_pipeline`. Files go to a temporary directory.

use clap::Parser;
use confdet::cli::{run, Cli};
use confdet::ingest::{write_detections, write_groundtruth};
use confdet::synthlab::{trial_scenes, PerturbationLaw};

fn confdet(args: &[&str]) -> confdet::Result<()> {
    let argv = std::iter::once("confdet").chain(args.iter().copied());
    run(Cli::try_parse_from(argv).map_err(|e| confdet::Error::InvalidArgument(e.to_string()))?)
}

fn main() -> confdet::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| confdet::Error::Internal(e.to_string()))?;
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    let (calib, test) = trial_scenes(5, 0, &PerturbationLaw::default(), 400, 400)?;
    write_detections(path("calib_preds.json"), calib.preds.values().flatten())?;
    write_groundtruth(path("calib_gts.json"), calib.gts.values().flatten())?;
    write_detections(path("test_preds.json"), test.preds.values().flatten())?;
    write_groundtruth(path("test_gts.json"), test.gts.values().flatten())?;

    confdet(&[
        "calibrate",
        "--preds",
        &path("calib_preds.json"),
        "--gts",
        &path("calib_gts.json"),
        "--alpha",
        "0.2",
        "-o",
        &path("model.json"),
    ])?;
    confdet(&[
        "apply",
        "--preds",
        &path("test_preds.json"),
        "--model",
        &path("model.json"),
        "-o",
        &path("test_conf.json"),
    ])?;
    confdet(&[
        "eval",
        "--preds",
        &path("test_preds.json"),
        "--gts",
        &path("test_gts.json"),
        "--name",
        "raw",
        "-o",
        &path("raw.json"),
    ])?;
    confdet(&[
        "eval",
        "--preds",
        &path("test_conf.json"),
        "--gts",
        &path("test_gts.json"),
        "--name",
        "conformal",
        "-o",
        &path("conf.json"),
    ])?;
    confdet(&["report", &path("raw.json"), &path("conf.json")])?;
    Ok(())
}
