use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use glimpse_pad::checkpoint::{Checkpoint, StageTag};
use glimpse_pad::compute;
use glimpse_pad::config::ExperimentConfig;
use glimpse_pad::data::folder::read_image;
use glimpse_pad::data::{manifest, split_protocol, synth, DatasetSplit, Label, Sample};
use glimpse_pad::metrics::{self, ScoreRecord};
use glimpse_pad::model::Network;
use glimpse_pad::policy::SampleMode;
use glimpse_pad::training::{self, JsonLog, Scheme};
use glimpse_pad::{viz, Error};
use serde::Serialize;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_MISMATCH: u8 = 4;
pub const EXIT_MISSING_CLASS: u8 = 5;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Load(_) => EXIT_MISMATCH,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(1, format!("{}: {e}", path.display()))
}

/// Loads a config; a relative `output_dir` is taken against the config's directory.
pub fn load_config(path: &Path, overrides: &[String]) -> CmdResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path, overrides)?;
    cfg.output_dir = config_base(path).join(&cfg.output_dir);
    Ok(cfg)
}

/// Directory that relative data paths in `config` are taken against.
pub fn config_base(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Creates `out` (or the configured output directory) and stores the
/// resolved config in it.
pub fn prepare_out(cfg: &ExperimentConfig, out: Option<PathBuf>) -> CmdResult<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| io_fail(&dir, e))?;
    write_file(&dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    Ok(dir)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(1, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn require_both_labels(samples: &[Sample], what: &str) -> CmdResult {
    for l in Label::ALL {
        if !samples.iter().any(|s| s.label == l) {
            return Err(Failure::new(
                EXIT_MISSING_CLASS,
                format!("{what} has no `{l}` samples; both classes are required"),
            ));
        }
    }
    Ok(())
}

pub fn synth(config: &Path, overrides: &[String], out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    let dir = prepare_out(&cfg, out)?;
    let samples = synth::generate_dataset(&cfg.synth)?;
    let rows = manifest::write_manifest(&dir, &samples)?;
    let d = &cfg.data;
    let split = split_protocol(samples, (d.split[0], d.split[1], d.split[2]), d.split_seed)?;
    let by_id: HashMap<&str, &manifest::ManifestRow> = rows.iter().map(|r| (r.id.as_str(), r)).collect();
    for (name, part) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        let selected: Vec<_> = part.iter().map(|s| by_id[s.id.as_str()].clone()).collect();
        manifest::write_rows(&dir.join(format!("{name}.csv")), &selected)?;
    }
    println!(
        "wrote {} samples ({} train / {} dev / {} test) to {}",
        rows.len(),
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        dir.display()
    );
    Ok(())
}

fn split_for(cfg: &ExperimentConfig, config: &Path) -> CmdResult<DatasetSplit> {
    Ok(cfg.load_split(&config_base(config))?)
}

pub fn train(
    config: &Path,
    overrides: &[String],
    out: Option<PathBuf>,
    stage: &str,
    stage1_checkpoint: Option<PathBuf>,
) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    if stage != "all" && cfg.train.scheme == Scheme::EndToEnd {
        return Err(Failure::new(EXIT_CONFIG, "--stage needs train.scheme = \"two_stage\""));
    }
    if stage == "2" && stage1_checkpoint.is_none() {
        return Err(Failure::new(EXIT_CONFIG, "--stage 2 needs --stage1-checkpoint"));
    }
    let dir = prepare_out(&cfg, out)?;
    let split = split_for(&cfg, config)?;
    require_both_labels(&split.train, "training set")?;
    let log_path = dir.join("train_log.jsonl");
    let log_file = fs::File::create(&log_path).map_err(|e| io_fail(&log_path, e))?;
    let mut observer = JsonLog {
        out: std::io::BufWriter::new(log_file),
    };
    let rng = training::stream_rng(cfg.train.seed, 0);
    let stage1 = match &stage1_checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.to_network()?),
        None => None,
    };
    if stage == "1" {
        let (net, _) = training::pretrain_stage1(&split.train, &cfg.model, &cfg.train, &mut observer)?;
        Checkpoint::from_network(&net, StageTag::Stage1, &rng).save(&dir.join("stage1.ckpt"))?;
        observer.out.flush().map_err(|e| io_fail(&log_path, e))?;
        println!("stage 1 checkpoint written to {}", dir.display());
        return Ok(());
    }
    let run = training::train(&split.train, &cfg.model, &cfg.train, stage1, &mut observer)?;
    observer.out.flush().map_err(|e| io_fail(&log_path, e))?;
    if let (Some(s1), None) = (&run.stage1, &stage1_checkpoint) {
        Checkpoint::from_network(s1, StageTag::Stage1, &rng).save(&dir.join("stage1.ckpt"))?;
    }
    let tag = match cfg.train.scheme {
        Scheme::TwoStage => StageTag::Stage2,
        Scheme::EndToEnd => StageTag::EndToEnd,
    };
    Checkpoint::from_network(&run.model, tag, &rng).save(&dir.join("model.ckpt"))?;
    let dev_scores = training::evaluate(&run.model, &split.dev, cfg.train.seed)?;
    write_scores(&dir.join("dev_scores.csv"), &dev_scores)?;
    println!("model checkpoint and dev scores written to {}", dir.display());
    Ok(())
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> CmdResult {
    let mut buf = Vec::new();
    metrics::write_scores(&mut buf, records)?;
    write_file(path, &buf)
}

/// `train`/`dev`/`test` of the configured split, or a manifest path.
fn resolve_data(spec: &str, cfg: &ExperimentConfig, config: &Path, split: &mut Option<DatasetSplit>) -> CmdResult<Vec<Sample>> {
    if let Some(part) = ["train", "dev", "test"].iter().position(|p| *p == spec) {
        if split.is_none() {
            *split = Some(split_for(cfg, config)?);
        }
        let s = split.as_ref().expect("just loaded");
        return Ok([&s.train, &s.dev, &s.test][part].clone());
    }
    Ok(manifest::read_manifest(Path::new(spec), Some(cfg.model.input_size))?)
}

/// Checkpoint weights in a network whose model configuration must equal the config's.
fn load_checked(checkpoint: &Path, cfg: &ExperimentConfig) -> CmdResult<Network> {
    Ok(Checkpoint::load(checkpoint)?.to_network_checked(&cfg.model)?)
}

pub fn eval(
    config: &Path,
    overrides: &[String],
    checkpoint: &Path,
    data: &str,
    dev: Option<&str>,
    out: Option<PathBuf>,
) -> CmdResult {
    let cfg = load_config(config, overrides)?;
    let net = load_checked(checkpoint, &cfg)?;
    let mut split = None;
    let test = resolve_data(data, &cfg, config, &mut split)?;
    require_both_labels(&test, "evaluation data")?;
    let dev = match dev {
        Some(spec) => {
            let d = resolve_data(spec, &cfg, config, &mut split)?;
            require_both_labels(&d, "threshold-selection data")?;
            Some(d)
        }
        None => None,
    };
    let dir = prepare_out(&cfg, out)?;
    let scores = training::evaluate(&net, &test, cfg.train.seed)?;
    write_scores(&dir.join("scores.csv"), &scores)?;
    let dev_scores = match &dev {
        Some(d) => {
            let s = training::evaluate(&net, d, cfg.train.seed)?;
            write_scores(&dir.join("dev_scores.csv"), &s)?;
            Some(s)
        }
        None => None,
    };
    let report = metrics::report(&scores, dev_scores.as_deref(), cfg.metrics.mode)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut bars = String::from("pai_type,false_accepts\n");
    for (pai, n) in &report.per_pai_false_accepts {
        bars.push_str(&format!("{pai},{n}\n"));
    }
    write_file(&dir.join("false_accepts.csv"), bars.as_bytes())?;
    let mut table = String::from("threshold,far,frr\n");
    let scored = metrics::apply_mode(&scores, cfg.metrics.mode)?;
    for (t, far, frr) in metrics::far_frr_table(&scored)? {
        table.push_str(&format!(
            "{},{},{}\n",
            metrics::format_sig9(t),
            metrics::format_sig9(far),
            metrics::format_sig9(frr)
        ));
    }
    write_file(&dir.join("far_frr.csv"), table.as_bytes())?;
    print!("EER {}", metrics::format_sig9(report.eer));
    if let Some(h) = report.hter {
        print!("  HTER {}", metrics::format_sig9(h));
    }
    println!(
        "  APCER {}  BPCER {}  ACER {}",
        metrics::format_sig9(report.threshold.apcer),
        metrics::format_sig9(report.threshold.bpcer),
        metrics::format_sig9(report.threshold.acer)
    );
    Ok(())
}

/// Snapshot for commands driven by a checkpoint alone.
fn checkpoint_snapshot(ckpt: &Checkpoint, out: &Path) -> CmdResult {
    let mut cfg = ExperimentConfig {
        model: ckpt.meta.model.clone(),
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.synth.image_size = cfg.model.input_size;
    cfg.synth.artifact_size = cfg.synth.artifact_size.min(cfg.model.input_size - 1);
    cfg.train.ablation = ckpt.meta.ablation;
    cfg.train.selector = ckpt.meta.selector;
    prepare_out(&cfg, Some(out.to_path_buf())).map(|_| ())
}

pub fn viz_traj(checkpoint: &Path, image: &Path, out: &Path, scale: usize, seed: u64) -> CmdResult {
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = ckpt.to_network()?;
    if !net.ablation.uses_local() {
        return Err(Failure::new(EXIT_CONFIG, "the checkpoint has no local branch to visualize"));
    }
    let img = read_image(image, Some(net.config.input_size))?;
    checkpoint_snapshot(&ckpt, out)?;
    let episode = net.forward_episode(&img, SampleMode::EvalDeterministic, None, &mut training::eval_rng(seed, 0))?;
    let overlay = viz::trajectory_overlay(&img, &episode.windows, net.config.feature_side(), scale);
    let png = out.join("trajectory.png");
    overlay.save(&png).map_err(Error::from)?;
    let mut csv = Vec::new();
    viz::write_confidence_series(&mut csv, &episode)?;
    write_file(&out.join("confidence.csv"), &csv)?;
    println!("score {}", metrics::format_sig9(episode.score()));
    Ok(())
}

pub fn viz_cam(checkpoint: &Path, image: &Path, out: &Path) -> CmdResult {
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = ckpt.to_network()?;
    let img = read_image(image, Some(net.config.input_size))?;
    checkpoint_snapshot(&ckpt, out)?;
    let heat = viz::cam_heatmap(&net, &img)?;
    let png = out.join("cam.png");
    viz::heatmap_image(&heat, net.config.input_size)
        .save(&png)
        .map_err(Error::from)?;
    Ok(())
}

pub fn report_compute(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    overrides: &[String],
    measure: Option<usize>,
    out: Option<PathBuf>,
) -> CmdResult {
    let net = match (checkpoint, config) {
        (Some(c), _) => Checkpoint::load(c)?.to_network()?,
        (None, Some(cfg)) => {
            let cfg = load_config(cfg, overrides)?;
            let mut rng = training::stream_rng(cfg.train.seed, 0);
            Network::new(cfg.model, cfg.train.ablation, cfg.train.selector, &mut rng)?
        }
        (None, None) => return Err(Failure::new(EXIT_CONFIG, "give --checkpoint or --config")),
    };
    let mut report = compute::compute_report(&net);
    if let Some(rounds) = measure {
        report.episodes_per_second = Some(compute::measure_throughput(&net, rounds.max(1))?);
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::new(1, e.to_string()))?;
    println!("{text}");
    if let Some(path) = out {
        write_file(&path, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}
