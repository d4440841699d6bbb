//! One-axis sweeps. Each row is the base config plus one `key=value`
//! override; rows that share a pretrained backbone reuse it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use glimpse_pad::compute;
use glimpse_pad::config::{ExperimentConfig, ABLATION_AXES};
use glimpse_pad::metrics::{self, format_sig9};
use glimpse_pad::model::{Ablation, Network};
use glimpse_pad::policy::Selector;
use glimpse_pad::training::{self, NoObserver, Scheme};

use crate::commands::{self, require_both_labels, write_json, write_scores, CmdResult, Failure, EXIT_CONFIG};

fn config_key(axis: &str) -> &'static str {
    match axis {
        "branch" => "train.ablation",
        "selector" => "train.selector",
        "patch_size" => "model.patch_size",
        "steps" => "model.steps",
        "scheme" => "train.scheme",
        "fusion" => "model.fusion",
        _ => unreachable!("axis validated"),
    }
}

fn default_values(axis: &str, cfg: &ExperimentConfig) -> Vec<String> {
    let strs = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
    match axis {
        "branch" => strs(&["global_only", "local_only", "full"]),
        "selector" => strs(&["max_scores", "random", "drl"]),
        "patch_size" => [2, 4, 8, 16]
            .into_iter()
            .filter(|&p| p <= cfg.model.feature_side())
            .map(|p| p.to_string())
            .collect(),
        "steps" => strs(&["2", "4", "8", "16"]),
        "scheme" => strs(&["end_to_end", "two_stage"]),
        "fusion" => strs(&["average", "weighted_average", "concat"]),
        _ => Vec::new(),
    }
}

/// Key of everything stage-1 pretraining depends on.
fn stage1_key(cfg: &ExperimentConfig) -> CmdResult<String> {
    let mut t = cfg.train.clone();
    t.ablation = Ablation::Full;
    t.selector = Selector::Drl;
    t.epochs_stage2 = 0;
    let model = toml::to_string(&cfg.model).map_err(|e| Failure::new(1, e.to_string()))?;
    let train = toml::to_string(&t).map_err(|e| Failure::new(1, e.to_string()))?;
    Ok(format!("{model}\n{train}"))
}

fn slug(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' })
        .collect()
}

pub fn run(
    config: &Path,
    overrides: &[String],
    axis: Option<String>,
    values: Vec<String>,
    out: Option<PathBuf>,
) -> CmdResult {
    let text = std::fs::read_to_string(config).map_err(|e| Failure::new(1, format!("{}: {e}", config.display())))?;
    let mut base = ExperimentConfig::from_toml_str(&text, overrides)?;
    base.output_dir = commands::config_base(config).join(&base.output_dir);
    let axis = axis
        .or_else(|| base.ablate.axis.clone())
        .ok_or_else(|| Failure::new(EXIT_CONFIG, "no ablation axis given (--axis or ablate.axis)"))?;
    if !ABLATION_AXES.contains(&axis.as_str()) {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("unknown ablation axis `{axis}`; expected one of {}", ABLATION_AXES.join(", ")),
        ));
    }
    let values = if !values.is_empty() {
        values
    } else if !base.ablate.values.is_empty() {
        base.ablate.values.clone()
    } else {
        default_values(&axis, &base)
    };
    let key = config_key(&axis);
    let rows: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| {
            let mut o = overrides.to_vec();
            o.push(format!("{key}={v}"));
            o.push(format!("ablate.axis={axis}"));
            ExperimentConfig::from_toml_str(&text, &o).map_err(Failure::from)
        })
        .collect::<CmdResult<_>>()?;
    let dir = commands::prepare_out(&base, out)?;
    let split = base.load_split(&commands::config_base(config))?;
    require_both_labels(&split.train, "training set")?;
    require_both_labels(&split.test, "test set")?;
    require_both_labels(&split.dev, "dev set")?;

    let mut stage1_cache: HashMap<String, Network> = HashMap::new();
    let mut table =
        String::from("axis,value,eer,hter,apcer,bpcer,acer,dev_threshold,parameters,macs_per_episode\n");
    for (i, (value, cfg)) in values.iter().zip(&rows).enumerate() {
        let row_dir = dir.join("rows").join(format!("{i:02}-{}", slug(value)));
        commands::prepare_out(cfg, Some(row_dir.clone()))?;
        let stage1 = if cfg.train.scheme == Scheme::TwoStage {
            let k = stage1_key(cfg)?;
            if !stage1_cache.contains_key(&k) {
                let (net, _) = training::pretrain_stage1(&split.train, &cfg.model, &cfg.train, &mut NoObserver)?;
                stage1_cache.insert(k.clone(), net);
            }
            stage1_cache.get(&k).cloned()
        } else {
            None
        };
        let run = training::train(&split.train, &cfg.model, &cfg.train, stage1, &mut NoObserver)?;
        let test_scores = training::evaluate(&run.model, &split.test, cfg.train.seed)?;
        let dev_scores = training::evaluate(&run.model, &split.dev, cfg.train.seed)?;
        write_scores(&row_dir.join("scores.csv"), &test_scores)?;
        write_scores(&row_dir.join("dev_scores.csv"), &dev_scores)?;
        let report = metrics::report(&test_scores, Some(&dev_scores), cfg.metrics.mode)?;
        write_json(&row_dir.join("report.json"), &report)?;
        let c = compute::compute_report(&run.model);
        let _ = writeln!(
            table,
            "{axis},{value},{},{},{},{},{},{},{},{}",
            format_sig9(report.eer),
            format_sig9(report.hter.unwrap_or(f64::NAN)),
            format_sig9(report.threshold.apcer),
            format_sig9(report.threshold.bpcer),
            format_sig9(report.threshold.acer),
            format_sig9(report.threshold.tau),
            c.parameters,
            c.macs_per_episode
        );
        println!("{axis}={value}: EER {}", format_sig9(report.eer));
    }
    commands::write_file(&dir.join("ablation.csv"), table.as_bytes())
}
