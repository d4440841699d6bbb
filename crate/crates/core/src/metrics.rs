//! Biometric error rates over `P(bona_fide)` scores.
//!
//! A record is accepted as bona fide when `score ≥ τ`. FAR is the fraction of
//! accepted attacks, FRR the fraction of rejected bona fide presentations.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub group_id: Option<String>,
    pub label: Label,
    pub pai_type: Option<String>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Every record counts once.
    #[default]
    Frame,
    /// Scores are first averaged within each `group_id`.
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub tau: f64,
    pub far: f64,
    pub frr: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

/// Key under which attacks without a PAI tag are counted.
pub const UNTAGGED_PAI: &str = "untagged";

fn check_scores(records: &[ScoreRecord]) -> Result<(usize, usize)> {
    let mut n_bona = 0;
    let mut n_attack = 0;
    for r in records {
        if !(r.score.is_finite() && (0.0..=1.0).contains(&r.score)) {
            return Err(Error::Evaluation(format!("score {} of `{}` is outside [0, 1]", r.score, r.id)));
        }
        match r.label {
            Label::BonaFide => n_bona += 1,
            Label::Attack => n_attack += 1,
        }
    }
    if n_bona == 0 || n_attack == 0 {
        return Err(Error::Evaluation(format!(
            "both labels are required (bona_fide: {n_bona}, attack: {n_attack})"
        )));
    }
    Ok((n_bona, n_attack))
}

/// Mean score per `group_id`; records without a group stay on their own.
/// The aggregate takes the group's (shared) label and PAI tag.
pub fn aggregate_groups(records: &[ScoreRecord]) -> Result<Vec<ScoreRecord>> {
    let mut groups: BTreeMap<&str, (ScoreRecord, f64, usize)> = BTreeMap::new();
    let mut out = Vec::new();
    for r in records {
        let Some(g) = r.group_id.as_deref() else {
            out.push(r.clone());
            continue;
        };
        match groups.get_mut(g) {
            Some((first, sum, n)) => {
                if first.label != r.label {
                    return Err(Error::Evaluation(format!("group `{g}` mixes labels")));
                }
                *sum += r.score;
                *n += 1;
            }
            None => {
                groups.insert(g, (r.clone(), r.score, 1));
            }
        }
    }
    for (g, (first, sum, n)) in groups {
        out.push(ScoreRecord {
            id: g.to_string(),
            group_id: Some(g.to_string()),
            label: first.label,
            pai_type: first.pai_type,
            score: sum / n as f64,
        });
    }
    Ok(out)
}

pub fn apply_mode(records: &[ScoreRecord], mode: MetricMode) -> Result<Vec<ScoreRecord>> {
    match mode {
        MetricMode::Frame => Ok(records.to_vec()),
        MetricMode::Group => aggregate_groups(records),
    }
}

pub fn far_frr(records: &[ScoreRecord], tau: f64) -> Result<(f64, f64)> {
    let (n_bona, n_attack) = check_scores(records)?;
    let accepted_attacks = records.iter().filter(|r| r.label == Label::Attack && r.score >= tau).count();
    let rejected_bona = records.iter().filter(|r| r.label == Label::BonaFide && r.score < tau).count();
    Ok((accepted_attacks as f64 / n_attack as f64, rejected_bona as f64 / n_bona as f64))
}

/// The smallest value strictly above `x` (for `x ≥ 0`).
fn just_above(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

/// Threshold sweep candidates: the lowest score, every midpoint between
/// consecutive distinct scores, and the value just above the highest score.
pub fn candidate_thresholds(records: &[ScoreRecord]) -> Vec<f64> {
    let mut s: Vec<f64> = records.iter().map(|r| r.score).collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    if let Some(&first) = s.first() {
        out.push(first);
    }
    out.extend(s.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    if let Some(&last) = s.last() {
        out.push(just_above(last));
    }
    out
}

/// `(eer, τ*)`: `τ*` minimizes `|FAR − FRR|` over [`candidate_thresholds`]
/// (smallest τ on ties) and `eer = (FAR + FRR) / 2` there.
pub fn eer(records: &[ScoreRecord]) -> Result<(f64, f64)> {
    let (n_bona, n_attack) = check_scores(records)?;
    let mut attacks: Vec<f64> = records.iter().filter(|r| r.label == Label::Attack).map(|r| r.score).collect();
    let mut bona: Vec<f64> = records.iter().filter(|r| r.label == Label::BonaFide).map(|r| r.score).collect();
    attacks.sort_by(f64::total_cmp);
    bona.sort_by(f64::total_cmp);
    // Counts are compared as integers, FA·N_b against FR·N_a, so ties are exact.
    let mut best: Option<(u128, f64, usize, usize)> = None;
    let (mut ia, mut ib) = (0, 0);
    for tau in candidate_thresholds(records) {
        while ia < attacks.len() && attacks[ia] < tau {
            ia += 1;
        }
        while ib < bona.len() && bona[ib] < tau {
            ib += 1;
        }
        let fa = attacks.len() - ia;
        let fr = ib;
        let gap = (fa as i128 * n_bona as i128 - fr as i128 * n_attack as i128).unsigned_abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, tau, fa, fr));
        }
    }
    let (_, tau, fa, fr) = best.expect("at least one candidate");
    let value = (fa as f64 / n_attack as f64 + fr as f64 / n_bona as f64) / 2.0;
    Ok((value, tau))
}

/// Half-total error rate on `test` at the dev-set EER threshold; returns `(hter, τ)`.
pub fn hter(dev: &[ScoreRecord], test: &[ScoreRecord]) -> Result<(f64, f64)> {
    let (_, tau) = eer(dev)?;
    let (far, frr) = far_frr(test, tau)?;
    Ok(((far + frr) / 2.0, tau))
}

fn pai_key(r: &ScoreRecord) -> &str {
    r.pai_type.as_deref().unwrap_or(UNTAGGED_PAI)
}

/// APCER (worst PAI when any attack carries a tag, pooled otherwise),
/// BPCER = FRR, and their mean.
pub fn apcer_bpcer_acer(records: &[ScoreRecord], tau: f64) -> Result<ThresholdReport> {
    let (far, frr) = far_frr(records, tau)?;
    let attacks: Vec<&ScoreRecord> = records.iter().filter(|r| r.label == Label::Attack).collect();
    let apcer = if attacks.iter().any(|r| r.pai_type.is_some()) {
        let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for r in &attacks {
            let e = per.entry(pai_key(r)).or_default();
            e.1 += 1;
            if r.score >= tau {
                e.0 += 1;
            }
        }
        per.values().map(|&(fa, n)| fa as f64 / n as f64).fold(0.0, f64::max)
    } else {
        far
    };
    Ok(ThresholdReport {
        tau,
        far,
        frr,
        apcer,
        bpcer: frr,
        acer: (apcer + frr) / 2.0,
    })
}

/// Accepted attacks per PAI tag (every tag present appears, possibly with 0).
pub fn per_pai_false_accepts(records: &[ScoreRecord], tau: f64) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records.iter().filter(|r| r.label == Label::Attack) {
        let e = out.entry(pai_key(r).to_string()).or_insert(0);
        if r.score >= tau {
            *e += 1;
        }
    }
    out
}

/// `(τ, FAR, FRR)` at every sweep candidate, for DET-style plots.
pub fn far_frr_table(records: &[ScoreRecord]) -> Result<Vec<(f64, f64, f64)>> {
    candidate_thresholds(records)
        .into_iter()
        .map(|t| far_frr(records, t).map(|(a, r)| (t, a, r)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: MetricMode,
    pub n_bona_fide: usize,
    pub n_attack: usize,
    pub eer: f64,
    pub eer_threshold: f64,
    /// Present when a development set fixed the threshold.
    pub hter: Option<f64>,
    /// `"dev"` or `"test"`: which set the operating threshold came from.
    pub threshold_source: String,
    pub threshold: ThresholdReport,
    pub per_pai_false_accepts: BTreeMap<String, usize>,
}

/// Full report on `test`; the operating threshold is the dev EER threshold
/// when `dev` is given, the test EER threshold otherwise.
pub fn report(test: &[ScoreRecord], dev: Option<&[ScoreRecord]>, mode: MetricMode) -> Result<MetricReport> {
    let test = apply_mode(test, mode)?;
    let (n_bona, n_attack) = check_scores(&test)?;
    let (eer_value, eer_tau) = eer(&test)?;
    let (hter_value, tau, source) = match dev {
        Some(d) => {
            let d = apply_mode(d, mode)?;
            let (h, t) = hter(&d, &test)?;
            (Some(h), t, "dev")
        }
        None => (None, eer_tau, "test"),
    };
    Ok(MetricReport {
        mode,
        n_bona_fide: n_bona,
        n_attack,
        eer: eer_value,
        eer_threshold: eer_tau,
        hter: hter_value,
        threshold_source: source.to_string(),
        threshold: apcer_bpcer_acer(&test, tau)?,
        per_pai_false_accepts: per_pai_false_accepts(&test, tau),
    })
}

/// Fixed-point rendering with 9 significant digits.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.8}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new leading digit (0.9999999999 → 1.000000000).
    let digits = s.chars().filter(|c| c.is_ascii_digit()).collect::<String>();
    if digits.trim_start_matches('0').len() > 9 && decimals > 0 {
        let d = decimals - 1;
        format!("{x:.d$}")
    } else {
        s
    }
}

const SCORE_HEADER: [&str; 5] = ["id", "group_id", "label", "pai_type", "score"];

pub fn write_scores(out: impl Write, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORE_HEADER)?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            r.group_id.as_deref().unwrap_or(""),
            r.label.as_str(),
            r.pai_type.as_deref().unwrap_or(""),
            &format_sig9(r.score),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<score writer>", e))?;
    Ok(())
}

pub fn read_scores(input: impl Read) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != SCORE_HEADER {
        return Err(Error::Evaluation(format!("unexpected score header {:?}", header)));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::Evaluation(format!("score row {} has {} fields", i + 1, rec.len())));
        }
        let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
        let score: f64 = rec[4]
            .parse()
            .map_err(|_| Error::Evaluation(format!("score row {}: bad score `{}`", i + 1, &rec[4])))?;
        if !(score.is_finite() && (0.0..=1.0).contains(&score)) {
            return Err(Error::Evaluation(format!("score row {}: score {score} outside [0, 1]", i + 1)));
        }
        out.push(ScoreRecord {
            id: rec[0].to_string(),
            group_id: opt(&rec[1]),
            label: rec[2].parse()?,
            pai_type: opt(&rec[3]),
            score,
        });
    }
    Ok(out)
}
