//! Routing analytics: utilization counts, entropy, Gini, heatmaps and
//! variant comparisons.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mamoe::{EventReader, ExpertPartition, RoutingEvent, Variant};
use crate::model::Model;
use crate::stream::Modality;
use crate::trainer::{Batch, TaskKind, TaskSpec, Trainer};

/// `counts[m][i]`: how often modality `m` tokens selected expert `i`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilizationMatrix {
    pub counts: [Vec<u64>; 2],
    /// First and last step seen.
    pub window: Option<(u64, u64)>,
    pub tokens: [u64; 2],
}

impl UtilizationMatrix {
    pub fn new(n_experts: usize) -> Self {
        Self {
            counts: [vec![0; n_experts], vec![0; n_experts]],
            window: None,
            tokens: [0; 2],
        }
    }

    pub fn n_experts(&self) -> usize {
        self.counts[0].len()
    }

    /// Widens both rows to at least `n` experts.
    pub fn ensure_experts(&mut self, n: usize) {
        for row in &mut self.counts {
            if row.len() < n {
                row.resize(n, 0);
            }
        }
    }

    pub fn row(&self, m: Modality) -> &[u64] {
        &self.counts[m.indicator() as usize]
    }

    pub fn record(&mut self, e: &RoutingEvent) {
        if let Some(&max) = e.selected.iter().max() {
            self.ensure_experts(max + 1);
        }
        let m = e.modality.indicator() as usize;
        for &i in &e.selected {
            self.counts[m][i] += 1;
        }
        self.tokens[m] += 1;
        self.window = Some(match self.window {
            None => (e.step, e.step),
            Some((a, b)) => (a.min(e.step), b.max(e.step)),
        });
    }

    pub fn merge(&mut self, other: &UtilizationMatrix) {
        self.ensure_experts(other.n_experts());
        for m in 0..2 {
            for (a, b) in self.counts[m].iter_mut().zip(&other.counts[m]) {
                *a += b;
            }
            self.tokens[m] += other.tokens[m];
        }
        self.window = match (self.window, other.window) {
            (Some((a, b)), Some((c, d))) => Some((a.min(c), b.max(d))),
            (w, None) | (None, w) => w,
        };
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Selections landing outside the token's modality group.
    pub fn violations(&self, part: &ExpertPartition) -> u64 {
        let off = |m: Modality, other: Modality| -> u64 {
            part.group(other)
                .iter()
                .filter_map(|&i| self.row(m).get(i))
                .sum()
        };
        off(Modality::Text, Modality::Audio) + off(Modality::Audio, Modality::Text)
    }
}

/// Single pass over an event stream.
pub fn accumulate<I>(events: I) -> Result<UtilizationMatrix>
where
    I: IntoIterator<Item = Result<RoutingEvent>>,
{
    let mut u = UtilizationMatrix::default();
    for e in events {
        u.record(&e?);
    }
    Ok(u)
}

/// Shannon entropy in bits of a nonnegative weight vector, `0·log 0 = 0`.
pub fn entropy_bits(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Argument("entropy of an all-zero distribution".into()));
    }
    let h = weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let p = w / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

pub fn routing_entropy(u: &UtilizationMatrix, m: Modality) -> Result<f64> {
    let row: Vec<f64> = u.row(m).iter().map(|&c| c as f64).collect();
    entropy_bits(&row).map_err(|_| Error::Argument(format!("no {} selections recorded", m.as_str())))
}

/// Mean pairwise absolute difference over twice the mean.
pub fn gini_values(x: &[f64]) -> Result<f64> {
    let n = x.len();
    let total: f64 = x.iter().sum();
    if n == 0 || !(total > 0.0) {
        return Err(Error::Argument("Gini coefficient of an empty scope".into()));
    }
    // sorted form of the pairwise sum: Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − n + 1) x_(i)
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pairwise: f64 = s
        .iter()
        .enumerate()
        .map(|(i, &v)| (2.0 * i as f64 - n as f64 + 1.0) * v)
        .sum::<f64>()
        * 2.0;
    Ok(pairwise / (2.0 * n as f64 * total))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GiniScope<'a> {
    /// All experts, counts summed over modalities.
    Overall,
    /// The listed experts, counts summed over modalities.
    Group(&'a [usize]),
}

pub fn gini(u: &UtilizationMatrix, scope: GiniScope<'_>) -> Result<f64> {
    let per_expert = |i: usize| -> f64 {
        (u.counts[0].get(i).copied().unwrap_or(0) + u.counts[1].get(i).copied().unwrap_or(0)) as f64
    };
    let x: Vec<f64> = match scope {
        GiniScope::Overall => (0..u.n_experts()).map(per_expert).collect(),
        GiniScope::Group(g) => g.iter().map(|&i| per_expert(i)).collect(),
    };
    gini_values(&x)
}

/// Mean over tokens of the entropy of each token's renormalized gate weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenEntropy {
    sum: [f64; 2],
    tokens: [u64; 2],
}

impl TokenEntropy {
    pub fn record(&mut self, e: &RoutingEvent) {
        if let Ok(h) = entropy_bits(&e.weights) {
            let m = e.modality.indicator() as usize;
            self.sum[m] += h;
            self.tokens[m] += 1;
        }
    }

    pub fn mean(&self, m: Modality) -> Option<f64> {
        let i = m.indicator() as usize;
        (self.tokens[i] > 0).then(|| self.sum[i] / self.tokens[i] as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub step: u64,
    pub entropy_text: Option<f64>,
    pub entropy_audio: Option<f64>,
    pub gini_overall: f64,
    pub gini_text_group: Option<f64>,
    pub gini_audio_group: Option<f64>,
    pub violations: u64,
    pub selections: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_entropy_text: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_entropy_audio: Option<f64>,
}

impl CheckpointMetrics {
    pub fn from_matrix(step: u64, u: &UtilizationMatrix, part: &ExpertPartition) -> Result<Self> {
        let mut u = u.clone();
        u.ensure_experts(part.n_experts());
        if u.total() == 0 {
            return Err(Error::NoEvents("utilization window".into()));
        }
        let group = |g: &[usize]| gini(&u, GiniScope::Group(g)).ok();
        Ok(Self {
            step,
            entropy_text: routing_entropy(&u, Modality::Text).ok(),
            entropy_audio: routing_entropy(&u, Modality::Audio).ok(),
            gini_overall: gini(&u, GiniScope::Overall)?,
            gini_text_group: group(part.text()),
            gini_audio_group: group(part.audio()),
            violations: u.violations(part),
            selections: u.total(),
            token_entropy_text: None,
            token_entropy_audio: None,
        })
    }

    pub fn entropy(&self, m: Modality) -> Option<f64> {
        match m {
            Modality::Text => self.entropy_text,
            Modality::Audio => self.entropy_audio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_experts: usize,
    pub audio_expert_indices: Vec<usize>,
    /// One entry per logged step.
    pub checkpoints: Vec<CheckpointMetrics>,
    /// All events pooled.
    pub overall: CheckpointMetrics,
    pub counts: [Vec<u64>; 2],
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Streams events, grouping windows by step.
pub fn analyze_events<R: Read>(
    input: R,
    part: Option<&ExpertPartition>,
    per_token: bool,
) -> Result<MetricsReport> {
    let mut windows: BTreeMap<u64, (UtilizationMatrix, TokenEntropy)> = BTreeMap::new();
    let mut pooled = UtilizationMatrix::default();
    let mut pooled_tok = TokenEntropy::default();
    for e in EventReader::new(input)? {
        let e = e?;
        let w = windows.entry(e.step).or_default();
        w.0.record(&e);
        w.1.record(&e);
        pooled.record(&e);
        pooled_tok.record(&e);
    }
    if pooled.total() == 0 {
        return Err(Error::NoEvents("event log".into()));
    }
    let part = resolve_partition(part, pooled.n_experts())?;
    let finish = |step: u64, u: &UtilizationMatrix, tok: &TokenEntropy| -> Result<CheckpointMetrics> {
        let mut m = CheckpointMetrics::from_matrix(step, u, &part)?;
        if per_token {
            m.token_entropy_text = tok.mean(Modality::Text);
            m.token_entropy_audio = tok.mean(Modality::Audio);
        }
        Ok(m)
    };
    let checkpoints = windows
        .iter()
        .map(|(&s, (u, tok))| finish(s, u, tok))
        .collect::<Result<Vec<_>>>()?;
    let last = pooled.window.map_or(0, |w| w.1);
    let overall = finish(last, &pooled, &pooled_tok)?;
    pooled.ensure_experts(part.n_experts());
    Ok(MetricsReport {
        n_experts: part.n_experts(),
        audio_expert_indices: part.audio().to_vec(),
        checkpoints,
        overall,
        counts: pooled.counts,
    })
}

fn resolve_partition(part: Option<&ExpertPartition>, seen: usize) -> Result<ExpertPartition> {
    match part {
        Some(p) if p.n_experts() >= seen => Ok(p.clone()),
        Some(p) => Err(Error::Argument(format!(
            "events reference expert {} but the partition has {} experts",
            seen - 1,
            p.n_experts()
        ))),
        None => ExpertPartition::half_split(seen.max(2)),
    }
}

/// Analyzes a heatmap CSV (row-normalized or raw counts) as a single window.
pub fn analyze_heatmap<R: Read>(input: R, part: Option<&ExpertPartition>) -> Result<MetricsReport> {
    let rows = read_heatmap(input)?;
    let n = rows[0].len();
    let part = resolve_partition(part, n)?;
    let row_metrics = |m: Modality| -> Option<f64> { entropy_bits(&rows[m.indicator() as usize]).ok() };
    let pooled: Vec<f64> = (0..n).map(|i| rows[0][i] + rows[1][i]).collect();
    let group = |g: &[usize]| -> Option<f64> {
        let x: Vec<f64> = g.iter().filter_map(|&i| pooled.get(i).copied()).collect();
        gini_values(&x).ok()
    };
    let off = |m: usize, g: &[usize]| g.iter().filter(|&&i| rows[m][i] > 0.0).count() as u64;
    let overall = CheckpointMetrics {
        step: 0,
        entropy_text: row_metrics(Modality::Text),
        entropy_audio: row_metrics(Modality::Audio),
        gini_overall: gini_values(&pooled)?,
        gini_text_group: group(part.text()),
        gini_audio_group: group(part.audio()),
        violations: off(0, part.audio()) + off(1, part.text()),
        selections: 0,
        token_entropy_text: None,
        token_entropy_audio: None,
    };
    Ok(MetricsReport {
        n_experts: n,
        audio_expert_indices: part.audio().to_vec(),
        checkpoints: vec![overall.clone()],
        overall,
        counts: [Vec::new(), Vec::new()],
    })
}

pub const HEATMAP_HEADER: &str = "modality";

/// Whether the first line of a CSV is a heatmap header.
pub fn is_heatmap<R: BufRead>(mut input: R) -> Result<bool> {
    let mut first = String::new();
    input
        .read_line(&mut first)
        .map_err(|e| Error::io("<input>", e))?;
    Ok(first.split(',').next().map(str::trim) == Some(HEATMAP_HEADER))
}

fn read_heatmap<R: Read>(input: R) -> Result<[Vec<f64>; 2]> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some(HEATMAP_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: "heatmap header must start with `modality`".into(),
        });
    }
    let n = header.len() - 1;
    let mut rows: [Option<Vec<f64>>; 2] = [None, None];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        let m = match rec.get(0) {
            Some("text") => 0,
            Some("audio") => 1,
            other => return Err(bad(format!("unknown modality row {other:?}"))),
        };
        if rec.len() != n + 1 {
            return Err(bad(format!("expected {} values, found {}", n, rec.len() - 1)));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| *v >= 0.0)
                    .ok_or_else(|| bad(format!("bad value `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows[m] = Some(vals);
    }
    match rows {
        [Some(t), Some(a)] => Ok([t, a]),
        _ => Err(Error::NoEvents("heatmap (needs text and audio rows)".into())),
    }
}

/// Writes the row-normalized matrix (`normalized = true`) or raw counts.
/// All-zero rows stay zero.
pub fn write_heatmap<W: Write>(out: W, u: &UtilizationMatrix, normalized: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![HEATMAP_HEADER.to_string()];
    header.extend((0..u.n_experts()).map(|i| i.to_string()));
    w.write_record(&header)?;
    for m in Modality::ALL {
        let row = u.row(m);
        let total: u64 = row.iter().sum();
        let mut rec = vec![m.as_str().to_string()];
        rec.extend(row.iter().map(|&c| {
            if !normalized {
                c.to_string()
            } else if total == 0 {
                "0".to_string()
            } else {
                (c as f64 / total as f64).to_string()
            }
        }));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<heatmap>", e))
}

/// Fixed mixed-modality batch used to measure routing during training.
pub fn probe_batch(tasks: &TaskSpec, per_task: usize) -> Result<Batch> {
    let asr = tasks.eval_batch(TaskKind::PseudoAsr, per_task)?;
    let tts = tasks.eval_batch(TaskKind::PseudoTts, per_task)?;
    Ok(Batch {
        kind: TaskKind::PseudoAsr,
        seqs: asr.seqs.into_iter().chain(tts.seqs).collect(),
        targets: asr.targets.into_iter().chain(tts.targets).collect(),
    })
}

/// Routing utilization of `model` on `batch`, summed over layers, plus the
/// batch's mean cross-entropy.
pub fn probe_utilization(model: &Model, batch: &Batch) -> Result<(UtilizationMatrix, f64)> {
    let ev = model.evaluate(&batch.seqs, &batch.targets)?;
    let mut u = UtilizationMatrix::new(model.config.n_experts);
    for e in ev.events(0) {
        u.record(&e);
    }
    Ok((u, ev.ce()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub final_train_loss: f64,
    pub final_probe_loss: f64,
    pub initial_asr_loss: f64,
    pub final_asr_loss: f64,
    /// Empty for the dense variant.
    pub metrics: Vec<CheckpointMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean_final_probe_loss: f64,
    pub mean_final_asr_loss: f64,
    pub mean_final_gini: Option<f64>,
    pub mean_final_entropy_text: Option<f64>,
    pub mean_final_entropy_audio: Option<f64>,
    pub mean_first_entropy_text: Option<f64>,
    pub mean_first_entropy_audio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Winner {
    pub metric: String,
    pub variant: Variant,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub checkpoint_steps: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub summary: Vec<VariantSummary>,
    pub winners: Vec<Winner>,
}

/// Checkpoints at a quarter, half and all of training.
pub const CHECKPOINT_FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];

pub fn checkpoint_steps(total: u64) -> Vec<u64> {
    let mut steps: Vec<u64> = CHECKPOINT_FRACTIONS
        .iter()
        .map(|f| ((total as f64 * f).round() as u64).max(1))
        .collect();
    steps.dedup();
    steps
}

/// Stage-1 run of one variant and seed, probing routing at the checkpoints.
pub fn run_variant(base: &ModelConfig, variant: Variant, seed: u64) -> Result<RunSummary> {
    let mut cfg = base.with_variant(variant)?;
    cfg.seed = seed;
    let marks = checkpoint_steps(cfg.training.total_steps);
    let eval_n = cfg.training.eval_batch_size;
    let mut trainer = Trainer::from_config(cfg, 1)?;
    let probe = probe_batch(&trainer.tasks, eval_n / 2)?;
    let asr_eval = trainer.tasks.eval_batch(TaskKind::PseudoAsr, eval_n)?;
    let initial_asr_loss = trainer.model.evaluate(&asr_eval.seqs, &asr_eval.targets)?.ce();
    let part = trainer.model.partition.clone();
    let mut metrics = Vec::new();
    let mut final_train_loss = f64::NAN;
    let mut final_probe_loss = f64::NAN;
    while !trainer.is_done() {
        let (m, _) = trainer.train_step(false)?;
        final_train_loss = m.loss;
        if marks.contains(&trainer.step) {
            let (u, loss) = probe_utilization(&trainer.model, &probe)?;
            final_probe_loss = loss;
            if variant.has_router() {
                metrics.push(CheckpointMetrics::from_matrix(trainer.step, &u, &part)?);
            }
        }
    }
    let final_asr_loss = trainer.model.evaluate(&asr_eval.seqs, &asr_eval.targets)?.ce();
    Ok(RunSummary {
        variant,
        seed,
        final_train_loss,
        final_probe_loss,
        initial_asr_loss,
        final_asr_loss,
        metrics,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn mean_opt<'a>(runs: &[&'a RunSummary], f: impl Fn(&'a RunSummary) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = runs.iter().map(|r| f(r)).collect();
    vals.and_then(|v| mean(v.into_iter()))
}

/// Trains every variant from the same seeds and tabulates routing metrics.
pub fn compare_variants(base: &ModelConfig, variants: &[Variant], seeds: &[u64]) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::Argument("compare_variants needs at least one seed".into()));
    }
    if variants.is_empty() {
        return Err(Error::Argument("compare_variants needs at least one variant".into()));
    }
    let mut runs = Vec::new();
    for &v in variants {
        for &s in seeds {
            runs.push(run_variant(base, v, s)?);
        }
    }
    Ok(summarize(base, seeds, runs))
}

pub fn summarize(base: &ModelConfig, seeds: &[u64], runs: Vec<RunSummary>) -> ComparisonReport {
    let mut order: Vec<Variant> = Vec::new();
    for r in &runs {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    let summary: Vec<VariantSummary> = order
        .iter()
        .map(|&v| {
            let rs: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == v).collect();
            let last = |r: &RunSummary| r.metrics.last().cloned();
            let first = |r: &RunSummary| r.metrics.first().cloned();
            VariantSummary {
                variant: v,
                mean_final_probe_loss: mean(rs.iter().map(|r| r.final_probe_loss)).unwrap_or(f64::NAN),
                mean_final_asr_loss: mean(rs.iter().map(|r| r.final_asr_loss)).unwrap_or(f64::NAN),
                mean_final_gini: mean_opt(&rs, |r| last(r).map(|m| m.gini_overall)),
                mean_final_entropy_text: mean_opt(&rs, |r| last(r).and_then(|m| m.entropy_text)),
                mean_final_entropy_audio: mean_opt(&rs, |r| last(r).and_then(|m| m.entropy_audio)),
                mean_first_entropy_text: mean_opt(&rs, |r| first(r).and_then(|m| m.entropy_text)),
                mean_first_entropy_audio: mean_opt(&rs, |r| first(r).and_then(|m| m.entropy_audio)),
            }
        })
        .collect();

    let mut winners = Vec::new();
    let mut pick = |metric: &str, f: &dyn Fn(&VariantSummary) -> Option<f64>| {
        let best = summary
            .iter()
            .filter_map(|s| f(s).filter(|v| v.is_finite()).map(|v| (s.variant, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((variant, value)) = best {
            winners.push(Winner {
                metric: metric.to_string(),
                variant,
                value,
            });
        }
    };
    pick("final_probe_loss", &|s| Some(s.mean_final_probe_loss));
    pick("final_asr_loss", &|s| Some(s.mean_final_asr_loss));
    pick("final_gini", &|s| s.mean_final_gini);
    pick("final_entropy_text", &|s| s.mean_final_entropy_text);
    pick("final_entropy_audio", &|s| s.mean_final_entropy_audio);

    ComparisonReport {
        seeds: seeds.to_vec(),
        checkpoint_steps: checkpoint_steps(base.training.total_steps),
        runs,
        summary,
        winners,
    }
}
