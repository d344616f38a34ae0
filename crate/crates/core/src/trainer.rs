//! Training loop over simulated data-parallel groups.
//!
//! `steps` counts accumulation micro-steps; one optimizer step (a window)
//! covers `ga_steps` of them. Each group owns a tape per micro-step. Balance
//! terms for a group are arranged so that averaging group gradients yields
//! the gradient of the intended global objective.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisReport};
use crate::autodiff::{Tape, Var};
use crate::balance::{
    self, aux_free_update_mean, combined_loss, lbl_with_frequency, z_loss, BalanceStats, BalanceTerms,
    LossWeights,
};
use crate::config::{RunConfig, RunManifest};
use crate::data::{build_global_batch, heldout_sets, CorpusConfig, HeldoutSet};
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::parallel::{
    all_gather_counts, average_grads, run_accumulation_step, CommLog, FrequencyBuffer, ParallelPlan,
    PayloadKind, ReplicaSet, SyncScope, ELEMENT_BYTES,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BalanceMode {
    Micro,
    GlobalSync,
    GlobalBuffer,
    Shuffle,
    AuxFree,
    /// Global LBL plus a micro-batch LBL at the given weight.
    Mixed(f64),
}

impl fmt::Display for BalanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BalanceMode::Micro => f.write_str("micro"),
            BalanceMode::GlobalSync => f.write_str("global_sync"),
            BalanceMode::GlobalBuffer => f.write_str("global_buffer"),
            BalanceMode::Shuffle => f.write_str("shuffle"),
            BalanceMode::AuxFree => f.write_str("aux_free"),
            BalanceMode::Mixed(w) => write!(f, "mixed({w})"),
        }
    }
}

impl FromStr for BalanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "micro" => BalanceMode::Micro,
            "global_sync" => BalanceMode::GlobalSync,
            "global_buffer" => BalanceMode::GlobalBuffer,
            "shuffle" => BalanceMode::Shuffle,
            "aux_free" => BalanceMode::AuxFree,
            _ => {
                let w = s
                    .strip_prefix("mixed(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|w| w.trim().parse::<f64>().ok())
                    .filter(|w| w.is_finite() && *w >= 0.0);
                match w {
                    Some(w) => BalanceMode::Mixed(w),
                    None => {
                        return Err(Error::Config(format!(
                            "unknown balance mode `{s}` (expected micro, global_sync, global_buffer, \
                             shuffle, aux_free or mixed(<weight>))"
                        )))
                    }
                }
            }
        })
    }
}

impl TryFrom<String> for BalanceMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BalanceMode> for String {
    fn from(m: BalanceMode) -> String {
        m.to_string()
    }
}

impl BalanceMode {
    pub fn is_global(self) -> bool {
        matches!(
            self,
            BalanceMode::GlobalSync | BalanceMode::GlobalBuffer | BalanceMode::Mixed(_)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchPoint {
    /// Micro-step at which `mode` takes over; applied from the first window
    /// starting at or after it.
    pub step: usize,
    pub mode: BalanceMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub balance_mode: BalanceMode,
    pub switch_schedule: Vec<SwitchPoint>,
    /// Evaluate held-out perplexity every this many optimizer steps (0: final only).
    pub eval_every: usize,
    pub aux_free_step: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 3e-3,
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            balance_mode: BalanceMode::Micro,
            switch_schedule: Vec::new(),
            eval_every: 500,
            aux_free_step: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, plan: &ParallelPlan) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.steps % plan.ga_steps != 0 {
            return Err(Error::Config(format!(
                "steps {} must be a multiple of ga_steps {}",
                self.steps, plan.ga_steps
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        if !(self.aux_free_step > 0.0) {
            return Err(Error::Config("aux_free_step must be positive".into()));
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        let mut last = None;
        for p in &self.switch_schedule {
            if p.step >= self.steps || last.is_some_and(|l| p.step <= l) {
                return Err(Error::Config(
                    "switch steps must be strictly increasing and below steps".into(),
                ));
            }
            last = Some(p.step);
        }
        Ok(())
    }

    pub fn windows(&self, plan: &ParallelPlan) -> usize {
        self.steps / plan.ga_steps
    }

    /// Mode in force for optimizer window `window` (0-based).
    pub fn mode_at(&self, window: usize, plan: &ParallelPlan) -> BalanceMode {
        let micro_step = window * plan.ga_steps;
        self.switch_schedule
            .iter()
            .rev()
            .find(|p| p.step <= micro_step)
            .map_or(self.balance_mode, |p| p.mode)
    }
}

/// One optimizer step's metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub lm_loss: f64,
    pub lbl_micro: f64,
    pub lbl_global: f64,
    pub zloss: f64,
    pub ppl: Option<Vec<f64>>,
    pub max_freq: f64,
    pub comm_bytes: u64,
}

impl MetricsRecord {
    /// The LBL definition `mode` actually optimizes.
    pub fn optimized_lbl(&self, mode: BalanceMode) -> f64 {
        if mode.is_global() {
            self.lbl_global
        } else {
            self.lbl_micro
        }
    }
}

pub fn metrics_header(domains: &[String]) -> String {
    let mut h = String::from("step,lm_loss,lbl_micro,lbl_global,zloss");
    for d in domains {
        write!(h, ",ppl_{d}").unwrap();
    }
    h.push_str(",max_freq,comm_bytes");
    h
}

pub fn metrics_row(r: &MetricsRecord, n_domains: usize) -> String {
    let mut s = format!("{},{},{},{},{}", r.step, r.lm_loss, r.lbl_micro, r.lbl_global, r.zloss);
    for d in 0..n_domains {
        match &r.ppl {
            Some(p) => write!(s, ",{}", p[d]).unwrap(),
            None => s.push(','),
        }
    }
    write!(s, ",{},{}", r.max_freq, r.comm_bytes).unwrap();
    s
}

/// Parses a metrics file written by [`run_experiment`].
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<MetricsRecord>)> {
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let header = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let domains: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("ppl_").map(String::from))
        .collect();
    let nd = domains.len();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(format!("bad number in column {i}")))
        };
        let ppl = if rec.get(5).is_some_and(|s| !s.is_empty()) {
            Some((0..nd).map(|d| f(5 + d)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        out.push(MetricsRecord {
            step: f(0)? as usize,
            lm_loss: f(1)?,
            lbl_micro: f(2)?,
            lbl_global: f(3)?,
            zloss: f(4)?,
            ppl,
            max_freq: f(5 + nd)?,
            comm_bytes: f(6 + nd)? as u64,
        });
    }
    Ok((domains, out))
}

/// Mutable training state: master model, replicas, optimizer and buffers.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: LanguageModel,
    pub replicas: ReplicaSet,
    pub optimizer: Optimizer,
    /// `[layer][cell]`.
    pub buffers: Vec<Vec<FrequencyBuffer>>,
    pub comm: CommLog,
    pub window: usize,
    shuffle_rng: ChaCha8Rng,
}

/// Result of accumulating one window without applying the update.
#[derive(Clone, Debug)]
pub struct WindowOutcome {
    /// Mean over groups and micro-steps of each group's total loss; the
    /// averaged gradient is its gradient.
    pub objective: f64,
    pub grads: Vec<Vec<f64>>,
    pub lm_loss: f64,
    pub lbl_micro: f64,
    pub lbl_global: f64,
    pub zloss: f64,
    pub max_freq: f64,
    /// Window-local statistics `[layer][group]`.
    pub window_stats: Vec<Vec<BalanceStats>>,
}

fn mean_var(tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
    }
    Ok(acc.map(|a| tape.scale(a, 1.0 / vars.len() as f64)))
}

impl TrainState {
    pub fn new(model: LanguageModel, plan: &ParallelPlan, cfg: &TrainConfig) -> Self {
        let replicas = ReplicaSet::new(&model, plan.n_groups);
        let optimizer = Optimizer::new(cfg.optimizer.clone(), &model.params);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(3);
        Self {
            replicas,
            optimizer,
            buffers: Vec::new(),
            comm: CommLog::new(),
            window: 0,
            shuffle_rng,
            model,
        }
    }

    fn scope_for(mode: BalanceMode, plan: &ParallelPlan) -> SyncScope {
        match mode {
            BalanceMode::Micro => SyncScope::None,
            BalanceMode::Shuffle => SyncScope::Global,
            _ => plan.sync_scope,
        }
    }

    fn buffered(mode: BalanceMode, plan: &ParallelPlan) -> bool {
        mode == BalanceMode::GlobalBuffer || (plan.use_buffer && mode.is_global())
    }

    /// Forward and backward over one window of `ga_steps` global batches.
    pub fn accumulate_window(
        &mut self,
        batches: &[Vec<Vec<Vec<u32>>>],
        plan: &ParallelPlan,
        cfg: &TrainConfig,
    ) -> Result<WindowOutcome> {
        if batches.len() != plan.ga_steps {
            return Err(Error::Contract(format!(
                "{} accumulation batches for ga_steps {}",
                batches.len(),
                plan.ga_steps
            )));
        }
        let mode = cfg.mode_at(self.window, plan);
        let scope = Self::scope_for(mode, plan);
        let buffered = Self::buffered(mode, plan);
        let n_layers = self.model.n_layers();
        let (n_e, k) = (self.model.cfg.n_experts, self.model.cfg.top_k);
        let cells = plan.cells(scope);
        let mut cell_of = vec![0; plan.n_groups];
        for (c, cell) in cells.iter().enumerate() {
            cell.iter().for_each(|&g| cell_of[g] = c);
        }
        self.buffers = vec![vec![FrequencyBuffer::new(n_e, k); cells.len()]; n_layers];
        self.comm.step = self.window + 1;

        let micro_weight = match mode {
            BalanceMode::Mixed(w) => w,
            _ => cfg.weights.micro_mix_weight,
        };
        let weights = LossWeights {
            lbl_weight: if mode == BalanceMode::AuxFree { 0.0 } else { cfg.weights.lbl_weight },
            micro_mix_weight: micro_weight,
            zloss_weight: cfg.weights.zloss_weight,
        };

        let mut grad_sums: Vec<Option<Vec<Vec<f64>>>> = vec![None; plan.n_groups];
        let mut window_stats: Vec<Vec<BalanceStats>> =
            vec![vec![BalanceStats::empty(n_e, k); plan.n_groups]; n_layers];
        let (mut objective, mut lm, mut micro_val, mut zl) = (0.0, 0.0, 0.0, 0.0);
        let denom = (plan.ga_steps * plan.n_groups) as f64;

        for seqs in batches {
            let mut groups = run_accumulation_step(&self.replicas, seqs)?;
            let mut primary: Vec<Vec<Var>> = vec![Vec::new(); plan.n_groups];
            let mut micro: Vec<Vec<Var>> = vec![Vec::new(); plan.n_groups];
            let mut zs: Vec<Vec<Var>> = vec![Vec::new(); plan.n_groups];
            for l in 0..n_layers {
                let local: Vec<BalanceStats> = groups.iter().map(|g| g.stats[l].clone()).collect();
                for (w, s) in window_stats[l].iter_mut().zip(&local) {
                    w.merge(s)?;
                }
                for s in &local {
                    micro_val += s.lbl_value()? / (denom * n_layers as f64);
                }
                // frequency seen by each group, and the group's share of its cell
                let freqs: Vec<(Vec<f64>, f64)> = match mode {
                    BalanceMode::AuxFree => Vec::new(),
                    BalanceMode::Micro => local.iter().map(|s| Ok((s.frequencies()?, 1.0))).collect::<Result<_>>()?,
                    BalanceMode::Shuffle => {
                        let pooled: Vec<u8> = groups.iter().flat_map(|g| g.selection(l).iter().copied()).collect();
                        let t_local = local[0].n_tokens;
                        let (_, sample) = balance::sample_selection(&pooled, n_e, k, t_local, &mut self.shuffle_rng)?;
                        self.comm.push(
                            PayloadKind::FullMatrix,
                            (t_local * n_e) as u64 * ELEMENT_BYTES * plan.n_groups as u64,
                            plan.n_groups,
                        );
                        let f = sample.frequencies()?;
                        vec![(f, 1.0); plan.n_groups]
                    }
                    _ => {
                        let synced = all_gather_counts(&local, plan, scope, &mut self.comm)?;
                        let mut per_cell = Vec::with_capacity(cells.len());
                        for (c, s) in synced.iter().enumerate() {
                            let f = if buffered {
                                self.buffers[l][c].update(s)?;
                                self.buffers[l][c].frequencies()?
                            } else {
                                s.frequencies()?
                            };
                            per_cell.push(f);
                        }
                        (0..plan.n_groups)
                            .map(|g| {
                                let c = cell_of[g];
                                let share = cells[c].len() as f64 * local[g].n_tokens as f64
                                    / synced[c].n_tokens as f64;
                                (per_cell[c].clone(), share)
                            })
                            .collect()
                    }
                };
                for (g, step) in groups.iter_mut().enumerate() {
                    let out = &step.pass.layers[l];
                    let (probs, logits) = (out.probs, out.router_logits);
                    if let Some((f, share)) = freqs.get(g) {
                        let term = lbl_with_frequency(&mut step.tape, f, probs)?;
                        primary[g].push(step.tape.scale(term, *share));
                    }
                    if micro_weight != 0.0 {
                        let f = local[g].frequencies()?;
                        micro[g].push(lbl_with_frequency(&mut step.tape, &f, probs)?);
                    }
                    zs[g].push(z_loss(&mut step.tape, logits)?);
                }
            }
            for (g, step) in groups.iter_mut().enumerate() {
                let terms = BalanceTerms {
                    primary: mean_var(&mut step.tape, &primary[g])?,
                    micro: mean_var(&mut step.tape, &micro[g])?,
                    zloss: mean_var(&mut step.tape, &zs[g])?,
                };
                let loss = combined_loss(&mut step.tape, step.pass.lm_loss, &terms, &weights)?;
                let value = step.tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("loss in group {g}"),
                        step: self.window + 1,
                    });
                }
                objective += value / denom;
                lm += step.tape.value(step.pass.lm_loss).item() / denom;
                if let Some(z) = terms.zloss {
                    zl += step.tape.value(z).item() / denom;
                }
                step.tape.backward(loss)?;
                let grads = step.pass.bound.take_grads(&mut step.tape);
                match &mut grad_sums[g] {
                    Some(acc) => acc
                        .iter_mut()
                        .flatten()
                        .zip(grads.iter().flatten())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grads),
                }
            }
        }

        let per_group: Vec<Vec<Vec<f64>>> = grad_sums.into_iter().map(|g| g.expect("ga_steps >= 1")).collect();
        let mut grads = average_grads(&per_group)?;
        if plan.ga_steps > 1 {
            let s = 1.0 / plan.ga_steps as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= s);
        }

        let mut lbl_global = 0.0;
        let mut max_freq: f64 = 0.0;
        for layer in &window_stats {
            let pooled = BalanceStats::sum(layer.iter())?;
            lbl_global += pooled.lbl_value()? / n_layers as f64;
            max_freq = pooled.frequencies()?.into_iter().fold(max_freq, f64::max);
        }
        Ok(WindowOutcome {
            objective,
            grads,
            lm_loss: lm,
            lbl_micro: micro_val,
            lbl_global,
            zloss: zl,
            max_freq,
            window_stats,
        })
    }

    /// Applies one optimizer step and the bias update, then re-broadcasts.
    pub fn apply(&mut self, outcome: &WindowOutcome, plan: &ParallelPlan, cfg: &TrainConfig) -> Result<()> {
        let mode = cfg.mode_at(self.window, plan);
        self.optimizer.step(&mut self.model.params, &outcome.grads, cfg.lr)?;
        if mode == BalanceMode::AuxFree {
            let scope = plan.sync_scope;
            for (l, local) in outcome.window_stats.iter().enumerate() {
                let synced = all_gather_counts(local, plan, scope, &mut self.comm)?;
                self.model.biases[l] = aux_free_update_mean(&self.model.biases[l], &synced, cfg.aux_free_step)?;
            }
        }
        self.buffers.iter_mut().flatten().for_each(FrequencyBuffer::reset);
        self.replicas.broadcast(&self.model);
        self.replicas.check_integrity()?;
        if !self.model.params.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameters".into(),
                step: self.window + 1,
            });
        }
        self.window += 1;
        Ok(())
    }
}

/// Window objective and flattened averaged gradient at parameters `flat`,
/// evaluated on a copy of `state`.
pub fn window_objective(
    state: &TrainState,
    flat: &[f64],
    batches: &[Vec<Vec<Vec<u32>>>],
    plan: &ParallelPlan,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut s = state.clone();
    s.model.params.load_flat(flat)?;
    s.replicas.broadcast(&s.model);
    let out = s.accumulate_window(batches, plan, cfg)?;
    Ok((out.objective, out.grads.concat()))
}

/// One optimizer window: accumulate, update, and report.
pub fn train_step(
    state: &mut TrainState,
    batches: &[Vec<Vec<Vec<u32>>>],
    plan: &ParallelPlan,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    let step = state.window + 1;
    let out = state.accumulate_window(batches, plan, cfg)?;
    state.apply(&out, plan, cfg)?;
    Ok(MetricsRecord {
        step,
        lm_loss: out.lm_loss,
        lbl_micro: out.lbl_micro,
        lbl_global: out.lbl_global,
        zloss: out.zloss,
        ppl: None,
        max_freq: out.max_freq,
        comm_bytes: state.comm.bytes_at(step),
    })
}

/// `exp(mean token NLL)` per held-out domain.
pub fn evaluate_ppl(model: &LanguageModel, heldout: &[HeldoutSet]) -> Result<Vec<f64>> {
    heldout
        .iter()
        .map(|h| {
            let (nll, n) = model.nll(&h.seqs)?;
            Ok((nll / n as f64).exp())
        })
        .collect()
}

/// Source of per-window training batches.
pub struct BatchStream<'a> {
    corpus: &'a CorpusConfig,
    plan: &'a ParallelPlan,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a CorpusConfig, plan: &'a ParallelPlan, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { corpus, plan, rng }
    }

    /// `ga_steps` global batches, each one token matrix per group.
    pub fn next_window(&mut self) -> Result<Vec<Vec<Vec<Vec<u32>>>>> {
        (0..self.plan.ga_steps)
            .map(|_| {
                Ok(build_global_batch(self.corpus, self.plan.n_groups, self.plan.micro_batch_size, &mut self.rng)?
                    .into_iter()
                    .map(|mb| mb.tokens)
                    .collect())
            })
            .collect()
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const COMM_FILE: &str = "comm.csv";
pub const MODEL_FILE: &str = "final_model.bin";
pub const CONFIG_COPY: &str = "config.copy";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const ANALYSIS_DIR: &str = "analysis";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub domains: Vec<String>,
    pub metrics: Vec<MetricsRecord>,
    pub final_ppl: Vec<f64>,
    pub analysis: AnalysisReport,
}

impl RunSummary {
    pub fn mean_ppl(&self) -> f64 {
        self.final_ppl.iter().sum::<f64>() / self.final_ppl.len() as f64
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Model, corpus and held-out sets for a config.
pub fn build_run(cfg: &RunConfig) -> Result<(LanguageModel, CorpusConfig, Vec<HeldoutSet>)> {
    cfg.validate()?;
    let corpus = CorpusConfig::generate(&cfg.corpus)?;
    let heldout = heldout_sets(&corpus)?;
    let model = LanguageModel::new(&cfg.model, corpus.vocab_size, cfg.train.seed)?;
    Ok((model, corpus, heldout))
}

/// Runs analysis on a model and writes it under `dir/analysis`.
pub fn export_run_analysis(model: &LanguageModel, heldout: &[HeldoutSet], threshold: f64, dir: &Path) -> Result<AnalysisReport> {
    let report = analysis::analyze(model, heldout, threshold)?;
    analysis::export_analysis(&report, &dir.join(ANALYSIS_DIR))?;
    Ok(report)
}

/// Full training run into `dir`: manifest and config first, then metrics,
/// communication log, final parameters and analysis.
pub fn run_experiment(cfg: &RunConfig, manifest: &RunManifest, dir: &Path) -> Result<RunSummary> {
    let (model, corpus, heldout) = build_run(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(MANIFEST_FILE), manifest.to_toml()?)?;
    write_file(&dir.join(CONFIG_COPY), cfg.to_toml()?)?;

    let plan = &cfg.parallel;
    let tc = &cfg.train;
    let domains = corpus.domain_names();
    let mut state = TrainState::new(model, plan, tc);
    let mut stream = BatchStream::new(&corpus, plan, tc.seed);
    let n_windows = tc.windows(plan);
    let mut csv = metrics_header(&domains);
    csv.push('\n');
    let mut metrics = Vec::with_capacity(n_windows);
    let mut final_ppl = Vec::new();
    let metrics_path = dir.join(METRICS_FILE);
    for w in 0..n_windows {
        let batches = stream.next_window()?;
        let mut rec = match train_step(&mut state, &batches, plan, tc) {
            Ok(r) => r,
            Err(e) => {
                write_file(&metrics_path, &csv)?;
                return Err(e);
            }
        };
        let last = w + 1 == n_windows;
        if last || (tc.eval_every > 0 && rec.step % tc.eval_every == 0) {
            let ppl = evaluate_ppl(&state.model, &heldout)?;
            if last {
                final_ppl = ppl.clone();
            }
            rec.ppl = Some(ppl);
        }
        csv.push_str(&metrics_row(&rec, domains.len()));
        csv.push('\n');
        metrics.push(rec);
    }
    write_file(&metrics_path, &csv)?;
    state.comm.save_csv(&dir.join(COMM_FILE))?;
    let mut dump = Vec::new();
    state.model.export_params().write_to(&mut dump).expect("write to memory");
    write_file(&dir.join(MODEL_FILE), dump)?;
    let analysis = export_run_analysis(&state.model, &heldout, cfg.analysis.threshold, dir)?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        domains,
        metrics,
        final_ppl,
        analysis,
    })
}

/// Reloads a finished run's model (with gating biases) and held-out sets.
pub fn load_run(dir: &Path) -> Result<(RunConfig, LanguageModel, Vec<HeldoutSet>)> {
    let cfg_path = dir.join(CONFIG_COPY);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = RunConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Parse { path: cfg_path.clone(), msg },
        other => other,
    })?;
    let (mut model, _, heldout) = build_run(&cfg)?;
    let model_path = dir.join(MODEL_FILE);
    let bytes = std::fs::read(&model_path).map_err(|e| Error::io(&model_path, e))?;
    let dump = crate::params::ParamStore::read_from(&mut bytes.as_slice()).map_err(|msg| Error::Parse {
        path: model_path.clone(),
        msg,
    })?;
    model.import_params(&dump)?;
    Ok((cfg, model, heldout))
}

/// Side-by-side summary of two finished runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub names: [String; 2],
    pub rows: Vec<(String, [f64; 2])>,
}

impl Comparison {
    pub fn get(&self, metric: &str) -> Option<[f64; 2]> {
        self.rows.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("metric,{},{}\n", self.names[0], self.names[1]);
        for (m, [a, b]) in &self.rows {
            writeln!(s, "{m},{a},{b}").unwrap();
        }
        s
    }
}

fn run_metrics(dir: &Path) -> Result<Vec<(String, f64)>> {
    let (_, metrics) = read_metrics(&dir.join(METRICS_FILE))?;
    let last = metrics.last().ok_or_else(|| Error::Parse {
        path: dir.join(METRICS_FILE),
        msg: "no rows".into(),
    })?;
    let ppl = metrics
        .iter()
        .rev()
        .find_map(|r| r.ppl.clone())
        .ok_or_else(|| Error::Parse {
            path: dir.join(METRICS_FILE),
            msg: "no perplexity rows".into(),
        })?;
    let adir = dir.join(ANALYSIS_DIR);
    let (max_freq, entropy) = analysis::read_specialization_means(&adir.join(analysis::SPECIALIZATION_FILE))?;
    let freq = analysis::read_frequency_csv(&adir.join(analysis::FREQUENCY_FILE))?;
    let overall_max = freq.values.iter().flatten().flatten().copied().fold(0.0, f64::max);
    let score_path = adir.join(analysis::SCORE_FILE);
    let mut rdr = csv::Reader::from_path(&score_path).map_err(|e| Error::Parse {
        path: score_path.clone(),
        msg: e.to_string(),
    })?;
    let (mut score, mut n) = (0.0, 0usize);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: score_path.clone(),
            msg: e.to_string(),
        })?;
        score += rec.get(2).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Parse {
            path: score_path.clone(),
            msg: "bad score".into(),
        })?;
        n += 1;
    }
    Ok(vec![
        ("mean_ppl".into(), ppl.iter().sum::<f64>() / ppl.len() as f64),
        ("mean_max_freq".into(), max_freq),
        ("overall_max_freq".into(), overall_max),
        ("mean_entropy".into(), entropy),
        ("mean_topk_score_sum".into(), score / n.max(1) as f64),
        ("final_lm_loss".into(), last.lm_loss),
        ("final_lbl_micro".into(), last.lbl_micro),
        ("final_lbl_global".into(), last.lbl_global),
    ])
}

/// Reads two run directories and lines up their headline metrics.
pub fn compare_runs(a: &Path, b: &Path) -> Result<Comparison> {
    let (ma, mb) = (run_metrics(a)?, run_metrics(b)?);
    let name = |p: &Path| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Comparison {
        names: [name(a), name(b)],
        rows: ma.into_iter().zip(mb).map(|((m, x), (_, y))| (m, [x, y])).collect(),
    })
}
