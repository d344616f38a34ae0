//! In-process simulation of data-parallel groups.
//!
//! Groups are model replicas sharing parameter buffers. Collectives are
//! deterministic fixed-order reductions with byte accounting; there is no
//! transport.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::balance::BalanceStats;
use crate::error::{Error, Result};
use crate::model::{ForwardPass, LanguageModel};

/// Width of the token set behind the synchronized selection frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SyncScope {
    None,
    Subgroup(usize),
    Global,
}

impl fmt::Display for SyncScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyncScope::None => write!(f, "none"),
            SyncScope::Subgroup(n) => write!(f, "subgroup({n})"),
            SyncScope::Global => write!(f, "global"),
        }
    }
}

impl FromStr for SyncScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => return Ok(SyncScope::None),
            "global" => return Ok(SyncScope::Global),
            _ => {}
        }
        s.strip_prefix("subgroup(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|n| n.trim().parse().ok())
            .map(SyncScope::Subgroup)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown sync scope `{s}` (expected none, global or subgroup(<size>))"
                ))
            })
    }
}

impl TryFrom<String> for SyncScope {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SyncScope> for String {
    fn from(s: SyncScope) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelPlan {
    pub n_groups: usize,
    /// Sequences per group per accumulation step.
    pub micro_batch_size: usize,
    pub ga_steps: usize,
    pub sync_scope: SyncScope,
    pub use_buffer: bool,
}

impl Default for ParallelPlan {
    fn default() -> Self {
        Self {
            n_groups: 8,
            micro_batch_size: 1,
            ga_steps: 1,
            sync_scope: SyncScope::Global,
            use_buffer: false,
        }
    }
}

impl ParallelPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.micro_batch_size == 0 || self.ga_steps == 0 {
            return Err(Error::Config(
                "n_groups, micro_batch_size and ga_steps must be positive".into(),
            ));
        }
        if let SyncScope::Subgroup(s) = self.sync_scope {
            if s == 0 || self.n_groups % s != 0 {
                return Err(Error::Config(format!(
                    "subgroup size {s} must divide n_groups {}",
                    self.n_groups
                )));
            }
        }
        Ok(())
    }

    pub fn scope_width(&self, scope: SyncScope) -> usize {
        match scope {
            SyncScope::None => 1,
            SyncScope::Subgroup(s) => s,
            SyncScope::Global => self.n_groups,
        }
    }

    /// Group indices of each scope cell, in group order.
    pub fn cells(&self, scope: SyncScope) -> Vec<Vec<usize>> {
        let w = self.scope_width(scope).max(1);
        (0..self.n_groups)
            .collect::<Vec<_>>()
            .chunks(w)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Balance BSZ in sequences: `mbs * scope width * (ga if buffered)`.
    pub fn balance_bsz(&self) -> usize {
        self.micro_batch_size
            * self.scope_width(self.sync_scope)
            * if self.use_buffer { self.ga_steps } else { 1 }
    }
}

/// Cumulative synchronized counts within one optimizer window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyBuffer {
    pub cum_counts: Vec<u64>,
    pub cum_tokens: usize,
    pub ga_step_index: usize,
    pub top_k: usize,
}

impl FrequencyBuffer {
    pub fn new(n_experts: usize, top_k: usize) -> Self {
        Self {
            cum_counts: vec![0; n_experts],
            cum_tokens: 0,
            ga_step_index: 0,
            top_k,
        }
    }

    pub fn update(&mut self, synced: &BalanceStats) -> Result<()> {
        if synced.n_experts() != self.cum_counts.len() || synced.top_k != self.top_k {
            return Err(Error::SyncIntegrity(
                "buffer and statistics disagree on N_E or top_k".into(),
            ));
        }
        self.cum_counts
            .iter_mut()
            .zip(&synced.counts)
            .for_each(|(a, b)| *a += b);
        self.cum_tokens += synced.n_tokens;
        self.ga_step_index += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.cum_counts.iter_mut().for_each(|c| *c = 0);
        self.cum_tokens = 0;
        self.ga_step_index = 0;
    }

    /// Current `f` from cumulative counts.
    pub fn frequencies(&self) -> Result<Vec<f64>> {
        if self.cum_tokens == 0 {
            return Err(Error::EmptyBatch("frequency buffer"));
        }
        let d = (self.cum_tokens * self.top_k) as f64;
        Ok(self.cum_counts.iter().map(|&c| c as f64 / d).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    FreqVector,
    FullMatrix,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::FreqVector => "freq_vector",
            PayloadKind::FullMatrix => "full_matrix",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommRecord {
    pub step: usize,
    pub payload_kind: PayloadKind,
    pub bytes: u64,
    pub participants: usize,
}

pub const ELEMENT_BYTES: u64 = 8;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommLog {
    pub records: Vec<CommRecord>,
    /// Optimizer step stamped on new records.
    pub step: usize,
}

impl CommLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, payload_kind: PayloadKind, bytes: u64, participants: usize) {
        self.records.push(CommRecord {
            step: self.step,
            payload_kind,
            bytes,
            participants,
        });
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn bytes_at(&self, step: usize) -> u64 {
        self.records
            .iter()
            .filter(|r| r.step == step)
            .map(|r| r.bytes)
            .sum()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,payload_kind,bytes,participants")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.step, r.payload_kind, r.bytes, r.participants)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Sums statistics within each scope cell and logs one frequency-vector
/// all-gather per cell with more than one participant.
pub fn all_gather_counts(
    local: &[BalanceStats],
    plan: &ParallelPlan,
    scope: SyncScope,
    log: &mut CommLog,
) -> Result<Vec<BalanceStats>> {
    if local.len() != plan.n_groups {
        return Err(Error::Contract(format!(
            "{} local statistics for {} groups",
            local.len(),
            plan.n_groups
        )));
    }
    let n_e = local.first().map_or(0, BalanceStats::n_experts);
    if local.iter().any(|s| s.n_experts() != n_e) {
        return Err(Error::SyncIntegrity("groups disagree on N_E".into()));
    }
    plan.cells(scope)
        .into_iter()
        .map(|cell| {
            let synced = BalanceStats::sum(cell.iter().map(|&g| &local[g]))?;
            if cell.len() > 1 {
                log.push(
                    PayloadKind::FreqVector,
                    n_e as u64 * ELEMENT_BYTES * cell.len() as u64,
                    cell.len(),
                );
            }
            Ok(synced)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommReport {
    pub syncs: usize,
    pub freq_vector_bytes: u64,
    pub full_matrix_bytes: u64,
    pub ratio: f64,
}

/// Frequency-vector traffic against shipping the `tokens × N_E` selection
/// matrix at the same element width for every logged sync.
pub fn comm_overhead_report(log: &CommLog, n_experts: usize, tokens_per_group: usize) -> CommReport {
    let mut syncs = 0;
    let mut freq = 0;
    let mut matrix = 0;
    for r in log.records.iter().filter(|r| r.payload_kind == PayloadKind::FreqVector) {
        syncs += 1;
        freq += r.bytes;
        matrix += (tokens_per_group * n_experts) as u64 * ELEMENT_BYTES * r.participants as u64;
    }
    CommReport {
        syncs,
        freq_vector_bytes: freq,
        full_matrix_bytes: matrix,
        ratio: if freq == 0 { 0.0 } else { matrix as f64 / freq as f64 },
    }
}

/// Data-parallel replicas of one model.
#[derive(Clone, Debug)]
pub struct ReplicaSet {
    pub replicas: Vec<LanguageModel>,
}

impl ReplicaSet {
    pub fn new(master: &LanguageModel, n_groups: usize) -> Self {
        Self {
            replicas: vec![master.clone(); n_groups],
        }
    }

    pub fn broadcast(&mut self, master: &LanguageModel) {
        self.replicas.iter_mut().for_each(|r| *r = master.clone());
    }

    /// All replicas must be bit-identical to replica 0.
    pub fn check_integrity(&self) -> Result<()> {
        let first = &self.replicas[0];
        for (g, r) in self.replicas.iter().enumerate().skip(1) {
            if let Some(param) = r.diverges_from(first) {
                return Err(Error::ReplicaDivergence { group: g, param });
            }
        }
        Ok(())
    }
}

/// One group's forward pass for one accumulation step.
pub struct GroupStep {
    pub tape: Tape,
    pub pass: ForwardPass,
    /// Local statistics per MoE layer.
    pub stats: Vec<BalanceStats>,
}

impl GroupStep {
    pub fn selection(&self, layer: usize) -> &[u8] {
        &self.pass.layers[layer].decision.selection
    }
}

/// Independent forward pass in every group on its own micro-batch.
pub fn run_accumulation_step(replicas: &ReplicaSet, batches: &[Vec<Vec<u32>>]) -> Result<Vec<GroupStep>> {
    if batches.len() != replicas.replicas.len() {
        return Err(Error::Contract(format!(
            "{} micro-batches for {} groups",
            batches.len(),
            replicas.replicas.len()
        )));
    }
    replicas.check_integrity()?;
    replicas
        .replicas
        .iter()
        .zip(batches)
        .map(|(model, seqs)| {
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, seqs)?;
            let stats = pass
                .layers
                .iter()
                .map(|l| BalanceStats::from_decision(&l.decision))
                .collect();
            Ok(GroupStep { tape, pass, stats })
        })
        .collect()
}

/// Pairwise sum of equal-length vectors in fixed order.
fn pairwise_add(items: &[&[f64]]) -> Vec<f64> {
    match items.len() {
        0 => Vec::new(),
        1 => items[0].to_vec(),
        n => {
            let (l, r) = items.split_at(n / 2);
            let mut a = pairwise_add(l);
            let b = pairwise_add(r);
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        }
    }
}

/// Mean of per-group gradient sets (one `Vec` per parameter) by fixed-order
/// pairwise summation followed by division.
pub fn average_grads(per_group: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let first = per_group
        .first()
        .ok_or_else(|| Error::Contract("averaging zero gradient sets".into()))?;
    let n = per_group.len() as f64;
    (0..first.len())
        .map(|p| {
            let parts: Vec<&[f64]> = per_group.iter().map(|g| g[p].as_slice()).collect();
            if parts.iter().any(|x| x.len() != parts[0].len()) {
                return Err(Error::Contract("gradient shapes differ between groups".into()));
            }
            let mut s = pairwise_add(&parts);
            s.iter_mut().for_each(|v| *v /= n);
            Ok(s)
        })
        .collect()
}
