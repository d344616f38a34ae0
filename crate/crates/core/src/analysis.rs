//! Expert specialization statistics on held-out domain data.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::data::HeldoutSet;
use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::moe::GatingDecision;

pub const DEFAULT_THRESHOLD: f64 = 0.15;

/// Routing decisions per domain and layer: `[domain][layer]`.
pub fn route_heldout(model: &LanguageModel, heldout: &[HeldoutSet]) -> Result<Vec<Vec<GatingDecision>>> {
    heldout
        .iter()
        .map(|set| {
            if set.seqs.is_empty() {
                return Err(Error::EmptyBatch("held-out set"));
            }
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &set.seqs)?;
            Ok(pass.layers.into_iter().map(|l| l.decision).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainFrequencyMatrix {
    pub domains: Vec<String>,
    pub n_experts: usize,
    /// `[layer][domain][expert]`; each row sums to 1.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl DomainFrequencyMatrix {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, layer: usize, domain: usize) -> &[f64] {
        &self.values[layer][domain]
    }

    /// Builds the matrix from `[domain][layer]` decisions.
    pub fn from_decisions(domains: Vec<String>, decisions: &[Vec<GatingDecision>]) -> Result<Self> {
        let n_layers = decisions.first().map_or(0, Vec::len);
        let n_experts = decisions
            .first()
            .and_then(|d| d.first())
            .map_or(0, GatingDecision::n_experts);
        let mut values = vec![Vec::with_capacity(domains.len()); n_layers];
        for per_layer in decisions {
            for (l, d) in per_layer.iter().enumerate() {
                let total = d.n_tokens() * d.top_k;
                if total == 0 {
                    return Err(Error::EmptyBatch("held-out set"));
                }
                let mut counts = vec![0u64; n_experts];
                for t in 0..d.n_tokens() {
                    for &e in d.indices(t) {
                        counts[e] += 1;
                    }
                }
                values[l].push(counts.iter().map(|&c| c as f64 / total as f64).collect());
            }
        }
        Ok(Self {
            domains,
            n_experts,
            values,
        })
    }
}

pub fn expert_frequency_by_domain(model: &LanguageModel, heldout: &[HeldoutSet]) -> Result<DomainFrequencyMatrix> {
    let decisions = route_heldout(model, heldout)?;
    DomainFrequencyMatrix::from_decisions(heldout.iter().map(|h| h.domain.clone()).collect(), &decisions)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopKScoreProfile {
    pub domains: Vec<String>,
    /// `[layer][domain]` mean over tokens of the summed top-k scores.
    pub values: Vec<Vec<f64>>,
    /// Score sum when every expert receives the identity score `1/N_E`.
    pub baseline: f64,
}

impl TopKScoreProfile {
    pub fn from_decisions(domains: Vec<String>, decisions: &[Vec<GatingDecision>]) -> Self {
        let first = &decisions[0][0];
        let baseline = first.top_k as f64 / first.n_experts() as f64;
        let n_layers = decisions[0].len();
        let mut values = vec![Vec::new(); n_layers];
        for per_layer in decisions {
            for (l, d) in per_layer.iter().enumerate() {
                let sum: f64 = d.topk_scores.data().iter().sum();
                values[l].push(sum / d.n_tokens() as f64);
            }
        }
        Self {
            domains,
            values,
            baseline,
        }
    }

    pub fn mean(&self) -> f64 {
        let all: Vec<f64> = self.values.iter().flatten().copied().collect();
        all.iter().sum::<f64>() / all.len() as f64
    }
}

pub fn topk_score_sum(model: &LanguageModel, heldout: &[HeldoutSet]) -> Result<TopKScoreProfile> {
    let decisions = route_heldout(model, heldout)?;
    Ok(TopKScoreProfile::from_decisions(
        heldout.iter().map(|h| h.domain.clone()).collect(),
        &decisions,
    ))
}

pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Jaccard index; two empty sets count as identical (1.0).
pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSummary {
    pub layer: usize,
    pub domain: String,
    pub max_freq: f64,
    pub entropy: f64,
    pub high: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overlap {
    pub layer: usize,
    pub a: String,
    pub b: String,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecializationSummary {
    pub threshold: f64,
    pub rows: Vec<DomainSummary>,
    pub overlaps: Vec<Overlap>,
}

impl SpecializationSummary {
    pub fn mean_max_freq(&self) -> f64 {
        self.rows.iter().map(|r| r.max_freq).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_entropy(&self) -> f64 {
        self.rows.iter().map(|r| r.entropy).sum::<f64>() / self.rows.len() as f64
    }
}

pub fn specialization_metrics(freq: &DomainFrequencyMatrix, threshold: f64) -> Result<SpecializationSummary> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let mut rows = Vec::new();
    let mut overlaps = Vec::new();
    for (l, layer) in freq.values.iter().enumerate() {
        let mut sets = Vec::new();
        for (d, row) in layer.iter().enumerate() {
            let high: BTreeSet<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > threshold)
                .map(|(e, _)| e)
                .collect();
            rows.push(DomainSummary {
                layer: l,
                domain: freq.domains[d].clone(),
                max_freq: row.iter().copied().fold(0.0, f64::max),
                entropy: entropy(row),
                high: high.clone(),
            });
            sets.push(high);
        }
        for a in 0..sets.len() {
            for b in a + 1..sets.len() {
                overlaps.push(Overlap {
                    layer: l,
                    a: freq.domains[a].clone(),
                    b: freq.domains[b].clone(),
                    jaccard: jaccard(&sets[a], &sets[b]),
                });
            }
        }
    }
    Ok(SpecializationSummary {
        threshold,
        rows,
        overlaps,
    })
}

pub const FREQUENCY_FILE: &str = "expert_frequency.csv";
pub const SCORE_FILE: &str = "topk_score_sum.csv";
pub const SPECIALIZATION_FILE: &str = "specialization.csv";
pub const OVERLAP_FILE: &str = "overlap.csv";

pub fn frequency_csv(m: &DomainFrequencyMatrix) -> String {
    let mut s = String::from("layer,domain,expert,value\n");
    for (l, layer) in m.values.iter().enumerate() {
        for (d, row) in layer.iter().enumerate() {
            for (e, v) in row.iter().enumerate() {
                writeln!(s, "{l},{},{e},{v}", m.domains[d]).unwrap();
            }
        }
    }
    s
}

pub fn score_csv(p: &TopKScoreProfile) -> String {
    let mut s = String::from("layer,domain,value,baseline\n");
    for (l, layer) in p.values.iter().enumerate() {
        for (d, v) in layer.iter().enumerate() {
            writeln!(s, "{l},{},{v},{}", p.domains[d], p.baseline).unwrap();
        }
    }
    s
}

pub fn specialization_csv(sum: &SpecializationSummary) -> String {
    let mut s = String::from("layer,domain,max_freq,entropy,high_experts\n");
    for r in &sum.rows {
        let high: Vec<String> = r.high.iter().map(usize::to_string).collect();
        writeln!(s, "{},{},{},{},{}", r.layer, r.domain, r.max_freq, r.entropy, high.join(";")).unwrap();
    }
    s
}

pub fn overlap_csv(sum: &SpecializationSummary) -> String {
    let mut s = String::from("layer,domain_a,domain_b,jaccard\n");
    for o in &sum.overlaps {
        writeln!(s, "{},{},{},{}", o.layer, o.a, o.b, o.jaccard).unwrap();
    }
    s
}

/// Everything the analysis step produces for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub frequency: DomainFrequencyMatrix,
    pub scores: TopKScoreProfile,
    pub summary: SpecializationSummary,
}

pub fn analyze(model: &LanguageModel, heldout: &[HeldoutSet], threshold: f64) -> Result<AnalysisReport> {
    let decisions = route_heldout(model, heldout)?;
    let domains: Vec<String> = heldout.iter().map(|h| h.domain.clone()).collect();
    let frequency = DomainFrequencyMatrix::from_decisions(domains.clone(), &decisions)?;
    let scores = TopKScoreProfile::from_decisions(domains, &decisions);
    let summary = specialization_metrics(&frequency, threshold)?;
    Ok(AnalysisReport {
        frequency,
        scores,
        summary,
    })
}

/// Writes the four CSV files into `dir`, creating it if needed.
pub fn export_analysis(report: &AnalysisReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        (FREQUENCY_FILE, frequency_csv(&report.frequency)),
        (SCORE_FILE, score_csv(&report.scores)),
        (SPECIALIZATION_FILE, specialization_csv(&report.summary)),
        (OVERLAP_FILE, overlap_csv(&report.summary)),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses a long-format frequency file back into a matrix.
pub fn read_frequency_csv(path: &Path) -> Result<DomainFrequencyMatrix> {
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let mut domains: Vec<String> = Vec::new();
    let mut values: Vec<Vec<Vec<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        if rec.len() != 4 {
            return Err(parse_err(format!("expected 4 columns, found {}", rec.len())));
        }
        let num = |i: usize| -> Result<usize> { rec[i].parse().map_err(|_| parse_err(format!("bad integer `{}`", &rec[i]))) };
        let (l, e) = (num(0)?, num(2)?);
        let v: f64 = rec[3].parse().map_err(|_| parse_err(format!("bad value `{}`", &rec[3])))?;
        let d = match domains.iter().position(|x| x == &rec[1]) {
            Some(d) => d,
            None => {
                domains.push(rec[1].to_string());
                domains.len() - 1
            }
        };
        if values.len() <= l {
            values.resize(l + 1, Vec::new());
        }
        if values[l].len() <= d {
            values[l].resize(d + 1, Vec::new());
        }
        if values[l][d].len() != e {
            return Err(parse_err(format!("expert index {e} out of order")));
        }
        values[l][d].push(v);
    }
    let n_experts = values.first().and_then(|l| l.first()).map_or(0, Vec::len);
    Ok(DomainFrequencyMatrix {
        domains,
        n_experts,
        values,
    })
}

/// Reads a `specialization.csv` back into `(mean max frequency, mean entropy)`.
pub fn read_specialization_means(path: &Path) -> Result<(f64, f64)> {
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let (mut max, mut ent, mut n) = (0.0, 0.0, 0usize);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let f = |i: usize| -> Result<f64> { rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("bad number".into())) };
        max += f(2)?;
        ent += f(3)?;
        n += 1;
    }
    if n == 0 {
        return Err(parse_err("no rows".into()));
    }
    Ok((max / n as f64, ent / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::moe::select_topk;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decision(rows: Vec<Vec<f64>>, k: usize) -> GatingDecision {
        select_topk(&Tensor::from_rows(&rows).unwrap(), k, None).unwrap()
    }

    fn random_decision(rng: &mut ChaCha8Rng, t: usize, n: usize, k: usize) -> GatingDecision {
        let rows = (0..t)
            .map(|_| {
                let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let s: f64 = z.iter().map(|v| v.exp()).sum();
                z.iter().map(|v| v.exp() / s).collect()
            })
            .collect();
        decision(rows, k)
    }

    #[test]
    fn single_expert_routing_gives_one_hot_row() {
        let d = decision(vec![vec![0.9, 0.05, 0.05]; 5], 1);
        let m = DomainFrequencyMatrix::from_decisions(vec!["a".into()], &[vec![d]]).unwrap();
        assert_eq!(m.row(0, 0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn random_routing_is_near_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 8;
        let t = 4000;
        let rows = (0..t)
            .map(|_| {
                let mut r = vec![0.0; n];
                r[rng.gen_range(0..n)] = 1.0;
                r
            })
            .collect();
        let m = DomainFrequencyMatrix::from_decisions(vec!["a".into()], &[vec![decision(rows, 1)]]).unwrap();
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / t as f64).sqrt();
        assert!(m.row(0, 0).iter().all(|f| (f - p).abs() < 3.0 * sigma + 1e-12));
    }

    #[test]
    fn frequency_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let decisions: Vec<Vec<GatingDecision>> = (0..3)
            .map(|_| (0..2).map(|_| random_decision(&mut rng, 30, 6, 2)).collect())
            .collect();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let m = DomainFrequencyMatrix::from_decisions(names, &decisions).unwrap();
        for (d, per_layer) in decisions.iter().enumerate() {
            for (l, dec) in per_layer.iter().enumerate() {
                let row = m.row(l, d);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for e in 0..6 {
                    let c = (0..30).filter(|&t| dec.selected(t, e)).count();
                    assert!((row[e] - c as f64 / 60.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn topk_score_baseline_and_extremes() {
        let uniform = decision(vec![vec![0.25; 4]; 3], 2);
        let p = TopKScoreProfile::from_decisions(vec!["u".into()], &[vec![uniform]]);
        assert_eq!(p.baseline, 0.5);
        assert_eq!(p.values[0][0], p.baseline);
        let peaked = decision(vec![vec![1.0, 0.0, 0.0, 0.0]; 3], 2);
        let p = TopKScoreProfile::from_decisions(vec!["p".into()], &[vec![peaked]]);
        assert!((p.values[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_score_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_decision(&mut rng, 25, 7, 3);
        let mut direct = 0.0;
        for t in 0..25 {
            let mut row: Vec<f64> = d.probs.row_slice(t).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            direct += row[..3].iter().sum::<f64>();
        }
        let p = TopKScoreProfile::from_decisions(vec!["r".into()], &[vec![d]]);
        assert!((p.values[0][0] - direct / 25.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_rows_summary() {
        let n = 16;
        let m = DomainFrequencyMatrix {
            domains: vec!["a".into(), "b".into()],
            n_experts: n,
            values: vec![vec![vec![1.0 / n as f64; n]; 2]],
        };
        let s = specialization_metrics(&m, DEFAULT_THRESHOLD).unwrap();
        for r in &s.rows {
            assert_eq!(r.max_freq, 1.0 / n as f64);
            assert!((r.entropy - (n as f64).ln()).abs() < 1e-12);
            assert!(r.high.is_empty());
        }
        assert_eq!(s.overlaps[0].jaccard, 1.0);
        assert!(specialization_metrics(&m, 1.0).is_err());
    }

    #[test]
    fn high_sets_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let w: Vec<f64> = (0..6).map(|_| rng.gen::<f64>().powi(3)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            })
            .collect();
        let m = DomainFrequencyMatrix {
            domains: ["a", "b", "c"].map(String::from).to_vec(),
            n_experts: 6,
            values: vec![rows.clone()],
        };
        let s = specialization_metrics(&m, 0.15).unwrap();
        let sets: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| (0..6).filter(|&e| r[e] > 0.15).collect())
            .collect();
        let mut k = 0;
        for a in 0..3 {
            assert_eq!(s.rows[a].high.iter().copied().collect::<Vec<_>>(), sets[a]);
            for b in a + 1..3 {
                let inter = sets[a].iter().filter(|e| sets[b].contains(e)).count();
                let mut uni = sets[a].clone();
                uni.extend(sets[b].iter().filter(|e| !sets[a].contains(e)));
                let expect = if uni.is_empty() { 1.0 } else { inter as f64 / uni.len() as f64 };
                assert_eq!(s.overlaps[k].jaccard, expect);
                k += 1;
            }
        }
    }

    #[test]
    fn export_round_trip_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let decisions: Vec<Vec<GatingDecision>> = (0..2)
            .map(|_| (0..3).map(|_| random_decision(&mut rng, 20, 5, 2)).collect())
            .collect();
        let names: Vec<String> = ["x", "y"].map(String::from).to_vec();
        let frequency = DomainFrequencyMatrix::from_decisions(names.clone(), &decisions).unwrap();
        let report = AnalysisReport {
            summary: specialization_metrics(&frequency, 0.15).unwrap(),
            scores: TopKScoreProfile::from_decisions(names, &decisions),
            frequency,
        };
        let dir = tempfile::tempdir().unwrap();
        export_analysis(&report, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(FREQUENCY_FILE)).unwrap();
        export_analysis(&report, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(FREQUENCY_FILE)).unwrap());
        let text = String::from_utf8(first).unwrap();
        assert_eq!(text.lines().count() - 1, 3 * 2 * 5);
        let back = read_frequency_csv(&dir.path().join(FREQUENCY_FILE)).unwrap();
        assert_eq!(back, report.frequency);
        let (mx, en) = read_specialization_means(&dir.path().join(SPECIALIZATION_FILE)).unwrap();
        assert!((mx - report.summary.mean_max_freq()).abs() < 1e-12);
        assert!((en - report.summary.mean_entropy()).abs() < 1e-12);
    }
}
