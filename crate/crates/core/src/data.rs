//! Synthetic multi-domain corpus.
//!
//! Each domain is an order-1 Markov chain over a shared vocabulary. Training
//! micro-batches are domain-pure; the domain behind each group's micro-batch
//! is drawn from the recipe. Every sequence is generated from its own 64-bit
//! seed. Training seeds have the top bit clear and held-out seeds have it set,
//! so the two sets never intersect.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HELDOUT_BIT: u64 = 1 << 63;
const ROW_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct DomainSpec {
    pub name: String,
    pub transition: Vec<Vec<f64>>,
    pub start_dist: Vec<f64>,
    pub seed: u64,
    cdf: Vec<Vec<f64>>,
    start_cdf: Vec<f64>,
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn check_stochastic(what: &str, p: &[f64], v: usize) -> Result<()> {
    if p.len() != v {
        return Err(Error::Validation(format!("{what} has {} entries, expected {v}", p.len())));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::Validation(format!("{what} is not stochastic (sum {sum})")));
    }
    Ok(())
}

fn sample_cdf(cdf: &[f64], rng: &mut impl Rng) -> u32 {
    let u = rng.gen::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u32
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, transition: Vec<Vec<f64>>, start_dist: Vec<f64>, seed: u64) -> Result<Self> {
        let name = name.into();
        let v = transition.len();
        if v == 0 {
            return Err(Error::Validation(format!("domain `{name}` has an empty transition matrix")));
        }
        for (r, row) in transition.iter().enumerate() {
            check_stochastic(&format!("domain `{name}` transition row {r}"), row, v)?;
        }
        check_stochastic(&format!("domain `{name}` start distribution"), &start_dist, v)?;
        Ok(Self {
            cdf: transition.iter().map(|r| cumulative(r)).collect(),
            start_cdf: cumulative(&start_dist),
            name,
            transition,
            start_dist,
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.transition.len()
    }

    /// Stationary distribution by power iteration from the start distribution.
    pub fn stationary(&self) -> Vec<f64> {
        let v = self.vocab_size();
        let mut pi = vec![1.0 / v as f64; v];
        for _ in 0..2000 {
            let mut next = vec![0.0; v];
            for (i, row) in self.transition.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    next[j] += pi[i] * p;
                }
            }
            // lazy step keeps periodic chains convergent
            for (a, b) in next.iter_mut().zip(&pi) {
                *a = 0.5 * (*a + b);
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-13 {
                break;
            }
        }
        pi
    }
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn generate_sequence(spec: &DomainSpec, len: usize, rng: &mut impl Rng) -> Result<Vec<u32>> {
    if len == 0 {
        return Err(Error::Validation("sequence length must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(len);
    let mut cur = sample_cdf(&spec.start_cdf, rng);
    out.push(cur);
    for _ in 1..len {
        cur = sample_cdf(&spec.cdf[cur as usize], rng);
        out.push(cur);
    }
    Ok(out)
}

/// Sequence from a standalone per-sequence seed.
pub fn sequence_from_seed(spec: &DomainSpec, len: usize, seed: u64) -> Result<Vec<u32>> {
    generate_sequence(spec, len, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainStructure {
    /// Shared vocabulary, domain-preferred token subsets.
    Markov,
    /// Each domain lives on its own token range.
    Disjoint,
}

/// Corpus section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub domains: Vec<String>,
    /// Empty means uniform.
    pub recipe: Vec<f64>,
    pub structure: DomainStructure,
    /// Successors per token inside the domain's preferred subset.
    pub branching: usize,
    /// Probability mass spread uniformly over the whole vocabulary.
    pub noise: f64,
    /// Minimum pairwise total-variation distance between stationary distributions.
    pub separation: f64,
    pub heldout_per_domain: usize,
    pub seed: u64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 64,
            domains: ["code-like", "math-like", "zh-like", "general"]
                .map(String::from)
                .to_vec(),
            recipe: Vec::new(),
            structure: DomainStructure::Markov,
            branching: 4,
            noise: 0.1,
            separation: 0.2,
            heldout_per_domain: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub domains: Vec<DomainSpec>,
    pub recipe: Vec<f64>,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub heldout_per_domain: usize,
    pub seed: u64,
}

fn domain_seed(base: u64, d: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (d as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn markov_domain(s: &CorpusSettings, d: usize) -> Result<DomainSpec> {
    let v = s.vocab_size;
    let seed = domain_seed(s.seed, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preferred = rand::seq::index::sample(&mut rng, v, (v / 2).max(1)).into_vec();
    preferred.sort_unstable();
    let branching = s.branching.clamp(1, preferred.len());
    let transition = (0..v)
        .map(|_| {
            let mut row = vec![s.noise / v as f64; v];
            let succ = rand::seq::index::sample(&mut rng, preferred.len(), branching);
            let w: Vec<f64> = (0..branching).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = w.iter().sum();
            for (k, j) in succ.iter().enumerate() {
                row[preferred[j]] += (1.0 - s.noise) * w[k] / total;
            }
            row
        })
        .collect();
    let mut start = vec![0.0; v];
    for &t in &preferred {
        start[t] = 1.0 / preferred.len() as f64;
    }
    DomainSpec::new(&s.domains[d], transition, start, seed)
}

fn disjoint_domain(s: &CorpusSettings, d: usize) -> Result<DomainSpec> {
    let v = s.vocab_size;
    let n = s.domains.len();
    let width = v / n;
    if width == 0 {
        return Err(Error::Config(format!(
            "vocab_size {v} too small for {n} disjoint domains"
        )));
    }
    let lo = d * width;
    let seed = domain_seed(s.seed, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branching = s.branching.clamp(1, width);
    let transition = (0..v)
        .map(|_| {
            let mut row = vec![0.0; v];
            let succ = rand::seq::index::sample(&mut rng, width, branching);
            let w: Vec<f64> = (0..branching).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = w.iter().sum();
            for (k, j) in succ.iter().enumerate() {
                row[lo + j] += w[k] / total;
            }
            row
        })
        .collect();
    let mut start = vec![0.0; v];
    start[lo..lo + width].iter_mut().for_each(|x| *x = 1.0 / width as f64);
    DomainSpec::new(&s.domains[d], transition, start, seed)
}

impl CorpusConfig {
    pub fn generate(s: &CorpusSettings) -> Result<Self> {
        if s.domains.is_empty() || s.vocab_size < 2 || s.seq_len < 2 {
            return Err(Error::Config(
                "corpus needs at least one domain, vocab_size >= 2 and seq_len >= 2".into(),
            ));
        }
        if s.heldout_per_domain == 0 {
            return Err(Error::Config("heldout_per_domain must be positive".into()));
        }
        if !(0.0..=1.0).contains(&s.noise) {
            return Err(Error::Config("noise must lie in [0, 1]".into()));
        }
        let recipe = if s.recipe.is_empty() {
            vec![1.0 / s.domains.len() as f64; s.domains.len()]
        } else {
            s.recipe.clone()
        };
        let domains = (0..s.domains.len())
            .map(|d| match s.structure {
                DomainStructure::Markov => markov_domain(s, d),
                DomainStructure::Disjoint => disjoint_domain(s, d),
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            domains,
            recipe,
            seq_len: s.seq_len,
            vocab_size: s.vocab_size,
            heldout_per_domain: s.heldout_per_domain,
            seed: s.seed,
        };
        cfg.validate(s.separation)?;
        Ok(cfg)
    }

    pub fn validate(&self, separation: f64) -> Result<()> {
        if self.recipe.len() != self.domains.len() {
            return Err(Error::Config(format!(
                "recipe has {} weights for {} domains",
                self.recipe.len(),
                self.domains.len()
            )));
        }
        let sum: f64 = self.recipe.iter().sum();
        if self.recipe.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
            return Err(Error::Config(format!("recipe weights must be >= 0 and sum to 1 (sum {sum})")));
        }
        if self.domains.iter().any(|d| d.vocab_size() != self.vocab_size) {
            return Err(Error::Validation("domain vocabulary differs from corpus vocab_size".into()));
        }
        let pis: Vec<Vec<f64>> = self.domains.iter().map(DomainSpec::stationary).collect();
        for a in 0..pis.len() {
            for b in a + 1..pis.len() {
                let tv = total_variation(&pis[a], &pis[b]);
                if tv < separation {
                    return Err(Error::Validation(format!(
                        "domains `{}` and `{}` are too similar: total variation {tv:.4} < {separation}",
                        self.domains[a].name, self.domains[b].name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    fn pick_domain(&self, rng: &mut impl Rng) -> usize {
        let u = rng.gen::<f64>();
        let mut acc = 0.0;
        for (i, w) in self.recipe.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // rounding slack: last domain with positive weight
        self.recipe.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }
}

/// Sequences from a single domain for one group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MicroBatch {
    pub tokens: Vec<Vec<u32>>,
    pub domain: String,
    pub seeds: Vec<u64>,
}

/// One domain-pure micro-batch of `batch_size` sequences per group.
pub fn build_global_batch(
    cfg: &CorpusConfig,
    n_groups: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MicroBatch>> {
    (0..n_groups)
        .map(|_| {
            let d = cfg.pick_domain(rng);
            sample_domain(cfg, d, batch_size, rng)
        })
        .collect()
}

/// `count` training sequences from domain `d`.
pub fn sample_domain(cfg: &CorpusConfig, d: usize, count: usize, rng: &mut impl Rng) -> Result<MicroBatch> {
    let spec = &cfg.domains[d];
    let seeds: Vec<u64> = (0..count).map(|_| rng.gen::<u64>() & !HELDOUT_BIT).collect();
    let tokens = seeds
        .iter()
        .map(|&s| sequence_from_seed(spec, cfg.seq_len, s))
        .collect::<Result<_>>()?;
    Ok(MicroBatch {
        tokens,
        domain: spec.name.clone(),
        seeds,
    })
}

/// Held-out sequences per domain, in domain order.
#[derive(Clone, Debug)]
pub struct HeldoutSet {
    pub domain: String,
    pub seqs: Vec<Vec<u32>>,
    pub seeds: Vec<u64>,
}

pub fn heldout_sets(cfg: &CorpusConfig) -> Result<Vec<HeldoutSet>> {
    cfg.domains
        .iter()
        .enumerate()
        .map(|(d, spec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(cfg.seed, d));
            rng.set_stream(2);
            let seeds: Vec<u64> = (0..cfg.heldout_per_domain)
                .map(|_| rng.gen::<u64>() | HELDOUT_BIT)
                .collect();
            let seqs = seeds
                .iter()
                .map(|&s| sequence_from_seed(spec, cfg.seq_len, s))
                .collect::<Result<_>>()?;
            Ok(HeldoutSet {
                domain: spec.name.clone(),
                seqs,
                seeds,
            })
        })
        .collect()
}

pub fn is_heldout_seed(seed: u64) -> bool {
    seed & HELDOUT_BIT != 0
}

const CORPUS_MAGIC: &[u8; 4] = b"MOEC";
const CORPUS_VERSION: u32 = 1;

/// Binary token dump: magic `MOEC`, then version, vocab_size, seq_len and
/// sequence count as little-endian `u32`, then the tokens.
pub fn write_corpus(w: &mut impl Write, vocab_size: usize, seq_len: usize, seqs: &[Vec<u32>]) -> std::io::Result<()> {
    w.write_all(CORPUS_MAGIC)?;
    for v in [CORPUS_VERSION, vocab_size as u32, seq_len as u32, seqs.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in seqs {
        for t in s {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusDump {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seqs: Vec<Vec<u32>>,
}

pub fn read_corpus(r: &mut impl Read) -> std::result::Result<CorpusDump, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != CORPUS_MAGIC {
        return Err("bad magic, expected MOEC".into());
    }
    let mut word = || -> std::result::Result<u32, String> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|e| e.to_string())?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != CORPUS_VERSION {
        return Err(format!("unsupported corpus version {version}"));
    }
    let vocab_size = word()? as usize;
    let seq_len = word()? as usize;
    let count = word()? as usize;
    let mut seqs = Vec::with_capacity(count);
    for _ in 0..count {
        let s = (0..seq_len).map(|_| word()).collect::<std::result::Result<Vec<_>, _>>()?;
        if let Some(t) = s.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(format!("token {t} outside vocabulary of {vocab_size}"));
        }
        seqs.push(s);
    }
    Ok(CorpusDump {
        vocab_size,
        seq_len,
        seqs,
    })
}

pub fn save_corpus(path: &Path, vocab_size: usize, seq_len: usize, seqs: &[Vec<u32>]) -> Result<()> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, vocab_size, seq_len, seqs).expect("write to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<CorpusDump> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_corpus(&mut bytes.as_slice()).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

/// Writes `<domain>.train.moec` and `<domain>.heldout.moec` for every domain.
/// Training sequences come from the same stream as the trainer's batches.
pub fn export_corpus(cfg: &CorpusConfig, seed: u64, sequences: usize, dir: &Path) -> Result<Vec<(String, usize, usize)>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let heldout = heldout_sets(cfg)?;
    heldout
        .iter()
        .enumerate()
        .map(|(d, h)| {
            let train = sample_domain(cfg, d, sequences, &mut rng)?;
            save_corpus(&dir.join(format!("{}.train.moec", h.domain)), cfg.vocab_size, cfg.seq_len, &train.tokens)?;
            save_corpus(&dir.join(format!("{}.heldout.moec", h.domain)), cfg.vocab_size, cfg.seq_len, &h.seqs)?;
            Ok((h.domain.clone(), train.tokens.len(), h.seqs.len()))
        })
        .collect()
}
