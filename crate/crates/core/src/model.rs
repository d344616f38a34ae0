//! Toy MoE language model: context embedding, residual MoE blocks, vocabulary
//! projection.
//!
//! The context embedding is a linear map of the concatenated one-hot window
//! of the previous `context` tokens, stored as one `(V+1)×h` table per window
//! offset (row `V` is the padding slot before a sequence starts). Attention is
//! deliberately absent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::moe::{Gating, GatingBias, MoeConfig, MoeLayer, MoeOutput};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub context: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub hidden_dim: usize,
    pub expert_dim: usize,
    pub gating: Gating,
    pub router_init_std: f64,
    pub output_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context: 8,
            n_layers: 2,
            n_experts: 16,
            top_k: 2,
            n_shared: 1,
            hidden_dim: 64,
            expert_dim: 32,
            gating: Gating::Softmax,
            router_init_std: 0.02,
            output_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            n_experts: self.n_experts,
            top_k: self.top_k,
            n_shared: self.n_shared,
            hidden_dim: self.hidden_dim,
            expert_dim: self.expert_dim,
            gating: self.gating,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.moe().validate()?;
        if self.context == 0 || self.n_layers == 0 {
            return Err(Error::Config("context and n_layers must be positive".into()));
        }
        if !(self.router_init_std >= 0.0 && self.output_init_std >= 0.0) {
            return Err(Error::Config("init std values must be non-negative".into()));
        }
        Ok(())
    }
}

/// Flattened next-token prediction problem for a set of sequences.
#[derive(Clone, Debug)]
pub struct TokenWindows {
    /// One index list per window offset, `T` entries each.
    pub context: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

impl TokenWindows {
    pub fn build(seqs: &[Vec<u32>], context: usize, vocab: usize) -> Self {
        let mut ctx = vec![Vec::new(); context];
        let mut targets = Vec::new();
        for s in seqs {
            for p in 0..s.len().saturating_sub(1) {
                targets.push(s[p + 1] as usize);
                for (o, c) in ctx.iter_mut().enumerate() {
                    c.push(if p >= o { s[p - o] as usize } else { vocab });
                }
            }
        }
        Self {
            context: ctx,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub bound: Bound,
    pub logits: Var,
    pub lm_loss: Var,
    pub layers: Vec<MoeOutput>,
    pub n_tokens: usize,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    pub context_tables: Vec<ParamId>,
    pub layers: Vec<MoeLayer>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    /// Selection-only biases, one per layer (all zero unless aux-free balancing).
    pub biases: Vec<GatingBias>,
}

impl LanguageModel {
    pub fn new(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = cfg.hidden_dim;
        let table_std = 1.0 / (cfg.context as f64).sqrt();
        let context_tables = (0..cfg.context)
            .map(|o| params.add_normal(format!("context{o}"), vocab_size + 1, h, table_std, &mut rng))
            .collect();
        let moe = cfg.moe();
        let layers = (0..cfg.n_layers)
            .map(|l| MoeLayer::init(&moe, &mut params, &format!("layer{l}"), cfg.router_init_std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let out_w = params.add_normal("out.w", h, vocab_size, cfg.output_init_std, &mut rng);
        let out_b = params.add_normal("out.b", 1, vocab_size, 0.0, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            params,
            context_tables,
            layers,
            out_w,
            out_b,
            biases: vec![GatingBias::zeros(cfg.n_experts); cfg.n_layers],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn windows(&self, seqs: &[Vec<u32>]) -> TokenWindows {
        TokenWindows::build(seqs, self.cfg.context, self.vocab_size)
    }

    pub fn forward(&self, tape: &mut Tape, seqs: &[Vec<u32>]) -> Result<ForwardPass> {
        let w = self.windows(seqs);
        self.forward_windows(tape, &w)
    }

    pub fn forward_windows(&self, tape: &mut Tape, w: &TokenWindows) -> Result<ForwardPass> {
        if w.is_empty() {
            return Err(Error::EmptyBatch("language model forward"));
        }
        if let Some(&bad) = w.targets.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Index {
                op: "forward",
                index: bad,
                bound: self.vocab_size,
            });
        }
        let bound = self.params.bind(tape);
        let mut x: Option<Var> = None;
        for (table, idx) in self.context_tables.iter().zip(&w.context) {
            let e = tape.gather_rows(bound.var(*table), idx)?;
            x = Some(match x {
                Some(acc) => tape.add(acc, e)?,
                None => e,
            });
        }
        let mut x = x.expect("context >= 1");
        let mut layers = Vec::with_capacity(self.layers.len());
        for (layer, bias) in self.layers.iter().zip(&self.biases) {
            let out = layer.forward(tape, &bound, x, Some(bias))?;
            x = tape.add(x, out.y)?;
            layers.push(out);
        }
        let logits = tape.matmul(x, bound.var(self.out_w))?;
        let logits = tape.add_row(logits, bound.var(self.out_b))?;
        let lm_loss = tape.cross_entropy(logits, &w.targets)?;
        Ok(ForwardPass {
            bound,
            logits,
            lm_loss,
            layers,
            n_tokens: w.len(),
        })
    }

    /// Total (not mean) next-token NLL and token count, without backward.
    pub fn nll(&self, seqs: &[Vec<u32>]) -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, seqs)?;
        Ok((tape.value(f.lm_loss).item() * f.n_tokens as f64, f.n_tokens))
    }

    /// Parameters plus gating biases, for replica comparison.
    pub fn diverges_from(&self, other: &LanguageModel) -> Option<String> {
        if let Some(name) = self.params.same_bits(&other.params) {
            return Some(name);
        }
        self.biases
            .iter()
            .zip(&other.biases)
            .enumerate()
            .find(|(_, (a, b))| {
                a.bias
                    .iter()
                    .zip(&b.bias)
                    .any(|(x, y)| x.to_bits() != y.to_bits())
            })
            .map(|(l, _)| format!("layer{l}.gate_bias"))
    }

    /// Parameter dump with gating biases appended as `layer<l>.gate_bias`.
    pub fn export_params(&self) -> ParamStore {
        let mut store = self.params.clone();
        for (l, b) in self.biases.iter().enumerate() {
            store.add(
                format!("layer{l}.gate_bias"),
                crate::autodiff::Tensor::row(b.bias.clone()),
            );
        }
        store
    }

    /// Inverse of [`export_params`](Self::export_params) for a model of the same shape.
    pub fn import_params(&mut self, dump: &ParamStore) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = dump
                .find(&name)
                .ok_or_else(|| Error::Validation(format!("parameter dump lacks `{name}`")))?;
            let t = dump.get(src);
            if t.shape() != self.params.get(id).shape() {
                return Err(Error::Validation(format!("parameter `{name}` has wrong shape")));
            }
            *self.params.get_mut(id) = t.clone().requires_grad(true);
        }
        for (l, b) in self.biases.iter_mut().enumerate() {
            if let Some(id) = dump.find(&format!("layer{l}.gate_bias")) {
                b.bias = dump.get(id).data().to_vec();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_pad_before_sequence_start() {
        let w = TokenWindows::build(&[vec![3, 1, 2]], 2, 5);
        assert_eq!(w.targets, vec![1, 2]);
        assert_eq!(w.context[0], vec![3, 1]);
        assert_eq!(w.context[1], vec![5, 3]);
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let m = LanguageModel::new(&ModelConfig::default(), 64, 0).unwrap();
        let seqs: Vec<Vec<u32>> = (0..4).map(|i| (0..64).map(|j| ((i * 7 + j * 3) % 64) as u32).collect()).collect();
        let (nll, n) = m.nll(&seqs).unwrap();
        let ppl = (nll / n as f64).exp();
        assert!((ppl / 64.0 - 1.0).abs() < 0.15, "ppl {ppl}");
    }

    #[test]
    fn param_export_round_trip() {
        let cfg = ModelConfig {
            hidden_dim: 8,
            expert_dim: 4,
            n_experts: 4,
            context: 2,
            ..ModelConfig::default()
        };
        let mut m = LanguageModel::new(&cfg, 10, 1).unwrap();
        m.biases[1].bias[2] = 0.25;
        let dump = m.export_params();
        let mut fresh = LanguageModel::new(&cfg, 10, 2).unwrap();
        fresh.import_params(&dump).unwrap();
        assert_eq!(fresh.diverges_from(&m), None);
    }
}
