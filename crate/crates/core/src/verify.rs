//! Fast self-check suite behind `moelab verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{central_differences, compare, DEFAULT_STEP};
use crate::autodiff::{Tape, Tensor};
use crate::balance::{global_lbl, lbl, micro_lbl, sample_selection, BalanceStats};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::moe::{select_topk, GatingDecision};
use crate::parallel::{all_gather_counts, comm_overhead_report, CommLog, FrequencyBuffer, ParallelPlan, SyncScope};
use crate::trainer::{window_objective, BalanceMode, TrainConfig, TrainState};

#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Perturbs one synchronized count before the global LBL is formed.
    pub corrupt_sync: bool,
}

fn random_probs(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * n);
    for _ in 0..t {
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        data.extend(z.iter().map(|v| v.exp() / s));
    }
    Tensor::from_vec(t, n, data).expect("shape")
}

fn group(rng: &mut ChaCha8Rng, t: usize, n: usize, k: usize) -> (Tensor, GatingDecision, BalanceStats) {
    let p = random_probs(rng, t, n);
    let d = select_topk(&p, k, None).expect("valid k");
    let s = BalanceStats::from_decision(&d);
    (p, d, s)
}

fn check_endpoints() -> Result<String> {
    for n in [2usize, 4, 8, 16, 32] {
        let mut rows = vec![vec![1.0 / n as f64; n]; n];
        rows.iter_mut().enumerate().for_each(|(t, r)| r[t] += 0.0);
        let p = Tensor::from_rows(&rows)?;
        let mut s = BalanceStats::empty(n, 1);
        s.counts = vec![1; n];
        s.n_tokens = n;
        s.prob_sums = vec![1.0; n];
        let mut tape = Tape::new();
        let v = tape.leaf(&p);
        let l = lbl(&mut tape, &s, v)?;
        if tape.value(l).item() != 1.0 {
            return Err(Error::Validation(format!("uniform LBL {} != 1 for N_E {n}", tape.value(l).item())));
        }
        let mut one_hot = vec![vec![0.0; n]; 3];
        one_hot.iter_mut().for_each(|r| r[0] = 1.0);
        let p = Tensor::from_rows(&one_hot)?;
        let s = BalanceStats::from_decision(&select_topk(&p, 1, None)?);
        let v = tape.leaf(&p);
        let l = lbl(&mut tape, &s, v)?;
        if tape.value(l).item() != n as f64 {
            return Err(Error::Validation(format!("concentrated LBL {} != {n}", tape.value(l).item())));
        }
    }
    Ok("uniform -> 1, one-hot -> N_E".into())
}

fn check_global_identity(opts: VerifyOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for inst in 0..200 {
        let np = rng.gen_range(1..=8);
        let n = rng.gen_range(2..=32);
        let k = rng.gen_range(1..=n.min(4));
        let groups: Vec<_> = (0..np)
            .map(|_| {
                let t = rng.gen_range(1..=64);
                group(&mut rng, t, n, k)
            })
            .collect();
        let mut synced = BalanceStats::sum(groups.iter().map(|g| &g.2))?;
        if opts.corrupt_sync && inst == 0 {
            synced.counts[0] += 1;
        }
        let mut tape = Tape::new();
        let vars: Vec<_> = groups.iter().map(|g| tape.leaf(&g.0)).collect();
        let pairs: Vec<_> = groups.iter().zip(&vars).map(|(g, v)| (&g.2, *v)).collect();
        let gl = global_lbl(&mut tape, &synced, &pairs)?;
        // pooled oracle: concatenate all tokens and recount
        let mut counts = vec![0u64; n];
        let mut psum = vec![0.0; n];
        let mut t_total = 0;
        for (p, d, _) in &groups {
            for t in 0..d.n_tokens() {
                for e in 0..n {
                    if d.selected(t, e) {
                        counts[e] += 1;
                    }
                    psum[e] += p.get(t, e);
                }
            }
            t_total += d.n_tokens();
        }
        let pooled: f64 = (0..n)
            .map(|e| counts[e] as f64 / (t_total * k) as f64 * psum[e] / t_total as f64)
            .sum::<f64>()
            * n as f64;
        worst = worst.max((tape.value(gl).item() - pooled).abs());
    }
    if worst > 1e-12 {
        return Err(Error::Validation(format!("max |global - pooled| = {worst:e}")));
    }
    Ok(format!("200 instances, max deviation {worst:e}"))
}

fn check_micro_vs_global() -> Result<String> {
    // group A all on expert 0, group B split 3:1, mirror-asymmetric scores
    let a = Tensor::from_rows(&vec![vec![0.8, 0.2]; 4])?;
    let b = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7], vec![0.3, 0.7], vec![0.6, 0.4]])?;
    let (sa, sb) = (
        BalanceStats::from_decision(&select_topk(&a, 1, None)?),
        BalanceStats::from_decision(&select_topk(&b, 1, None)?),
    );
    let synced = BalanceStats::sum([&sa, &sb])?;
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let m = micro_lbl(&mut tape, &[(&sa, va), (&sb, vb)])?;
    let g = global_lbl(&mut tape, &synced, &[(&sa, va), (&sb, vb)])?;
    let (m, g) = (tape.value(m).item(), tape.value(g).item());
    if m <= g {
        return Err(Error::Validation(format!("micro {m} <= global {g}")));
    }
    Ok(format!("micro {m:.4} > global {g:.4}"))
}

fn check_buffer() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let plan = ParallelPlan {
        n_groups: 4,
        ..ParallelPlan::default()
    };
    for ga in 1..=8 {
        let mut buf = FrequencyBuffer::new(6, 2);
        let mut log = CommLog::new();
        let mut window = Vec::new();
        for _ in 0..ga {
            let local: Vec<_> = (0..4).map(|_| group(&mut rng, 9, 6, 2).2).collect();
            let synced = all_gather_counts(&local, &plan, SyncScope::Global, &mut log)?;
            buf.update(&synced[0])?;
            window.extend(local);
        }
        let pooled = BalanceStats::sum(window.iter())?.frequencies()?;
        if buf.frequencies()? != pooled {
            return Err(Error::Validation(format!("buffered f differs from window f at ga {ga}")));
        }
        buf.reset();
        if buf.ga_step_index != 0 || buf.cum_counts.iter().any(|&c| c != 0) {
            return Err(Error::Validation("reset left state behind".into()));
        }
    }
    Ok("ga 1..8 exact".into())
}

fn tiny_state(mode: BalanceMode) -> Result<(TrainState, ParallelPlan, TrainConfig, Vec<Vec<Vec<Vec<u32>>>>)> {
    let cfg = ModelConfig {
        context: 2,
        n_layers: 1,
        n_experts: 4,
        top_k: 2,
        n_shared: 1,
        hidden_dim: 4,
        expert_dim: 2,
        router_init_std: 0.5,
        output_init_std: 0.3,
        ..ModelConfig::default()
    };
    let model = LanguageModel::new(&cfg, 6, 21)?;
    let plan = ParallelPlan {
        n_groups: 2,
        micro_batch_size: 1,
        ga_steps: 2,
        sync_scope: SyncScope::Global,
        use_buffer: true,
    };
    let tc = TrainConfig {
        steps: 2,
        balance_mode: mode,
        ..TrainConfig::default()
    };
    let mut weights = tc.weights.clone();
    weights.lbl_weight = 0.5;
    weights.zloss_weight = 0.1;
    let tc = TrainConfig { weights, ..tc };
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let batches = (0..2)
        .map(|_| (0..2).map(|_| vec![(0..7).map(|_| rng.gen_range(0..6)).collect()]).collect())
        .collect();
    Ok((TrainState::new(model, &plan, &tc), plan, tc, batches))
}

fn check_gradients() -> Result<String> {
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for mode in [BalanceMode::GlobalBuffer, BalanceMode::Micro] {
        let (state, plan, tc, batches) = tiny_state(mode)?;
        let flat = state.model.params.flatten();
        params = flat.len();
        let (_, analytic) = window_objective(&state, &flat, &batches, &plan, &tc)?;
        let coords: Vec<usize> = (0..flat.len()).collect();
        let numeric = central_differences(
            |x| window_objective(&state, x, &batches, &plan, &tc).map_or(f64::NAN, |(v, _)| v),
            &flat,
            &coords,
            DEFAULT_STEP,
        );
        worst = worst.max(compare(&analytic, &numeric).max_rel_error);
    }
    if !(worst < 1e-4) {
        return Err(Error::Validation(format!("max relative error {worst:e}")));
    }
    Ok(format!("{params} parameters, max relative error {worst:.2e}"))
}

fn check_comm() -> Result<String> {
    let plan = ParallelPlan::default();
    let mut s = BalanceStats::empty(16, 2);
    s.counts = vec![8; 16];
    s.n_tokens = 64;
    let local = vec![s; 8];
    let mut log = CommLog::new();
    all_gather_counts(&local, &plan, SyncScope::Global, &mut log)?;
    let r = comm_overhead_report(&log, 16, 4096);
    if r.freq_vector_bytes != 16 * 8 * 8 || r.ratio != 4096.0 {
        return Err(Error::Validation(format!("{r:?}")));
    }
    Ok("1024 bytes per sync, ratio 4096".into())
}

fn check_shuffle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (_, d, s) = group(&mut rng, 48, 8, 2);
    let pooled = s.frequencies()?;
    let draws = 2000;
    let mut sum = vec![0.0; 8];
    let mut sq = vec![0.0; 8];
    for _ in 0..draws {
        let (_, sample) = sample_selection(&d.selection, 8, 2, 12, &mut rng)?;
        for (i, f) in sample.frequencies()?.into_iter().enumerate() {
            sum[i] += f;
            sq[i] += f * f;
        }
    }
    for i in 0..8 {
        let mean = sum[i] / draws as f64;
        let se = ((sq[i] / draws as f64 - mean * mean).max(0.0) / draws as f64).sqrt();
        if (mean - pooled[i]).abs() > 3.0 * se + 1e-12 {
            return Err(Error::Validation(format!("expert {i}: {mean} vs {}", pooled[i])));
        }
    }
    Ok(format!("{draws} draws within 3 sigma"))
}

pub fn run_verify(opts: VerifyOptions) -> Vec<PropertyResult> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<String>>)> = vec![
        ("lbl endpoints", Box::new(check_endpoints)),
        ("global lbl equals pooled lbl", Box::new(move || check_global_identity(opts))),
        ("micro lbl bounds global lbl", Box::new(check_micro_vs_global)),
        ("frequency buffer exactness", Box::new(check_buffer)),
        ("training-step gradient", Box::new(check_gradients)),
        ("communication accounting", Box::new(check_comm)),
        ("shuffle frequency unbiased", Box::new(check_shuffle)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => PropertyResult {
                name,
                passed: true,
                detail,
            },
            Err(e) => PropertyResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
