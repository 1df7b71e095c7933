//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::scenario::{fit, model_config, prepare, synthetic_rewards, Prepared};
use common::{brute_force_metrics, direct_cumulative_rewards, gradient_check, random_tensor, relative_error, FD_FLOOR, FD_STEP};
use prl::data::{cumulative_rewards, padded_context, Behavior, DiscountMode, PromptSample, SynthConfig};
use prl::eval::{evaluate, hr_ndcg, rank_of, rank_items, sweep, write_report_text, EvalReport, InferenceRewardConfig, SweepParam, DEFAULT_KS};
use prl::model::{Checkpoint, LossWeight, ModelConfig, PrlModel, PromptBatch, TrainConfig};
use prl::rng::Rng;
use prl::tensor::{Graph, Tensor, TensorError, Var};

const GRAD_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Every report produced by the suite, for the monotonicity check.
#[derive(Default)]
struct Reports(Vec<EvalReport>);

impl Reports {
    fn keep(&mut self, r: EvalReport) -> EvalReport {
        self.0.push(r.clone());
        r
    }
}

fn main() {
    let mut reports = Reports::default();
    let mut failed = 0;
    let mut run = |id: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                o.pass = false;
                o.detail += &format!("; exceeded {}s limit", limit.as_secs());
            }
        }
        failed += (!o.pass) as usize;
        println!(
            "{} criterion {id} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64()
        );
    };

    run(1, "gradient correctness", Some(Duration::from_secs(60)), &mut gradient_correctness);
    run(2, "reward recursion oracle", None, &mut reward_recursion);
    run(3, "metric oracle (cases)", None, &mut metric_oracle);
    run(4, "overfit 32 samples", Some(Duration::from_secs(120)), &mut overfit);
    run(5, "prompt conditioning", Some(Duration::from_secs(300)), &mut || prompt_conditioning(&mut reports));
    let biased = prepare(&biased_corpus(), synthetic_rewards());
    let mut prl_model = None;
    run(6, "PRL beats plain CE on purchase HR@5", None, &mut || {
        let (o, m) = prl_vs_plain(&biased, &mut reports);
        prl_model = Some(m);
        o
    });
    run(7, "immediate weighting >= cumulative on purchase NDCG@10", None, &mut || {
        immediate_vs_cumulative(&biased, prl_model.as_ref().unwrap(), &mut reports)
    });
    run(8, "mu sweep steers cumulative reward@1", None, &mut || {
        mu_sweep(&biased, prl_model.as_ref().unwrap(), &mut reports)
    });
    run(9, "determinism", None, &mut || determinism(&mut reports));
    let consistent = reports.0.iter().filter(|r| r.is_consistent()).count();
    run(3, "metric oracle (report monotonicity)", None, &mut || {
        outcome(
            consistent == reports.0.len() && !reports.0.is_empty(),
            format!("{consistent}/{} emitted reports satisfy NDCG@k <= HR@k and monotone k", reports.0.len()),
        )
    });
    if failed > 0 {
        println!("{failed} criterion check(s) failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;
type OpCase = (&'static str, Vec<Tensor>, OpFn);

/// Scalar `sum(out ⊙ c)` with a fixed pseudo-random `c`, so every output
/// element carries a distinct weight.
fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let c = random_tensor(&mut Rng::new(77), &shape, -1.5, 1.5);
    let c = g.constant(c)?;
    let prod = g.mul(out, c)?;
    g.sum(prod)
}

fn op_cases(rng: &mut Rng) -> Vec<OpCase> {
    let mut dim = |lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
    let (b, m, k, n) = (dim(1, 3), dim(1, 4), dim(1, 4), dim(2, 5));
    let mut r = Rng::new(rng_seed(b, m, k, n));
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape, -2.0, 2.0);
    let pos = |t: Tensor| {
        let shape = t.shape().to_vec();
        Tensor::new(shape, t.data().iter().map(|v| 0.5 + v.abs() * 0.75).collect()).unwrap()
    };
    let indices: Vec<usize> = (0..b * m).map(|i| (i * 7 + n) % n).collect();
    let picks: Vec<usize> = (0..b * m).map(|i| (i * 3 + 1) % n).collect();
    let unary = |f: fn(&mut Graph, Var) -> Result<Var, TensorError>| -> OpFn {
        Box::new(move |g, v| {
            let o = f(g, v[0])?;
            weighted_sum(g, o)
        })
    };
    vec![
        ("matmul", vec![t(&[m, k]), t(&[k, n])], Box::new(|g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o)
        })),
        ("matmul_shared_weight", vec![t(&[b, m, k]), t(&[k, n])], Box::new(|g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o)
        })),
        ("matmul_batched", vec![t(&[b, m, k]), t(&[b, k, n])], Box::new(|g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o)
        })),
        ("matmul_bt", vec![t(&[b, m, k]), t(&[b, n, k])], Box::new(|g, v| {
            let o = g.matmul_bt(v[0], v[1])?;
            weighted_sum(g, o)
        })),
        ("add_broadcast", vec![t(&[b, m, n]), t(&[n])], Box::new(|g, v| {
            let o = g.add(v[0], v[1])?;
            weighted_sum(g, o)
        })),
        ("sub", vec![t(&[m, n]), t(&[m, n])], Box::new(|g, v| {
            let o = g.sub(v[0], v[1])?;
            weighted_sum(g, o)
        })),
        ("mul_broadcast", vec![t(&[b, 1]), t(&[n])], Box::new(|g, v| {
            let o = g.mul(v[0], v[1])?;
            weighted_sum(g, o)
        })),
        ("scale", vec![t(&[m, n])], Box::new(|g, v| {
            let o = g.scale(v[0], -1.7)?;
            weighted_sum(g, o)
        })),
        ("sigmoid", vec![t(&[b, n])], unary(Graph::sigmoid)),
        ("tanh", vec![t(&[b, n])], unary(Graph::tanh)),
        ("relu", vec![t(&[b, n])], unary(Graph::relu)),
        ("log", vec![pos(t(&[b, n]))], unary(Graph::log)),
        ("softmax", vec![t(&[b, m, n])], unary(Graph::softmax)),
        ("log_softmax", vec![t(&[b, n])], unary(Graph::log_softmax)),
        ("embedding", vec![t(&[n, k])], Box::new(move |g, v| {
            let o = g.embedding(v[0], &indices, &[b, m])?;
            weighted_sum(g, o)
        })),
        ("stack_select", vec![t(&[b, k]), t(&[b, k]), t(&[b, k])], Box::new(|g, v| {
            let s = g.stack(v, 1)?;
            let parts = g.unstack(s, 2)?;
            let o = g.stack(&parts, 0)?;
            let o = g.reshape(o, &[g.value(o).numel()])?;
            weighted_sum(g, o)
        })),
        ("dropout", vec![t(&[b, m, n])], Box::new(|g, v| {
            let mut rng = Rng::new(5);
            let o = g.dropout(v[0], 0.3, true, &mut rng)?;
            weighted_sum(g, o)
        })),
        ("layer_norm", vec![t(&[b, m, n]), t(&[n]), t(&[n])], Box::new(|g, v| {
            let o = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, o)
        })),
        ("sum_mean", vec![t(&[b, n])], Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.sum(sq)?;
            let m = g.mean(v[0])?;
            g.add(s, m)
        })),
        ("mean_axis", vec![t(&[b, m, n])], Box::new(|g, v| {
            let o = g.mean_axis(v[0], 1)?;
            weighted_sum(g, o)
        })),
        ("pick", vec![t(&[b, m, n])], Box::new(move |g, v| {
            let o = g.pick(v[0], &picks)?;
            weighted_sum(g, o)
        })),
        ("chain_matmul_tanh_log_softmax", vec![t(&[m, k]), t(&[k, n])], Box::new(|g, v| {
            let a = g.matmul(v[0], v[1])?;
            let a = g.tanh(a)?;
            let a = g.log_softmax(a)?;
            weighted_sum(g, a)
        })),
    ]
}

fn rng_seed(b: usize, m: usize, k: usize, n: usize) -> u64 {
    (b * 1000 + m * 100 + k * 10 + n) as u64
}

/// Gradient of the mean weighted cross-entropy of a GRU-based model with
/// every block feature on, against finite differences over all parameters.
fn model_gradient_error(seed: u64) -> f64 {
    let config = ModelConfig {
        n_items: 7,
        dim: 4,
        dropout: 0.2,
        layer_norm: true,
        ..ModelConfig::default()
    };
    let mut model = PrlModel::new(config, seed).unwrap();
    let mut rng = Rng::new(seed + 100);
    let mut batch = PromptBatch::default();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for _ in 0..3 {
        let len = 1 + rng.below(12);
        let items: Vec<u32> = (0..len).map(|_| 1 + rng.below(7) as u32).collect();
        batch.push(padded_context(&items), len, rng.uniform_range(0.0, 2.0));
        targets.push(1 + rng.below(7) as u32);
        weights.push(rng.uniform_range(0.1, 1.0));
    }
    let loss_of = |model: &PrlModel, grads: bool| {
        let mut g = Graph::new();
        let p = if grads {
            model.params().bind(&mut g).unwrap()
        } else {
            model.params().bind_frozen(&mut g).unwrap()
        };
        let mut drop_rng = Rng::new(seed);
        let l = model.loss(&mut g, &p, &batch, &targets, &weights, true, &mut drop_rng).unwrap();
        (g, p, l)
    };
    let (mut g, p, l) = loss_of(&model, true);
    let grads = g.backward(l).unwrap();
    let analytic: Vec<Tensor> = p
        .vars()
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, _, t))| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    for (id, a) in ids.into_iter().zip(&analytic) {
        for j in 0..a.numel() {
            let x = model.params().get(id).data()[j];
            let mut eval = |v: f64| {
                model.params_mut().get_mut(id).data_mut()[j] = v;
                let (g, _, l) = loss_of(&model, false);
                g.value(l).item().unwrap()
            };
            let up = eval(x + FD_STEP);
            let down = eval(x - FD_STEP);
            model.params_mut().get_mut(id).data_mut()[j] = x;
            worst = worst.max(relative_error(a.data()[j], (up - down) / (2.0 * FD_STEP), FD_FLOOR));
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    for instance in 0..20u64 {
        let mut rng = Rng::new(1000 + instance);
        for (name, inputs, f) in op_cases(&mut rng) {
            match gradient_check(&inputs, f) {
                Ok(e) => {
                    let w = worst.entry(name).or_insert(0.0);
                    *w = w.max(e);
                }
                Err(e) => return outcome(false, format!("{name}: {e}")),
            }
        }
        let e = model_gradient_error(instance);
        let w = worst.entry("gru_prl_forward").or_insert(0.0);
        *w = w.max(e);
    }
    let (name, max) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, v)| (*n, *v))
        .unwrap();
    outcome(
        max < GRAD_TOL,
        format!(
            "{} ops + GRU-PRL graph x 20 instances, max rel err {max:.2e} ({name}), tol {GRAD_TOL:.0e}",
            worst.len() - 1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn reward_recursion() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst: f64 = 0.0;
    for mode in [DiscountMode::Absolute, DiscountMode::Relative] {
        for i in 0..1000 {
            let len = 3 + rng.below(48);
            let rewards: Vec<f64> = (0..len).map(|_| if rng.bernoulli(0.3) { 1.0 } else { 0.2 }).collect();
            let lambda = match i {
                0 => 0.0,
                1 => 1.0,
                _ => rng.uniform(),
            };
            let fast = cumulative_rewards(&rewards, lambda, mode).unwrap();
            let direct = direct_cumulative_rewards(&rewards, lambda, mode);
            for (a, b) in fast.iter().zip(&direct) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("1000 sessions per discount mode, max |recursion - direct| = {worst:.2e}, tol 1e-12"),
    )
}

// ---------------------------------------------------------------- 3

fn metric_oracle() -> Outcome {
    let mut rng = Rng::new(3);
    let mut mismatches = 0;
    for case in 0..1000 {
        let n = 1 + rng.below(40);
        // a small value set forces ties on many cases
        let levels = if case % 2 == 0 { 3 } else { 1000 };
        let logits: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let target = 1 + rng.below(n) as u32;
        let rank = rank_of(&logits, target);
        let order = rank_items(&logits);
        if order[rank - 1] != target {
            mismatches += 1;
        }
        for k in DEFAULT_KS {
            if hr_ndcg(rank, k) != brute_force_metrics(&logits, target, k) {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("1000 random cases x k in {{5,10,20}}, {mismatches} mismatches against sort-and-scan"),
    )
}

// ---------------------------------------------------------------- 4

fn overfit() -> Outcome {
    let synth = SynthConfig {
        vocab: 50,
        sessions: 40,
        min_len: 3,
        max_len: 10,
        purchase_bias: 0.5,
        click_fanout: 3,
        seed: 4,
    };
    let rewards = synthetic_rewards();
    let sessions = prl::data::synth_corpus(&synth).unwrap();
    let prompts: Vec<PromptSample> = prl::data::generate_prompts(&sessions, &rewards)
        .unwrap()
        .into_iter()
        .take(32)
        .collect();
    let cfg = TrainConfig {
        batch_size: 32,
        learning_rate: 0.01,
        epochs: 500,
        max_steps: Some(500),
        loss_weight: LossWeight::None,
        seed: 4,
    };
    let (_, out) = fit(model_config(50, 16), &cfg, &prompts);
    let last = out.epochs.last().unwrap();
    let first_below = out.loss_trace.iter().position(|&l| l < 0.05).map(|i| i + 1);
    outcome(
        prompts.len() == 32 && last.mean_loss < 0.05,
        format!(
            "{} samples, d=16, unweighted loss after {} steps = {:.4} (first < 0.05 at step {})",
            prompts.len(),
            out.steps(),
            last.mean_loss,
            first_below.map_or("-".to_owned(), |s| s.to_string())
        ),
    )
}

// ---------------------------------------------------------------- 5

fn conditioning_corpus() -> SynthConfig {
    SynthConfig {
        vocab: 50,
        sessions: 1000,
        min_len: 3,
        max_len: 10,
        purchase_bias: 0.5,
        click_fanout: 1,
        seed: 1,
    }
}

fn train_cfg(seed: u64, loss_weight: LossWeight) -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        learning_rate: 0.01,
        epochs: 30,
        max_steps: None,
        loss_weight,
        seed,
    }
}

/// Mean training `R_t` per step over samples whose target had `behavior`.
fn tier_rewards(prompts: &[PromptSample], behavior: Behavior) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in prompts.iter().filter(|p| p.behavior == behavior) {
        let e = acc.entry(p.step).or_default();
        e.0 += p.cumulative_reward;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn lookup(table: &BTreeMap<usize, f64>, step: usize) -> f64 {
    *table.range(..=step).next_back().or_else(|| table.iter().next()).unwrap().1
}

fn prompt_conditioning(reports: &mut Reports) -> Outcome {
    let p = prepare(&conditioning_corpus(), synthetic_rewards());
    let n = p.world.high.len() - 1;
    let (model, _) = fit(model_config(n, 32), &train_cfg(3, LossWeight::Immediate), &p.prompts);
    let high = tier_rewards(&p.prompts, Behavior::Purchase);
    let low = tier_rewards(&p.prompts, Behavior::Click);
    let (mut hit_high, mut hit_low, mut total) = (0, 0, 0);
    for s in &p.split.test {
        for t in 1..s.len() {
            let ctx = padded_context(&s.items[..t]);
            let last = s.items[t - 1] as usize;
            let mut batch = PromptBatch::default();
            batch.push(ctx, t, lookup(&high, t));
            batch.push(ctx, t, lookup(&low, t));
            let logits = model.score(&batch).unwrap();
            hit_high += (rank_items(&logits[..n])[0] == p.world.high[last]) as usize;
            hit_low += (rank_items(&logits[n..])[0] == p.world.low[last][0]) as usize;
            total += 1;
        }
    }
    reports.keep(evaluate(&model, &p.split.test, &p.averages, &p.rewards, &InferenceRewardConfig::default(), &DEFAULT_KS).unwrap());
    let (ah, al) = (hit_high as f64 / total as f64, hit_low as f64 / total as f64);
    outcome(
        ah >= 0.9 && al >= 0.9,
        format!("{total} test steps, top-1 accuracy high-tier prompt {ah:.3}, low-tier prompt {al:.3}, tol >= 0.9"),
    )
}

// ---------------------------------------------------------------- 6-8

fn biased_corpus() -> SynthConfig {
    SynthConfig {
        vocab: 50,
        sessions: 1000,
        min_len: 3,
        max_len: 10,
        purchase_bias: 0.1,
        click_fanout: 6,
        seed: 2,
    }
}

fn eval_default(p: &Prepared, model: &PrlModel, reports: &mut Reports) -> EvalReport {
    reports.keep(evaluate(model, &p.split.test, &p.averages, &p.rewards, &InferenceRewardConfig::default(), &DEFAULT_KS).unwrap())
}

fn prl_vs_plain(p: &Prepared, reports: &mut Reports) -> (Outcome, PrlModel) {
    let n = p.world.high.len() - 1;
    let (prl, _) = fit(model_config(n, 32), &train_cfg(3, LossWeight::Immediate), &p.prompts);
    let (plain, _) = fit(model_config(n, 32).baseline(), &train_cfg(3, LossWeight::None), &p.prompts);
    let a = eval_default(p, &prl, reports).at(Behavior::Purchase, 5).unwrap().0;
    let b = eval_default(p, &plain, reports).at(Behavior::Purchase, 5).unwrap().0;
    (
        outcome(a > b, format!("purchase HR@5 GRU-PRL {a:.4} vs plain-CE GRU {b:.4}")),
        prl,
    )
}

fn immediate_vs_cumulative(p: &Prepared, immediate: &PrlModel, reports: &mut Reports) -> Outcome {
    let n = p.world.high.len() - 1;
    let (cumu, _) = fit(model_config(n, 32), &train_cfg(3, LossWeight::Cumulative), &p.prompts);
    let a = eval_default(p, immediate, reports).at(Behavior::Purchase, 10).unwrap().1;
    let b = eval_default(p, &cumu, reports).at(Behavior::Purchase, 10).unwrap().1;
    outcome(a >= b, format!("purchase NDCG@10 immediate {a:.4} vs cumulative {b:.4}"))
}

fn mu_sweep(p: &Prepared, model: &PrlModel, reports: &mut Reports) -> Outcome {
    let grid = [0.0, 1.0, 2.0, 3.0, 4.0];
    let rows = sweep(model, &p.split.test, &p.averages, &p.rewards, &InferenceRewardConfig::default(), SweepParam::Mu, &grid).unwrap();
    let values: Vec<f64> = rows.iter().map(|r| r.report.cumulative_reward_at_1).collect();
    for r in rows {
        reports.keep(r.report);
    }
    let distinct = values.windows(2).any(|w| w[0] != w[1]);
    let curve: Vec<String> = grid.iter().zip(&values).map(|(m, v)| format!("{m}:{v:.1}")).collect();
    outcome(distinct, format!("cumulative reward@1 by mu {}", curve.join(" ")))
}

// ---------------------------------------------------------------- 9

fn determinism(reports: &mut Reports) -> Outcome {
    let p = prepare(
        &SynthConfig {
            sessions: 300,
            seed: 9,
            ..conditioning_corpus()
        },
        synthetic_rewards(),
    );
    let n = p.world.high.len() - 1;
    let mut ckpts = Vec::new();
    let mut texts = Vec::new();
    for _ in 0..2 {
        let config = ModelConfig {
            dropout: 0.2,
            ..model_config(n, 16)
        };
        let cfg = TrainConfig {
            epochs: 3,
            ..train_cfg(9, LossWeight::Immediate)
        };
        let mut model = PrlModel::new(config, cfg.seed).unwrap();
        let mut adam = prl::tensor::Adam::new(prl::tensor::AdamConfig::default(), model.params());
        prl::model::train(&mut model, &mut adam, &p.prompts, &cfg, &mut prl::model::NoopObserver).unwrap();
        let ck = Checkpoint {
            model,
            seed: 9,
            config: serde_json::json!({"note": "determinism"}),
            optimizer: Some(adam),
            step_rewards: Some(p.averages.clone()),
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        ckpts.push(bytes);
        for eps in [0.0, 0.0, 0.5] {
            let cfg = InferenceRewardConfig {
                epsilon: eps,
                seed: 3,
                ..InferenceRewardConfig::default()
            };
            let r = reports.keep(evaluate(&ck.model, &p.split.test, &p.averages, &p.rewards, &cfg, &DEFAULT_KS).unwrap());
            let mut text = Vec::new();
            write_report_text(&mut text, &r, None).unwrap();
            texts.push(text);
        }
    }
    let same_ckpt = ckpts[0] == ckpts[1];
    let same_reports = texts[..3] == texts[3..];
    let eps0_repeat = texts[0] == texts[1];
    outcome(
        same_ckpt && same_reports && eps0_repeat,
        format!(
            "checkpoints identical: {same_ckpt} ({} bytes), reports identical: {same_reports}, repeated epsilon=0 evaluation identical: {eps0_repeat}",
            ckpts[0].len()
        ),
    )
}
