//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rethink_core::env::TaskSpec;
use rethink_core::grpo::{compute_advantages, surrogate_objective, ClipConfig, TrainPair};
use rethink_core::policy::{FeatureMap, Features, Policy, PolicyParams};
use rethink_core::reference::{self, SEEDS};
use rethink_core::rethink::{aux_nll_loss, EvalMode};
use rethink_core::rng::{derive_stream, RandomStream};
use rethink_core::ssr::ReplayBuffer;
use rethink_core::telemetry::Stage;
use rethink_core::trainer::{Checkpoint, Dataset, TrainConfig, Trainer, Variant};
use rethink_core::types::{Group, Query, Rollout, Split, Token};
use rethink_lab::ablate::{ablate, AblationReport};
use rethink_lab::config::RunConfig;
use rethink_lab::{data, eval, rundir, train};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Outcome of one criterion.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn advantage_math() -> Verdict {
    let a = compute_advantages(&[1.0, 0.0, 0.0, 0.0]);
    let expected = [1.73205, -0.57735, -0.57735, -0.57735];
    let example = a.iter().zip(expected).all(|(x, y)| (x - y).abs() < 1e-5);
    let uniform = [vec![1.0; 8], vec![0.0; 4], vec![0.5; 2]]
        .iter()
        .all(|r| compute_advantages(r).iter().all(|x| *x == 0.0));

    let mut s = derive_stream(1, "accept-adv", 0);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    let mut checked = 0;
    for i in 0..10_000 {
        let g = [2, 4, 8][i % 3];
        let r: Vec<f64> = (0..g).map(|_| if s.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        if r.iter().all(|x| *x == r[0]) {
            continue;
        }
        let a = compute_advantages(&r);
        let n = g as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
        checked += 1;
    }
    verdict(
        example && uniform && worst_mean <= 1e-9 && worst_std <= 1e-6,
        format!(
            "example {example}, uniform zeros {uniform}, {checked} non-uniform vectors: max |mean| {worst_mean:.1e} (<= 1e-9), max |std-1| {worst_std:.1e} (<= 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------- 2

struct RandomFeatures {
    dim: usize,
    salt: u64,
}

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    x = (x ^ (x >> 33)).wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

impl FeatureMap for RandomFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, context: &[Token], prefix: &[Token], pos: usize) -> Features {
        let c = context.first().map_or(0, |t| t.0 as u64);
        let p = prefix.last().map_or(999, |t| t.0 as u64);
        let key = mix(self.salt ^ (c << 40) ^ (p << 20) ^ pos as u64);
        (0..self.dim)
            .map(|i| {
                let h = mix(key ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                (i, (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
            })
            .collect()
    }
}

const FD_H: f64 = 1e-5;

fn fd_rel_err(params: &PolicyParams, analytic: &[f64], f: impl Fn(&PolicyParams) -> f64) -> f64 {
    let numeric: Vec<f64> = (0..params.theta.len())
        .map(|i| {
            let mut up = params.clone();
            let mut down = params.clone();
            up.theta[i] += FD_H;
            down.theta[i] -= FD_H;
            (f(&up) - f(&down)) / (2.0 * FD_H)
        })
        .collect();
    let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

fn random_params(vocab: usize, dim: usize, s: &mut RandomStream) -> PolicyParams {
    PolicyParams::from_theta(vocab, (0..vocab * dim).map(|_| s.uniform() * 2.0 - 1.0).collect())
}

fn tokens(vocab: usize, len: usize, s: &mut RandomStream) -> Vec<Token> {
    (0..len).map(|_| Token(s.below(vocab) as u16)).collect()
}

fn query(id: u64, context: Vec<Token>) -> Query {
    Query {
        id,
        context,
        truth: vec![Token(0)],
        difficulty: 0.5,
        split: Split::Train,
    }
}

fn gradient_oracle() -> Verdict {
    let mut s = derive_stream(2, "accept-fd", 0);
    let cfg = ClipConfig {
        epsilon: 0.2,
        kl_coef: 0.05,
        std_floor: 0.0,
    };
    let (mut worst_sur, mut worst_aux, mut max_dim) = (0.0f64, 0.0f64, 0usize);
    let mut clipped = 0.0;
    let mut done = 0;
    while done < 100 {
        let vocab = 2 + s.below(7);
        let fmap = RandomFeatures {
            dim: 1 + s.below(64 / vocab),
            salt: s.uniform().to_bits(),
        };
        let behavior = random_params(vocab, fmap.dim, &mut s);
        let mut current = behavior.clone();
        for x in current.theta.iter_mut() {
            *x += (s.uniform() * 2.0 - 1.0) * 0.3;
        }
        let bpol = Policy::new(&behavior, &fmap);
        let pairs: Vec<TrainPair> = (0..1 + s.below(6))
            .map(|i| {
                let ctx = tokens(vocab, 2, &mut s);
                let (toks, logps) = bpol.sample_sequence(&ctx, 1 + s.below(5), &mut s);
                TrainPair {
                    query: query(i as u64, ctx),
                    rollout: Rollout::plain(i as u64, toks, logps),
                    advantage: s.uniform() * 4.0 - 2.0,
                    replayed: false,
                }
            })
            .collect();
        let cpol = Policy::new(&current, &fmap);
        let near_kink = pairs.iter().any(|p| {
            p.rollout.tokens.iter().enumerate().any(|(t, tok)| {
                let r = (cpol.token_logprob(&p.query.context, &p.rollout.tokens[..t], *tok) - p.rollout.behavior_logps[t]).exp();
                (r - 0.8).abs() < 1e-3 || (r - 1.2).abs() < 1e-3
            })
        });
        if near_kink {
            continue;
        }
        let rep = surrogate_objective(&pairs, cpol, &cfg).unwrap();
        clipped += rep.clip_fraction;
        worst_sur = worst_sur.max(fd_rel_err(&current, &rep.gradient, |p| {
            surrogate_objective(&pairs, Policy::new(p, &fmap), &cfg).unwrap().objective_value
        }));

        let items: Vec<(Query, Rollout)> = (0..3)
            .map(|i| {
                let (y1, trig, y2) = (1 + s.below(3), 1 + s.below(2), 1 + s.below(3));
                let mut r = Rollout::plain(i, tokens(vocab, y1 + trig + y2, &mut s), vec![-1.0; y1 + trig + y2]);
                r.seg_y1_end = y1;
                r.trigger_span = Some((y1, y1 + trig));
                r.forced = true;
                r.reward = 1.0;
                (query(i, tokens(vocab, 2, &mut s)), r)
            })
            .collect();
        let refs: Vec<(&Query, &Rollout)> = items.iter().map(|(q, r)| (q, r)).collect();
        let covers = done % 2 == 0;
        let aux = aux_nll_loss(&refs, cpol, 0.5, covers);
        worst_aux = worst_aux.max(fd_rel_err(&current, &aux.gradient, |p| {
            aux_nll_loss(&refs, Policy::new(p, &fmap), 0.5, covers).objective_value
        }));
        max_dim = max_dim.max(current.dim());
        done += 1;
    }
    verdict(
        worst_sur < 1e-5 && worst_aux < 1e-5 && max_dim <= 64 && clipped > 0.0,
        format!(
            "100 instances, D <= {max_dim}: max rel err surrogate {worst_sur:.1e}, aux {worst_aux:.1e} (< 1e-5); clipped branch exercised {}",
            clipped > 0.0
        ),
    )
}

// ---------------------------------------------------------------- 3

fn zero_gradient_law() -> Verdict {
    // Two-token recall answers never fit in one generated token: every
    // group has uniform zero reward.
    let spec = TaskSpec {
        kind: rethink_core::env::TaskKind::KeyedRecall,
        num_queries: 64,
        difficulty_mix: vec![(1.0, 1.0)],
        ..TaskSpec::default()
    };
    let data = Dataset::from_queries(
        spec.vocab().unwrap(),
        rethink_core::env::generate_dataset(&spec).unwrap(),
    )
    .unwrap();
    let config = TrainConfig {
        variant: Variant::Grpo,
        max_len: 1,
        ..reference::train_config(Variant::Grpo, Stage::Stage1, 0)
    };
    assert_eq!(config.clip.kl_coef, 0.0);
    let mut trainer = Trainer::new(config, data.clone()).unwrap();
    let before: Vec<u64> = trainer.state().params.theta.iter().map(|x| x.to_bits()).collect();
    let m = trainer.train_step(&data.train[..8]).unwrap();
    let after: Vec<u64> = trainer.state().params.theta.iter().map(|x| x.to_bits()).collect();
    verdict(
        m.effective_query_ratio == 0.0 && before == after,
        format!(
            "effective ratio {}, {} parameters bitwise unchanged: {}",
            m.effective_query_ratio,
            before.len(),
            before == after
        ),
    )
}

// ---------------------------------------------------------------- 4

fn ssr_distribution() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for (alpha, expected) in [
        (0.0, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
        (1.0, [0.5, 0.25, 0.25]),
        (2.0, [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]),
    ] {
        let mut buffer = ReplayBuffer::new(3, 10, alpha);
        for (i, adv) in [2.0, -1.0, 1.0].into_iter().enumerate() {
            buffer.insert(
                &Group {
                    query: query(i as u64, vec![Token(0)]),
                    rollouts: vec![Rollout::plain(i as u64, vec![Token(1)], vec![-0.5])],
                    advantages: vec![adv],
                    step_created: 0,
                },
                0,
            );
        }
        let n = 100_000;
        let mut counts = [0usize; 3];
        for e in buffer.sample(n, &mut derive_stream(4, "accept-ssr", alpha as u64)).unwrap() {
            counts[e.query.id as usize] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(expected)
            .map(|(c, p)| (*c as f64 - p * n as f64).powi(2) / (p * n as f64))
            .sum();
        let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
        pass &= p > 0.01;
        parts.push(format!("alpha {alpha}: chi2 {chi2:.2} p {p:.3}"));
    }
    verdict(pass, format!("{} (p > 0.01)", parts.join(", ")))
}

// ---------------------------------------------------------------- 5-7

fn run_ablation(dir: &Path) -> AblationReport {
    let cfg = RunConfig::default();
    assert_eq!(cfg.ablate.seeds, SEEDS.to_vec());
    ablate(&cfg, None, dir).expect("ablation runs")
}

fn vanishing_advantages(report: &AblationReport) -> Verdict {
    let drops: Vec<f64> = report
        .rows_for(Variant::Grpo)
        .map(|r| r.summary.effective_ratio_drop())
        .collect();
    let hits = drops.iter().filter(|d| **d <= 0.6).count();
    verdict(
        hits >= 4,
        format!(
            "grpo end/start effective ratio per seed {:?}; {hits}/5 seeds <= 0.6 (need >= 4)",
            drops.iter().map(|d| format!("{d:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn ablation_ordering(report: &AblationReport) -> Verdict {
    let [g, f, s] = [Variant::Grpo, Variant::GrpoFilter, Variant::GrpoSsr].map(|v| report.median_final(v));
    verdict(
        s >= f && f >= g && s - g >= 0.02,
        format!("median final validation grpo {g:.4}, grpo_filter {f:.4}, grpo_ssr {s:.4}; ssr - grpo {:.4} (>= 0.02)", s - g),
    )
}

fn advantage_redistribution(report: &AblationReport) -> Verdict {
    let pairs: Vec<(f64, f64)> = SEEDS
        .iter()
        .map(|seed| {
            let pick = |v| {
                report
                    .rows_for(v)
                    .find(|r| r.seed == *seed)
                    .map(|r| r.summary.spread_last_third)
                    .unwrap()
            };
            (pick(Variant::GrpoSsr), pick(Variant::Grpo))
        })
        .collect();
    let wins = pairs.iter().filter(|(s, g)| s > g).count();
    verdict(
        wins == SEEDS.len(),
        format!(
            "spread over last third (ssr vs grpo) {:?}; ssr strictly higher on {wins}/5 seeds",
            pairs.iter().map(|(s, g)| format!("{s:.3}/{g:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn rethinking_modes(dir: &Path) -> Verdict {
    let mut bound_ok = true;
    let mut hard_wins = 0;
    let mut adaptive = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let mut cfg = RunConfig::default();
        cfg.task.seed = seed;
        cfg.train = reference::train_config(Variant::GrpoSsr, Stage::Stage2Rethink, seed);
        let dataset = data::generate(&cfg).unwrap();
        let run = dir.join(format!("stage2-seed{seed}"));
        fs::create_dir_all(&run).unwrap();
        train::train(&cfg, dataset.clone(), &run, None).unwrap();

        let evaluate = |file: &str, out: &str| {
            let ckpt: Checkpoint = rundir::read_json(&run.join(file)).unwrap();
            let out = run.join(out);
            fs::create_dir_all(&out).unwrap();
            eval::eval(&cfg, &dataset, &ckpt, EvalMode::Off, &out).unwrap()
        };
        let child = evaluate(train::CHECKPOINT_FILE, "eval-stage2");
        let parent = evaluate(train::STAGE1_CHECKPOINT_FILE, "eval-stage1");
        for r in [&child, &parent] {
            bound_ok &= r.accuracy(EvalMode::Bound) >= r.accuracy(EvalMode::Off);
        }
        let hard = |r: &eval::EvalReport| {
            r.by_difficulty
                .iter()
                .max_by(|a, b| a.difficulty.total_cmp(&b.difficulty))
                .map(|d| d.accuracy)
                .unwrap()
        };
        let (c, p) = (hard(&child), hard(&parent));
        hard_wins += usize::from(c > p);
        let ratios: Vec<f64> = child.by_difficulty.iter().map(|d| d.rethinking_ratio).collect();
        let spread = ratios.iter().copied().fold(f64::MIN, f64::max) - ratios.iter().copied().fold(f64::MAX, f64::min);
        adaptive += usize::from(spread >= 0.05);
        notes.push(format!(
            "seed {seed}: hard off {p:.3}->{c:.3}, rethink by bucket {:?}",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
        ));
    }
    for n in &notes {
        println!("    {n}");
    }
    verdict(
        bound_ok && hard_wins >= 3 && adaptive >= 3,
        format!(
            "bound >= off on every evaluation {bound_ok}; stage2 beats stage1 on hard bucket {hard_wins}/5 (>= 3); rethinking ratio range >= 0.05 in {adaptive}/5 (>= 3)"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn determinism(dir: &Path) -> Verdict {
    let bin = env!("CARGO_BIN_EXE_rethink-lab");
    let run = |name: &str, threads: &str| {
        let out = dir.join(name);
        let status = Command::new(bin)
            .args(["train", "--stage", "stage2_rethink", "--seed", "3", "--threads", threads, "--run-dir"])
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .expect("binary runs");
        assert!(status.success(), "train exited with {status}");
        [train::METRICS_FILE, train::CHECKPOINT_FILE, train::STAGE1_CHECKPOINT_FILE, train::EVALS_FILE]
            .map(|f| fs::read(out.join(f)).unwrap())
    };
    let a = run("t1-a", "1");
    let b = run("t1-b", "1");
    let c = run("t4-a", "4");
    let d = run("t4-b", "4");
    let same = a == b && a == c && a == d;
    verdict(
        same,
        format!(
            "4 stage-2 runs (threads 1,1,4,4): metrics, evals and checkpoints byte-identical {same} ({} metric bytes)",
            a[0].len()
        ),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, v: Verdict| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} [{status}] {name} ({:.1}s): {}",
            start.elapsed().as_secs_f64(),
            v.detail
        );
        failed += usize::from(!v.pass);
    };

    let t = Instant::now();
    report(1, "advantage math", t, advantage_math());
    let t = Instant::now();
    report(2, "gradient oracle", t, gradient_oracle());
    let t = Instant::now();
    report(3, "zero-gradient law", t, zero_gradient_law());
    let t = Instant::now();
    report(4, "replay sampling distribution", t, ssr_distribution());

    let t = Instant::now();
    let ablation = run_ablation(&scratch.path().join("ablate"));
    report(5, "vanishing advantages", t, vanishing_advantages(&ablation));
    let t = Instant::now();
    report(6, "ablation ordering", t, ablation_ordering(&ablation));
    let t = Instant::now();
    report(7, "advantage redistribution", t, advantage_redistribution(&ablation));

    let t = Instant::now();
    report(8, "rethinking modes", t, rethinking_modes(&scratch.path().join("rethink")));
    let t = Instant::now();
    report(9, "determinism", t, determinism(scratch.path()));

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
