//! Acceptance suite: one test per gate criterion, each printing a pass
//! line. Paper-scale numbers (a 1.1B-parameter model on GPU budgets) are
//! out of desk-scale reach, so the gates are property- and oracle-based;
//! runtime bounds are asserted where the criteria state them.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use demosel::backend::tiny::{PretrainConfig, TinyBackend, TinyConfig};
use demosel::backend::tokenizer::DEFAULT_ALPHABET;
use demosel::backend::{InitRule, ModelBackend, Segment, TokenSequence};
use demosel::corpus::{build_synthetic_corpus, family_of, DemonstrationPair, SyntheticSpec, TaskFamily};
use demosel::metrics::{normalized_edit_similarity, pass_at_k, ProblemResult};
use demosel::pipeline::{derive_seed, latent_selection_for_query};
use demosel::sandbox::{run_batch, run_candidate, CandidateRun, SandboxPolicy, Verdict};
use demosel::scoring::{score_demonstration, score_pool, ScoreCache, ScoreMode};
use demosel::selection::{select_latent, select_random, select_semantic, DemoScore};
use demosel::training::{train_task_concept, ConceptTokenSet, TrainingConfig};

fn passed(name: &str) {
    println!("[PASS] {name}");
}

fn pair(id: &str, prompt: &str, code: &str) -> DemonstrationPair {
    DemonstrationPair {
        task_id: id.into(),
        prompt_text: prompt.into(),
        golden_code: code.into(),
        tests: vec!["assert True".into()],
        language_tag: "python".into(),
    }
}

#[test]
fn a00_desk_scale_substitution_note() {
    println!(
        "[NOTE] paper-scale results are not reproducible at desk scale \
         (1.1B-parameter model, GPU sampling budgets); this suite gates on \
         property- and oracle-based criteria instead"
    );
    passed("a00 desk-scale substitution note");
}

/// Exact fraction of k-subsets of n that contain at least one of the first
/// c samples, by exhaustive bitmask enumeration.
fn pass_at_k_by_enumeration(n: usize, c: usize, k: usize) -> f64 {
    let mut total = 0u64;
    let mut hit = 0u64;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        if (mask & ((1u32 << c) - 1)) != 0 {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

/// Direct binomial route 1 - C(n-c,k)/C(n,k), the second algebraic form.
fn pass_at_k_binomial(n: usize, c: usize, k: usize) -> f64 {
    fn choose(n: usize, k: usize) -> f64 {
        if k > n {
            return 0.0;
        }
        let k = k.min(n - k);
        let mut out = 1.0f64;
        for i in 0..k {
            out = out * (n - i) as f64 / (i + 1) as f64;
        }
        out
    }
    1.0 - choose(n - c, k) / choose(n, k)
}

#[test]
fn a01_pass_at_k_exactness() {
    let start = Instant::now();
    for n in 1..=12 {
        for c in 0..=n {
            for k in 1..=n {
                let stable = pass_at_k(n, c, k).unwrap();
                let exact = pass_at_k_by_enumeration(n, c, k);
                assert!(
                    (stable - exact).abs() <= 1e-12,
                    "enumeration mismatch at n={n} c={c} k={k}: {stable} vs {exact}"
                );
            }
        }
    }
    for n in 1..=30 {
        for c in 0..=n {
            for k in 1..=n {
                let stable = pass_at_k(n, c, k).unwrap();
                let direct = pass_at_k_binomial(n, c, k);
                assert!(
                    (stable - direct).abs() <= 1e-12,
                    "binomial mismatch at n={n} c={c} k={k}: {stable} vs {direct}"
                );
            }
        }
    }
    assert!(start.elapsed().as_secs() < 10, "runtime bound exceeded");
    passed("a01 pass@k exactness (enumeration n<=12, binomial n<=30, <10s)");
}

#[test]
fn a02_metric_oracles() {
    use demosel::sandbox::ExecutionOutcome;
    let outcome = |idx: usize, verdict: Verdict| ExecutionOutcome {
        query_task_id: "q".into(),
        sample_index: idx,
        verdict,
        duration: 0.0,
        detail: String::new(),
    };
    let problem = |verdicts: &[Verdict], codes: &[&str], golden: &str| {
        let outcomes = verdicts
            .iter()
            .enumerate()
            .map(|(i, v)| outcome(i, *v))
            .collect();
        let codes: Vec<String> = codes.iter().map(|s| s.to_string()).collect();
        ProblemResult::new("q", outcomes, &codes, golden).unwrap()
    };

    use Verdict::{Fail, Pass};
    // correctness@5 over [PASS,PASS,FAIL,FAIL,FAIL] = 0.4.
    let p = problem(&[Pass, Pass, Fail, Fail, Fail], &["a", "b", "c", "d", "e"], "g");
    assert_eq!(p.correctness_at_k(5).unwrap(), 0.4);
    // correctness@20 with zero passes = 0.
    let p0 = problem(&[Fail; 20], &["x"; 20], "g");
    assert_eq!(p0.correctness_at_k(20).unwrap(), 0.0);
    // Dataset mean of 0.4 and 0.2 is 0.3.
    let q = problem(&[Pass, Fail, Fail, Fail, Fail], &["a", "b", "c", "d", "e"], "g");
    let mean = (p.correctness_at_k(5).unwrap() + q.correctness_at_k(5).unwrap()) / 2.0;
    assert!((mean - 0.3).abs() < 1e-12);

    // kitten/sitting: edit distance 3, similarity 1 - 3/7.
    let v = normalized_edit_similarity("kitten", "sitting");
    assert!((v - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
    assert!((v - 0.5714).abs() < 1e-4);
    assert_eq!(normalized_edit_similarity("abc", "abc"), 1.0);
    assert_eq!(normalized_edit_similarity("", "ab"), 0.0);
    assert_eq!(normalized_edit_similarity("", ""), 1.0);

    // similarity@k: golden itself scores 1; kitten vs sitting reproduces
    // the oracle; the empty working set contributes 0 and is counted.
    let golden_hit = problem(&[Pass, Fail], &["golden", "junk"], "golden");
    assert_eq!(golden_hit.similarity_at_k(2).unwrap().value, 1.0);
    let kitten = problem(&[Pass], &["kitten"], "sitting");
    assert!((kitten.similarity_at_k(1).unwrap().value - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
    let empty = problem(&[Fail, Fail], &["a", "b"], "golden");
    let sim = empty.similarity_at_k(2).unwrap();
    assert_eq!(sim.value, 0.0);
    assert!(sim.empty_working_set);

    // pass@k spot values from the spec.
    assert_eq!(pass_at_k(5, 5, 3).unwrap(), 1.0);
    assert_eq!(pass_at_k(5, 0, 3).unwrap(), 0.0);
    assert!((pass_at_k(10, 3, 5).unwrap() - (1.0 - 21.0 / 252.0)).abs() < 1e-12);
    assert!((pass_at_k(5, 1, 1).unwrap() - 0.2).abs() < 1e-12);

    passed("a02 metric oracles (correctness@k, similarity@k, fixtures exact)");
}

fn tiny_backend(seed: u64) -> TinyBackend {
    TinyBackend::new(TinyConfig {
        alphabet: DEFAULT_ALPHABET.into(),
        embedding_dim: 16,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 24,
        max_seq_len: 160,
        init_seed: seed,
    })
    .unwrap()
}

#[test]
fn a03_frozen_base_invariant() {
    let start = Instant::now();
    let demo = pair("d", "reverse the string 'abc'", "def solve(s):\n    return s[::-1]\n");

    // 200 optimizer steps: 200 epochs over one pair at batch size 1.
    let cfg = TrainingConfig {
        c: 10,
        epochs: 200,
        learning_rate: 0.05,
        batch_size: 1,
        seed: 9,
        early_stop_patience: None,
        init: InitRule::CopyVocabRow,
    };
    let mut trained = tiny_backend(5);
    let digest_before = trained.base_digest();
    let (_, trace) = train_task_concept(&mut trained, "t", &[demo.clone()], &cfg).unwrap();
    assert_eq!(trace.losses.len() - 1, 200, "expected 200 recorded steps");
    assert_eq!(
        trained.base_digest(),
        digest_before,
        "base parameters moved during concept training"
    );

    // At least one concept row changed from its initialization.
    let mut init_only = tiny_backend(5);
    let (_, _) = train_task_concept(
        &mut init_only,
        "t",
        &[demo],
        &TrainingConfig {
            epochs: 0,
            ..cfg
        },
    )
    .unwrap();
    assert_ne!(
        trained.task_rows("t").unwrap(),
        init_only.task_rows("t").unwrap(),
        "no concept row changed over 200 steps"
    );

    assert!(start.elapsed().as_secs() < 120, "runtime bound exceeded");
    passed("a03 frozen-base invariant (200 steps, digest unchanged, rows moved, <2min)");
}

#[test]
fn a04_gradient_check() {
    let start = Instant::now();
    // Vocab <= 64: 31 alphabet chars + end-of-text = 32; two layers.
    let mut backend = TinyBackend::new(TinyConfig {
        alphabet: "abcdefghijklmnopqrstuvwxyz +1:\n".into(),
        embedding_dim: 12,
        n_layers: 2,
        n_heads: 2,
        ff_dim: 16,
        max_seq_len: 64,
        init_seed: 3,
    })
    .unwrap();
    assert!(backend.vocab_size() <= 64);

    backend
        .extend_embeddings("t", 3, InitRule::CopyVocabRow, 5)
        .unwrap();
    let theta = backend.task_token_ids("t").unwrap();

    let mut seq = TokenSequence::from_ids(theta.clone(), Segment::Concept);
    for id in backend.tokenize("add one to x").unwrap().token_ids {
        seq.push(id, Segment::Input);
    }
    let first_out = seq.len();
    for id in backend.tokenize("x:\n x+1").unwrap().token_ids {
        seq.push(id, Segment::Output);
    }
    let mask: Vec<usize> = (first_out..seq.len()).collect();

    let (_, grads) = backend.concept_loss_and_gradient(&seq, &mask).unwrap();
    let rows: Array2<f64> = backend.task_rows("t").unwrap().mapv(|v| v as f64);

    let h = 1e-3;
    for (ti, id) in theta.iter().enumerate() {
        let analytic = &grads[id];
        let mut fd_row = vec![0.0f64; rows.ncols()];
        for j in 0..rows.ncols() {
            let mut plus = rows.clone();
            plus[[ti, j]] += h;
            let mut minus = rows.clone();
            minus[[ti, j]] -= h;
            let lp = backend.concept_loss_with_rows(&seq, &mask, &plus).unwrap();
            let lm = backend.concept_loss_with_rows(&seq, &mask, &minus).unwrap();
            fd_row[j] = (lp - lm) / (2.0 * h);
            // Coordinate-level sanity: nothing may be grossly off.
            let denom = fd_row[j].abs().max(analytic[j].abs());
            if denom > 1e-10 {
                let rel = (fd_row[j] - analytic[j]).abs() / denom;
                assert!(
                    rel <= 1e-3,
                    "row {ti} col {j}: fd={:e} analytic={:e} rel={rel:e}",
                    fd_row[j],
                    analytic[j]
                );
            }
        }
        // The gradient of each added row matches finite differences to
        // 1e-4 relative error (vector norm over the row).
        let diff: f64 = fd_row
            .iter()
            .zip(analytic.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = analytic
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
            .max(fd_row.iter().map(|g| g * g).sum::<f64>().sqrt());
        assert!(norm > 1e-10, "degenerate row {ti}");
        assert!(
            diff / norm <= 1e-4,
            "row {ti}: relative error {:e} above 1e-4",
            diff / norm
        );
    }
    assert!(start.elapsed().as_secs() < 300, "runtime bound exceeded");
    passed("a04 gradient check (central differences, rel err <= 1e-4, <5min)");
}

#[test]
fn a05_overfit_check() {
    let start = Instant::now();
    let demo = pair(
        "d",
        "reverse the string 'abcd'",
        "def solve(s):\n    return s[::-1]\n",
    );
    let mut backend = TinyBackend::new(TinyConfig {
        alphabet: DEFAULT_ALPHABET.into(),
        embedding_dim: 32,
        n_layers: 2,
        n_heads: 2,
        ff_dim: 64,
        max_seq_len: 160,
        init_seed: 7,
    })
    .unwrap();
    backend
        .pretrain_base(
            &demosel::generation::pretraining_texts(std::slice::from_ref(&demo)),
            &PretrainConfig {
                steps: 120,
                batch_size: 2,
                learning_rate: 3e-3,
                seed: 2,
            },
        )
        .unwrap();
    let cfg = TrainingConfig {
        c: 10,
        epochs: 300,
        learning_rate: 0.1,
        batch_size: 1,
        seed: 4,
        early_stop_patience: None,
        init: InitRule::CopyVocabRow,
    };
    let (_, trace) = train_task_concept(&mut backend, "t", &[demo], &cfg).unwrap();

    let initial = trace.losses[0].1;
    assert!(
        trace.final_loss < 0.5 * initial,
        "final loss {} is not below half the initial {}",
        trace.final_loss,
        initial
    );

    // 20-step moving average of the step losses is non-increasing.
    let steps: Vec<f64> = trace.losses[1..].iter().map(|(_, l)| *l).collect();
    let window = 20;
    let ma: Vec<f64> = steps
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    for i in 1..ma.len() {
        assert!(
            ma[i] <= ma[i - 1] + 1e-4 * (1.0 + ma[i - 1].abs()),
            "moving average rose at step {i}: {} -> {}",
            ma[i - 1],
            ma[i]
        );
    }

    assert!(start.elapsed().as_secs() < 300, "runtime bound exceeded");
    passed("a05 overfit check (single demo, MA(20) non-increasing, final < 50% initial, <5min)");
}

#[test]
fn a06_scoring_exactness() {
    use demosel::backend::stub::{StubBackend, StubConfig, StubDist, StubMatcher, StubRule};
    use std::collections::BTreeMap;

    // Concept tokens of the first installed task are ids 97 and 98 over
    // the default alphabet (96 chars + end-of-text).
    let mut backend = StubBackend::new(StubConfig {
        alphabet: Some(DEFAULT_ALPHABET.into()),
        vocab_size: None,
        embedding_dim: 8,
        context_budget: 2048,
        rules: vec![
            StubRule {
                when: StubMatcher::ContainsText("alpha".into()),
                dist: StubDist {
                    probs: BTreeMap::from([(97, 0.5), (98, 0.5)]),
                    spread_rest: false,
                },
            },
            StubRule {
                when: StubMatcher::ContainsText("beta".into()),
                dist: StubDist {
                    probs: BTreeMap::from([(97, 0.125), (98, 0.125)]),
                    spread_rest: true,
                },
            },
        ],
        default: StubDist {
            probs: BTreeMap::from([(97, 0.25), (98, 0.25)]),
            spread_rest: true,
        },
        seed: 0,
    })
    .unwrap();
    let token_ids = backend
        .extend_embeddings("t", 2, InitRule::Zeros, 0)
        .unwrap();
    let theta = ConceptTokenSet {
        task_id: "t".into(),
        token_ids,
        c: 2,
        checkpoint_ref: None,
    };

    // c=2 at probability 1/4 each: log posterior = ln(1/16), machine
    // precision.
    let score = score_demonstration(&backend, &theta, &pair("d", "plain", "x")).unwrap();
    assert_eq!(score.per_token_logprobs, vec![0.25f64.ln(); 2]);
    assert!((score.log_posterior - (1.0f64 / 16.0).ln()).abs() < 1e-14);
    let as_sum: f64 = score.per_token_logprobs.iter().sum();
    assert_eq!(score.log_posterior, as_sum);

    // Ranking across a pool is invariant under dividing every score by c.
    let pool = vec![
        pair("a", "alpha one", "x"),
        pair("b", "beta two", "x"),
        pair("c", "plain three", "x"),
    ];
    let raw: Vec<f64> = pool
        .iter()
        .map(|p| {
            score_demonstration(&backend, &theta, p)
                .unwrap()
                .log_posterior
        })
        .collect();
    let normalized: Vec<f64> = raw.iter().map(|s| s / theta.c as f64).collect();
    let argsort = |xs: &[f64]| {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[j].partial_cmp(&xs[i]).unwrap().then(i.cmp(&j)));
        idx
    };
    assert_eq!(argsort(&raw), argsort(&normalized));
    assert_eq!(argsort(&raw), vec![0, 2, 1]);

    passed("a06 scoring exactness (stub hand-computed sums, ranking invariant under /c)");
}

#[test]
fn a07_selection_oracles() {
    // Brute-force equivalence on pools up to 1000 for all k. The reference
    // is a stable sort on the score alone (stability supplies the
    // pool-index tiebreak).
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for &pool_size in &[1usize, 2, 37, 250, 1000] {
        let query = pair("query", "q", "x");
        let scores: Vec<DemoScore> = (0..pool_size)
            .map(|i| DemoScore {
                demo_task_id: format!("d{i}"),
                // Coarse grid forces plenty of exact ties.
                score: Some((rng.random_range(0..40) as f64) * -0.5),
            })
            .collect();
        let ks: Vec<usize> = if pool_size <= 40 {
            (1..=pool_size).collect()
        } else {
            (1..=pool_size).step_by(37).chain([pool_size]).collect()
        };
        for k in ks {
            let got = select_latent(&scores, &query, k).unwrap();
            let mut reference: Vec<(String, f64)> = scores
                .iter()
                .map(|d| (d.demo_task_id.clone(), d.score.unwrap()))
                .collect();
            reference.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let expected: Vec<String> =
                reference.iter().take(k).map(|(id, _)| id.clone()).collect();
            let actual: Vec<String> = got
                .selected
                .iter()
                .map(|d| d.demo_task_id.clone())
                .collect();
            assert_eq!(actual, expected, "pool {pool_size} k {k}");
        }
    }

    // Uniformity of random selection: inclusion frequency for k=1 within
    // +-5% (relative) of uniform over 10,000 seeds.
    let pool: Vec<DemonstrationPair> = (0..5).map(|i| pair(&format!("d{i}"), "p", "x")).collect();
    let query = pool[0].clone(); // 4 eligible
    let mut counts = std::collections::BTreeMap::new();
    let trials = 10_000u64;
    for seed in 0..trials {
        let result = select_random(&pool, &query, 1, seed).unwrap();
        *counts
            .entry(result.selected[0].demo_task_id.clone())
            .or_insert(0u64) += 1;
    }
    assert_eq!(counts.len(), 4);
    for (id, count) in &counts {
        let freq = *count as f64 / trials as f64;
        let expected = 0.25;
        assert!(
            (freq - expected).abs() <= 0.05 * expected,
            "demo {id} frequency {freq} outside 5% of uniform"
        );
    }

    // Self-exclusion holds for every strategy on every query.
    let spec = SyntheticSpec {
        families: vec![TaskFamily::ReverseString, TaskFamily::AddIntegers],
        per_family: 6,
    };
    let manifest = build_synthetic_corpus(&spec, 3).unwrap();
    let pool = manifest.records.clone();
    for query in &manifest.records {
        let scores: Vec<DemoScore> = pool
            .iter()
            .enumerate()
            .map(|(i, p)| DemoScore {
                demo_task_id: p.task_id.clone(),
                score: Some(-(i as f64)),
            })
            .collect();
        for result in [
            select_latent(&scores, query, 5).unwrap(),
            select_semantic(&pool, query, 5).unwrap(),
            select_random(&pool, query, 5, 42).unwrap(),
        ] {
            assert!(
                result
                    .selected
                    .iter()
                    .all(|d| d.demo_task_id != query.task_id),
                "{:?} selected its own query",
                result.strategy
            );
        }
    }

    passed("a07 selection oracles (brute force <=1000, uniformity +-5%, self-exclusion)");
}

#[test]
fn a08_sandbox_contract() {
    // Every synthetic golden solution passes its own tests.
    let spec = SyntheticSpec {
        families: vec![
            TaskFamily::ReverseString,
            TaskFamily::AddIntegers,
            TaskFamily::MaxOfList,
            TaskFamily::CountVowels,
        ],
        per_family: 3,
    };
    let manifest = build_synthetic_corpus(&spec, 17).unwrap();
    let runs: Vec<CandidateRun> = manifest
        .records
        .iter()
        .map(|r| CandidateRun {
            query_task_id: r.task_id.clone(),
            sample_index: 0,
            code: r.golden_code.clone(),
            tests: r.tests.clone(),
            language_tag: r.language_tag.clone(),
        })
        .collect();
    let outcomes = run_batch(&runs, &SandboxPolicy::default(), 4).unwrap();
    for outcome in &outcomes {
        assert_eq!(
            outcome.verdict,
            Verdict::Pass,
            "golden solution {} failed: {}",
            outcome.query_task_id,
            outcome.detail
        );
    }

    // An infinite loop times out within the policy bound (plus grace).
    let policy = SandboxPolicy {
        timeout: std::time::Duration::from_secs(2),
        ..SandboxPolicy::default()
    };
    let started = Instant::now();
    let loop_run = CandidateRun {
        query_task_id: "loop".into(),
        sample_index: 0,
        code: "while True: pass".into(),
        tests: vec!["assert True".into()],
        language_tag: "python".into(),
    };
    let outcome = run_candidate(&loop_run, &policy).unwrap();
    assert_eq!(outcome.verdict, Verdict::Timeout);
    assert!(started.elapsed().as_secs_f64() < 6.0, "timeout enforcement too slow");

    // Verdict vectors are identical at parallelism 1 and 8.
    let mixed: Vec<CandidateRun> = (0..8)
        .map(|i| {
            let code = match i % 4 {
                0 => "def solve():\n    return 1",
                1 => "def solve():\n    return 2",
                2 => "def solve(:\n    return 3",
                _ => "import os_missing_module",
            };
            CandidateRun {
                query_task_id: format!("t{i}"),
                sample_index: i,
                code: code.into(),
                tests: vec!["assert solve() == 1".into()],
                language_tag: "python".into(),
            }
        })
        .collect();
    let serial: Vec<Verdict> = run_batch(&mixed, &SandboxPolicy::default(), 1)
        .unwrap()
        .iter()
        .map(|o| o.verdict)
        .collect();
    let parallel: Vec<Verdict> = run_batch(&mixed, &SandboxPolicy::default(), 8)
        .unwrap()
        .iter()
        .map(|o| o.verdict)
        .collect();
    assert_eq!(serial, parallel);

    passed("a08 sandbox contract (golden PASS, TIMEOUT bound, parallelism-independent)");
}

#[test]
fn a09_end_to_end_synthetic_retrieval() {
    let start = Instant::now();

    // 2-family corpus: 20 pool demonstrations, 10 held-out queries.
    let spec = SyntheticSpec {
        families: vec![TaskFamily::ReverseString, TaskFamily::AddIntegers],
        per_family: 15,
    };
    let manifest = build_synthetic_corpus(&spec, 7).unwrap();
    let mut pool = Vec::new();
    let mut queries = Vec::new();
    for rec in &manifest.records {
        let idx: usize = rec.task_id[4..].parse().unwrap();
        if idx < 10 {
            pool.push(rec.clone());
        } else {
            queries.push(rec.clone());
        }
    }
    assert_eq!(pool.len(), 20);
    assert_eq!(queries.len(), 10);

    // Tiny real backend: pretrain the base on the pool's rendered blocks,
    // then freeze.
    let mut backend = TinyBackend::new(TinyConfig {
        alphabet: DEFAULT_ALPHABET.into(),
        embedding_dim: 32,
        n_layers: 2,
        n_heads: 2,
        ff_dim: 64,
        max_seq_len: 256,
        init_seed: 1,
    })
    .unwrap();
    let texts = demosel::generation::pretraining_texts(&pool);
    backend
        .pretrain_base(
            &texts,
            &PretrainConfig {
                steps: 150,
                batch_size: 8,
                learning_rate: 3e-3,
                seed: derive_seed(1, "pretrain"),
            },
        )
        .unwrap();
    let frozen_digest = backend.base_digest();

    // One concept per family, trained on that family's pool demos.
    let mut thetas = Vec::new();
    for family in ["rev", "add"] {
        let members: Vec<DemonstrationPair> = pool
            .iter()
            .filter(|p| family_of(&p.task_id) == Some(family))
            .cloned()
            .collect();
        let cfg = TrainingConfig {
            c: 10,
            epochs: 40,
            learning_rate: 0.1,
            batch_size: 5,
            seed: derive_seed(1, &format!("train:{family}")),
            early_stop_patience: None,
            init: InitRule::CopyVocabRow,
        };
        let (theta, _) =
            train_task_concept(&mut backend, &format!("concept-{family}"), &members, &cfg)
                .unwrap();
        thetas.push(theta);
    }
    assert_eq!(backend.base_digest(), frozen_digest, "base moved");

    let cache = ScoreCache::in_memory();
    let mode = ScoreMode::LikelihoodRatio;
    let pool_scores = score_pool(&backend, &thetas, &pool, &cache, mode).unwrap();
    let query_scores = score_pool(&backend, &thetas, &queries, &cache, mode).unwrap();

    let mut latent_rate = 0.0;
    let mut random_rate = 0.0;
    for query in &queries {
        let family = family_of(&query.task_id).unwrap();
        let latent =
            latent_selection_for_query(&pool_scores, &query_scores, query, 5).unwrap();
        let same = latent
            .selected
            .iter()
            .filter(|d| family_of(&d.demo_task_id) == Some(family))
            .count();
        latent_rate += same as f64 / 5.0;

        let random = select_random(
            &pool,
            query,
            5,
            derive_seed(1, &format!("select:random:{}", query.task_id)),
        )
        .unwrap();
        let same_random = random
            .selected
            .iter()
            .filter(|d| family_of(&d.demo_task_id) == Some(family))
            .count();
        random_rate += same_random as f64 / 5.0;
    }
    latent_rate /= queries.len() as f64;
    random_rate /= queries.len() as f64;

    println!(
        "latent same-family rate {latent_rate:.2}, random {random_rate:.2}, \
         elapsed {:.1?}",
        start.elapsed()
    );
    assert!(
        latent_rate >= 0.8,
        "latent same-family rate {latent_rate} below 0.8"
    );
    assert!(
        latent_rate > random_rate,
        "latent ({latent_rate}) does not beat random ({random_rate})"
    );
    assert!(start.elapsed().as_secs() < 1200, "runtime bound exceeded");
    passed("a09 end-to-end synthetic retrieval (>=80% same-family, beats random, <20min)");
}

/// Optional, non-gating: a 20-problem MBPP-format slice flows through the
/// whole pipeline on the tiny backend and emits a table-shaped report. No
/// numeric thresholds are asserted.
#[test]
fn a10_mbpp_format_slice_pipeline() {
    use demosel::metrics::{MetricKind, MetricRequest};
    use demosel::pipeline::{
        BackendConfig, ConceptConfig, ConceptTaskSpec, DatasetConfig, ExperimentConfig,
        QueryConfig, SandboxConfig, SelectionConfig, StrategyChoice, RunContext,
    };

    let dir = tempfile::tempdir().unwrap();

    // Synthesize an MBPP-format file: upstream key names, numeric task ids.
    let spec = SyntheticSpec {
        families: vec![TaskFamily::ReverseString, TaskFamily::AddIntegers],
        per_family: 10,
    };
    let manifest = build_synthetic_corpus(&spec, 23).unwrap();
    let mbpp_path = dir.path().join("slice.jsonl");
    let mut lines = Vec::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        lines.push(
            serde_json::json!({
                "task_id": i + 1,
                "text": rec.prompt_text,
                "code": rec.golden_code,
                "test_list": rec.tests,
            })
            .to_string(),
        );
    }
    std::fs::write(&mbpp_path, lines.join("\n") + "\n").unwrap();

    // Records 1..=10 are string reversal, 11..=20 integer addition.
    let rev_ids: Vec<String> = (1..=10).map(|i| i.to_string()).collect();
    let add_ids: Vec<String> = (11..=20).map(|i| i.to_string()).collect();

    let config = ExperimentConfig {
        dataset: DatasetConfig::File {
            path: mbpp_path,
            format: demosel::corpus::SourceFormat::Mbpp,
        },
        queries: QueryConfig {
            ids: vec!["1".into(), "11".into()],
            holdout_per_family: None,
        },
        backend: BackendConfig::Tiny {
            model: TinyConfig {
                embedding_dim: 32,
                n_layers: 2,
                n_heads: 2,
                ff_dim: 64,
                max_seq_len: 256,
                init_seed: 1,
                ..TinyConfig::default()
            },
            pretrain: Some(PretrainConfig {
                steps: 80,
                batch_size: 8,
                learning_rate: 3e-3,
                seed: 2,
            }),
        },
        concept: ConceptConfig {
            c: 10,
            epochs: 15,
            learning_rate: 0.1,
            batch_size: 5,
            early_stop_patience: None,
            init: InitRule::CopyVocabRow,
            tasks: vec![
                ConceptTaskSpec {
                    task_id: "concept-rev".into(),
                    member_prefix: None,
                    member_ids: rev_ids,
                },
                ConceptTaskSpec {
                    task_id: "concept-add".into(),
                    member_prefix: None,
                    member_ids: add_ids,
                },
            ],
        },
        selection: SelectionConfig {
            strategy: StrategyChoice::All,
            k: 2,
            score_mode: ScoreMode::LikelihoodRatio,
        },
        sampling: demosel::backend::SamplingConfig {
            greedy: false,
            temperature: 0.7,
            nucleus: 0.95,
            max_new_tokens: 48,
            stop_sequences: vec!["### Problem:".into()],
        },
        n_samples: 2,
        sandbox: SandboxConfig {
            timeout_secs: 5.0,
            memory_cap_mib: 256,
            parallelism: 4,
        },
        metrics: vec![
            MetricRequest {
                kind: MetricKind::Pass,
                k: 1,
            },
            MetricRequest {
                kind: MetricKind::Correctness,
                k: 2,
            },
            MetricRequest {
                kind: MetricKind::Similarity,
                k: 2,
            },
        ],
        master_seed: 31,
    };

    let ctx = RunContext::prepare(config, Some(dir.path().join("run"))).unwrap();
    let reports = ctx.cmd_evaluate().unwrap();

    // Table-shaped: three strategy columns, each carrying every requested
    // metric, values in [0, 1]. No numeric threshold asserted.
    assert_eq!(reports.len(), 3);
    let strategies: Vec<&str> = reports.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(strategies, vec!["semantic", "latent", "random"]);
    for report in &reports {
        for name in ["pass@1", "correctness@2", "similarity@2"] {
            let value = report.metrics[name];
            assert!((0.0..=1.0).contains(&value), "{name} out of range");
        }
        assert_eq!(report.problems, 2);
    }
    let table = ctx.cmd_report().unwrap();
    assert!(table.contains("Evaluation Results on"));
    println!("{table}");

    passed("a10 mbpp-format slice pipeline (optional, non-gating: completed with table-shaped report)");
}
