use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3pet::backbone::{Backbone, BackboneConfig, Batch, Projection, Stack, SublayerId, SublayerKind};
use s3pet::gating::{Budget, GateState, SparsityMode};
use s3pet::optim::{AdamW, AdamWConfig};
use s3pet::pet::{Candidate, PetKind, SearchSpace, Supernet};
use s3pet::search::{search, structural_gradient, LossContext, SearchConfig};
use s3pet::task::{DataSplit, SyntheticTask, TaskSpec};
use s3pet::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn batch(size: usize, enc: usize, vocab: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let mut ids = |n: usize| -> Vec<usize> { (0..n).map(|_| r.random_range(0..vocab)).collect() };
    let (e, d, t) = (ids(size * enc), ids(size), ids(size));
    Batch::new(size, enc, 1, e, d, t).unwrap()
}

#[test]
fn adamw_matches_hand_computation() {
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, 1);
    let mut x = [1.0];
    opt.step(&mut x, &[0.5]).unwrap();
    // m_hat = g, v_hat = g^2 on the first step
    let expect1 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
    assert!((x[0] - expect1).abs() < 1e-15);
    opt.step(&mut x, &[-0.25]).unwrap();
    let m: f64 = 0.9 * 0.1 * 0.5 + 0.1 * -0.25;
    let v: f64 = 0.999 * 0.001 * 0.25 + 0.001 * 0.0625;
    let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
    let expect2 = expect1 - 0.1 * (mh / (vh.sqrt() + 1e-8) + 0.01 * expect1);
    assert!((x[0] - expect2).abs() < 1e-14);
}

#[test]
fn adamw_zero_gradient_and_decay_schedule() {
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 1.0,
            decay_steps: 4,
            ..AdamWConfig::default()
        },
        3,
    );
    let mut x = [1.0, -2.0, 3.0];
    let before = x;
    for expect in [1.0, 0.75, 0.5, 0.25, 0.0, 0.0] {
        assert_eq!(opt.current_lr(), expect);
        opt.step(&mut x, &[0.0; 3]).unwrap();
    }
    assert_eq!(x, before);
    assert!(matches!(opt.step(&mut x, &[f64::NAN, 0.0, 0.0]), Err(Error::Numeric(_))));
    assert!(matches!(opt.step(&mut x, &[0.0]), Err(Error::Shape(_))));
}

/// 1+1 layers, d = 2: the candidates below hold 12 parameters.
fn tiny() -> (Backbone, Supernet) {
    let cfg = BackboneConfig {
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        hidden_dim: 2,
        ffn_dim: 3,
        vocab_size: 5,
        max_seq_len: 4,
        seed: 11,
    };
    let bb = Backbone::new(cfg.clone()).unwrap();
    let cands = [
        Candidate {
            site: SublayerId::linear(Stack::Encoder, 0, SublayerKind::SelfAttn, Projection::Q),
            kind: PetKind::Lora,
            rank: 1,
        },
        Candidate {
            site: SublayerId::linear(Stack::Decoder, 0, SublayerKind::CrossAttn, Projection::V),
            kind: PetKind::BitFit,
            rank: 1,
        },
        Candidate {
            site: SublayerId::module_output(Stack::Decoder, 0, SublayerKind::Ffn),
            kind: PetKind::Adapter,
            rank: 1,
        },
        Candidate {
            site: SublayerId::norm(Stack::Decoder, 0, Projection::FinalLn),
            kind: PetKind::LnFit,
            rank: 1,
        },
    ];
    let net = Supernet::new(SearchSpace::custom(&cfg, &cands).unwrap());
    assert!(net.num_params() <= 50);
    (bb, net)
}

#[test]
fn second_order_term_matches_nested_finite_differences() {
    let (bb, net) = tiny();
    let counts = net.space().counts();
    let ctx = LossContext {
        backbone: &bb,
        net: &net,
        counts: &counts,
        mode: SparsityMode::L0,
        l0_lambda: 0.0,
    };
    let xi = 0.05;
    for seed in 0..3u64 {
        let mut r = rng(100 + seed);
        let mut gate = GateState::new(net.len(), 1.0, 1.0, &mut r).unwrap();
        gate.alpha = (0..net.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        gate.refresh(&counts, None, &mut r).unwrap();
        let delta: Vec<f64> = (0..net.num_params()).map(|_| r.random_range(-0.8..0.8)).collect();
        let (bd, ba) = (batch(3, 3, 5, 200 + seed), batch(3, 3, 5, 300 + seed));

        let inner = ctx.pass(&delta, &gate, &bd, true, false, false).unwrap();
        let g_delta = inner.g_delta.unwrap();
        let sg = structural_gradient(&ctx, &delta, &gate, &g_delta, &bd, &ba, xi, None).unwrap();
        let virt: Vec<f64> = delta.iter().zip(&g_delta).map(|(d, g)| d - xi * g).collect();
        let first = ctx.pass(&virt, &gate, &ba, false, true, true).unwrap().g_alpha.unwrap();
        let term: Vec<f64> = sg.grad.iter().zip(&first).map(|(g, f)| g - f).collect();

        // oracle: every derivative by central differences of the scalar loss
        let loss = |alpha: &[f64], d: &[f64], b: &Batch| -> f64 {
            let mut g = gate.clone();
            g.alpha = alpha.to_vec();
            ctx.pass(d, &g, b, false, false, false).unwrap().loss
        };
        let a0 = gate.alpha.clone();
        let v: Vec<f64> = (0..virt.len())
            .map(|j| {
                let h = 1e-6;
                let mut p = virt.clone();
                p[j] += h;
                let up = loss(&a0, &p, &ba);
                p[j] -= 2.0 * h;
                (up - loss(&a0, &p, &ba)) / (2.0 * h)
            })
            .collect();
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (k, h) = (1e-4, 1e-4 / vnorm);
        let shift = |s: f64| -> Vec<f64> { delta.iter().zip(&v).map(|(d, x)| d + s * h * x).collect() };
        let (dp, dm) = (shift(1.0), shift(-1.0));
        let oracle: Vec<f64> = (0..a0.len())
            .map(|i| {
                let mut ap = a0.clone();
                ap[i] += k;
                let mut am = a0.clone();
                am[i] -= k;
                let hv = (loss(&ap, &dp, &bd) - loss(&ap, &dm, &bd) - loss(&am, &dp, &bd) + loss(&am, &dm, &bd))
                    / (4.0 * k * h);
                -xi * hv
            })
            .collect();
        let err = s3pet::autodiff::relative_error(&term, &oracle);
        assert!(err < 5e-2, "seed {seed}: rel err {err}, {term:?} vs {oracle:?}");
        assert!(oracle.iter().any(|x| x.abs() > 1e-8), "degenerate instance");
    }
}

#[test]
fn zero_inner_rate_is_first_order() {
    let (bb, net) = tiny();
    let counts = net.space().counts();
    let ctx = LossContext {
        backbone: &bb,
        net: &net,
        counts: &counts,
        mode: SparsityMode::GlobalSigmoid,
        l0_lambda: 0.0,
    };
    let mut r = rng(5);
    let mut gate = GateState::new(net.len(), 1.0, 1.0, &mut r).unwrap();
    gate.refresh(&counts, Some(10.0), &mut r).unwrap();
    let delta: Vec<f64> = (0..net.num_params()).map(|_| r.random_range(-0.5..0.5)).collect();
    let (bd, ba) = (batch(2, 3, 5, 1), batch(2, 3, 5, 2));
    let g_delta = ctx.pass(&delta, &gate, &bd, true, false, false).unwrap().g_delta.unwrap();
    let sg = structural_gradient(&ctx, &delta, &gate, &g_delta, &bd, &ba, 0.0, None).unwrap();
    let direct = ctx.pass(&delta, &gate, &ba, false, true, true).unwrap();
    assert_eq!(sg.grad, direct.g_alpha.unwrap());
    assert_eq!(sg.loss_alpha, direct.loss);
    assert!(sg.epsilon.is_none());
}

fn small_split() -> DataSplit {
    SyntheticTask::new(TaskSpec {
        train_size: 128,
        val_size: 32,
        test_size: 32,
        ..TaskSpec::default()
    })
    .unwrap()
    .generate()
    .unwrap()
}

fn quick(steps: usize) -> SearchConfig {
    SearchConfig {
        budget: Budget::Params(300),
        steps,
        eval_interval: 5,
        batch_size: 8,
        ..SearchConfig::default()
    }
}

#[test]
fn first_order_flag_equals_zero_inner_rate_bitwise() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let split = small_split();
    let a = search(
        &SearchConfig {
            first_order_only: true,
            ..quick(6)
        },
        &bb,
        &split,
    )
    .unwrap();
    let b = search(
        &SearchConfig {
            inner_lr: 0.0,
            ..quick(6)
        },
        &bb,
        &split,
    )
    .unwrap();
    assert_eq!(a.final_alpha, b.final_alpha);
    assert_eq!(a.final_delta, b.final_delta);
    assert_eq!(a.history, b.history);
}

#[test]
fn search_is_deterministic_and_respects_the_budget() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let split = small_split();
    let cfg = quick(12);
    let a = search(&cfg, &bb, &split).unwrap();
    let b = search(&cfg, &bb, &split).unwrap();
    assert_eq!(a.final_alpha, b.final_alpha);
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.selection, b.best.selection);
    assert_eq!(a.history.len(), 12);
    assert_eq!(a.p_log.len(), 3);
    for row in &a.history {
        assert!(row.expected_params <= 300.0 + 1e-9, "{row:?}");
        assert!(row.expected_params > 299.0, "{row:?}");
    }
    assert!(a.best.selection.total_params <= 300);
    let c = search(&SearchConfig { seed: 1, ..cfg }, &bb, &split).unwrap();
    assert_ne!(a.final_alpha, c.final_alpha);
}

#[test]
fn l0_mode_runs_without_budget_control() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let split = small_split();
    let out = search(
        &SearchConfig {
            sparsity_mode: SparsityMode::L0,
            ..quick(5)
        },
        &bb,
        &split,
    )
    .unwrap();
    assert!(out.history.iter().all(|r| r.zeta == 0.0));
    assert!(out.best.selection.total_params <= 300);
}

#[test]
fn zero_steps_extracts_from_the_initial_alpha() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let out = search(&quick(0), &bb, &small_split()).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best.step, 0);
    assert!(!out.best.selection.indices.is_empty());
}

#[test]
fn infeasible_configs_fail_before_searching() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let split = small_split();
    let tiny_budget = SearchConfig {
        budget: Budget::Params(5),
        ..quick(3)
    };
    assert!(matches!(search(&tiny_budget, &bb, &split), Err(Error::Config(_))));
    let bad_eps = SearchConfig {
        epsilon: Some(0.0),
        ..quick(3)
    };
    assert!(matches!(search(&bad_eps, &bb, &split), Err(Error::Config(_))));
}
