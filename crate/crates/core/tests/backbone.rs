use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s3pet::autodiff::{Tape, Tensor, Var};
use s3pet::backbone::{
    AttnWeights, Backbone, BackboneConfig, Batch, FfnWeights, NoHook, NormWeights, SiteHook,
    Stack, SublayerId,
};
use s3pet::{Error, Result};

// Plain nested-loop reference model, sharing nothing with the tape.

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn vec1(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

fn ref_attention(q_in: &Mat, kv_in: &Mat, w: &AttnWeights, causal: bool) -> Mat {
    let d = q_in[0].len();
    let q = mm(q_in, &mat(&w.wq));
    let k = mm(kv_in, &mat(&w.wk));
    let v = mm(kv_in, &mat(&w.wv));
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for i in 0..q.len() {
        let mut scores: Vec<f64> = (0..k.len())
            .map(|j| {
                let dot: f64 = (0..d).map(|c| q[i][c] * k[j][c]).sum();
                dot / (d as f64).sqrt()
            })
            .collect();
        if causal {
            for (j, s) in scores.iter_mut().enumerate() {
                if j > i {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..k.len() {
            for c in 0..d {
                ctx[i][c] += e[j] / z * v[j][c];
            }
        }
    }
    mm(&ctx, &mat(&w.wo))
}

fn ref_ffn(h: &Mat, w: &FfnWeights) -> Mat {
    let x = add_row(&mm(h, &mat(&w.w1)), &vec1(&w.b1));
    let a: Mat = x
        .iter()
        .map(|r| r.iter().map(|v| v.max(0.0)).collect())
        .collect();
    add_row(&mm(&a, &mat(&w.w2)), &vec1(&w.b2))
}

fn ref_norm(h: &Mat, w: &NormWeights) -> Mat {
    let (s, b) = (vec1(&w.s), vec1(&w.b));
    h.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let var = (r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).max(1e-9);
            r.iter()
                .enumerate()
                .map(|(c, x)| x / var * s[c] + b[c])
                .collect()
        })
        .collect()
}

fn ref_embed(bb: &Backbone, ids: &[usize]) -> Mat {
    let w = bb.weights();
    let (e, p) = (mat(&w.embedding), mat(&w.positions));
    ids.iter()
        .enumerate()
        .map(|(i, &t)| e[t].iter().zip(&p[i]).map(|(a, b)| a + b).collect())
        .collect()
}

/// Logits for a single example.
fn ref_forward(bb: &Backbone, enc_ids: &[usize], dec_ids: &[usize]) -> Mat {
    let w = bb.weights();
    let mut h = ref_embed(bb, enc_ids);
    for l in &w.encoder {
        h = ref_norm(&add(&h, &ref_attention(&h, &h, &l.self_attn, false)), &l.attn_ln);
        h = ref_norm(&add(&h, &ref_ffn(&h, &l.ffn)), &l.ffn_ln);
    }
    let enc = ref_norm(&h, &w.encoder_final_ln);
    let mut h = ref_embed(bb, dec_ids);
    for l in &w.decoder {
        h = ref_norm(&add(&h, &ref_attention(&h, &h, &l.self_attn, true)), &l.attn_ln);
        h = ref_norm(&add(&h, &ref_attention(&h, &enc, &l.cross_attn, false)), &l.cross_ln);
        h = ref_norm(&add(&h, &ref_ffn(&h, &l.ffn)), &l.ffn_ln);
    }
    let h = ref_norm(&h, &w.decoder_final_ln);
    mm(&h, &mat(&w.head))
}

fn assert_close(got: &[f64], want: &Mat, tol: f64) {
    let flat: Vec<f64> = want.iter().flatten().copied().collect();
    assert_eq!(got.len(), flat.len());
    for (i, (g, w)) in got.iter().zip(&flat).enumerate() {
        assert!(
            (g - w).abs() <= tol * w.abs().max(1.0),
            "entry {i}: {g} vs {w}"
        );
    }
}

fn random_mat(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small_config(d: usize, dm: usize) -> BackboneConfig {
    BackboneConfig {
        hidden_dim: d,
        ffn_dim: dm,
        vocab_size: 20,
        max_seq_len: 8,
        seed: 11,
        ..Default::default()
    }
}

fn toy_batch(size: usize, enc_len: usize, dec_len: usize, vocab: usize, seed: u64) -> Batch {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.random_range(0..vocab)).collect() };
    let enc = ids(size * enc_len);
    let dec = ids(size * dec_len);
    let tgt = ids(size * dec_len);
    Batch::new(size, enc_len, dec_len, enc, dec, tgt).unwrap()
}

#[test]
fn one_token_attention_is_value_path() {
    let bb = Backbone::new(small_config(8, 16)).unwrap();
    let w = &bb.weights().encoder[0].self_attn;
    let h = random_mat(1, 8, 1);
    let mut tape = Tape::new();
    let hv = tape.leaf(&h);
    let out = bb
        .self_attention(&mut tape, hv, 1, w, Stack::Encoder, 0, &mut NoHook)
        .unwrap();
    let want = mm(&mm(&mat(&h), &mat(&w.wv)), &mat(&w.wo));
    assert_close(tape.value(out), &want, 1e-12);
}

#[test]
fn zero_input_with_zero_value_path_gives_zero() {
    let cfg = small_config(8, 16);
    let mut weights = Backbone::new(cfg.clone()).unwrap().weights().clone();
    weights.encoder[0].self_attn.wv = Tensor::zeros(vec![8, 8]);
    let bb = Backbone::from_weights(cfg, weights).unwrap();
    let mut tape = Tape::new();
    let h = tape.leaf(&Tensor::zeros(vec![4, 8]));
    let w = &bb.weights().encoder[0].self_attn;
    let out = bb
        .self_attention(&mut tape, h, 1, w, Stack::Encoder, 0, &mut NoHook)
        .unwrap();
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn attention_matches_reference() {
    let bb = Backbone::new(small_config(8, 16)).unwrap();
    for (stack, causal) in [(Stack::Encoder, false), (Stack::Decoder, true)] {
        let w = match stack {
            Stack::Encoder => &bb.weights().encoder[1].self_attn,
            Stack::Decoder => &bb.weights().decoder[0].self_attn,
        };
        let h = random_mat(4, 8, 2);
        let mut tape = Tape::new();
        let hv = tape.leaf(&h);
        let out = bb
            .self_attention(&mut tape, hv, 1, w, stack, 0, &mut NoHook)
            .unwrap();
        assert_close(tape.value(out), &ref_attention(&mat(&h), &mat(&h), w, causal), 1e-12);
    }
}

#[test]
fn attention_rejects_bad_shape() {
    let bb = Backbone::new(small_config(8, 16)).unwrap();
    let w = &bb.weights().encoder[0].self_attn;
    let mut tape = Tape::new();
    let h = tape.leaf(&random_mat(4, 7, 0));
    let err = bb
        .self_attention(&mut tape, h, 1, w, Stack::Encoder, 0, &mut NoHook)
        .unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn feed_forward_trivial_cases() {
    let bb = Backbone::new(small_config(4, 4)).unwrap();
    let h = random_mat(3, 4, 5);

    let zero_in = FfnWeights {
        w1: Tensor::zeros(vec![4, 4]),
        b1: Tensor::zeros(vec![4]),
        w2: random_mat(4, 4, 6),
        b2: Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap(),
    };
    let mut tape = Tape::new();
    let hv = tape.leaf(&h);
    let out = bb
        .feed_forward(&mut tape, hv, &zero_in, Stack::Encoder, 0, &mut NoHook)
        .unwrap();
    for row in tape.value(out).chunks(4) {
        assert_eq!(row, &[1.0, -2.0, 0.5, 3.0]);
    }

    let mut eye = Tensor::zeros(vec![4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let identity = FfnWeights {
        w1: eye.clone(),
        b1: Tensor::zeros(vec![4]),
        w2: eye,
        b2: Tensor::zeros(vec![4]),
    };
    let nonneg = Tensor::new(vec![3, 4], h.data().iter().map(|v| v.abs()).collect()).unwrap();
    let mut tape = Tape::new();
    let hv = tape.leaf(&nonneg);
    let out = bb
        .feed_forward(&mut tape, hv, &identity, Stack::Encoder, 0, &mut NoHook)
        .unwrap();
    assert_eq!(tape.value(out), nonneg.data());
}

#[test]
fn feed_forward_matches_reference() {
    let bb = Backbone::new(small_config(8, 16)).unwrap();
    let w = &bb.weights().decoder[1].ffn;
    let h = random_mat(5, 8, 9);
    let mut tape = Tape::new();
    let hv = tape.leaf(&h);
    let out = bb
        .feed_forward(&mut tape, hv, w, Stack::Decoder, 1, &mut NoHook)
        .unwrap();
    assert_close(tape.value(out), &ref_ffn(&mat(&h), w), 1e-12);
}

#[test]
fn forward_matches_reference() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let batch = toy_batch(3, 7, 5, 64, 21);
    let mut tape = Tape::new();
    let logits = bb.forward(&mut tape, &batch, &mut NoHook).unwrap();
    assert_eq!(tape.shape(logits), &[15, 64]);
    let v = 64;
    for b in 0..3 {
        let want = ref_forward(
            &bb,
            &batch.enc_ids[b * 7..(b + 1) * 7],
            &batch.dec_ids[b * 5..(b + 1) * 5],
        );
        assert_close(&tape.value(logits)[b * 5 * v..(b + 1) * 5 * v], &want, 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = BackboneConfig {
        seed: 5,
        ..Default::default()
    };
    let batch = toy_batch(2, 6, 6, 64, 3);
    let run = || {
        let bb = Backbone::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let l = bb.forward(&mut tape, &batch, &mut NoHook).unwrap();
        tape.value(l).to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

struct Recorder(Vec<SublayerId>);

impl SiteHook for Recorder {
    fn apply(&mut self, _: &mut Tape, site: SublayerId, _: Var, output: Var) -> Result<Var> {
        self.0.push(site);
        Ok(output)
    }
}

#[test]
fn pass_through_hook_is_transparent_and_visits_sites_in_order() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let batch = toy_batch(2, 4, 3, 64, 8);
    let mut t1 = Tape::new();
    let plain = bb.forward(&mut t1, &batch, &mut NoHook).unwrap();
    let mut rec = Recorder(Vec::new());
    let mut t2 = Tape::new();
    let hooked = bb.forward(&mut t2, &batch, &mut rec).unwrap();
    assert_eq!(t1.value(plain), t2.value(hooked));
    assert_eq!(rec.0, bb.sites());
}

#[test]
fn golden_logits() {
    // Pins the residual + post-norm ordering and the initialization stream.
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let batch = Batch::new(1, 4, 3, vec![1, 2, 3, 4], vec![0, 5, 6], vec![5, 6, 7]).unwrap();
    let mut tape = Tape::new();
    let logits = bb.forward(&mut tape, &batch, &mut NoHook).unwrap();
    let v = tape.value(logits);
    let sum: f64 = v.iter().sum();
    let golden = [GOLDEN_0, GOLDEN_1, GOLDEN_2];
    for (g, want) in v.iter().zip(golden) {
        assert!((g - want).abs() < 1e-9, "{g} vs {want}");
    }
    assert!((sum - GOLDEN_SUM).abs() < 1e-8);
}

const GOLDEN_0: f64 = 0.529344968020;
const GOLDEN_1: f64 = -0.361335489136;
const GOLDEN_2: f64 = 2.040788424359;
const GOLDEN_SUM: f64 = -3.170426710504;

/// Adds a trainable bias at one site.
struct BiasHook {
    site: SublayerId,
    bias: Tensor,
    var: Option<Var>,
}

impl SiteHook for BiasHook {
    fn apply(&mut self, tape: &mut Tape, site: SublayerId, _: Var, output: Var) -> Result<Var> {
        if site != self.site {
            return Ok(output);
        }
        let b = tape.leaf(&self.bias);
        self.var = Some(b);
        tape.add(output, b)
    }
}

#[test]
fn only_attached_parameters_receive_gradient() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let batch = toy_batch(2, 5, 4, 64, 30);
    let site = bb.sites()[3];
    let mut bias = Tensor::zeros(vec![32]);
    bias.set_requires_grad(true);
    let mut hook = BiasHook {
        site,
        bias,
        var: None,
    };
    let mut tape = Tape::new();
    let logits = bb.forward(&mut tape, &batch, &mut hook).unwrap();
    let loss = tape.cross_entropy(logits, &batch.targets).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(hook.var.unwrap()).unwrap();
    assert!(g.iter().any(|&x| x != 0.0));
    for (name, t) in bb.weights().named_tensors() {
        assert!(!t.requires_grad(), "{name} requires grad");
        assert!(t.grad().is_none(), "{name} has a gradient");
    }
}

#[test]
fn out_of_vocabulary_and_overlong_inputs_are_rejected() {
    let bb = Backbone::new(BackboneConfig::default()).unwrap();
    let oov = Batch::new(1, 2, 1, vec![1, 64], vec![0], vec![1]).unwrap();
    let err = bb.forward(&mut Tape::new(), &oov, &mut NoHook).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    let long = Batch::new(1, 17, 1, vec![1; 17], vec![0], vec![1]).unwrap();
    let err = bb.forward(&mut Tape::new(), &long, &mut NoHook).unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    assert!(Batch::new(2, 2, 1, vec![1; 3], vec![0; 2], vec![1; 2]).is_err());
}

#[test]
fn weights_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("backbone.bin");
    let bb = Backbone::new(small_config(8, 16)).unwrap();
    bb.save(&path).unwrap();
    let back = Backbone::load(&path).unwrap();
    assert_eq!(back.fingerprint(), bb.fingerprint());
    let missing = Backbone::load(dir.path().join("nope.bin")).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}
