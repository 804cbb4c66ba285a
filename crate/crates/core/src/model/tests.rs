use super::*;
use crate::rng::Rng;
use crate::tensor::{grad_check, FD_STEP};

fn random(shape: &[usize], rng: &mut Rng, std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.normal(0.0, std));
    t
}

fn tiny_params(seed: u64, std: f64) -> (ModelConfig, ModelParams) {
    let mut cfg = ModelConfig::tiny();
    cfg.init_std = std;
    let p = ModelParams::init(&cfg, &mut Rng::new(seed, 7)).unwrap();
    (cfg, p)
}

fn tiny_batch(cfg: &ModelConfig, rng: &mut Rng) -> (QuestionBatch, SceneBatch) {
    let q = QuestionBatch::from_sequences(
        &[vec![2, 3, 4], vec![5, 6]],
        vec!["en".into(), "en".into()],
        cfg.max_len,
    )
    .unwrap();
    let roi = random(&[2, cfg.objects, cfg.roi_dim], rng, 1.0);
    let mut bbox = Tensor::zeros(&[2, cfg.objects, 4]);
    bbox.data_mut().iter_mut().for_each(|v| *v = rng.uniform());
    (q, SceneBatch { roi, bbox })
}

fn zero(p: &mut ModelParams, name: &str) {
    p.get_mut(name)
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
}

fn run_block(p: &ModelParams, x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let y = transformer_block(&mut g, &b, "lang.0", xv, mask, 2).unwrap();
    g.value(y).clone()
}

#[test]
fn block_with_zero_output_projections_is_identity() {
    let (_, mut p) = tiny_params(1, 0.3);
    for n in [
        "lang.0.attn.o.w",
        "lang.0.attn.o.b",
        "lang.0.mlp.fc2.w",
        "lang.0.mlp.fc2.b",
    ] {
        zero(&mut p, n);
    }
    let x = random(&[3, 8], &mut Rng::new(2, 99), 1.0);
    assert_eq!(run_block(&p, &x, None), x);
}

#[test]
fn block_preserves_shape() {
    let (_, p) = tiny_params(1, 0.3);
    let x = random(&[3, 8], &mut Rng::new(2, 99), 1.0);
    assert_eq!(run_block(&p, &x, None).shape(), &[3, 8]);
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x).unwrap();
    assert!(transformer_block(&mut g, &b, "lang.0", xv, Some(&[true, true]), 2).is_err());
}

#[test]
fn block_is_row_permutation_equivariant() {
    let (_, p) = tiny_params(4, 0.3);
    let x = random(&[4, 8], &mut Rng::new(5, 99), 1.0);
    let perm = [2, 0, 3, 1];
    let px = Tensor::stack(
        &perm
            .iter()
            .map(|&i| x.row(i))
            .collect::<Vec<_>>()
            .iter()
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let y = run_block(&p, &x, None);
    let py = run_block(&p, &px, None);
    for (r, &i) in perm.iter().enumerate() {
        assert!(py.row(r).max_abs_diff(&y.row(i)) < 1e-12);
    }
}

#[test]
fn question_encoder_ignores_padded_ids() {
    let (cfg, p) = tiny_params(3, 0.3);
    let q1 = QuestionBatch::from_sequences(&[vec![2, 3]], vec!["en".into()], cfg.max_len).unwrap();
    let mut q2 = q1.clone();
    q2.ids[3] = 7;
    q2.ids[4] = 9;
    let enc = |q: &QuestionBatch| {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g).unwrap();
        let h = encode_question(&mut g, &cfg, &b, q).unwrap();
        g.value(h).clone()
    };
    let (h1, h2) = (enc(&q1), enc(&q2));
    assert_eq!(h1.shape(), &[1, 5, 8]);
    assert_eq!(&h1.data()[..3 * 8], &h2.data()[..3 * 8]);
}

#[test]
fn long_questions_are_truncated() {
    let q = QuestionBatch::from_sequences(&[(2..30).collect()], vec!["en".into()], 20).unwrap();
    assert_eq!(q.ids.len(), 20);
    assert_eq!(q.ids[0], CLS_ID);
    assert_eq!(q.ids[19], 20);
    assert_eq!(q.length(0), 20);
    let short = QuestionBatch::from_sequences(&[vec![4, 5, 6, 7]], vec!["en".into()], 8).unwrap();
    assert_eq!(short.ids, vec![0, 4, 5, 6, 7, 1, 1, 1]);
    assert_eq!(
        short.mask,
        vec![true, true, true, true, true, false, false, false]
    );
}

#[test]
fn out_of_vocab_ids_are_rejected() {
    let (cfg, p) = tiny_params(3, 0.3);
    let q = QuestionBatch::from_sequences(&[vec![2, 10]], vec!["en".into()], cfg.max_len).unwrap();
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g).unwrap();
    assert!(encode_question(&mut g, &cfg, &b, &q).is_err());
}

#[test]
fn image_encoder_averages_projections() {
    let (cfg, mut p) = tiny_params(3, 0.3);
    let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
    for n in [
        "img.roi.w",
        "img.box.w",
        "img.0.attn.o.w",
        "img.0.attn.o.b",
        "img.0.mlp.fc2.w",
        "img.0.mlp.fc2.b",
    ] {
        zero(&mut p, n);
    }
    p.get_mut("img.roi.b")
        .unwrap()
        .data_mut()
        .copy_from_slice(&v);
    p.get_mut("img.box.b")
        .unwrap()
        .data_mut()
        .copy_from_slice(&v);
    let (_, s) = tiny_batch(&cfg, &mut Rng::new(1, 99));
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g).unwrap();
    let u = encode_image(&mut g, &cfg, &b, &s).unwrap();
    let u = g.value(u);
    assert_eq!(u.shape(), &[2, 3, 8]);
    for r in u.data().chunks(8) {
        assert_eq!(r, v.as_slice());
    }
}

fn permute_objects(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let (b, k, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(t.numel());
    for bi in 0..b {
        for &j in perm {
            data.extend_from_slice(&t.data()[(bi * k + j) * w..(bi * k + j + 1) * w]);
        }
    }
    Tensor::new(s.to_vec(), data).unwrap()
}

#[test]
fn objects_are_permutation_equivariant() {
    let (cfg, p) = tiny_params(8, 0.3);
    let (q, s) = tiny_batch(&cfg, &mut Rng::new(4, 99));
    let perm = [2, 0, 1];
    let ps = SceneBatch {
        roi: permute_objects(&s.roi, &perm),
        bbox: permute_objects(&s.bbox, &perm),
    };
    let run = |s: &SceneBatch| {
        let mut g = Graph::new();
        let b = p.bind_frozen(&mut g).unwrap();
        let u = encode_image(&mut g, &cfg, &b, s).unwrap();
        let u = g.value(u).clone();
        drop(g);
        (u, forward_frozen(&cfg, &p, &q, s).unwrap())
    };
    let (u, t) = run(&s);
    let (pu, pt) = run(&ps);
    assert!(permute_objects(&u, &perm).max_abs_diff(&pu) < 1e-12);
    // z is (B, L, H, k); view it as (rows, k, 1) to permute the object axis.
    let as_rows = |z: &Tensor| z.clone().reshape(&[z.numel() / 3, 3, 1]).unwrap();
    let moved = permute_objects(&as_rows(&t.z_logits), &perm);
    assert!(moved.max_abs_diff(&as_rows(&pt.z_logits)) < 1e-12);
    assert!(t.answer_probs.max_abs_diff(&pt.answer_probs) < 1e-12);
}

#[test]
fn single_object_gets_all_attention() {
    let (mut cfg, _) = tiny_params(1, 0.3);
    cfg.objects = 1;
    let p = ModelParams::init(&cfg, &mut Rng::new(1, 7)).unwrap();
    let mut rng = Rng::new(3, 99);
    let q = QuestionBatch::from_sequences(&[vec![2, 3]], vec!["en".into()], cfg.max_len).unwrap();
    let s = SceneBatch {
        roi: random(&[1, 1, cfg.roi_dim], &mut rng, 1.0),
        bbox: Tensor::full(&[1, 1, 4], 0.5),
    };
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g).unwrap();
    let taps = forward(&mut g, &cfg, &b, &q, &s).unwrap();
    for &a in &taps.object_attention {
        assert!(g.value(a).data().iter().all(|&w| w == 1.0));
    }
}

#[test]
fn softmax_of_raw_scores_reproduces_attention() {
    let (cfg, p) = tiny_params(2, 0.5);
    let (q, s) = tiny_batch(&cfg, &mut Rng::new(6, 99));
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g).unwrap();
    let taps = forward(&mut g, &cfg, &b, &q, &s).unwrap();
    assert_eq!(taps.values(&g).unwrap().z_logits.shape(), &[2, 1, 2, 3]);
    for (&z, &a) in taps.z.iter().zip(&taps.object_attention) {
        for (zr, ar) in g.value(z).data().chunks(3).zip(g.value(a).data().chunks(3)) {
            let m = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = zr.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            for (ei, ai) in e.iter().zip(ar) {
                assert!((ei / sum - ai).abs() < 1e-12);
            }
            assert!((ar.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_answer_head_gives_one_half() {
    let (cfg, mut p) = tiny_params(2, 0.3);
    zero(&mut p, "head.out.w");
    zero(&mut p, "head.out.b");
    let (q, s) = tiny_batch(&cfg, &mut Rng::new(6, 99));
    let t = forward_frozen(&cfg, &p, &q, &s).unwrap();
    assert_eq!(t.answer_probs.shape(), &[2, 4]);
    assert!(t.answer_probs.data().iter().all(|&v| v == 0.5));
}

#[test]
fn frozen_forward_is_deterministic_and_allocates_no_gradients() {
    let (cfg, p) = tiny_params(2, 0.3);
    let (q, s) = tiny_batch(&cfg, &mut Rng::new(6, 99));
    let mut g = Graph::new();
    let b = p.bind_frozen(&mut g).unwrap();
    let taps = forward(&mut g, &cfg, &b, &q, &s).unwrap();
    assert_eq!(g.grad_buffer_count(), 0);
    let a = taps.values(&g).unwrap();
    let b2 = forward_frozen(&cfg, &p, &q, &s).unwrap();
    assert_eq!(a, b2);
    assert!(a.answer_probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(a.cls.len(), cfg.cross_layers * cfg.heads);
    assert_eq!(a.cls[&TapKey::new(1, 2)].shape(), &[2, 4]);
}

#[test]
fn copied_student_reproduces_teacher_taps() {
    let (cfg, teacher) = tiny_params(2, 0.3);
    let mut student = ModelParams::init(&cfg, &mut Rng::new(99, 7)).unwrap();
    assert_ne!(student, teacher);
    student.copy_from(&teacher, |_| true).unwrap();
    let (q, s) = tiny_batch(&cfg, &mut Rng::new(6, 99));
    assert_eq!(
        forward_frozen(&cfg, &teacher, &q, &s).unwrap(),
        forward_frozen(&cfg, &student, &q, &s).unwrap()
    );
}

#[test]
fn tap_values_split_and_join() {
    let (cfg, p) = tiny_params(2, 0.3);
    let (q, s) = tiny_batch(&cfg, &mut Rng::new(6, 99));
    let t = forward_frozen(&cfg, &p, &q, &s).unwrap();
    let items = [t.item(0), t.item(1)];
    assert_eq!(TapValues::concat(&[&items[0], &items[1]]).unwrap(), t);
    let mut g = Graph::new();
    let taps = t.to_taps(&mut g).unwrap();
    assert_eq!(taps.values(&g).unwrap(), t);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (cfg, p) = tiny_params(5, 0.4);
    let mut rng = Rng::new(11, 99);
    let (q, s) = tiny_batch(&cfg, &mut rng);
    let weights = random(&[2, 4], &mut rng, 1.0);
    for name in [
        "lang.tok_emb",
        "lang.0.attn.k.w",
        "img.roi.w",
        "cross.0.q2i.q.w",
        "cross.0.i2q.v.w",
        "cross.0.qblock.mlp.fc1.w",
        "head.wp.w",
    ] {
        let err = grad_check(
            |g, x| {
                let mut b = p.bind_frozen(g)?;
                b.set(name, x)?;
                let taps = forward(g, &cfg, &b, &q, &s)?;
                let w = g.constant(weights.clone())?;
                let y = g.mul(taps.answer_probs, w)?;
                let z = taps.z_tap(g, TapKey::new(1, 1))?;
                let zs = g.mean(z)?;
                let ys = g.sum(y)?;
                g.add(ys, zs)
            },
            p.get(name).unwrap(),
            FD_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "{name}: {err}");
    }
}
