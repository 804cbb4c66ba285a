//! Finite-difference checks of every differentiable op and of the full
//! distillation loss.
//!
//! Each op output is reduced with random weights so no gradient entry is
//! structurally zero.

use serde::Serialize;

use crate::distill::{total_loss, DistillConfig};
use crate::error::Result;
use crate::model::{forward, ModelConfig, ModelParams, QuestionBatch, SceneBatch};
use crate::rng::{stream, Rng};
use crate::tensor::{grad_check, Graph, Tensor, Var, FD_STEP};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub op: String,
    pub max_rel_error: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.normal(0.0, scale)).collect(),
    )
    .expect("sizes agree")
}

fn uniform(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect()).expect("sizes agree")
}

/// `Σ w ⊙ y` for a fixed random `w` shaped like `y`.
fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone())?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Suite {
    rows: Vec<GradCheckRow>,
}

impl Suite {
    fn check<F>(&mut self, op: &str, input: &Tensor, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let e = grad_check(f, input, FD_STEP)?;
        self.rows.push(GradCheckRow {
            op: op.to_string(),
            max_rel_error: e,
        });
        Ok(())
    }
}

/// Worst relative error of every op (per differentiable input) and of the
/// end-to-end distillation loss for a set of parameters.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = Rng::new(seed, stream::FIXTURE);
    let mut s = Suite { rows: Vec::new() };

    let a = random(&[2, 3, 4], &mut rng, 1.0);
    let b = random(&[4, 5], &mut rng, 1.0);
    let bt = random(&[5, 4], &mut rng, 1.0);
    let w35 = random(&[2, 3, 5], &mut rng, 1.0);
    let w34 = random(&[2, 3, 4], &mut rng, 1.0);
    let other = random(&[2, 3, 4], &mut rng, 1.0);
    let bias = random(&[4], &mut rng, 1.0);

    s.check("matmul.a", &a, |g, x| {
        let c = g.constant(b.clone())?;
        let y = g.matmul(x, c)?;
        weighted(g, y, &w35)
    })?;
    s.check("matmul.b", &b, |g, x| {
        let c = g.constant(a.clone())?;
        let y = g.matmul(c, x)?;
        weighted(g, y, &w35)
    })?;
    s.check("matmul_t.a", &a, |g, x| {
        let c = g.constant(bt.clone())?;
        let y = g.matmul_t(x, c)?;
        weighted(g, y, &w35)
    })?;
    s.check("matmul_t.b", &bt, |g, x| {
        let c = g.constant(a.clone())?;
        let y = g.matmul_t(c, x)?;
        weighted(g, y, &w35)
    })?;
    let batched = random(&[2, 5, 4], &mut rng, 1.0);
    s.check("matmul_t.batched", &batched, |g, x| {
        let c = g.constant(a.clone())?;
        let y = g.matmul_t(c, x)?;
        weighted(g, y, &w35)
    })?;
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        for (side, swap) in [("a", false), ("b", true)] {
            s.check(&format!("{name}.{side}"), &a, |g, x| {
                let c = g.constant(other.clone())?;
                let (l, r) = if swap { (c, x) } else { (x, c) };
                let y = match which {
                    0 => g.add(l, r)?,
                    1 => g.sub(l, r)?,
                    _ => g.mul(l, r)?,
                };
                weighted(g, y, &w34)
            })?;
        }
    }
    s.check("scale", &a, |g, x| {
        let y = g.scale(x, -1.7)?;
        weighted(g, y, &w34)
    })?;
    s.check("add_bias.x", &a, |g, x| {
        let c = g.constant(bias.clone())?;
        let y = g.add_bias(x, c)?;
        weighted(g, y, &w34)
    })?;
    s.check("add_bias.bias", &bias, |g, x| {
        let c = g.constant(a.clone())?;
        let y = g.add_bias(c, x)?;
        weighted(g, y, &w34)
    })?;
    s.check("gelu", &a, |g, x| {
        let y = g.gelu(x)?;
        weighted(g, y, &w34)
    })?;
    s.check("sigmoid", &a, |g, x| {
        let y = g.sigmoid(x)?;
        weighted(g, y, &w34)
    })?;
    s.check("softmax", &a, |g, x| {
        let y = g.softmax(x)?;
        weighted(g, y, &w34)
    })?;
    let mask = [true, true, false, true, true, false, true, true];
    s.check("softmax_masked", &a, |g, x| {
        let y = g.softmax_masked(x, &mask, 3)?;
        weighted(g, y, &w34)
    })?;
    let gain = uniform(&[4], &mut rng, 0.5, 1.5);
    s.check("layer_norm.x", &a, |g, x| {
        let gn = g.constant(gain.clone())?;
        let bs = g.constant(bias.clone())?;
        let y = g.layer_norm(x, gn, bs)?;
        weighted(g, y, &w34)
    })?;
    s.check("layer_norm.gain", &gain, |g, x| {
        let xv = g.constant(a.clone())?;
        let bs = g.constant(bias.clone())?;
        let y = g.layer_norm(xv, x, bs)?;
        weighted(g, y, &w34)
    })?;
    s.check("layer_norm.bias", &bias, |g, x| {
        let xv = g.constant(a.clone())?;
        let gn = g.constant(gain.clone())?;
        let y = g.layer_norm(xv, gn, x)?;
        weighted(g, y, &w34)
    })?;
    s.check("sum", &a, |g, x| {
        let y = g.mul(x, x)?;
        g.sum(y)
    })?;
    s.check("mean", &a, |g, x| {
        let y = g.mul(x, x)?;
        g.mean(y)
    })?;
    s.check("mse", &a, |g, x| {
        let c = g.constant(other.clone())?;
        g.mse(x, c)
    })?;
    let probs = uniform(&[3, 4], &mut rng, 0.05, 0.95);
    let targets = uniform(&[3, 4], &mut rng, 0.0, 1.0);
    s.check("bce_sum", &probs, |g, x| {
        let t = g.constant(targets.clone())?;
        g.bce_sum(x, t)
    })?;
    let w6_4 = random(&[6, 4], &mut rng, 1.0);
    s.check("reshape", &a, |g, x| {
        let y = g.reshape(x, &[6, 4])?;
        weighted(g, y, &w6_4)
    })?;
    let w243 = random(&[2, 4, 3], &mut rng, 1.0);
    s.check("transpose", &a, |g, x| {
        let y = g.transpose(x)?;
        weighted(g, y, &w243)
    })?;
    let w423 = random(&[4, 2, 3], &mut rng, 1.0);
    s.check("permute", &a, |g, x| {
        let y = g.permute(x, &[2, 0, 1])?;
        weighted(g, y, &w423)
    })?;
    let w238 = random(&[2, 3, 8], &mut rng, 1.0);
    s.check("concat", &a, |g, x| {
        let c = g.constant(other.clone())?;
        let y = g.concat(&[c, x], 2)?;
        weighted(g, y, &w238)
    })?;
    let w224 = random(&[2, 2, 4], &mut rng, 1.0);
    s.check("slice", &a, |g, x| {
        let y = g.slice(x, 1, 1, 2)?;
        weighted(g, y, &w224)
    })?;
    let table = random(&[5, 3], &mut rng, 1.0);
    let w_emb = random(&[2, 3, 3], &mut rng, 1.0);
    s.check("embedding", &table, |g, x| {
        let y = g.embedding(x, &[0, 2, 2, 4, 1, 0], &[2, 3])?;
        weighted(g, y, &w_emb)
    })?;

    end_to_end(&mut s, &mut rng)?;
    Ok(s.rows)
}

/// Tiny teacher/student pair and batch for the end-to-end check.
fn end_to_end(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    // Larger scales saturate the answer sigmoid and leave gradients near 1e-8,
    // where central differences lose the relative precision the check needs.
    let cfg = ModelConfig {
        init_std: 0.3,
        ..ModelConfig::tiny()
    };
    let teacher = ModelParams::init(&cfg, rng)?;
    let student = ModelParams::init(&cfg, rng)?;
    let seqs = vec![vec![2, 3, 4], vec![5, 6]];
    let q = QuestionBatch::from_sequences(&seqs, vec!["xa".into(), "xb".into()], cfg.max_len)?;
    let sc = SceneBatch {
        roi: random(&[2, cfg.objects, cfg.roi_dim], rng, 1.0),
        bbox: uniform(&[2, cfg.objects, cfg.box_dim], rng, 0.1, 0.9),
    };
    let mut gold = Tensor::zeros(&[2, cfg.answer_count]);
    gold.data_mut()[1] = 1.0;
    gold.data_mut()[cfg.answer_count + 3] = 1.0;
    let dcfg = DistillConfig::default();
    let names = [
        "lang.tok_emb",
        "lang.0.attn.q.w",
        "lang.0.mlp.fc2.w",
        "img.box.w",
        "img.0.ln1.g",
        "cross.0.q2i.k.w",
        "cross.0.i2q.o.w",
        "cross.0.iblock.mlp.fc1.b",
        "head.out.w",
    ];
    for name in names {
        s.check(
            &format!("total_loss.{name}"),
            student.get(name).expect("known parameter"),
            |g, x| {
                let tp = teacher.bind_frozen(g)?;
                let t = forward(g, &cfg, &tp, &q, &sc)?;
                let mut sp = student.bind_frozen(g)?;
                sp.set(name, x)?;
                let st = forward(g, &cfg, &sp, &q, &sc)?;
                let y = g.constant(gold.clone())?;
                Ok(total_loss(g, &t, &st, y, &cfg, &dcfg)?.total)
            },
        )?;
    }
    Ok(())
}
