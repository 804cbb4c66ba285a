use std::collections::BTreeMap;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Token/position embeddings and their layer norm.
    LangEmbedding,
    LangLayer(usize),
    /// RoI and box projections.
    ImageProjection,
    ImageLayer(usize),
    CrossLayer(usize),
    AnswerHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        let mut parts = name.split('.');
        let stack = parts.next()?;
        let second = parts.next()?;
        let layer = second.parse::<usize>().ok();
        Some(match (stack, layer) {
            ("lang", Some(i)) => ParamGroup::LangLayer(i),
            ("lang", None) => ParamGroup::LangEmbedding,
            ("img", Some(i)) => ParamGroup::ImageLayer(i),
            ("img", None) => ParamGroup::ImageProjection,
            ("cross", Some(i)) => ParamGroup::CrossLayer(i),
            ("head", _) => ParamGroup::AnswerHead,
            _ => return None,
        })
    }
}

/// Named parameter collection. Names are unique and iterate in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

struct Specs {
    d: usize,
    list: Vec<(String, Vec<usize>, Init)>,
}

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.list.push((name, shape, init));
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) {
        self.push(format!("{name}.w"), vec![out, inp], Init::Normal);
        self.push(format!("{name}.b"), vec![out], Init::Zeros);
    }

    fn norm(&mut self, name: &str) {
        self.push(format!("{name}.g"), vec![self.d], Init::Ones);
        self.push(format!("{name}.b"), vec![self.d], Init::Zeros);
    }

    fn attention(&mut self, name: &str) {
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{proj}"), self.d, self.d);
        }
    }

    fn block(&mut self, name: &str, mlp_hidden: usize) {
        self.norm(&format!("{name}.ln1"));
        self.attention(&format!("{name}.attn"));
        self.norm(&format!("{name}.ln2"));
        self.linear(&format!("{name}.mlp.fc1"), mlp_hidden, self.d);
        self.linear(&format!("{name}.mlp.fc2"), self.d, mlp_hidden);
    }
}

fn specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden;
    let mut s = Specs {
        d,
        list: Vec::new(),
    };
    s.push("lang.tok_emb".into(), vec![cfg.vocab_size, d], Init::Normal);
    s.push("lang.pos_emb".into(), vec![cfg.max_len, d], Init::Normal);
    s.norm("lang.emb_ln");
    for i in 0..cfg.lang_layers {
        s.block(&format!("lang.{i}"), cfg.mlp_hidden);
    }
    s.linear("img.roi", d, cfg.roi_dim);
    s.linear("img.box", d, cfg.box_dim);
    for i in 0..cfg.image_layers {
        s.block(&format!("img.{i}"), cfg.mlp_hidden);
    }
    for l in 0..cfg.cross_layers {
        for dir in ["q2i", "i2q"] {
            let p = format!("cross.{l}.{dir}");
            s.norm(&format!("{p}.ln_q"));
            s.norm(&format!("{p}.ln_kv"));
            s.attention(&p);
        }
        s.block(&format!("cross.{l}.qblock"), cfg.mlp_hidden);
        s.block(&format!("cross.{l}.iblock"), cfg.mlp_hidden);
    }
    s.linear("head.wp", 2 * d, d);
    s.linear("head.out", cfg.answer_count, 2 * d);
    s.list
}

impl ModelParams {
    /// Truncated-normal weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in specs(cfg) {
            let mut t = Tensor::zeros(&shape);
            match init {
                Init::Normal => t
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.truncated_normal(cfg.init_std)),
                Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
                Init::Zeros => {}
            }
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ModelParams { tensors })
    }

    /// Builds a collection from named tensors, checking names and shapes
    /// against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let expected = specs(cfg);
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor whose group satisfies `pick` from `other`.
    pub fn copy_from(
        &mut self,
        other: &ModelParams,
        pick: impl Fn(ParamGroup) -> bool,
    ) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.tensors.iter_mut() {
            let Some(group) = ParamGroup::of(name) else {
                continue;
            };
            if !pick(group) {
                continue;
            }
            let src = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("source params lack {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "cannot copy {name}: shape {:?} vs {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Registers every tensor on `g`, trainable where `trainable(name)` holds.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = g.leaf(t.clone(), trainable(name))?;
            vars.insert(name.clone(), v);
        }
        Ok(BoundParams { vars })
    }

    /// Registers every tensor as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<BoundParams> {
        self.bind(g, |_| false)
    }
}

/// Parameters registered on one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Points `name` at another variable on the same graph.
    pub fn set(&mut self, name: &str, v: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }
}
