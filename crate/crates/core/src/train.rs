//! Teaching the toy model the corpus facts.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::{FactCorpus, Prompt, TokenId};
use crate::model::{argmax, ModelConfig, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Minimum rewrite-prompt recall for training to count as a success.
    pub recall_target: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 6000,
            lr: 3e-3,
            batch_size: 16,
            eval_every: 200,
            recall_target: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub rewrite_recall: f64,
    pub paraphrase_recall: f64,
    pub loss_trace: Vec<f64>,
}

/// Fraction of prompts whose argmax next token is the paired answer.
pub fn recall(model: &ModelState, items: &[(&Prompt, TokenId)]) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (p, o) in items {
        if argmax(&model.logits(&p.tokens)?) == *o as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

pub fn rewrite_recall(model: &ModelState, corpus: &FactCorpus) -> Result<f64> {
    let items: Vec<_> = corpus
        .facts
        .iter()
        .map(|f| (&f.prompts.rewrite, f.triplet.object))
        .collect();
    recall(model, &items)
}

pub fn paraphrase_recall(model: &ModelState, corpus: &FactCorpus) -> Result<f64> {
    let items: Vec<_> = corpus
        .facts
        .iter()
        .flat_map(|f| f.prompts.paraphrases.iter().map(move |p| (p, f.triplet.object)))
        .collect();
    recall(model, &items)
}

/// A random training sentence for fact `i`: up to three filler words, the
/// subject, then one of the relation's surface templates.
fn sample_prompt(corpus: &FactCorpus, i: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let f = &corpus.facts[i].triplet;
    let n_prefix = rng.random_range(0..=3usize);
    let mut tokens: Vec<TokenId> = (0..n_prefix)
        .map(|_| *corpus.fillers.choose(rng).expect("fillers nonempty"))
        .collect();
    tokens.extend_from_slice(&f.subject);
    let templates = &corpus.relation_templates[f.relation];
    tokens.extend_from_slice(templates.choose(rng).expect("templates nonempty"));
    tokens
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Trains a fresh model on `corpus`. Stops early once every rewrite prompt
/// and at least the target fraction of paraphrases are recalled; fails with
/// [`Error::TrainingFailed`] if rewrite recall ends below the target.
pub fn train(
    model_config: ModelConfig,
    corpus: &FactCorpus,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainReport)> {
    if model_config.vocab_size != corpus.vocabulary.len() {
        return Err(Error::DimensionMismatch(format!(
            "model vocabulary {} but corpus has {} tokens",
            model_config.vocab_size,
            corpus.vocabulary.len()
        )));
    }
    if corpus.facts.is_empty() || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidInput("empty corpus or zero batch".into()));
    }
    let mut model = ModelState::init(model_config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params.len());
    let mut grads = vec![0.0; model.params.len()];
    let mut loss_trace = Vec::new();
    let mut running = 0.0;
    let mut steps = 0;
    let mut order: Vec<usize> = Vec::new();

    while steps < cfg.max_steps {
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..corpus.facts.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            }
            let i = order.pop().expect("refilled");
            let tokens = sample_prompt(corpus, i, &mut rng);
            batch_loss += model.loss_and_grad(&tokens, corpus.facts[i].triplet.object, &mut grads)?;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        adam.step(&mut model.params, &grads, cfg.lr);
        steps += 1;
        running += batch_loss * inv;
        if steps % cfg.eval_every == 0 {
            let mean = running / cfg.eval_every as f64;
            running = 0.0;
            if !mean.is_finite() {
                return Err(Error::Optimization(format!("training loss {mean}")));
            }
            loss_trace.push(mean);
            if rewrite_recall(&model, corpus)? >= 1.0
                && paraphrase_recall(&model, corpus)? >= cfg.recall_target
            {
                break;
            }
        }
    }

    let rewrite = rewrite_recall(&model, corpus)?;
    if rewrite < cfg.recall_target {
        return Err(Error::TrainingFailed {
            recall: rewrite,
            target: cfg.recall_target,
            steps,
        });
    }
    let report = TrainReport {
        steps,
        final_loss: loss_trace.last().copied().unwrap_or(f64::NAN),
        rewrite_recall: rewrite,
        paraphrase_recall: paraphrase_recall(&model, corpus)?,
        loss_trace,
    };
    Ok((model, report))
}
