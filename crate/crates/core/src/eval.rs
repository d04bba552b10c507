//! Edit-quality metrics: efficacy, generalization, specificity and their
//! harmonic mean, plus fluency and consistency of generated text.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::{Fact, FactCorpus, Prompt, TokenId};
use crate::model::{argmax, ModelState};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const GENERATION_LENGTH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricCriterion {
    ProbabilityBased,
    GenerationBased,
    TokenLevel,
}

/// Efficacy, generalization and specificity of one edit, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditScore {
    pub fact: usize,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: String,
    pub criterion: MetricCriterion,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub s_harmonic: f64,
    pub fluency: f64,
    pub consistency: f64,
    pub per_edit: Vec<EditScore>,
    pub metadata: BTreeMap<String, String>,
}

/// `3 / (1/a + 1/b + 1/c)`, or 0 when any score is 0.
pub fn harmonic_s(eff: f64, gen: f64, spe: f64) -> f64 {
    if eff <= 0.0 || gen <= 0.0 || spe <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / eff + 1.0 / gen + 1.0 / spe)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn new_object(f: &Fact) -> Result<TokenId> {
    f.triplet
        .new_object
        .ok_or_else(|| Error::InvalidInput("fact has no new object".into()))
}

fn aggregate(scores: &[EditScore]) -> (f64, f64, f64) {
    let e: Vec<f64> = scores.iter().map(|s| s.efficacy).collect();
    let g: Vec<f64> = scores.iter().map(|s| s.generalization).collect();
    let s: Vec<f64> = scores.iter().map(|s| s.specificity).collect();
    (100.0 * mean(&e), 100.0 * mean(&g), 100.0 * mean(&s))
}

fn check_items(items: &[(usize, &Fact)]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InsufficientData("empty edit set".into()));
    }
    Ok(())
}

/// Probability criterion: an edit succeeds on a prompt when `P(o*) > P(o)`;
/// a neighborhood prompt passes when `P(o) > P(o*)`. Ties fail.
pub fn probability_metrics(
    model: &ModelState,
    items: &[(usize, &Fact)],
) -> Result<Vec<EditScore>> {
    check_items(items)?;
    items
        .iter()
        .map(|&(idx, f)| {
            let o = f.triplet.object as usize;
            let o_new = new_object(f)? as usize;
            let prefers_new = |p: &Prompt| -> Result<bool> {
                let l = model.logits(&p.tokens)?;
                Ok(l[o_new] > l[o])
            };
            let prefers_old = |p: &Prompt| -> Result<bool> {
                let l = model.logits(&p.tokens)?;
                Ok(l[o] > l[o_new])
            };
            let efficacy = indicator(prefers_new(&f.prompts.rewrite)?);
            let gen = f
                .prompts
                .paraphrases
                .iter()
                .map(|p| prefers_new(p).map(indicator))
                .collect::<Result<Vec<_>>>()?;
            let spe = f
                .prompts
                .neighborhood
                .iter()
                .map(|p| prefers_old(p).map(indicator))
                .collect::<Result<Vec<_>>>()?;
            Ok(EditScore {
                fact: idx,
                efficacy,
                generalization: mean(&gen),
                specificity: mean(&spe),
            })
        })
        .collect()
}

/// True when every token of `target` is the greedy choice under teacher
/// forcing after `prompt`.
pub fn greedy_matches(model: &ModelState, prompt: &[TokenId], target: &[TokenId]) -> Result<bool> {
    Ok(token_level_accuracy(model, prompt, target)? == 1.0)
}

/// Generation criterion: rewrite and paraphrase prompts succeed when `o*`
/// is produced greedily; a neighborhood prompt passes when its argmax is
/// unchanged from `pre_edit`.
pub fn generation_metrics(
    model: &ModelState,
    pre_edit: &ModelState,
    items: &[(usize, &Fact)],
) -> Result<Vec<EditScore>> {
    check_items(items)?;
    items
        .iter()
        .map(|&(idx, f)| {
            let o_new = [new_object(f)?];
            let efficacy = indicator(greedy_matches(model, &f.prompts.rewrite.tokens, &o_new)?);
            let gen = f
                .prompts
                .paraphrases
                .iter()
                .map(|p| greedy_matches(model, &p.tokens, &o_new).map(indicator))
                .collect::<Result<Vec<_>>>()?;
            let spe = f
                .prompts
                .neighborhood
                .iter()
                .map(|p| {
                    let now = argmax(&model.logits(&p.tokens)?);
                    let before = argmax(&pre_edit.logits(&p.tokens)?);
                    Ok(indicator(now == before))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EditScore {
                fact: idx,
                efficacy,
                generalization: mean(&gen),
                specificity: mean(&spe),
            })
        })
        .collect()
}

/// Fraction of `target` positions whose argmax equals the target token
/// given the gold prefix.
pub fn token_level_accuracy(model: &ModelState, prompt: &[TokenId], target: &[TokenId]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::InvalidInput("empty target".into()));
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&target[..target.len() - 1]);
    let logits = model.logits_all(&tokens)?;
    let start = prompt.len() - 1;
    let hits = target
        .iter()
        .enumerate()
        .filter(|(i, &t)| argmax(&logits[start + i]) == t as usize)
        .count();
    Ok(hits as f64 / target.len() as f64)
}

/// Token-level criterion: accuracy of `o*` on rewrite and paraphrase
/// prompts, and of the original answer on neighborhood prompts.
pub fn token_level_metrics(model: &ModelState, items: &[(usize, &Fact)]) -> Result<Vec<EditScore>> {
    check_items(items)?;
    items
        .iter()
        .map(|&(idx, f)| {
            let o_new = [new_object(f)?];
            let o = [f.triplet.object];
            let gen = f
                .prompts
                .paraphrases
                .iter()
                .map(|p| token_level_accuracy(model, &p.tokens, &o_new))
                .collect::<Result<Vec<_>>>()?;
            let spe = f
                .prompts
                .neighborhood
                .iter()
                .map(|p| token_level_accuracy(model, &p.tokens, &o))
                .collect::<Result<Vec<_>>>()?;
            Ok(EditScore {
                fact: idx,
                efficacy: token_level_accuracy(model, &f.prompts.rewrite.tokens, &o_new)?,
                generalization: mean(&gen),
                specificity: mean(&spe),
            })
        })
        .collect()
}

/// Empirical n-gram distribution `g_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramDistribution {
    pub n: usize,
    pub frequencies: BTreeMap<Vec<TokenId>, f64>,
}

impl NGramDistribution {
    pub fn new(text: &[TokenId], n: usize) -> Result<Self> {
        if n == 0 || text.len() < n {
            return Err(Error::InvalidInput(format!(
                "text of length {} has no {n}-grams",
                text.len()
            )));
        }
        let mut counts: BTreeMap<Vec<TokenId>, usize> = BTreeMap::new();
        for w in text.windows(n) {
            *counts.entry(w.to_vec()).or_default() += 1;
        }
        let total = (text.len() + 1 - n) as f64;
        Ok(Self {
            n,
            frequencies: counts.into_iter().map(|(k, c)| (k, c as f64 / total)).collect(),
        })
    }

    /// Shannon entropy in bits.
    pub fn entropy(&self) -> f64 {
        -self
            .frequencies
            .values()
            .map(|p| p * p.log2())
            .sum::<f64>()
    }
}

/// `(2/3) H₂ + (4/3) H₃` over bigram and trigram distributions (bits).
pub fn fluency_entropy(text: &[TokenId]) -> Result<f64> {
    if text.len() < 3 {
        return Err(Error::InvalidInput("fluency needs at least 3 tokens".into()));
    }
    let h2 = NGramDistribution::new(text, 2)?.entropy();
    let h3 = NGramDistribution::new(text, 3)?.entropy();
    Ok((2.0 / 3.0) * h2 + (4.0 / 3.0) * h3)
}

/// Smoothed inverse document frequencies over a reference collection.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdf {
    n_docs: usize,
    df: HashMap<TokenId, usize>,
}

impl TfIdf {
    pub fn fit(docs: &[Vec<TokenId>]) -> Self {
        let mut df: HashMap<TokenId, usize> = HashMap::new();
        for d in docs {
            let mut seen: Vec<TokenId> = d.clone();
            seen.sort_unstable();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_default() += 1;
            }
        }
        Self {
            n_docs: docs.len(),
            df,
        }
    }

    /// `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, token: TokenId) -> f64 {
        let df = self.df.get(&token).copied().unwrap_or(0) as f64;
        ((1.0 + self.n_docs as f64) / (1.0 + df)).ln() + 1.0
    }

    pub fn vector(&self, text: &[TokenId]) -> BTreeMap<TokenId, f64> {
        let mut tf: BTreeMap<TokenId, f64> = BTreeMap::new();
        for &t in text {
            *tf.entry(t).or_default() += 1.0;
        }
        for (t, v) in tf.iter_mut() {
            *v *= self.idf(*t);
        }
        tf
    }
}

/// Cosine similarity of TF-IDF vectors; 0 when either text is empty.
pub fn consistency_score(generated: &[TokenId], reference: &[TokenId], tfidf: &TfIdf) -> f64 {
    let a = tfidf.vector(generated);
    let b = tfidf.vector(reference);
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(t, v)| b.get(t).map(|w| v * w))
        .sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Facts whose pre-edit argmax on the rewrite prompt is the true object.
pub fn eligible_facts(model: &ModelState, corpus: &FactCorpus) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, f) in corpus.facts.iter().enumerate() {
        if argmax(&model.logits(&f.prompts.rewrite.tokens)?) == f.triplet.object as usize {
            out.push(i);
        }
    }
    Ok(out)
}

/// Mean fluency and consistency (both ×100) of greedy continuations of the
/// rewrite prompts.
pub fn generation_quality(
    model: &ModelState,
    items: &[(usize, &Fact)],
    corpus: &FactCorpus,
    tfidf: &TfIdf,
) -> Result<(f64, f64)> {
    check_items(items)?;
    let mut flu = Vec::with_capacity(items.len());
    let mut con = Vec::with_capacity(items.len());
    for (_, f) in items {
        let prompt = &f.prompts.rewrite.tokens;
        let mut text = prompt.clone();
        text.extend(model.generate_greedy(prompt, GENERATION_LENGTH)?);
        flu.push(fluency_entropy(&text)?);
        let reference = corpus.reference_text(new_object(f)?);
        con.push(consistency_score(&text, &reference, tfidf));
    }
    Ok((100.0 * mean(&flu), 100.0 * mean(&con)))
}

/// Full evaluation of an edited model under every criterion.
pub fn evaluate(
    model: &ModelState,
    pre_edit: &ModelState,
    corpus: &FactCorpus,
    edited: &[usize],
    mode: &str,
) -> Result<Vec<EvalReport>> {
    let items: Vec<(usize, &Fact)> = edited.iter().map(|&i| (i, &corpus.facts[i])).collect();
    let tfidf = TfIdf::fit(&corpus.reference_texts());
    let (fluency, consistency) = generation_quality(model, &items, corpus, &tfidf)?;
    let mut metadata = BTreeMap::new();
    metadata.insert(
        "aggregation".to_string(),
        "mean within edit over prompts, then mean over edits".to_string(),
    );
    metadata.insert("generation_length".to_string(), GENERATION_LENGTH.to_string());
    metadata.insert(
        "fluency".to_string(),
        "(2/3) H2 + (4/3) H3 in bits, x100".to_string(),
    );
    let runs = [
        (MetricCriterion::ProbabilityBased, probability_metrics(model, &items)?),
        (
            MetricCriterion::GenerationBased,
            generation_metrics(model, pre_edit, &items)?,
        ),
        (MetricCriterion::TokenLevel, token_level_metrics(model, &items)?),
    ];
    Ok(runs
        .into_iter()
        .map(|(criterion, per_edit)| {
            let (efficacy, generalization, specificity) = aggregate(&per_edit);
            EvalReport {
                schema_version: REPORT_SCHEMA_VERSION,
                mode: mode.to_string(),
                criterion,
                efficacy,
                generalization,
                specificity,
                s_harmonic: harmonic_s(efficacy, generalization, specificity),
                fluency,
                consistency,
                per_edit,
                metadata: metadata.clone(),
            }
        })
        .collect())
}

/// Flat CSV: one summary row per report followed by per-edit rows.
pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode",
        "criterion",
        "fact",
        "efficacy",
        "generalization",
        "specificity",
        "s_harmonic",
        "fluency",
        "consistency",
    ])?;
    for r in reports {
        let crit = serde_json::to_value(r.criterion)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        w.write_record([
            r.mode.clone(),
            crit.clone(),
            "all".to_string(),
            r.efficacy.to_string(),
            r.generalization.to_string(),
            r.specificity.to_string(),
            r.s_harmonic.to_string(),
            r.fluency.to_string(),
            r.consistency.to_string(),
        ])?;
        for e in &r.per_edit {
            w.write_record([
                r.mode.clone(),
                crit.clone(),
                e.fact.to_string(),
                (100.0 * e.efficacy).to_string(),
                (100.0 * e.generalization).to_string(),
                (100.0 * e.specificity).to_string(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_examples() {
        assert!((harmonic_s(100.0, 100.0, 100.0) - 100.0).abs() < 1e-12);
        assert_eq!(harmonic_s(0.0, 90.0, 90.0), 0.0);
        assert!((harmonic_s(99.7, 90.3, 74.2) - 86.8).abs() < 0.2);
    }

    #[test]
    fn fluency_examples() {
        assert_eq!(fluency_entropy(&[7; 50]).unwrap(), 0.0);
        let unique: Vec<TokenId> = (0..20).collect();
        let expect = (2.0 / 3.0) * 19f64.log2() + (4.0 / 3.0) * 18f64.log2();
        assert!((fluency_entropy(&unique).unwrap() - expect).abs() < 1e-12);
        let repetitive = [1, 2, 1, 2, 1, 2, 1, 2, 1, 2];
        let varied = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert!(fluency_entropy(&repetitive).unwrap() < fluency_entropy(&varied).unwrap());
        assert!(fluency_entropy(&[1, 2]).is_err());
        let relabeled: Vec<TokenId> = repetitive.iter().map(|t| t + 40).collect();
        assert_eq!(
            fluency_entropy(&relabeled).unwrap(),
            fluency_entropy(&repetitive).unwrap()
        );
    }

    #[test]
    fn consistency_examples() {
        let docs = vec![vec![1, 2, 3], vec![3, 4], vec![5]];
        let t = TfIdf::fit(&docs);
        assert!((consistency_score(&[1, 2, 3], &[1, 2, 3], &t) - 1.0).abs() < 1e-12);
        assert_eq!(consistency_score(&[1, 2], &[4, 5], &t), 0.0);
        assert_eq!(consistency_score(&[], &[4, 5], &t), 0.0);
    }

    #[test]
    fn tfidf_hand_computed() {
        // N = 3 documents; df(3) = 2, df(1) = df(4) = 1.
        let docs = vec![vec![1, 3], vec![3, 4], vec![2]];
        let t = TfIdf::fit(&docs);
        let idf1 = (4.0f64 / 2.0).ln() + 1.0;
        let idf3 = (4.0f64 / 3.0).ln() + 1.0;
        let idf4 = idf1;
        let a = [1, 3, 3];
        let b = [3, 4];
        let va = [idf1, 2.0 * idf3, 0.0];
        let vb = [0.0, idf3, idf4];
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((consistency_score(&a, &b, &t) - dot / (na * nb)).abs() < 1e-9);
    }
}
