//! Synthetic fact corpora.
//!
//! A corpus is a closed vocabulary of made-up words, a set of
//! `(subject, relation, object)` facts with a counterfactual target object,
//! and the prompts used to probe each fact: a rewrite prompt, paraphrases
//! (filler prefix plus an alternate relation template) and neighborhood
//! prompts (other subjects sharing the relation and object).
//!
//! Facts are generated in groups that share one `(relation, object)` pair so
//! that every fact has enough neighbors; the neighbors are themselves facts
//! the model is trained on.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// Closed, ordered vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w)).collect()
    }
}

/// A token sequence with the location of the subject inside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub subject_start: usize,
    /// Exclusive end; the subject's last token sits at `subject_end - 1`.
    pub subject_end: usize,
}

impl Prompt {
    pub fn subject_last(&self) -> usize {
        self.subject_end - 1
    }

    pub fn subject(&self) -> &[TokenId] {
        &self.tokens[self.subject_start..self.subject_end]
    }

    pub fn compose(prefix: &[TokenId], subject: &[TokenId], relation: &[TokenId]) -> Self {
        let mut tokens = Vec::with_capacity(prefix.len() + subject.len() + relation.len());
        tokens.extend_from_slice(prefix);
        tokens.extend_from_slice(subject);
        tokens.extend_from_slice(relation);
        Self {
            tokens,
            subject_start: prefix.len(),
            subject_end: prefix.len() + subject.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriplet {
    pub subject: Vec<TokenId>,
    pub relation: usize,
    pub relation_tokens: Vec<TokenId>,
    pub object: TokenId,
    pub new_object: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub rewrite: Prompt,
    pub paraphrases: Vec<Prompt>,
    pub neighborhood: Vec<Prompt>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub triplet: FactTriplet,
    pub prompts: PromptSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_objects: usize,
    pub n_facts: usize,
    pub n_paraphrases: usize,
    pub n_neighborhood: usize,
    pub n_prefixes: usize,
    pub n_fillers: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_subjects: 300,
            n_relations: 8,
            n_objects: 20,
            n_facts: 200,
            n_paraphrases: 4,
            n_neighborhood: 4,
            n_prefixes: 8,
            n_fillers: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactCorpus {
    pub seed: u64,
    pub params: CorpusParams,
    pub vocabulary: Vocabulary,
    /// Two surface templates per relation; template 0 is canonical.
    pub relation_templates: Vec<Vec<Vec<TokenId>>>,
    pub objects: Vec<TokenId>,
    pub fillers: Vec<TokenId>,
    pub kl_template: Vec<TokenId>,
    pub facts: Vec<Fact>,
    pub subject_pool: Vec<Vec<TokenId>>,
    pub prefix_pool: Vec<Vec<TokenId>>,
}

impl FactCorpus {
    /// Prompt `"{subject} is a"` used by the KL regularizer.
    pub fn kl_prompt(&self, subject: &[TokenId]) -> Prompt {
        Prompt::compose(&[], subject, &self.kl_template)
    }

    /// Synthetic reference text about `object`: every canonical fact
    /// sentence in the corpus whose answer is `object`.
    pub fn reference_text(&self, object: TokenId) -> Vec<TokenId> {
        let mut text = Vec::new();
        for f in &self.facts {
            if f.triplet.object == object {
                text.extend_from_slice(&f.prompts.rewrite.tokens);
                text.push(object);
            }
        }
        text
    }

    pub fn reference_texts(&self) -> Vec<Vec<TokenId>> {
        self.objects
            .iter()
            .map(|&o| self.reference_text(o))
            .collect()
    }

    /// Checks every corpus invariant; used after generation and loading.
    pub fn validate(&self) -> Result<()> {
        let v = self.vocabulary.len() as TokenId;
        let in_vocab = |toks: &[TokenId]| toks.iter().all(|&t| t < v);
        let check = |ok: bool, what: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidInput(what))
            }
        };
        for (i, f) in self.facts.iter().enumerate() {
            let t = &f.triplet;
            check(!t.subject.is_empty(), format!("fact {i}: empty subject"))?;
            check(
                t.new_object != Some(t.object),
                format!("fact {i}: new object equals object"),
            )?;
            let p = &f.prompts;
            for prompt in std::iter::once(&p.rewrite)
                .chain(&p.paraphrases)
                .chain(&p.neighborhood)
            {
                check(
                    in_vocab(&prompt.tokens),
                    format!("fact {i}: token out of vocabulary"),
                )?;
                check(
                    prompt.subject_start < prompt.subject_end
                        && prompt.subject_end <= prompt.tokens.len(),
                    format!("fact {i}: bad subject span"),
                )?;
            }
            check(
                p.rewrite.subject() == t.subject.as_slice(),
                format!("fact {i}: rewrite prompt lacks subject"),
            )?;
            for para in &p.paraphrases {
                check(
                    para.subject() == t.subject.as_slice(),
                    format!("fact {i}: paraphrase lacks subject"),
                )?;
            }
            for nb in &p.neighborhood {
                check(
                    nb.subject() != t.subject.as_slice(),
                    format!("fact {i}: neighborhood prompt reuses subject"),
                )?;
            }
        }
        Ok(())
    }
}

const CONSONANTS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn word_factory(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>, syllables: usize) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(CONSONANTS.choose(rng).expect("nonempty"));
            w.push_str(VOWELS.choose(rng).expect("nonempty"));
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn distinct_filler_sequences(
    rng: &mut ChaCha8Rng,
    fillers: &[TokenId],
    count: usize,
    include_empty: bool,
) -> Vec<Vec<TokenId>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    if include_empty && count > 0 {
        seen.insert(Vec::new());
        out.push(Vec::new());
    }
    while out.len() < count {
        let len = rng.random_range(1..=3);
        let seq: Vec<TokenId> = (0..len)
            .map(|_| *fillers.choose(rng).expect("nonempty fillers"))
            .collect();
        if seen.insert(seq.clone()) {
            out.push(seq);
        }
    }
    out
}

/// Generates a deterministic synthetic corpus.
pub fn generate_corpus(seed: u64, params: CorpusParams) -> Result<FactCorpus> {
    let p = params;
    let fail = |msg: &str| Err(Error::Generation(msg.to_string()));
    if p.n_facts == 0 {
        return fail("n_facts must be positive");
    }
    if p.n_facts > p.n_subjects {
        return fail("n_facts exceeds n_subjects");
    }
    if p.n_objects < 2 {
        return fail("need at least two objects");
    }
    if p.n_relations == 0 {
        return fail("need at least one relation");
    }
    if p.n_neighborhood + 1 > p.n_facts {
        return fail("not enough facts to supply neighborhood prompts");
    }
    if p.n_fillers < 2 && (p.n_paraphrases > 1 || p.n_prefixes > 2) {
        return fail("too few filler words for distinct prefixes");
    }
    if p.n_prefixes == 0 {
        return fail("prefix pool must contain at least the empty prefix");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let mut tokens: Vec<String> = Vec::new();
    let push = |w: String, tokens: &mut Vec<String>| -> TokenId {
        tokens.push(w);
        (tokens.len() - 1) as TokenId
    };

    let n_heads = 2usize;
    let heads: Vec<TokenId> = (0..n_heads)
        .map(|_| {
            let w = word_factory(&mut rng, &mut taken, 1);
            push(w, &mut tokens)
        })
        .collect();
    let cores: Vec<TokenId> = (0..p.n_subjects)
        .map(|_| {
            let w = word_factory(&mut rng, &mut taken, 3);
            push(w, &mut tokens)
        })
        .collect();
    let relation_templates: Vec<Vec<Vec<TokenId>>> = (0..p.n_relations)
        .map(|_| {
            (0..2)
                .map(|_| {
                    (0..2)
                        .map(|_| {
                            let w = word_factory(&mut rng, &mut taken, 2);
                            push(w, &mut tokens)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let objects: Vec<TokenId> = (0..p.n_objects)
        .map(|_| {
            let w = word_factory(&mut rng, &mut taken, 2);
            push(format!("{w}n"), &mut tokens)
        })
        .collect();
    let fillers: Vec<TokenId> = (0..p.n_fillers)
        .map(|_| {
            let w = word_factory(&mut rng, &mut taken, 2);
            push(format!("{w}r"), &mut tokens)
        })
        .collect();
    let kl_template = vec![push("is".into(), &mut tokens), push("a".into(), &mut tokens)];
    let vocabulary = Vocabulary::new(tokens)?;

    let subject_pool: Vec<Vec<TokenId>> = cores
        .iter()
        .map(|&core| {
            if rng.random_range(0..3) == 0 {
                vec![*heads.choose(&mut rng).expect("heads"), core]
            } else {
                vec![core]
            }
        })
        .collect();
    let prefix_pool = distinct_filler_sequences(&mut rng, &fillers, p.n_prefixes, true);

    // Facts: distinct subjects, grouped by a shared (relation, object) pair.
    let mut subject_order: Vec<usize> = (0..p.n_subjects).collect();
    subject_order.shuffle(&mut rng);
    let chosen = &subject_order[..p.n_facts];
    let group_size = p.n_neighborhood + 1;
    let n_groups = p.n_facts / group_size;
    let mut pairs: Vec<(usize, usize)> = (0..p.n_relations)
        .flat_map(|r| (0..p.n_objects).map(move |o| (r, o)))
        .collect();
    pairs.shuffle(&mut rng);
    let group_pair = |g: usize| pairs[g % pairs.len()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for i in 0..p.n_facts {
        members[i % n_groups].push(i);
    }

    // New objects come from the relation's own range when it has one.
    let range_of = |r: usize| -> BTreeSet<TokenId> {
        (0..n_groups)
            .map(group_pair)
            .filter(|&(gr, _)| gr == r)
            .map(|(_, o)| objects[o])
            .collect()
    };
    let mut triplets = Vec::with_capacity(p.n_facts);
    for i in 0..p.n_facts {
        let (r, o) = group_pair(i % n_groups);
        let object = objects[o];
        let mut alternatives: Vec<TokenId> = range_of(r).into_iter().filter(|&x| x != object).collect();
        if alternatives.is_empty() {
            alternatives = objects.iter().copied().filter(|&x| x != object).collect();
        }
        let new_object = *alternatives.choose(&mut rng).expect("n_objects >= 2");
        triplets.push(FactTriplet {
            subject: subject_pool[chosen[i]].clone(),
            relation: r,
            relation_tokens: relation_templates[r][0].clone(),
            object,
            new_object: Some(new_object),
        });
    }

    let mut facts = Vec::with_capacity(p.n_facts);
    for i in 0..p.n_facts {
        let t = triplets[i].clone();
        let rewrite = Prompt::compose(&[], &t.subject, &relation_templates[t.relation][0]);
        let paraphrases = distinct_filler_sequences(&mut rng, &fillers, p.n_paraphrases, false)
            .into_iter()
            .map(|prefix| Prompt::compose(&prefix, &t.subject, &relation_templates[t.relation][1]))
            .collect();
        let others: Vec<usize> = members[i % n_groups]
            .iter()
            .copied()
            .filter(|&j| j != i)
            .collect();
        let neighborhood = others
            .choose_multiple(&mut rng, p.n_neighborhood)
            .map(|&j| {
                Prompt::compose(
                    &[],
                    &triplets[j].subject,
                    &relation_templates[t.relation][0],
                )
            })
            .collect();
        facts.push(Fact {
            triplet: t,
            prompts: PromptSet {
                rewrite,
                paraphrases,
                neighborhood,
            },
        });
    }

    let corpus = FactCorpus {
        seed,
        params,
        vocabulary,
        relation_templates,
        objects,
        fillers,
        kl_template,
        facts,
        subject_pool,
        prefix_pool,
    };
    corpus.validate()?;
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Line-oriented JSON serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    schema_version: u32,
    seed: u64,
    vocabulary: Vec<String>,
    params: CorpusParams,
    n_facts: usize,
    relation_templates: Vec<Vec<Vec<String>>>,
    objects: Vec<String>,
    fillers: Vec<String>,
    kl_template: Vec<String>,
    subject_pool: Vec<Vec<String>>,
    prefix_pool: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct PromptRecord {
    tokens: Vec<String>,
    subject_start: usize,
    subject_end: usize,
}

#[derive(Serialize, Deserialize)]
struct FactRecord {
    index: usize,
    subject: Vec<String>,
    relation: usize,
    relation_tokens: Vec<String>,
    object: String,
    new_object: Option<String>,
    rewrite: PromptRecord,
    paraphrases: Vec<PromptRecord>,
    neighborhood: Vec<PromptRecord>,
}

fn words(v: &Vocabulary, ids: &[TokenId]) -> Vec<String> {
    ids.iter().map(|&i| v.token(i).to_string()).collect()
}

fn prompt_record(v: &Vocabulary, p: &Prompt) -> PromptRecord {
    PromptRecord {
        tokens: words(v, &p.tokens),
        subject_start: p.subject_start,
        subject_end: p.subject_end,
    }
}

/// Serializes a corpus: a header line followed by one line per fact.
pub fn corpus_to_string(c: &FactCorpus) -> Result<String> {
    let v = &c.vocabulary;
    let header = HeaderRecord {
        schema_version: CORPUS_SCHEMA_VERSION,
        seed: c.seed,
        vocabulary: v.tokens().to_vec(),
        params: c.params,
        n_facts: c.facts.len(),
        relation_templates: c
            .relation_templates
            .iter()
            .map(|ts| ts.iter().map(|t| words(v, t)).collect())
            .collect(),
        objects: words(v, &c.objects),
        fillers: words(v, &c.fillers),
        kl_template: words(v, &c.kl_template),
        subject_pool: c.subject_pool.iter().map(|s| words(v, s)).collect(),
        prefix_pool: c.prefix_pool.iter().map(|s| words(v, s)).collect(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for (index, f) in c.facts.iter().enumerate() {
        let t = &f.triplet;
        let rec = FactRecord {
            index,
            subject: words(v, &t.subject),
            relation: t.relation,
            relation_tokens: words(v, &t.relation_tokens),
            object: v.token(t.object).to_string(),
            new_object: t.new_object.map(|o| v.token(o).to_string()),
            rewrite: prompt_record(v, &f.prompts.rewrite),
            paraphrases: f
                .prompts
                .paraphrases
                .iter()
                .map(|p| prompt_record(v, p))
                .collect(),
            neighborhood: f
                .prompts
                .neighborhood
                .iter()
                .map(|p| prompt_record(v, p))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_corpus(c: &FactCorpus, path: &Path) -> Result<()> {
    let text = corpus_to_string(c)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path) -> Result<FactCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    corpus_from_str(&text)
}

fn parse_err(line: usize, field: &str, message: impl ToString) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn field_of(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".to_string())
}

fn decode_record<T: for<'de> Deserialize<'de>>(line_no: usize, line: &str) -> Result<T> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| parse_err(line_no, "<json>", e))?;
    serde_json::from_value(value).map_err(|e| parse_err(line_no, &field_of(&e), e))
}

pub fn corpus_from_str(text: &str) -> Result<FactCorpus> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "header", "empty corpus file"))?;
    let header: HeaderRecord = decode_record(1, first)?;
    if header.schema_version != CORPUS_SCHEMA_VERSION {
        return Err(parse_err(
            1,
            "schema_version",
            format!("unsupported schema version {}", header.schema_version),
        ));
    }
    let vocabulary =
        Vocabulary::new(header.vocabulary).map_err(|e| parse_err(1, "vocabulary", e))?;
    let enc = |line: usize, field: &str, ws: &[String]| {
        vocabulary
            .encode(ws)
            .map_err(|e| parse_err(line, field, e))
    };
    let one = |line: usize, field: &str, w: &str| {
        vocabulary.id(w).map_err(|e| parse_err(line, field, e))
    };
    let relation_templates = header
        .relation_templates
        .iter()
        .map(|ts| ts.iter().map(|t| enc(1, "relation_templates", t)).collect())
        .collect::<Result<Vec<Vec<Vec<TokenId>>>>>()?;
    let objects = enc(1, "objects", &header.objects)?;
    let fillers = enc(1, "fillers", &header.fillers)?;
    let kl_template = enc(1, "kl_template", &header.kl_template)?;
    let subject_pool = header
        .subject_pool
        .iter()
        .map(|s| enc(1, "subject_pool", s))
        .collect::<Result<Vec<_>>>()?;
    let prefix_pool = header
        .prefix_pool
        .iter()
        .map(|s| enc(1, "prefix_pool", s))
        .collect::<Result<Vec<_>>>()?;

    let prompt = |line: usize, field: &str, r: &PromptRecord| -> Result<Prompt> {
        let tokens = enc(line, field, &r.tokens)?;
        if r.subject_start >= r.subject_end || r.subject_end > tokens.len() {
            return Err(parse_err(line, field, "subject span out of range"));
        }
        Ok(Prompt {
            tokens,
            subject_start: r.subject_start,
            subject_end: r.subject_end,
        })
    };

    let mut facts = Vec::with_capacity(header.n_facts);
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: FactRecord = decode_record(line_no, line)?;
        if rec.index != facts.len() {
            return Err(parse_err(line_no, "index", "fact records out of order"));
        }
        let triplet = FactTriplet {
            subject: enc(line_no, "subject", &rec.subject)?,
            relation: rec.relation,
            relation_tokens: enc(line_no, "relation_tokens", &rec.relation_tokens)?,
            object: one(line_no, "object", &rec.object)?,
            new_object: rec
                .new_object
                .as_deref()
                .map(|w| one(line_no, "new_object", w))
                .transpose()?,
        };
        let prompts = PromptSet {
            rewrite: prompt(line_no, "rewrite", &rec.rewrite)?,
            paraphrases: rec
                .paraphrases
                .iter()
                .map(|p| prompt(line_no, "paraphrases", p))
                .collect::<Result<_>>()?,
            neighborhood: rec
                .neighborhood
                .iter()
                .map(|p| prompt(line_no, "neighborhood", p))
                .collect::<Result<_>>()?,
        };
        facts.push(Fact { triplet, prompts });
    }
    if facts.len() != header.n_facts {
        return Err(parse_err(
            text.lines().count().max(1),
            "facts",
            format!(
                "header announces {} facts, found {} (truncated file?)",
                header.n_facts,
                facts.len()
            ),
        ));
    }
    let corpus = FactCorpus {
        seed: header.seed,
        params: header.params,
        vocabulary,
        relation_templates,
        objects,
        fillers,
        kl_template,
        facts,
        subject_pool,
        prefix_pool,
    };
    corpus
        .validate()
        .map_err(|e| parse_err(1, "corpus", e))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> CorpusParams {
        CorpusParams {
            n_subjects: 40,
            n_relations: 3,
            n_objects: 5,
            n_facts: 25,
            n_paraphrases: 2,
            n_neighborhood: 2,
            n_prefixes: 4,
            n_fillers: 10,
        }
    }

    #[test]
    fn deterministic_generation() {
        let a = corpus_to_string(&generate_corpus(7, CorpusParams::default()).unwrap()).unwrap();
        let b = corpus_to_string(&generate_corpus(7, CorpusParams::default()).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = corpus_to_string(&generate_corpus(8, CorpusParams::default()).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn two_objects_force_new_object() {
        let params = CorpusParams {
            n_objects: 2,
            ..small_params()
        };
        let c = generate_corpus(3, params).unwrap();
        for f in &c.facts {
            let other = c
                .objects
                .iter()
                .copied()
                .find(|&o| o != f.triplet.object)
                .unwrap();
            assert_eq!(f.triplet.new_object, Some(other));
        }
    }

    #[test]
    fn distinct_subjects_exhaustive_scan() {
        let params = CorpusParams {
            n_facts: 200,
            n_subjects: 300,
            ..CorpusParams::default()
        };
        let c = generate_corpus(11, params).unwrap();
        let subjects: BTreeSet<&Vec<TokenId>> = c.facts.iter().map(|f| &f.triplet.subject).collect();
        assert_eq!(subjects.len(), 200);
    }

    #[test]
    fn facts_are_a_function_and_neighbors_share_relation_and_object() {
        let c = generate_corpus(5, CorpusParams::default()).unwrap();
        let mut map: HashMap<(Vec<TokenId>, usize), TokenId> = HashMap::new();
        for f in &c.facts {
            let prev = map.insert((f.triplet.subject.clone(), f.triplet.relation), f.triplet.object);
            assert!(prev.is_none() || prev == Some(f.triplet.object));
        }
        for f in &c.facts {
            assert_eq!(f.prompts.neighborhood.len(), 4);
            for nb in &f.prompts.neighborhood {
                assert_ne!(nb.subject(), f.triplet.subject.as_slice());
                let o = map[&(nb.subject().to_vec(), f.triplet.relation)];
                assert_eq!(o, f.triplet.object);
                assert!(nb.tokens.ends_with(&c.relation_templates[f.triplet.relation][0]));
            }
        }
    }

    #[test]
    fn prefix_pool_contains_empty() {
        let c = generate_corpus(1, CorpusParams::default()).unwrap();
        assert_eq!(c.prefix_pool.len(), 8);
        assert!(c.prefix_pool.contains(&Vec::new()));
        assert!(c.vocabulary.len() > 400 && c.vocabulary.len() < 520);
    }

    #[test]
    fn infeasible_parameters() {
        let bad = CorpusParams {
            n_facts: 50,
            n_subjects: 10,
            ..small_params()
        };
        assert!(matches!(generate_corpus(1, bad), Err(Error::Generation(_))));
        let bad = CorpusParams {
            n_objects: 1,
            ..small_params()
        };
        assert!(matches!(generate_corpus(1, bad), Err(Error::Generation(_))));
    }

    #[test]
    fn round_trip_and_truncation() {
        let c = generate_corpus(9, small_params()).unwrap();
        let text = corpus_to_string(&c).unwrap();
        assert_eq!(corpus_from_str(&text).unwrap(), c);

        let cut = &text[..text.len() / 2];
        assert!(matches!(corpus_from_str(cut), Err(Error::Parse { .. })));

        let first_line_only: String = text.lines().next().unwrap().to_string();
        match corpus_from_str(&first_line_only) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "facts"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_token_reports_field() {
        let c = generate_corpus(9, small_params()).unwrap();
        let text = corpus_to_string(&c).unwrap();
        let obj = c.vocabulary.token(c.facts[0].triplet.object).to_string();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[1] = lines[1].replacen(&format!("\"object\":\"{obj}\""), "\"object\":\"zzz\"", 1);
        match corpus_from_str(&lines.join("\n")) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "object");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
