//! Oracle-backed relabeling of the purified subset.
//!
//! A prompt is built from a task description, a handful of demonstrations
//! drawn from the clean subset (nearest neighbors by cosine similarity),
//! and the sample under query. The oracle answers several times; the modal
//! answer wins, ties breaking to the smallest class index. Answers are
//! cached per sample id so a sample that stays in the purified subset
//! across epochs costs exactly one vote session.
//!
//! Two oracle backends ship here: a simulated one that returns the true
//! label with a configured accuracy (for experiments on synthetic data),
//! and a remote one speaking JSON over HTTP to a text-completion service.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{cosine_similarity, DataError, LabeledDataset, Sample};
use crate::seeds;

#[derive(Debug, thiserror::Error)]
pub enum AnnotatorError {
    #[error("simulated oracle requires a true label on the query")]
    MissingTruth,
    #[error("oracle accuracy {0} outside [0, 1]")]
    BadAccuracy(f64),
    #[error("voting needs at least one run, got {0}")]
    BadRuns(usize),
    #[error("query offers {0} candidate classes, need at least 2")]
    TooFewClasses(usize),
    #[error("every vote was invalid or discarded")]
    NoValidVotes,
    #[error("oracle transport: {0}")]
    Transport(String),
    #[error("oracle response: {0}")]
    BadResponse(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Everything an oracle needs for one answer: the rendered prompt, the
/// candidate class names, a seed making the call reproducible, and the true
/// label when a simulated oracle is standing in for a real one.
#[derive(Debug, Clone)]
pub struct OracleQuery {
    pub prompt: String,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub true_label: Option<usize>,
}

/// A label source. `answer` yields one class index; `generate` yields up to
/// `n` votes, by default by re-asking with derived per-vote seeds.
pub trait Oracle {
    fn answer(&self, query: &OracleQuery) -> Result<usize, AnnotatorError>;

    fn generate(&self, query: &OracleQuery, n: usize) -> Result<Vec<usize>, AnnotatorError> {
        let mut votes = Vec::with_capacity(n);
        for v in 0..n {
            let q = OracleQuery {
                seed: seeds::mix_n(query.seed, "vote", v as u64),
                ..query.clone()
            };
            votes.push(self.answer(&q)?);
        }
        Ok(votes)
    }
}

/// Returns the query's true label with probability `accuracy`, otherwise a
/// uniformly random other class. Deterministic in (oracle seed, query seed).
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    accuracy: f64,
    seed: u64,
}

impl SimulatedOracle {
    pub fn new(accuracy: f64, seed: u64) -> Result<Self, AnnotatorError> {
        if !(accuracy.is_finite() && (0.0..=1.0).contains(&accuracy)) {
            return Err(AnnotatorError::BadAccuracy(accuracy));
        }
        Ok(Self { accuracy, seed })
    }
}

impl Oracle for SimulatedOracle {
    fn answer(&self, query: &OracleQuery) -> Result<usize, AnnotatorError> {
        let truth = query.true_label.ok_or(AnnotatorError::MissingTruth)?;
        let k = query.class_names.len();
        if k < 2 {
            return Err(AnnotatorError::TooFewClasses(k));
        }
        let mut rng = seeds::rng_n(self.seed, "simulated-answer", query.seed);
        if rng.random::<f64>() < self.accuracy {
            Ok(truth)
        } else {
            let offset = rng.random_range(0..k - 1);
            Ok((truth + 1 + offset) % k)
        }
    }
}

/// Minimal HTTP layer behind the remote oracle, mockable in tests.
pub trait Transport {
    fn post_json(
        &self,
        url: &str,
        token: Option<&str>,
        body: &Value,
    ) -> Result<Value, AnnotatorError>;
}

/// Plain-HTTP transport. The endpoint must be reachable without TLS.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        token: Option<&str>,
        body: &Value,
    ) -> Result<Value, AnnotatorError> {
        let mut req = ureq::post(url);
        if let Some(token) = token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| AnnotatorError::Transport(e.to_string()))?;
        resp.body_mut()
            .read_json()
            .map_err(|e| AnnotatorError::BadResponse(e.to_string()))
    }
}

/// Sampling temperature sent with every remote completion request.
pub const REMOTE_TEMPERATURE: f64 = 0.5;

/// Asks a completion endpoint for `n` answers in one request and keeps those
/// that name a candidate class (matched case-insensitively after trimming).
pub struct RemoteOracle<T: Transport = HttpTransport> {
    endpoint: String,
    token: Option<String>,
    transport: T,
}

impl RemoteOracle<HttpTransport> {
    /// Reads `ORACLE_ENDPOINT` (required) and `ORACLE_TOKEN` (optional).
    pub fn from_env() -> Result<Self, AnnotatorError> {
        let endpoint = std::env::var("ORACLE_ENDPOINT")
            .map_err(|_| AnnotatorError::MissingEnv("ORACLE_ENDPOINT"))?;
        Ok(Self {
            endpoint,
            token: std::env::var("ORACLE_TOKEN").ok(),
            transport: HttpTransport,
        })
    }
}

impl<T: Transport> RemoteOracle<T> {
    pub fn with_transport(endpoint: String, token: Option<String>, transport: T) -> Self {
        Self {
            endpoint,
            token,
            transport,
        }
    }

    fn request(&self, query: &OracleQuery, n: usize) -> Result<Vec<usize>, AnnotatorError> {
        let body = json!({
            "prompt": query.prompt,
            "classes": query.class_names,
            "n": n,
            "temperature": REMOTE_TEMPERATURE,
        });
        let resp = self
            .transport
            .post_json(&self.endpoint, self.token.as_deref(), &body)?;
        let answers = resp
            .get("answers")
            .and_then(Value::as_array)
            .ok_or_else(|| AnnotatorError::BadResponse("missing \"answers\" array".into()))?;
        let mut votes = Vec::new();
        for answer in answers {
            let Some(text) = answer.as_str() else {
                continue;
            };
            let norm = text.trim().to_lowercase();
            if let Some(idx) = query
                .class_names
                .iter()
                .position(|name| name.trim().to_lowercase() == norm)
            {
                votes.push(idx);
            }
        }
        Ok(votes)
    }
}

impl<T: Transport> Oracle for RemoteOracle<T> {
    fn answer(&self, query: &OracleQuery) -> Result<usize, AnnotatorError> {
        self.request(query, 1)?
            .into_iter()
            .next()
            .ok_or(AnnotatorError::NoValidVotes)
    }

    fn generate(&self, query: &OracleQuery, n: usize) -> Result<Vec<usize>, AnnotatorError> {
        self.request(query, n)
    }
}

#[derive(Debug, Clone)]
pub struct Demonstration {
    pub text: String,
    pub answer: String,
}

#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub task_description: String,
    pub class_names: Vec<String>,
    pub demonstrations: Vec<Demonstration>,
    pub input_text: String,
    pub chain_of_thought: bool,
}

/// Renders the prompt: the task description, one block per demonstration,
/// and the input block. Without chain-of-thought the prompt ends on an
/// `Answer:` cue; with it, the cue becomes a step-by-step invitation.
pub fn build_prompt(spec: &PromptSpec) -> String {
    let labels = spec.class_names.join(", ");
    let mut out = String::from(&spec.task_description);
    for d in &spec.demonstrations {
        out.push_str(&format!(
            "\n\nText: {}\nCandidate labels: {labels}\nAnswer: {}",
            d.text, d.answer
        ));
    }
    out.push_str(&format!(
        "\n\nText: {}\nCandidate labels: {labels}\n",
        spec.input_text
    ));
    if spec.chain_of_thought {
        out.push_str("Let's think step-by-step.");
    } else {
        out.push_str("Answer:");
    }
    out
}

/// Top-`k` pool samples by cosine similarity to `features`, most similar
/// first, ties breaking to the smaller sample id.
pub fn select_demonstrations<'a>(
    features: &[f64],
    pool: &[&'a Sample],
    k: usize,
) -> Vec<&'a Sample> {
    let mut scored: Vec<(f64, &Sample)> = pool
        .iter()
        .map(|s| (cosine_similarity(features, &s.features), *s))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.id.cmp(&b.1.id)));
    scored.into_iter().take(k).map(|(_, s)| s).collect()
}

/// The result of one majority vote.
#[derive(Debug, Clone, Serialize)]
pub struct VoteOutcome {
    pub winner: usize,
    /// Votes per class index.
    pub tally: Vec<usize>,
    pub valid: usize,
    pub discarded: usize,
}

/// Collects `runs` votes and returns the modal class, ties breaking to the
/// smallest index. Votes outside the class range are discarded.
pub fn query_with_voting(
    oracle: &dyn Oracle,
    query: &OracleQuery,
    runs: usize,
) -> Result<VoteOutcome, AnnotatorError> {
    if runs == 0 {
        return Err(AnnotatorError::BadRuns(runs));
    }
    let k = query.class_names.len();
    if k < 2 {
        return Err(AnnotatorError::TooFewClasses(k));
    }
    let votes = oracle.generate(query, runs)?;
    let mut tally = vec![0usize; k];
    for v in votes {
        if v < k {
            tally[v] += 1;
        }
    }
    let valid: usize = tally.iter().sum();
    if valid == 0 {
        return Err(AnnotatorError::NoValidVotes);
    }
    let winner = tally
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(idx, _)| idx)
        .expect("non-empty tally");
    Ok(VoteOutcome {
        winner,
        tally,
        valid,
        discarded: runs.saturating_sub(valid),
    })
}

/// One applied correction. `tally` is empty when the answer came from the
/// cache.
#[derive(Debug, Clone, Serialize)]
pub struct CorrectionRecord {
    pub id: usize,
    pub old_label: usize,
    pub new_label: usize,
    pub tally: Vec<usize>,
    pub cached: bool,
}

/// Drives relabeling across epochs, holding the answer cache and the call
/// counter (one call = one vote session sent to the oracle).
pub struct AnnotationSession<'a> {
    oracle: &'a dyn Oracle,
    cache: BTreeMap<usize, usize>,
    calls: usize,
    k_demo: usize,
    runs: usize,
    task_description: String,
    chain_of_thought: bool,
}

fn render_input(sample: &Sample) -> String {
    match &sample.text {
        Some(t) => t.clone(),
        None => {
            let parts: Vec<String> = sample.features.iter().map(|v| format!("{v:.4}")).collect();
            format!("features: [{}]", parts.join(", "))
        }
    }
}

impl<'a> AnnotationSession<'a> {
    pub fn new(
        oracle: &'a dyn Oracle,
        k_demo: usize,
        runs: usize,
        task_description: String,
        chain_of_thought: bool,
    ) -> Result<Self, AnnotatorError> {
        if runs == 0 {
            return Err(AnnotatorError::BadRuns(runs));
        }
        Ok(Self {
            oracle,
            cache: BTreeMap::new(),
            calls: 0,
            k_demo,
            runs,
            task_description,
            chain_of_thought,
        })
    }

    /// Vote sessions actually sent (cache hits excluded).
    pub fn oracle_calls(&self) -> usize {
        self.calls
    }

    /// Relabels every purified sample with the (possibly cached) voted
    /// answer. Demonstrations come from the clean subset only, under its
    /// labels at entry. Queries derive their seeds from `seed` and the
    /// sample id, so revisiting a sample is reproducible.
    pub fn correct_purified(
        &mut self,
        ds: &mut LabeledDataset,
        purified: &BTreeSet<usize>,
        clean: &BTreeSet<usize>,
        seed: u64,
    ) -> Result<Vec<CorrectionRecord>, AnnotatorError> {
        let pool: Vec<&Sample> = clean
            .iter()
            .filter_map(|&id| ds.position_of(id).map(|pos| &ds.samples()[pos]))
            .collect();
        let class_names = ds.class_names().to_vec();

        let mut records = Vec::new();
        for &id in purified {
            let pos = ds
                .position_of(id)
                .ok_or_else(|| DataError::BadSample {
                    id,
                    msg: "purified id not in dataset".into(),
                })?;
            let sample = &ds.samples()[pos];
            let old_label = sample.label;
            let (new_label, tally, cached) = match self.cache.get(&id) {
                Some(&hit) => (hit, Vec::new(), true),
                None => {
                    let demos = select_demonstrations(&sample.features, &pool, self.k_demo)
                        .into_iter()
                        .map(|d| Demonstration {
                            text: render_input(d),
                            answer: class_names[d.label].clone(),
                        })
                        .collect();
                    let prompt = build_prompt(&PromptSpec {
                        task_description: self.task_description.clone(),
                        class_names: class_names.clone(),
                        demonstrations: demos,
                        input_text: render_input(sample),
                        chain_of_thought: self.chain_of_thought,
                    });
                    let query = OracleQuery {
                        prompt,
                        class_names: class_names.clone(),
                        seed: seeds::mix_n(seed, "oracle-sample", id as u64),
                        true_label: sample.true_label,
                    };
                    let outcome = query_with_voting(self.oracle, &query, self.runs)?;
                    self.calls += 1;
                    self.cache.insert(id, outcome.winner);
                    (outcome.winner, outcome.tally, false)
                }
            };
            records.push(CorrectionRecord {
                id,
                old_label,
                new_label,
                tally,
                cached,
            });
        }
        for r in &records {
            let pos = ds.position_of(r.id).expect("checked above");
            ds.set_label(pos, r.new_label)?;
        }
        Ok(records)
    }
}
