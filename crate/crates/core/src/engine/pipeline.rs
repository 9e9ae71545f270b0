//! Pipeline definitions: the TOML/JSON DSL and an equivalent builder.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::template::{is_identifier, Template};
use super::EngineError;
use crate::corpus::ChunkConfig;
use crate::fsutil::sha256_hex;
use crate::index::{RetrievalMethod, DEFAULT_MMR_LAMBDA};
use crate::llm::{DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};

/// Retriever parameters used when a Retrieve step leaves them unset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverDefaults {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub k: usize,
    pub method: RetrievalMethod,
    pub mmr_lambda: f64,
}

impl Default for RetrieverDefaults {
    fn default() -> Self {
        Self {
            chunk_size: 200,
            chunk_overlap: 0,
            k: 5,
            method: RetrievalMethod::CosineSim,
            mmr_lambda: DEFAULT_MMR_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseSpec {
    pub json_list_key: String,
}

/// One chunk of a hand-picked retrieval result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualChunk {
    pub chunk_id: String,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepDef {
    /// Entry point; its output is the query text unchanged. `text` is the
    /// query used when a run does not supply one.
    Query {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
    },
    Retrieve {
        name: String,
        /// Template for the retrieval query.
        query: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        chunk_size: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        chunk_overlap: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        method: Option<RetrievalMethod>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mmr_lambda: Option<f64>,
        /// Fixed chunk selection; when set, no ranking is performed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        manual: Option<Vec<ManualChunk>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        when: Option<String>,
    },
    Llm {
        name: String,
        prompt: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_tokens: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parse: Option<ParseSpec>,
        /// Fixed output text; when set, the model is not called.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        when: Option<String>,
    },
    Answer {
        name: String,
        template: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output: Option<String>,
    },
    /// Runs `body` once per item of a parsed list, binding the item to `as`.
    Foreach {
        name: String,
        over: String,
        #[serde(rename = "as")]
        item: String,
        body: Vec<StepDef>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Query,
    Retrieve,
    Llm,
    Answer,
    Foreach,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Query => "query",
            Self::Retrieve => "retrieve",
            Self::Llm => "llm",
            Self::Answer => "answer",
            Self::Foreach => "foreach",
        }
    }
}

impl std::fmt::Display for StepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl StepDef {
    pub fn name(&self) -> &str {
        match self {
            Self::Query { name, .. }
            | Self::Retrieve { name, .. }
            | Self::Llm { name, .. }
            | Self::Answer { name, .. }
            | Self::Foreach { name, .. } => name,
        }
    }

    pub fn kind(&self) -> StepKind {
        match self {
            Self::Query { .. } => StepKind::Query,
            Self::Retrieve { .. } => StepKind::Retrieve,
            Self::Llm { .. } => StepKind::Llm,
            Self::Answer { .. } => StepKind::Answer,
            Self::Foreach { .. } => StepKind::Foreach,
        }
    }

    /// Template sources of this step (not of a Foreach body).
    fn templates(&self) -> Vec<(&'static str, &str)> {
        let mut out = Vec::new();
        match self {
            Self::Retrieve { query, when, .. } => {
                out.push(("query", query.as_str()));
                if let Some(w) = when {
                    out.push(("when", w.as_str()));
                }
            }
            Self::Llm { prompt, when, .. } => {
                out.push(("prompt", prompt.as_str()));
                if let Some(w) = when {
                    out.push(("when", w.as_str()));
                }
            }
            Self::Answer { template, .. } => out.push(("template", template.as_str())),
            Self::Query { .. } | Self::Foreach { .. } => {}
        }
        out
    }

    pub fn query(name: &str) -> Self {
        Self::Query {
            name: name.into(),
            text: None,
        }
    }

    pub fn retrieve(name: &str, query: &str) -> Self {
        Self::Retrieve {
            name: name.into(),
            query: query.into(),
            k: None,
            chunk_size: None,
            chunk_overlap: None,
            method: None,
            mmr_lambda: None,
            manual: None,
            when: None,
        }
    }

    pub fn llm(name: &str, prompt: &str) -> Self {
        Self::Llm {
            name: name.into(),
            prompt: prompt.into(),
            max_tokens: None,
            temperature: None,
            model: None,
            parse: None,
            output: None,
            when: None,
        }
    }

    pub fn answer(name: &str, template: &str) -> Self {
        Self::Answer {
            name: name.into(),
            template: template.into(),
            output: None,
        }
    }

    pub fn foreach(name: &str, over: &str, item: &str, body: Vec<StepDef>) -> Self {
        Self::Foreach {
            name: name.into(),
            over: over.into(),
            item: item.into(),
            body,
        }
    }

    /// Sets Retrieve `k`; no-op on other kinds.
    pub fn with_k(mut self, value: usize) -> Self {
        if let Self::Retrieve { k, .. } = &mut self {
            *k = Some(value);
        }
        self
    }

    /// Sets Retrieve chunk config; no-op on other kinds.
    pub fn with_chunking(mut self, size: usize, overlap: usize) -> Self {
        if let Self::Retrieve {
            chunk_size,
            chunk_overlap,
            ..
        } = &mut self
        {
            *chunk_size = Some(size);
            *chunk_overlap = Some(overlap);
        }
        self
    }

    /// Sets Retrieve method; no-op on other kinds.
    pub fn with_method(mut self, m: RetrievalMethod) -> Self {
        if let Self::Retrieve { method, .. } = &mut self {
            *method = Some(m);
        }
        self
    }

    /// Sets the Llm JSON-list parse key; no-op on other kinds.
    pub fn with_json_list(mut self, key: &str) -> Self {
        if let Self::Llm { parse, .. } = &mut self {
            *parse = Some(ParseSpec {
                json_list_key: key.into(),
            });
        }
        self
    }

    /// Sets Llm max_tokens/temperature; no-op on other kinds.
    pub fn with_sampling(mut self, tokens: u32, temp: f64) -> Self {
        if let Self::Llm {
            max_tokens,
            temperature,
            ..
        } = &mut self
        {
            *max_tokens = Some(tokens);
            *temperature = Some(temp);
        }
        self
    }

    /// Sets the `when` condition on Retrieve/Llm; no-op on other kinds.
    pub fn with_when(mut self, cond: &str) -> Self {
        match &mut self {
            Self::Retrieve { when, .. } | Self::Llm { when, .. } => *when = Some(cond.into()),
            _ => {}
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDef {
    pub name: String,
    #[serde(default)]
    pub defaults: RetrieverDefaults,
    pub steps: Vec<StepDef>,
}

pub const BASELINE_ANSWER_PROMPT: &str = "You are an expert at answering questions given relevant context.
Given a question and context, answer the question according to the context.
Question: {question}
Context: {context}
";

impl PipelineDef {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            defaults: RetrieverDefaults::default(),
            steps: Vec::new(),
        }
    }

    pub fn with_defaults(mut self, defaults: RetrieverDefaults) -> Self {
        self.defaults = defaults;
        self
    }

    pub fn step(mut self, step: StepDef) -> Self {
        self.steps.push(step);
        self
    }

    /// Query, embedding retrieval (200 chars, no overlap, k = 5), one
    /// answering LLM call, Answer.
    pub fn baseline() -> Self {
        Self::new("baseline")
            .step(StepDef::query("question"))
            .step(StepDef::retrieve("context", "{question}"))
            .step(
                StepDef::llm("generate", BASELINE_ANSWER_PROMPT)
                    .with_sampling(DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE),
            )
            .step(StepDef::answer("answer", "{generate}"))
    }

    pub fn from_toml(src: &str) -> Result<Self, EngineError> {
        let def: Self =
            toml::from_str(src).map_err(|e| EngineError::InvalidPipeline(e.to_string()))?;
        def.validate()?;
        Ok(def)
    }

    pub fn from_json(src: &str) -> Result<Self, EngineError> {
        let def: Self =
            serde_json::from_str(src).map_err(|e| EngineError::InvalidPipeline(e.to_string()))?;
        def.validate()?;
        Ok(def)
    }

    /// Reads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| EngineError::InvalidPipeline(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&src)
        } else {
            Self::from_toml(&src)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline serializes to TOML")
    }

    /// sha256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("pipeline serializes"))
    }

    /// Finds a step by name, including Foreach bodies. Returns the step and
    /// its enclosing Foreach, if any.
    pub fn find(&self, name: &str) -> Option<(&StepDef, Option<&StepDef>)> {
        for s in &self.steps {
            if s.name() == name {
                return Some((s, None));
            }
            if let StepDef::Foreach { body, .. } = s {
                if let Some(b) = body.iter().find(|b| b.name() == name) {
                    return Some((b, Some(s)));
                }
            }
        }
        None
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let invalid = |m: String| Err(EngineError::InvalidPipeline(m));
        match (self.steps.first(), self.steps.last()) {
            (Some(StepDef::Query { .. }), Some(StepDef::Answer { .. })) => {}
            _ => return invalid("the first step must be a query and the last an answer".into()),
        }
        self.validate_retriever(None, &self.defaults.into())?;

        // Names visible to later steps, with whether they may feed a Foreach.
        let mut scope: HashMap<String, bool> = HashMap::new();
        let mut all_names: HashSet<&str> = HashSet::new();
        for (pos, step) in self.steps.iter().enumerate() {
            check_name(step.name())?;
            if !all_names.insert(step.name()) {
                return invalid(format!("duplicate step name `{}`", step.name()));
            }
            if pos > 0 && step.kind() == StepKind::Query {
                return invalid(format!("`{}`: only the first step may be a query", step.name()));
            }
            if pos + 1 < self.steps.len() && step.kind() == StepKind::Answer {
                return invalid(format!("`{}`: only the last step may be an answer", step.name()));
            }
            match step {
                StepDef::Foreach {
                    name,
                    over,
                    item,
                    body,
                } => {
                    match scope.get(over.as_str()) {
                        Some(true) => {}
                        Some(false) => {
                            return invalid(format!(
                                "foreach `{name}`: `{over}` is not an llm step with a json list parse"
                            ))
                        }
                        None => {
                            return Err(EngineError::Template {
                                step: name.clone(),
                                placeholder: over.clone(),
                            })
                        }
                    }
                    if !is_identifier(item) || scope.contains_key(item.as_str()) {
                        return invalid(format!("foreach `{name}`: bad loop variable `{item}`"));
                    }
                    if body.is_empty() {
                        return invalid(format!("foreach `{name}` has an empty body"));
                    }
                    let mut inner = scope.clone();
                    inner.insert(item.clone(), false);
                    for b in body {
                        check_name(b.name())?;
                        if !all_names.insert(b.name()) || b.name() == item {
                            return invalid(format!("duplicate step name `{}`", b.name()));
                        }
                        if !matches!(b.kind(), StepKind::Retrieve | StepKind::Llm) {
                            return invalid(format!(
                                "foreach `{name}`: body steps must be retrieve or llm, found {} `{}`",
                                b.kind(),
                                b.name()
                            ));
                        }
                        self.validate_step(b, &inner)?;
                        inner.insert(b.name().to_string(), false);
                    }
                    for b in body {
                        scope.insert(b.name().to_string(), false);
                    }
                }
                other => {
                    self.validate_step(other, &scope)?;
                    let list = matches!(other, StepDef::Llm { parse: Some(_), .. });
                    scope.insert(other.name().to_string(), list);
                }
            }
        }
        Ok(())
    }

    fn validate_step(&self, step: &StepDef, scope: &HashMap<String, bool>) -> Result<(), EngineError> {
        for (field, src) in step.templates() {
            let t = Template::parse(src).map_err(|e| {
                EngineError::InvalidPipeline(format!("`{}` {field}: {e}", step.name()))
            })?;
            let unknown = t.placeholders().find(|p| !scope.contains_key(*p)).map(str::to_string);
            if let Some(placeholder) = unknown {
                return Err(EngineError::Template {
                    step: step.name().to_string(),
                    placeholder,
                });
            }
        }
        match step {
            StepDef::Retrieve { .. } => {
                let p = RetrieverPatch::from_step(step);
                self.validate_retriever(Some(step.name()), &p)
            }
            StepDef::Llm {
                name,
                max_tokens,
                temperature,
                parse,
                ..
            } => {
                if *max_tokens == Some(0) || temperature.is_some_and(|t| !(t >= 0.0)) {
                    return Err(EngineError::InvalidPipeline(format!(
                        "`{name}`: max_tokens must be positive and temperature >= 0"
                    )));
                }
                if parse.as_ref().is_some_and(|p| p.json_list_key.is_empty()) {
                    return Err(EngineError::InvalidPipeline(format!(
                        "`{name}`: json_list_key is empty"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn validate_retriever(&self, step: Option<&str>, p: &RetrieverPatch) -> Result<(), EngineError> {
        let r = p.resolve(&self.defaults);
        let ctx = step.map(|s| format!("`{s}`: ")).unwrap_or_else(|| "defaults: ".into());
        ChunkConfig::new(r.chunk_size, r.chunk_overlap)
            .map_err(|e| EngineError::InvalidPipeline(format!("{ctx}{e}")))?;
        if r.k == 0 {
            return Err(EngineError::InvalidPipeline(format!("{ctx}k must be positive")));
        }
        if !(0.0..=1.0).contains(&r.mmr_lambda) {
            return Err(EngineError::InvalidPipeline(format!(
                "{ctx}mmr_lambda must be within [0, 1]"
            )));
        }
        Ok(())
    }
}

fn check_name(name: &str) -> Result<(), EngineError> {
    if !is_identifier(name) {
        return Err(EngineError::InvalidPipeline(format!(
            "step name `{name}` must be letters, digits or `_`"
        )));
    }
    Ok(())
}

/// Optional retriever parameters; unset fields fall back to defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk_overlap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<RetrievalMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmr_lambda: Option<f64>,
}

impl From<RetrieverDefaults> for RetrieverPatch {
    fn from(d: RetrieverDefaults) -> Self {
        Self {
            k: Some(d.k),
            chunk_size: Some(d.chunk_size),
            chunk_overlap: Some(d.chunk_overlap),
            method: Some(d.method),
            mmr_lambda: Some(d.mmr_lambda),
        }
    }
}

impl RetrieverPatch {
    pub(crate) fn from_step(step: &StepDef) -> Self {
        match step {
            StepDef::Retrieve {
                k,
                chunk_size,
                chunk_overlap,
                method,
                mmr_lambda,
                ..
            } => Self {
                k: *k,
                chunk_size: *chunk_size,
                chunk_overlap: *chunk_overlap,
                method: *method,
                mmr_lambda: *mmr_lambda,
            },
            _ => Self::default(),
        }
    }

    /// `other`'s set fields win.
    pub fn merged(self, other: RetrieverPatch) -> Self {
        Self {
            k: other.k.or(self.k),
            chunk_size: other.chunk_size.or(self.chunk_size),
            chunk_overlap: other.chunk_overlap.or(self.chunk_overlap),
            method: other.method.or(self.method),
            mmr_lambda: other.mmr_lambda.or(self.mmr_lambda),
        }
    }

    pub fn resolve(&self, d: &RetrieverDefaults) -> RetrieverDefaults {
        RetrieverDefaults {
            chunk_size: self.chunk_size.unwrap_or(d.chunk_size),
            chunk_overlap: self.chunk_overlap.unwrap_or(d.chunk_overlap),
            k: self.k.unwrap_or(d.k),
            method: self.method.unwrap_or(d.method),
            mmr_lambda: self.mmr_lambda.unwrap_or(d.mmr_lambda),
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}
