//! LLM judge: prompt construction, chat-completion calls and response parsing.
//!
//! The judge sees one incoming idea and a small dictionary of candidate
//! buckets, and answers with the id of the bucket the idea rephrases or `-1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codebook::BucketId;
use crate::corpus::{IdeaKey, IdeaRecord, ReferenceLabeling};
use crate::error::{Error, Result};
use crate::transport::{EndpointConfig, JsonClient, RetryPolicy};

/// Answer meaning "no candidate matches; found a new bucket".
pub const NEW_BUCKET: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStrategy {
    Vanilla,
    #[serde(alias = "CoT", alias = "COT")]
    Cot,
}

impl std::str::FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Self::Vanilla),
            "cot" => Ok(Self::Cot),
            other => Err(Error::Config(format!("unknown prompt strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bucket_id: BucketId,
    pub description: String,
    /// Idea that founded the bucket. Not shown to the LLM.
    pub founder: IdeaKey,
    pub similarity: f64,
}

/// Candidate buckets offered to the judge, most similar first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateDictionary {
    entries: Vec<Candidate>,
    /// Maximum size (`K_c`); `None` means unbounded.
    capacity: Option<usize>,
}

impl CandidateDictionary {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
        }
    }

    pub fn push(&mut self, candidate: Candidate) -> Result<()> {
        if self.capacity.is_some_and(|c| self.entries.len() >= c) {
            return Err(Error::Integrity("candidate dictionary is full".into()));
        }
        if self.contains(candidate.bucket_id.get() as i64) {
            return Err(Error::Integrity(format!("duplicate candidate {}", candidate.bucket_id)));
        }
        self.entries.push(candidate);
        Ok(())
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn contains(&self, id: i64) -> bool {
        self.entries.iter().any(|c| i64::from(c.bucket_id.get()) == id)
    }

    pub fn ids(&self) -> Vec<BucketId> {
        self.entries.iter().map(|c| c.bucket_id).collect()
    }

    /// Python `repr` of the `{id: 'description'}` dict.
    pub fn render(&self) -> String {
        let mut out = String::from("{");
        for (i, c) in self.entries.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{}: {}", c.bucket_id, python_str_repr(&c.description));
        }
        out.push('}');
        out
    }
}

/// Renders a string the way Python's `repr(str)` does for printable text.
pub fn python_str_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || (0x7f..0xa0).contains(&(c as u32)) => {
                let _ = write!(out, "\\x{:02x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

const SYSTEM_PREAMBLE: &str = "You are an idea bucket annotator for ideas generated for the object {object_name} in Guilford's Alternative Uses Test. You will be given an input_idea to annotate against up to {comparison_k} comparison_ideas, given to you in a dictionary format with key-value pairs of comparison_idea_ID: comparison_idea_description. The keys are integers, and the values are strings. Your goal is to determine if the input_idea is a very obviously rephrased version of one of those comparison_idea_description, or if it is slightly different.

if input_idea is a very obviously rephrased version of a certain comparison_idea_description:
    your_annotation_ID = comparison_idea_ID key of that comparison_idea_description value

elif input_idea is a slightly different one:
    your_annotation_ID = -1

";

const VANILLA_INSTRUCTIONS: &str = "Your response must be a text string containing exactly: <your_annotation_ID>.

For example: if your_annotation_ID is 6 since the input idea is a very obviously rephrased version of comparison_idea_ID 6, your response string should be \"6\".
Another example: if your_annotation_ID is -1 because the input idea is not an obvious rephrasing of any comparison_idea_ID, your response string should be \"-1\".

Absolutely do not provide any extra text.";

const COT_INSTRUCTIONS: &str = "You will also provide a reason string containing a single sentence explaining why you gave the input_idea that specific your_annotation_ID.

Your response must be a text string containing exactly: <your_annotation_ID><SPACE><reason>.

For example: if your_annotation_ID is 6 and the reason is \"The input idea is a very obviously rephrased version of comparison_idea_ID 6\", your response string should be \"6 The input idea is a very obviously rephrased version of comparison_idea_ID 6\".
Another example: if your_annotation_ID is -1 and the reason is \"The input idea is not an obvious rephrasing of any comparison_idea_ID\", your response string should be \"-1 The input idea is not an obvious rephrasing of any comparison_idea_ID\".

Absolutely do not provide any extra text.";

pub fn build_prompt(
    object_name: &str,
    idea: &str,
    candidates: &CandidateDictionary,
    strategy: PromptStrategy,
) -> Prompt {
    let comparison_k = candidates.capacity().unwrap_or(candidates.len());
    let mut system = SYSTEM_PREAMBLE
        .replace("{object_name}", object_name)
        .replace("{comparison_k}", &comparison_k.to_string());
    system.push_str(match strategy {
        PromptStrategy::Vanilla => VANILLA_INSTRUCTIONS,
        PromptStrategy::Cot => COT_INSTRUCTIONS,
    });
    let user = format!("input_idea: {idea}\n\ncomparison_ideas: {}", candidates.render());
    Prompt { system, user }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeDecision {
    /// `-1` or one of the candidate bucket ids.
    pub annotation_id: i64,
    pub reason: Option<String>,
    pub raw_response: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeOutcome {
    Decided(JudgeDecision),
    /// Every attempt produced an unusable answer; the idea founds a new bucket.
    FallbackNewBucket {
        raw_responses: Vec<String>,
    },
}

/// Parses a judge reply: a leading integer, then (for CoT) the reason.
/// Returns a description of the problem for unusable replies.
pub fn parse_response(
    raw: &str,
    strategy: PromptStrategy,
    candidates: &CandidateDictionary,
) -> std::result::Result<JudgeDecision, String> {
    let trimmed = raw.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
    let (token, rest) = match trimmed.find(char::is_whitespace) {
        Some(i) => (&trimmed[..i], trimmed[i..].trim()),
        None => (trimmed, ""),
    };
    let token = token.trim_end_matches(['.', ',', ':', ';']);
    let id: i64 = token
        .parse()
        .map_err(|_| format!("no leading integer in `{}`", raw.trim()))?;
    if id != NEW_BUCKET && !candidates.contains(id) {
        return Err(format!("id {id} is not among the candidates"));
    }
    let reason = match strategy {
        PromptStrategy::Vanilla => None,
        PromptStrategy::Cot => Some(rest.trim_end_matches(['"', '\'']).to_string()),
    };
    Ok(JudgeDecision {
        annotation_id: id,
        reason,
        raw_response: raw.to_string(),
    })
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &Prompt) -> Result<String>;
    fn model_id(&self) -> &str;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatConfig {
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

/// Client for `POST {base_url}/chat/completions`.
pub struct HttpChatClient {
    client: JsonClient,
    temperature: f64,
    max_tokens: Option<u32>,
}

impl HttpChatClient {
    pub fn new(config: ChatConfig, retry: RetryPolicy) -> Result<Self> {
        Ok(Self {
            client: JsonClient::new(config.endpoint, retry)?,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        })
    }
}

fn chat_request<'a>(model: &'a str, prompt: &'a Prompt, temperature: f64, max_tokens: Option<u32>) -> ChatRequest<'a> {
    ChatRequest {
        model,
        messages: [
            ChatMessage {
                role: "system",
                content: &prompt.system,
            },
            ChatMessage {
                role: "user",
                content: &prompt.user,
            },
        ],
        temperature,
        max_tokens,
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &Prompt) -> Result<String> {
        let request = chat_request(self.model_id(), prompt, self.temperature, self.max_tokens);
        let response: ChatResponse = self.client.post("chat/completions", &request)?;
        response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Transport("chat response has no message content".into()))
    }

    fn model_id(&self) -> &str {
        &self.client.endpoint().model
    }
}

/// Sends `prompt` up to `max_attempts` times until the reply parses.
/// Transport errors propagate; unusable replies end in a fallback.
pub fn judge_idea(
    prompt: &Prompt,
    client: &dyn ChatClient,
    strategy: PromptStrategy,
    candidates: &CandidateDictionary,
    max_attempts: u32,
) -> Result<JudgeOutcome> {
    let mut raw_responses = Vec::new();
    for attempt in 1..=max_attempts.max(1) {
        let raw = client.complete(prompt)?;
        match parse_response(&raw, strategy, candidates) {
            Ok(decision) => return Ok(JudgeOutcome::Decided(decision)),
            Err(problem) => {
                log::warn!("unusable judge reply (attempt {attempt}): {problem}");
                raw_responses.push(raw);
            }
        }
    }
    Ok(JudgeOutcome::FallbackNewBucket { raw_responses })
}

pub struct JudgeRequest<'a> {
    pub object_name: &'a str,
    pub idea: &'a IdeaRecord,
    pub candidates: &'a CandidateDictionary,
}

/// A bucketing decision procedure.
pub trait Judge: Send + Sync {
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<JudgeOutcome>;
    /// Identifier recorded in run metadata.
    fn describe(&self) -> String;
}

pub struct LlmJudge<C> {
    client: C,
    strategy: PromptStrategy,
    max_attempts: u32,
}

impl<C: ChatClient> LlmJudge<C> {
    pub fn new(client: C, strategy: PromptStrategy, max_attempts: u32) -> Self {
        Self {
            client,
            strategy,
            max_attempts,
        }
    }
}

impl<C: ChatClient> Judge for LlmJudge<C> {
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<JudgeOutcome> {
        let prompt = build_prompt(
            request.object_name,
            &request.idea.idea_text,
            request.candidates,
            self.strategy,
        );
        judge_idea(
            &prompt,
            &self.client,
            self.strategy,
            request.candidates,
            self.max_attempts,
        )
    }

    fn describe(&self) -> String {
        format!("llm:{}:{:?}", self.client.model_id(), self.strategy).to_lowercase()
    }
}

/// Picks the first candidate whose founding idea carries the same oracle
/// label as `idea`, else `-1`.
pub fn mock_judge(
    idea: &IdeaKey,
    candidates: &CandidateDictionary,
    oracle: &ReferenceLabeling,
) -> Result<JudgeDecision> {
    let label = oracle.get(idea).ok_or_else(|| Error::Coverage {
        message: format!("oracle {} has no label for the idea", oracle.annotator_id),
        keys: vec![idea.to_string()],
    })?;
    let annotation_id = candidates
        .entries()
        .iter()
        .find(|c| oracle.get(&c.founder) == Some(label))
        .map_or(NEW_BUCKET, |c| i64::from(c.bucket_id.get()));
    Ok(JudgeDecision {
        annotation_id,
        reason: None,
        raw_response: annotation_id.to_string(),
    })
}

/// Judge backed by a reference labeling.
pub struct MockJudge {
    oracle: ReferenceLabeling,
}

impl MockJudge {
    pub fn new(oracle: ReferenceLabeling) -> Self {
        Self { oracle }
    }
}

impl Judge for MockJudge {
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<JudgeOutcome> {
        mock_judge(&request.idea.key(), request.candidates, &self.oracle).map(JudgeOutcome::Decided)
    }

    fn describe(&self) -> String {
        format!("mock:{}", self.oracle.annotator_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::sync::Mutex;

    fn key(p: &str, order: u64) -> IdeaKey {
        IdeaKey {
            participant_id: p.into(),
            task_id: "brick".into(),
            source_order: order,
        }
    }

    fn dict(items: &[(u32, &str)], capacity: Option<usize>) -> CandidateDictionary {
        let mut d = CandidateDictionary::new(capacity);
        for (i, (id, desc)) in items.iter().enumerate() {
            d.push(Candidate {
                bucket_id: BucketId::new(*id).unwrap(),
                description: desc.to_string(),
                founder: key(&format!("f{id}"), i as u64),
                similarity: 1.0 - i as f64 * 0.1,
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn cot_prompt_mentions_reason() {
        let d = dict(&[(1, "doorstop"), (2, "paperweight")], Some(10));
        let p = build_prompt("brick", "hold papers", &d, PromptStrategy::Cot);
        assert!(p
            .system
            .contains("Your response must be a text string containing exactly"));
        assert!(p.system.contains("You will also provide a reason string"));
        assert!(p.system.contains("<your_annotation_ID><SPACE><reason>"));
        assert!(p.system.contains("for the object brick in Guilford's"));
        assert!(p.system.contains("up to 10 comparison_ideas"));
        assert_eq!(
            p.user,
            "input_idea: hold papers\n\ncomparison_ideas: {1: 'doorstop', 2: 'paperweight'}"
        );
    }

    #[test]
    fn vanilla_prompt_has_no_reason() {
        let d = dict(&[(3, "x")], Some(10));
        let p = build_prompt("shoe", "y", &d, PromptStrategy::Vanilla);
        assert!(!p.system.contains("reason"));
        assert!(p.system.ends_with("Absolutely do not provide any extra text."));
        assert!(p.system.contains("exactly: <your_annotation_ID>."));
    }

    #[test]
    fn empty_dictionary_renders_braces() {
        let p = build_prompt(
            "brick",
            "a wall",
            &CandidateDictionary::new(Some(10)),
            PromptStrategy::Cot,
        );
        assert!(p.user.ends_with("comparison_ideas: {}"));
    }

    #[test]
    fn prompt_is_pure() {
        let d = dict(&[(1, "it's a \"weapon\""), (7, "stand\\on")], Some(5));
        let a = build_prompt("brick", "z", &d, PromptStrategy::Cot);
        let b = build_prompt("brick", "z", &d.clone(), PromptStrategy::Cot);
        assert_eq!(a, b);
    }

    #[test]
    fn python_repr_quoting() {
        assert_eq!(python_str_repr("abc"), "'abc'");
        assert_eq!(python_str_repr("it's"), "\"it's\"");
        assert_eq!(python_str_repr("say \"hi\""), "'say \"hi\"'");
        assert_eq!(python_str_repr("it's \"x\""), "'it\\'s \"x\"'");
        assert_eq!(python_str_repr("a\\b\nc"), "'a\\\\b\\nc'");
        assert_eq!(python_str_repr("café"), "'café'");
    }

    #[test]
    fn parses_cot_example() {
        let d = dict(&[(6, "x"), (2, "y")], Some(10));
        let raw = "6 The input idea is a very obviously rephrased version of comparison_idea_ID 6";
        let dec = parse_response(raw, PromptStrategy::Cot, &d).unwrap();
        assert_eq!(dec.annotation_id, 6);
        assert_eq!(
            dec.reason.as_deref(),
            Some("The input idea is a very obviously rephrased version of comparison_idea_ID 6")
        );
    }

    #[test]
    fn parses_vanilla_new_bucket() {
        let d = dict(&[(1, "x")], Some(10));
        let dec = parse_response("-1", PromptStrategy::Vanilla, &d).unwrap();
        assert_eq!(dec.annotation_id, -1);
        assert_eq!(dec.reason, None);
        assert_eq!(
            parse_response(" \"2\" ", PromptStrategy::Vanilla, &dict(&[(2, "x")], None))
                .unwrap()
                .annotation_id,
            2
        );
    }

    #[test]
    fn rejects_out_of_set_ids() {
        let d = dict(&[(1, "x")], Some(10));
        assert!(parse_response("5", PromptStrategy::Vanilla, &d).is_err());
        assert!(parse_response("banana", PromptStrategy::Vanilla, &d).is_err());
        assert!(parse_response("", PromptStrategy::Cot, &d).is_err());
    }

    struct Scripted {
        replies: Mutex<Vec<String>>,
        seen: Mutex<Vec<Prompt>>,
    }

    impl ChatClient for Scripted {
        fn complete(&self, prompt: &Prompt) -> Result<String> {
            self.seen.lock().unwrap().push(prompt.clone());
            Ok(self.replies.lock().unwrap().remove(0))
        }
        fn model_id(&self) -> &str {
            "scripted"
        }
    }

    fn scripted(replies: &[&str]) -> Scripted {
        Scripted {
            replies: Mutex::new(replies.iter().map(|s| s.to_string()).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    #[test]
    fn exhausted_retries_fall_back() {
        let d = dict(&[(1, "x")], Some(10));
        let client = scripted(&["banana", "banana", "banana"]);
        let prompt = build_prompt("brick", "y", &d, PromptStrategy::Vanilla);
        let out = judge_idea(&prompt, &client, PromptStrategy::Vanilla, &d, 3).unwrap();
        assert_eq!(
            out,
            JudgeOutcome::FallbackNewBucket {
                raw_responses: vec!["banana".into(); 3]
            }
        );
        let seen = client.seen.lock().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen.iter().all(|p| *p == prompt));
    }

    #[test]
    fn retry_recovers_on_second_reply() {
        let d = dict(&[(4, "x")], Some(10));
        let client = scripted(&["nine", "4 same use"]);
        let prompt = build_prompt("brick", "y", &d, PromptStrategy::Cot);
        match judge_idea(&prompt, &client, PromptStrategy::Cot, &d, 3).unwrap() {
            JudgeOutcome::Decided(dec) => assert_eq!(dec.annotation_id, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn chat_request_shape() {
        let prompt = Prompt {
            system: "s".into(),
            user: "u".into(),
        };
        let body = serde_json::to_value(chat_request("llama3.3", &prompt, 0.0, None)).unwrap();
        assert_eq!(
            body,
            serde_json::json!({
                "model": "llama3.3",
                "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}],
                "temperature": 0.0
            })
        );
        let resp: ChatResponse =
            serde_json::from_str(r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"-1 new"}}]}"#)
                .unwrap();
        assert_eq!(resp.choices[0].message.content.as_deref(), Some("-1 new"));
    }

    fn oracle(pairs: &[(IdeaKey, &str)]) -> ReferenceLabeling {
        ReferenceLabeling::new(
            "oracle",
            pairs
                .iter()
                .map(|(k, l)| (k.clone(), l.to_string()))
                .collect::<HashMap<_, _>>(),
        )
    }

    #[test]
    fn mock_judge_matches_founder_label() {
        let d = dict(&[(1, "a"), (2, "b")], Some(10));
        let idea = key("p9", 99);
        let o = oracle(&[(idea.clone(), "A"), (key("f1", 0), "B"), (key("f2", 1), "A")]);
        assert_eq!(mock_judge(&idea, &d, &o).unwrap().annotation_id, 2);

        let fresh = oracle(&[(idea.clone(), "Z"), (key("f1", 0), "B"), (key("f2", 1), "A")]);
        assert_eq!(mock_judge(&idea, &d, &fresh).unwrap().annotation_id, -1);

        // label A exists elsewhere in the corpus but its bucket was not retrieved
        let d1 = dict(&[(1, "a")], Some(1));
        assert_eq!(mock_judge(&idea, &d1, &o).unwrap().annotation_id, -1);
    }

    #[test]
    fn dictionary_enforces_capacity_and_distinct_ids() {
        let mut d = dict(&[(1, "a")], Some(1));
        let extra = Candidate {
            bucket_id: BucketId::new(2).unwrap(),
            description: "b".into(),
            founder: key("x", 0),
            similarity: 0.0,
        };
        assert!(d.push(extra.clone()).is_err());
        let mut d2 = dict(&[(2, "a")], None);
        assert!(d2.push(extra).is_err());
    }

    #[test]
    fn chat_config_reads_flat_fields() {
        let c: ChatConfig = serde_json::from_str(
            r#"{"base_url":"http://localhost:8000/v1","model":"m","api_key_env":"KEY","temperature":0.5}"#,
        )
        .unwrap();
        assert_eq!(c.endpoint.model, "m");
        assert_eq!(c.endpoint.timeout_secs, 120);
        assert_eq!(c.temperature, 0.5);
        assert_eq!(c.max_tokens, None);
    }
}
