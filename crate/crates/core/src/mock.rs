//! Deterministic offline stand-in for every HTTP dependency of a run.
//!
//! [`respond`] is a pure function from request path and body to a reply; it
//! recognizes the shard-teacher, annotator and distress-teacher prompts and
//! answers anything else as the support agent. `/v1/hidden_states` returns
//! pseudo-random vectors whose class signal follows the same keyword rule the
//! mock distress teacher uses, strongest at the middle layers.

use std::collections::VecDeque;
use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::gateway::ChatMessage;
use crate::probe::{ExtractionRequest, LayerSelection, DISTRESS_TEMPLATE};
use crate::shard::SHARD_PROMPT;
use crate::ssbc::{SsbcLabel, ANNOTATION_TEMPLATE};
use crate::store::hash_parts;

pub const MOCK_HIDDEN_DIM: usize = 16;
pub const MOCK_LAYERS: u16 = 8;

const STRONG: &[&str] = &[
    "hopeless", "panic", "can't cope", "overwhelmed", "terrified", "worthless", "crying", "breaking down",
];
const MILD: &[&str] = &["worried", "stressed", "sad", "tired", "frustrated", "anxious", "upset", "nervous"];

/// 0, 1 or 2 by keyword presence; shared by the mock teacher and the mock
/// hidden states so probes have something to learn.
pub fn mock_distress(text: &str) -> usize {
    let t = text.to_lowercase();
    if STRONG.iter().any(|k| t.contains(k)) {
        2
    } else if MILD.iter().any(|k| t.contains(k)) {
        1
    } else {
        0
    }
}

fn phrase(label: SsbcLabel) -> &'static str {
    use SsbcLabel::*;
    match label {
        Sympathy => "I'm so sorry you are going through this.",
        Empathy => "I can imagine how heavy this must feel.",
        Encouragement => "You have got this, one step at a time.",
        Advice => "You could try making a short list of next steps.",
        Referral => "A counselor or a trusted doctor could help with this.",
        SituationalAppraisal => "Another way to look at it is that this may be temporary.",
        Teaching => "Research shows that steady routines help people recover.",
        Compliment => "You are clearly thoughtful and resilient.",
        Validation => "Your feelings make complete sense.",
        ReliefOfBlame => "This is not your fault.",
        Companions => "Many people have been through something similar.",
        Presence => "I am here with you.",
    }
}

fn h64(parts: &[&[u8]]) -> u64 {
    let hex = hash_parts(parts.iter().copied());
    u64::from_str_radix(&hex[..16], 16).expect("hex digest")
}

fn completion(content: &str) -> (u16, String) {
    let body = json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    });
    (200, body.to_string())
}

fn error(status: u16, message: &str) -> (u16, String) {
    (status, json!({ "error": message }).to_string())
}

fn segment(body: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = body.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        let next_ws = chars.get(i + 1).is_none_or(|(_, n)| n.is_whitespace());
        if matches!(c, '.' | '!' | '?') && next_ws {
            let end = pos + c.len_utf8();
            sentences.push(body[start..end].trim().to_string());
            start = end;
        }
    }
    if !body[start..].trim().is_empty() {
        sentences.push(body[start..].trim().to_string());
    }
    let mut shards: Vec<String> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for s in sentences.into_iter().filter(|s| !s.is_empty()) {
        let lower = s.to_lowercase();
        if lower.starts_with("edit:") || lower.starts_with("update:") {
            break;
        }
        if lower.contains("has anyone") || lower.contains("do any of you") {
            continue;
        }
        current.push(s);
        let words: usize = current.iter().map(|c| c.split_whitespace().count()).sum();
        if words >= 8 {
            shards.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        let tail = current.join(" ");
        match shards.last_mut() {
            Some(last) if tail.split_whitespace().count() < 3 => {
                last.push(' ');
                last.push_str(&tail);
            }
            _ => shards.push(tail),
        }
    }
    shards
}

fn agent_reply(messages: &[ChatMessage]) -> String {
    use SsbcLabel::*;
    let users: Vec<&str> = messages
        .iter()
        .filter(|m| m.role == crate::gateway::Role::User)
        .map(|m| m.content.as_str())
        .collect();
    let turn = users.len().saturating_sub(1);
    let level = mock_distress(&users.join("\n"));
    let mut pool: Vec<SsbcLabel> = match level {
        2 => vec![Sympathy, Empathy, Validation, Presence, Referral, ReliefOfBlame],
        1 => vec![Empathy, Validation, Encouragement, Advice, Companions],
        _ => vec![Advice, Teaching, SituationalAppraisal, Advice, Encouragement],
    };
    if turn >= 3 {
        pool.push(Compliment);
        pool.push(Compliment);
    }
    let last = users.last().copied().unwrap_or_default();
    let seed = h64(&[b"agent", last.as_bytes(), &(turn as u64).to_le_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1 + (seed % 3) as usize;
    let mut chosen: Vec<SsbcLabel> = Vec::new();
    for _ in 0..8 {
        if chosen.len() == n {
            break;
        }
        let pick = pool[rand::Rng::random_range(&mut rng, 0..pool.len())];
        if !chosen.contains(&pick) {
            chosen.push(pick);
        }
    }
    chosen.sort();
    let mut out = format!("Thank you for sharing that (turn {}).", turn + 1);
    for l in chosen {
        out.push(' ');
        out.push_str(phrase(l));
    }
    out
}

fn annotate(message: &str, temperature: f64) -> String {
    let mut labels: Vec<SsbcLabel> = SsbcLabel::ALL.iter().copied().filter(|&l| message.contains(phrase(l))).collect();
    if temperature > 0.0 {
        let h = h64(&[b"annotate", message.as_bytes(), &temperature.to_bits().to_le_bytes()]);
        if h % 100 < 15 && !labels.is_empty() {
            labels.pop();
        } else if (h / 100) % 100 < 10 && labels.len() < 3 {
            let extra = SsbcLabel::ALL[((h / 10_000) % 12) as usize];
            if !labels.contains(&extra) {
                labels.push(extra);
            }
        }
    }
    let names: Vec<String> = labels.iter().map(|l| format!("\"{}\"", l.name())).collect();
    format!(
        "I went through every category of the codebook.\n\nFinal answer: [{}]",
        names.join(", ")
    )
}

fn distress_judgement(prompt: &str) -> String {
    let post = prompt.split("Post: ").nth(1).unwrap_or_default();
    let users: Vec<&str> = post.split("\n\n").filter(|p| p.starts_with("User: ")).collect();
    let level = ["None", "Mild", "Moderate+"][mock_distress(&users.join("\n"))];
    format!(
        "Severity reasoning: keyword review.\nConfidence reasoning: explicit wording.\n\nFinal answer: {{\"severity\": \"{level}\", \"confidence\": \"High\"}}"
    )
}

fn chat(body: &Value) -> (u16, String) {
    let Ok(messages) = serde_json::from_value::<Vec<ChatMessage>>(body["messages"].clone()) else {
        return error(400, "messages missing or malformed");
    };
    let Some(last) = messages.last() else {
        return error(400, "empty messages");
    };
    let temperature = body["temperature"].as_f64().unwrap_or(0.0);
    let content = &last.content;
    if let Some(post) = content.strip_prefix(SHARD_PROMPT) {
        let shards = segment(post.trim_start());
        return completion(&serde_json::to_string(&shards).expect("strings serialize"));
    }
    if content.starts_with(&ANNOTATION_TEMPLATE[..80]) {
        let message = content.split("## Message to annotate\n\n").nth(1).unwrap_or_default();
        return completion(&annotate(message, temperature));
    }
    if content.starts_with(&DISTRESS_TEMPLATE[..80]) {
        return completion(&distress_judgement(content));
    }
    completion(&agent_reply(&messages))
}

fn hidden_states(body: &Value) -> (u16, String) {
    let Ok(req) = serde_json::from_value::<ExtractionRequest>(body.clone()) else {
        return error(400, "malformed extraction request");
    };
    let layers: Vec<u16> = match &req.layers {
        LayerSelection::All(_) => (0..MOCK_LAYERS).collect(),
        LayerSelection::Indices(v) => v.clone(),
    };
    if let Some(bad) = layers.iter().find(|&&l| l >= MOCK_LAYERS) {
        return error(400, &format!("layer {bad} out of range (model has {MOCK_LAYERS})"));
    }
    let users: Vec<&str> = req
        .messages
        .iter()
        .filter(|m| m.role == crate::gateway::Role::User)
        .map(|m| m.content.as_str())
        .collect();
    let class = mock_distress(&users.join("\n"));
    let context = serde_json::to_string(&req.messages).expect("messages serialize");
    let out: Vec<Value> = layers
        .iter()
        .map(|&layer| {
            let seed = h64(&[b"hs", req.model_id.as_bytes(), context.as_bytes(), &layer.to_le_bytes()]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mid = f64::from(MOCK_LAYERS) / 2.0;
            let amp = 0.3 + 3.0 * (-(f64::from(layer) - mid).powi(2) / 4.0).exp();
            let vector: Vec<f32> = (0..MOCK_HIDDEN_DIM)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let signal = if j / 3 == class { amp } else { 0.0 };
                    (noise + signal) as f32
                })
                .collect();
            json!({ "index": layer, "vector": vector })
        })
        .collect();
    (200, json!({ "hidden_dim": MOCK_HIDDEN_DIM, "layers": out }).to_string())
}

/// Reply for one request.
pub fn respond(path: &str, body: &str) -> (u16, String) {
    let Ok(value) = serde_json::from_str::<Value>(body) else {
        return error(400, "body is not JSON");
    };
    let path = path.split('?').next().unwrap_or(path);
    if path.ends_with("/chat/completions") {
        chat(&value)
    } else if path.ends_with("/hidden_states") {
        hidden_states(&value)
    } else {
        error(404, "unknown route")
    }
}

#[derive(Default)]
struct MockState {
    requests: AtomicU64,
    script: Mutex<VecDeque<u16>>,
}

/// [`respond`] served over HTTP on a background thread.
pub struct MockServer {
    server: Arc<tiny_http::Server>,
    state: Arc<MockState>,
    port: u16,
    worker: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Bind an ephemeral port on 127.0.0.1.
    pub fn start() -> io::Result<Self> {
        Self::bind("127.0.0.1:0")
    }

    pub fn bind(addr: &str) -> io::Result<Self> {
        let server = Arc::new(tiny_http::Server::http(addr).map_err(io::Error::other)?);
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| io::Error::other("not an IP listener"))?;
        let state = Arc::new(MockState::default());
        let worker = {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            std::thread::spawn(move || serve(&server, &state))
        };
        Ok(MockServer {
            server,
            state,
            port,
            worker: Some(worker),
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// Base URL, e.g. `http://127.0.0.1:PORT/v1`.
    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}/v1", self.port)
    }

    /// Requests received so far, scripted failures included.
    pub fn requests(&self) -> u64 {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// Answer the next requests with these statuses before resuming normal replies.
    pub fn script_failures(&self, statuses: impl IntoIterator<Item = u16>) {
        self.state.script.lock().unwrap().extend(statuses);
    }

    /// Block the calling thread until the process exits.
    pub fn wait(mut self) {
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn serve(server: &tiny_http::Server, state: &MockState) {
    while let Ok(mut request) = server.recv() {
        state.requests.fetch_add(1, Ordering::SeqCst);
        let mut body = String::new();
        let (status, reply) = if request.as_reader().read_to_string(&mut body).is_err() {
            error(400, "unreadable body")
        } else if let Some(s) = state.script.lock().unwrap().pop_front() {
            error(s, "scripted failure")
        } else {
            respond(request.url(), &body)
        };
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
        let response = tiny_http::Response::from_string(reply)
            .with_status_code(status)
            .with_header(header);
        let _ = request.respond(response);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Post;
    use crate::shard::{build_shard_prompt, parse_shard_response, validate_shards, ArtifactPatterns};
    use crate::ssbc::{build_annotation_prompt, parse_annotation_response};

    fn content(reply: (u16, String)) -> String {
        assert_eq!(reply.0, 200, "{}", reply.1);
        crate::gateway::parse_chat_content(&reply.1).unwrap()
    }

    fn ask(prompt: &str, temperature: f64) -> String {
        let body = json!({"model": "m", "messages": [{"role": "user", "content": prompt}], "temperature": temperature});
        content(respond("/v1/chat/completions", &body.to_string()))
    }

    #[test]
    fn teacher_segments_verbatim() {
        let post = Post {
            post_id: "p".into(),
            community: "r/x".into(),
            title: "t".into(),
            body: "I moved to a new city last month for work.\nI feel sad and alone most evenings here. Has anyone done this? I tried joining a club but it did not help much. Edit: thanks all".into(),
            human_distress: None,
        };
        let reply = ask(&build_shard_prompt(&post).unwrap(), 0.0);
        let candidates = parse_shard_response(&reply).unwrap();
        let report = validate_shards(&post, &candidates, &ArtifactPatterns::default());
        assert!(report.rejected.is_empty(), "{report:?}");
        assert_eq!(report.accepted.len(), candidates.len());
        assert!(candidates.iter().all(|c| !c.contains("Has anyone") && !c.contains("Edit")));
    }

    #[test]
    fn annotator_reads_agent_phrases() {
        let msg = format!("Hi. {} {}", phrase(SsbcLabel::Advice), phrase(SsbcLabel::Presence));
        let reply = ask(&build_annotation_prompt("u", &msg).unwrap(), 0.0);
        let labels = parse_annotation_response(&reply).unwrap();
        assert_eq!(labels.iter().collect::<Vec<_>>(), vec![SsbcLabel::Advice, SsbcLabel::Presence]);
    }

    #[test]
    fn hidden_states_are_deterministic_and_checked() {
        let body = json!({"model_id": "m", "messages": [{"role": "user", "content": "I feel hopeless"}], "layers": "all"});
        let a = respond("/v1/hidden_states", &body.to_string());
        assert_eq!(a, respond("/v1/hidden_states", &body.to_string()));
        let v: Value = serde_json::from_str(&a.1).unwrap();
        assert_eq!(v["layers"].as_array().unwrap().len(), MOCK_LAYERS as usize);
        let bad = json!({"model_id": "m", "messages": [], "layers": [99]});
        assert_eq!(respond("/v1/hidden_states", &bad.to_string()).0, 400);
    }

    #[test]
    fn keyword_levels() {
        assert_eq!(mock_distress("all good"), 0);
        assert_eq!(mock_distress("a bit Stressed"), 1);
        assert_eq!(mock_distress("stressed and hopeless"), 2);
    }
}
