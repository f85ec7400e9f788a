//! Test support: canonical example questions and a local completions-style
//! stub server for exercising the remote client without a network.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use mcqa::backend::mocks::mock_tokenize;
use mcqa::{Dataset, PassageKind, Question, Split};

pub fn greenhouse_question() -> Question {
    Question {
        id: "obqa-greenhouse".into(),
        passage: None,
        passage_kind: PassageKind::None,
        stem: "Greenhouses are great for plants like".into(),
        options: vec![
            "Pizza".into(),
            "Lollipops".into(),
            "Candles".into(),
            "French beans".into(),
        ],
        gold_index: 3,
    }
}

pub fn storycloze_question() -> Question {
    Question {
        id: "sc-telescope".into(),
        passage: Some(
            "Jon loved the night sky. He would spend many of his nights looking at the stars. \
             His mom saw that he loved the night sky. His mom bought him a telescope."
                .into(),
        ),
        passage_kind: PassageKind::Story,
        stem: "Which sentence best completes the story?".into(),
        options: vec![
            "Jon then watched germs with his microscope.".into(),
            "Jon used his telescope often.".into(),
        ],
        gold_index: 1,
    }
}

/// N-option synthetic dataset with distinct stems and option texts.
pub fn synthetic_dataset(name: &str, questions: usize, options: usize, pool: usize) -> Dataset {
    let make = |prefix: &str, i: usize| Question {
        id: format!("{prefix}{i:04}"),
        passage: None,
        passage_kind: PassageKind::None,
        stem: format!("synthetic {name} stem {prefix}{i}"),
        options: (0..options)
            .map(|o| format!("candidate {o} for {prefix}{i}"))
            .collect(),
        gold_index: i % options,
    };
    Dataset::new(
        name,
        Split::Test,
        (0..questions).map(|i| make("q", i)).collect(),
        (0..pool).map(|i| make("p", i)).collect(),
    )
    .unwrap()
}

/// Behavior knobs for the stub completions server.
#[derive(Clone)]
pub struct StubBehavior {
    /// Respond 500 to this many requests before behaving.
    pub fail_first: u64,
    /// Artificial processing delay per request.
    pub delay: Duration,
    /// Always answer with this status and an error body.
    pub force_status: Option<u16>,
}

impl Default for StubBehavior {
    fn default() -> Self {
        StubBehavior {
            fail_first: 0,
            delay: Duration::ZERO,
            force_status: None,
        }
    }
}

/// Minimal HTTP/1.1 server speaking the completions wire contract. Echo
/// requests score every prompt token at -0.5 (first token null, as real
/// endpoints report); sampling requests answer with a first-symbol-biased
/// top-k over " A".." E".
pub struct StubServer {
    addr: std::net::SocketAddr,
    hits: Arc<AtomicU64>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(behavior: StubBehavior) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicU64::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));
        let handle = {
            let hits = Arc::clone(&hits);
            let shutdown = Arc::clone(&shutdown);
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let count = hits.fetch_add(1, Ordering::SeqCst) + 1;
                    let behavior = behavior.clone();
                    std::thread::spawn(move || handle_connection(stream, behavior, count));
                }
            })
        };
        StubServer {
            addr,
            hits,
            shutdown,
            handle: Some(handle),
        }
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}/v1/completions", self.addr)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(stream: TcpStream, behavior: StubBehavior, request_number: u64) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let mut reader = BufReader::new(stream);

    let mut content_length = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).is_err() || line.trim_end().is_empty() {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(value) = lower.strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let mut stream = reader.into_inner();

    if !behavior.delay.is_zero() {
        std::thread::sleep(behavior.delay);
    }
    if let Some(status) = behavior.force_status {
        respond(&mut stream, status, r#"{"error": "forced status"}"#);
        return;
    }
    if request_number <= behavior.fail_first {
        respond(&mut stream, 500, r#"{"error": "synthetic outage"}"#);
        return;
    }

    let Ok(request) = serde_json::from_slice::<serde_json::Value>(&body) else {
        respond(&mut stream, 400, r#"{"error": "bad json"}"#);
        return;
    };
    let prompt = request["prompt"].as_str().unwrap_or_default().to_string();
    let echo = request["echo"].as_bool().unwrap_or(false);
    let max_tokens = request["max_tokens"].as_u64().unwrap_or(0);

    let response = if echo && max_tokens == 0 {
        echo_response(&prompt)
    } else {
        sample_response()
    };
    respond(&mut stream, 200, &response.to_string());
}

fn echo_response(prompt: &str) -> serde_json::Value {
    let tokens = mock_tokenize(prompt);
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut offset = 0usize;
    for token in &tokens {
        offsets.push(offset);
        offset += token.len();
    }
    let logprobs: Vec<serde_json::Value> = tokens
        .iter()
        .enumerate()
        .map(|(i, _)| {
            if i == 0 {
                serde_json::Value::Null
            } else {
                serde_json::json!(-0.5)
            }
        })
        .collect();
    serde_json::json!({
        "id": "stub",
        "object": "text_completion",
        "choices": [{
            "text": prompt,
            "index": 0,
            "logprobs": {
                "tokens": tokens,
                "token_logprobs": logprobs,
                "text_offset": offsets,
                "top_logprobs": null
            },
            "finish_reason": "length"
        }]
    })
}

fn sample_response() -> serde_json::Value {
    serde_json::json!({
        "id": "stub",
        "object": "text_completion",
        "choices": [{
            "text": " A",
            "index": 0,
            "logprobs": {
                "tokens": [" A"],
                "token_logprobs": [-0.2],
                "text_offset": [0],
                "top_logprobs": [{
                    " A": -0.2, " B": -1.2, " C": -2.2, " D": -3.2, " E": -4.2
                }]
            },
            "finish_reason": "length"
        }]
    })
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Unknown",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
}
