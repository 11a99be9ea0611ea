use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use serde_json::{json, Map, Value};
use surprisecal::backends::{EpisodeRequest, HttpBackend, HttpConfig, HttpStrategy, LogprobBackend};
use surprisecal::domain::{assemble_prompt, Demonstration, LabelSpace, PromptTemplate};
use surprisecal::Error;

#[derive(Debug, Clone)]
struct Seen {
    headers: String,
    body: Value,
}

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server answering each connection with `handler`.
fn serve(handler: Arc<Handler>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = String::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                headers.push_str(&line);
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let index = {
                let mut log = log.lock().unwrap();
                log.push(Seen { headers, body: body.clone() });
                log.len() - 1
            };
            let (status, text) = handler(index, &body);
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    (url, seen)
}

fn labels() -> LabelSpace {
    LabelSpace::new(vec!["pos".into(), "neg".into()], vec![" pos".into(), " neg".into()]).unwrap()
}

fn top(p_pos: f64, p_neg: f64) -> Value {
    json!({" pos": p_pos.ln(), " neg": p_neg.ln(), " the": 0.05f64.ln()})
}

fn completion(tops: Vec<Value>, offsets: Vec<usize>) -> String {
    json!({"choices": [{"text": " pos", "logprobs": {"top_logprobs": tops, "text_offset": offsets}}]}).to_string()
}

fn config(url: &str) -> HttpConfig {
    HttpConfig { backoff_ms: 5, ..HttpConfig::new(url, "test-model") }
}

fn fetch(backend: &HttpBackend, demos: &[Demonstration], query: &Demonstration) -> surprisecal::Result<surprisecal::backends::Fetched> {
    let (template, labels) = (PromptTemplate::default(), labels());
    backend.fetch(&EpisodeRequest { id: "h".into(), template: &template, labels: &labels, demos, query, meta: Map::new() })
}

#[test]
fn incremental_requests_each_prefix() {
    let handler: Arc<Handler> = Arc::new(|_, body: &Value| {
        let prompt = body["prompt"].as_str().unwrap();
        let t = if prompt.ends_with("b >") { top(0.2, 0.7) } else { top(0.6, 0.3) };
        (200, completion(vec![t], vec![prompt.len()]))
    });
    let (url, seen) = serve(handler);
    std::env::set_var("SURPRISECAL_TEST_KEY", "sekret");
    let backend = HttpBackend::new(HttpConfig { api_key_env: Some("SURPRISECAL_TEST_KEY".into()), ..config(&url) }).unwrap();
    let demos = [Demonstration::labeled("a", 0), Demonstration::labeled("b", 1)];
    let query = Demonstration::unlabeled("c");
    let fetched = fetch(&backend, &demos, &query).unwrap();
    assert_eq!(fetched.requests, 3);

    let prompt = assemble_prompt(&PromptTemplate::default(), &demos, "c", &labels()).unwrap();
    let seen = seen.lock().unwrap().clone();
    assert_eq!(seen.len(), 3);
    for (j, s) in seen.iter().enumerate() {
        assert_eq!(s.body["prompt"], prompt.prefix(j));
        assert_eq!(s.body["max_tokens"], 1);
        assert_eq!(s.body["logprobs"], 20);
        assert_eq!(s.body["temperature"], 0);
        assert_eq!(s.body["model"], "test-model");
        assert!(s.headers.to_ascii_lowercase().contains("authorization: bearer sekret"));
    }
    let ep = fetched.episode;
    assert!((ep.demo_dists[0].prob(0) - 2.0 / 3.0).abs() < 1e-12);
    assert!((ep.demo_dists[1].prob(0) - 2.0 / 9.0).abs() < 1e-12);
    assert!((ep.query_dist.prob(0) - 2.0 / 3.0).abs() < 1e-12);
    assert!(ep.meta.get("floored").is_none());
    assert_eq!(ep.meta["backend"], "http");
}

#[test]
fn echo_reads_logprobs_at_cut_points() {
    // one token per character, so every character offset is a token boundary
    let p = |i: usize| 0.1 + 0.8 * ((i * 7) % 11) as f64 / 11.0;
    let handler: Arc<Handler> = Arc::new(move |_, body: &Value| {
        assert_eq!(body["echo"], true);
        let n = body["prompt"].as_str().unwrap().chars().count();
        let tops = (0..=n).map(|i| top(p(i), 1.0 - p(i))).collect();
        (200, completion(tops, (0..=n).collect()))
    });
    let (url, seen) = serve(handler);
    let backend = HttpBackend::new(HttpConfig { strategy: HttpStrategy::Echo, ..config(&url) }).unwrap();
    let demos = [Demonstration::labeled("café", 0), Demonstration::labeled("naïve b", 1)];
    let query = Demonstration::unlabeled("q");
    let fetched = fetch(&backend, &demos, &query).unwrap();
    assert_eq!(fetched.requests, 1);
    assert_eq!(seen.lock().unwrap().len(), 1);

    let prompt = assemble_prompt(&PromptTemplate::default(), &demos, "q", &labels()).unwrap();
    let dists: Vec<_> = fetched.episode.demo_dists.iter().chain([&fetched.episode.query_dist]).collect();
    for (cut, dist) in prompt.cut_points.iter().zip(dists) {
        let i = prompt.text[..*cut].chars().count();
        assert!((dist.prob(0) - p(i)).abs() < 1e-12, "cut {cut}");
    }
}

#[test]
fn missing_label_token_is_floored_or_strict() {
    let handler: Arc<Handler> = Arc::new(|_, _: &Value| {
        (200, completion(vec![json!({" pos": 0.8f64.ln(), " the": 0.1f64.ln()})], vec![0]))
    });
    let (url, _) = serve(handler);
    let query = Demonstration::unlabeled("c");
    let ep = fetch(&HttpBackend::new(config(&url)).unwrap(), &[], &query).unwrap().episode;
    assert_eq!(ep.meta["floored"], true);
    // the missing label gets half the smallest returned probability
    assert!((ep.query_dist.prob(1) - 0.05 / 0.85).abs() < 1e-12);

    let strict = HttpBackend::new(HttpConfig { strict: true, ..config(&url) }).unwrap();
    let err = fetch(&strict, &[], &query).unwrap_err();
    assert!(matches!(&err, Error::MissingLabelToken(t) if t == " neg"));
    assert!(err.is_backend());
}

#[test]
fn server_errors_are_retried_client_errors_are_not() {
    let handler: Arc<Handler> = Arc::new(|i, _: &Value| {
        if i == 0 {
            (503, "busy".into())
        } else {
            (200, completion(vec![top(0.5, 0.4)], vec![0]))
        }
    });
    let (url, seen) = serve(handler);
    let query = Demonstration::unlabeled("c");
    let fetched = fetch(&HttpBackend::new(config(&url)).unwrap(), &[], &query).unwrap();
    assert_eq!(fetched.requests, 1);
    assert_eq!(seen.lock().unwrap().len(), 2);

    let handler: Arc<Handler> = Arc::new(|_, _: &Value| (400, "{\"error\": \"bad model\"}".into()));
    let (url, seen) = serve(handler);
    let err = fetch(&HttpBackend::new(config(&url)).unwrap(), &[], &query).unwrap_err();
    assert!(matches!(&err, Error::Backend { status: 400, body } if body.contains("bad model")));
    assert_eq!(seen.lock().unwrap().len(), 1);

    let handler: Arc<Handler> = Arc::new(|_, _: &Value| (500, "down".into()));
    let (url, seen) = serve(handler);
    let err = fetch(&HttpBackend::new(config(&url)).unwrap(), &[], &query).unwrap_err();
    assert!(matches!(err, Error::Backend { status: 500, .. }));
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn missing_api_key_variable_is_a_config_error() {
    let cfg = HttpConfig { api_key_env: Some("SURPRISECAL_UNSET_VARIABLE".into()), ..config("http://127.0.0.1:9") };
    assert!(matches!(HttpBackend::new(cfg), Err(Error::Config(_))));
}
