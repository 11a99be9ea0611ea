use std::sync::Arc;

use serde_json::json;

use super::http::label_masses;
use super::*;
use crate::error::Error;
use crate::bayessim::{generate_task, oracle_label_space, simulate_episode, Observation};

fn model() -> Arc<ConceptModel> {
    Arc::new(generate_task(&SyntheticTaskConfig { num_inputs: 6, ..Default::default() }).unwrap())
}

fn demos(obs: &[Observation]) -> Vec<Demonstration> {
    obs.iter().map(|o| Demonstration::labeled(crate::bayessim::input_text(o.input), o.label)).collect()
}

fn request<'a>(
    template: &'a PromptTemplate,
    labels: &'a LabelSpace,
    demos: &'a [Demonstration],
    query: &'a Demonstration,
) -> EpisodeRequest<'a> {
    EpisodeRequest { id: "r".into(), template, labels, demos, query, meta: Map::new() }
}

#[test]
fn oracle_matches_simulation() {
    let model = model();
    let backend = OracleBackend::new(model.clone());
    let obs = [Observation::new(0, 1), Observation::new(3, 0), Observation::new(5, 1)];
    let (template, labels) = (PromptTemplate::default(), oracle_label_space(2));
    let d = demos(&obs);
    let q = Demonstration::labeled("x2", 0);
    let fetched = backend.fetch(&request(&template, &labels, &d, &q)).unwrap();
    let sim = simulate_episode(&model, &obs, 2).unwrap();
    assert_eq!(fetched.requests, 1);
    assert_eq!(fetched.episode.demo_dists, sim.demo_dists);
    assert_eq!(fetched.episode.query_dist, sim.query_dist);
    assert_eq!(fetched.episode.query.label, Some(0));
    assert_eq!(fetched.episode.meta["backend"], "oracle");
}

#[test]
fn oracle_input_resolution() {
    let model = model();
    let (template, labels) = (PromptTemplate::default(), oracle_label_space(2));
    let q = Demonstration::unlabeled("N/A");
    let backend = OracleBackend::new(model.clone());
    assert!(matches!(backend.fetch(&request(&template, &labels, &[], &q)), Err(Error::UnknownInput(_))));

    let backend = OracleBackend::new(model.clone()).with_content_free_input(4).unwrap();
    let ep = fetch_episode(&backend, &request(&template, &labels, &[], &q)).unwrap();
    assert_eq!(ep.query_dist, simulate_episode(&model, &[], 4).unwrap().query_dist);
    assert!(OracleBackend::new(model.clone()).with_content_free_input(6).is_err());

    let three = oracle_label_space(3);
    let q = Demonstration::unlabeled("x0");
    assert!(matches!(
        backend.fetch(&request(&template, &three, &[], &q)),
        Err(Error::LabelSpaceMismatch { expected: 2, got: 3 })
    ));
}

#[test]
fn replay_round_trip_and_miss() {
    let model = model();
    let oracle = OracleBackend::new(model);
    let (template, labels) = (PromptTemplate::default(), oracle_label_space(2));
    let d = demos(&[Observation::new(1, 1), Observation::new(2, 0)]);
    let q = Demonstration::unlabeled("x3");
    let ep = fetch_episode(&oracle, &request(&template, &labels, &d, &q)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    cache_write(&path, std::slice::from_ref(&ep)).unwrap();
    let back = cache_read(&path).unwrap();
    assert_eq!(back, vec![ep.clone()]);

    let replay = ReplayBackend::from_path(&path).unwrap();
    let fetched = replay.fetch(&request(&template, &labels, &d, &q)).unwrap();
    assert_eq!(fetched.requests, 0);
    assert_eq!(fetched.episode.demo_dists, ep.demo_dists);
    assert_eq!(fetched.episode.query_dist, ep.query_dist);

    let other = Demonstration::unlabeled("x4");
    let err = replay.fetch(&request(&template, &labels, &d, &other)).unwrap_err();
    assert!(matches!(err, Error::CacheMiss(_)));
    assert!(err.is_backend());

    std::fs::write(&path, "").unwrap();
    assert!(cache_read(&path).unwrap().is_empty());
}

#[test]
fn counted_and_memo() {
    let model = model();
    let memo: Arc<dyn LogprobBackend> = Arc::new(Memo::new(Arc::new(OracleBackend::new(model))));
    let counted = Counted::new(memo);
    let (template, labels) = (PromptTemplate::default(), oracle_label_space(2));
    let d = demos(&[Observation::new(1, 1)]);
    let q = Demonstration::unlabeled("x3");
    let a = counted.fetch_as("icl", &request(&template, &labels, &d, &q)).unwrap();
    let b = counted.fetch_as("bc", &request(&template, &labels, &d, &q)).unwrap();
    assert_eq!(a.query_dist, b.query_dist);
    let snap = counted.counter().snapshot();
    assert_eq!(snap.logical, 2);
    assert_eq!(snap.requests, 1);
    assert_eq!(counted.counter().method("icl"), 1);
    assert_eq!(counted.counter().method("bc"), 1);
    assert_eq!(counted.counter().method("sc"), 0);
}

#[test]
fn memo_fetches_concurrent_duplicates_once() {
    let counted = Counted::new(Arc::new(Memo::new(Arc::new(OracleBackend::new(model())))));
    let (template, labels) = (PromptTemplate::default(), oracle_label_space(2));
    let d = demos(&[Observation::new(0, 1), Observation::new(2, 0)]);
    let q = Demonstration::unlabeled("x1");
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| counted.fetch_as("icl", &request(&template, &labels, &d, &q)).unwrap());
        }
    });
    assert_eq!(counted.counter().logical(), 8);
    assert_eq!(counted.counter().requests(), 1);
}

#[test]
fn recording_keeps_one_canonical_episode_per_prompt() {
    let recording = Recording::new(Arc::new(OracleBackend::new(model())));
    let (template, labels) = (PromptTemplate::default(), oracle_label_space(2));
    let d = demos(&[Observation::new(0, 1)]);
    let q1 = Demonstration::labeled("x1", 0);
    let q2 = Demonstration::labeled("x1", 1);
    let mut req = request(&template, &labels, &d, &q1);
    req.meta.insert("role".into(), "test".into());
    recording.fetch(&req).unwrap();
    recording.fetch(&EpisodeRequest { id: "other".into(), ..request(&template, &labels, &d, &q2) }).unwrap();
    recording.fetch(&request(&template, &labels, &d, &Demonstration::unlabeled("x2"))).unwrap();

    let eps = recording.episodes();
    assert_eq!(eps.len(), 2);
    assert_eq!(eps.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["rec-0", "rec-1"]);
    assert!(eps.iter().all(|e| e.query.label.is_none() && !e.meta.contains_key("role")));
    assert_eq!(eps[0].meta.get("backend"), Some(&json!("oracle")));

    // the recording replays every prompt it saw
    let replay = ReplayBackend::from_episodes(eps);
    let hit = replay.fetch(&request(&template, &labels, &d, &q2)).unwrap().episode;
    assert_eq!(hit.query, q2);
}

#[test]
fn label_token_matching() {
    let labels = LabelSpace::new(vec!["positive".into(), "negative".into()], vec![" positive".into(), " negative".into()]).unwrap();
    let top = json!({" positive": 0.5f64.ln(), "positive": 0.1f64.ln(), " the": 0.2f64.ln()});
    let (masses, missing) = label_masses(top.as_object().unwrap(), &labels);
    assert!((masses[0].unwrap() - 0.6).abs() < 1e-12);
    assert_eq!(masses[1], None);
    assert_eq!(missing, vec![1]);
}

#[test]
fn backend_spec_parsing() {
    let spec: BackendSpec = serde_json::from_value(json!({"kind": "replay", "cache": "c.jsonl"})).unwrap();
    assert_eq!(spec, BackendSpec::Replay { cache: "c.jsonl".into() });
    assert!(spec.is_offline());

    let spec: BackendSpec = serde_json::from_value(json!({
        "kind": "http", "base_url": "http://localhost:1", "model": "m", "strategy": "echo"
    }))
    .unwrap();
    match &spec {
        BackendSpec::Http(cfg) => {
            assert_eq!(cfg.top_logprobs, 20);
            assert_eq!(cfg.timeout_secs, 60);
            assert_eq!(cfg.strategy, HttpStrategy::Echo);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(!spec.is_offline());

    let spec: BackendSpec = serde_json::from_value(json!({
        "kind": "oracle", "model": {"synthetic": {"num_inputs": 6}}
    }))
    .unwrap();
    let backend = spec.build(Path::new(".")).unwrap();
    assert_eq!(backend.name(), "oracle");

    assert!(serde_json::from_value::<BackendSpec>(json!({"kind": "replay", "cache": "c", "model": "m"})).is_err());
    assert!(serde_json::from_value::<BackendSpec>(json!({"kind": "http", "base_url": "u", "model": "m", "cache": "c"})).is_err());
    assert!(serde_json::from_value::<BackendSpec>(json!({"kind": "telepathy"})).is_err());
}
