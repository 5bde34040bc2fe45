mod common;

use std::collections::HashMap;
use std::sync::Arc;

use common::*;
use mcat_core::adaptive::{SessionConfig, StopReason, StoppingConfig};
use mcat_core::evaluation::simulate_respondent;
use mcat_core::fixture::fixture_bank;
use mcat_core::langmodel::{train, EmbeddingClient, TrainConfig};
use mcat_core::synth::{generate, SynthConfig};
use mcat_core::error::EmbedError;
use mcat_service::api::*;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};

async fn post(client: &Client, url: String, body: Value) -> (StatusCode, Value) {
    let r = client.post(url).json(&body).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn get(client: &Client, url: String) -> (StatusCode, Value) {
    let r = client.get(url).send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

fn answer_body(q: &str, k: usize, token: Option<&str>) -> Value {
    let mut v = json!({"question_id": q, "answer": {"category": k}});
    if let Some(t) = token {
        v["submission_token"] = json!(t);
    }
    v
}

fn scripted_answers(seed: u64) -> HashMap<String, usize> {
    let bank = fixture_bank();
    let ks = simulate_respondent(&bank, &[0.4, -0.7], seed).unwrap();
    bank.items().iter().map(|i| i.id.clone()).zip(ks).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn http_session_matches_in_process_replay() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(open(dir.path(), 16)).await;
    let client = Client::new();
    let answers = scripted_answers(3);
    let (status, created) = post(&client, server.url("/v1/sessions"), json!({"config": full_length()})).await;
    assert_eq!(status, StatusCode::CREATED);
    let created: CreateSessionResponse = serde_json::from_value(created).unwrap();
    assert_eq!(created.schema, API_SCHEMA);
    let id = created.session_id;
    let mut q = created.question.id;
    let mut last: Option<AnswerResponse> = None;
    for turn in 1..=48 {
        let (status, body) = post(&client, server.url(&format!("/v1/sessions/{id}/answer")), answer_body(&q, answers[&q], None)).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let r: AnswerResponse = serde_json::from_value(body).unwrap();
        assert_eq!(r.turn, turn);
        last = Some(r.clone());
        match r.next_question {
            Some(n) => q = n.id,
            None => break,
        }
    }
    let last = last.unwrap();
    assert_eq!(last.turn, 48);
    assert_eq!(last.stop_reason, Some(StopReason::PoolEmpty));

    let local = engine().run_scripted("local", full_length(), |q| answers[q]).unwrap();
    let (_, est) = get(&client, server.url(&format!("/v1/sessions/{id}/estimates"))).await;
    let est: EstimatesView = serde_json::from_value(est).unwrap();
    assert_eq!(est.history.len(), 48);
    for (t, h) in est.history.iter().enumerate() {
        assert_eq!(h.question_id, local.administered[t].question);
        for (a, b) in h.theta.iter().zip(local.theta_history[t + 1].theta.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
    let fin = local.current();
    for (a, b) in est.theta.iter().zip(fin.theta.iter()) {
        assert!((a - b).abs() <= 1e-10);
    }
    for (r, row) in est.covariance.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((v - fin.covariance[(r, c)]).abs() <= 1e-10);
        }
    }
    assert_eq!(est.stop, StopState { stopped: true, reason: Some(StopReason::PoolEmpty) });
    server.kill().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn restart_keeps_every_committed_turn() {
    let dir = tempfile::tempdir().unwrap();
    let answers = scripted_answers(5);
    let client = Client::new();
    let server = Server::start(open(dir.path(), 4)).await;
    let (_, created) = post(&client, server.url("/v1/sessions"), json!({"config": full_length(), "respondent": "demo"})).await;
    let id = created["session_id"].as_str().unwrap().to_string();
    let mut q = created["question"]["id"].as_str().unwrap().to_string();
    for _ in 0..10 {
        let (_, r) = post(&client, server.url(&format!("/v1/sessions/{id}/answer")), answer_body(&q, answers[&q], None)).await;
        q = r["next_question"]["id"].as_str().unwrap().to_string();
    }
    let (_, before) = get(&client, server.url(&format!("/v1/sessions/{id}/estimates"))).await;
    let (_, view_before) = get(&client, server.url(&format!("/v1/sessions/{id}"))).await;
    server.kill().await;

    // a torn trailing write from the crash is discarded
    use std::io::Write;
    let path = dir.path().join(format!("{id}.jsonl"));
    std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"entry\":\"turn\",\"tu").unwrap();

    let server = Server::start(open(dir.path(), 4)).await;
    let (_, after) = get(&client, server.url(&format!("/v1/sessions/{id}/estimates"))).await;
    let (_, view_after) = get(&client, server.url(&format!("/v1/sessions/{id}"))).await;
    assert_eq!(before, after);
    assert_eq!(view_before, view_after);
    assert_eq!(view_after["answered"], 10);
    assert_eq!(view_after["respondent"], "demo");
    assert_eq!(view_after["pending_question"]["id"], q.as_str());
    let (status, _) = post(&client, server.url(&format!("/v1/sessions/{id}/answer")), answer_body(&q, answers[&q], None)).await;
    assert_eq!(status, StatusCode::OK);
    server.kill().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_conflicting_answers_never_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(open(dir.path(), 8)).await;
    let client = Client::new();
    let mut session: Option<(String, String)> = None;
    let mut accepted: HashMap<String, Vec<(String, usize)>> = HashMap::new();
    for iteration in 0..100 {
        let (id, q) = match session.take() {
            Some(s) => s,
            None => {
                let (_, c) = post(&client, server.url("/v1/sessions"), json!({"config": full_length()})).await;
                (c["session_id"].as_str().unwrap().to_string(), c["question"]["id"].as_str().unwrap().to_string())
            }
        };
        let tasks: Vec<_> = (1..=4)
            .map(|k| {
                let client = client.clone();
                let url = server.url(&format!("/v1/sessions/{id}/answer"));
                let body = answer_body(&q, k, Some(&format!("it{iteration}-k{k}")));
                tokio::spawn(async move { post(&client, url, body).await })
            })
            .collect();
        let mut wins = Vec::new();
        for t in tasks {
            let (status, body) = t.await.unwrap();
            match status {
                StatusCode::OK => wins.push(body),
                StatusCode::CONFLICT => assert!(matches!(body["code"].as_str(), Some("duplicate" | "out_of_order" | "session_stopped")), "{body}"),
                other => panic!("unexpected {other}: {body}"),
            }
        }
        assert_eq!(wins.len(), 1, "iteration {iteration}");
        let win = &wins[0];
        accepted.entry(id.clone()).or_default().push((q.clone(), win["category"].as_u64().unwrap() as usize));
        if let Some(next) = win["next_question"]["id"].as_str() {
            session = Some((id, next.to_string()));
        }
    }
    let live: HashMap<String, Value> = {
        let mut m = HashMap::new();
        for id in accepted.keys() {
            m.insert(id.clone(), get(&client, server.url(&format!("/v1/sessions/{id}/estimates"))).await.1);
        }
        m
    };
    server.kill().await;

    let reopened = open(dir.path(), 8);
    let e = engine();
    for (id, turns) in &accepted {
        let est = serde_json::to_value(reopened.estimates(id).unwrap()).unwrap();
        assert_eq!(est, live[id]);
        let order: HashMap<&str, usize> = turns.iter().map(|(q, k)| (q.as_str(), *k)).collect();
        let local = e.run_scripted("x", full_length(), |q| order.get(q).copied().unwrap_or(1)).unwrap();
        let est: EstimatesView = serde_json::from_value(live[id].clone()).unwrap();
        assert_eq!(est.turns, turns.len());
        for (t, h) in est.history.iter().enumerate() {
            assert_eq!(h.question_id, turns[t].0);
            assert_eq!(h.theta, local.theta_history[t + 1].theta.iter().copied().collect::<Vec<_>>());
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idempotent_tokens_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(open(dir.path(), 16)).await;
    let client = Client::new();

    let (s1, a) = post(&client, server.url("/v1/sessions"), json!({})).await;
    let (_, b) = post(&client, server.url("/v1/sessions"), json!({"schema": API_SCHEMA})).await;
    assert_eq!(s1, StatusCode::CREATED);
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(a["question"], b["question"]);
    let empty = client.post(server.url("/v1/sessions")).send().await.unwrap();
    assert_eq!(empty.status(), StatusCode::CREATED);

    let id = a["session_id"].as_str().unwrap();
    let q = a["question"]["id"].as_str().unwrap();
    let (_, fresh) = get(&client, server.url(&format!("/v1/sessions/{id}/estimates"))).await;
    assert_eq!(fresh["theta"], json!([0.0, 0.0]));
    assert_eq!(fresh["history"], json!([]));
    assert_eq!(fresh["stop"], json!({"stopped": false, "reason": null}));

    let url = server.url(&format!("/v1/sessions/{id}/answer"));
    let (s, first) = post(&client, url.clone(), answer_body(q, 2, Some("tok-1"))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, again) = post(&client, url.clone(), answer_body(q, 2, Some("tok-1"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(first, again);
    let (_, view) = get(&client, server.url(&format!("/v1/sessions/{id}"))).await;
    assert_eq!(view["answered"], 1);
    let next = first["next_question"]["id"].as_str().unwrap();
    assert_eq!(post(&client, url.clone(), answer_body(next, 2, Some("tok-1"))).await.1["code"], "token_reused");

    let cases = [
        (json!({"bank_id": "nope"}), StatusCode::NOT_FOUND, "unknown_bank"),
        (json!({"config": {"stopping": {"rolling_window": 1}}}), StatusCode::BAD_REQUEST, "invalid_request"),
        (json!({"surplus": true}), StatusCode::BAD_REQUEST, "invalid_request"),
        (json!({"schema": "mcat.api/v0"}), StatusCode::BAD_REQUEST, "invalid_request"),
    ];
    for (body, status, code) in cases {
        let (s, e) = post(&client, server.url("/v1/sessions"), body).await;
        assert_eq!((s, e["code"].as_str().unwrap()), (status, code));
        assert_eq!(e.as_object().unwrap().len(), 2);
    }
    let answer_cases = [
        (answer_body(q, 1, None), StatusCode::CONFLICT, "duplicate"),
        (answer_body("G1x", 1, None), StatusCode::CONFLICT, "out_of_order"),
        (answer_body(next, 9, None), StatusCode::BAD_REQUEST, "invalid_answer"),
        (json!({"question_id": next, "answer": {"text": "fine"}}), StatusCode::BAD_REQUEST, "free_text_unavailable"),
        (json!({"question_id": next, "answer": {"category": 1}, "x": 1}), StatusCode::BAD_REQUEST, "invalid_request"),
        (json!({"question_id": next, "answer": {"likert": 1}}), StatusCode::BAD_REQUEST, "invalid_request"),
    ];
    for (body, status, code) in answer_cases {
        let (s, e) = post(&client, url.clone(), body).await;
        assert_eq!((s, e["code"].as_str().unwrap()), (status, code));
    }
    let (s, e) = post(&client, server.url("/v1/sessions/missing/answer"), answer_body(q, 1, None)).await;
    assert_eq!((s, e["code"].as_str().unwrap()), (StatusCode::NOT_FOUND, "unknown_session"));
    assert_eq!(get(&client, server.url("/v1/sessions/missing")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&client, server.url("/v2/other")).await.0, StatusCode::NOT_FOUND);
    let (_, view) = get(&client, server.url(&format!("/v1/sessions/{id}"))).await;
    assert_eq!(view["answered"], 1);

    let (s, bank) = get(&client, server.url("/v1/bank")).await;
    assert_eq!(s, StatusCode::OK);
    let bank: BankView = serde_json::from_value(bank).unwrap();
    assert_eq!(bank.items.len(), 48);
    assert_eq!(bank.conditions.len(), 10);
    server.kill().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stopped_session_reports_reason() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(open(dir.path(), 16)).await;
    let client = Client::new();
    let config = SessionConfig {
        stopping: StoppingConfig {
            max_items: Some(6),
            ..Default::default()
        },
        ..Default::default()
    };
    let (_, c) = post(&client, server.url("/v1/sessions"), json!({"config": config})).await;
    let id = c["session_id"].as_str().unwrap();
    let mut q = c["question"]["id"].as_str().unwrap().to_string();
    let url = server.url(&format!("/v1/sessions/{id}/answer"));
    for _ in 0..6 {
        let (_, r) = post(&client, url.clone(), answer_body(&q, 3, None)).await;
        match r["next_question"]["id"].as_str() {
            Some(n) => q = n.to_string(),
            None => assert_eq!(r["stop_reason"], "max_items"),
        }
    }
    let (_, est) = get(&client, server.url(&format!("/v1/sessions/{id}/estimates"))).await;
    assert_eq!(est["stop"], json!({"stopped": true, "reason": "max_items"}));
    let (s, e) = post(&client, url, answer_body(&q, 1, None)).await;
    assert_eq!((s, e["code"].as_str().unwrap()), (StatusCode::CONFLICT, "session_stopped"));
    server.kill().await;
}

struct FixedClient(Vec<f64>);

impl EmbeddingClient for FixedClient {
    fn embed(&self, _text: &str) -> Result<Vec<f64>, EmbedError> {
        Ok(self.0.clone())
    }
}

struct DownClient;

impl EmbeddingClient for DownClient {
    fn embed(&self, _text: &str) -> Result<Vec<f64>, EmbedError> {
        Err(EmbedError::Unavailable("connection refused".into()))
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn free_text_goes_through_the_embedding_model() {
    let corpus = generate(&SynthConfig { respondents: 80, ..Default::default() }).unwrap();
    let conditions = mcat_core::catalog::conditions();
    let model = train(&corpus.records, &corpus.targets, &conditions, &TrainConfig::default()).unwrap().model;
    let vector = corpus.records.iter().find(|r| !r.respondent.is_empty()).unwrap().vector.clone();

    let dir = tempfile::tempdir().unwrap();
    let down = open_with(dir.path(), 16, Some(model.clone()), Some(Arc::new(DownClient)));
    let server = Server::start(down).await;
    let client = Client::new();
    let (_, c) = post(&client, server.url("/v1/sessions"), json!({})).await;
    assert_eq!(c["question"]["response_kind"], "category_or_text");
    let id = c["session_id"].as_str().unwrap().to_string();
    let q = c["question"]["id"].as_str().unwrap().to_string();
    let (s, e) = post(&client, server.url(&format!("/v1/sessions/{id}/answer")), json!({"question_id": q, "answer": {"text": "most days"}})).await;
    assert_eq!((s, e["code"].as_str().unwrap()), (StatusCode::SERVICE_UNAVAILABLE, "embedding_unavailable"));
    let (_, view) = get(&client, server.url(&format!("/v1/sessions/{id}"))).await;
    assert_eq!(view["answered"], 0);
    assert_eq!(view["pending_question"]["id"], q.as_str());
    server.kill().await;

    let up = open_with(dir.path(), 16, Some(model.clone()), Some(Arc::new(FixedClient(vector.clone()))));
    let server = Server::start(up).await;
    let (s, r) = post(&client, server.url(&format!("/v1/sessions/{id}/answer")), json!({"question_id": q, "answer": {"text": "most days"}})).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    let want = mcat_core::langmodel::score_answer(&model, &q, mcat_core::langmodel::AnswerInput::Vector(&vector), None).unwrap();
    assert_eq!(r["category"], want);
    server.kill().await;
}
