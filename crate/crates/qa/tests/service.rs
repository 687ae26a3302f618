use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use qa::cli::{render_score, Format};
use qa::query::{QueryFilter, Snapshot, Sources};
use qa::service::{router, AppState};
use qa_core::events::{generate_cohort, load_events, write_cohort_csv, ComplianceProfile, EventFormat, LoadOptions};
use qa_core::protocol::{parse_protocol, parse_protocol_file};
use serde_json::Value;
use tower::ServiceExt;

fn protocol_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../protocols/pressure_ulcer.json")
}

fn generated(n: usize, target: f64, seed: u64) -> Snapshot {
    let p = parse_protocol_file(protocol_path()).unwrap();
    let cohort = generate_cohort(&p, n, &ComplianceProfile::uniform(target), seed).unwrap();
    Snapshot::new(p, cohort)
}

async fn call(state: &AppState, method: &str, uri: &str) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri).body(Body::empty()).unwrap();
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn get_json(state: &AppState, uri: &str) -> (StatusCode, Value) {
    let (status, body) = call(state, "GET", uri).await;
    (status, serde_json::from_str(&body).unwrap_or_else(|e| panic!("{e}: {body}")))
}

fn assert_error_shape(body: &Value, error: &str) {
    assert_eq!(body["error"], error, "{body}");
    assert!(body["path"].is_string() && body["detail"].is_string(), "{body}");
}

#[tokio::test]
async fn protocol_summary_lists_stages_and_cohort() {
    let state = AppState::new(generated(3, 0.8, 1), None);
    let (status, body) = get_json(&state, "/api/protocol").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["id"], "pressure_ulcer");
    assert_eq!(body["stages"].as_array().unwrap().len(), 5);
    assert_eq!(body["patients"], 3);
    assert!(body["from"].is_string() && body["to"].is_string());
}

#[tokio::test]
async fn patients_filter_by_ward() {
    let state = AppState::new(generated(8, 0.8, 2), None);
    let (_, all) = get_json(&state, "/api/patients").await;
    let all = all.as_array().unwrap().clone();
    assert_eq!(all.len(), 8);
    let ward = all[0]["ward"].as_str().unwrap().to_string();
    let (status, some) = get_json(&state, &format!("/api/patients?ward={ward}")).await;
    assert_eq!(status, StatusCode::OK);
    let some = some.as_array().unwrap();
    assert!(!some.is_empty() && some.iter().all(|p| p["ward"] == ward.as_str()));
    assert_eq!(some.len(), all.iter().filter(|p| p["ward"] == ward.as_str()).count());
    let (status, body) = get_json(&state, "/api/patients?ward=nowhere").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error_shape(&body, "UnknownId");
}

#[tokio::test]
async fn stage_scores_match_the_cli_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let snapshot = generated(6, 0.6, 3);
    let events = dir.path().join("events.csv");
    write_cohort_csv(&snapshot.cohort, &mut std::fs::File::create(&events).unwrap()).unwrap();
    let state = AppState::new(snapshot, None);
    let (status, api) = call(&state, "GET", "/api/scores?stage=follow_up&from=2017-01-01&to=2017-07-01").await;
    assert_eq!(status, StatusCode::OK);

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_qa"))
        .args(["score", "--protocol", protocol_path().to_str().unwrap(), "--events", events.to_str().unwrap()])
        .args(["--stage", "follow_up", "--from", "2017-01-01", "--to", "2017-07-01"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(api.as_bytes(), out.stdout.as_slice());

    let filter = QueryFilter {
        stage: Some("follow_up".into()),
        from: Some(qa::query::parse_time("from", "2017-01-01").unwrap()),
        to: Some(qa::query::parse_time("to", "2017-07-01").unwrap()),
        ..QueryFilter::default()
    };
    assert_eq!(render_score(&state.current(), &filter, Format::Json).unwrap(), api);
}

#[tokio::test]
async fn repeated_reads_are_identical() {
    let state = AppState::new(generated(5, 0.5, 4), None);
    let (_, first) = call(&state, "GET", "/api/scores?granularity=day").await;
    for _ in 0..3 {
        assert_eq!(call(&state, "GET", "/api/scores?granularity=day").await.1, first);
    }
}

#[tokio::test]
async fn patient_tree_and_its_errors() {
    let state = AppState::new(generated(2, 0.9, 5), None);
    let (status, tree) = get_json(&state, "/api/scores/P0002/tree").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(tree["kind"], "protocol");
    assert_eq!(tree["id"], "pressure_ulcer");
    assert_eq!(tree["children"].as_array().unwrap().len(), 5);

    let (status, body) = get_json(&state, "/api/scores/P9999/tree").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error_shape(&body, "UnknownId");

    let (status, body) = get_json(&state, "/api/scores/P0001/tree?ward=x").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error_shape(&body, "BadFilter");
}

#[tokio::test]
async fn bad_filters_are_400_with_a_path() {
    let state = AppState::new(generated(2, 0.9, 6), None);
    for (uri, path) in [
        ("/api/scores?from=yesterday", "from"),
        ("/api/scores?from=2017-03-01&to=2017-02-01", "from"),
        ("/api/scores?granularity=weekly", "granularity"),
        ("/api/scores?colour=red", "colour"),
        ("/api/compare?frameB_from=2018-01-01&frameB_to=2017-01-01", "frameB_from"),
        ("/api/compare?from=2017-01-01", "from"),
    ] {
        let (status, body) = get_json(&state, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}: {body}");
        assert_error_shape(&body, "BadFilter");
        assert_eq!(body["path"], path, "{uri}");
    }
    let (status, body) = get_json(&state, "/api/scores?stage=nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error_shape(&body, "UnknownId");
}

#[tokio::test]
async fn unknown_routes_and_methods_answer_in_json() {
    let state = AppState::new(generated(1, 1.0, 7), None);
    let (status, body) = get_json(&state, "/api/nothing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error_shape(&body, "NotFound");
    let (status, body) = call(&state, "POST", "/api/scores").await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert_error_shape(&serde_json::from_str(&body).unwrap(), "MethodNotAllowed");
}

#[tokio::test]
async fn compare_aligns_two_frames() {
    let state = AppState::new(generated(10, 0.7, 8), None);
    let uri = "/api/compare?frameA_from=2017-01-01&frameA_to=2017-04-01&frameB_from=2017-04-01&frameB_to=2018-01-01";
    let (status, body) = get_json(&state, uri).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let rows = body["rows"].as_array().unwrap();
    assert_eq!(rows[0]["path"], "pressure_ulcer");
    assert!(rows.iter().any(|r| r["delta"].is_number()));
    for r in rows {
        if let (Some(a), Some(b)) = (r["value_a"].as_f64(), r["value_b"].as_f64()) {
            assert!((r["delta"].as_f64().unwrap() - (b - a)).abs() < 1e-12);
        }
    }
}

#[tokio::test]
async fn reload_swaps_the_snapshot_and_keeps_it_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("events.csv");
    let write = |n: usize| {
        let s = generated(n, 1.0, 9);
        write_cohort_csv(&s.cohort, &mut std::fs::File::create(&events).unwrap()).unwrap();
    };
    write(2);
    let sources = Sources {
        protocol: protocol_path(),
        events: events.clone(),
    };
    let state = AppState::new(Snapshot::load(&sources).unwrap(), Some(sources));
    assert_eq!(get_json(&state, "/api/protocol").await.1["patients"], 2);

    write(4);
    let (status, body) = call(&state, "POST", "/api/reload").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(get_json(&state, "/api/protocol").await.1["patients"], 4);

    std::fs::write(&events, "patient_id,ward\nP1\n").unwrap();
    let (status, _) = call(&state, "POST", "/api/reload").await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(get_json(&state, "/api/protocol").await.1["patients"], 4);

    let detached = AppState::new(generated(1, 1.0, 1), None);
    assert_eq!(call(&detached, "POST", "/api/reload").await.0, StatusCode::CONFLICT);
}

const THREE_PROPORTIONAL: &str = r#"{
  "id": "contract", "name": "contract", "version": "1",
  "concepts": [
    {"code": "A", "name": "A", "kind": "action"},
    {"code": "B", "name": "B", "kind": "action"},
    {"code": "C", "name": "C", "kind": "action"}
  ],
  "stages": [{"id": "s", "name": "s", "weight": 100, "actions": [
    {"id": "a", "name": "a", "concept": "A", "weight": 30,
     "constraint": {"kind": "cyclical", "expected_cardinality": 100, "window_hours": 100, "calculation": "proportional"}},
    {"id": "b", "name": "b", "concept": "B", "weight": 35,
     "constraint": {"kind": "cyclical", "expected_cardinality": 100, "window_hours": 100, "calculation": "proportional"}},
    {"id": "c", "name": "c", "concept": "C", "weight": 35,
     "constraint": {"kind": "cyclical", "expected_cardinality": 100, "window_hours": 100, "calculation": "proportional"}}
  ]}]
}"#;

/// 85, 90 and 92 of 100 expected performances weighted 30/35/35 over a 100 h stay.
fn three_action_contract() -> Snapshot {
    let protocol = parse_protocol(THREE_PROPORTIONAL).unwrap();
    let mut csv = String::from("patient_id,ward,concept,kind,timestamp,value\n");
    csv.push_str("P1,w,ADMISSION,observation,2017-03-01T00:00:00Z,\n");
    csv.push_str("P1,w,DISCHARGE,observation,2017-03-05T04:00:00Z,\n");
    for (concept, n) in [("A", 85), ("B", 90), ("C", 92)] {
        for hour in 0..n {
            let stamp = format!("2017-03-{:02}T{:02}:30:00Z", 1 + hour / 24, hour % 24);
            csv.push_str(&format!("P1,w,{concept},performance,{stamp},\n"));
        }
    }
    let (cohort, _) = load_events(csv.as_bytes(), EventFormat::Csv, "contract", LoadOptions::default()).unwrap();
    Snapshot::new(protocol, cohort)
}

#[tokio::test]
async fn weighted_stage_displays_rounded_percent() {
    let state = AppState::new(three_action_contract(), None);
    let (status, tree) = get_json(&state, "/api/scores/P1/tree?from=2017-03-01&to=2017-03-05T04:00:00Z").await;
    assert_eq!(status, StatusCode::OK, "{tree}");
    let stage = &tree["children"][0];
    let actions: Vec<f64> = stage["children"].as_array().unwrap().iter().map(|a| a["value"].as_f64().unwrap()).collect();
    assert_eq!(actions, [0.85, 0.90, 0.92]);
    assert!((stage["value"].as_f64().unwrap() - 0.892).abs() < 1e-12);
    assert_eq!(stage["percent"], 89);
}
