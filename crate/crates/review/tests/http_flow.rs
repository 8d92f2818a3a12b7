use evchain::dataio::write_distilled;
use evchain::review::{replay, ScoreStore};
use evchain::types::{DistilledSample, EvidenceStep, TargetMode};
use evchain_review::{load_chains, router, ReviewState};
use serde_json::{json, Value};
use std::path::Path;
use std::sync::Arc;

const ASPECTS: [&str; 5] = [
    "Temporal",
    "Faithfulness",
    "Logical",
    "Relevance",
    "Completeness",
];

fn record(i: usize, mode: TargetMode) -> DistilledSample {
    let t = i as f64 * 2.0;
    DistilledSample {
        sample_id: format!("toy-{i}"),
        video_id: format!("vid-{i}"),
        duration_s: 20.0,
        question: format!("What happens in clip {i}?"),
        options: vec!["a cat jumps".into(), "a dog runs".into(), "nothing".into()],
        answer_idx: 1,
        target_mode: mode,
        evidence_steps: vec![EvidenceStep {
            t_s: t,
            t_e: t + 1.25,
            level: 1,
            text: "a dog runs".into(),
        }],
        cot_text: format!(
            "In [{t:.1}-{:.2}seconds] a dog runs, then from 3.5 to 4 seconds it stops.",
            t + 1.25
        ),
        extra: Default::default(),
    }
}

fn write_fixture(dir: &Path) -> std::path::PathBuf {
    let mut records = Vec::new();
    for i in 0..5 {
        records.push(record(i, TargetMode::Qa));
        records.push(record(i, TargetMode::Qea));
    }
    let path = dir.join("distilled.jsonl");
    write_distilled(&path, "0000000000000000", &records).unwrap();
    path
}

async fn start(dir: &Path) -> (String, std::path::PathBuf) {
    let chains = load_chains(&write_fixture(dir), None).unwrap();
    let store_path = dir.join("scores.jsonl");
    let state = Arc::new(ReviewState::new(
        chains,
        ScoreStore::open(&store_path).unwrap(),
    ));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state, None)).await.unwrap() });
    (format!("http://{addr}"), store_path)
}

fn body(sample: &str, annotator: &str, values: [u8; 5]) -> Value {
    let scores: serde_json::Map<String, Value> = ASPECTS
        .iter()
        .zip(values)
        .map(|(a, v)| (a.to_string(), json!(v)))
        .collect();
    json!({"sample_id": sample, "annotator_id": annotator, "scores": scores})
}

#[tokio::test]
async fn list_fetch_score_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (base, store_path) = start(dir.path()).await;
    let client = reqwest::Client::new();

    let page: Value = client
        .get(format!("{base}/api/chains?offset=1&limit=2"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(page["total"], 5);
    assert_eq!(page["items"].as_array().unwrap().len(), 2);
    assert_eq!(page["items"][0]["sample_id"], "toy-1");

    let chain: Value = client
        .get(format!("{base}/api/chains/toy-2"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(chain["answer"], "Answer: (B) a dog runs");
    assert_eq!(chain["video_uri"], "vid-2");
    assert_eq!(
        chain["spans"],
        json!([{"start": 4.0, "end": 5.25}, {"start": 3.5, "end": 4.0}])
    );
    assert_eq!(chain["target_modes"], json!(["QA", "QEA"]));

    let missing = client
        .get(format!("{base}/api/chains/nope"))
        .send()
        .await
        .unwrap();
    assert_eq!(missing.status(), 404);

    let empty: Value = client
        .get(format!("{base}/api/report"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(empty["records"], 0);
    assert!(empty["overall"].is_null());

    // Annotator a gives all threes; annotator b gives per-sample patterns.
    let b_scores: [[u8; 5]; 5] = [
        [1, 2, 3, 2, 1],
        [2, 2, 2, 2, 2],
        [3, 1, 1, 3, 2],
        [1, 1, 1, 1, 1],
        [2, 3, 2, 1, 3],
    ];
    for (i, b) in b_scores.iter().enumerate() {
        let r = client
            .post(format!("{base}/api/scores"))
            .json(&body(&format!("toy-{i}"), "a", [3; 5]))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status(), 201);
        let first = client
            .post(format!("{base}/api/scores"))
            .json(&body(&format!("toy-{i}"), "b", [1; 5]))
            .send()
            .await
            .unwrap();
        assert_eq!(first.status(), 201);
        let again = client
            .post(format!("{base}/api/scores"))
            .json(&body(&format!("toy-{i}"), "b", *b))
            .send()
            .await
            .unwrap();
        assert_eq!(again.status(), 200);
    }

    let report: Value = client
        .get(format!("{base}/api/report"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(report["records"], 10);
    assert_eq!(report["annotators"], 2);
    // Column sums of b are 9, 9, 9, 9, 9; with a's fifteen threes each
    // aspect averages (15 + 9) / 10.
    for a in ASPECTS {
        let stat = &report["per_aspect"][a];
        assert!((stat["mean"].as_f64().unwrap() - 2.4).abs() < 1e-12, "{a}");
        assert!(
            (stat["percentage"].as_f64().unwrap() - 80.0).abs() < 1e-9,
            "{a}"
        );
        assert_eq!(stat["count"], 10);
    }
    assert!((report["overall"]["mean"].as_f64().unwrap() - 2.4).abs() < 1e-12);

    let bad = client
        .post(format!("{base}/api/scores"))
        .json(&body("toy-0", "c", [3, 3, 4, 3, 3]))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 400);
    let err: Value = bad.json().await.unwrap();
    assert_eq!(err["aspect"], "Logical");

    let mut partial = body("toy-0", "c", [3; 5]);
    partial["scores"]
        .as_object_mut()
        .unwrap()
        .remove("Relevance");
    let bad = client
        .post(format!("{base}/api/scores"))
        .json(&partial)
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 400);
    assert_eq!(bad.json::<Value>().await.unwrap()["aspect"], "Relevance");

    let unknown = client
        .post(format!("{base}/api/scores"))
        .json(&body("nope", "c", [3; 5]))
        .send()
        .await
        .unwrap();
    assert_eq!(unknown.status(), 404);

    let garbage = client
        .post(format!("{base}/api/scores"))
        .body("not json")
        .send()
        .await
        .unwrap();
    assert_eq!(garbage.status(), 400);

    let rubric: Value = client
        .get(format!("{base}/api/rubric"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(rubric.as_array().unwrap().len(), 5);
    assert_eq!(
        rubric[0]["levels"]["3"],
        "The evidence correctly identifies the time sequence of events."
    );

    // The log keeps every submission; replaying it keeps the latest per key.
    let reopened = ScoreStore::open(&store_path).unwrap();
    assert_eq!(reopened.len(), 10);
    assert_eq!(replay(&store_path).unwrap().len(), 15);
    assert_eq!(serde_json::to_value(reopened.report()).unwrap(), report);
}

#[tokio::test]
async fn extreme_scores_hit_the_percentage_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let (base, _) = start(dir.path()).await;
    let client = reqwest::Client::new();
    for i in 0..5 {
        client
            .post(format!("{base}/api/scores"))
            .json(&body(&format!("toy-{i}"), "hi", [3; 5]))
            .send()
            .await
            .unwrap();
    }
    let report: Value = client
        .get(format!("{base}/api/report"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(report["overall"]["percentage"], 100.0);
    for i in 0..5 {
        client
            .post(format!("{base}/api/scores"))
            .json(&body(&format!("toy-{i}"), "hi", [1; 5]))
            .send()
            .await
            .unwrap();
    }
    let report: Value = client
        .get(format!("{base}/api/report"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let pct = report["overall"]["percentage"].as_f64().unwrap();
    assert_eq!(format!("{pct:.2}"), "33.33");
}

#[tokio::test]
async fn serving_leaves_the_dataset_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        write_fixture(dir.path());
        std::fs::read(dir.path().join("distilled.jsonl")).unwrap()
    };
    let (base, _) = start(dir.path()).await;
    reqwest::Client::new()
        .post(format!("{base}/api/scores"))
        .json(&body("toy-0", "a", [2; 5]))
        .send()
        .await
        .unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("distilled.jsonl")).unwrap(),
        before
    );
}
