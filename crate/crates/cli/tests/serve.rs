mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dc3dcd_cli::commands::{self, MapSource};
use dc3dcd_cli::serve::{router, AppState, ClassInfo, ClusterPoints, ClusterSummary, Progress, SubmitResult, CONTEXT_MARGIN, MAX_POINTS};
use dc3dcd_cli::workdir::{self as wd, read_labels};
use dc3dcd_core::evalmap::{majority_map, ClassMapping, MappingEntry, MetricsReport, Provenance};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use tower::ServiceExt;

use common::inferred_workdir;

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json<T: DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body) = call(app, "GET", uri, None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn entry(cluster: u32, class: u32) -> MappingEntry {
    MappingEntry {
        cluster,
        class,
        provenance: Provenance::User,
        majority_fraction: None,
        empty: false,
    }
}

fn partial(entries: Vec<MappingEntry>) -> String {
    let mut m = ClassMapping::new(7);
    m.merge(entries);
    m.to_json().unwrap()
}

#[tokio::test]
async fn clusters_classes_and_points() {
    let dir = tempfile::tempdir().unwrap();
    let (w, cfg) = inferred_workdir(dir.path());
    let k = w.run_info().unwrap().k;
    let pseudo = read_labels(&w.path(wd::PSEUDO_LABELS)).unwrap();
    let state = Arc::new(AppState::load(w.clone(), cfg, None).unwrap());
    let app = router(state.clone());

    let clusters: Vec<ClusterSummary> = get_json(&app, "/api/clusters").await;
    assert_eq!(clusters.len(), k);
    assert_eq!(clusters.iter().map(|c| c.count).sum::<usize>(), pseudo.len());
    assert!(clusters.iter().enumerate().all(|(i, c)| c.id == i as u32 && c.label.is_none()));

    let classes: Vec<ClassInfo> = get_json(&app, "/api/classes").await;
    assert_eq!(classes.len(), 7);
    assert_eq!(classes[0].name, "unchanged");

    let big = clusters.iter().max_by_key(|c| c.count).unwrap();
    let pts: ClusterPoints = get_json(&app, &format!("/api/clusters/{}/points?limit=10", big.id)).await;
    assert_eq!(pts.total, big.count);
    assert_eq!(pts.points.len(), 3 * big.count.min(10));
    assert!(pts.context.len() % 3 == 0 && pts.context.len() <= 30);
    let again: ClusterPoints = get_json(&app, &format!("/api/clusters/{}/points?limit=10", big.id)).await;
    assert_eq!(pts, again);

    let all: ClusterPoints = get_json(&app, &format!("/api/clusters/{}/points?limit=1000000", big.id)).await;
    assert_eq!(all.points.len(), 3 * big.count.min(MAX_POINTS));
    let members: Vec<usize> = (0..pseudo.len()).filter(|&i| pseudo[i] == big.id).collect();
    for (chunk, &i) in all.points.chunks(3).zip(&members) {
        assert_eq!(chunk, state.pos2[i]);
    }
    let (lo, hi) = (big.z_min - CONTEXT_MARGIN, big.z_max + CONTEXT_MARGIN);
    assert!(all.context.chunks(3).all(|p| p[2] >= lo && p[2] <= hi));
    assert!(!all.context.is_empty());

    let (status, _) = call(&app, "GET", &format!("/api/clusters/{k}/points"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/ui/../run.json", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8_lossy(&body).contains("/api/clusters"));
}

#[tokio::test]
async fn mapping_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (w, cfg) = inferred_workdir(dir.path());
    let k = w.run_info().unwrap().k;
    let app = router(Arc::new(AppState::load(w.clone(), cfg.clone(), None).unwrap()));

    let (status, _) = call(&app, "POST", "/api/mapping", Some(partial(vec![entry(1, 3)]))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, "POST", "/api/mapping", Some(partial(vec![entry(4, 2), entry(1, 5)]))).await;
    assert_eq!(status, StatusCode::OK);
    let m: ClassMapping = get_json(&app, "/api/mapping").await;
    assert_eq!((m.class_of(1), m.class_of(4), m.class_of(0)), (Some(5), Some(2), None));
    let on_disk = ClassMapping::from_json(&std::fs::read_to_string(w.path(wd::MAPPING)).unwrap()).unwrap();
    assert_eq!(on_disk, m);

    let clusters: Vec<ClusterSummary> = get_json(&app, "/api/clusters").await;
    assert_eq!(clusters[1].label, Some(5));

    let (status, body) = call(&app, "POST", "/api/mapping", Some(partial(vec![entry(0, 1), entry(k as u32 + 3, 1)]))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains(&(k + 3).to_string()));
    let (status, _) = call(&app, "POST", "/api/mapping", Some(partial(vec![entry(0, 9)]))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/api/mapping", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let unchanged: ClassMapping = get_json(&app, "/api/mapping").await;
    assert_eq!(unchanged, m);

    let progress: Progress = get_json(&app, "/api/progress").await;
    assert_eq!(progress.labeled, 2);
    assert_eq!(progress.total, k);
    let (status, body) = call(&app, "POST", "/api/submit", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    let missing: Vec<u32> = serde_json::from_value(v["missing"].clone()).unwrap();
    assert_eq!(missing, progress.missing);
    assert!(!w.path(wd::PRED_LABELS).exists());

    // A restarted service resumes from the persisted mapping.
    let app2 = router(Arc::new(AppState::load(w.clone(), cfg, None).unwrap()));
    let resumed: ClassMapping = get_json(&app2, "/api/mapping").await;
    assert_eq!(resumed, m);
}

#[tokio::test]
async fn labeling_through_the_api_matches_auto_majority() {
    let dir = tempfile::tempdir().unwrap();
    let (w, cfg) = inferred_workdir(dir.path());
    let k = w.run_info().unwrap().k;
    commands::map(&w, &cfg, &MapSource::AutoMajority).unwrap();
    let reference = commands::eval(&w, &cfg).unwrap();
    let reference_pred = std::fs::read(w.path(wd::PRED_LABELS)).unwrap();
    for name in [wd::MAPPING, wd::PRED_LABELS, wd::METRICS_JSON] {
        std::fs::remove_file(w.path(name)).unwrap();
    }

    let app = router(Arc::new(AppState::load(w.clone(), cfg.clone(), None).unwrap()));
    let pseudo = read_labels(&w.path(wd::PSEUDO_LABELS)).unwrap();
    let majority = majority_map(&pseudo, &commands::load_truth(&w).unwrap(), k, 7).unwrap();
    for c in (0..k as u32).rev() {
        let body = partial(vec![entry(c, majority.class_of(c).unwrap())]);
        let (status, _) = call(&app, "POST", "/api/mapping", Some(body)).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, body) = call(&app, "POST", "/api/submit", None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let result: SubmitResult = serde_json::from_slice(&body).unwrap();
    assert_eq!(result.metrics.as_ref(), Some(&reference));
    assert_eq!(std::fs::read(w.path(wd::PRED_LABELS)).unwrap(), reference_pred);
    let stored: MetricsReport = serde_json::from_str(&std::fs::read_to_string(w.path(wd::METRICS_JSON)).unwrap()).unwrap();
    assert_eq!(stored, reference);

    // The UI-produced mapping is valid `map --mapping` input with the same outcome.
    let ui_mapping = w.path(wd::MAPPING);
    let copy = dir.path().join("ui_mapping.json");
    std::fs::copy(&ui_mapping, &copy).unwrap();
    commands::map(&w, &cfg, &MapSource::File(copy)).unwrap();
    assert_eq!(commands::eval(&w, &cfg).unwrap(), reference);
}
