//! Rating HTTP API over a rendered [`RatingSession`].
//!
//! Rankings are appended to `rankings.csv` (one `rater,subject,method,rank` row per
//! method) and fsynced before the POST is acknowledged; a later submission for the
//! same rater and case supersedes the earlier one.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::config::PipelineConfig;
use super::montage::{is_montage_file, rating_dir, RatingSession, IMAGE_DIR};
use super::run::read_rankings;
use crate::error::{Error, Result};

pub const RANKINGS_FILE: &str = "rankings.csv";
const RANKINGS_HEADER: &str = "rater,subject,method,rank\n";

const INDEX_HTML: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>Blinded ranking</title></head>
<body>
<h1>Blinded ranking</h1>
<p>The rating interface talks to this server through <code>/api/session</code>,
<code>/api/case/{id}</code> and <code>POST /api/ranking</code>.</p>
</body></html>
"#;

pub struct AppState {
    session: RatingSession,
    image_dir: PathBuf,
    rankings_path: PathBuf,
    /// (rater, case) → methods from best to worst
    latest: Mutex<BTreeMap<(String, String), Vec<String>>>,
}

impl AppState {
    /// Loads the session under `dir` and replays any existing `rankings.csv` there.
    pub fn open(dir: &Path) -> Result<Self> {
        let session = RatingSession::load(dir)?;
        let rankings_path = dir.join(RANKINGS_FILE);
        let mut latest = BTreeMap::new();
        if rankings_path.is_file() {
            for r in read_rankings(&rankings_path)? {
                latest.insert((r.rater, r.subject), r.ranking);
            }
        } else {
            fs::write(&rankings_path, RANKINGS_HEADER).map_err(|e| Error::io(&rankings_path, e))?;
        }
        Ok(AppState {
            session,
            image_dir: dir.join(IMAGE_DIR),
            rankings_path,
            latest: Mutex::new(latest),
        })
    }

    fn append(&self, rater: &str, case: &str, methods: &[String]) -> std::io::Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.rankings_path)?;
        let rows: String = methods
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{rater},{case},{m},{}\n", i + 1))
            .collect();
        f.write_all(rows.as_bytes())?;
        f.sync_data()
    }
}

fn error(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({ "error": message }))).into_response()
}

async fn session(State(s): State<Arc<AppState>>) -> Response {
    let latest = s.latest.lock().expect("rankings lock");
    let cases: Vec<_> = s
        .session
        .cases
        .iter()
        .map(|c| {
            let done: Vec<&String> = latest.keys().filter(|(_, id)| *id == c.case_id).map(|(r, _)| r).collect();
            json!({ "case_id": c.case_id, "panels": c.panels.len(), "completed_by": done })
        })
        .collect();
    Json(json!({
        "session_id": s.session.session_id,
        "raters": s.session.raters,
        "cases": cases,
    }))
    .into_response()
}

async fn case(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match s.session.case(&id) {
        Some(c) => Json(c.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, "unknown case"),
    }
}

async fn status(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    if s.session.case(&id).is_none() {
        return error(StatusCode::NOT_FOUND, "unknown case");
    }
    let latest = s.latest.lock().expect("rankings lock");
    let mut raters: BTreeSet<&String> = s.session.raters.iter().collect();
    raters.extend(latest.keys().map(|(r, _)| r));
    let status: BTreeMap<&String, &str> = raters
        .into_iter()
        .map(|r| {
            let done = latest.contains_key(&(r.clone(), id.clone()));
            (r, if done { "completed" } else { "pending" })
        })
        .collect();
    Json(json!({ "case_id": id, "raters": status })).into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RankingPost {
    rater: String,
    case_id: String,
    ranking: Vec<String>,
}

async fn ranking(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let post: RankingPost = match serde_json::from_slice(&body) {
        Ok(p) => p,
        Err(e) => return error(StatusCode::BAD_REQUEST, &format!("malformed body: {e}")),
    };
    let rater = post.rater.trim();
    if rater.is_empty() || rater.contains([',', '\n', '\r', '"']) {
        return error(StatusCode::BAD_REQUEST, "rater name must be non-empty without commas, quotes or newlines");
    }
    let Some(key) = s.session.key.get(&post.case_id) else {
        return error(StatusCode::BAD_REQUEST, "unknown case");
    };
    let distinct: BTreeSet<&String> = post.ranking.iter().collect();
    if post.ranking.len() != key.len() || distinct.len() != key.len() || !distinct.iter().all(|l| key.contains_key(*l)) {
        return error(StatusCode::BAD_REQUEST, "not a permutation");
    }
    let methods: Vec<String> = post.ranking.iter().map(|l| key[l].clone()).collect();
    let mut latest = s.latest.lock().expect("rankings lock");
    if let Err(e) = s.append(rater, &post.case_id, &methods) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, &format!("could not persist ranking: {e}"));
    }
    latest.insert((rater.to_string(), post.case_id), methods);
    Json(json!({ "accepted": true })).into_response()
}

async fn export(State(s): State<Arc<AppState>>) -> Response {
    let latest = s.latest.lock().expect("rankings lock");
    let mut out = String::from(RANKINGS_HEADER);
    for ((rater, case), methods) in latest.iter() {
        for (i, m) in methods.iter().enumerate() {
            out.push_str(&format!("{rater},{case},{m},{}\n", i + 1));
        }
    }
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], out).into_response()
}

async fn image(State(s): State<Arc<AppState>>, UrlPath((case, file)): UrlPath<(String, String)>) -> Response {
    if s.session.case(&case).is_none() || !is_montage_file(&file) {
        return error(StatusCode::NOT_FOUND, "no such image");
    }
    match fs::read(s.image_dir.join(&case).join(&file)) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "no such image"),
    }
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/session", get(session))
        .route("/api/case/{id}", get(case))
        .route("/api/case/{id}/status", get(status))
        .route("/api/ranking", post(ranking))
        .route("/api/export.csv", get(export))
        .route("/images/{case}/{file}", get(image))
        .with_state(state)
}

/// Serves the session rendered by `cordwarp montage` on `127.0.0.1:port` until killed.
pub fn cmd_serve(cfg: &PipelineConfig, port: u16) -> Result<()> {
    let state = Arc::new(AppState::open(&rating_dir(cfg))?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => Error::PortInUse(port),
            _ => Error::io(format!("127.0.0.1:{port}"), e),
        })?;
        axum::serve(listener, router(state))
            .await
            .map_err(|e| Error::io(format!("127.0.0.1:{port}"), e))
    })
}
