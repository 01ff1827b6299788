//! JSON-over-HTTP service. Endpoints mirror the CLI: POST /v1/answer runs
//! the pipeline, the search and health GETs reuse the CLI's JSON builders.
//! Requests are independent; the engine is shared read-only state. Until the
//! snapshot finishes loading the service answers 503.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::sync::Arc;

use anyhow::Context;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Query as UrlQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::RwLock;

use stepchain_core::pipeline::Engine;
use stepchain_core::snapshot::load_snapshot;
use stepchain_core::Query;

use crate::commands::{health_value, search_experience_value, search_skills_value};
use crate::ServeArgs;

type SharedState = Arc<RwLock<Option<Arc<Engine>>>>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/v1/answer", post(answer))
        .route("/v1/skills/search", get(skills_search))
        .route("/v1/experience/search", get(experience_search))
        .route("/v1/health", get(health))
        .with_state(state)
}

pub fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async move {
        let state: SharedState = Arc::new(RwLock::new(None));
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush().ok();

        let loader_state = state.clone();
        let snapshot = args.snapshot.clone();
        tokio::task::spawn_blocking(move || match load_snapshot(&snapshot) {
            Ok(engine) => {
                let mut slot = loader_state.blocking_write();
                *slot = Some(Arc::new(engine));
                eprintln!("snapshot loaded from {}", snapshot.display());
            }
            Err(err) => {
                eprintln!("error: failed to load snapshot: {err}");
                std::process::exit(2);
            }
        });

        axum::serve(listener, router(state))
            .await
            .context("serving")
    })
}

fn not_ready() -> Response {
    (
        StatusCode::SERVICE_UNAVAILABLE,
        Json(json!({"error": "libraries not loaded yet"})),
    )
        .into_response()
}

fn bad_request(message: String) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({"error": message}))).into_response()
}

#[derive(Debug, Deserialize)]
struct AnswerRequest {
    question: String,
    #[serde(default)]
    context: Option<String>,
    #[serde(default)]
    options: Option<BTreeMap<String, String>>,
}

async fn answer(
    State(state): State<SharedState>,
    payload: Result<Json<AnswerRequest>, JsonRejection>,
) -> Response {
    let Some(engine) = state.read().await.clone() else {
        return not_ready();
    };
    let request = match payload {
        Ok(Json(request)) => request,
        Err(rejection) => return bad_request(format!("malformed body: {rejection}")),
    };
    if request.question.trim().is_empty() {
        return bad_request("question must not be empty".into());
    }
    let query = Query {
        question: request.question,
        context: request.context.unwrap_or_default(),
        options: request.options,
    };
    match engine.run(&query) {
        Ok(bundle) => Json(bundle).into_response(),
        Err(err) => bad_request(err.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct SearchParams {
    q: String,
    k: Option<usize>,
    m: Option<usize>,
}

async fn skills_search(
    State(state): State<SharedState>,
    UrlQuery(params): UrlQuery<SearchParams>,
) -> Response {
    let Some(engine) = state.read().await.clone() else {
        return not_ready();
    };
    if params.q.trim().is_empty() {
        return bad_request("q must not be empty".into());
    }
    match search_skills_value(&engine, &params.q, params.k) {
        Ok(value) => Json(value).into_response(),
        Err(err) => bad_request(err.to_string()),
    }
}

async fn experience_search(
    State(state): State<SharedState>,
    UrlQuery(params): UrlQuery<SearchParams>,
) -> Response {
    let Some(engine) = state.read().await.clone() else {
        return not_ready();
    };
    if params.q.trim().is_empty() {
        return bad_request("q must not be empty".into());
    }
    match search_experience_value(&engine, &params.q, params.m) {
        Ok(value) => Json(value).into_response(),
        Err(err) => bad_request(err.to_string()),
    }
}

async fn health(State(state): State<SharedState>) -> Response {
    match state.read().await.clone() {
        Some(engine) => Json(health_value(&engine)).into_response(),
        None => not_ready(),
    }
}
