//! JSON-over-HTTP front end. Every handler delegates to [`Service`] on the
//! blocking pool; errors become `{error_code, message}` bodies.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use trinity_core::geo::{BBox, LatLon, TileKey};
use trinity_core::Error;

use crate::model::{ConfigOverrides, ExperimentConfig, ExperimentPatch};
use crate::service::*;
use crate::state::Event;

pub const TOKEN_HEADER: &str = "x-trinity-token";

#[derive(Clone)]
struct AppState {
    svc: Arc<Service>,
    token: Option<Arc<str>>,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::Validation(_) | Error::Domain(_) | Error::Parse { .. } => StatusCode::BAD_REQUEST,
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::Conflict(_) | Error::State(_) => StatusCode::CONFLICT,
        Error::Io(_) | Error::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_body(status: StatusCode, code: &str, message: String) -> Response {
    (status, Json(json!({"error_code": code, "message": message}))).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        error_body(status_of(&self.0), self.0.code(), self.0.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> trinity_core::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(Error::state(format!("request handler failed: {e}")))),
    }
}

async fn json_of<T: Serialize + Send + 'static>(f: impl FnOnce() -> trinity_core::Result<T> + Send + 'static) -> ApiResult<Json<T>> {
    blocking(f).await.map(Json)
}

/// Parses a JSON body ourselves so malformed input gets the standard body.
fn body<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> ApiResult<T> {
    let bytes: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { bytes };
    serde_json::from_slice(bytes).map_err(|e| ApiError(Error::validation(format!("bad request body: {e}"))))
}

async fn auth(State(st): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(tok) = &st.token {
        let given = headers
            .get(TOKEN_HEADER)
            .and_then(|v| v.to_str().ok())
            .or_else(|| headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer ")));
        if given != Some(tok.as_ref()) {
            return error_body(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong API token".into());
        }
    }
    next.run(req).await
}

pub fn router(svc: Arc<Service>, token: Option<String>) -> Router {
    let st = AppState { svc, token: token.map(Into::into) };
    Router::new()
        .route("/api/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/api/projects", post(create_project).get(list_projects))
        .route("/api/projects/{id}", get(get_project))
        .route("/api/projects/{id}/experiments", post(create_experiment))
        .route("/api/experiments", get(list_experiments))
        .route("/api/experiments/{id}", get(get_experiment).patch(patch_experiment))
        .route("/api/experiments/{id}/clone", post(clone_experiment))
        .route("/api/experiments/{id}/lineage", get(lineage))
        .route("/api/experiments/{id}/audit", get(audit))
        .route("/api/experiments/{id}/transition", post(fire))
        .route("/api/experiments/{id}/dataprep", post(dataprep))
        .route("/api/experiments/{id}/train", post(train))
        .route("/api/experiments/{id}/automl", post(automl))
        .route("/api/experiments/{id}/predict", post(predict))
        .route("/api/experiments/{id}/metrics", get(metrics))
        .route("/api/jobs", get(list_jobs))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/catalog/profiles", get(profiles))
        .route("/api/catalog/profiles/ingest", post(ingest_profile))
        .route("/api/catalog/architectures", get(architectures))
        .route("/api/catalog/postprocessors", get(postprocessors))
        .route("/api/labels/upload", post(upload_labels))
        .route("/api/labels/tasks", get(label_tasks))
        .route("/api/labels/tasks/{id}/annotations", post(annotate))
        .route("/api/predictions/{id}/active-learning", post(al_select))
        .route("/api/predictions/{id}/postprocess", post(postprocess))
        .route("/api/predictions/{id}/evaluate", post(evaluate))
        .route("/api/predictions/{id}/tiles/{task}/{class}/16/{x}/{file}", get(tile_png))
        .route("/api/active-learning/{id}", get(get_round))
        .route("/api/active-learning/{id}/complete", post(al_complete))
        .fallback(|| async { error_body(StatusCode::NOT_FOUND, "not_found", "no such endpoint".into()) })
        .layer(middleware::from_fn_with_state(st.clone(), auth))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(st)
}

/// Serves until ctrl-c. `on_bound` receives the actual address.
pub async fn serve(svc: Arc<Service>, addr: SocketAddr, token: Option<String>, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    axum::serve(listener, router(svc, token))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Deserialize)]
struct NewProject {
    name: String,
    #[serde(default)]
    description: String,
}

async fn create_project(State(st): State<AppState>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let req: NewProject = body(&raw)?;
    let p = json_of(move || st.svc.create_project(&req.name, &req.description)).await?;
    Ok((StatusCode::CREATED, p).into_response())
}

async fn list_projects(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.list_projects()?))).await
}

async fn get_project(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json_of(move || {
        let p = st.svc.project(&id)?;
        let exps = p.experiment_ids.iter().map(|e| st.svc.experiment(e)).collect::<trinity_core::Result<Vec<_>>>()?;
        Ok(json!({"project": p, "experiments": exps}))
    })
    .await
}

async fn create_experiment(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let cfg: ExperimentConfig = body(&raw)?;
    let e = json_of(move || st.svc.create_experiment(&id, cfg)).await?;
    Ok((StatusCode::CREATED, e).into_response())
}

async fn list_experiments(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.list_experiments()?))).await
}

async fn get_experiment(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.experiment(&id)?))).await
}

async fn patch_experiment(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let patch: ExperimentPatch = body(&raw)?;
    json_of(move || Ok(json!(st.svc.patch_experiment(&id, &patch)?))).await
}

async fn clone_experiment(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let o: ConfigOverrides = body(&raw)?;
    let e = json_of(move || st.svc.clone_experiment(&id, &o)).await?;
    Ok((StatusCode::CREATED, e).into_response())
}

async fn lineage(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.lineage(&id)?))).await
}

async fn audit(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.audit(&id)?))).await
}

#[derive(Deserialize)]
struct FireRequest {
    event: Event,
}

async fn fire(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let req: FireRequest = body(&raw)?;
    json_of(move || Ok(json!(st.svc.transition(&id, req.event)?))).await
}

fn accepted<T: Serialize>(v: Json<T>) -> Response {
    (StatusCode::ACCEPTED, v).into_response()
}

async fn dataprep(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let req: DataprepRequest = body(&raw)?;
    Ok(accepted(json_of(move || st.svc.run_dataprep(&id, &req)).await?))
}

async fn train(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let req: TrainRequest = body(&raw)?;
    Ok(accepted(json_of(move || st.svc.run_training(&id, &req)).await?))
}

async fn automl(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let req: AutomlRequest = body(&raw)?;
    Ok(accepted(json_of(move || st.svc.run_automl(&id, &req)).await?))
}

async fn predict(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let req: PredictRequest = body(&raw)?;
    Ok(accepted(json_of(move || st.svc.run_prediction(&id, &req)).await?))
}

async fn metrics(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let text = blocking(move || st.svc.metrics(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

#[derive(Deserialize)]
struct JobFilter {
    experiment: Option<String>,
}

async fn list_jobs(State(st): State<AppState>, Query(q): Query<JobFilter>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.list_jobs(q.experiment.as_deref())?))).await
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.job(&id)?))).await
}

async fn profiles(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.profiles()))).await
}

#[derive(Deserialize)]
struct IngestRequest {
    dir: PathBuf,
}

async fn ingest_profile(State(st): State<AppState>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let req: IngestRequest = body(&raw)?;
    let m = json_of(move || st.svc.ingest_profile(&req.dir)).await?;
    Ok((StatusCode::CREATED, m).into_response())
}

async fn architectures(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.architectures()))).await
}

async fn postprocessors(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    json_of(move || {
        let mut v: Vec<Value> = st.svc.postprocess_methods().into_iter().map(|(id, d)| json!({"method": id, "description": d})).collect();
        v.push(json!({"method": "filter", "description": "predicate filter over an earlier output"}));
        Ok(json!(v))
    })
    .await
}

/// `min_lon,min_lat,max_lon,max_lat`.
pub fn parse_bbox(s: &str) -> trinity_core::Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::validation(format!("bad bbox '{s}'"))))
        .collect::<trinity_core::Result<_>>()?;
    if v.len() != 4 {
        return Err(Error::validation(format!("bbox '{s}' needs four numbers")));
    }
    BBox::new(LatLon::new(v[0], v[1])?, LatLon::new(v[2], v[3])?)
}

async fn upload_labels(State(st): State<AppState>, mut mp: Multipart) -> ApiResult<Response> {
    let bad = |e: axum::extract::multipart::MultipartError| ApiError(Error::validation(format!("bad multipart body: {e}")));
    let (mut id, mut tasks, mut region, mut task, mut wkt) = (None, None, None, None, None);
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        let text = field.text().await.map_err(bad)?;
        match name.as_str() {
            "label_set_id" => id = Some(text),
            "tasks" => tasks = Some(text),
            "region" => region = Some(parse_bbox(&text)?),
            "task" => task = Some(text),
            "file" | "wkt" => wkt = Some(text),
            other => return Err(ApiError(Error::validation(format!("unexpected form field '{other}'")))),
        }
    }
    let req = UploadLabelsRequest {
        label_set_id: id.ok_or_else(|| ApiError(Error::validation("missing label_set_id")))?,
        tasks,
        region,
        task,
        wkt: wkt.ok_or_else(|| ApiError(Error::validation("missing WKT file")))?,
    };
    let v = json_of(move || st.svc.upload_labels(&req)).await?;
    Ok((StatusCode::CREATED, v).into_response())
}

async fn label_tasks(State(st): State<AppState>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.label_tasks()?))).await
}

#[derive(Deserialize)]
struct Annotations {
    wkt: String,
}

async fn annotate(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let req: Annotations = body(&raw)?;
    json_of(move || st.svc.annotate(&id, &req.wkt)).await
}

#[derive(Deserialize)]
struct SelectRequest {
    k: usize,
}

async fn al_select(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Response> {
    let req: SelectRequest = body(&raw)?;
    let r = json_of(move || st.svc.active_learning_select(&id, req.k)).await?;
    Ok((StatusCode::CREATED, r).into_response())
}

async fn get_round(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.round(&id)?))).await
}

async fn al_complete(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json_of(move || Ok(json!(st.svc.active_learning_complete(&id)?))).await
}

async fn postprocess(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let req: PostprocessRequest = body(&raw)?;
    json_of(move || Ok(json!(st.svc.postprocess(&id, &req)?))).await
}

async fn evaluate(State(st): State<AppState>, Path(id): Path<String>, raw: axum::body::Bytes) -> ApiResult<Json<Value>> {
    let req: EvaluateRequest = body(&raw)?;
    json_of(move || Ok(json!(st.svc.evaluate(&id, &req)?))).await
}

async fn tile_png(State(st): State<AppState>, Path((id, task, class, x, file)): Path<(String, String, String, u32, String)>) -> ApiResult<Response> {
    let y: u32 = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError(Error::not_found(format!("tile file '{file}'"))))?;
    let tile = TileKey::new(x, y)?;
    let bytes = blocking(move || st.svc.heatmap_png(&id, &TaskRef::parse(&task), &class, tile)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}
