//! JSON-over-HTTP front end for [`Service`].

use std::net::SocketAddr;
use std::path::{Component, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DrawingRecord, Service, ServiceError, Stats, Status, SCHEMA_VERSION};
use crate::image::{encode_png, GrayTensor};
use crate::score::Score;

pub type Shared = Arc<Mutex<Service>>;

const SCORER_HEADER: &str = "x-scorer-id";
const MAX_UPLOAD: usize = 32 * 1024 * 1024;

#[derive(Serialize)]
struct Envelope<T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn reply<T: Serialize>(status: StatusCode, body: T) -> Response {
    (status, Json(Envelope { schema_version: SCHEMA_VERSION, body })).into_response()
}

struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::WrongState { .. } | ServiceError::DuplicateVote { .. } | ServiceError::CaseClosed(_) => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) | ServiceError::InvalidEvent(_) | ServiceError::Image(_) => StatusCode::BAD_REQUEST,
            ServiceError::ModelUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Log(_) | ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        reply(status, serde_json::json!({ "error": { "code": self.0.code(), "message": self.0.to_string() } }))
    }
}

type ApiResult = Result<Response, ApiError>;

fn lock(state: &Shared) -> MutexGuard<'_, Service> {
    state.lock().unwrap_or_else(|p| p.into_inner())
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(ServiceError::BadRequest(msg.into()))
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/drawings", post(submit))
        .route("/drawings/{id}", get(drawing))
        .route("/drawings/{id}/image", get(drawing_image))
        .route("/drawings/{id}/votes", post(vote))
        .route("/queue", get(queue))
        .route("/arbitrations", get(arbitrations))
        .route("/arbitrations/{id}/decision", post(decide))
        .route("/stats", get(stats))
        .route("/triage-curve", get(triage_curve))
        .route("/ui/{*path}", get(static_file))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(service)
}

pub async fn serve(service: Service, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(Arc::new(Mutex::new(service)))).await
}

fn image_url(id: u64) -> String {
    format!("/drawings/{id}/image")
}

/// What a caller may see of a drawing. Pending drawings expose only the
/// id and image; arbitration hides the model unless configured otherwise.
fn view(rec: &DrawingRecord, reveal_model: bool) -> Value {
    if rec.status == Status::PendingReview {
        return serde_json::json!({ "id": rec.id, "status": rec.status, "image_url": image_url(rec.id) });
    }
    let mut v = serde_json::to_value(rec).expect("record serializes");
    let obj = v.as_object_mut().expect("record is an object");
    if rec.status == Status::UnderArbitration && !reveal_model {
        obj.remove("model_score");
        obj.remove("confidence");
    }
    obj.insert("image_url".into(), image_url(rec.id).into());
    v
}

#[derive(Deserialize)]
struct SubmitQuery {
    threshold: Option<f64>,
    gold: Option<String>,
}

fn parse_score(s: &str) -> Result<Score, ApiError> {
    s.parse::<Score>().map_err(|e| bad(e.to_string()))
}

enum Upload {
    Image(Bytes),
    Tensor(Bytes),
}

async fn read_upload(req: Request) -> Result<Upload, ApiError> {
    let ctype = req.headers().get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("").to_ascii_lowercase();
    if ctype.starts_with("multipart/form-data") {
        let mut mp = Multipart::from_request(req, &()).await.map_err(|e| bad(e.body_text()))?;
        while let Some(field) = mp.next_field().await.map_err(|e| bad(e.body_text()))? {
            let name = field.name().unwrap_or("").to_string();
            let data = field.bytes().await.map_err(|e| bad(e.body_text()))?;
            match name.as_str() {
                "image" => return Ok(Upload::Image(data)),
                "tensor" => return Ok(Upload::Tensor(data)),
                _ => {}
            }
        }
        return Err(bad("multipart body needs an 'image' or 'tensor' field"));
    }
    let body = Bytes::from_request(req, &()).await.map_err(|e| bad(e.body_text()))?;
    if ctype.starts_with("application/octet-stream") {
        Ok(Upload::Tensor(body))
    } else {
        Ok(Upload::Image(body))
    }
}

async fn submit(State(state): State<Shared>, Query(q): Query<SubmitQuery>, req: Request) -> ApiResult {
    let gold = q.gold.as_deref().map(parse_score).transpose()?;
    let upload = read_upload(req).await?;
    let mut svc = lock(&state);
    let rec = match upload {
        Upload::Image(bytes) => svc.submit_image(&bytes, q.threshold, gold)?,
        Upload::Tensor(bytes) => {
            let tensor = GrayTensor::read_binary(&bytes[..]).map_err(ServiceError::from)?;
            svc.submit_tensor(tensor, q.threshold, gold)?
        }
    };
    let mut v = serde_json::to_value(&rec).expect("record serializes");
    v.as_object_mut().expect("object").insert("image_url".into(), image_url(rec.id).into());
    Ok(reply(StatusCode::CREATED, serde_json::json!({ "drawing": v })))
}

async fn drawing(State(state): State<Shared>, Path(id): Path<u64>) -> ApiResult {
    let svc = lock(&state);
    let rec = svc.drawing(id)?;
    Ok(reply(StatusCode::OK, serde_json::json!({ "drawing": view(rec, svc.config().reveal_model_score_in_arbitration) })))
}

async fn drawing_image(State(state): State<Shared>, Path(id): Path<u64>) -> ApiResult {
    let svc = lock(&state);
    let rec = svc.drawing(id)?;
    let tensor = svc.tensor(&rec.tensor_ref).ok_or(ServiceError::NotFound(format!("image of drawing {id}")))?;
    let png = encode_png(&tensor.to_raw()).map_err(ServiceError::from)?;
    Ok((
        [(header::CONTENT_TYPE, "image/png".to_string()), ("x-schema-version".parse().expect("header name"), SCHEMA_VERSION.to_string())],
        png,
    )
        .into_response())
}

#[derive(Deserialize)]
struct QueueQuery {
    status: Option<String>,
}

#[derive(Serialize)]
struct QueueItem {
    id: u64,
    image_url: String,
}

async fn queue(State(state): State<Shared>, Query(q): Query<QueueQuery>) -> ApiResult {
    match q.status.as_deref().unwrap_or("pending") {
        "pending" | "pending_review" => {}
        other => return Err(bad(format!("unsupported queue status '{other}' (only 'pending')"))),
    }
    let svc = lock(&state);
    let items: Vec<QueueItem> =
        svc.store().with_status(Status::PendingReview).map(|d| QueueItem { id: d.id, image_url: image_url(d.id) }).collect();
    Ok(reply(StatusCode::OK, serde_json::json!({ "status": "pending", "items": items })))
}

#[derive(Deserialize)]
struct VoteBody {
    scorer_id: Option<String>,
    score: String,
}

async fn vote(State(state): State<Shared>, Path(id): Path<u64>, headers: HeaderMap, Json(body): Json<VoteBody>) -> ApiResult {
    let header_id = headers.get(SCORER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let scorer = body.scorer_id.or(header_id).ok_or_else(|| bad("scorer_id missing (body field or x-scorer-id header)"))?;
    let score = parse_score(&body.score)?;
    let mut svc = lock(&state);
    let rec = svc.add_vote(id, &scorer, score)?;
    let ack = serde_json::json!({
        "id": rec.id,
        "status": rec.status,
        "votes_received": rec.votes.len(),
        "final_score": if rec.status == Status::Finalized { serde_json::to_value(rec.final_score).expect("score") } else { Value::Null },
    });
    Ok(reply(StatusCode::OK, serde_json::json!({ "vote": ack })))
}

async fn arbitrations(State(state): State<Shared>) -> ApiResult {
    let svc = lock(&state);
    let reveal = svc.config().reveal_model_score_in_arbitration;
    let items: Vec<Value> = svc
        .store()
        .open_cases()
        .map(|c| {
            let mut v = serde_json::json!({
                "case_id": c.id,
                "drawing_id": c.drawing_id,
                "image_url": image_url(c.drawing_id),
                "votes": c.votes,
                "majority_suggestion": c.majority(),
            });
            if reveal {
                let d = &svc.store().drawings[&c.drawing_id];
                v["model_score"] = serde_json::to_value(d.model_score).expect("score");
                v["confidence"] = d.confidence.into();
            }
            v
        })
        .collect();
    Ok(reply(StatusCode::OK, serde_json::json!({ "items": items })))
}

#[derive(Deserialize)]
struct DecisionBody {
    score: String,
    decider_ids: Vec<String>,
}

async fn decide(State(state): State<Shared>, Path(id): Path<u64>, Json(body): Json<DecisionBody>) -> ApiResult {
    let score = parse_score(&body.score)?;
    let mut svc = lock(&state);
    let rec = svc.resolve_arbitration(id, score, &body.decider_ids)?;
    Ok(reply(StatusCode::OK, serde_json::json!({ "drawing": view(&rec, true) })))
}

async fn stats(State(state): State<Shared>) -> ApiResult {
    let s: Stats = lock(&state).stats();
    Ok(reply(StatusCode::OK, s))
}

#[derive(Serialize)]
struct CurvePoint {
    rank: usize,
    coverage: f64,
    confidence: f64,
    accuracy: f64,
    correct: Option<f64>,
    partially_correct: Option<f64>,
    incorrect: Option<f64>,
}

async fn triage_curve(State(state): State<Shared>) -> ApiResult {
    let svc = lock(&state);
    let c = svc.curve().ok_or(ServiceError::NotFound("no triage curve loaded".into()))?;
    let points: Vec<CurvePoint> = (0..c.len())
        .map(|k| CurvePoint {
            rank: k + 1,
            coverage: c.coverage(k + 1),
            confidence: c.confidence[k],
            accuracy: c.cumulative_accuracy[k],
            correct: c.per_class[0][k],
            partially_correct: c.per_class[1][k],
            incorrect: c.per_class[2][k],
        })
        .collect();
    Ok(reply(StatusCode::OK, serde_json::json!({ "n": c.len(), "overall_accuracy": c.overall_accuracy(), "points": points })))
}

async fn static_file(State(state): State<Shared>, Path(path): Path<String>) -> ApiResult {
    let root = lock(&state).config().static_dir.clone().ok_or(ServiceError::NotFound("no static bundle configured".into()))?;
    let rel = PathBuf::from(&path);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(bad("invalid path"));
    }
    let full = root.join(rel);
    let bytes = tokio::fs::read(&full).await.map_err(|_| ServiceError::NotFound(path.clone()))?;
    let mime = match full.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
