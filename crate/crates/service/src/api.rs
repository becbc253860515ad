//! HTTP routes and the server-sent event stream.

use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mrs_core::domain::{CapabilitySet, PlanBlueprint, RequestKind, RobotId};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;
use tokio_stream::wrappers::errors::BroadcastStreamRecvError;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use crate::driver::{Ack, ApiError, Envelope, ErrorKind, Frame, Handle, Op, Query};

/// Header naming the client that issued a command.
pub const CLIENT_HEADER: &str = "x-client-id";

pub fn router(handle: Handle) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/blueprints", get(blueprints))
        .route(
            "/blueprints/{kind}",
            get(blueprint).put(put_blueprint).delete(delete_blueprint),
        )
        .route("/robots", get(robots))
        .route("/robots/{id}/register", post(register))
        .route("/robots/{id}/deregister", post(deregister))
        .route("/requests", post(submit_request))
        .route("/plans", get(plans))
        .route("/metrics/system", get(system_metrics))
        .route("/metrics/robots", get(robot_metrics))
        .route("/control/{action}", post(control))
        .route("/commands", get(commands))
        .route("/trace", get(trace))
        .route("/events", get(events))
        .with_state(handle)
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.kind {
            ErrorKind::BadRequest => StatusCode::BAD_REQUEST,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self)).into_response()
    }
}

impl IntoResponse for Ack {
    fn into_response(self) -> Response {
        let status = if self.pending {
            StatusCode::ACCEPTED
        } else {
            StatusCode::OK
        };
        (status, Json(self)).into_response()
    }
}

/// JSON body whose every decoding failure is a 400.
struct Body<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e: JsonRejection| ApiError::bad_request(e.body_text()))
    }
}

fn client(headers: &HeaderMap) -> Option<String> {
    headers
        .get(CLIENT_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
}

async fn run(handle: &Handle, headers: &HeaderMap, op: Op) -> Result<Ack, ApiError> {
    handle
        .command(Envelope {
            client: client(headers),
            op,
        })
        .await
}

type Reply = Result<Json<Value>, ApiError>;

async fn ask(handle: &Handle, query: Query) -> Reply {
    handle.query(query).await.map(Json)
}

async fn status(State(h): State<Handle>) -> Reply {
    ask(&h, Query::Status).await
}

async fn blueprints(State(h): State<Handle>) -> Reply {
    ask(&h, Query::Blueprints).await
}

async fn blueprint(State(h): State<Handle>, Path(kind): Path<String>) -> Reply {
    ask(&h, Query::Blueprint(RequestKind::new(kind))).await
}

async fn put_blueprint(
    State(h): State<Handle>,
    Path(kind): Path<String>,
    headers: HeaderMap,
    Body(pb): Body<PlanBlueprint>,
) -> Result<Ack, ApiError> {
    if pb.request_kind.as_str() != kind {
        return Err(ApiError::bad_request(format!(
            "blueprint is for request kind {}, not {kind}",
            pb.request_kind
        )));
    }
    run(&h, &headers, Op::UpsertBlueprint(pb)).await
}

async fn delete_blueprint(
    State(h): State<Handle>,
    Path(kind): Path<String>,
    headers: HeaderMap,
) -> Result<Ack, ApiError> {
    run(&h, &headers, Op::RemoveBlueprint(RequestKind::new(kind))).await
}

async fn robots(State(h): State<Handle>) -> Reply {
    ask(&h, Query::Robots).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Registration {
    capabilities: CapabilitySet,
}

async fn register(
    State(h): State<Handle>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Body(r): Body<Registration>,
) -> Result<Ack, ApiError> {
    let op = Op::RegisterRobot {
        robot: RobotId::new(id),
        capabilities: r.capabilities,
    };
    run(&h, &headers, op).await
}

async fn deregister(State(h): State<Handle>, Path(id): Path<String>, headers: HeaderMap) -> Result<Ack, ApiError> {
    run(&h, &headers, Op::DeregisterRobot(RobotId::new(id))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewRequest {
    kind: RequestKind,
}

async fn submit_request(
    State(h): State<Handle>,
    headers: HeaderMap,
    Body(r): Body<NewRequest>,
) -> Result<Ack, ApiError> {
    run(&h, &headers, Op::SubmitRequest(r.kind)).await
}

async fn plans(State(h): State<Handle>) -> Reply {
    ask(&h, Query::Plans).await
}

async fn system_metrics(State(h): State<Handle>) -> Reply {
    ask(&h, Query::SystemMetrics).await
}

async fn robot_metrics(State(h): State<Handle>) -> Reply {
    ask(&h, Query::RobotMetrics).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Speed {
    speed: f64,
}

async fn control(
    State(h): State<Handle>,
    Path(action): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Ack, ApiError> {
    let op = match action.as_str() {
        "pause" => Op::Pause,
        "resume" => Op::Resume,
        "speed" => match serde_json::from_slice::<Speed>(&body) {
            Ok(Speed { speed }) if speed.is_finite() && speed > 0.0 => Op::SetSpeed(speed),
            _ => return Err(ApiError::bad_request("speed needs a body {\"speed\": x} with x > 0")),
        },
        other => return Err(ApiError::not_found(format!("no control action {other}"))),
    };
    run(&h, &headers, op).await
}

async fn commands(State(h): State<Handle>) -> Reply {
    ask(&h, Query::Commands).await
}

async fn trace(State(h): State<Handle>) -> Result<String, ApiError> {
    match h.query(Query::Trace).await? {
        Value::String(s) => Ok(s),
        other => Ok(other.to_string()),
    }
}

/// What a subscriber sees: frames in simulation order, with a gap marker
/// wherever it fell behind and the oldest frames were dropped.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamItem {
    Frame(Box<Frame>),
    Gap { missed: u64 },
}

pub fn stream_items(rx: broadcast::Receiver<Frame>) -> impl Stream<Item = StreamItem> {
    BroadcastStream::new(rx).map(|item| match item {
        Ok(frame) => StreamItem::Frame(Box::new(frame)),
        Err(BroadcastStreamRecvError::Lagged(missed)) => StreamItem::Gap { missed },
    })
}

fn sse_event(item: StreamItem) -> Event {
    match item {
        StreamItem::Frame(frame) => Event::default()
            .id(frame.seq.to_string())
            .event(frame.kind())
            .data(serde_json::to_string(&frame).expect("frame serializes")),
        StreamItem::Gap { missed } => Event::default()
            .event("gap")
            .data(json!({"kind": "gap", "payload": {"missed": missed}}).to_string()),
    }
}

async fn events(State(h): State<Handle>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream = stream_items(h.subscribe()).map(|item| Ok(sse_event(item)));
    Sse::new(stream).keep_alive(KeepAlive::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{FrameBody, ServiceEvent};
    use mrs_core::time::SimTime;

    fn frame(seq: u64) -> Frame {
        Frame {
            seq,
            t: SimTime::from_millis(seq),
            body: FrameBody::Service(ServiceEvent::Resumed),
        }
    }

    #[tokio::test]
    async fn slow_subscriber_sees_a_gap_then_the_newest_frames() {
        let (tx, rx) = broadcast::channel(4);
        for seq in 1..=10 {
            tx.send(frame(seq)).unwrap();
        }
        drop(tx);
        let items: Vec<_> = stream_items(rx).collect().await;
        assert_eq!(items[0], StreamItem::Gap { missed: 6 });
        let seqs: Vec<u64> = items[1..]
            .iter()
            .map(|i| match i {
                StreamItem::Frame(f) => f.seq,
                StreamItem::Gap { .. } => panic!("second gap"),
            })
            .collect();
        assert_eq!(seqs, [7, 8, 9, 10]);
    }
}
