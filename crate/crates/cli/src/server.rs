//! HTTP front end: `GET /meta`, `POST /render` and `GET /render`.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{middleware, Json, Router};

use mlpmaps::appsvc::{Pose, RenderRequest, Service, DEFAULT_FOV_DEG};
use mlpmaps::Error;

pub const RENDER_MILLIS_HEADER: &str = "x-render-millis";

type Shared = Arc<dyn Service>;

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/meta", get(meta))
        .route("/render", get(render_get).post(render_post).options(preflight))
        .layer(middleware::map_response(cors))
        .with_state(service)
}

pub async fn serve(listener: tokio::net::TcpListener, service: Shared) -> anyhow::Result<()> {
    axum::serve(listener, router(service)).await?;
    Ok(())
}

async fn cors(mut res: Response) -> Response {
    let h = res.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(header::ACCESS_CONTROL_EXPOSE_HEADERS, HeaderValue::from_static(RENDER_MILLIS_HEADER));
    res
}

async fn preflight() -> impl IntoResponse {
    (
        StatusCode::NO_CONTENT,
        [(header::ACCESS_CONTROL_ALLOW_METHODS, "GET, POST, OPTIONS"), (header::ACCESS_CONTROL_ALLOW_HEADERS, "content-type")],
    )
}

async fn meta(State(service): State<Shared>) -> Response {
    Json(service.meta()).into_response()
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::OutOfRange { .. } => StatusCode::NOT_FOUND,
        Error::InvalidArgument(_) | Error::Geometry { .. } | Error::Config(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn render(service: Shared, req: RenderRequest) -> Response {
    let out = tokio::task::spawn_blocking(move || service.render(&req)).await;
    match out {
        Ok(Ok(out)) => (
            StatusCode::OK,
            [(header::CONTENT_TYPE, "image/png".to_string()), (header::HeaderName::from_static(RENDER_MILLIS_HEADER), format!("{:.3}", out.millis))],
            out.png,
        )
            .into_response(),
        Ok(Err(e)) => error(status_of(&e), e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn render_post(State(service): State<Shared>, body: Bytes) -> Response {
    match serde_json::from_slice::<RenderRequest>(&body) {
        Ok(req) => render(service, req).await,
        Err(e) => error(StatusCode::BAD_REQUEST, format!("bad render request: {e}")),
    }
}

async fn render_get(State(service): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Response {
    match query_request(&q) {
        Ok(req) => render(service, req).await,
        Err(e) => error(StatusCode::BAD_REQUEST, e),
    }
}

/// Builds a request from query parameters: `frame`, `width`, `height`,
/// optional `fov`, `use_ess`, `two_stage`, and either
/// `position`/`look_at`/`up` (comma-separated triples) or `extrinsics`
/// (twelve row-major values).
pub fn query_request(q: &HashMap<String, String>) -> Result<RenderRequest, String> {
    fn num<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>, String> {
        q.get(key).map(|v| v.parse().map_err(|_| format!("bad value for {key}: '{v}'"))).transpose()
    }
    fn list(q: &HashMap<String, String>, key: &str, n: usize) -> Result<Option<Vec<f64>>, String> {
        let Some(v) = q.get(key) else { return Ok(None) };
        let xs = v.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| format!("bad value for {key}: '{v}'"))?;
        if xs.len() != n {
            return Err(format!("{key} needs {n} comma-separated numbers"));
        }
        Ok(Some(xs))
    }
    fn flag(q: &HashMap<String, String>, key: &str) -> Result<bool, String> {
        match q.get(key).map(String::as_str) {
            None | Some("1") | Some("true") => Ok(true),
            Some("0") | Some("false") => Ok(false),
            Some(v) => Err(format!("bad value for {key}: '{v}'")),
        }
    }
    let need = |key: &str| format!("missing {key}");
    let triple = |v: Vec<f64>| [v[0], v[1], v[2]];
    let pose = if let Some(e) = list(q, "extrinsics", 12)? {
        Pose::Extrinsics { extrinsics: [0, 1, 2].map(|r| [e[4 * r], e[4 * r + 1], e[4 * r + 2], e[4 * r + 3]]) }
    } else {
        Pose::LookAt {
            position: triple(list(q, "position", 3)?.ok_or_else(|| need("position or extrinsics"))?),
            look_at: triple(list(q, "look_at", 3)?.ok_or_else(|| need("look_at"))?),
            up: list(q, "up", 3)?.map_or([0.0, 0.0, 1.0], triple),
        }
    };
    Ok(RenderRequest {
        frame: num(q, "frame")?.ok_or_else(|| need("frame"))?,
        pose,
        fov_deg: num(q, "fov")?.unwrap_or(DEFAULT_FOV_DEG),
        width: num(q, "width")?.ok_or_else(|| need("width"))?,
        height: num(q, "height")?.ok_or_else(|| need("height"))?,
        use_ess: flag(q, "use_ess")?,
        two_stage: flag(q, "two_stage")?,
    })
}
