//! HTTP routes. Uploads are either a raw request body or the first file
//! field of a multipart form.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use xray_core::explain::Method;

use crate::service::{Service, ServiceError};

pub fn router(service: Arc<Service>, max_upload_bytes: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model/info", get(info))
        .route("/predict", post(predict))
        .route("/ood", post(ood))
        .route("/explain", post(explain))
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .with_state(service)
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        use xray_core::Error as E;
        let status = match &self {
            ServiceError::Core(E::UnsupportedFormat(_)) => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            ServiceError::Core(E::IncompatibleHead(_)) | ServiceError::Rejected(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::NoGate => StatusCode::CONFLICT,
            ServiceError::Core(
                E::MalformedImage(_) | E::BadClassIndex { .. } | E::InvalidConfig(_),
            )
            | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        if let ServiceError::Rejected(summary) = &self {
            body["ood"] = json!(summary);
        }
        (status, Json(body)).into_response()
    }
}

/// Image bytes from a raw or multipart body.
pub struct Upload(pub Bytes);

impl<S: Send + Sync> FromRequest<S> for Upload {
    type Rejection = Response;

    async fn from_request(req: Request, state: &S) -> Result<Self, Response> {
        let multipart = req
            .headers()
            .get(header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("multipart/form-data"));
        if !multipart {
            let bytes = Bytes::from_request(req, state)
                .await
                .map_err(IntoResponse::into_response)?;
            return Ok(Upload(bytes));
        }
        let mut form = Multipart::from_request(req, state)
            .await
            .map_err(IntoResponse::into_response)?;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(IntoResponse::into_response)?
        {
            if field.file_name().is_some() || matches!(field.name(), Some("image" | "file")) {
                return Ok(Upload(
                    field.bytes().await.map_err(IntoResponse::into_response)?,
                ));
            }
        }
        Err(ServiceError::BadRequest("multipart form has no image field".into()).into_response())
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ServiceError::Core(
            std::io::Error::other(format!("worker failed: {e}")).into(),
        ))
    })
}

async fn health(State(svc): State<Arc<Service>>) -> impl IntoResponse {
    Json(svc.health())
}

async fn info(State(svc): State<Arc<Service>>) -> impl IntoResponse {
    Json(svc.info())
}

async fn predict(
    State(svc): State<Arc<Service>>,
    Upload(body): Upload,
) -> Result<Response, ServiceError> {
    let out = blocking(move || svc.predict(&body)).await?;
    Ok(Json(out).into_response())
}

async fn ood(
    State(svc): State<Arc<Service>>,
    Upload(body): Upload,
) -> Result<Response, ServiceError> {
    let out = blocking(move || svc.ood(&body)).await?;
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ExplainQuery {
    pub class: Option<String>,
    pub method: Option<String>,
    /// `png` (heat layer with alpha), `composite` or `json`.
    pub format: Option<String>,
}

async fn explain(
    State(svc): State<Arc<Service>>,
    Query(q): Query<ExplainQuery>,
    Upload(body): Upload,
) -> Result<Response, ServiceError> {
    let method: Method = q.method.as_deref().unwrap_or("saliency").parse()?;
    let class = svc.class_selector(q.class.as_deref().unwrap_or("all"))?;
    let format = q.format.unwrap_or_else(|| "png".into());
    if !matches!(format.as_str(), "png" | "composite" | "json") {
        return Err(ServiceError::BadRequest(format!(
            "unknown format `{format}`"
        )));
    }
    let ex = blocking(move || svc.explain(&body, class, method)).await?;
    let png = |bytes: Vec<u8>| {
        (
            [
                (header::CONTENT_TYPE, "image/png".to_string()),
                (
                    header::HeaderName::from_static("x-explain-class"),
                    ex.class.clone(),
                ),
            ],
            bytes,
        )
            .into_response()
    };
    Ok(match format.as_str() {
        "png" => png(ex.overlay.heat_png()),
        "composite" => png(ex.overlay.composite_png()),
        _ => Json(json!({
            "method": ex.method,
            "class": ex.class,
            "width": ex.map.width,
            "height": ex.map.height,
            "values": ex.map.values,
        }))
        .into_response(),
    })
}
