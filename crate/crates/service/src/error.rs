use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use pooltest::Error;
use serde_json::json;

use crate::state::JobStatus;

/// Everything a handler can bail out with. `Pending` is not a failure: it
/// answers 202 while a zone map is still being computed.
#[derive(Debug)]
pub enum ApiError {
    Core(Error),
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Pending(JobStatus),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

impl ApiError {
    fn parts(&self) -> (StatusCode, &'static str, String) {
        match self {
            ApiError::Core(e) => {
                let (status, code) = match e {
                    Error::SizeMismatch { .. } => (StatusCode::BAD_REQUEST, "size_mismatch"),
                    Error::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
                    Error::PriorOutOfRange { .. } => (StatusCode::BAD_REQUEST, "prior_out_of_range"),
                    Error::Malformed { .. } | Error::InvalidProcedure(_) => {
                        (StatusCode::BAD_REQUEST, "invalid_procedure")
                    }
                    Error::Json(_) => (StatusCode::BAD_REQUEST, "invalid_json"),
                    Error::UnsupportedSize { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "unsupported_size"),
                    Error::ResourceExhausted(_) => (StatusCode::UNPROCESSABLE_ENTITY, "resource_exhausted"),
                    Error::MissingZoneMap(_) => (StatusCode::NOT_FOUND, "missing_zone_map"),
                    Error::SessionComplete => (StatusCode::CONFLICT, "session_complete"),
                    Error::CorruptZoneMap(_) | Error::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
                };
                (status, code, e.to_string())
            }
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m.clone()),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m.clone()),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, "conflict", m.clone()),
            ApiError::Pending(_) => (StatusCode::ACCEPTED, "pending", String::new()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m.clone()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Pending(status) = self {
            return (StatusCode::ACCEPTED, Json(status)).into_response();
        }
        let (status, code, message) = self.parts();
        if status.is_server_error() {
            tracing::error!(%message, "request failed");
        }
        (status, Json(json!({ "error": { "code": code, "message": message } }))).into_response()
    }
}
