use std::fmt;

use serde::{Deserialize, Serialize};

/// Stable machine-readable error codes. The string form is part of the
/// public error envelope and must not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    NotFound,
    Duplicate,
    DanglingRef,
    IllegalTransition,
    IllegalState,
    NoActivation,
    Expired,
    Rejected,
    Unauthorized,
    Forbidden,
    UnknownCommand,
    AlreadyTerminal,
    NodeOffline,
    Conflict,
    NodeNotFederated,
    BadInterval,
    TooLong,
    NotAuthorized,
    NoImageBinding,
    DeployFailed,
    Capacity,
    NoNamespace,
    TooLarge,
    ChecksumMismatch,
    InvalidCredentials,
    Validation,
    BadFormat,
    BadRequest,
    ScenarioFailed,
    Storage,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::Duplicate => "DUPLICATE",
            ErrorCode::DanglingRef => "DANGLING_REF",
            ErrorCode::IllegalTransition => "ILLEGAL_TRANSITION",
            ErrorCode::IllegalState => "ILLEGAL_STATE",
            ErrorCode::NoActivation => "NO_ACTIVATION",
            ErrorCode::Expired => "EXPIRED",
            ErrorCode::Rejected => "REJECTED",
            ErrorCode::Unauthorized => "UNAUTHORIZED",
            ErrorCode::Forbidden => "FORBIDDEN",
            ErrorCode::UnknownCommand => "UNKNOWN_COMMAND",
            ErrorCode::AlreadyTerminal => "ALREADY_TERMINAL",
            ErrorCode::NodeOffline => "NODE_OFFLINE",
            ErrorCode::Conflict => "CONFLICT",
            ErrorCode::NodeNotFederated => "NODE_NOT_FEDERATED",
            ErrorCode::BadInterval => "BAD_INTERVAL",
            ErrorCode::TooLong => "TOO_LONG",
            ErrorCode::NotAuthorized => "NOT_AUTHORIZED",
            ErrorCode::NoImageBinding => "NO_IMAGE_BINDING",
            ErrorCode::DeployFailed => "DEPLOY_FAILED",
            ErrorCode::Capacity => "CAPACITY",
            ErrorCode::NoNamespace => "NO_NAMESPACE",
            ErrorCode::TooLarge => "TOO_LARGE",
            ErrorCode::ChecksumMismatch => "CHECKSUM_MISMATCH",
            ErrorCode::InvalidCredentials => "INVALID_CREDENTIALS",
            ErrorCode::Validation => "VALIDATION",
            ErrorCode::BadFormat => "BAD_FORMAT",
            ErrorCode::BadRequest => "BAD_REQUEST",
            ErrorCode::ScenarioFailed => "SCENARIO_FAILED",
            ErrorCode::Storage => "STORAGE",
            ErrorCode::Internal => "INTERNAL",
        }
    }

    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::NotFound | ErrorCode::UnknownCommand => 404,
            ErrorCode::Unauthorized | ErrorCode::InvalidCredentials | ErrorCode::Rejected => 401,
            ErrorCode::Forbidden | ErrorCode::NotAuthorized => 403,
            ErrorCode::Duplicate
            | ErrorCode::Conflict
            | ErrorCode::AlreadyTerminal
            | ErrorCode::IllegalTransition
            | ErrorCode::IllegalState
            | ErrorCode::Capacity => 409,
            ErrorCode::Expired => 410,
            ErrorCode::TooLarge => 413,
            ErrorCode::NodeOffline => 503,
            ErrorCode::DeployFailed => 502,
            ErrorCode::Storage | ErrorCode::Internal | ErrorCode::ScenarioFailed => 500,
            _ => 422,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Domain error carried through every control-plane operation.
///
/// `audit_detail` holds a reason that may be recorded in the audit log but
/// must never reach a client (e.g. why an enrollment was rejected).
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct Error {
    pub code: ErrorCode,
    pub message: String,
    pub details: Vec<String>,
    pub audit_detail: Option<&'static str>,
}

impl Error {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Error {
            code,
            message: message.into(),
            details: Vec::new(),
            audit_detail: None,
        }
    }

    pub fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }

    pub fn with_audit_detail(mut self, detail: &'static str) -> Self {
        self.audit_detail = Some(detail);
        self
    }

    pub fn not_found(what: impl fmt::Display) -> Self {
        Error::new(ErrorCode::NotFound, format!("{what} not found"))
    }

    pub fn storage(err: impl fmt::Display) -> Self {
        Error::new(ErrorCode::Storage, err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
