use std::io;

use crate::protocol::{ErrorCode, ProtocolError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt state: {0}")]
    CorruptState(String),

    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A peer answered with an error frame.
    #[error("{code}: {reason}")]
    Remote { code: ErrorCode, reason: String },

    #[error("peer disconnected")]
    Disconnected,

    #[error("timed out: {0}")]
    Timeout(String),

    /// API misuse on the client side (call outside init..finalize, duplicate ids).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn remote(code: ErrorCode, reason: impl Into<String>) -> Self {
        Error::Remote {
            code,
            reason: reason.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// The error code a remote peer reported, if any.
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            Error::Remote { code, .. } => Some(*code),
            _ => None,
        }
    }

    /// Errors after which retrying against a refreshed endpoint can succeed.
    pub fn is_transport(&self) -> bool {
        match self {
            Error::Io(_) | Error::Disconnected => true,
            Error::Remote { code, .. } => *code == ErrorCode::Moved,
            _ => false,
        }
    }

    /// Code to put on the wire when this error is reported to a peer.
    pub fn wire_code(&self) -> ErrorCode {
        match self {
            Error::InvalidArgument(_) => ErrorCode::InvalidArgument,
            Error::CorruptState(_) | Error::Verification(_) => ErrorCode::Integrity,
            Error::Protocol(_) => ErrorCode::Protocol,
            Error::Io(_) => ErrorCode::Storage,
            Error::Remote { code, .. } => *code,
            Error::Timeout(_) => ErrorCode::Timeout,
            _ => ErrorCode::Internal,
        }
    }

    /// Error message to report to a peer, without the code prefix of a remote error.
    pub fn wire_reason(&self) -> String {
        match self {
            Error::Remote { reason, .. } => reason.clone(),
            e => e.to_string(),
        }
    }

    pub fn to_wire(&self) -> crate::protocol::Message {
        crate::protocol::Message::error(self.wire_code(), self.wire_reason())
    }
}
