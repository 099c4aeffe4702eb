use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PRECONDITION: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

/// A missing or invalid input detected before work starts. `key` names the
/// config key or flag at fault.
#[derive(Debug, Error)]
#[error("{key}: {message}")]
pub struct Precondition {
    pub key: String,
    pub message: String,
}

impl Precondition {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Precondition {
            key: key.into(),
            message: message.into(),
        }
    }
}

/// Process exit code for an error: preconditions map to 2, the rest to 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.downcast_ref::<Precondition>().is_some()) {
        EXIT_PRECONDITION
    } else {
        EXIT_STAGE
    }
}
