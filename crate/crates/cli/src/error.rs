use std::fmt;

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Failure = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ExitKind::Data, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attach context to library errors. Non-finite failures always map to the
/// numeric exit status; everything else gets the caller's classification.
pub trait Context<T> {
    fn context(self, kind: ExitKind, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for isggen_core::Result<T> {
    fn context(self, kind: ExitKind, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| {
            let kind = match e {
                isggen_core::Error::NonFinite(_) => ExitKind::Numeric,
                _ => kind,
            };
            CliError::new(kind, format!("{}: {e}", what()))
        })
    }
}
