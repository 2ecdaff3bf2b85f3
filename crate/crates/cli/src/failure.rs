use std::fmt;

/// Process exit status for a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Config = 1,
    Runtime = 2,
    Eval = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

pub trait Classify<T> {
    fn code(self, code: Code) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn code(self, code: Code) -> CliResult<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

/// Training errors are config errors when the config was rejected up front,
/// runtime errors otherwise.
pub fn training(e: overlap_gan::Error) -> Failure {
    use overlap_gan::Error::*;
    let code = match e {
        InvalidConfig(_) | UnknownScheme(_) | InvalidScheme(_) | UnknownAxis(_) | InvalidArgument(_) | Json(_) => {
            Code::Config
        }
        _ => Code::Runtime,
    };
    Failure { code, error: e.into() }
}
