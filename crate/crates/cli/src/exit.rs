use std::fmt;
use std::process::ExitCode;

use rescbam::Error;

/// Process exit status; the numeric values are a stable contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Usage = 1,
    Data = 2,
    CheckFailed = 3,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self {
            status: Status::Usage,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self {
            status: Status::Data,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn check(msg: impl fmt::Display) -> Self {
        Self {
            status: Status::CheckFailed,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSpec(_) => Status::Usage,
            _ => Status::Data,
        };
        Self {
            status,
            error: e.into(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            status: Status::Data,
            error: e.into(),
        }
    }
}

pub trait Context<T> {
    /// Adds a leading message while keeping the status.
    fn context(self, msg: impl fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, msg: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| {
            let f: Failure = e.into();
            Failure {
                status: f.status,
                error: f.error.context(msg.to_string()),
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_stable_codes() {
        assert_eq!(Failure::from(Error::Config("x".into())).status as u8, 1);
        assert_eq!(Failure::from(Error::Data("x".into())).status as u8, 2);
        assert_eq!(Failure::from(Error::Parse { line: 1, msg: "x".into() }).status as u8, 2);
        assert_eq!(Failure::check("x").status as u8, 3);
        let f = Err::<(), _>(Error::Data("inner".into())).context("outer").unwrap_err();
        assert_eq!(f.status, Status::Data);
        assert_eq!(format!("{:#}", f.error), "outer: data: inner");
    }
}
