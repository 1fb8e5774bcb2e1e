use std::fmt;

/// Pipeline stage an error came from; printed in front of every message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Train,
    Convert,
    SearchPhi,
    SearchRho,
    FitExit,
    Eval,
    Ablate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Convert => "convert",
            Stage::SearchPhi => "search-phi",
            Stage::SearchRho => "search-rho",
            Stage::FitExit => "fit-exit",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Report => "report",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, paths or inputs. Exit code 1.
    User,
    /// A violated internal invariant. Exit code 2.
    Internal,
}

#[derive(Debug)]
pub struct CliError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn user(stage: Stage, message: impl Into<String>) -> Self {
        CliError {
            stage,
            kind: ErrorKind::User,
            message: message.into(),
        }
    }

    pub fn internal(stage: Stage, message: impl Into<String>) -> Self {
        CliError {
            stage,
            kind: ErrorKind::Internal,
            message: message.into(),
        }
    }

    /// Shape and finiteness failures inside the toolkit mean a broken
    /// invariant; everything else traces back to what the user supplied.
    pub fn from_core(stage: Stage, e: adacal::Error) -> Self {
        use adacal::Error as E;
        let kind = match e {
            E::Shape(_) | E::Layer { .. } | E::NonFinite(_) => ErrorKind::Internal,
            _ => ErrorKind::User,
        };
        CliError {
            stage,
            kind,
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::User => 1,
            ErrorKind::Internal => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}

/// Tags core results with the stage they belong to.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError>;
}

impl<T> StageExt<T> for adacal::Result<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_core(stage, e))
    }
}
