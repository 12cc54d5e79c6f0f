use std::fmt;

/// Failure classes mapped onto exit codes 1, 2 and 3.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
    Assertion(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Assertion(_) => 3,
        }
    }

    /// Converts a library error raised while handling config block `block`,
    /// qualifying validation keys with the block name.
    pub fn within(block: &str) -> impl Fn(gradlab::Error) -> CliError + '_ {
        move |e| match e {
            gradlab::Error::Validation { key, message } => {
                let key = if key.contains('.') { key } else { format!("{block}.{key}") };
                CliError::Validation(format!("config key `{key}`: {message}"))
            }
            other => other.into(),
        }
    }
}

impl From<gradlab::Error> for CliError {
    fn from(e: gradlab::Error) -> Self {
        match e {
            gradlab::Error::Validation { key, message } => {
                CliError::Validation(format!("config key `{key}`: {message}"))
            }
            gradlab::Error::Assertion(m) => CliError::Assertion(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Numerical(format!("i/o: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Assertion(m) => write!(f, "check failed: {m}"),
        }
    }
}
