use std::fmt;

/// Command failure, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments: exit 2.
    Config(String),
    Core(sosconv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use sosconv::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::Parameter(_)) => 2,
            CliError::Core(E::Singular(_) | E::Numerical(_)) => 4,
            CliError::Core(_) => 3,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Core(sosconv::Error::Data(msg.into()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<sosconv::Error> for CliError {
    fn from(e: sosconv::Error) -> Self {
        CliError::Core(e)
    }
}
