use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid task spec: {0}")]
    InvalidTaskSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("behavior log-probability {value} at rollout {rollout}, token {token} is positive")]
    PositiveBehaviorLogp {
        rollout: usize,
        token: usize,
        value: f64,
    },

    #[error("replay buffer is empty")]
    EmptyReplayBuffer,

    #[error("invalid record at line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("unknown metric `{0}` (expected effective_query_ratio, mean_reward or rethinking_ratio)")]
    UnknownMetric(String),

    #[error("{0}")]
    Invariant(String),

    #[error("cannot export an empty log")]
    EmptyLog,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
