use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use scene_elab::corpus::CorpusError;
use scene_elab::gateway::GatewayError;
use scene_elab::jsonl::JsonlError;
use scene_elab::knn::KnnError;
use scene_elab::metrics::MetricsError;
use scene_elab::probe::ProbeError;
use scene_elab::qa::QaError;
use scene_elab::runs::RunError;
use scene_elab::tasks::TaskError;

/// A failed command, reported on stderr as one JSON object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            kind: kind.into(),
            message: message.into(),
            path: None,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError {
            kind: "io".into(),
            message: format!("{}: {e}", path.display()),
            path: Some(path.to_path_buf()),
        }
    }

    fn at(mut self, path: &Path) -> Self {
        self.path = Some(path.to_path_buf());
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind.as_str() {
            "usage" | "unknown_command" => 2,
            _ => 1,
        }
    }

    pub(crate) fn report(&self) -> i32 {
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), "{}", json!({ "error": self }));
        self.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        let path = match &e {
            JsonlError::Io { path, .. } | JsonlError::Schema { path, .. } => path.clone(),
        };
        let kind = if matches!(e, JsonlError::Io { .. }) {
            "io"
        } else {
            "schema"
        };
        CliError::new(kind, e.to_string()).at(&path)
    }
}

impl From<QaError> for CliError {
    fn from(e: QaError) -> Self {
        match e {
            QaError::Io { ref path, .. } => CliError::new("io", e.to_string()).at(&path.clone()),
            QaError::Schema { ref path, .. } => CliError::new("schema", e.to_string()).at(&path.clone()),
            QaError::Jsonl(j) => j.into(),
            other => CliError::new("usage", other.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Read { ref path, .. } => CliError::new("io", e.to_string()).at(Path::new(path)),
            CorpusError::Jsonl(j) => j.into(),
            CorpusError::UnknownSource(_) => CliError::new("usage", e.to_string()),
            CorpusError::Config(_) => CliError::new("config", e.to_string()),
            other => CliError::new("corpus", other.to_string()),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Io { ref path, .. } => CliError::new("io", e.to_string()).at(&path.clone()),
            RunError::CorruptRegistry { ref path, .. } => CliError::new("io", e.to_string()).at(&path.clone()),
            RunError::Config(_) => CliError::new("config", e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        let kind = if matches!(e, GatewayError::Config(_)) {
            "config"
        } else {
            "gateway"
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Sidecar(j) => j.into(),
            ProbeError::Gateway(g) => g.into(),
            other => CliError::new("probe", other.to_string()),
        }
    }
}

impl From<KnnError> for CliError {
    fn from(e: KnnError) -> Self {
        match e {
            KnnError::Io { ref path, .. } => CliError::new("io", e.to_string()).at(&path.clone()),
            other => CliError::new("knn", other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::new("metrics", e.to_string())
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        CliError::new("task", e.to_string())
    }
}
