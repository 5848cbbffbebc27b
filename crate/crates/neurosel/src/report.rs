use neurosel_core::eval::EvalReport;
use serde::{Deserialize, Serialize};

use crate::files::sha256_hex;

pub const TOOLCHAIN: &str = concat!("neurosel ", env!("CARGO_PKG_VERSION"));
/// How prompt text becomes model input, for capture and generation alike.
pub const PROMPT_TEMPLATE: &str = "<bos>{text}";

/// An evaluation report as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub toolchain: String,
    pub toolchain_hash: String,
    pub config_hash: Option<String>,
    pub model_hash: String,
    pub prompt_template: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

impl ReportFile {
    pub fn new(report: EvalReport, model_hash: String, config_hash: Option<String>) -> Self {
        Self {
            toolchain: TOOLCHAIN.into(),
            toolchain_hash: sha256_hex(TOOLCHAIN.as_bytes()),
            config_hash,
            model_hash,
            prompt_template: PROMPT_TEMPLATE.into(),
            report,
        }
    }
}
