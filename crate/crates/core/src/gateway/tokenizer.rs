use std::sync::OnceLock;

use tiktoken_rs::CoreBPE;

/// Pluggable token counter. `name` is reported alongside any estimate.
pub trait TokenCounter: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// The `o200k_base` byte-pair encoding.
#[derive(Debug, Clone, Copy, Default)]
pub struct O200kCounter;

fn o200k() -> &'static CoreBPE {
    static BPE: OnceLock<CoreBPE> = OnceLock::new();
    BPE.get_or_init(|| tiktoken_rs::o200k_base().expect("bundled o200k_base ranks load"))
}

impl TokenCounter for O200kCounter {
    fn name(&self) -> &str {
        "o200k_base"
    }

    fn count(&self, text: &str) -> usize {
        o200k().encode_ordinary(text).len()
    }
}

/// Roughly four characters per token; cheap and dependency-free.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharEstimateCounter;

impl TokenCounter for CharEstimateCounter {
    fn name(&self) -> &str {
        "char-estimate"
    }

    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}
