use neurosel_core::generator::{GenerationConfig, StopCriterion, StopRule};
use regex::Regex;

use crate::error::{NsError, Result};

/// Stops once the generated text matches a regular expression.
#[derive(Debug, Clone)]
pub struct RegexStop(pub Regex);

impl StopCriterion for RegexStop {
    fn is_satisfied(&self, text: &str) -> bool {
        self.0.is_match(text)
    }
}

/// Compiles the custom stop patterns of `config`, in order.
pub fn compile_stops(config: &GenerationConfig) -> Result<Vec<RegexStop>> {
    config
        .stops
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            StopRule::Custom(p) => Some(
                Regex::new(p)
                    .map(RegexStop)
                    .map_err(|e| NsError::config(format!("generation.stops[{i}].pattern"), e.to_string())),
            ),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regex_stop() {
        let cfg = GenerationConfig {
            max_new_tokens: 4,
            stops: vec![StopRule::Eos, StopRule::Custom(r"Answer: \d+".into())],
        };
        let stops = compile_stops(&cfg).unwrap();
        assert!(stops[0].is_satisfied("so. Answer: 12"));
        assert!(!stops[0].is_satisfied("Answer: x"));
        let bad = GenerationConfig {
            stops: vec![StopRule::Custom("(".into())],
            ..cfg
        };
        assert!(matches!(compile_stops(&bad), Err(NsError::Config { .. })));
    }
}
