//! Model specifications: `markov:seed=7,vocab=64,order=2[,conc=0.3][,temp=1.0]`
//! or `trace:<path>`.

use std::path::PathBuf;

use wmkit::lm::{MarkovSource, NtpSource, NtpTrace, TraceSource};

use crate::error::{runtime, usage, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Markov { seed: u64, vocab: usize, order: usize, concentration: f64, temperature: f64 },
    Trace(PathBuf),
}

pub const DEFAULT_CONCENTRATION: f64 = 0.3;

impl ModelSpec {
    pub fn parse(s: &str) -> CliResult<Self> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| usage(format!("model spec `{s}` lacks a kind")))?;
        match kind {
            "trace" if !rest.is_empty() => Ok(ModelSpec::Trace(PathBuf::from(rest))),
            "markov" => {
                let (mut seed, mut vocab, mut order) = (None, None, None);
                let mut concentration = DEFAULT_CONCENTRATION;
                let mut temperature = 1.0;
                for part in rest.split(',').filter(|p| !p.is_empty()) {
                    let (name, value) =
                        part.split_once('=').ok_or_else(|| usage(format!("bad model parameter `{part}`")))?;
                    let bad = || usage(format!("bad value for `{name}`: `{value}`"));
                    match name {
                        "seed" => seed = Some(value.parse().map_err(|_| bad())?),
                        "vocab" => vocab = Some(value.parse().map_err(|_| bad())?),
                        "order" => order = Some(value.parse().map_err(|_| bad())?),
                        "conc" => concentration = value.parse().map_err(|_| bad())?,
                        "temp" => temperature = value.parse().map_err(|_| bad())?,
                        _ => return Err(usage(format!("unknown model parameter `{name}`"))),
                    }
                }
                Ok(ModelSpec::Markov {
                    seed: seed.ok_or_else(|| usage("markov model needs seed="))?,
                    vocab: vocab.ok_or_else(|| usage("markov model needs vocab="))?,
                    order: order.ok_or_else(|| usage("markov model needs order="))?,
                    concentration,
                    temperature,
                })
            }
            _ => Err(usage(format!("unknown model spec `{s}`"))),
        }
    }

    /// Builds the source. Trace replay starts after `prompt_len` tokens.
    pub fn build(&self, prompt_len: usize) -> CliResult<Box<dyn NtpSource>> {
        match self {
            ModelSpec::Markov { seed, vocab, order, concentration, temperature } => {
                Ok(Box::new(MarkovSource::new(*order, *vocab, *concentration, *seed, *temperature).map_err(usage)?))
            }
            ModelSpec::Trace(path) => {
                let trace = NtpTrace::load(path).map_err(runtime)?;
                Ok(Box::new(TraceSource::new(trace, prompt_len)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_markov_spec() {
        assert_eq!(
            ModelSpec::parse("markov:seed=7,vocab=64,order=2").unwrap(),
            ModelSpec::Markov { seed: 7, vocab: 64, order: 2, concentration: 0.3, temperature: 1.0 }
        );
        assert!(matches!(
            ModelSpec::parse("markov:seed=7,vocab=64,order=2,temp=1.5").unwrap(),
            ModelSpec::Markov { temperature, .. } if temperature == 1.5
        ));
    }

    #[test]
    fn rejects_bad_specs() {
        for s in ["markov:seed=7,vocab=64", "markov:seed=x,vocab=64,order=2", "gpt:big", "trace:", "markov"] {
            assert!(ModelSpec::parse(s).is_err(), "{s}");
        }
    }
}
