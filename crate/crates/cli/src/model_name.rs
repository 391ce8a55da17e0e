//! The compact model-naming convention used on the command line and in
//! reports: `sep{M}x{N}-re{M}x{N}[(n)][-l{label}]`, where the optional
//! parenthesized value is the reconstructor depth used at inference
//! (defaulting to the training depth) and the label names a loss
//! configuration.

use anyhow::{bail, Context};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelName {
    pub m_sep: usize,
    pub n_sep: usize,
    pub m_re: usize,
    pub n_re: usize,
    pub inference_n_re: Option<usize>,
    pub loss_label: Option<String>,
}

impl ModelName {
    /// Inference depth, defaulting to the training depth.
    pub fn effective_inference_n_re(&self) -> usize {
        self.inference_n_re.unwrap_or(self.n_re)
    }

    pub fn format(&self) -> String {
        let mut s = format!(
            "sep{}x{}-re{}x{}",
            self.m_sep, self.n_sep, self.m_re, self.n_re
        );
        if let Some(n) = self.inference_n_re {
            s.push_str(&format!("({n})"));
        }
        if let Some(l) = &self.loss_label {
            s.push_str(&format!("-l{l}"));
        }
        s
    }
}

fn parse_pair(part: &str, prefix: &str) -> anyhow::Result<(usize, usize)> {
    let body = part
        .strip_prefix(prefix)
        .with_context(|| format!("expected '{prefix}MxN', got '{part}'"))?;
    let (a, b) = body
        .split_once('x')
        .with_context(|| format!("expected '{prefix}MxN', got '{part}'"))?;
    let a: usize = a.parse().with_context(|| format!("bad count in '{part}'"))?;
    let b: usize = b.parse().with_context(|| format!("bad count in '{part}'"))?;
    if a < 1 || b < 1 {
        bail!("depths in '{part}' must be >= 1");
    }
    Ok((a, b))
}

/// Parses `sep{a}x{b}-re{c}x{d}[(e)][-l{label}]`.
pub fn parse_model_name(text: &str) -> anyhow::Result<ModelName> {
    let text = text.trim();
    let (sep_part, rest) = text
        .split_once('-')
        .with_context(|| format!("expected 'sepMxN-reMxN...', got '{text}'"))?;
    let (m_sep, n_sep) = parse_pair(sep_part, "sep")?;

    // Split the optional "-l..." suffix off the re part.
    let (re_full, loss_label) = match rest.split_once("-l") {
        Some((re, label)) => {
            if label.is_empty() {
                bail!("empty loss label in '{text}'");
            }
            (re, Some(label.to_string()))
        }
        None => (rest, None),
    };
    let (re_core, inference_n_re) = match re_full.split_once('(') {
        Some((core, tail)) => {
            let inner = tail
                .strip_suffix(')')
                .with_context(|| format!("unclosed parenthesis in '{text}'"))?;
            let n: usize = inner
                .trim()
                .parse()
                .with_context(|| format!("bad inference depth in '{text}'"))?;
            if n < 1 {
                bail!("inference depth must be >= 1");
            }
            (core, Some(n))
        }
        None => (re_full, None),
    };
    let (m_re, n_re) = parse_pair(re_core.trim(), "re")?;
    Ok(ModelName {
        m_sep,
        n_sep,
        m_re,
        n_re,
        inference_n_re,
        loss_label,
    })
}
