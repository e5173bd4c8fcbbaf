//! Attention heatmaps as HTML or ANSI-shaded text.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_context, encode_text, tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    /// Attention weight divided by the largest weight on the same side.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDocument {
    pub variant: String,
    pub score: f64,
    pub context: Vec<TokenWeight>,
    pub response: Vec<TokenWeight>,
}

/// Pairs tokens with weights rescaled so the largest becomes 1.
pub fn normalize(tokens: &[String], weights: &[f64]) -> Vec<TokenWeight> {
    let max = weights.iter().cloned().fold(0.0, f64::max);
    tokens
        .iter()
        .zip(weights)
        .map(|(t, &w)| TokenWeight {
            token: t.clone(),
            weight: if max > 0.0 { w / max } else { 0.0 },
        })
        .collect()
}

impl HeatmapDocument {
    /// Attention of `model` over one context/response pair. Tokens beyond
    /// the model's length limit are cut the same way encoding cuts them.
    pub fn build(model: &Model, vocab: &Vocabulary, context: &str, response: &str) -> Result<Self> {
        if context.trim().is_empty() || response.trim().is_empty() {
            return Err(Error::InvalidArgument("context and response must be non-empty".into()));
        }
        let max_len = model.config.encoder.max_len;
        let ctx_tokens = tokenize(context);
        let ctx_tokens = ctx_tokens[ctx_tokens.len().saturating_sub(max_len)..].to_vec();
        let resp_tokens: Vec<String> = tokenize(response).into_iter().take(max_len).collect();
        let x = encode_context(&[context.to_string()], vocab, max_len)?;
        let y = encode_text(response, vocab, max_len)?;
        let att = model.attention(&x, &y)?;
        let score = model.score(&x, &y)?;
        Ok(Self {
            variant: model.variant().to_string(),
            score,
            context: normalize(&ctx_tokens, &att.a_x[..x.len()]),
            response: normalize(&resp_tokens, &att.a_y[..y.len()]),
        })
    }

    pub fn to_html(&self) -> String {
        let mut out = String::from(
            "<!DOCTYPE html>\n<html>\n<head><meta charset=\"utf-8\"><title>attention</title></head>\n<body>\n",
        );
        writeln!(out, "<p>{} score {:.6}</p>", escape(&self.variant), self.score).unwrap();
        for (class, tokens) in [("context", &self.context), ("response", &self.response)] {
            write!(out, "<div class=\"{class}\">").unwrap();
            for (i, t) in tokens.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(
                    out,
                    "<span style=\"background-color: rgba(200, 30, 30, {:.6})\">{}</span>",
                    t.weight,
                    escape(&t.token)
                )
                .unwrap();
            }
            out.push_str("</div>\n");
        }
        out.push_str("</body>\n</html>\n");
        out
    }

    pub fn to_ansi(&self) -> String {
        let mut out = format!("{} score {:.6}\n", self.variant, self.score);
        for (label, tokens) in [("context ", &self.context), ("response", &self.response)] {
            out.push_str(label);
            for t in tokens {
                write!(out, " \x1b[48;5;{}m{}\x1b[0m", SHADES[shade_level(t.weight)], t.token).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Background colours from lightest to darkest.
const SHADES: [u8; 8] = [231, 224, 217, 210, 203, 196, 160, 124];

/// One of 8 levels for a weight in `[0, 1]`.
pub fn shade_level(weight: f64) -> usize {
    ((weight.clamp(0.0, 1.0) * 8.0) as usize).min(7)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(ctx: &[(&str, f64)], resp: &[(&str, f64)]) -> HeatmapDocument {
        let mk = |v: &[(&str, f64)]| {
            let tokens: Vec<String> = v.iter().map(|(t, _)| t.to_string()).collect();
            let w: Vec<f64> = v.iter().map(|(_, w)| *w).collect();
            normalize(&tokens, &w)
        };
        HeatmapDocument { variant: "ADE".into(), score: 0.5, context: mk(ctx), response: mk(resp) }
    }

    #[test]
    fn normalisation_maps_max_to_one() {
        let d = doc(&[("a", 0.2), ("b", 0.5), ("c", 0.3)], &[("x", 1.0)]);
        let w: Vec<f64> = d.context.iter().map(|t| t.weight).collect();
        assert_eq!(w, vec![0.4, 1.0, 0.6]);
        assert_eq!(d.response[0].weight, 1.0);
        let flat = doc(&[("a", 0.25), ("b", 0.25)], &[("x", 1.0)]);
        assert!(flat.context.iter().all(|t| t.weight == 1.0));
    }

    #[test]
    fn html_has_one_span_per_token_and_balanced_tags() {
        let d = doc(&[("a", 0.2), ("<b>", 0.5)], &[("x", 1.0), ("y", 0.1), ("z", 0.1)]);
        let html = d.to_html();
        assert_eq!(html.matches("<span").count(), 5);
        assert_eq!(html.matches("</span>").count(), 5);
        assert_eq!(html.matches("<div").count(), html.matches("</div>").count());
        assert!(html.contains("&lt;b&gt;"));
        assert!(html.contains("rgba(200, 30, 30, 0.400000)"));
    }

    #[test]
    fn ansi_levels() {
        assert_eq!(shade_level(0.0), 0);
        assert_eq!(shade_level(0.124), 0);
        assert_eq!(shade_level(0.5), 4);
        assert_eq!(shade_level(1.0), 7);
        let d = doc(&[("a", 1.0)], &[("x", 1.0)]);
        assert!(d.to_ansi().contains("\x1b[48;5;124ma\x1b[0m"));
    }
}
