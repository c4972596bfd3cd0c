//! Standalone HTML rendering of a rationale: one color class per concept,
//! a legend with presence and contribution, escaped text throughout.
//!
//! Overlapping spans layer their classes on one token; the stylesheet lists
//! concept classes in index order, so the highest concept index paints last
//! and wins the background.

use crate::error::{Error, Result};
use crate::inference::Rationale;

/// Background colors cycled by concept index.
const PALETTE: [&str; 8] = [
    "#ffd9a8", "#b5e3b5", "#c2d4f5", "#f2c2dd", "#d9c2f0", "#c2ecec", "#e8e3a8", "#e3c2ad",
];

pub fn concept_color(concept: usize) -> &'static str {
    PALETTE[concept % PALETTE.len()]
}

/// Replace HTML-significant characters with entities.
pub fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
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

/// Render one document and its rationale as a complete HTML page. Token
/// positions in the rationale are 1-indexed inclusive and must fit inside
/// `tokens`.
pub fn render_html(rationale: &Rationale, tokens: &[String]) -> Result<String> {
    for c in &rationale.concepts {
        if c.start == 0 || c.end < c.start || c.end > tokens.len() {
            return Err(Error::Bounds {
                what: "rationale span end",
                value: c.end,
                min: c.start.max(1),
                max: tokens.len(),
            });
        }
    }

    let mut page = String::new();
    page.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    page.push_str("<title>rationale</title>\n<style>\n");
    page.push_str("body { font-family: sans-serif; margin: 2em; line-height: 1.8; }\n");
    page.push_str(".legend span { padding: 2px 6px; margin-right: 8px; }\n");
    for c in &rationale.concepts {
        page.push_str(&format!(
            ".c{} {{ background: {}; padding: 1px 2px; }}\n",
            c.concept,
            concept_color(c.concept)
        ));
    }
    page.push_str("</style>\n</head>\n<body>\n");

    page.push_str(&format!(
        "<p>prediction: class {} (p = {:.4})</p>\n",
        rationale.predicted_label, rationale.predicted_prob
    ));
    page.push_str("<div class=\"legend\">\n");
    for c in &rationale.concepts {
        page.push_str(&format!(
            "<span class=\"c{}\">concept {}: tokens {}&#8211;{}, presence {:.2}, contribution {:+.4}</span>\n",
            c.concept, c.concept, c.start, c.end, c.presence, c.contribution
        ));
    }
    page.push_str("</div>\n<p class=\"doc\">\n");

    for (t, token) in tokens.iter().enumerate() {
        let pos = t + 1;
        let classes: Vec<String> = rationale
            .concepts
            .iter()
            .filter(|c| pos >= c.start && pos <= c.end)
            .map(|c| format!("c{}", c.concept))
            .collect();
        if classes.is_empty() {
            page.push_str(&escape_html(token));
        } else {
            page.push_str(&format!(
                "<span class=\"{}\">{}</span>",
                classes.join(" "),
                escape_html(token)
            ));
        }
        if t + 1 < tokens.len() {
            page.push(' ');
        }
    }
    page.push_str("\n</p>\n</body>\n</html>\n");
    Ok(page)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::ConceptRationale;
    use crate::rng::{rng_for, Stream};
    use rand::Rng;

    fn rationale(concepts: Vec<(usize, usize, usize)>) -> Rationale {
        Rationale {
            concepts: concepts
                .into_iter()
                .map(|(concept, start, end)| ConceptRationale {
                    concept,
                    start,
                    end,
                    presence: 1.0,
                    contribution: 0.5,
                })
                .collect(),
            predicted_label: 1,
            predicted_prob: 0.9,
        }
    }

    /// Minimal well-formedness check: tags balance, attributes are quoted,
    /// and no stray `<` or unescaped `&` survives in text nodes.
    fn assert_well_formed(html: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = html;
        if let Some(after) = rest.strip_prefix("<!DOCTYPE html>") {
            rest = after;
        }
        while let Some(open) = rest.find('<') {
            let text = &rest[..open];
            assert!(!text.contains('>'), "stray > in text: {text:?}");
            for (i, _) in text.match_indices('&') {
                let tail = &text[i..];
                assert!(
                    ["&amp;", "&lt;", "&gt;", "&quot;", "&#39;", "&#8211;"]
                        .iter()
                        .any(|e| tail.starts_with(e)),
                    "unescaped & in text: {tail:?}"
                );
            }
            let close = rest[open..].find('>').expect("unterminated tag") + open;
            let tag = &rest[open + 1..close];
            assert!(!tag.contains('<'), "nested < in tag {tag:?}");
            if let Some(name) = tag.strip_prefix('/') {
                let top = stack.pop().unwrap_or_else(|| panic!("orphan </{name}>"));
                assert_eq!(top, name, "mismatched close tag");
            } else if !tag.ends_with('/') && !tag.starts_with("meta") {
                let name: String = tag
                    .chars()
                    .take_while(|c| c.is_ascii_alphanumeric())
                    .collect();
                stack.push(name);
            }
            rest = &rest[close + 1..];
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    fn to_tokens(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| (*w).to_string()).collect()
    }

    #[test]
    fn single_concept_wraps_its_span() {
        let tokens = to_tokens(&["a", "b", "c", "d"]);
        let html = render_html(&rationale(vec![(0, 1, 3)]), &tokens).unwrap();
        assert!(html.contains("<span class=\"c0\">a</span>"));
        assert!(html.contains("<span class=\"c0\">c</span>"));
        assert!(!html.contains("<span class=\"c0\">d</span>"));
        assert!(html.contains(".c0 { background:"));
        assert_well_formed(&html);
    }

    #[test]
    fn overlapping_concepts_layer_classes() {
        let tokens = to_tokens(&["t0", "t1", "t2", "t3", "t4"]);
        let html = render_html(&rationale(vec![(0, 1, 3), (2, 3, 5)]), &tokens).unwrap();
        assert!(html.contains("<span class=\"c0 c2\">t2</span>"));
        // Stylesheet order follows concept index, so c2 paints over c0.
        let c0_at = html.find(".c0 {").unwrap();
        let c2_at = html.find(".c2 {").unwrap();
        assert!(c0_at < c2_at);
        assert_well_formed(&html);
    }

    #[test]
    fn pruned_out_concepts_never_appear() {
        let tokens = to_tokens(&["x", "y", "z"]);
        // A rationale built under pruning only lists kept concepts.
        let html = render_html(&rationale(vec![(1, 2, 3)]), &tokens).unwrap();
        assert!(!html.contains("c0"));
        assert!(html.contains("concept 1"));
        assert_well_formed(&html);
    }

    #[test]
    fn markup_in_tokens_is_escaped() {
        let tokens = to_tokens(&["<script>", "a&b", "\"quote'", "plain"]);
        let html = render_html(&rationale(vec![(0, 1, 2)]), &tokens).unwrap();
        assert!(html.contains("&lt;script&gt;"));
        assert!(html.contains("a&amp;b"));
        assert!(!html.contains("<script>"));
        assert_well_formed(&html);
    }

    #[test]
    fn fuzzed_tokens_render_well_formed() {
        let mut rng = rng_for(23, Stream::Direct(43));
        let alphabet: Vec<char> = "<>&\"' abAB\u{1}\u{7f}\n\t=/".chars().collect();
        for trial in 0..200 {
            let n: usize = rng.random_range(1..12);
            let tokens: Vec<String> = (0..n)
                .map(|_| {
                    let len = rng.random_range(0..6);
                    (0..len)
                        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                        .collect()
                })
                .collect();
            let spans = match trial % 3 {
                0 => vec![],
                1 => vec![(0, 1, n)],
                _ => vec![(0, 1, n.div_ceil(2)), (1, n.div_ceil(2), n)],
            };
            let html = render_html(&rationale(spans), &tokens).unwrap();
            assert_well_formed(&html);
        }
    }

    #[test]
    fn out_of_bounds_spans_are_rejected() {
        let tokens = to_tokens(&["a", "b"]);
        assert!(render_html(&rationale(vec![(0, 1, 3)]), &tokens).is_err());
        assert!(render_html(&rationale(vec![(0, 0, 1)]), &tokens).is_err());
        assert!(render_html(&rationale(vec![(0, 2, 1)]), &tokens).is_err());
    }
}
