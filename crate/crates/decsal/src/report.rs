//! Artifact writers: curves and AUC tables (CSV), explanations, rankings,
//! word-cloud weights and overlap (JSON), game plots (SVG) and highlight
//! pages (XHTML).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use decsal_core::eval::{EvalCurve, Game, OverlapReport};
use decsal_core::{ClassRankings, SaliencyResult, TokenSeq, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// `fraction,accuracy,explainer,game`, one row per curve point.
pub fn curves_csv(curves: &[EvalCurve]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fraction", "accuracy", "explainer", "game"]).map_err(csv_err)?;
    for c in curves {
        for &(f, a) in &c.points {
            w.write_record([f.to_string(), a.to_string(), c.explainer.clone(), c.game.as_str().to_string()])
                .map_err(csv_err)?;
        }
    }
    finish_csv(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub explainer: String,
    pub revealing_auc: f64,
    pub hiding_auc: f64,
}

/// Pairs each explainer's revealing and hiding curves, in first-seen order.
pub fn auc_rows(curves: &[EvalCurve]) -> Result<Vec<AucRow>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by: BTreeMap<(&str, Game), f64> = BTreeMap::new();
    for c in curves {
        if !order.contains(&c.explainer.as_str()) {
            order.push(&c.explainer);
        }
        by.insert((&c.explainer, c.game), c.auc()?);
    }
    order
        .into_iter()
        .map(|e| {
            let get = |g: Game| {
                by.get(&(e, g))
                    .copied()
                    .ok_or_else(|| HarnessError::Data(format!("explainer {e} lacks a {} curve", g.as_str())))
            };
            Ok(AucRow {
                explainer: e.to_string(),
                revealing_auc: get(Game::Revealing)?,
                hiding_auc: get(Game::Hiding)?,
            })
        })
        .collect()
}

/// `explainer,revealing_auc,hiding_auc`: revealing is better when higher,
/// hiding when lower.
pub fn auc_csv(rows: &[AucRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    finish_csv(w)
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Data(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| HarnessError::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenScore {
    pub token: String,
    pub id: usize,
    pub score: f64,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationMeta {
    pub layer: usize,
    pub method: String,
    pub decoder: String,
    pub tau: usize,
    pub predicted_class: usize,
    pub explained_class: usize,
    pub class_prob: f64,
}

/// A [`SaliencyResult`] with token strings, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRecord {
    /// Index of the input in the explained split.
    pub input: usize,
    pub tokens: Vec<TokenScore>,
    pub metadata: ExplanationMeta,
}

impl ExplanationRecord {
    pub fn new(input: usize, r: &SaliencyResult, vocab: &Vocabulary) -> Self {
        let tokens = r
            .token_ids
            .iter()
            .zip(&r.scores)
            .zip(&r.positions)
            .map(|((&id, &score), positions)| TokenScore {
                token: vocab.token(id).unwrap_or("[UNK]").to_string(),
                id,
                score,
                positions: positions.clone(),
            })
            .collect();
        Self {
            input,
            tokens,
            metadata: ExplanationMeta {
                layer: r.layer,
                method: r.method.as_str().to_string(),
                decoder: match r.decoder {
                    decsal_core::Decoder::LmHead => "lm_head".into(),
                    decsal_core::Decoder::Identity => "identity".into(),
                },
                tau: r.tau,
                predicted_class: r.predicted_class,
                explained_class: r.explained_class,
                class_prob: r.class_prob,
            },
        }
    }

    /// Back to the core type.
    pub fn to_result(&self) -> Result<SaliencyResult> {
        let m = &self.metadata;
        Ok(SaliencyResult {
            token_ids: self.tokens.iter().map(|t| t.id).collect(),
            scores: self.tokens.iter().map(|t| t.score).collect(),
            positions: self.tokens.iter().map(|t| t.positions.clone()).collect(),
            layer: m.layer,
            method: decsal_core::Method::parse(&m.method)
                .ok_or_else(|| HarnessError::Data(format!("unknown method {:?}", m.method)))?,
            decoder: match m.decoder.as_str() {
                "lm_head" => decsal_core::Decoder::LmHead,
                "identity" => decsal_core::Decoder::Identity,
                other => return Err(HarnessError::Data(format!("unknown decoder {other:?}"))),
            },
            tau: m.tau,
            predicted_class: m.predicted_class,
            explained_class: m.explained_class,
            class_prob: m.class_prob,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationFile {
    pub explainer: String,
    pub explanations: Vec<ExplanationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedToken {
    pub token: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedToken {
    pub token: String,
    pub weight: f64,
}

/// `{class: [{token, score}]}` with class keys as decimal strings.
pub fn rankings_map(r: &ClassRankings) -> BTreeMap<String, Vec<RankedToken>> {
    r.iter()
        .map(|(c, toks)| {
            (
                c.to_string(),
                toks.iter()
                    .map(|(t, s)| RankedToken {
                        token: t.clone(),
                        score: *s,
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Word-cloud weights `{class: [{token, weight}]}`, top `limit` per class.
pub fn wordcloud_map(r: &ClassRankings, limit: usize) -> BTreeMap<String, Vec<WeightedToken>> {
    r.iter()
        .map(|(c, toks)| {
            (
                c.to_string(),
                toks.iter()
                    .take(limit)
                    .map(|(t, s)| WeightedToken {
                        token: t.clone(),
                        weight: *s,
                    })
                    .collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainerOverlap {
    pub explainer: String,
    pub reports: Vec<OverlapReport>,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Escapes text for XML content and attribute values.
pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Accuracy-versus-fraction plot with one polyline per curve, both axes
/// labelled, and a legend.
pub fn curves_svg(title: &str, curves: &[&EvalCurve]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 180.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |f: f64| left + f * pw;
    let y = |a: f64| top + (1.0 - a) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape_xml(title));
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape_xml(title)
    );
    // axes and ticks
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black" fill="none"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/></g>"#,
        l = left,
        r = left + pw,
        t = top,
        b = top + ph
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#,
            x(v),
            top + ph + 16.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle">fraction of tokens</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c.points.iter().map(|&(f, a)| format!("{:.2},{:.2}", x(f), y(a))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" data-explainer="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape_xml(&c.explainer),
            pts.join(" ")
        );
    }
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = top + 10.0 + i as f64 * 18.0;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape_xml(&c.explainer)
        );
    }
    let _ = writeln!(s, "</g>\n</svg>");
    s
}

/// Min-max normalization; a constant vector maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// One highlighted input: tokens with their per-position scores.
pub struct Highlight<'a> {
    pub seq: &'a TokenSeq,
    pub result: &'a SaliencyResult,
    pub label: Option<usize>,
}

/// XHTML page where each content token's background intensity is its
/// min-max-normalized score within the input.
pub fn highlight_html(title: &str, items: &[Highlight<'_>], vocab: &Vocabulary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<html xmlns="http://www.w3.org/1999/xhtml" xml:lang="en">"#);
    let _ = writeln!(
        s,
        "<head><meta http-equiv=\"Content-Type\" content=\"application/xhtml+xml; charset=UTF-8\"/><title>{}</title>",
        escape_xml(title)
    );
    let _ = writeln!(
        s,
        "<style type=\"text/css\">body {{ font-family: sans-serif; }} p.input {{ line-height: 2; }} span.tok {{ padding: 2px 3px; margin: 1px; border-radius: 3px; }}</style></head>"
    );
    let _ = writeln!(s, "<body>\n<h1>{}</h1>", escape_xml(title));
    for (i, item) in items.iter().enumerate() {
        let n = item.seq.len();
        let scores = item.result.position_scores(n);
        let content = item.seq.content_positions();
        let norm = min_max(&content.iter().map(|&p| scores[p]).collect::<Vec<_>>());
        let label = item.label.map(|l| format!(", label {l}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "<h2>input {i}: predicted {} (p = {:.3}){label}</h2>",
            item.result.predicted_class, item.result.class_prob
        );
        let _ = write!(s, "<p class=\"input\">");
        for (&p, &w) in content.iter().zip(&norm) {
            let tok = vocab.token(item.seq.ids()[p]).unwrap_or("[UNK]");
            let _ = write!(
                s,
                "<span class=\"tok\" title=\"{:.6}\" style=\"background-color: rgba(220, 40, 40, {:.3})\">{}</span> ",
                scores[p],
                w,
                escape_xml(tok)
            );
        }
        let _ = writeln!(s, "</p>");
    }
    let _ = writeln!(s, "</body>\n</html>");
    s
}
