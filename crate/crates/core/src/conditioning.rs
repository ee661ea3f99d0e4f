//! Structured prompts and their embedding. Replaces a text encoder: a prompt
//! is a handful of typed slots (class, color, context, view bucket, identity
//! token) and its embedding is the sum of the present slots' rows.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Reserved token strings.
pub const NULL_TOKEN: &str = "<null>";
pub const IDENTITY_TOKEN: &str = "[v]";

/// Coarse azimuth bucket used for view-based prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewBucket {
    Front,
    Side,
    Back,
}

impl ViewBucket {
    pub const ALL: [ViewBucket; 3] = [ViewBucket::Front, ViewBucket::Side, ViewBucket::Back];

    pub fn as_str(&self) -> &'static str {
        match self {
            ViewBucket::Front => "front",
            ViewBucket::Side => "side",
            ViewBucket::Back => "back",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(ViewBucket::Front),
            "side" => Ok(ViewBucket::Side),
            "back" => Ok(ViewBucket::Back),
            other => Err(Error::Vocabulary(format!("unknown view bucket {other:?}"))),
        }
    }
}

/// Structured prompt. All slots are optional; at most one identity token by
/// construction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub class: Option<String>,
    pub color: Option<String>,
    pub context: Option<String>,
    pub view: Option<ViewBucket>,
    pub identity: bool,
}

impl Prompt {
    pub fn class(name: &str) -> Self {
        Prompt { class: Some(name.to_string()), ..Default::default() }
    }

    pub fn with_identity(mut self) -> Self {
        self.identity = true;
        self
    }

    pub fn with_view(mut self, view: ViewBucket) -> Self {
        self.view = Some(view);
        self
    }

    pub fn with_color(mut self, color: &str) -> Self {
        self.color = Some(color.to_string());
        self
    }

    pub fn with_context(mut self, context: &str) -> Self {
        self.context = Some(context.to_string());
        self
    }

    /// Parses the CLI/config syntax, e.g.
    /// `"class=dog color=pink context=sleeping id=[v] view=front"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut p = Prompt::default();
        for part in s.split_whitespace() {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("prompt part {part:?} is not key=value")))?;
            match key {
                "class" => p.class = Some(value.to_string()),
                "color" => p.color = Some(value.to_string()),
                "context" => p.context = Some(value.to_string()),
                "view" => p.view = Some(ViewBucket::parse(value)?),
                "id" => {
                    if value != IDENTITY_TOKEN {
                        return Err(Error::Vocabulary(format!(
                            "identity slot only accepts {IDENTITY_TOKEN}, got {value:?}"
                        )));
                    }
                    p.identity = true;
                }
                other => return Err(Error::Input(format!("unknown prompt slot {other:?}"))),
            }
        }
        Ok(p)
    }

    /// Tokens in slot order (class, color, context, view, identity).
    pub fn tokens(&self) -> Vec<&str> {
        let mut out = Vec::new();
        if let Some(c) = &self.class {
            out.push(c.as_str());
        }
        if let Some(c) = &self.color {
            out.push(c.as_str());
        }
        if let Some(c) = &self.context {
            out.push(c.as_str());
        }
        if let Some(v) = &self.view {
            out.push(v.as_str());
        }
        if self.identity {
            out.push(IDENTITY_TOKEN);
        }
        out
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(c) = &self.class {
            parts.push(format!("class={c}"));
        }
        if let Some(c) = &self.color {
            parts.push(format!("color={c}"));
        }
        if let Some(c) = &self.context {
            parts.push(format!("context={c}"));
        }
        if let Some(v) = &self.view {
            parts.push(format!("view={}", v.as_str()));
        }
        if self.identity {
            parts.push(format!("id={IDENTITY_TOKEN}"));
        }
        write!(f, "{}", parts.join(" "))
    }
}

/// Token-to-row mapping. Row 0 is the reserved null embedding, row 1 the
/// identity token; class/color/context/view tokens follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    rows: BTreeMap<String, usize>,
    ordered: Vec<String>,
}

impl Vocabulary {
    pub fn new(classes: &[String], colors: &[String], contexts: &[String]) -> Self {
        let mut ordered = vec![NULL_TOKEN.to_string(), IDENTITY_TOKEN.to_string()];
        ordered.extend(classes.iter().cloned());
        ordered.extend(colors.iter().cloned());
        ordered.extend(contexts.iter().cloned());
        ordered.extend(ViewBucket::ALL.iter().map(|v| v.as_str().to_string()));
        let mut rows = BTreeMap::new();
        for (i, tok) in ordered.iter().enumerate() {
            let prev = rows.insert(tok.clone(), i);
            assert!(prev.is_none(), "duplicate token {tok:?} across slots");
        }
        Vocabulary { rows, ordered }
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row(&self, token: &str) -> Result<usize> {
        self.rows
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown token {token:?}")))
    }

    pub fn identity_row(&self) -> usize {
        1
    }

    pub fn null_row(&self) -> usize {
        0
    }

    /// Rows touched by a prompt, in slot order.
    pub fn prompt_rows(&self, prompt: &Prompt) -> Result<Vec<usize>> {
        prompt.tokens().iter().map(|t| self.row(t)).collect()
    }
}

/// Embedding rows for the whole vocabulary: `vectors` is `[vocab, d]`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub vectors: Tensor,
}

impl EmbeddingTable {
    pub fn init<R: Rng>(vocab: Vocabulary, dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f32).sqrt();
        let vectors = Tensor::randn(&[vocab.len(), dim], scale, rng);
        EmbeddingTable { vocab, vectors }
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    fn row_slice(&self, row: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors.data()[row * d..(row + 1) * d]
    }

    /// Deterministic sum of present-slot embeddings; the empty prompt maps
    /// to the zero vector.
    pub fn encode(&self, prompt: &Prompt) -> Result<Tensor> {
        let d = self.dim();
        let mut out = vec![0.0f32; d];
        for row in self.vocab.prompt_rows(prompt)? {
            for (o, v) in out.iter_mut().zip(self.row_slice(row)) {
                *o += v;
            }
        }
        Tensor::new(vec![d], out)
    }

    pub fn null_embedding(&self) -> Tensor {
        Tensor::from_vec(&[self.dim()], self.row_slice(self.vocab.null_row()).to_vec())
    }

    /// With probability `rate` replaces the conditioning with the reserved
    /// null embedding (classifier-free guidance training).
    pub fn prompt_dropout<R: Rng>(&self, c: Tensor, rate: f32, rng: &mut R) -> Tensor {
        debug_assert!((0.0..1.0).contains(&rate));
        if rate > 0.0 && rng.random::<f32>() < rate {
            self.null_embedding()
        } else {
            c
        }
    }
}

/// Encodes a prompt against an embedding-table tape node, so gradients flow
/// into the touched rows during training. Returns a `[1, d]` var.
pub fn encode_on_tape(tape: &Tape, table: &Var, vocab: &Vocabulary, prompt: &Prompt) -> Result<Var> {
    let d = table.shape()[1];
    let rows = vocab.prompt_rows(prompt)?;
    let mut acc: Option<Var> = None;
    for row in rows {
        let r = table.slice(0, row, 1);
        acc = Some(match acc {
            Some(a) => a.add(&r),
            None => r,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.constant(&Tensor::zeros(&[1, d])),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn table() -> EmbeddingTable {
        let vocab = Vocabulary::new(
            &["dog".into(), "duck".into()],
            &["pink".into(), "teal".into()],
            &["sitting".into()],
        );
        EmbeddingTable::init(vocab, 8, &mut rng::stream(1, "vocab-test"))
    }

    #[test]
    fn empty_prompt_encodes_to_zero() {
        let t = table();
        let c = t.encode(&Prompt::default()).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic() {
        let t = table();
        let p = Prompt::class("dog").with_color("pink").with_view(ViewBucket::Back);
        let a = t.encode(&p).unwrap();
        let b = t.encode(&p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_token_adds_exactly_its_row() {
        let t = table();
        let base = t.encode(&Prompt::class("dog")).unwrap();
        let with_id = t.encode(&Prompt::class("dog").with_identity()).unwrap();
        let row = t.row_slice(t.vocab.identity_row());
        for ((b, w), r) in base.data().iter().zip(with_id.data()).zip(row) {
            assert!((w - b - r).abs() < 1e-7);
        }
    }

    #[test]
    fn unknown_token_is_a_vocabulary_error() {
        let t = table();
        let err = t.encode(&Prompt::class("cat")).unwrap_err();
        assert_eq!(err.category(), "vocabulary");
    }

    #[test]
    fn prompt_parse_roundtrip() {
        let s = "class=dog color=pink context=sitting view=front id=[v]";
        let p = Prompt::parse(s).unwrap();
        assert!(p.identity);
        assert_eq!(Prompt::parse(&p.to_string()).unwrap(), p);
        assert!(Prompt::parse("pose=down").is_err());
    }

    #[test]
    fn dropout_rate_zero_keeps_conditioning() {
        let t = table();
        let c = t.encode(&Prompt::class("dog")).unwrap();
        let mut r = rng::stream(2, "dropout");
        for _ in 0..100 {
            let out = t.prompt_dropout(c.clone(), 0.0, &mut r);
            assert_eq!(out, c);
        }
    }

    #[test]
    fn dropout_near_one_always_nulls() {
        let t = table();
        let c = t.encode(&Prompt::class("dog")).unwrap();
        let null = t.null_embedding();
        let mut r = rng::stream(3, "dropout");
        for _ in 0..50 {
            let out = t.prompt_dropout(c.clone(), 1.0 - 1e-7, &mut r);
            assert_eq!(out, null);
        }
    }

    #[test]
    fn dropout_monte_carlo_rate() {
        let t = table();
        let c = t.encode(&Prompt::class("dog")).unwrap();
        let null = t.null_embedding();
        let mut r = rng::stream(4, "dropout-mc");
        let n = 10_000;
        let mut nulls = 0;
        for _ in 0..n {
            if t.prompt_dropout(c.clone(), 0.1, &mut r) == null {
                nulls += 1;
            }
        }
        let frac = nulls as f32 / n as f32;
        assert!((frac - 0.1).abs() < 0.01, "null fraction {frac}");
    }

    #[test]
    fn tape_encode_matches_host_encode_and_trains_rows() {
        let t = table();
        let p = Prompt::class("duck").with_identity();
        let host = t.encode(&p).unwrap();

        let mut params = crate::autodiff::ParamSet::new();
        let ti = params.add("embed.table", t.vectors.clone());
        let tape = Tape::new();
        let tv = tape.param(&params, ti);
        let c = encode_on_tape(&tape, &tv, &t.vocab, &p).unwrap();
        assert_eq!(c.value().data(), host.data());

        let loss = c.mul(&c).sum();
        tape.backward(&loss);
        tape.accumulate_params(&mut params);
        let g = params.value(ti).grad().unwrap();
        let d = t.dim();
        let duck_row = t.vocab.row("duck").unwrap();
        let pink_row = t.vocab.row("pink").unwrap();
        assert!(g[duck_row * d..(duck_row + 1) * d].iter().any(|&v| v != 0.0));
        assert!(g[pink_row * d..(pink_row + 1) * d].iter().all(|&v| v == 0.0));
    }
}
