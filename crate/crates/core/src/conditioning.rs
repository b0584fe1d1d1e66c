//! Prompt templates and splicing of pseudo words into the text path.

use std::ops::Range;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::DTYPE;
use crate::text::{pieces, Tokenizer, PLACEHOLDER};
use crate::{Error, Result};

/// Placeholder used by dataset-generation templates.
pub const NAME_PLACEHOLDER: &str = "<celebrity-name>";

/// Neutral prompt for reconstruction samples.
pub const RECONSTRUCTION_TEMPLATE: &str = "a photo of S* face";

/// Prompt that produces the identity face of a name.
pub const SOURCE_FACE_TEMPLATE: &str = "<celebrity-name> face, looking at the camera";

/// Default editing prompts (the wizard prompt appears twice in the list).
pub const DEFAULT_EDIT_TEMPLATES: [&str; 9] = [
    "Oil painting style, S* face",
    "Watercolor style, S* face",
    "Pencil art style, S* face",
    "Fauvism painting, S* face",
    "S* as a wizard, looking at the camera",
    "S* as a wizard, looking at the camera",
    "S* wearing a hat, looking at the camera",
    "S* as a chef, looking at the camera",
    "S* as a nurse, looking at the camera",
];

/// Word substituted for the placeholder when scoring text alignment.
pub const ALIGNMENT_WORD: &str = "face";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    Reconstruction,
    Editing,
}

/// A prompt with exactly one `S*` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTemplate {
    text: String,
    role: PromptRole,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>, role: PromptRole) -> Result<Self> {
        let text = text.into();
        let n = pieces(&text).iter().filter(|p| *p == PLACEHOLDER).count();
        if n != 1 {
            return Err(Error::Template(format!(
                "{text:?} has {n} occurrences of {PLACEHOLDER}, expected exactly one"
            )));
        }
        Ok(Self { text, role })
    }

    pub fn reconstruction() -> Self {
        Self::new(RECONSTRUCTION_TEMPLATE, PromptRole::Reconstruction)
            .expect("built-in template is valid")
    }

    pub fn editing(text: impl Into<String>) -> Result<Self> {
        Self::new(text, PromptRole::Editing)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }

    /// The prompt with `S*` replaced by a class word, for text-image scoring.
    pub fn alignment_text(&self) -> String {
        self.text.replace(PLACEHOLDER, ALIGNMENT_WORD)
    }
}

/// Word-embedding sequence with `k` pseudo words spliced in at `span`.
#[derive(Debug, Clone)]
pub struct ConditioningSequence {
    embeddings: Tensor,
    span: Range<usize>,
}

impl ConditioningSequence {
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions occupied by the pseudo words; empty for plain prompts.
    pub fn injection_span(&self) -> Range<usize> {
        self.span.clone()
    }
}

/// Word-level view of a frozen text encoder.
pub trait TextEmbedder {
    fn tokenizer(&self) -> &Tokenizer;
    /// `(L, d_text)` rows of the embedding table.
    fn embed_ids(&self, ids: &[u32]) -> Result<Tensor>;
    fn text_dim(&self) -> usize;
    fn max_text_len(&self) -> usize;
}

/// Embeds `template` and replaces its placeholder slot with `words`
/// (`(k, d_text)`), in order.
pub fn assemble_conditioning(
    text: &dyn TextEmbedder,
    template: &PromptTemplate,
    words: &Tensor,
) -> Result<ConditioningSequence> {
    let (k, d) = words.dims2()?;
    if d != text.text_dim() {
        return Err(Error::Config(format!(
            "pseudo words are {d} wide, text encoder expects {}",
            text.text_dim()
        )));
    }
    if k == 0 {
        return Err(Error::Config("no pseudo words to inject".into()));
    }
    let tok = text.tokenizer();
    let ids = tok.encode(template.text());
    let slots: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == tok.placeholder_id())
        .map(|(i, _)| i)
        .collect();
    let [at] = slots[..] else {
        return Err(Error::Template(format!(
            "{:?} tokenizes to {} placeholders",
            template.text(),
            slots.len()
        )));
    };
    let len = ids.len() - 1 + k;
    if len > text.max_text_len() {
        return Err(Error::Truncation {
            len,
            max: text.max_text_len(),
        });
    }
    let mut parts = Vec::with_capacity(3);
    if at > 0 {
        parts.push(text.embed_ids(&ids[..at])?);
    }
    parts.push(words.clone());
    if at + 1 < ids.len() {
        parts.push(text.embed_ids(&ids[at + 1..])?);
    }
    Ok(ConditioningSequence {
        embeddings: Tensor::cat(&parts, 0)?,
        span: at..at + k,
    })
}

/// Conditioning for a prompt without pseudo words (names, the empty prompt).
pub fn plain_conditioning(text: &dyn TextEmbedder, prompt: &str) -> Result<ConditioningSequence> {
    let ids = text.tokenizer().encode(prompt);
    if ids.len() > text.max_text_len() {
        return Err(Error::Truncation {
            len: ids.len(),
            max: text.max_text_len(),
        });
    }
    Ok(ConditioningSequence {
        embeddings: text.embed_ids(&ids)?,
        span: 0..0,
    })
}

/// Right-padded batch of conditioning sequences.
#[derive(Debug, Clone)]
pub struct CondBatch {
    /// `(B, L, d_text)`
    pub embeddings: Tensor,
    /// `(B, L)`, 1 at real positions.
    pub mask: Tensor,
}

impl CondBatch {
    pub fn new(seqs: &[&ConditioningSequence]) -> Result<Self> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Shape("empty conditioning batch".into()))?;
        let d = first.embeddings.dims()[1];
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len() * max_len);
        for s in seqs {
            let l = s.len();
            if s.embeddings.dims()[1] != d {
                return Err(Error::Shape("conditioning widths differ within a batch".into()));
            }
            let row = if l < max_len {
                let pad = Tensor::zeros((max_len - l, d), DTYPE, &Device::Cpu)?;
                Tensor::cat(&[&s.embeddings, &pad], 0)?
            } else {
                s.embeddings.clone()
            };
            rows.push(row);
            mask.extend((0..max_len).map(|i| if i < l { 1.0 } else { 0.0 }));
        }
        Ok(Self {
            embeddings: Tensor::stack(&rows, 0)?,
            mask: Tensor::from_vec(mask, (seqs.len(), max_len), &Device::Cpu)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.embeddings.dims()[0]
    }
}

/// Replaces the template's placeholder (`<celebrity-name>` or `S*`) with a
/// literal name in one pass.
pub fn render_prompt(template: &str, name: &str) -> Result<String> {
    if name.trim().is_empty() {
        return Err(Error::Template("empty name".into()));
    }
    if template.contains(NAME_PLACEHOLDER) {
        Ok(template.replace(NAME_PLACEHOLDER, name))
    } else if template.contains(PLACEHOLDER) {
        Ok(template.replace(PLACEHOLDER, name))
    } else {
        Err(Error::Template(format!("{template:?} has no placeholder")))
    }
}

/// Canonical `S*` form of a template written with either placeholder.
pub fn placeholder_form(template: &str) -> String {
    template.replace(NAME_PLACEHOLDER, PLACEHOLDER)
}

/// Template file: one template per line; blank lines and `#` comments are
/// skipped. Every template must carry a placeholder.
pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading templates {}", path.display()), e))?;
    parse_templates(&text)
}

pub fn parse_templates(text: &str) -> Result<Vec<String>> {
    let templates: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if templates.is_empty() {
        return Err(Error::Template("template file has no templates".into()));
    }
    for t in &templates {
        PromptTemplate::editing(placeholder_form(t))?;
    }
    Ok(templates)
}

pub fn default_templates_file() -> String {
    let mut s = DEFAULT_EDIT_TEMPLATES.join("\n");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{TextConfig, TextEncoder};
    use crate::nn::ParamStore;

    struct Toy {
        tok: Tokenizer,
        enc: TextEncoder,
        _store: ParamStore,
    }

    impl Toy {
        fn new(max_len: usize) -> Self {
            let tok = Tokenizer::with_names(&["Ada Vell"]);
            let store = ParamStore::seeded(1, false);
            let cfg = TextConfig {
                max_len,
                ..TextConfig::default()
            };
            let enc = TextEncoder::new(store.root(), &cfg, tok.vocab_size()).unwrap();
            Self {
                tok,
                enc,
                _store: store,
            }
        }
    }

    impl TextEmbedder for Toy {
        fn tokenizer(&self) -> &Tokenizer {
            &self.tok
        }
        fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
            self.enc.embed_ids(ids)
        }
        fn text_dim(&self) -> usize {
            self.enc.dim()
        }
        fn max_text_len(&self) -> usize {
            self.enc.config().max_len
        }
    }

    fn words(k: usize, fill: f64) -> Tensor {
        Tensor::full(fill, (k, 32), &Device::Cpu).unwrap()
    }

    #[test]
    fn template_needs_exactly_one_placeholder() {
        assert!(PromptTemplate::editing("a photo").is_err());
        assert!(PromptTemplate::editing("S* and S*").is_err());
        assert!(PromptTemplate::editing("S* as a chef").is_ok());
    }

    #[test]
    fn splice_length_and_span() {
        let toy = Toy::new(24);
        // <bos> S* as a chef <eos> plus 2 more tokens = 7 slots
        let t = PromptTemplate::editing("S* as a chef , looking").unwrap();
        assert_eq!(toy.tok.encode(t.text()).len(), 8);
        let c = assemble_conditioning(&toy, &t, &words(2, 0.5)).unwrap();
        assert_eq!(c.len(), 9);
        assert_eq!(c.injection_span(), 1..3);
        let c1 = assemble_conditioning(&toy, &t, &words(1, 0.5)).unwrap();
        assert_eq!(c1.len(), 8);
    }

    #[test]
    fn overflow_is_an_error_not_a_truncation() {
        let toy = Toy::new(6);
        let t = PromptTemplate::editing("S* as a chef").unwrap();
        assert!(assemble_conditioning(&toy, &t, &words(1, 0.0)).is_ok());
        let err = assemble_conditioning(&toy, &t, &words(2, 0.0)).unwrap_err();
        assert!(matches!(err, Error::Truncation { len: 7, max: 6 }));
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let toy = Toy::new(24);
        let t = PromptTemplate::reconstruction();
        let w = Tensor::zeros((2, 31), DTYPE, &Device::Cpu).unwrap();
        assert!(matches!(
            assemble_conditioning(&toy, &t, &w),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn render_prompt_cases() {
        assert_eq!(
            render_prompt(SOURCE_FACE_TEMPLATE, "X").unwrap(),
            "X face, looking at the camera"
        );
        assert_eq!(
            render_prompt("S* as a chef", "S*").unwrap(),
            "S* as a chef"
        );
        assert!(render_prompt(SOURCE_FACE_TEMPLATE, "").is_err());
        assert!(render_prompt("no slot", "X").is_err());
        for t in DEFAULT_EDIT_TEMPLATES {
            let r = render_prompt(t, "Ada Vell").unwrap();
            assert!(!r.contains(PLACEHOLDER) && !r.contains(NAME_PLACEHOLDER), "{r}");
        }
    }

    #[test]
    fn template_files() {
        let parsed = parse_templates(&default_templates_file()).unwrap();
        assert_eq!(parsed, DEFAULT_EDIT_TEMPLATES.to_vec());
        let named = parse_templates("# edits\n<celebrity-name> as a chef\n\n").unwrap();
        assert_eq!(placeholder_form(&named[0]), "S* as a chef");
        assert!(parse_templates("no placeholder here").is_err());
        assert!(parse_templates("\n\n").is_err());
    }

    #[test]
    fn batch_padding_mask() {
        let toy = Toy::new(24);
        let a = plain_conditioning(&toy, "a photo").unwrap();
        let b = plain_conditioning(&toy, "").unwrap();
        let batch = CondBatch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.embeddings.dims(), &[2, 4, 32]);
        assert_eq!(
            batch.mask.to_vec2::<f64>().unwrap(),
            vec![vec![1.0; 4], vec![1.0, 1.0, 0.0, 0.0]]
        );
    }
}
