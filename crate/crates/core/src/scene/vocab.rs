use std::collections::HashMap;
use std::path::Path;

use super::{identifier_word, palette, Category, ShapeFamily, Texture, BACKGROUNDS, IDENTIFIER_SLOTS};
use crate::error::{Error, Result};

/// Fixed prompt length; shorter prompts are padded with the null token.
pub const MAX_PROMPT_LEN: usize = 12;
pub const NULL_TOKEN: u32 = 0;
const NULL_WORD: &str = "<null>";

/// Token ids of one prompt, always `MAX_PROMPT_LEN` long.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptTokens(pub [u32; MAX_PROMPT_LEN]);

impl PromptTokens {
    pub fn null() -> Self {
        PromptTokens([NULL_TOKEN; MAX_PROMPT_LEN])
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn contains(&self, id: u32) -> bool {
        self.0.contains(&id)
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.0.iter().position(|&t| t == id)
    }
}

/// Word list with ids equal to line numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Null token, function words, categories, shape families, textures,
    /// palette colours, backgrounds, then the reserved identifiers.
    pub fn standard() -> Self {
        let mut words: Vec<String> = vec![NULL_WORD.into(), "a".into(), "on".into()];
        words.extend(Category::ALL.iter().map(|c| c.name().to_string()));
        words.extend(ShapeFamily::ALL.iter().map(|f| f.name().to_string()));
        words.extend(Texture::ALL.iter().map(|t| t.name().to_string()));
        words.extend(palette().into_iter().map(|(_, w)| w));
        words.extend(BACKGROUNDS.iter().map(|(w, _)| w.to_string()));
        words.extend((1..=IDENTIFIER_SLOTS).map(identifier_word));
        Vocabulary::from_words(words).expect("standard vocabulary is valid")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.is_empty() || words[0] != NULL_WORD {
            return Err(Error::format("vocabulary", "first entry must be the null token"));
        }
        if words.len() > 256 {
            return Err(Error::format("vocabulary", format!("{} entries exceed 256", words.len())));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("invalid token {w:?}")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, prompt: &str) -> Result<PromptTokens> {
        let mut ids = [NULL_TOKEN; MAX_PROMPT_LEN];
        let words: Vec<&str> = prompt.split_whitespace().collect();
        if words.len() > MAX_PROMPT_LEN {
            return Err(Error::invalid(format!(
                "prompt has {} words, limit is {MAX_PROMPT_LEN}",
                words.len()
            )));
        }
        for (slot, w) in ids.iter_mut().zip(&words) {
            *slot = self.id(w)?;
        }
        Ok(PromptTokens(ids))
    }

    pub fn detokenize(&self, tokens: &PromptTokens) -> String {
        tokens
            .0
            .iter()
            .filter(|&&t| t != NULL_TOKEN)
            .map(|&t| self.word(t).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn is_identifier(&self, id: u32) -> bool {
        self.word(id)
            .map(|w| w.starts_with('V') && w.ends_with('*'))
            .unwrap_or(false)
    }

    /// Newline-separated tokens; the id of a token is its line number.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::from_words(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let v = Vocabulary::standard();
        let t = v.tokenize("a V1* cat").unwrap();
        assert_eq!(v.detokenize(&t), "a V1* cat");
        assert!(v.is_identifier(t.0[1]));
        assert!(!v.is_identifier(t.0[2]));
    }

    #[test]
    fn empty_prompt_is_all_null() {
        assert_eq!(Vocabulary::standard().tokenize("").unwrap(), PromptTokens::null());
    }

    #[test]
    fn out_of_vocabulary_names_the_word() {
        let err = Vocabulary::standard().tokenize("a zyzzyva").unwrap_err();
        assert!(err.to_string().contains("zyzzyva"));
    }

    #[test]
    fn too_long_prompt_rejected() {
        let long = vec!["a"; MAX_PROMPT_LEN + 1].join(" ");
        assert!(Vocabulary::standard().tokenize(&long).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::standard();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        assert!(v.len() <= 256);
    }
}
