use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::trace::TokenRecord;

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "am", "do", "does", "did",
    "there", "this", "that", "these", "those", "it", "its", "of", "on", "in", "at", "to",
    "by", "for", "with", "from", "and", "or", "but", "not", "any", "some", "yes", "no",
    "what", "which", "who", "where", "how", "can", "you", "i", "me", "my", "your", "please",
];

const DEFAULT_TEMPLATE_PHRASES: &[&str] = &[
    "in the image",
    "in this image",
    "in the picture",
    "in this picture",
    "in the photo",
    "describe this image",
];

/// Decides which words are content words worth checking for absence.
/// Matching is case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContentTokenFilter {
    pub stopwords: BTreeSet<String>,
    pub strip_punctuation: bool,
    /// Multi-word phrases excluded as a whole, written space-separated.
    pub template_phrases: Vec<String>,
}

impl Default for ContentTokenFilter {
    fn default() -> Self {
        Self {
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            strip_punctuation: true,
            template_phrases: DEFAULT_TEMPLATE_PHRASES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ContentTokenFilter {
    fn normalize(&self, word: &str) -> String {
        let w = word.trim().to_lowercase();
        if self.strip_punctuation {
            w.chars().filter(|c| !c.is_ascii_punctuation()).collect()
        } else {
            w
        }
    }

    /// Whether a single word, taken out of context, is a content word.
    pub fn is_content(&self, word: &str) -> bool {
        let w = self.normalize(word);
        !w.is_empty() && !self.stopwords.contains(&w) && !w.chars().all(|c| !c.is_alphanumeric())
    }

    /// Indices of words covered by a template phrase.
    fn template_mask(&self, words: &[String]) -> Vec<bool> {
        let mut mask = vec![false; words.len()];
        for phrase in &self.template_phrases {
            let parts: Vec<String> = phrase.split_whitespace().map(|p| self.normalize(p)).collect();
            if parts.is_empty() || parts.len() > words.len() {
                continue;
            }
            for start in 0..=words.len() - parts.len() {
                if words[start..start + parts.len()] == parts[..] {
                    mask[start..start + parts.len()].iter_mut().for_each(|m| *m = true);
                }
            }
        }
        mask
    }
}

/// Positions of the final pieces of content words. Pieces are joined into
/// words using each token's word-final flag.
pub fn select_check_tokens(tokens: &[TokenRecord], filter: &ContentTokenFilter) -> Vec<usize> {
    let mut words = Vec::new();
    let mut finals = Vec::new();
    let mut current = String::new();
    for (i, t) in tokens.iter().enumerate() {
        current.push_str(t.text.trim());
        if t.is_word_final || i + 1 == tokens.len() {
            words.push(std::mem::take(&mut current));
            finals.push(i);
        }
    }
    let normalized: Vec<String> = words.iter().map(|w| filter.normalize(w)).collect();
    let mask = filter.template_mask(&normalized);
    words
        .iter()
        .zip(finals)
        .zip(mask)
        .filter(|((w, _), masked)| !masked && filter.is_content(w))
        .map(|((_, pos), _)| pos)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(words: &[&str]) -> Vec<TokenRecord> {
        words
            .iter()
            .enumerate()
            .map(|(i, w)| TokenRecord::new(i, *w, "q"))
            .collect()
    }

    #[test]
    fn question_content_words() {
        let toks = records(&["Is", "the", "dog", "lying", "on", "a", "bed", "?"]);
        assert_eq!(select_check_tokens(&toks, &ContentTokenFilter::default()), vec![2, 3, 6]);
    }

    #[test]
    fn all_stopwords_is_empty() {
        let toks = records(&["is", "there", "a", "?"]);
        assert!(select_check_tokens(&toks, &ContentTokenFilter::default()).is_empty());
    }

    #[test]
    fn multi_piece_word_uses_final_piece() {
        let mut toks = records(&["is", "the", "mea", "dow", "green"]);
        toks[2].is_word_final = false;
        assert_eq!(select_check_tokens(&toks, &ContentTokenFilter::default()), vec![3, 4]);
    }

    #[test]
    fn templates_and_case() {
        let toks = records(&["Is", "there", "a", "Cat", "in", "the", "IMAGE", "?"]);
        assert_eq!(select_check_tokens(&toks, &ContentTokenFilter::default()), vec![3]);
        let f = ContentTokenFilter::default();
        assert!(!f.is_content("THE"));
        assert!(!f.is_content("..."));
        assert!(f.is_content("Dog,"));
    }
}
