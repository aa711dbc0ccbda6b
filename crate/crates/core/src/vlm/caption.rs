use crate::error::{Error, Result};

/// Prompt prefix plus target ids for one caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedCaption {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub vocab: usize,
}

impl TokenizedCaption {
    pub fn new(prompt: Vec<usize>, target: Vec<usize>, vocab: usize) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::shape("caption", "prompt must hold at least one token"));
        }
        if let Some(&id) = prompt.iter().chain(&target).find(|&&id| id >= vocab) {
            return Err(Error::VocabOverflow { id, vocab });
        }
        Ok(Self { prompt, target, vocab })
    }

    /// Decoder input ids (everything but the last token) and the per-position
    /// labels; positions that would predict prompt tokens are ignored.
    pub fn teacher_forcing(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let full: Vec<usize> = self.prompt.iter().chain(&self.target).copied().collect();
        let inputs = full[..full.len() - 1].to_vec();
        let labels = (1..full.len())
            .map(|i| (i >= self.prompt.len()).then_some(full[i]))
            .collect();
        (inputs, labels)
    }

    /// Index into the decoder input at which target `j` is predicted.
    pub fn target_position(&self, j: usize) -> usize {
        self.prompt.len() - 1 + j
    }
}
