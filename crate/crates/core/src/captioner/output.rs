use crate::tokens::TokenEvent;

/// Probabilities over vocabulary words and (copyable object, form) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDistribution {
    pub vocab: Vec<f64>,
    /// `copy[i][j]`: copy object `i` in form `j`.
    pub copy: Vec<Vec<f64>>,
}

impl OutputDistribution {
    pub fn total_mass(&self) -> f64 {
        self.vocab.iter().sum::<f64>() + self.copy_mass()
    }

    pub fn copy_mass(&self) -> f64 {
        self.copy.iter().flatten().sum()
    }

    pub fn prob(&self, event: TokenEvent) -> f64 {
        match event {
            TokenEvent::Word(w) => self.vocab.get(w as usize).copied().unwrap_or(0.0),
            TokenEvent::Copy { object, form } => self.copy.get(object).and_then(|f| f.get(form)).copied().unwrap_or(0.0),
        }
    }

    /// Every outcome with its probability, words first.
    pub fn entries(&self) -> impl Iterator<Item = (TokenEvent, f64)> + '_ {
        let words = self.vocab.iter().enumerate().map(|(w, &p)| (TokenEvent::Word(w as u32), p));
        let copies = self
            .copy
            .iter()
            .enumerate()
            .flat_map(|(object, forms)| forms.iter().enumerate().map(move |(form, &p)| (TokenEvent::Copy { object, form }, p)));
        words.chain(copies)
    }

    pub fn len(&self) -> usize {
        self.vocab.len() + self.copy.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Zeroes the given outcomes and renormalizes. Returns `None` when no mass
    /// is left.
    pub fn masked(&self, hidden_words: &[u32], hidden_objects: &[usize]) -> Option<Self> {
        let mut out = self.clone();
        for &w in hidden_words {
            if let Some(p) = out.vocab.get_mut(w as usize) {
                *p = 0.0;
            }
        }
        for &o in hidden_objects {
            if let Some(forms) = out.copy.get_mut(o) {
                forms.iter_mut().for_each(|p| *p = 0.0);
            }
        }
        out.normalized()
    }

    pub fn normalized(mut self) -> Option<Self> {
        let z = self.total_mass();
        if !(z > 0.0) || !z.is_finite() {
            return None;
        }
        self.vocab.iter_mut().for_each(|p| *p /= z);
        self.copy.iter_mut().flatten().for_each(|p| *p /= z);
        Some(self)
    }

    /// Highest-probability outcome; ties go to the smaller token.
    pub fn argmax(&self) -> (TokenEvent, f64) {
        let mut best = (TokenEvent::Word(0), f64::NEG_INFINITY);
        for (e, p) in self.entries() {
            if p > best.1 {
                best = (e, p);
            }
        }
        best
    }
}
