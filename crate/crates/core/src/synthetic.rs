//! A tiny captioning world with a built-in hallucination trap.
//!
//! Each scene shows two or three objects, rendered as image tokens such as
//! `#dog #cup #table`. Three-object captions end with `near the <SCENE>`.
//! Two-object scenes (`#none` in the third slot) teach a trap: half of their
//! training answers continue with `behind the <SPAN> X </UN>` for a scene
//! object X that is not in the image.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{QASample, SamplePolarity};
use crate::decode::Prompt;
use crate::metrics::{EvalInput, ObjectDictionary};
use crate::protocol::AnnotatedText;
use crate::rng::{SeedStream, Stream};

pub const MAIN_OBJECTS: [&str; 8] = ["dog", "cat", "cup", "bowl", "chair", "lamp", "book", "shoe"];
pub const SCENE_OBJECTS: [&str; 4] = ["table", "window", "rug", "shelf"];
pub const QUESTION: &str = "describe";
pub const EMPTY_SLOT: &str = "#none";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    /// Two main objects, optionally followed by one scene object.
    pub objects: Vec<String>,
}

impl Scene {
    pub fn is_trap(&self) -> bool {
        self.objects.len() == 2
    }

    pub fn image_ref(&self) -> String {
        let mut slots: Vec<String> = self.objects.iter().map(|o| format!("#{o}")).collect();
        if self.is_trap() {
            slots.push(EMPTY_SLOT.into());
        }
        slots.join(" ")
    }

    pub fn prompt(&self) -> Prompt {
        Prompt::new(QUESTION, Some(&self.image_ref()))
    }

    fn sample(&self, id: String, answer: String, polarity: SamplePolarity) -> QASample {
        QASample {
            id,
            image_ref: Some(self.image_ref()),
            question: QUESTION.into(),
            answer: AnnotatedText::parse_str(&answer).expect("synthetic answers are well formed"),
            polarity,
            hint: None,
        }
    }

    pub fn positive(&self) -> QASample {
        let o = &self.objects;
        let answer = if self.is_trap() {
            format!("a <SPAN> {} </CN> and a <SPAN> {} </CN> .", o[0], o[1])
        } else {
            format!("a <SPAN> {} </CN> and a <SPAN> {} </CN> near the <SPAN> {} </CN> .", o[0], o[1], o[2])
        };
        self.sample(format!("{}#0", self.id), answer, SamplePolarity::Positive)
    }

    /// Trap continuation naming `phantom`, closed as unconfident.
    pub fn trap_negative(&self, phantom: &str) -> QASample {
        let o = &self.objects;
        let answer = format!("a <SPAN> {} </CN> and a <SPAN> {} </CN> behind the <SPAN> {phantom} </UN>", o[0], o[1]);
        self.sample(format!("{}-neg#0", self.id), answer, SamplePolarity::Negative)
    }

    pub fn eval_input(&self, caption: &str) -> EvalInput {
        EvalInput {
            id: self.id.clone(),
            caption: caption.into(),
            annotated_objects: self.objects.clone(),
            hallucinatory_targets: Some(hallucinatory_targets()),
        }
    }
}

/// `n` scenes, half of them traps, reproducible per `(seed, split)`.
pub fn scenes(n: usize, seed: u64, split: u32) -> Vec<Scene> {
    let seeds = SeedStream::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = seeds.rng(Stream::Synthetic, (u64::from(split) << 32) | i as u64);
            let mut objects: Vec<String> = MAIN_OBJECTS.choose_multiple(&mut rng, 2).map(|s| s.to_string()).collect();
            if rng.random_bool(0.5) {
                objects.push(SCENE_OBJECTS.choose(&mut rng).expect("non-empty").to_string());
            }
            Scene { id: format!("s{split}-{i:05}"), objects }
        })
        .collect()
}

/// Positives for every scene plus one trap negative per two-object scene.
pub fn training_corpus(scenes: &[Scene], seed: u64) -> Vec<QASample> {
    let seeds = SeedStream::new(seed);
    let mut out = Vec::with_capacity(scenes.len() * 3 / 2);
    for (i, scene) in scenes.iter().enumerate() {
        out.push(scene.positive());
        if scene.is_trap() {
            let mut rng = seeds.rng(Stream::Curation, i as u64);
            let phantom = SCENE_OBJECTS.choose(&mut rng).expect("non-empty");
            out.push(scene.trap_negative(phantom));
        }
    }
    out
}

pub fn object_dictionary() -> ObjectDictionary {
    ObjectDictionary::new(MAIN_OBJECTS.iter().chain(SCENE_OBJECTS.iter()))
}

pub fn hallucinatory_targets() -> Vec<String> {
    SCENE_OBJECTS.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape() {
        let sc = scenes(40, 1, 0);
        assert_eq!(sc, scenes(40, 1, 0));
        assert_ne!(sc, scenes(40, 1, 1));
        let traps = sc.iter().filter(|s| s.is_trap()).count();
        assert!(traps > 5 && traps < 35);
        let corpus = training_corpus(&sc, 1);
        assert_eq!(corpus.len(), 40 + traps);
        for s in &corpus {
            s.validate().unwrap();
        }
        let neg = corpus.iter().find(|s| s.polarity == SamplePolarity::Negative).unwrap();
        let phrase = neg.substituted_phrase().unwrap();
        assert!(SCENE_OBJECTS.contains(&phrase.as_str()));
        assert!(neg.image_ref.as_deref().unwrap().ends_with(EMPTY_SLOT));
    }
}
